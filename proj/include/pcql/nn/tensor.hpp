#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace pcql::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Dense row-major 2-D tensor of doubles. Batches are rows.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Index rows, Index cols, double fill = 0.0);
  explicit Tensor(Matrix values) : m_(std::move(values)) {}

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor column(std::span<const double> values);
  static Tensor row(std::span<const double> values);

  std::array<std::size_t, 2> shape() const {
    return {static_cast<std::size_t>(m_.rows()), static_cast<std::size_t>(m_.cols())};
  }
  Index rows() const { return m_.rows(); }
  Index cols() const { return m_.cols(); }
  Index size() const { return m_.size(); }

  double& operator()(Index r, Index c) { return m_(r, c); }
  double operator()(Index r, Index c) const { return m_(r, c); }

  // Value of a 1x1 tensor.
  double item() const;

  const Matrix& matrix() const { return m_; }
  Matrix& matrix() { return m_; }
  std::span<const double> values() const { return {m_.data(), static_cast<std::size_t>(m_.size())}; }
  std::vector<double> to_vector() const { return {m_.data(), m_.data() + m_.size()}; }

  bool all_finite() const { return m_.allFinite(); }

 private:
  Matrix m_;
};

struct Parameter {
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.rows(), value.cols(), 0.0); }
};

}  // namespace pcql::nn
