#include "pcql/nn/tensor.hpp"

#include <string>

#include "pcql/core/errors.hpp"

namespace pcql::nn {

Tensor::Tensor(Index rows, Index cols, double fill) : m_(Matrix::Constant(rows, cols, fill)) {}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = r == 0 ? 0 : static_cast<Index>(rows.begin()->size());
  Tensor t(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) throw SchemaError("Tensor::from_rows: ragged rows");
    Index j = 0;
    for (double v : row) t(i, j++) = v;
    ++i;
  }
  return t;
}

Tensor Tensor::column(std::span<const double> values) {
  Tensor t(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) t(static_cast<Index>(i), 0) = values[i];
  return t;
}

Tensor Tensor::row(std::span<const double> values) {
  Tensor t(1, static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) t(0, static_cast<Index>(i)) = values[i];
  return t;
}

double Tensor::item() const {
  if (m_.size() != 1) throw SchemaError("Tensor::item on a tensor with " + std::to_string(m_.size()) + " values");
  return m_(0, 0);
}

}  // namespace pcql::nn
