#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "pcql/nn/tensor.hpp"

namespace pcql::nn {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Gradient after Tape::backward (zeros if the node received none).
  Tensor grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitive operations in creation order, which is a topological
// order of the computation graph; backward replays it in reverse so each node
// is visited once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Leaf bound to a parameter: backward adds its gradient into p.grad.
  Var parameter(Parameter& p);

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Op-implementation interface.
  Var record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward, std::string_view op);
  const Matrix& value_of(std::size_t id) const { return nodes_[id].value.matrix(); }
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, const Matrix& g);

 private:
  friend class Var;
  struct Node {
    Tensor value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops broadcast b when it is 1x1, 1xN or Mx1.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var minimum(Var a, Var b);  // same shape
Var concat_cols(Var a, Var b);
Var repeat_rows(Var a, Index times);  // stacks `times` copies of a vertically
Var reshape(Var a, Index rows, Index cols);
Var detach(Var a);

// Reductions. axis 0 collapses rows (-> 1xN), axis 1 collapses columns (-> Mx1).
Var sum(Var a);
Var mean(Var a);
Var sum(Var a, int axis);
Var mean(Var a, int axis);
Var logsumexp(Var a, int axis);

// Row-wise distributions.
Var softmax(Var a);
Var log_softmax(Var a);

// -mean over rows of softmax(p / tau) . log softmax(q / tau).
Var softmax_xent(Var p, Var q, double tau);

// Euclidean norm of every row (Mx1); the subgradient at zero is zero.
Var row_norm(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator-(Var a) { return neg(a); }

// Plain-value kernels shared with the tape-free inference path.
Matrix logsumexp_rows(const Matrix& a);
Matrix softmax_rows(const Matrix& a);

}  // namespace pcql::nn
