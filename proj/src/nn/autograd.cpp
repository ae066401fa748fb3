#include "pcql/nn/autograd.hpp"

#include <cmath>
#include <string>

#include "pcql/core/errors.hpp"

namespace pcql::nn {

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->nodes_[id_].value; }

Tensor Var::grad() const {
  const auto& n = tape_->nodes_[id_];
  if (n.grad.size() == 0) return Tensor(n.value.rows(), n.value.cols(), 0.0);
  return Tensor(n.grad);
}

bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

Var Tape::constant(Tensor value) {
  return record(std::move(value.matrix()), {}, nullptr, "constant");
}

Var Tape::variable(Tensor value) {
  Var v = record(std::move(value.matrix()), {}, nullptr, "variable");
  nodes_[v.id_].requires_grad = true;
  return v;
}

Var Tape::parameter(Parameter& p) {
  Var v = record(p.value.matrix(), {}, nullptr, "parameter");
  nodes_[v.id_].requires_grad = true;
  nodes_[v.id_].param = &p;
  return v;
}

Var Tape::record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward, std::string_view op) {
  if (!value.allFinite()) throw NumericError("nonfinite value produced by " + std::string(op));
  Node n;
  n.value = Tensor(std::move(value));
  for (auto p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss belongs to another tape");
  auto& root = nodes_[loss.id_];
  if (root.value.size() != 1) throw ContractError("backward: loss must be a scalar");
  if (!root.requires_grad) throw ContractError("backward: loss is detached from every parameter");
  if (backward_done_) throw ContractError("backward: tape already consumed");
  backward_done_ = true;
  root.grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (!n.grad.allFinite()) throw NumericError("backward: nonfinite gradient");
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto& g = n.param->grad;
      if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) n.param->zero_grad();
      g.matrix() += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

namespace {

enum class Bcast { kSame, kScalar, kRow, kCol };

Bcast broadcast_kind(const Matrix& a, const Matrix& b, std::string_view op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  throw SchemaError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

Matrix expand(const Matrix& b, Bcast k, Index rows, Index cols) {
  switch (k) {
    case Bcast::kSame:
      return b;
    case Bcast::kScalar:
      return Matrix::Constant(rows, cols, b(0, 0));
    case Bcast::kRow:
      return b.replicate(rows, 1);
    case Bcast::kCol:
      return b.replicate(1, cols);
  }
  return b;
}

Matrix reduce(const Matrix& g, Bcast k) {
  switch (k) {
    case Bcast::kSame:
      return g;
    case Bcast::kScalar:
      return Matrix::Constant(1, 1, g.sum());
    case Bcast::kRow:
      return g.colwise().sum();
    case Bcast::kCol:
      return g.rowwise().sum();
  }
  return g;
}

void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

}  // namespace

Matrix logsumexp_rows(const Matrix& a) {
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out(i, 0) = m + std::log((a.row(i).array() - m).exp().sum());
  }
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    auto e = (a.row(i).array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const auto& A = a.tape().value_of(a.id());
  const auto& B = b.tape().value_of(b.id());
  if (A.cols() != B.rows()) {
    throw SchemaError("matmul: inner dimensions " + std::to_string(A.cols()) + " and " + std::to_string(B.rows()));
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(A * B, {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value_of(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value_of(ia).transpose() * g);
  }, "matmul");
}

Var add(Var a, Var b) {
  same_tape(a, b);
  const auto& A = a.tape().value_of(a.id());
  const auto& B = b.tape().value_of(b.id());
  const auto k = broadcast_kind(A, B, "add");
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(A + expand(B, k, A.rows(), A.cols()), {ia, ib}, [ia, ib, k](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, reduce(g, k));
  }, "add");
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  const auto& A = a.tape().value_of(a.id());
  const auto& B = b.tape().value_of(b.id());
  const auto k = broadcast_kind(A, B, "sub");
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(A - expand(B, k, A.rows(), A.cols()), {ia, ib}, [ia, ib, k](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, -reduce(g, k));
  }, "sub");
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  const auto& A = a.tape().value_of(a.id());
  const auto& B = b.tape().value_of(b.id());
  const auto k = broadcast_kind(A, B, "mul");
  const auto ia = a.id(), ib = b.id();
  Matrix value = A.cwiseProduct(expand(B, k, A.rows(), A.cols()));
  return a.tape().record(std::move(value), {ia, ib}, [ia, ib, k](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto& A = t.value_of(ia);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(expand(t.value_of(ib), k, A.rows(), A.cols())));
    if (t.requires_grad(ib)) t.accumulate(ib, reduce(g.cwiseProduct(A), k));
  }, "mul");
}

Var scale(Var a, double s) {
  const auto ia = a.id();
  return a.tape().record(a.tape().value_of(ia) * s, {ia}, [ia, s](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad_of(self) * s);
  }, "scale");
}

Var add_scalar(Var a, double s) {
  const auto ia = a.id();
  return a.tape().record(a.tape().value_of(ia).array() + s, {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad_of(self));
  }, "add_scalar");
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.tape().value_of(ia).cwiseMax(0.0), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& x = t.value_of(ia);
    t.accumulate(ia, (x.array() > 0.0).select(t.grad_of(self), 0.0));
  }, "relu");
}

Var sigmoid(Var a) {
  const auto ia = a.id();
  Matrix s = (1.0 + (-a.tape().value_of(ia).array()).exp()).inverse().matrix();
  return a.tape().record(std::move(s), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& y = t.value_of(self);
    t.accumulate(ia, (t.grad_of(self).array() * y.array() * (1.0 - y.array())).matrix());
  }, "sigmoid");
}

Var exp(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.tape().value_of(ia).array().exp().matrix(), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad_of(self).cwiseProduct(t.value_of(self)));
  }, "exp");
}

Var log(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.tape().value_of(ia).array().log().matrix(), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.grad_of(self).cwiseQuotient(t.value_of(ia)));
  }, "log");
}

Var square(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.tape().value_of(ia).array().square().matrix(), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, 2.0 * t.grad_of(self).cwiseProduct(t.value_of(ia)));
  }, "square");
}

Var minimum(Var a, Var b) {
  same_tape(a, b);
  const auto& A = a.tape().value_of(a.id());
  const auto& B = b.tape().value_of(b.id());
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw SchemaError("minimum: shape mismatch");
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(A.cwiseMin(B), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    const auto take_a = (t.value_of(ia).array() <= t.value_of(ib).array());
    t.accumulate(ia, take_a.select(g, 0.0));
    t.accumulate(ib, take_a.select(0.0, g));
  }, "minimum");
}

Var concat_cols(Var a, Var b) {
  same_tape(a, b);
  const auto& A = a.tape().value_of(a.id());
  const auto& B = b.tape().value_of(b.id());
  if (A.rows() != B.rows()) throw SchemaError("concat_cols: row counts differ");
  Matrix out(A.rows(), A.cols() + B.cols());
  out << A, B;
  const auto ia = a.id(), ib = b.id();
  const Index ca = A.cols(), cb = B.cols();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, ca, cb](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.leftCols(ca));
    if (t.requires_grad(ib)) t.accumulate(ib, g.rightCols(cb));
  }, "concat_cols");
}

Var repeat_rows(Var a, Index times) {
  if (times < 1) throw SchemaError("repeat_rows: times must be >= 1");
  const auto ia = a.id();
  const auto& A = a.tape().value_of(ia);
  const Index r = A.rows();
  return a.tape().record(A.replicate(times, 1), {ia}, [ia, r, times](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    Matrix acc = g.topRows(r);
    for (Index k = 1; k < times; ++k) acc += g.middleRows(k * r, r);
    t.accumulate(ia, acc);
  }, "repeat_rows");
}

Var reshape(Var a, Index rows, Index cols) {
  const auto ia = a.id();
  const auto& A = a.tape().value_of(ia);
  if (rows * cols != A.size()) throw SchemaError("reshape: element count mismatch");
  Matrix out = Eigen::Map<const Matrix>(A.data(), rows, cols);
  const Index r0 = A.rows(), c0 = A.cols();
  return a.tape().record(std::move(out), {ia}, [ia, r0, c0](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r0, c0));
  }, "reshape");
}

Var detach(Var a) { return a.tape().constant(Tensor(a.tape().value_of(a.id()))); }

Var sum(Var a) {
  const auto ia = a.id();
  const auto& A = a.tape().value_of(ia);
  const Index r = A.rows(), c = A.cols();
  return a.tape().record(Matrix::Constant(1, 1, A.sum()), {ia}, [ia, r, c](Tape& t, std::size_t self) {
    t.accumulate(ia, Matrix::Constant(r, c, t.grad_of(self)(0, 0)));
  }, "sum");
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.tape().value_of(a.id()).size());
  if (n == 0) throw SchemaError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var sum(Var a, int axis) {
  const auto ia = a.id();
  const auto& A = a.tape().value_of(ia);
  const Index r = A.rows(), c = A.cols();
  if (axis == 0) {
    return a.tape().record(A.colwise().sum(), {ia}, [ia, r](Tape& t, std::size_t self) {
      t.accumulate(ia, t.grad_of(self).replicate(r, 1));
    }, "sum0");
  }
  if (axis == 1) {
    return a.tape().record(A.rowwise().sum(), {ia}, [ia, c](Tape& t, std::size_t self) {
      t.accumulate(ia, t.grad_of(self).replicate(1, c));
    }, "sum1");
  }
  throw SchemaError("sum: axis must be 0 or 1");
}

Var mean(Var a, int axis) {
  const auto& A = a.tape().value_of(a.id());
  const Index n = axis == 0 ? A.rows() : A.cols();
  if (n == 0) throw SchemaError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var logsumexp(Var a, int axis) {
  const auto ia = a.id();
  const auto& A = a.tape().value_of(ia);
  if (axis != 0 && axis != 1) throw SchemaError("logsumexp: axis must be 0 or 1");
  if ((axis == 1 && A.cols() == 0) || (axis == 0 && A.rows() == 0)) throw SchemaError("logsumexp: empty axis");
  if (axis == 1) {
    return a.tape().record(logsumexp_rows(A), {ia}, [ia](Tape& t, std::size_t self) {
      Matrix s = softmax_rows(t.value_of(ia));
      t.accumulate(ia, (s.array().colwise() * t.grad_of(self).col(0).array()).matrix());
    }, "logsumexp1");
  }
  Matrix At = A.transpose();
  Matrix out = logsumexp_rows(At).transpose();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    Matrix st = softmax_rows(t.value_of(ia).transpose());
    Matrix s = st.transpose();
    t.accumulate(ia, (s.array().rowwise() * t.grad_of(self).row(0).array()).matrix());
  }, "logsumexp0");
}

Var softmax(Var a) {
  const auto ia = a.id();
  return a.tape().record(softmax_rows(a.tape().value_of(ia)), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& s = t.value_of(self);
    const auto& g = t.grad_of(self);
    Matrix dot = g.cwiseProduct(s).rowwise().sum();
    t.accumulate(ia, (s.array() * (g.array().colwise() - dot.col(0).array())).matrix());
  }, "softmax");
}

Var log_softmax(Var a) {
  const auto ia = a.id();
  const auto& A = a.tape().value_of(ia);
  Matrix out = A - logsumexp_rows(A).replicate(1, A.cols());
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_of(self);
    Matrix s = t.value_of(self).array().exp().matrix();
    Matrix gsum = g.rowwise().sum();
    t.accumulate(ia, g - (s.array().colwise() * gsum.col(0).array()).matrix());
  }, "log_softmax");
}

Var softmax_xent(Var p, Var q, double tau) {
  if (!(tau > 0.0)) throw DomainError("softmax_xent: temperature must be positive");
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw SchemaError("softmax_xent: shape mismatch");
  Var target = softmax(scale(p, 1.0 / tau));
  Var logq = log_softmax(scale(q, 1.0 / tau));
  return neg(mean(sum(mul(target, logq), 1)));
}

Var row_norm(Var a) {
  const auto ia = a.id();
  Matrix n = a.tape().value_of(ia).rowwise().norm();
  return a.tape().record(std::move(n), {ia}, [ia](Tape& t, std::size_t self) {
    const auto& x = t.value_of(ia);
    const auto& nrm = t.value_of(self);
    const auto& g = t.grad_of(self);
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
      if (nrm(i, 0) > 0.0) out.row(i) = x.row(i) * (g(i, 0) / nrm(i, 0));
    }
    t.accumulate(ia, out);
  }, "row_norm");
}

}  // namespace pcql::nn
