#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <vector>

#include "pcql/nn/autograd.hpp"

namespace pcql::testing {

using LossFn = std::function<nn::Var(nn::Tape&, const std::vector<nn::Var>&)>;

// Norm-wise relative error between the tape gradient and central differences
// for every leaf, taking the worst leaf.
inline double gradcheck(const LossFn& f, std::vector<nn::Matrix> leaves, double h = 1e-5) {
  std::vector<nn::Matrix> analytic;
  {
    nn::Tape tape;
    std::vector<nn::Var> vars;
    for (const auto& m : leaves) vars.push_back(tape.variable(nn::Tensor(m)));
    auto loss = f(tape, vars);
    tape.backward(loss);
    for (auto& v : vars) analytic.push_back(v.grad().matrix());
  }
  auto eval = [&](const std::vector<nn::Matrix>& at) {
    nn::Tape tape;
    std::vector<nn::Var> vars;
    for (const auto& m : at) vars.push_back(tape.constant(nn::Tensor(m)));
    return f(tape, vars).value().item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    nn::Matrix numeric(leaves[k].rows(), leaves[k].cols());
    for (nn::Index i = 0; i < leaves[k].size(); ++i) {
      const double x0 = leaves[k].data()[i];
      leaves[k].data()[i] = x0 + h;
      const double up = eval(leaves);
      leaves[k].data()[i] = x0 - h;
      const double down = eval(leaves);
      leaves[k].data()[i] = x0;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic[k].norm(), numeric.norm(), 1e-8});
    worst = std::max(worst, (analytic[k] - numeric).norm() / scale);
  }
  return worst;
}

// Same check against network parameters: f must rebuild its loss on the
// tape it is given, registering the parameters through their networks.
// When `numeric` is given, finite differences are taken on it instead of f;
// this is how losses with a stop-gradient are checked (numeric holds the
// detached quantities fixed at their current values).
inline double param_gradcheck(const std::vector<nn::Parameter*>& params,
                              const std::function<nn::Var(nn::Tape&)>& f, double h = 1e-5,
                              std::function<nn::Var(nn::Tape&)> numeric = {}) {
  if (!numeric) numeric = f;
  for (auto* p : params) p->zero_grad();
  {
    nn::Tape tape;
    tape.backward(f(tape));
  }
  double diff = 0.0, an = 0.0, nu = 0.0;
  for (auto* p : params) {
    auto& v = p->value.matrix();
    for (nn::Index i = 0; i < v.size(); ++i) {
      const double x0 = v.data()[i];
      v.data()[i] = x0 + h;
      double up, down;
      {
        nn::Tape t;
        up = numeric(t).value().item();
      }
      v.data()[i] = x0 - h;
      {
        nn::Tape t;
        down = numeric(t).value().item();
      }
      v.data()[i] = x0;
      const double num = (up - down) / (2.0 * h);
      const double ana = p->grad.matrix().data()[i];
      diff += (num - ana) * (num - ana);
      an += ana * ana;
      nu += num * num;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(an), std::sqrt(nu), 1e-8});
}

inline nn::Matrix random_matrix(nn::Index r, nn::Index c, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::srand(seed);
  nn::Matrix m = nn::Matrix::Random(r, c);
  return (m.array() + 1.0) * 0.5 * (hi - lo) + lo;
}

}  // namespace pcql::testing
