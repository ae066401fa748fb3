#pragma once

#include <Eigen/Dense>
#include <array>

#include "pcql/eval/eval.hpp"

namespace pcql::testing {

// Three states, two actions, deterministic transitions. States are one-hot
// encoded; the action is the scalar 0 or 1.
struct TabularMdp {
  std::array<std::array<int, 2>, 3> next = {{{1, 2}, {2, 0}, {0, 1}}};
  std::array<std::array<double, 2>, 3> reward = {{{1.0, 0.0}, {0.5, -0.5}, {0.0, 1.0}}};
  std::array<int, 3> policy = {1, 0, 1};
  double gamma = 0.9;
};

// Exact Q^pi(s0, pi(s0)) from the Bellman linear system.
inline double exact_policy_value(const TabularMdp& m, int s0) {
  Eigen::Matrix3d p = Eigen::Matrix3d::Zero();
  Eigen::Vector3d r;
  for (int s = 0; s < 3; ++s) {
    const int a = m.policy[s];
    p(s, m.next[s][a]) = 1.0;
    r(s) = m.reward[s][a];
  }
  const Eigen::Vector3d v = (Eigen::Matrix3d::Identity() - m.gamma * p).lu().solve(r);
  return v(s0);
}

// Every (s, a) pair appears `copies` times; next_a is the evaluated policy.
inline eval::FqeProblem tabular_problem(const TabularMdp& m, int copies, int s0) {
  const nn::Index n = 6 * copies;
  eval::FqeProblem p;
  p.s = nn::Matrix::Zero(n, 3);
  p.s2 = nn::Matrix::Zero(n, 3);
  p.a.resize(n, 1);
  p.r.resize(n, 1);
  p.done = nn::Matrix::Zero(n, 1);
  p.next_a.resize(n, 1);
  nn::Index row = 0;
  for (int c = 0; c < copies; ++c) {
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 2; ++a, ++row) {
        const int s2 = m.next[s][a];
        p.s(row, s) = 1.0;
        p.a(row, 0) = a;
        p.r(row, 0) = m.reward[s][a];
        p.s2(row, s2) = 1.0;
        p.next_a(row, 0) = m.policy[s2];
      }
    }
  }
  p.s0 = nn::Matrix::Zero(1, 3);
  p.s0(0, s0) = 1.0;
  p.a0 = nn::Matrix::Constant(1, 1, m.policy[s0]);
  return p;
}

}  // namespace pcql::testing
