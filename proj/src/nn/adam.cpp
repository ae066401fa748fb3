#include "pcql/nn/adam.hpp"

#include <cmath>

#include "pcql/core/errors.hpp"
#include "pcql/nn/checkpoint.hpp"

namespace pcql::nn {

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& config) {
  if (!(config.learning_rate >= 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.epsilon > 0.0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
  AdamState s;
  s.config = config;
  for (const auto* p : params) {
    s.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state) {
  if (params.size() != state.m.size()) throw SchemaError("adam_step: parameter count differs from optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i]->value;
    const auto& g = params[i]->grad;
    if (g.rows() != v.rows() || g.cols() != v.cols() || state.m[i].rows() != v.rows() ||
        state.m[i].cols() != v.cols()) {
      throw SchemaError("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
    if (!g.all_finite()) throw NumericError("adam_step: nonfinite gradient at parameter " + std::to_string(i));
  }
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i]->grad.matrix();
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    auto mhat = m.array() / bc1;
    auto vhat = v.array() / bc2;
    params[i]->value.matrix().array() -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
  }
}

nlohmann::json adam_to_json(const AdamState& state) {
  nlohmann::json j;
  j["learning_rate"] = state.config.learning_rate;
  j["beta1"] = state.config.beta1;
  j["beta2"] = state.config.beta2;
  j["epsilon"] = state.config.epsilon;
  j["step"] = state.step;
  auto m = nlohmann::json::array();
  auto v = nlohmann::json::array();
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    m.push_back(matrix_to_json(state.m[i]));
    v.push_back(matrix_to_json(state.v[i]));
  }
  j["m"] = std::move(m);
  j["v"] = std::move(v);
  return j;
}

AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  try {
    s.config.learning_rate = j.at("learning_rate").get<double>();
    s.config.beta1 = j.at("beta1").get<double>();
    s.config.beta2 = j.at("beta2").get<double>();
    s.config.epsilon = j.at("epsilon").get<double>();
    s.step = j.at("step").get<std::int64_t>();
    for (const auto& x : j.at("m")) s.m.push_back(matrix_from_json(x));
    for (const auto& x : j.at("v")) s.v.push_back(matrix_from_json(x));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("AdamState: ") + e.what());
  }
  if (s.m.size() != s.v.size()) throw SchemaError("AdamState: moment lists differ in length");
  return s;
}

}  // namespace pcql::nn
