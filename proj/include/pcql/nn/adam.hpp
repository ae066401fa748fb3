#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "pcql/nn/tensor.hpp"

namespace pcql::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& config);

// Bias-corrected Adam update using each parameter's accumulated grad.
// Throws NumericError on a nonfinite gradient before touching any parameter.
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

nlohmann::json adam_to_json(const AdamState& state);
AdamState adam_from_json(const nlohmann::json& j);

}  // namespace pcql::nn
