#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcql/nn/autograd.hpp"

namespace pcql::nn {

enum class Activation { kIdentity, kRelu, kSigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Fully connected network with rectifier hidden layers. Weights are stored
// as (fan_in x fan_out) so a batch of row vectors multiplies on the left.
class MlpNetwork {
 public:
  MlpNetwork() = default;
  // widths = {input, hidden..., output}; at least two entries.
  MlpNetwork(std::vector<Index> widths, Activation output, std::mt19937_64& rng);

  Var forward(Tape& tape, Var input);
  Matrix predict(const Matrix& input) const;

  const std::vector<Index>& widths() const { return widths_; }
  Index input_width() const { return widths_.front(); }
  Index output_width() const { return widths_.back(); }
  Activation output_activation() const { return output_; }
  std::size_t parameter_count() const;

  // Canonical order: W0, b0, W1, b1, ...
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void zero_grad();

  // target <- (1 - rate) * target + rate * source
  void soft_update_from(const MlpNetwork& source, double rate);

  nlohmann::json to_json() const;
  static MlpNetwork from_json(const nlohmann::json& j);

 private:
  void check_input(Index cols) const;

  std::vector<Index> widths_;
  Activation output_ = Activation::kIdentity;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

// Sum of squared gradient entries, square-rooted.
double grad_norm(const std::vector<Parameter*>& params);

}  // namespace pcql::nn
