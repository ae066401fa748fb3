#include "pcql/nn/mlp.hpp"

#include <cmath>

#include "pcql/core/errors.hpp"
#include "pcql/nn/checkpoint.hpp"

namespace pcql::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kIdentity:
      return "identity";
    case Activation::kRelu:
      return "relu";
    case Activation::kSigmoid:
      return "sigmoid";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::kIdentity;
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  throw SchemaError("unknown activation '" + s + "'");
}

MlpNetwork::MlpNetwork(std::vector<Index> widths, Activation output, std::mt19937_64& rng)
    : widths_(std::move(widths)), output_(output) {
  if (widths_.size() < 2) throw ConfigError("MlpNetwork needs at least input and output widths");
  for (auto w : widths_) {
    if (w < 1) throw ConfigError("MlpNetwork widths must be positive");
  }
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const Index in = widths_[l], out = widths_[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Parameter w{Tensor(in, out), Tensor(in, out)};
    for (Index i = 0; i < in; ++i) {
      for (Index j = 0; j < out; ++j) w.value(i, j) = dist(rng);
    }
    weights_.push_back(std::move(w));
    biases_.push_back(Parameter{Tensor(1, out), Tensor(1, out)});
  }
}

void MlpNetwork::check_input(Index cols) const {
  if (widths_.empty()) throw ContractError("MlpNetwork used before initialization");
  if (cols != widths_.front()) {
    throw SchemaError("MlpNetwork input width " + std::to_string(cols) + ", expected " +
                      std::to_string(widths_.front()));
  }
}

namespace {

Var apply(Var x, Activation a) {
  switch (a) {
    case Activation::kRelu:
      return relu(x);
    case Activation::kSigmoid:
      return sigmoid(x);
    case Activation::kIdentity:
      break;
  }
  return x;
}

void apply(Matrix& x, Activation a) {
  switch (a) {
    case Activation::kRelu:
      x = x.cwiseMax(0.0);
      break;
    case Activation::kSigmoid:
      x = (1.0 + (-x.array()).exp()).inverse().matrix();
      break;
    case Activation::kIdentity:
      break;
  }
}

}  // namespace

Var MlpNetwork::forward(Tape& tape, Var input) {
  check_input(input.cols());
  Var x = input;
  const std::size_t n = weights_.size();
  for (std::size_t l = 0; l < n; ++l) {
    x = add(matmul(x, tape.parameter(weights_[l])), tape.parameter(biases_[l]));
    x = apply(x, l + 1 == n ? output_ : Activation::kRelu);
  }
  return x;
}

Matrix MlpNetwork::predict(const Matrix& input) const {
  check_input(input.cols());
  Matrix x = input;
  const std::size_t n = weights_.size();
  for (std::size_t l = 0; l < n; ++l) {
    x = x * weights_[l].value.matrix();
    x.rowwise() += biases_[l].value.matrix().row(0);
    apply(x, l + 1 == n ? output_ : Activation::kRelu);
  }
  if (!x.allFinite()) throw NumericError("MlpNetwork::predict produced a nonfinite value");
  return x;
}

std::size_t MlpNetwork::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    n += static_cast<std::size_t>(widths_[l] * widths_[l + 1] + widths_[l + 1]);
  }
  return n;
}

std::vector<Parameter*> MlpNetwork::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const Parameter*> MlpNetwork::parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

void MlpNetwork::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

void MlpNetwork::soft_update_from(const MlpNetwork& source, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("soft update rate must lie in (0, 1]");
  if (source.widths_ != widths_) throw SchemaError("soft update between networks of different widths");
  auto dst = parameters();
  auto src = source.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto& d = dst[i]->value.matrix();
    d = (1.0 - rate) * d + rate * src[i]->value.matrix();
  }
}

nlohmann::json MlpNetwork::to_json() const {
  nlohmann::json j;
  j["widths"] = widths_;
  j["output"] = to_string(output_);
  auto params = nlohmann::json::array();
  for (const auto* p : parameters()) params.push_back(matrix_to_json(p->value.matrix()));
  j["parameters"] = std::move(params);
  return j;
}

MlpNetwork MlpNetwork::from_json(const nlohmann::json& j) {
  MlpNetwork net;
  try {
    net.widths_ = j.at("widths").get<std::vector<Index>>();
    net.output_ = activation_from_string(j.at("output").get<std::string>());
    const auto& params = j.at("parameters");
    if (net.widths_.size() < 2 || params.size() != 2 * (net.widths_.size() - 1)) {
      throw SchemaError("MlpNetwork: parameter list does not match widths");
    }
    for (std::size_t l = 0; l + 1 < net.widths_.size(); ++l) {
      Matrix w = matrix_from_json(params[2 * l]);
      Matrix b = matrix_from_json(params[2 * l + 1]);
      if (w.rows() != net.widths_[l] || w.cols() != net.widths_[l + 1] || b.rows() != 1 ||
          b.cols() != net.widths_[l + 1]) {
        throw SchemaError("MlpNetwork: layer " + std::to_string(l) + " shape does not match widths");
      }
      if (!w.allFinite() || !b.allFinite()) throw SchemaError("MlpNetwork: nonfinite parameter");
      net.weights_.push_back(Parameter{Tensor(std::move(w)), Tensor(net.widths_[l], net.widths_[l + 1])});
      net.biases_.push_back(Parameter{Tensor(std::move(b)), Tensor(1, net.widths_[l + 1])});
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("MlpNetwork: ") + e.what());
  }
  return net;
}

double grad_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const auto* p : params) s += p->grad.matrix().squaredNorm();
  return std::sqrt(s);
}

}  // namespace pcql::nn
