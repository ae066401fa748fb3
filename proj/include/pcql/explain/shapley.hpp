#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcql/nn/tensor.hpp"

namespace pcql::explain {

using nn::Index;
using nn::Matrix;

// Scalar model evaluated on a batch of feature rows.
using ModelFn = std::function<std::vector<double>(const Matrix& rows)>;

struct ShapleyConfig {
  int n_permutations = 200;
  std::uint64_t seed = 0;
};

struct ShapleyResult {
  std::vector<double> values;
  double model_output = 0.0;     // f(x)
  double background_mean = 0.0;  // mean of f over the whole background set
  // Standard error of sum(values) as an estimate of f(x) - E[f(background)].
  double sum_std_error = 0.0;
};

// Permutation-sampling Shapley values of the marginal-expectation game. Each
// permutation draws one background row and switches features from it to x in
// permutation order; the marginal change is credited to the switched feature.
ShapleyResult shapley_attribution(const ModelFn& model, std::span<const double> x, const Matrix& background,
                                  const ShapleyConfig& config);

// Mean |shap| per feature over samples (rows of `shap`).
std::vector<double> absolute_mean_scores(const Matrix& shap);
// Feature indices by descending score; ties keep the lower index first.
std::vector<std::size_t> rank_features(const std::vector<double>& scores);

// Rows drawn without replacement from `pool` (all of it when smaller than n).
Matrix sample_rows(const Matrix& pool, Index n, std::uint64_t seed);

struct AttributionReport {
  std::vector<std::string> feature_names;
  Matrix samples;
  Matrix shap;
  std::vector<double> model_outputs;
  std::vector<double> sum_std_errors;
  double background_mean = 0.0;
  std::vector<double> absolute_mean_scores;

  nlohmann::json to_json() const;
  // feature,score rows sorted by descending score.
  std::string scores_csv() const;
};

AttributionReport explain_samples(const ModelFn& model, const Matrix& samples, const Matrix& background,
                                  const std::vector<std::string>& feature_names, const ShapleyConfig& config);

}  // namespace pcql::explain
