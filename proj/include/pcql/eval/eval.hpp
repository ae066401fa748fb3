#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcql/core/types.hpp"
#include "pcql/nn/tensor.hpp"

namespace pcql::algorithms {
class PcqlAgent;
}

namespace pcql::eval {

using nn::Index;
using nn::Matrix;

// Maps raw (unstandardized) observation rows, n x 19, to normalized doses.
using PolicyFn = std::function<std::vector<double>(const Matrix& raw_states)>;

PolicyFn agent_policy(const algorithms::PcqlAgent& agent);

// Raw feature rows of every state (or next state) in episode order.
Matrix raw_states(const OfflineDataset& ds);
Matrix raw_next_states(const OfflineDataset& ds);

// ---------------------------------------------------------------------------
// Fitted Q evaluation
// ---------------------------------------------------------------------------

struct FqeConfig {
  double gamma = 0.99;
  // Each iteration freezes a copy of Q as the regression target and then
  // runs epochs_per_iteration passes of mini-batch Adam over the data.
  int iterations = 150;
  int epochs_per_iteration = 1;
  int batch_size = 256;
  double learning_rate = 1e-3;
  std::vector<Index> hidden = {64, 64};
  std::uint64_t seed = 0;
  // A surgery ends on a time limit rather than in an absorbing state, so by
  // default the target bootstraps through the last transition. Masking there
  // lets Q read the remaining horizon off any time-correlated feature.
  bool bootstrap_episode_end = true;

  void validate() const;
};

// Transitions in model coordinates. next_a holds the evaluated policy's
// action at s2; s0/a0 are the initial states and the policy's actions there.
struct FqeProblem {
  Matrix s, a, r, s2, done, next_a;
  Matrix s0, a0;
};

struct FqeResult {
  double initial_state_return = 0.0;
  bool diverged = false;
  double max_abs_q = 0.0;
  double divergence_bound = 0.0;
  std::vector<double> loss_curve;  // mean TD loss per iteration
};

FqeResult fqe_fit(const FqeProblem& problem, const FqeConfig& config);

// Evaluates `policy` on a dataset; without a policy the recorded actions are
// evaluated (the behavior policy).
FqeProblem make_fqe_problem(const OfflineDataset& ds, const PolicyFn* policy);
FqeResult fqe_evaluate(const PolicyFn* policy, const OfflineDataset& test, const FqeConfig& config);

// ---------------------------------------------------------------------------
// Consultation-mode metrics
// ---------------------------------------------------------------------------

inline constexpr double kMapeEpsilon = 1e-8;

double mape(const std::vector<double>& recommended, const std::vector<double>& actual, double epsilon = kMapeEpsilon);
// Mean over terms of sqrt((y - y*)^2), i.e. the mean absolute error.
double rmse_paper(const std::vector<double>& recommended, const std::vector<double>& actual);
double rmse_conventional(const std::vector<double>& recommended, const std::vector<double>& actual);
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Physical doses of the policy (or the recorded doses) at every state.
std::vector<double> policy_doses(const PolicyFn* policy, const OfflineDataset& ds);
double mean_dose(const PolicyFn* policy, const OfflineDataset& ds);

struct CorrelationPair {
  double rho_policy = 0.0;
  double rho_behavior = 0.0;
};

// Pearson between the MAP observed at each step and the dose given there.
CorrelationPair correlation_comparison(const PolicyFn& policy, const OfflineDataset& ds);

// ---------------------------------------------------------------------------
// Gaussian confidence bands
// ---------------------------------------------------------------------------

struct BandConfig {
  double sigma = 0.05;  // normalized-action units
  int n_samples = 100;
  double lower_q = 0.05;
  double median_q = 0.5;
  double upper_q = 0.95;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Band {
  std::vector<double> lower;
  std::vector<double> median;
  std::vector<double> upper;
};

// Linear-interpolation empirical quantile of sorted data.
double quantile_sorted(const std::vector<double>& sorted, double q);

// Per step: n_samples draws from Normal(mean, sigma^2), clipped to [0, 1],
// scaled by p_max, summarized by the three quantiles.
Band confidence_band(const std::vector<double>& mean_actions, double p_max, const BandConfig& config);

// Fraction of n_fresh fresh draws from Normal(mean, sigma^2) that land in the
// unclipped empirical [lower_q, upper_q] band estimated from n_band draws.
double band_coverage(double mean, double sigma, int n_band, int n_fresh, double lower_q, double upper_q,
                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalConfig {
  FqeConfig fqe;
  BandConfig band;
  double mape_epsilon = kMapeEpsilon;
};

struct EpisodeCurve {
  std::string episode_id;
  std::vector<double> map;
  std::vector<double> behavior_dose;
  std::vector<double> recommended_dose;
  Band band;
};

struct EvalReport {
  std::string policy_name;
  double initial_state_return = 0.0;
  bool fqe_diverged = false;
  double behavior_initial_state_return = 0.0;
  double mape_pct = 0.0;
  double rmse = 0.0;
  double rmse_conventional = 0.0;
  double mean_dose_physical = 0.0;
  double behavior_mean_dose = 0.0;
  double pearson_dose_map = 0.0;
  double pearson_behavior = 0.0;
  std::vector<EpisodeCurve> curves;

  nlohmann::json to_json() const;
};

// Full consultation-mode evaluation; a null policy evaluates the recorded
// doses against themselves.
EvalReport evaluate_policy(const std::string& name, const PolicyFn* policy, const OfflineDataset& test,
                           const EvalConfig& config);

std::string curve_csv(const EpisodeCurve& curve);
std::string comparison_table_csv(const std::vector<EvalReport>& reports);

}  // namespace pcql::eval
