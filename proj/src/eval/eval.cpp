#include "pcql/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "pcql/algorithms/pcql.hpp"
#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"
#include "pcql/nn/adam.hpp"
#include "pcql/nn/mlp.hpp"

namespace pcql::eval {

PolicyFn agent_policy(const algorithms::PcqlAgent& agent) {
  return [agent](const Matrix& raw) { return agent.act_raw(raw); };
}

namespace {

Matrix feature_rows(const OfflineDataset& ds, bool next) {
  Matrix out(static_cast<Index>(ds.num_transitions()), static_cast<Index>(kNumFeatures));
  Index i = 0;
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      const auto f = flatten_observation(next ? tr.next_state : tr.state);
      for (std::size_t j = 0; j < kNumFeatures; ++j) out(i, static_cast<Index>(j)) = f[j];
      ++i;
    }
  }
  return out;
}

Matrix standardized(const Matrix& raw, const DatasetMeta& meta) {
  Matrix s(raw.rows(), raw.cols());
  for (Index j = 0; j < raw.cols(); ++j) {
    const auto k = static_cast<std::size_t>(j);
    s.col(j) = (raw.col(j).array() - meta.feature_means[k]) / meta.feature_stds[k];
  }
  return s;
}

Matrix hcat(const Matrix& x, const Matrix& y) {
  Matrix out(x.rows(), x.cols() + y.cols());
  out << x, y;
  return out;
}

Matrix column_of(const std::vector<double>& v) {
  Matrix m(static_cast<Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Index>(i), 0) = v[i];
  return m;
}

std::vector<double> call_policy(const PolicyFn& policy, const Matrix& raw) {
  auto a = policy(raw);
  if (static_cast<Index>(a.size()) != raw.rows()) throw ContractError("policy returned the wrong number of actions");
  for (double x : a) {
    if (!(x >= 0.0 && x <= 1.0)) throw ContractError("policy action outside [0, 1]");
  }
  return a;
}

void check_aligned(const std::vector<double>& a, const std::vector<double>& b, const char* what) {
  if (a.size() != b.size()) {
    throw SchemaError(std::string(what) + ": series lengths differ (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw SchemaError(std::string(what) + ": empty series");
}

}  // namespace

Matrix raw_states(const OfflineDataset& ds) { return feature_rows(ds, false); }
Matrix raw_next_states(const OfflineDataset& ds) { return feature_rows(ds, true); }

// ---------------------------------------------------------------------------
// FQE
// ---------------------------------------------------------------------------

void FqeConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("fqe: gamma must lie in [0, 1)");
  if (iterations < 1 || epochs_per_iteration < 1) throw ConfigError("fqe: iterations and epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("fqe: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("fqe: learning_rate must be > 0");
  for (auto w : hidden) {
    if (w < 1) throw ConfigError("fqe: hidden widths must be positive");
  }
}

FqeResult fqe_fit(const FqeProblem& p, const FqeConfig& config) {
  config.validate();
  const Index n = p.s.rows();
  if (n == 0 || p.s0.rows() == 0) throw DomainError("fqe: empty dataset");
  if (p.a.rows() != n || p.r.rows() != n || p.s2.rows() != n || p.done.rows() != n || p.next_a.rows() != n ||
      p.a0.rows() != p.s0.rows()) {
    throw SchemaError("fqe: problem matrices disagree in row count");
  }

  std::mt19937_64 rng(derive_seed(config.seed, "fqe"));
  std::vector<Index> widths{p.s.cols() + p.a.cols()};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(1);
  nn::MlpNetwork q(widths, nn::Activation::kIdentity, rng);
  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  auto opt = nn::make_adam_state(q.parameters(), adam_cfg);

  const Matrix x = hcat(p.s, p.a);
  const Matrix x2 = hcat(p.s2, p.next_a);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const auto bs = static_cast<std::size_t>(config.batch_size);

  const Matrix cont = config.bootstrap_episode_end ? Matrix::Ones(n, 1) : Matrix(1.0 - p.done.array());
  FqeResult out;
  for (int it = 0; it < config.iterations; ++it) {
    const Matrix q_next = q.predict(x2);
    const Matrix y = p.r.array() + config.gamma * cont.array() * q_next.array();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (int ep = 0; ep < config.epochs_per_iteration; ++ep) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const auto end = std::min(order.size(), start + bs);
        const auto m = static_cast<Index>(end - start);
        Matrix xb(m, x.cols()), yb(m, 1);
        for (Index i = 0; i < m; ++i) {
          const Index k = order[start + static_cast<std::size_t>(i)];
          xb.row(i) = x.row(k);
          yb(i, 0) = y(k, 0);
        }
        q.zero_grad();
        nn::Tape tape;
        nn::Var loss = nn::mean(nn::square(q.forward(tape, tape.constant(nn::Tensor(xb))) -
                                           tape.constant(nn::Tensor(yb))));
        tape.backward(loss);
        nn::adam_step(q.parameters(), opt);
        loss_sum += loss.value().item();
        ++loss_count;
      }
    }
    out.loss_curve.push_back(loss_sum / static_cast<double>(loss_count));
  }

  const Matrix q0 = q.predict(hcat(p.s0, p.a0));
  out.initial_state_return = q0.mean();
  out.max_abs_q = std::max(q.predict(x).cwiseAbs().maxCoeff(), q0.cwiseAbs().maxCoeff());
  const double r_max = std::max(p.r.cwiseAbs().maxCoeff(), 1e-12);
  out.divergence_bound = 10.0 * r_max / (1.0 - config.gamma);
  out.diverged = out.max_abs_q > out.divergence_bound;
  return out;
}

FqeProblem make_fqe_problem(const OfflineDataset& ds, const PolicyFn* policy) {
  ds.validate();
  const auto n = static_cast<Index>(ds.num_transitions());
  if (n == 0) throw DomainError("fqe: empty dataset");
  FqeProblem p;
  const Matrix raw = raw_states(ds);
  const Matrix raw2 = raw_next_states(ds);
  p.s = standardized(raw, ds.meta);
  p.s2 = standardized(raw2, ds.meta);
  p.a.resize(n, 1);
  p.r.resize(n, 1);
  p.done.resize(n, 1);
  p.next_a = Matrix::Zero(n, 1);
  const auto ne = static_cast<Index>(ds.episodes.size());
  Matrix raw0(ne, static_cast<Index>(kNumFeatures));
  std::vector<Index> first_rows;
  Index i = 0;
  for (Index e = 0; e < ne; ++e) {
    const auto& ep = ds.episodes[static_cast<std::size_t>(e)];
    if (ep.transitions.empty()) throw DomainError("fqe: episode '" + ep.episode_id + "' has no transitions");
    raw0.row(e) = raw.row(i);
    first_rows.push_back(i);
    for (std::size_t t = 0; t < ep.transitions.size(); ++t, ++i) {
      const auto& tr = ep.transitions[t];
      p.a(i, 0) = tr.action.normalized();
      p.r(i, 0) = tr.reward;
      p.done(i, 0) = tr.terminal ? 1.0 : 0.0;
      if (policy == nullptr && t + 1 < ep.transitions.size()) {
        p.next_a(i, 0) = ep.transitions[t + 1].action.normalized();
      }
    }
  }
  p.s0 = standardized(raw0, ds.meta);
  if (policy != nullptr) {
    p.next_a = column_of(call_policy(*policy, raw2));
    p.a0 = column_of(call_policy(*policy, raw0));
  } else {
    p.a0.resize(ne, 1);
    for (Index e = 0; e < ne; ++e) p.a0(e, 0) = p.a(first_rows[static_cast<std::size_t>(e)], 0);
  }
  return p;
}

FqeResult fqe_evaluate(const PolicyFn* policy, const OfflineDataset& test, const FqeConfig& config) {
  return fqe_fit(make_fqe_problem(test, policy), config);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double mape(const std::vector<double>& y, const std::vector<double>& y_star, double epsilon) {
  check_aligned(y, y_star, "mape");
  if (!(epsilon > 0.0)) throw DomainError("mape: epsilon must be positive");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_star[i]) / std::max(epsilon, y_star[i]);
  return 100.0 * s / static_cast<double>(y.size());
}

double rmse_paper(const std::vector<double>& y, const std::vector<double>& y_star) {
  check_aligned(y, y_star, "rmse_paper");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::sqrt((y[i] - y_star[i]) * (y[i] - y_star[i]));
  return s / static_cast<double>(y.size());
}

double rmse_conventional(const std::vector<double>& y, const std::vector<double>& y_star) {
  check_aligned(y, y_star, "rmse_conventional");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_star[i]) * (y[i] - y_star[i]);
  return std::sqrt(s / static_cast<double>(y.size()));
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  check_aligned(x, y, "pearson");
  if (x.size() < 2) throw DomainError("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) throw DomainError("pearson: correlation undefined for a zero-variance series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> policy_doses(const PolicyFn* policy, const OfflineDataset& ds) {
  std::vector<double> doses;
  if (policy != nullptr) {
    doses = call_policy(*policy, raw_states(ds));
  } else {
    for (const auto& ep : ds.episodes) {
      for (const auto& tr : ep.transitions) doses.push_back(tr.action.normalized());
    }
  }
  for (double& d : doses) d *= ds.meta.p_max;
  return doses;
}

double mean_dose(const PolicyFn* policy, const OfflineDataset& ds) {
  const auto d = policy_doses(policy, ds);
  if (d.empty()) throw DomainError("mean_dose: empty dataset");
  return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

namespace {

std::vector<double> step_maps(const OfflineDataset& ds) {
  std::vector<double> m;
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) m.push_back(tr.state.now.map);
  }
  return m;
}

}  // namespace

CorrelationPair correlation_comparison(const PolicyFn& policy, const OfflineDataset& ds) {
  const auto maps = step_maps(ds);
  return {pearson(policy_doses(&policy, ds), maps), pearson(policy_doses(nullptr, ds), maps)};
}

// ---------------------------------------------------------------------------
// Bands
// ---------------------------------------------------------------------------

void BandConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("band: sigma must be > 0");
  if (n_samples < 2) throw ConfigError("band: n_samples must be >= 2");
  if (!(lower_q >= 0.0 && lower_q <= median_q && median_q <= upper_q && upper_q <= 1.0)) {
    throw ConfigError("band: quantiles must satisfy 0 <= lower <= median <= upper <= 1");
  }
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw DomainError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Band confidence_band(const std::vector<double>& mean_actions, double p_max, const BandConfig& config) {
  config.validate();
  std::mt19937_64 rng(derive_seed(config.seed, "band"));
  std::normal_distribution<double> z(0.0, 1.0);
  Band band;
  std::vector<double> draws(static_cast<std::size_t>(config.n_samples));
  for (double mu : mean_actions) {
    for (auto& d : draws) d = std::clamp(mu + config.sigma * z(rng), 0.0, 1.0) * p_max;
    std::sort(draws.begin(), draws.end());
    band.lower.push_back(quantile_sorted(draws, config.lower_q));
    band.median.push_back(quantile_sorted(draws, config.median_q));
    band.upper.push_back(quantile_sorted(draws, config.upper_q));
  }
  return band;
}

double band_coverage(double mean, double sigma, int n_band, int n_fresh, double lower_q, double upper_q,
                     std::uint64_t seed) {
  if (!(sigma > 0.0) || n_band < 2 || n_fresh < 1) throw ConfigError("band_coverage: invalid arguments");
  std::mt19937_64 rng(derive_seed(seed, "coverage"));
  std::normal_distribution<double> dist(mean, sigma);
  std::vector<double> band(static_cast<std::size_t>(n_band));
  for (auto& d : band) d = dist(rng);
  std::sort(band.begin(), band.end());
  const double lo = quantile_sorted(band, lower_q);
  const double hi = quantile_sorted(band, upper_q);
  int inside = 0;
  for (int i = 0; i < n_fresh; ++i) {
    const double x = dist(rng);
    if (x >= lo && x <= hi) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(n_fresh);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["policy"] = policy_name;
  j["initial_state_return"] = initial_state_return;
  j["fqe_diverged"] = fqe_diverged;
  j["mape_pct"] = mape_pct;
  j["rmse"] = rmse;
  j["rmse_conventional"] = rmse_conventional;
  j["mean_dose_physical"] = mean_dose_physical;
  j["behavior_mean_dose"] = behavior_mean_dose;
  j["pearson_dose_map"] = pearson_dose_map;
  j["pearson_behavior"] = pearson_behavior;
  auto bands = nlohmann::json::array();
  for (const auto& c : curves) {
    bands.push_back({{"episode_id", c.episode_id},
                     {"lower", c.band.lower},
                     {"median", c.band.median},
                     {"upper", c.band.upper}});
  }
  j["ci_bands"] = std::move(bands);
  return j;
}

EvalReport evaluate_policy(const std::string& name, const PolicyFn* policy, const OfflineDataset& test,
                           const EvalConfig& config) {
  config.fqe.validate();
  config.band.validate();
  if (test.num_transitions() == 0) throw DomainError("evaluate: empty test split");
  EvalReport rep;
  rep.policy_name = name;

  const auto fqe = fqe_evaluate(policy, test, config.fqe);
  rep.initial_state_return = fqe.initial_state_return;
  rep.fqe_diverged = fqe.diverged;

  const auto recommended = policy_doses(policy, test);
  const auto actual = policy_doses(nullptr, test);
  rep.mape_pct = mape(recommended, actual, config.mape_epsilon);
  rep.rmse = rmse_paper(recommended, actual);
  rep.rmse_conventional = rmse_conventional(recommended, actual);
  rep.mean_dose_physical = std::accumulate(recommended.begin(), recommended.end(), 0.0) /
                           static_cast<double>(recommended.size());
  rep.behavior_mean_dose = std::accumulate(actual.begin(), actual.end(), 0.0) / static_cast<double>(actual.size());
  const auto maps = step_maps(test);
  rep.pearson_dose_map = pearson(recommended, maps);
  rep.pearson_behavior = pearson(actual, maps);

  std::size_t k = 0;
  for (std::size_t e = 0; e < test.episodes.size(); ++e) {
    const auto& ep = test.episodes[e];
    EpisodeCurve c;
    c.episode_id = ep.episode_id;
    std::vector<double> mean_actions;
    for (std::size_t t = 0; t < ep.transitions.size(); ++t, ++k) {
      c.map.push_back(maps[k]);
      c.behavior_dose.push_back(actual[k]);
      c.recommended_dose.push_back(recommended[k]);
      mean_actions.push_back(recommended[k] / test.meta.p_max);
    }
    BandConfig bc = config.band;
    bc.seed = derive_seed(config.band.seed, ep.episode_id);
    c.band = confidence_band(mean_actions, test.meta.p_max, bc);
    rep.curves.push_back(std::move(c));
  }
  return rep;
}

std::string curve_csv(const EpisodeCurve& c) {
  std::ostringstream out;
  out << "step,map,behavior_dose,recommended_dose,lower,median,upper\n";
  for (std::size_t t = 0; t < c.map.size(); ++t) {
    out << t << ',' << format_double(c.map[t]) << ',' << format_double(c.behavior_dose[t]) << ','
        << format_double(c.recommended_dose[t]) << ',' << format_double(c.band.lower[t]) << ','
        << format_double(c.band.median[t]) << ',' << format_double(c.band.upper[t]) << '\n';
  }
  return out.str();
}

std::string comparison_table_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "policy,initial_state_return,mape_pct,rmse,rmse_conventional,mean_dose,pearson_dose_map\n";
  for (const auto& r : reports) {
    out << r.policy_name << ',' << format_double(r.initial_state_return) << ',' << format_double(r.mape_pct) << ','
        << format_double(r.rmse) << ',' << format_double(r.rmse_conventional) << ','
        << format_double(r.mean_dose_physical) << ',' << format_double(r.pearson_dose_map) << '\n';
  }
  return out.str();
}

}  // namespace pcql::eval
