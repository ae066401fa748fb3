#include "pcql/explain/shapley.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"

namespace pcql::explain {

namespace {

std::vector<double> evaluate(const ModelFn& model, const Matrix& rows) {
  auto out = model(rows);
  if (static_cast<Index>(out.size()) != rows.rows()) throw ContractError("model returned the wrong number of outputs");
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericError("model returned a nonfinite output");
  }
  return out;
}

}  // namespace

ShapleyResult shapley_attribution(const ModelFn& model, std::span<const double> x, const Matrix& background,
                                  const ShapleyConfig& config) {
  const auto d = static_cast<Index>(x.size());
  if (background.rows() == 0) throw DomainError("shapley: empty background set");
  if (background.cols() != d) throw SchemaError("shapley: background width differs from the sample");
  if (config.n_permutations < 1) throw ConfigError("shapley: n_permutations must be >= 1");

  std::mt19937_64 rng(derive_seed(config.seed, "shapley"));
  std::uniform_int_distribution<Index> pick(0, background.rows() - 1);
  const Index p = config.n_permutations;
  std::vector<Index> perm(static_cast<std::size_t>(d));
  std::vector<std::vector<Index>> perms;
  Matrix rows(p * (d + 1), d);
  for (Index k = 0; k < p; ++k) {
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::RowVectorXd z = background.row(pick(rng));
    rows.row(k * (d + 1)) = z;
    for (Index j = 0; j < d; ++j) {
      const Index f = perm[static_cast<std::size_t>(j)];
      z(f) = x[static_cast<std::size_t>(f)];
      rows.row(k * (d + 1) + j + 1) = z;
    }
    perms.push_back(perm);
  }
  const auto out = evaluate(model, rows);

  ShapleyResult res;
  res.values.assign(static_cast<std::size_t>(d), 0.0);
  std::vector<double> totals;
  for (Index k = 0; k < p; ++k) {
    const auto base = static_cast<std::size_t>(k * (d + 1));
    for (Index j = 0; j < d; ++j) {
      const auto f = static_cast<std::size_t>(perms[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
      res.values[f] += out[base + static_cast<std::size_t>(j) + 1] - out[base + static_cast<std::size_t>(j)];
    }
    totals.push_back(out[base + static_cast<std::size_t>(d)] - out[base]);
  }
  for (auto& v : res.values) v /= static_cast<double>(p);

  Matrix xr(1, d);
  for (Index j = 0; j < d; ++j) xr(0, j) = x[static_cast<std::size_t>(j)];
  res.model_output = evaluate(model, xr).front();
  const auto bg = evaluate(model, background);
  res.background_mean = std::accumulate(bg.begin(), bg.end(), 0.0) / static_cast<double>(bg.size());
  if (p > 1) {
    const double m = std::accumulate(totals.begin(), totals.end(), 0.0) / static_cast<double>(p);
    double ss = 0.0;
    for (double t : totals) ss += (t - m) * (t - m);
    res.sum_std_error = std::sqrt(ss / static_cast<double>(p - 1) / static_cast<double>(p));
  }
  return res;
}

std::vector<double> absolute_mean_scores(const Matrix& shap) {
  if (shap.rows() == 0) throw DomainError("absolute_mean_scores: no samples");
  Eigen::RowVectorXd m = shap.cwiseAbs().colwise().mean();
  return {m.data(), m.data() + m.size()};
}

std::vector<std::size_t> rank_features(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

Matrix sample_rows(const Matrix& pool, Index n, std::uint64_t seed) {
  if (pool.rows() == 0) throw DomainError("sample_rows: empty pool");
  std::vector<Index> idx(static_cast<std::size_t>(pool.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(derive_seed(seed, "background"));
  std::shuffle(idx.begin(), idx.end(), rng);
  const Index m = std::min(n, pool.rows());
  Matrix out(m, pool.cols());
  for (Index i = 0; i < m; ++i) out.row(i) = pool.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

AttributionReport explain_samples(const ModelFn& model, const Matrix& samples, const Matrix& background,
                                  const std::vector<std::string>& feature_names, const ShapleyConfig& config) {
  if (samples.rows() == 0) throw DomainError("explain: no samples");
  if (static_cast<Index>(feature_names.size()) != samples.cols()) {
    throw SchemaError("explain: feature name count differs from the sample width");
  }
  AttributionReport rep;
  rep.feature_names = feature_names;
  rep.samples = samples;
  rep.shap.resize(samples.rows(), samples.cols());
  for (Index i = 0; i < samples.rows(); ++i) {
    ShapleyConfig c = config;
    c.seed = derive_seed(config.seed, "sample", static_cast<std::uint64_t>(i));
    std::vector<double> x(samples.row(i).data(), samples.row(i).data() + samples.cols());
    auto r = shapley_attribution(model, x, background, c);
    for (Index j = 0; j < samples.cols(); ++j) rep.shap(i, j) = r.values[static_cast<std::size_t>(j)];
    rep.model_outputs.push_back(r.model_output);
    rep.sum_std_errors.push_back(r.sum_std_error);
    rep.background_mean = r.background_mean;
  }
  rep.absolute_mean_scores = absolute_mean_scores(rep.shap);
  return rep;
}

nlohmann::json AttributionReport::to_json() const {
  nlohmann::json j;
  j["feature_names"] = feature_names;
  j["background_mean"] = background_mean;
  j["absolute_mean_scores"] = absolute_mean_scores;
  auto ranked = nlohmann::json::array();
  for (auto k : rank_features(absolute_mean_scores)) ranked.push_back(feature_names[k]);
  j["ranking"] = std::move(ranked);
  auto rows = nlohmann::json::array();
  for (Index i = 0; i < shap.rows(); ++i) {
    std::vector<double> v(shap.row(i).data(), shap.row(i).data() + shap.cols());
    std::vector<double> x(samples.row(i).data(), samples.row(i).data() + samples.cols());
    rows.push_back({{"features", x},
                    {"shap", v},
                    {"model_output", model_outputs[static_cast<std::size_t>(i)]},
                    {"sum_std_error", sum_std_errors[static_cast<std::size_t>(i)]}});
  }
  j["samples"] = std::move(rows);
  return j;
}

std::string AttributionReport::scores_csv() const {
  std::ostringstream out;
  out << "feature,score\n";
  for (auto k : rank_features(absolute_mean_scores)) {
    out << feature_names[k] << ',' << format_double(absolute_mean_scores[k]) << '\n';
  }
  return out.str();
}

}  // namespace pcql::explain
