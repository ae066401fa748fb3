#include <cmath>
#include <random>

#include "doctest.h"
#include "pcql/explain/shapley.hpp"

using namespace pcql;
using explain::Matrix;

namespace {

explain::ModelFn linear_model(const std::vector<double>& w, double bias) {
  return [w, bias](const Matrix& rows) {
    std::vector<double> out(rows.rows(), bias);
    for (explain::Index r = 0; r < rows.rows(); ++r)
      for (explain::Index i = 0; i < rows.cols(); ++i) out[r] += w[i] * rows(r, i);
    return out;
  };
}

Matrix random_rows(explain::Index n, explain::Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  Matrix m(n, d);
  for (explain::Index i = 0; i < n; ++i)
    for (explain::Index j = 0; j < d; ++j) m(i, j) = z(rng);
  return m;
}

}  // namespace

TEST_CASE("linear model with one background point gives exact marginals") {
  const std::vector<double> w = {0.5, -1.25, 2.0, 0.0, 3.5, -0.75};
  const std::vector<double> x = {1.0, 2.0, -1.0, 4.0, 0.25, 0.5};
  Matrix b(1, 6);
  b << 0.3, -0.2, 0.7, 1.0, -1.5, 0.0;
  for (int perms : {1, 7, 200}) {
    const auto res = explain::shapley_attribution(linear_model(w, 0.1), x, b, {perms, 3});
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(res.values[i] - w[i] * (x[i] - b(0, i))) <= 1e-10);
    // The ignored feature is a dummy.
    CHECK(std::abs(res.values[3]) < 1e-10);
  }
}

TEST_CASE("constant model attributes nothing") {
  const explain::ModelFn constant = [](const Matrix& rows) { return std::vector<double>(rows.rows(), 0.7); };
  const auto res = explain::shapley_attribution(constant, std::vector<double>{1.0, 2.0, 3.0}, random_rows(10, 3, 1),
                                                {50, 2});
  for (double v : res.values) CHECK(v == 0.0);
}

TEST_CASE("symmetric features receive equal credit within noise") {
  const explain::ModelFn sym = [](const Matrix& rows) {
    std::vector<double> out(rows.rows());
    for (explain::Index r = 0; r < rows.rows(); ++r) out[r] = rows(r, 0) + rows(r, 1) + rows(r, 0) * rows(r, 1);
    return out;
  };
  Matrix bg = random_rows(50, 3, 4);
  bg.col(1) = bg.col(0);
  const auto res = explain::shapley_attribution(sym, std::vector<double>{1.5, 1.5, 0.0}, bg, {20000, 5});
  CHECK(std::abs(res.values[0] - res.values[1]) < 0.15);
  CHECK(std::abs(res.values[2]) < 1e-12);
}

TEST_CASE("local accuracy within three standard errors on a nonlinear model") {
  const explain::ModelFn f = [](const Matrix& rows) {
    std::vector<double> out(rows.rows());
    for (explain::Index r = 0; r < rows.rows(); ++r)
      out[r] = 1.0 / (1.0 + std::exp(-(rows(r, 0) - 0.5 * rows(r, 1) * rows(r, 2) + 0.3 * rows(r, 3))));
    return out;
  };
  const Matrix bg = random_rows(100, 4, 7);
  const std::vector<double> x = {0.8, -1.2, 0.4, 2.0};
  const auto res = explain::shapley_attribution(f, x, bg, {200, 8});
  double sum = 0.0;
  for (double v : res.values) sum += v;
  CHECK(res.sum_std_error > 0.0);
  CHECK(std::abs(sum - (res.model_output - res.background_mean)) <= 3.0 * res.sum_std_error);
}

TEST_CASE("attribution is deterministic given the seed") {
  const explain::ModelFn f = [](const Matrix& rows) {
    std::vector<double> out(rows.rows());
    for (explain::Index r = 0; r < rows.rows(); ++r) out[r] = std::tanh(rows(r, 0) * rows(r, 1));
    return out;
  };
  const Matrix bg = random_rows(20, 2, 1);
  const std::vector<double> x = {1.0, -0.5};
  const auto a = explain::shapley_attribution(f, x, bg, {30, 9});
  const auto b = explain::shapley_attribution(f, x, bg, {30, 9});
  CHECK(a.values == b.values);
  const auto c = explain::shapley_attribution(f, x, bg, {30, 10});
  CHECK(c.values != a.values);
}

TEST_CASE("absolute mean scores and ranking") {
  Matrix zero = Matrix::Zero(3, 4);
  for (double s : explain::absolute_mean_scores(zero)) CHECK(s == 0.0);
  CHECK(explain::rank_features(explain::absolute_mean_scores(zero)) == std::vector<std::size_t>{0, 1, 2, 3});

  Matrix shap(2, 3);
  shap << 0.1, -5.0, 0.2, -0.1, 4.0, 0.0;
  const auto scores = explain::absolute_mean_scores(shap);
  CHECK(scores[0] == doctest::Approx(0.1));
  CHECK(scores[1] == doctest::Approx(4.5));
  CHECK(explain::rank_features(scores).front() == 1);
  CHECK(explain::rank_features({0.5, 0.7, 0.5}) == std::vector<std::size_t>{1, 0, 2});
}

TEST_CASE("sample rows draws without replacement") {
  const Matrix pool = random_rows(30, 2, 2);
  const Matrix s = explain::sample_rows(pool, 10, 4);
  CHECK(s.rows() == 10);
  for (explain::Index i = 0; i < s.rows(); ++i)
    for (explain::Index j = i + 1; j < s.rows(); ++j) CHECK(s.row(i) != s.row(j));
  CHECK(explain::sample_rows(pool, 100, 4).rows() == 30);
  CHECK(explain::sample_rows(pool, 10, 4) == s);
}

TEST_CASE("attribution report serializes sorted scores") {
  const std::vector<double> w = {0.0, 2.0, -1.0};
  const Matrix bg = random_rows(5, 3, 3);
  const Matrix samples = random_rows(4, 3, 6);
  const auto rep = explain::explain_samples(linear_model(w, 0.0), samples, bg, {"a", "b", "c"}, {20, 1});
  CHECK(rep.shap.rows() == 4);
  CHECK(rep.absolute_mean_scores[0] == 0.0);
  const std::string csv = rep.scores_csv();
  CHECK(csv.rfind("feature,score\nb,", 0) == 0);
  const auto j = rep.to_json();
  CHECK(j.at("feature_names").size() == 3);
}
