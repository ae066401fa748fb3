#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"
#include "pcql/data/pipeline.hpp"
#include "pcql/simenv/simulator.hpp"

using namespace pcql;
using namespace pcql::simenv;

namespace {

PatientParams quiet_patient() {
  PatientParams p;
  p.clinical = ClinicalInfo::make(45.0, 0.0, 168.0, 62.0, 2);
  p.noise_std = 0.0;
  p.drift_std = 0.0;
  p.remi_change_prob = 0.0;
  p.remi_sensitivity = 0.0;
  return p;
}

std::string dir_bytes(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.filename().string() + "\n" + read_text_file(f);
  return all;
}

double steady_map(double infusion_mg_min, const PatientParams& p) {
  PkState s;
  for (int t = 0; t < 3000; ++t) s = pk_step(s, infusion_mg_min, p, 1.0);
  return pd_map(s.ce, 0.0, p);
}

}  // namespace

TEST_CASE("pk step examples") {
  PatientParams p = quiet_patient();
  const PkState zero = pk_step({}, 0.0, p, 1.0);
  CHECK(zero.c1 == 0.0);
  CHECK(zero.c2 == 0.0);
  CHECK(zero.c3 == 0.0);
  CHECK(zero.ce == 0.0);

  PatientParams still = p;
  still.pk = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  const PkState acc = pk_step({2.0, 1.0, 0.5, 0.1}, 3.25, still, 1.0);
  CHECK(acc.c1 == 2.0 + 3.25);
  CHECK(acc.c2 == 1.0);

  PatientParams elim = p;
  elim.pk = {0.1, 0.0, 0.0, 0.0, 0.0, 0.0};
  const PkState e = pk_step({10.0, 0.0, 0.0, 0.0}, 0.0, elim, 1.0);
  CHECK(e.c1 == doctest::Approx(9.0).epsilon(1e-15));

  CHECK_THROWS_AS(pk_step({}, -1.0, p, 1.0), DomainError);
  CHECK_THROWS_AS(pk_step({}, 1.0, p, 0.0), DomainError);
  CHECK_THROWS_AS(pk_step({NAN, 0, 0, 0}, 1.0, p, 1.0), NumericError);
}

TEST_CASE("pk masses stay nonnegative and clamps are counted") {
  PatientParams p = quiet_patient();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  PkState s;
  for (int t = 0; t < 500; ++t) {
    s = pk_step(s, t % 50 < 25 ? u(rng) : 0.0, p, 1.0);
    CHECK(s.c1 >= 0.0);
    CHECK(s.c2 >= 0.0);
    CHECK(s.c3 >= 0.0);
    CHECK(s.ce >= 0.0);
  }
  PatientParams stiff = p;
  stiff.pk.k10 = 3.0;
  PkStepStats stats;
  (void)pk_step({1.0, 0.0, 0.0, 0.0}, 0.0, stiff, 1.0, &stats);
  CHECK(stats.clamp_events >= 1);
}

TEST_CASE("Euler halving changes the 60-minute c1 by at most 1 percent") {
  const PatientParams p = quiet_patient();
  const double infusion = 3.5 * p.clinical.weight / 60.0;
  PkState coarse, fine;
  for (int t = 0; t < 60; ++t) coarse = pk_step(coarse, infusion, p, 1.0);
  for (int t = 0; t < 120; ++t) fine = pk_step(fine, infusion, p, 0.5);
  CHECK(std::abs(coarse.c1 - fine.c1) <= 0.01 * fine.c1);
}

TEST_CASE("pd map examples") {
  PatientParams p = quiet_patient();
  CHECK(pd_map(0.0, 0.0, p) == p.baseline_map);
  CHECK(pd_map(p.ec50, 0.0, p) == doctest::Approx(p.baseline_map - p.emax / 2.0).epsilon(1e-14));
  CHECK(pd_map(INFINITY, 0.0, p) == p.baseline_map - p.emax);
  PatientParams low = p;
  low.baseline_map = 40.0;
  low.emax = 35.0;
  low.remi_sensitivity = 40.0;
  CHECK(pd_map(INFINITY, 0.5, low) == kMapFloor);
  CHECK_THROWS_AS(pd_map(-1.0, 0.0, p), DomainError);
}

TEST_CASE("steady-state MAP is monotone in the infusion rate") {
  const PatientParams p = quiet_patient();
  double prev = steady_map(0.0, p);
  for (double rate : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    const double m = steady_map(rate, p);
    CHECK(m <= prev);
    prev = m;
  }
}

TEST_CASE("behavior policy step examples") {
  BehaviorPolicyParams b;
  b.dose_noise_std = 0.0;
  Rng rng(1);
  const auto at_target = behavior_policy_step(b.target_map, 0.0, b, rng);
  CHECK(at_target.dose == b.base_dose);
  CHECK(at_target.integral_err == 0.0);
  const auto high = behavior_policy_step(b.target_map + 10.0, 0.0, b, rng);
  CHECK(high.dose >= at_target.dose);
  const auto low = behavior_policy_step(b.target_map - 10.0, 0.0, b, rng);
  CHECK(low.dose <= at_target.dose);
  Rng r1(9), r2(9);
  BehaviorPolicyParams noisy;
  CHECK(behavior_policy_step(90.0, 5.0, noisy, r1).dose == behavior_policy_step(90.0, 5.0, noisy, r2).dose);
  const auto capped = behavior_policy_step(500.0, 0.0, b, rng);
  CHECK(capped.dose == b.dose_cap);
}

TEST_CASE("behavior controller holds its dose between adjustments") {
  BehaviorPolicyParams b;
  b.adjustment_period = 5;
  b.induction_steps = 0;
  BehaviorController c(b);
  Rng rng(2);
  std::vector<double> doses;
  for (int t = 0; t < 20; ++t) doses.push_back(c.step(70.0 + t, rng));
  for (int t = 0; t < 20; ++t)
    if (t % 5 != 0) CHECK(doses[t] == doses[t - 1]);
}

TEST_CASE("generator counts and determinism") {
  GeneratorConfig g;
  g.n_surgeries = 1;
  g.duration_min = 60;
  g.duration_max = 60;
  g.seed = 17;
  const auto sims = generate_surgeries(g);
  REQUIRE(sims.size() == 1);
  CHECK(sims[0].raw.rows.size() == 61);
  int doses = 0;
  for (const auto& r : sims[0].raw.rows) doses += r.propofol.has_value();
  CHECK(doses == 60);

  const auto tmp = std::filesystem::temp_directory_path();
  const auto d1 = tmp / "pcql_test_gen_a", d2 = tmp / "pcql_test_gen_b";
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  g.n_surgeries = 5;
  g.duration_min = 30;
  g.duration_max = 90;
  CHECK(generate_dataset(g, d1) == 5);
  CHECK(generate_dataset(g, d2) == 5);
  CHECK(std::distance(std::filesystem::directory_iterator(d1), std::filesystem::directory_iterator{}) == 6);
  CHECK(dir_bytes(d1) == dir_bytes(d2));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);

  GeneratorConfig bad;
  bad.n_surgeries = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("generated data passes filtering and needs no imputation") {
  GeneratorConfig g;
  g.n_surgeries = 200;
  g.seed = 23;
  std::vector<data::RawSurgery> raw;
  for (const auto& s : generate_surgeries(g)) raw.push_back(s.raw);
  auto [kept, report] = data::filter_surgeries(raw, {});
  CHECK(report.retained >= 195);
  data::ImputeStats stats;
  data::impute_clinical_knn(kept, {}, &stats);
  for (auto& s : kept) s = data::impute_knn(s, {}, &stats);
  CHECK(stats.imputed_cells == 0);
  CHECK_NOTHROW(data::build_transition_dataset(kept));
}

TEST_CASE("rollout of a zero-dose policy on a steady patient returns the geometric sum") {
  PatientParams p = quiet_patient();
  p.baseline_map = 110.0;
  const int T = 50;
  const auto zero = [](const ObservationState&) { return 0.0; };
  RolloutOptions opt;
  opt.gamma = 0.95;
  const auto r = rollout_policy(zero, p, T, 8, opt);
  const double expected = (1.0 - std::pow(opt.gamma, T)) / (1.0 - opt.gamma);
  CHECK(r.true_return == doctest::Approx(expected).epsilon(1e-12));
  CHECK(r.episode.transitions.size() == static_cast<std::size_t>(T));
  const auto again = rollout_policy(zero, p, T, 8, opt);
  CHECK(again.true_return == r.true_return);
}

TEST_CASE("max-dose rollout drives MAP far below the baseline setpoint") {
  PatientParams p = quiet_patient();
  p.emax = 60.0;
  RolloutOptions opt;
  opt.map_target = p.baseline_map;
  const auto r = rollout_policy([](const ObservationState&) { return 1.0; }, p, 120, 3, opt);
  int negative = 0;
  for (const auto& tr : r.episode.transitions) negative += data::compute_reward(tr.next_state.now.map, p.baseline_map, tr.action).r_error < 0.0;
  CHECK(negative > 60);
  CHECK_THROWS_AS(rollout_policy([](const ObservationState&) { return 1.5; }, p, 10, 3, opt), ContractError);
}

TEST_CASE("missingness injector deletes cells at roughly the configured rate") {
  GeneratorConfig g;
  g.n_surgeries = 1;
  g.duration_min = 200;
  g.duration_max = 200;
  auto s = generate_surgeries(g)[0].raw;
  Rng rng(5);
  inject_missingness(s, 0.2, rng);
  std::size_t missing = 0, cells = 0;
  for (std::size_t i = 0; i < s.rows.size(); ++i) {
    const auto& r = s.rows[i];
    missing += !r.ap_sys + !r.ap_dia + !r.map + !r.remifentanil;
    cells += 4;
    if (i + 1 < s.rows.size()) {
      missing += !r.propofol;
      ++cells;
    }
  }
  CHECK(!s.rows.back().propofol.has_value());
  const double frac = static_cast<double>(missing) / static_cast<double>(cells);
  CHECK(frac > 0.15);
  CHECK(frac < 0.25);
}
