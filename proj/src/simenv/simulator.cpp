#include "pcql/simenv/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"
#include "pcql/data/pipeline.hpp"

namespace pcql::simenv {

namespace {

double round_to(double x, double step) { return std::round(x / step) * step; }

double lognormal(const FieldDist& f, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  return f.mean * std::exp(f.spread * z(rng));
}

double clamped_normal(const FieldDist& f, double lo, double hi, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  return std::clamp(f.mean + f.spread * z(rng), lo, hi);
}

std::string surgery_id(std::size_t i, std::size_t n) {
  std::string digits = std::to_string(i + 1);
  const std::size_t width = std::max<std::size_t>(4, std::to_string(n).size());
  return "S" + std::string(width - std::min(width, digits.size()), '0') + digits;
}

}  // namespace

void PatientParams::validate() const {
  clinical.validate();
  for (double k : {pk.k10, pk.k12, pk.k21, pk.k13, pk.k31, pk.ke0}) {
    if (!(k > 0.0)) throw DomainError("patient: rate constants must be positive");
  }
  if (!(v1 > 0.0)) throw DomainError("patient: central volume must be positive");
  if (!(emax > 0.0 && emax < baseline_map)) throw DomainError("patient: need 0 < emax < baseline_map");
  if (!(ec50 > 0.0)) throw DomainError("patient: ec50 must be positive");
  if (!(hill >= 1.0)) throw DomainError("patient: hill coefficient must be >= 1");
  if (noise_std < 0.0 || drift_std < 0.0 || remi_sensitivity < 0.0 || remi_mean < 0.0) {
    throw DomainError("patient: spreads and sensitivities must be nonnegative");
  }
  if (!(drift_corr >= 0.0 && drift_corr < 1.0)) throw DomainError("patient: drift_corr must be in [0, 1)");
  if (!(pulse_pressure > 0.0)) throw DomainError("patient: pulse pressure must be positive");
}

PkState pk_step(const PkState& s, double infusion, const PatientParams& p, double dt, PkStepStats* stats) {
  if (!(dt > 0.0)) throw DomainError("pk_step: dt must be positive");
  if (!(infusion >= 0.0)) throw DomainError("pk_step: infusion must be nonnegative");
  for (double v : {s.c1, s.c2, s.c3, s.ce, infusion, dt}) {
    if (!std::isfinite(v)) throw NumericError("pk_step: nonfinite input");
  }
  const auto& k = p.pk;
  PkState n;
  n.c1 = s.c1 + dt * (infusion - (k.k10 + k.k12 + k.k13) * s.c1 + k.k21 * s.c2 + k.k31 * s.c3);
  n.c2 = s.c2 + dt * (k.k12 * s.c1 - k.k21 * s.c2);
  n.c3 = s.c3 + dt * (k.k13 * s.c1 - k.k31 * s.c3);
  n.ce = s.ce + dt * k.ke0 * (s.c1 / p.v1 - s.ce);
  for (double* v : {&n.c1, &n.c2, &n.c3, &n.ce}) {
    if (*v < 0.0) {
      *v = 0.0;
      if (stats) ++stats->clamp_events;
    }
  }
  return n;
}

double pd_map(double ce, double remi, const PatientParams& p, Rng* rng, double baseline_shift) {
  if (!(ce >= 0.0)) throw DomainError("pd_map: effect-site concentration must be nonnegative");
  double effect = p.emax;
  if (std::isfinite(ce)) {
    const double ch = std::pow(ce, p.hill);
    effect = p.emax * ch / (std::pow(p.ec50, p.hill) + ch);
  }
  double map = p.baseline_map + baseline_shift - effect - p.remi_sensitivity * remi;
  if (rng != nullptr && p.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, p.noise_std);
    map += noise(*rng);
  }
  return std::max(kMapFloor, map);
}

void BehaviorPolicyParams::validate() const {
  if (kp < 0.0 || ki < 0.0) throw DomainError("behavior: gains must be nonnegative");
  if (adjustment_period < 1) throw DomainError("behavior: adjustment_period must be >= 1");
  if (dose_noise_std < 0.0) throw DomainError("behavior: dose noise must be nonnegative");
  if (!(dose_floor >= 0.0 && dose_floor <= base_dose && base_dose <= dose_cap)) {
    throw DomainError("behavior: need 0 <= dose_floor <= base_dose <= dose_cap");
  }
  if (induction_steps < 0) throw DomainError("behavior: induction_steps must be >= 0");
}

BehaviorStep behavior_policy_step(double map_now, double integral_err, const BehaviorPolicyParams& p, Rng& rng) {
  if (!std::isfinite(map_now)) throw NumericError("behavior: nonfinite MAP");
  const double err = map_now - p.target_map;
  BehaviorStep out;
  out.integral_err = std::clamp(integral_err + err, -p.integral_limit, p.integral_limit);
  double dose = p.base_dose + p.kp * err + p.ki * out.integral_err;
  if (p.dose_noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, p.dose_noise_std);
    dose *= 1.0 + noise(rng);
  }
  out.dose = std::clamp(dose, p.dose_floor, p.dose_cap);
  return out;
}

BehaviorController::BehaviorController(BehaviorPolicyParams params) : params_(params) {
  params_.validate();
  dose_ = params_.base_dose;
}

double BehaviorController::step(double map_now, Rng& rng) {
  const auto next = behavior_policy_step(map_now, integral_, params_, rng);
  const std::int64_t t = t_++;
  if (t < params_.induction_steps) {
    dose_ = params_.dose_cap;
    return dose_;
  }
  integral_ = next.integral_err;
  if ((t - params_.induction_steps) % params_.adjustment_period == 0) dose_ = next.dose;
  return dose_;
}

PatientParams sample_patient(const Population& pop, Rng& rng) {
  PatientParams p;
  std::bernoulli_distribution male(pop.male_fraction);
  std::bernoulli_distribution extra_asa(0.3);
  const double age = std::round(clamped_normal(pop.age, 18.0, 90.0, rng));
  const double sex = male(rng) ? 1.0 : 0.0;
  const double height = round_to(clamped_normal(pop.height, 140.0, 200.0, rng), 0.1);
  const double weight = round_to(clamped_normal(pop.weight, 40.0, 150.0, rng), 0.1);
  const int asa = std::min(6, 1 + (age > 60.0 ? 1 : 0) + (extra_asa(rng) ? 1 : 0));
  p.clinical = ClinicalInfo::make(age, sex, height, weight, asa);
  p.baseline_map = lognormal(pop.baseline_map, rng);
  p.v1 = lognormal(pop.v1_per_kg, rng) * weight;
  p.pk = {lognormal(pop.k10, rng), lognormal(pop.k12, rng), lognormal(pop.k21, rng),
          lognormal(pop.k13, rng), lognormal(pop.k31, rng), lognormal(pop.ke0, rng)};
  p.emax = std::min(lognormal(pop.emax, rng), 0.8 * p.baseline_map);
  p.ec50 = lognormal(pop.ec50, rng);
  p.hill = std::max(1.0, lognormal(pop.hill, rng));
  p.noise_std = lognormal(pop.noise_std, rng);
  p.remi_sensitivity = lognormal(pop.remi_sensitivity, rng);
  p.remi_mean = lognormal(pop.remi_mean, rng);
  p.drift_std = lognormal(pop.drift_std, rng);
  p.pulse_pressure = lognormal(pop.pulse_pressure, rng);
  p.validate();
  return p;
}

void GeneratorConfig::validate() const {
  if (n_surgeries < 1) throw ConfigError("generator: n_surgeries must be >= 1");
  if (duration_min < 1 || duration_max < duration_min) throw ConfigError("generator: invalid duration range");
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ConfigError("generator: missing_rate must be in [0, 1)");
  behavior.validate();
}

namespace {

struct RemiProcess {
  double level = 0.0;

  void draw(const PatientParams& p, Rng& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    level = p.remi_mean * std::exp(p.remi_spread * z(rng));
  }
  void step(const PatientParams& p, Rng& rng) {
    std::bernoulli_distribution change(p.remi_change_prob);
    if (change(rng)) draw(p, rng);
  }
};

struct DriftProcess {
  double value = 0.0;

  void step(const PatientParams& p, Rng& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    value = p.drift_corr * value + p.drift_std * z(rng);
  }
};

data::RawClinical raw_clinical(const ClinicalInfo& c) {
  return {c.age, c.sex, c.height, c.weight, c.bmi, static_cast<double>(c.asa_grade)};
}

}  // namespace

SimulatedSurgery simulate_surgery(const std::string& id, const PatientParams& patient,
                                  const BehaviorPolicyParams& behavior, int duration, std::uint64_t seed) {
  if (duration < 1) throw ConfigError("simulate: duration must be >= 1");
  patient.validate();
  Rng rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  BehaviorPolicyParams surgery_behavior = behavior;
  surgery_behavior.target_map = behavior.target_map + behavior.target_spread * z(rng);
  BehaviorController controller(surgery_behavior);
  RemiProcess remi;
  remi.draw(patient, rng);
  DriftProcess drift;

  SimulatedSurgery out;
  out.patient = patient;
  out.behavior_target = surgery_behavior.target_map;
  out.raw.surgery_id = id;
  out.raw.clinical = raw_clinical(patient.clinical);
  out.raw.anesthetic_type = data::AnestheticType::kPropofol;
  out.raw.rows.reserve(static_cast<std::size_t>(duration) + 1);

  PkState pk;
  for (int t = 0; t <= duration; ++t) {
    const double map = round_to(pd_map(pk.ce, remi.level, patient, &rng, drift.value), 0.1);
    data::RawRow row;
    row.t = t;
    row.map = map;
    row.ap_sys = round_to(map + 2.0 * patient.pulse_pressure / 3.0, 0.1);
    row.ap_dia = round_to(map - patient.pulse_pressure / 3.0, 0.1);
    row.remifentanil = round_to(remi.level, 0.001);
    if (t < duration) {
      const double dose = round_to(controller.step(map, rng), 0.01);
      row.propofol = dose;
      pk = pk_step(pk, dose * patient.clinical.weight / 60.0, patient, 1.0);
    }
    out.raw.rows.push_back(row);
    drift.step(patient, rng);
    remi.step(patient, rng);
  }
  return out;
}

void inject_missingness(data::RawSurgery& s, double rate, Rng& rng) {
  if (rate <= 0.0) return;
  std::bernoulli_distribution drop(rate);
  for (std::size_t i = 0; i < s.rows.size(); ++i) {
    auto& r = s.rows[i];
    for (auto* cell : {&r.ap_sys, &r.ap_dia, &r.map, &r.remifentanil}) {
      if (drop(rng)) cell->reset();
    }
    if (i + 1 < s.rows.size() && drop(rng)) r.propofol.reset();
  }
}

std::vector<SimulatedSurgery> generate_surgeries(const GeneratorConfig& config) {
  config.validate();
  std::vector<SimulatedSurgery> out;
  out.reserve(config.n_surgeries);
  for (std::size_t i = 0; i < config.n_surgeries; ++i) {
    Rng patient_rng(derive_seed(config.seed, "patient", i));
    const PatientParams patient = sample_patient(config.population, patient_rng);
    std::uniform_int_distribution<int> duration(config.duration_min, config.duration_max);
    const int steps = duration(patient_rng);
    auto sim = simulate_surgery(surgery_id(i, config.n_surgeries), patient, config.behavior, steps,
                                derive_seed(config.seed, "trajectory", i));
    if (config.missing_rate > 0.0) {
      Rng missing_rng(derive_seed(config.seed, "missing", i));
      inject_missingness(sim.raw, config.missing_rate, missing_rng);
    }
    out.push_back(std::move(sim));
  }
  return out;
}

std::size_t generate_dataset(const GeneratorConfig& config, const std::filesystem::path& dir) {
  const auto sims = generate_surgeries(config);
  std::vector<data::RawSurgery> raws;
  raws.reserve(sims.size());
  for (const auto& s : sims) raws.push_back(s.raw);
  data::write_raw_directory(raws, dir);
  return raws.size();
}

RolloutResult rollout_policy(const ObservationPolicy& policy, const PatientParams& patient, int duration,
                             std::uint64_t seed, const RolloutOptions& options) {
  if (duration < 1) throw ConfigError("rollout: duration must be >= 1");
  if (!(options.gamma >= 0.0 && options.gamma < 1.0)) throw ConfigError("rollout: gamma must be in [0, 1)");
  if (!(options.p_max > 0.0)) throw ConfigError("rollout: p_max must be positive");
  patient.validate();
  Rng rng(seed);
  RemiProcess remi;
  remi.draw(patient, rng);
  DriftProcess drift;

  RolloutResult out;
  out.trace.surgery_id = "rollout";
  out.trace.clinical = raw_clinical(patient.clinical);
  std::vector<Pressures> history;
  double map_sum = 0.0;
  PkState pk;
  for (int t = 0; t <= duration; ++t) {
    const double map = pd_map(pk.ce, remi.level, patient, &rng, drift.value);
    const Pressures now{map + 2.0 * patient.pulse_pressure / 3.0, map - patient.pulse_pressure / 3.0, map};
    history.push_back(now);
    map_sum += map;
    data::RawRow row;
    row.t = t;
    row.ap_sys = now.ap_sys;
    row.ap_dia = now.ap_dia;
    row.map = now.map;
    row.remifentanil = remi.level;
    if (t < duration) {
      const std::size_t n = history.size();
      const auto& p1 = history[n >= 2 ? n - 2 : 0];
      const auto& p2 = history[n >= 3 ? n - 3 : 0];
      const auto obs = ObservationState::make(patient.clinical, now, p1, p2, remi.level,
                                              map_sum / static_cast<double>(t + 1));
      const double a = policy(obs);
      if (!(a >= 0.0 && a <= 1.0)) {
        throw ContractError("rollout: policy returned action " + format_double(a) + " outside [0, 1]");
      }
      const double dose = a * options.p_max;
      row.propofol = dose;
      pk = pk_step(pk, dose * patient.clinical.weight / 60.0, patient, 1.0);
    }
    out.trace.rows.push_back(row);
    drift.step(patient, rng);
    remi.step(patient, rng);
  }
  out.episode = data::build_episode(out.trace, options.p_max, options.map_target);
  double discount = 1.0;
  for (const auto& tr : out.episode.transitions) {
    out.true_return += discount * tr.reward;
    discount *= options.gamma;
  }
  return out;
}

}  // namespace pcql::simenv
