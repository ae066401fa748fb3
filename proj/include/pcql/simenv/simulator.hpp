#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "pcql/core/types.hpp"
#include "pcql/data/raw.hpp"

namespace pcql::simenv {

using Rng = std::mt19937_64;

// Drug amounts (mg) in the central, fast and slow compartments, plus the
// effect-site concentration (ug/mL).
struct PkState {
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double ce = 0.0;
};

struct PkRates {
  double k10 = 0.119;
  double k12 = 0.112;
  double k21 = 0.055;
  double k13 = 0.0419;
  double k31 = 0.0033;
  double ke0 = 0.26;
};

struct PatientParams {
  ClinicalInfo clinical;
  double baseline_map = 95.0;  // mmHg
  double v1 = 15.0;            // central volume, L
  PkRates pk;
  double emax = 35.0;  // maximal MAP depression, mmHg
  double ec50 = 2.5;   // ug/mL
  double hill = 2.0;
  double noise_std = 2.0;           // mmHg
  double remi_sensitivity = 40.0;   // mmHg per ug/kg/min
  double remi_mean = 0.15;          // ug/kg/min
  double remi_change_prob = 0.05;   // per-step probability of a new remifentanil level
  double remi_spread = 0.3;         // relative spread of remifentanil levels
  double drift_std = 3.0;           // AR(1) innovation of surgical stimulation, mmHg
  double drift_corr = 0.95;
  double pulse_pressure = 45.0;     // mmHg

  void validate() const;
};

struct PkStepStats {
  std::size_t clamp_events = 0;
};

// One explicit Euler step of the three-compartment mammillary model.
// infusion is in mg/min, dt in minutes.
PkState pk_step(const PkState& state, double infusion, const PatientParams& params, double dt,
                PkStepStats* stats = nullptr);

inline constexpr double kMapFloor = 20.0;

// Sigmoid (Hill) MAP depression plus linear remifentanil effect. Gaussian
// noise is added only when an rng is given. baseline_shift models transient
// stimulation on top of the patient baseline.
double pd_map(double ce, double remi, const PatientParams& params, Rng* rng = nullptr, double baseline_shift = 0.0);

struct BehaviorPolicyParams {
  double kp = 0.08;               // mg/kg/h per mmHg
  double ki = 0.002;              // mg/kg/h per mmHg*min
  double dose_noise_std = 0.3;    // multiplicative
  int adjustment_period = 10;     // steps between dose changes
  double target_map = 80.0;       // mmHg
  double target_spread = 4.0;     // per-surgery jitter of the target, mmHg
  double base_dose = 3.5;         // maintenance dose at zero error, mg/kg/h
  double dose_floor = 1.0;        // mg/kg/h
  double dose_cap = 8.0;          // mg/kg/h
  int induction_steps = 0;        // optional steps infused at dose_cap before control starts
  double integral_limit = 300.0;  // anti-windup bound, mmHg*min

  void validate() const;
};

struct BehaviorStep {
  double dose = 0.0;  // mg/kg/h
  double integral_err = 0.0;
};

// PI law toward target_map: positive error (MAP above target) raises the dose.
BehaviorStep behavior_policy_step(double map_now, double integral_err, const BehaviorPolicyParams& params, Rng& rng);

// Stateful wrapper: optional induction at dose_cap, then the PI dose is adopted only
// every adjustment_period steps and held in between.
class BehaviorController {
 public:
  explicit BehaviorController(BehaviorPolicyParams params);

  double step(double map_now, Rng& rng);

 private:
  BehaviorPolicyParams params_;
  double integral_ = 0.0;
  double dose_ = 0.0;
  std::int64_t t_ = 0;
};

// Population distribution: `mean` and `spread` per field. Clinical fields are
// normal with absolute spread; physiological fields are log-normal with
// `spread` the standard deviation of the log.
struct FieldDist {
  double mean = 0.0;
  double spread = 0.0;
};

struct Population {
  FieldDist age{50.0, 12.0};
  FieldDist height{165.0, 9.0};
  FieldDist weight{65.0, 11.0};
  double male_fraction = 0.5;
  FieldDist baseline_map{95.0, 0.08};
  FieldDist v1_per_kg{0.228, 0.15};
  FieldDist k10{0.119, 0.15};
  FieldDist k12{0.112, 0.15};
  FieldDist k21{0.055, 0.15};
  FieldDist k13{0.0419, 0.15};
  FieldDist k31{0.0033, 0.15};
  FieldDist ke0{0.26, 0.15};
  FieldDist emax{35.0, 0.15};
  FieldDist ec50{2.5, 0.2};
  FieldDist hill{2.0, 0.1};
  FieldDist noise_std{2.0, 0.2};
  FieldDist remi_sensitivity{40.0, 0.3};
  FieldDist remi_mean{0.15, 0.3};
  FieldDist drift_std{3.0, 0.2};
  FieldDist pulse_pressure{45.0, 0.15};
};

PatientParams sample_patient(const Population& population, Rng& rng);

struct GeneratorConfig {
  std::size_t n_surgeries = 200;
  int duration_min = 60;   // steps
  int duration_max = 240;  // steps
  std::uint64_t seed = 0;
  Population population;
  BehaviorPolicyParams behavior;
  double missing_rate = 0.0;  // per-cell deletion probability of the missingness injector

  void validate() const;
};

struct SimulatedSurgery {
  data::RawSurgery raw;
  PatientParams patient;
  double behavior_target = 0.0;
};

// Simulates one surgery of `duration` steps under the behavior policy:
// duration + 1 monitor rows and duration dose records.
SimulatedSurgery simulate_surgery(const std::string& id, const PatientParams& patient,
                                  const BehaviorPolicyParams& behavior, int duration, std::uint64_t seed);

std::vector<SimulatedSurgery> generate_surgeries(const GeneratorConfig& config);

// Writes the raw CSV directory consumed by the data module; returns the
// number of surgeries written.
std::size_t generate_dataset(const GeneratorConfig& config, const std::filesystem::path& dir);

// Deletes vitals/dose/remifentanil cells uniformly at random; the structurally
// empty last dose cell is left alone.
void inject_missingness(data::RawSurgery& surgery, double rate, Rng& rng);

using ObservationPolicy = std::function<double(const ObservationState&)>;

struct RolloutOptions {
  double gamma = 0.99;
  double p_max = 8.0;  // mg/kg/h corresponding to a = 1
  // Reward setpoint. Absent: the realized mean MAP of the rollout.
  std::optional<double> map_target;
};

struct RolloutResult {
  Episode episode;
  double true_return = 0.0;
  data::RawSurgery trace;
};

// Closed-loop simulation of `policy`. While running, the policy observes the
// running mean MAP as its target feature; the returned episode is relabelled
// against the final setpoint.
RolloutResult rollout_policy(const ObservationPolicy& policy, const PatientParams& params, int duration,
                             std::uint64_t seed, const RolloutOptions& options = {});

}  // namespace pcql::simenv
