#include "pcql/core/types.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "pcql/core/errors.hpp"

namespace pcql {

namespace {

bool finite(double x) { return std::isfinite(x); }

}  // namespace

const std::array<std::string_view, kNumFeatures>& feature_names() {
  static const std::array<std::string_view, kNumFeatures> names = {
      "age",          "sex",          "height",         "weight",       "bmi",
      "asa",          "map",          "ap_sys",         "ap_dia",       "map_prev1",
      "ap_sys_prev1", "ap_dia_prev1", "map_prev2",      "ap_sys_prev2", "ap_dia_prev2",
      "remifentanil", "map_target",   "map_target_error", "map_change"};
  return names;
}

double ClinicalInfo::bmi_of(double height_cm, double weight_kg) {
  const double h = height_cm / 100.0;
  return weight_kg / (h * h);
}

ClinicalInfo ClinicalInfo::make(double age, double sex, double height, double weight, int asa_grade) {
  ClinicalInfo c{age, sex, height, weight, bmi_of(height, weight), asa_grade};
  c.validate();
  return c;
}

void ClinicalInfo::validate() const {
  if (!(age > 0.0) || !finite(age)) throw DomainError("clinical: age must be positive");
  if (sex != 0.0 && sex != 1.0) throw DomainError("clinical: sex must be encoded 0 or 1");
  if (!(height > 0.0) || !finite(height)) throw DomainError("clinical: height must be positive");
  if (!(weight > 0.0) || !finite(weight)) throw DomainError("clinical: weight must be positive");
  if (!finite(bmi) || std::abs(bmi - bmi_of(height, weight)) > 0.5) {
    throw DomainError("clinical: bmi inconsistent with height and weight");
  }
  if (asa_grade < 1 || asa_grade > 6) throw DomainError("clinical: asa grade must be in 1..6");
}

void Pressures::validate() const {
  for (double p : {ap_sys, ap_dia, map}) {
    if (!finite(p) || p <= 0.0 || p >= 300.0) throw DomainError("vitals: pressure outside (0, 300) mmHg");
  }
  if (!(ap_dia <= map && map <= ap_sys)) throw DomainError("vitals: expected ap_dia <= map <= ap_sys");
}

void VitalsFrame::validate() const {
  pressures().validate();
  if (timestamp_index < 0) throw DomainError("vitals: negative timestamp index");
}

ObservationState ObservationState::make(const ClinicalInfo& clinical, const Pressures& now,
                                        const Pressures& prev1, const Pressures& prev2,
                                        double remifentanil, double map_target) {
  ObservationState obs;
  obs.clinical = clinical;
  obs.now = now;
  obs.prev1 = prev1;
  obs.prev2 = prev2;
  obs.remifentanil = remifentanil;
  obs.map_target = map_target;
  obs.map_target_error = now.map - map_target;
  obs.map_change = now.map - prev1.map;
  obs.validate();
  return obs;
}

void ObservationState::validate() const {
  clinical.validate();
  now.validate();
  prev1.validate();
  prev2.validate();
  if (!finite(remifentanil) || remifentanil < 0.0) throw DomainError("observation: remifentanil must be >= 0");
  if (!finite(map_target) || map_target <= 0.0) throw DomainError("observation: map target must be positive");
  if (map_target_error != now.map - map_target) throw DomainError("observation: map_target_error != map - map_target");
  if (map_change != now.map - prev1.map) throw DomainError("observation: map_change != map - map_prev1");
}

Action::Action(double normalized_dose) : value_(normalized_dose) {
  if (!(normalized_dose >= 0.0 && normalized_dose <= 1.0)) {
    std::ostringstream os;
    os << "action: normalized dose " << normalized_dose << " outside [0, 1]";
    throw DomainError(os.str());
  }
}

void Episode::validate() const {
  if (transitions.empty()) throw DomainError("episode " + episode_id + ": no transitions");
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const auto& tr = transitions[i];
    if (tr.state.map_target != map_target || tr.next_state.map_target != map_target) {
      throw DomainError("episode " + episode_id + ": inconsistent map target");
    }
    const bool last = i + 1 == transitions.size();
    if (tr.terminal != last) throw DomainError("episode " + episode_id + ": terminal flag only allowed at the end");
  }
}

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain:
      return "train";
    case SplitTag::kValid:
      return "valid";
    case SplitTag::kTest:
      return "test";
  }
  return "train";
}

SplitTag split_tag_from_string(std::string_view s) {
  if (s == "train") return SplitTag::kTrain;
  if (s == "valid") return SplitTag::kValid;
  if (s == "test") return SplitTag::kTest;
  throw SchemaError("unknown split tag '" + std::string(s) + "'");
}

DatasetMeta::DatasetMeta() { feature_stds.fill(1.0); }

void DatasetMeta::validate() const {
  if (!(p_max > 0.0) || !finite(p_max)) throw SchemaError("meta: p_max must be positive");
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    if (!(feature_stds[i] > 0.0) || !finite(feature_stds[i]) || !finite(feature_means[i])) {
      throw SchemaError("meta: feature std of '" + std::string(feature_names()[i]) + "' must be positive");
    }
  }
  if (schema_version != kSchemaVersion) throw SchemaError("meta: unsupported schema version");
}

std::size_t OfflineDataset::num_transitions() const {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.transitions.size();
  return n;
}

void OfflineDataset::validate() const {
  meta.validate();
  std::set<std::string> ids;
  for (const auto& ep : episodes) {
    if (!ids.insert(ep.episode_id).second) throw SchemaError("dataset: duplicate episode id " + ep.episode_id);
    // Action already bounds a to [0, 1], so a * p_max <= p_max holds by construction.
    ep.validate();
  }
}

FeatureVector flatten_observation(const ObservationState& obs) {
  return {obs.clinical.age,      obs.clinical.sex,    obs.clinical.height,  obs.clinical.weight,
          obs.clinical.bmi,      static_cast<double>(obs.clinical.asa_grade),
          obs.now.map,           obs.now.ap_sys,      obs.now.ap_dia,       obs.prev1.map,
          obs.prev1.ap_sys,      obs.prev1.ap_dia,    obs.prev2.map,        obs.prev2.ap_sys,
          obs.prev2.ap_dia,      obs.remifentanil,    obs.map_target,       obs.map_target_error,
          obs.map_change};
}

ObservationState unflatten_observation(std::span<const double> v) {
  if (v.size() != kNumFeatures) throw SchemaError("observation vector must have 19 entries");
  const double asa = v[kAsa];
  if (asa != std::round(asa)) throw DomainError("observation: asa grade must be integral");
  ObservationState obs;
  obs.clinical = {v[kAge], v[kSex], v[kHeight], v[kWeight], v[kBmi], static_cast<int>(asa)};
  obs.now = {v[kApSys], v[kApDia], v[kMap]};
  obs.prev1 = {v[kApSysPrev1], v[kApDiaPrev1], v[kMapPrev1]};
  obs.prev2 = {v[kApSysPrev2], v[kApDiaPrev2], v[kMapPrev2]};
  obs.remifentanil = v[kRemifentanil];
  obs.map_target = v[kMapTarget];
  obs.map_target_error = v[kMapTargetError];
  obs.map_change = v[kMapChange];
  obs.validate();
  return obs;
}

FeatureVector standardize(std::span<const double> vec, const DatasetMeta& meta) {
  if (vec.size() != kNumFeatures) throw SchemaError("standardize: expected 19 features");
  FeatureVector out{};
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    out[i] = (vec[i] - meta.feature_means[i]) / meta.feature_stds[i];
  }
  return out;
}

FeatureVector destandardize(std::span<const double> vec, const DatasetMeta& meta) {
  if (vec.size() != kNumFeatures) throw SchemaError("destandardize: expected 19 features");
  FeatureVector out{};
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    out[i] = vec[i] * meta.feature_stds[i] + meta.feature_means[i];
  }
  return out;
}

}  // namespace pcql
