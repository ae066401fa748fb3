#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pcql {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::size_t kNumFeatures = 19;

using FeatureVector = std::array<double, kNumFeatures>;

// Canonical flattening order of the agent observation. Any change here must
// bump kSchemaVersion: checkpoints and attribution indices depend on it.
enum Feature : std::size_t {
  kAge = 0,
  kSex,
  kHeight,
  kWeight,
  kBmi,
  kAsa,
  kMap,
  kApSys,
  kApDia,
  kMapPrev1,
  kApSysPrev1,
  kApDiaPrev1,
  kMapPrev2,
  kApSysPrev2,
  kApDiaPrev2,
  kRemifentanil,
  kMapTarget,
  kMapTargetError,
  kMapChange,
};

const std::array<std::string_view, kNumFeatures>& feature_names();

struct ClinicalInfo {
  double age = 0.0;     // years
  double sex = 0.0;     // 0/1
  double height = 0.0;  // cm
  double weight = 0.0;  // kg
  double bmi = 0.0;     // kg/m^2
  int asa_grade = 1;    // 1..6

  static ClinicalInfo make(double age, double sex, double height, double weight, int asa_grade);
  static double bmi_of(double height_cm, double weight_kg);
  void validate() const;
};

// Arterial pressures of one moment, mmHg.
struct Pressures {
  double ap_sys = 0.0;
  double ap_dia = 0.0;
  double map = 0.0;

  void validate() const;
};

struct VitalsFrame {
  double ap_sys = 0.0;
  double ap_dia = 0.0;
  double map = 0.0;
  std::int64_t timestamp_index = 0;

  Pressures pressures() const { return {ap_sys, ap_dia, map}; }
  void validate() const;
};

struct ObservationState {
  ClinicalInfo clinical;
  Pressures now;
  Pressures prev1;
  Pressures prev2;
  double remifentanil = 0.0;  // ug/kg/min
  double map_target = 0.0;
  double map_target_error = 0.0;
  double map_change = 0.0;

  // Derives map_target_error and map_change from the pressures.
  static ObservationState make(const ClinicalInfo& clinical, const Pressures& now, const Pressures& prev1,
                               const Pressures& prev2, double remifentanil, double map_target);
  void validate() const;
};

// Normalized propofol dose a in [0, 1]; the physical dose is a * p_max.
class Action {
 public:
  Action() = default;
  explicit Action(double normalized_dose);

  double normalized() const { return value_; }
  double physical(double p_max) const { return value_ * p_max; }

 private:
  double value_ = 0.0;
};

struct Transition {
  ObservationState state;
  Action action;
  double reward = 0.0;
  ObservationState next_state;
  bool terminal = false;
};

struct Episode {
  std::string episode_id;
  std::vector<Transition> transitions;
  double map_target = 0.0;

  void validate() const;
};

enum class SplitTag { kTrain, kValid, kTest };

std::string_view to_string(SplitTag tag);
SplitTag split_tag_from_string(std::string_view s);

struct DatasetMeta {
  double p_max = 1.0;  // mg/kg/h
  FeatureVector feature_means{};
  FeatureVector feature_stds{};
  SplitTag split_tag = SplitTag::kTrain;
  int schema_version = kSchemaVersion;
  std::uint64_t split_seed = 0;

  DatasetMeta();
  void validate() const;
};

struct OfflineDataset {
  std::vector<Episode> episodes;
  DatasetMeta meta;

  std::size_t num_transitions() const;
  void validate() const;
};

FeatureVector flatten_observation(const ObservationState& obs);
ObservationState unflatten_observation(std::span<const double> vec);

FeatureVector standardize(std::span<const double> vec, const DatasetMeta& meta);
FeatureVector destandardize(std::span<const double> vec, const DatasetMeta& meta);

}  // namespace pcql
