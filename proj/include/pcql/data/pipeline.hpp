#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcql/core/types.hpp"
#include "pcql/data/raw.hpp"

namespace pcql::data {

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

struct FilterRules {
  std::int64_t min_duration_steps = 30;  // half an hour at one-minute steps
  double max_missing_fraction = 0.3;
};

// A rejected surgery is counted once, under the first rule it fails. Rules
// are checked in the order inhaled, missing_dosing, too_short,
// severe_missing_vitals.
struct FilterReport {
  std::size_t input = 0;
  std::size_t retained = 0;
  std::size_t missing_dosing = 0;
  std::size_t too_short = 0;
  std::size_t severe_missing_vitals = 0;
  std::size_t inhaled = 0;

  std::size_t rejected() const { return missing_dosing + too_short + severe_missing_vitals + inhaled; }
};

// Fraction of missing ap_sys/ap_dia/map cells over all rows.
double missing_vitals_fraction(const RawSurgery& s);

std::pair<std::vector<RawSurgery>, FilterReport> filter_surgeries(std::vector<RawSurgery> raw,
                                                                  const FilterRules& rules);

// ---------------------------------------------------------------------------
// k-NN imputation
// ---------------------------------------------------------------------------

struct KnnOptions {
  int k = 5;
  bool include_timestamp = true;
};

struct ImputeStats {
  std::size_t imputed_cells = 0;
};

// Fills every missing vitals/remifentanil cell and every missing dose cell
// except the structurally empty dose of the last row. A missing cell takes
// the mean of the column over the k nearest rows that observe that column;
// distance is Euclidean over the standardized columns observed in both rows
// (timestamp included). Only originally observed values are used as donors,
// which makes the operation idempotent.
RawSurgery impute_knn(const RawSurgery& surgery, const KnnOptions& options = {}, ImputeStats* stats = nullptr);

// Clinical fields are imputed across surgeries with the same k-NN rule over
// the clinical columns; bmi is recomputed from height and weight when missing.
void impute_clinical_knn(std::vector<RawSurgery>& surgeries, const KnnOptions& options = {},
                         ImputeStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Rewards and transitions
// ---------------------------------------------------------------------------

double compute_map_target(std::span<const VitalsFrame> episode_vitals);

struct RewardTerms {
  double r_error = 0.0;
  double r_dosage = 0.0;
  double r_total = 0.0;
};

inline constexpr double kIdealBand = 0.15;
inline constexpr double kSuboptimalBand = 0.30;

RewardTerms compute_reward(double map_t, double map_star, Action action);

// Statistics of the 19 features over every state of the given episodes.
// Constant columns get std 1.
std::pair<FeatureVector, FeatureVector> feature_statistics(const std::vector<Episode>& episodes);

// Episode of one imputed surgery. The MAP target defaults to the mean MAP
// over every record of the surgery.
Episode build_episode(const RawSurgery& surgery, double p_max, std::optional<double> map_target = std::nullopt);

// One episode per surgery, one transition per step t < T. Rewards use
// MAP_{t+1}. When meta_from is absent, p_max and the feature statistics are
// fitted on these surgeries; otherwise they are reused and a dose above p_max
// is an error.
OfflineDataset build_transition_dataset(const std::vector<RawSurgery>& surgeries,
                                        const std::optional<DatasetMeta>& meta_from = std::nullopt);

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitRatios {
  double train = 0.7;
  double valid = 0.1;
  double test = 0.2;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
};

SplitSizes split_sizes(std::size_t n, const SplitRatios& ratios);

// Shuffled index partition of [0, n) with the sizes above.
std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n, const SplitRatios& ratios, std::uint64_t seed);

struct DatasetSplit {
  OfflineDataset train;
  OfflineDataset valid;
  OfflineDataset test;
};

DatasetSplit split_dataset(const OfflineDataset& ds, const SplitRatios& ratios, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Processed dataset directory: meta.json + episodes/<id>.csv
// ---------------------------------------------------------------------------

void write_processed(const OfflineDataset& ds, const std::filesystem::path& dir);
OfflineDataset read_processed(const std::filesystem::path& dir);

std::string meta_to_json(const DatasetMeta& meta);
DatasetMeta meta_from_json(std::string_view text);

}  // namespace pcql::data
