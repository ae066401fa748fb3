#include "pcql/data/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"

namespace pcql::data {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool is_last_row(const RawSurgery& s, std::size_t i) { return i + 1 == s.rows.size(); }

// Column view of a surgery: t, ap_sys, ap_dia, map, propofol, remifentanil.
constexpr std::size_t kCols = 6;
constexpr std::array<const char*, kCols> kColNames = {"t", "ap_sys", "ap_dia", "map", "propofol", "remifentanil"};

std::optional<double> get(const RawRow& r, std::size_t c) {
  switch (c) {
    case 0:
      return static_cast<double>(r.t);
    case 1:
      return r.ap_sys;
    case 2:
      return r.ap_dia;
    case 3:
      return r.map;
    case 4:
      return r.propofol;
    default:
      return r.remifentanil;
  }
}

void set(RawRow& r, std::size_t c, double v) {
  switch (c) {
    case 1:
      r.ap_sys = v;
      break;
    case 2:
      r.ap_dia = v;
      break;
    case 3:
      r.map = v;
      break;
    case 4:
      r.propofol = v;
      break;
    case 5:
      r.remifentanil = v;
      break;
    default:
      break;
  }
}

// Standardizes each column over its observed entries; NaN marks missing.
std::vector<std::vector<double>> standardized_columns(const std::vector<std::vector<double>>& table) {
  std::vector<std::vector<double>> out = table;
  if (table.empty()) return out;
  const std::size_t ncols = table.front().size();
  for (std::size_t c = 0; c < ncols; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& row : table) {
      if (!std::isnan(row[c])) {
        sum += row[c];
        ++n;
      }
    }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& row : table) {
      if (!std::isnan(row[c])) ss += (row[c] - mean) * (row[c] - mean);
    }
    double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 1e-12)) sd = 1.0;
    for (auto& row : out) {
      if (!std::isnan(row[c])) row[c] = (row[c] - mean) / sd;
    }
  }
  return out;
}

// Mean of column `target` over the k nearest donor rows of `query`.
// Returns nullopt when no donor observes the column.
std::optional<double> knn_value(const std::vector<std::vector<double>>& raw,
                                const std::vector<std::vector<double>>& z, std::size_t query, std::size_t target,
                                int k, const std::vector<bool>& distance_cols,
                                const std::vector<bool>& donor_allowed) {
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t j = 0; j < raw.size(); ++j) {
    if (j == query || !donor_allowed[j] || std::isnan(raw[j][target])) continue;
    double d2 = 0.0;
    for (std::size_t c = 0; c < distance_cols.size(); ++c) {
      if (!distance_cols[c] || c == target) continue;
      if (std::isnan(z[query][c]) || std::isnan(z[j][c])) continue;
      const double d = z[query][c] - z[j][c];
      d2 += d * d;
    }
    cand.emplace_back(std::sqrt(d2), j);
  }
  if (cand.empty()) return std::nullopt;
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < take; ++i) sum += raw[cand[i].second][target];
  return sum / static_cast<double>(take);
}

}  // namespace

// ---------------------------------------------------------------------------

double missing_vitals_fraction(const RawSurgery& s) {
  if (s.rows.empty()) return 1.0;
  std::size_t missing = 0;
  for (const auto& r : s.rows) missing += !r.ap_sys + !r.ap_dia + !r.map;
  return static_cast<double>(missing) / static_cast<double>(3 * s.rows.size());
}

std::pair<std::vector<RawSurgery>, FilterReport> filter_surgeries(std::vector<RawSurgery> raw,
                                                                  const FilterRules& rules) {
  if (rules.min_duration_steps < 1) throw ConfigError("filter: min_duration_steps must be >= 1");
  if (!(rules.max_missing_fraction > 0.0 && rules.max_missing_fraction < 1.0)) {
    throw ConfigError("filter: max_missing_fraction must be in (0, 1)");
  }
  FilterReport report;
  report.input = raw.size();
  std::vector<RawSurgery> kept;
  for (auto& s : raw) {
    if (s.anesthetic_type == AnestheticType::kInhaled) {
      ++report.inhaled;
      continue;
    }
    bool any_dose = false;
    for (std::size_t i = 0; i + 1 < s.rows.size(); ++i) any_dose = any_dose || s.rows[i].propofol.has_value();
    if (!any_dose) {
      ++report.missing_dosing;
      continue;
    }
    if (s.duration_steps() < rules.min_duration_steps) {
      ++report.too_short;
      continue;
    }
    if (missing_vitals_fraction(s) > rules.max_missing_fraction) {
      ++report.severe_missing_vitals;
      continue;
    }
    kept.push_back(std::move(s));
  }
  report.retained = kept.size();
  return {std::move(kept), report};
}

RawSurgery impute_knn(const RawSurgery& surgery, const KnnOptions& options, ImputeStats* stats) {
  if (options.k < 1) throw ConfigError("impute: k must be >= 1");
  const std::size_t n = surgery.rows.size();
  std::vector<std::vector<double>> raw(n, std::vector<double>(kCols, kNaN));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kCols; ++c) {
      if (auto v = get(surgery.rows[i], c)) raw[i][c] = *v;
    }
  }
  const auto z = standardized_columns(raw);
  std::vector<bool> distance_cols(kCols, true);
  distance_cols[0] = options.include_timestamp;

  RawSurgery out = surgery;
  std::vector<bool> all_rows(n, true);
  std::vector<bool> dose_rows(n, true);
  if (n > 0) dose_rows[n - 1] = false;

  for (std::size_t i = 0; i < n; ++i) {
    bool touched[kCols] = {};
    for (std::size_t c = 1; c < kCols; ++c) {
      if (!std::isnan(raw[i][c])) continue;
      if (c == 4 && is_last_row(surgery, i)) continue;
      const auto& donors = c == 4 ? dose_rows : all_rows;
      const auto v = knn_value(raw, z, i, c, options.k, distance_cols, donors);
      if (!v) {
        throw DomainError("impute: column '" + std::string(kColNames[c]) + "' is missing in every row of surgery " +
                          surgery.surgery_id);
      }
      set(out.rows[i], c, *v);
      touched[c] = true;
      if (stats) ++stats->imputed_cells;
    }
    // Imputed pressures are kept inside the observed ordering ap_dia <= map <= ap_sys.
    auto& r = out.rows[i];
    if (touched[3]) r.map = std::clamp(*r.map, std::min(*r.ap_dia, *r.ap_sys), std::max(*r.ap_dia, *r.ap_sys));
    if (touched[1]) r.ap_sys = std::max(*r.ap_sys, *r.map);
    if (touched[2]) r.ap_dia = std::min(*r.ap_dia, *r.map);
  }
  return out;
}

void impute_clinical_knn(std::vector<RawSurgery>& surgeries, const KnnOptions& options, ImputeStats* stats) {
  if (options.k < 1) throw ConfigError("impute: k must be >= 1");
  constexpr std::size_t kClin = 5;  // age, sex, height, weight, asa
  constexpr std::array<const char*, kClin> names = {"age", "sex", "height", "weight", "asa"};
  auto field = [](RawClinical& c, std::size_t i) -> std::optional<double>& {
    switch (i) {
      case 0:
        return c.age;
      case 1:
        return c.sex;
      case 2:
        return c.height;
      case 3:
        return c.weight;
      default:
        return c.asa;
    }
  };
  const std::size_t n = surgeries.size();
  std::vector<std::vector<double>> raw(n, std::vector<double>(kClin, kNaN));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kClin; ++c) {
      if (auto v = field(surgeries[i].clinical, c)) raw[i][c] = *v;
    }
  }
  const auto z = standardized_columns(raw);
  const std::vector<bool> distance_cols(kClin, true);
  const std::vector<bool> donors(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    auto& clinical = surgeries[i].clinical;
    for (std::size_t c = 0; c < kClin; ++c) {
      if (!std::isnan(raw[i][c])) continue;
      auto v = knn_value(raw, z, i, c, options.k, distance_cols, donors);
      if (!v) throw DomainError(std::string("impute: clinical column '") + names[c] + "' is missing everywhere");
      // Categorical codes take the rounded neighbor mean.
      if (c == 1 || c == 4) v = std::round(*v);
      field(clinical, c) = *v;
      if (stats) ++stats->imputed_cells;
    }
    if (!clinical.bmi && clinical.height && clinical.weight) {
      clinical.bmi = ClinicalInfo::bmi_of(*clinical.height, *clinical.weight);
      if (stats) ++stats->imputed_cells;
    }
  }
}

// ---------------------------------------------------------------------------

double compute_map_target(std::span<const VitalsFrame> episode_vitals) {
  if (episode_vitals.empty()) throw DomainError("map target: empty vitals sequence");
  double sum = 0.0;
  for (const auto& v : episode_vitals) sum += v.map;
  return sum / static_cast<double>(episode_vitals.size());
}

RewardTerms compute_reward(double map_t, double map_star, Action action) {
  if (!(map_star > 0.0)) throw DomainError("reward: map target must be positive");
  if (!std::isfinite(map_t)) throw DomainError("reward: map must be finite");
  // Comparing the relative deviation keeps exact boundary cases (e.g. 15 of 100) exact.
  const double rel = std::abs(map_t - map_star) / map_star;
  RewardTerms r;
  if (rel <= kIdealBand) {
    r.r_error = 1.0;
  } else if (rel <= kSuboptimalBand) {
    r.r_error = 0.5;
  } else {
    r.r_error = -1.0;
  }
  r.r_dosage = -rel * action.normalized();
  r.r_total = r.r_error + r.r_dosage;
  return r;
}

std::pair<FeatureVector, FeatureVector> feature_statistics(const std::vector<Episode>& episodes) {
  FeatureVector mean{};
  FeatureVector sd{};
  std::size_t n = 0;
  for (const auto& ep : episodes) {
    for (const auto& tr : ep.transitions) {
      const auto v = flatten_observation(tr.state);
      for (std::size_t i = 0; i < kNumFeatures; ++i) mean[i] += v[i];
      ++n;
    }
  }
  if (n == 0) throw DomainError("feature statistics: no transitions");
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& ep : episodes) {
    for (const auto& tr : ep.transitions) {
      const auto v = flatten_observation(tr.state);
      for (std::size_t i = 0; i < kNumFeatures; ++i) sd[i] += (v[i] - mean[i]) * (v[i] - mean[i]);
    }
  }
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    sd[i] = std::sqrt(sd[i] / static_cast<double>(n));
    if (!(sd[i] > 1e-12 * std::max(1.0, std::abs(mean[i])))) sd[i] = 1.0;
  }
  return {mean, sd};
}

namespace {

ClinicalInfo complete_clinical(const RawSurgery& s) {
  const auto& c = s.clinical;
  if (!c.age || !c.sex || !c.height || !c.weight || !c.asa) {
    throw DomainError("surgery " + s.surgery_id + ": clinical information incomplete (impute first)");
  }
  ClinicalInfo info;
  info.age = *c.age;
  info.sex = *c.sex;
  info.height = *c.height;
  info.weight = *c.weight;
  info.bmi = c.bmi ? *c.bmi : ClinicalInfo::bmi_of(*c.height, *c.weight);
  info.asa_grade = static_cast<int>(std::lround(*c.asa));
  info.validate();
  return info;
}

}  // namespace

Episode build_episode(const RawSurgery& s, double p_max, std::optional<double> map_target) {
  s.validate();
  if (s.rows.size() < 2) throw DomainError("surgery " + s.surgery_id + ": needs at least two records");
  const ClinicalInfo clinical = complete_clinical(s);
  std::vector<VitalsFrame> frames;
  std::vector<double> remi;
  frames.reserve(s.rows.size());
  for (const auto& r : s.rows) {
    if (!r.ap_sys || !r.ap_dia || !r.map || !r.remifentanil) {
      throw DomainError("surgery " + s.surgery_id + ": missing vitals at t=" + std::to_string(r.t) +
                        " (impute first)");
    }
    VitalsFrame f{*r.ap_sys, *r.ap_dia, *r.map, r.t};
    f.validate();
    frames.push_back(f);
    remi.push_back(*r.remifentanil);
  }
  const double target = map_target ? *map_target : compute_map_target(frames);
  if (!(target > 0.0)) throw DomainError("surgery " + s.surgery_id + ": map target must be positive");
  const std::size_t steps = frames.size() - 1;

  auto state_at = [&](std::size_t t) {
    const std::size_t p1 = t >= 1 ? t - 1 : 0;
    const std::size_t p2 = t >= 2 ? t - 2 : 0;
    return ObservationState::make(clinical, frames[t].pressures(), frames[p1].pressures(), frames[p2].pressures(),
                                  remi[t], target);
  };

  Episode ep;
  ep.episode_id = s.surgery_id;
  ep.map_target = target;
  ep.transitions.reserve(steps);
  ObservationState current = state_at(0);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto& dose = s.rows[t].propofol;
    if (!dose) throw DomainError("surgery " + s.surgery_id + ": missing dose at t=" + std::to_string(s.rows[t].t));
    if (*dose < 0.0) throw DomainError("episode " + s.surgery_id + ": negative dose");
    if (*dose > p_max) {
      throw DomainError("episode " + s.surgery_id + ": dose " + format_double(*dose) + " exceeds p_max " +
                        format_double(p_max));
    }
    Transition tr;
    tr.state = current;
    tr.action = Action(*dose / p_max);
    tr.reward = compute_reward(frames[t + 1].map, target, tr.action).r_total;
    tr.next_state = state_at(t + 1);
    tr.terminal = t + 1 == steps;
    current = tr.next_state;
    ep.transitions.push_back(std::move(tr));
  }
  return ep;
}

OfflineDataset build_transition_dataset(const std::vector<RawSurgery>& surgeries,
                                        const std::optional<DatasetMeta>& meta_from) {
  OfflineDataset ds;
  double p_max = 0.0;
  if (meta_from) {
    meta_from->validate();
    ds.meta = *meta_from;
    p_max = meta_from->p_max;
  } else {
    for (const auto& s : surgeries) {
      for (std::size_t i = 0; i + 1 < s.rows.size(); ++i) {
        if (s.rows[i].propofol) p_max = std::max(p_max, *s.rows[i].propofol);
      }
    }
    if (!(p_max > 0.0)) throw DomainError("dataset: maximum dose is zero, cannot normalize actions");
    ds.meta.p_max = p_max;
  }
  ds.episodes.reserve(surgeries.size());
  for (const auto& s : surgeries) ds.episodes.push_back(build_episode(s, p_max));
  if (!meta_from) {
    auto [mean, sd] = feature_statistics(ds.episodes);
    ds.meta.feature_means = mean;
    ds.meta.feature_stds = sd;
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------

SplitSizes split_sizes(std::size_t n, const SplitRatios& r) {
  if (r.train < 0.0 || r.valid < 0.0 || r.test < 0.0 || std::abs(r.train + r.valid + r.test - 1.0) > 1e-9) {
    throw ConfigError("split: ratios must be nonnegative and sum to 1");
  }
  const auto nd = static_cast<double>(n);
  SplitSizes s;
  s.train = static_cast<std::size_t>(std::llround(r.train * nd));
  s.valid = static_cast<std::size_t>(std::llround(r.valid * nd));
  if (s.train + s.valid > n) s.valid = n - s.train;
  s.test = n - s.train - s.valid;
  return s;
}

std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n, const SplitRatios& ratios,
                                                       std::uint64_t seed) {
  const auto sizes = split_sizes(n, ratios);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::array<std::vector<std::size_t>, 3> parts;
  parts[0].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(sizes.train));
  parts[1].assign(idx.begin() + static_cast<std::ptrdiff_t>(sizes.train),
                  idx.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.valid));
  parts[2].assign(idx.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.valid), idx.end());
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

DatasetSplit split_dataset(const OfflineDataset& ds, const SplitRatios& ratios, std::uint64_t seed) {
  if (ds.episodes.size() < 10) throw DomainError("split: at least 10 episodes are required");
  const auto parts = split_indices(ds.episodes.size(), ratios, seed);
  DatasetSplit out;
  OfflineDataset* targets[3] = {&out.train, &out.valid, &out.test};
  const SplitTag tags[3] = {SplitTag::kTrain, SplitTag::kValid, SplitTag::kTest};
  for (std::size_t p = 0; p < 3; ++p) {
    targets[p]->meta = ds.meta;
    targets[p]->meta.split_tag = tags[p];
    targets[p]->meta.split_seed = seed;
    for (auto i : parts[p]) targets[p]->episodes.push_back(ds.episodes[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string meta_to_json(const DatasetMeta& meta) {
  nlohmann::ordered_json j;
  j["schema_version"] = meta.schema_version;
  j["p_max"] = meta.p_max;
  j["feature_names"] = std::vector<std::string>(feature_names().begin(), feature_names().end());
  j["feature_means"] = meta.feature_means;
  j["feature_stds"] = meta.feature_stds;
  j["split_tag"] = std::string(to_string(meta.split_tag));
  j["split_seed"] = meta.split_seed;
  return j.dump(2);
}

DatasetMeta meta_from_json(std::string_view text) {
  DatasetMeta m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kSchemaVersion) throw SchemaError("meta.json: unsupported schema version");
    m.p_max = j.at("p_max").get<double>();
    m.feature_means = j.at("feature_means").get<FeatureVector>();
    m.feature_stds = j.at("feature_stds").get<FeatureVector>();
    m.split_tag = split_tag_from_string(j.at("split_tag").get<std::string>());
    m.split_seed = j.at("split_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("meta.json: ") + e.what());
  }
  m.validate();
  return m;
}

namespace {

std::string episode_csv_header() {
  std::string h;
  for (auto name : feature_names()) {
    h += name;
    h += ',';
  }
  h += "action,reward,terminal";
  for (auto name : feature_names()) {
    h += ",next_";
    h += name;
  }
  return h;
}

}  // namespace

void write_processed(const OfflineDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(meta_to_json(ds.meta));
  std::vector<std::string> ids;
  for (const auto& ep : ds.episodes) ids.push_back(ep.episode_id);
  j["episodes"] = ids;
  write_text_file(dir / "meta.json", j.dump(2) + "\n");
  const std::string header = episode_csv_header();
  for (const auto& ep : ds.episodes) {
    std::string out = header + "\n";
    for (const auto& tr : ep.transitions) {
      for (double v : flatten_observation(tr.state)) {
        out += format_double(v);
        out += ',';
      }
      out += format_double(tr.action.normalized());
      out += ',';
      out += format_double(tr.reward);
      out += tr.terminal ? ",1" : ",0";
      for (double v : flatten_observation(tr.next_state)) {
        out += ',';
        out += format_double(v);
      }
      out += '\n';
    }
    write_text_file(dir / "episodes" / (ep.episode_id + ".csv"), out);
  }
}

OfflineDataset read_processed(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  if (!std::filesystem::exists(meta_path)) throw IoError("missing " + meta_path.string());
  const std::string meta_text = read_text_file(meta_path);
  OfflineDataset ds;
  ds.meta = meta_from_json(meta_text);
  std::vector<std::string> ids;
  try {
    ids = nlohmann::json::parse(meta_text).at("episodes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("meta.json: ") + e.what());
  }
  const std::string header = episode_csv_header();
  for (const auto& id : ids) {
    const auto path = dir / "episodes" / (id + ".csv");
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || trim(line) != header) throw SchemaError(path.string() + ": unexpected header");
    Episode ep;
    ep.episode_id = id;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto cells = split_csv_line(line);
      if (cells.size() != 2 * kNumFeatures + 3) throw SchemaError(path.string() + ": wrong column count");
      FeatureVector s{};
      FeatureVector ns{};
      for (std::size_t i = 0; i < kNumFeatures; ++i) {
        s[i] = parse_double(cells[i]);
        ns[i] = parse_double(cells[kNumFeatures + 3 + i]);
      }
      Transition tr;
      tr.state = unflatten_observation(s);
      tr.action = Action(parse_double(cells[kNumFeatures]));
      tr.reward = parse_double(cells[kNumFeatures + 1]);
      tr.terminal = cells[kNumFeatures + 2] == "1";
      tr.next_state = unflatten_observation(ns);
      ep.transitions.push_back(std::move(tr));
    }
    if (ep.transitions.empty()) throw SchemaError(path.string() + ": no transitions");
    ep.map_target = ep.transitions.front().state.map_target;
    ds.episodes.push_back(std::move(ep));
  }
  ds.validate();
  return ds;
}

}  // namespace pcql::data
