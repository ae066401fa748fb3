#include <algorithm>
#include <cctype>
#include <cmath>
#include <ostream>
#include <random>

#include "json.hpp"
#include "pcql/cli/app.hpp"
#include "pcql/core/util.hpp"

namespace pcql::cli {

namespace fs = std::filesystem;

namespace {

// An existing non-empty output directory is a collision unless overwrite is
// set, in which case it is cleared first.
void prepare_output_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    if (!overwrite) throw UsageError("output path exists: " + dir.string() + " (pass --overwrite to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void prepare_output_file(const fs::path& file, bool overwrite) {
  if (fs::exists(file) && !overwrite)
    throw UsageError("output path exists: " + file.string() + " (pass --overwrite to replace it)");
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

OfflineDataset load_split(const RunConfig& cfg, const std::string& split) {
  const fs::path dir = cfg.path("processed_dir") / split;
  if (!fs::exists(dir / "meta.json")) throw UsageError("dataset not found: " + dir.string());
  return data::read_processed(dir);
}

fs::path checkpoint_path(const RunConfig& cfg, const std::string& name) {
  return cfg.path("checkpoint_dir") / (name + ".ckpt.json");
}

algorithms::PcqlAgent load_checkpoint_named(const RunConfig& cfg, const std::string& name) {
  const fs::path p = checkpoint_path(cfg, name);
  if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
  return algorithms::load_agent(p);
}

void check_compatible(const algorithms::PcqlAgent& agent, const OfflineDataset& ds, const std::string& name) {
  if (agent.meta.schema_version != ds.meta.schema_version)
    throw SchemaError("checkpoint " + name + " has schema version " + std::to_string(agent.meta.schema_version) +
                      ", dataset has " + std::to_string(ds.meta.schema_version));
  if (agent.meta.p_max != ds.meta.p_max || agent.meta.feature_means != ds.meta.feature_means ||
      agent.meta.feature_stds != ds.meta.feature_stds)
    throw SchemaError("checkpoint " + name + " was trained on a different dataset normalization");
}

std::vector<data::RawSurgery> pick(const std::vector<data::RawSurgery>& all, const std::vector<std::size_t>& idx) {
  std::vector<data::RawSurgery> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

nlohmann::ordered_json filter_report_json(const data::FilterReport& r) {
  nlohmann::ordered_json j;
  j["input"] = r.input;
  j["retained"] = r.retained;
  j["rejected"] = r.rejected();
  j["inhaled"] = r.inhaled;
  j["missing_dosing"] = r.missing_dosing;
  j["too_short"] = r.too_short;
  j["severe_missing_vitals"] = r.severe_missing_vitals;
  return j;
}

nlohmann::ordered_json report_metrics(const eval::EvalReport& r) {
  nlohmann::ordered_json j;
  j["policy"] = r.policy_name;
  j["initial_state_return"] = r.initial_state_return;
  j["fqe_diverged"] = r.fqe_diverged;
  j["mape_pct"] = r.mape_pct;
  j["rmse"] = r.rmse;
  j["rmse_conventional"] = r.rmse_conventional;
  j["mean_dose"] = r.mean_dose_physical;
  j["behavior_mean_dose"] = r.behavior_mean_dose;
  j["pearson_dose_map"] = r.pearson_dose_map;
  j["pearson_behavior"] = r.pearson_behavior;
  return j;
}

std::string safe_name(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return out;
}

}  // namespace

GenerateSummary cmd_generate(const RunConfig& cfg, std::ostream& log) {
  const auto gen = cfg.generator();
  const fs::path dir = cfg.path("raw_dir");
  prepare_output_dir(dir, cfg.flag("overwrite"));

  const auto sims = simenv::generate_surgeries(gen);
  std::vector<data::RawSurgery> raws;
  GenerateSummary summary;
  for (const auto& s : sims) {
    summary.steps += static_cast<std::size_t>(s.raw.duration_steps());
    raws.push_back(s.raw);
  }
  data::write_raw_directory(raws, dir);
  summary.surgeries = raws.size();
  summary.seed = cfg.u64("seed");
  summary.dir = dir;
  log << "generated " << summary.surgeries << " surgeries, " << summary.steps << " steps, seed " << summary.seed
      << " -> " << dir.string() << "\n";
  return summary;
}

IngestSummary cmd_ingest(const RunConfig& cfg, std::ostream& log) {
  const fs::path raw_dir = cfg.path("raw_dir");
  if (!fs::exists(raw_dir / "clinical.csv")) throw UsageError("raw dataset not found: " + raw_dir.string());
  const auto rules = cfg.filter_rules();
  const auto knn = cfg.knn();
  const auto ratios = cfg.split_ratios();
  const fs::path out = cfg.path("processed_dir");
  prepare_output_dir(out, cfg.flag("overwrite"));

  IngestSummary summary;
  auto [kept, report] = data::filter_surgeries(data::read_raw_directory(raw_dir), rules);
  summary.filter = report;
  if (kept.size() < 10)
    throw DomainError("only " + std::to_string(kept.size()) + " surgeries survive filtering; at least 10 are needed");

  data::ImputeStats stats;
  data::impute_clinical_knn(kept, knn, &stats);
  for (auto& s : kept) s = data::impute_knn(s, knn, &stats);
  summary.imputed_cells = stats.imputed_cells;

  const std::uint64_t split_seed = derive_seed(cfg.u64("seed"), "split");
  const auto parts = data::split_indices(kept.size(), ratios, split_seed);
  OfflineDataset train = data::build_transition_dataset(pick(kept, parts[0]));
  train.meta.split_tag = SplitTag::kTrain;
  train.meta.split_seed = split_seed;
  OfflineDataset valid = data::build_transition_dataset(pick(kept, parts[1]), train.meta);
  valid.meta.split_tag = SplitTag::kValid;
  OfflineDataset test = data::build_transition_dataset(pick(kept, parts[2]), train.meta);
  test.meta.split_tag = SplitTag::kTest;

  data::write_processed(train, out / "train");
  data::write_processed(valid, out / "valid");
  data::write_processed(test, out / "test");
  write_text_file(out / "filter_report.json", filter_report_json(report).dump(2) + "\n");

  summary.train = train.episodes.size();
  summary.valid = valid.episodes.size();
  summary.test = test.episodes.size();
  log << "filtered " << report.input << " surgeries: retained " << report.retained << ", rejected "
      << report.rejected() << " (inhaled " << report.inhaled << ", missing_dosing " << report.missing_dosing
      << ", too_short " << report.too_short << ", severe_missing_vitals " << report.severe_missing_vitals << ")\n";
  log << "imputed " << summary.imputed_cells << " cells\n";
  log << "split train/valid/test episodes: " << summary.train << "/" << summary.valid << "/" << summary.test
      << " -> " << out.string() << "\n";
  return summary;
}

algorithms::TrainResult cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto config = cfg.train_config();
  const OfflineDataset train = load_split(cfg, "train");
  const OfflineDataset valid = load_split(cfg, "valid");
  const std::string variant = cfg.get("variant");
  const fs::path ckpt = checkpoint_path(cfg, variant);
  const fs::path dir = cfg.path("checkpoint_dir");
  const bool overwrite = cfg.flag("overwrite");
  prepare_output_file(ckpt, overwrite);
  prepare_output_file(dir / (variant + "_train_log.csv"), overwrite);
  prepare_output_file(dir / (variant + "_valid_log.csv"), overwrite);

  log << "training " << variant << " on " << train.num_transitions() << " transitions for " << config.epochs
      << " epochs\n";
  auto result = algorithms::train_pcql(train, valid, config, [&](const algorithms::ValidLogRow& v) {
    log << "epoch " << v.epoch << " valid l_td " << format_double(v.l_td) << " l_cql " << format_double(v.l_cql)
        << " phi " << format_double(v.phi) << " mape " << format_double(v.mape_pct) << "\n";
  });
  algorithms::save_agent(ckpt, result.agent);
  write_text_file(dir / (variant + "_train_log.csv"), algorithms::train_log_csv(result.log));
  write_text_file(dir / (variant + "_valid_log.csv"), algorithms::valid_log_csv(result.valid_log));
  log << "checkpoint -> " << ckpt.string() << "\n";
  return result;
}

std::vector<eval::EvalReport> cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  const auto config = cfg.eval_config();
  const OfflineDataset test = load_split(cfg, "test");
  const auto names = cfg.list("checkpoints");
  std::vector<algorithms::PcqlAgent> agents;
  for (const auto& name : names) {
    agents.push_back(load_checkpoint_named(cfg, name));
    check_compatible(agents.back(), test, name);
  }
  const fs::path out = cfg.path("eval_dir");
  prepare_output_dir(out, cfg.flag("overwrite"));

  std::vector<eval::EvalReport> reports;
  reports.push_back(eval::evaluate_policy("behavior", nullptr, test, config));
  for (std::size_t i = 0; i < names.size(); ++i) {
    const eval::PolicyFn policy = eval::agent_policy(agents[i]);
    reports.push_back(eval::evaluate_policy(names[i], &policy, test, config));
  }

  nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    const std::string name = safe_name(r.policy_name);
    write_text_file(out / ("report_" + name + ".json"), r.to_json().dump(2) + "\n");
    for (const auto& c : r.curves)
      write_text_file(out / "curves" / name / (safe_name(c.episode_id) + ".csv"), eval::curve_csv(c));
    metrics.push_back(report_metrics(r));
    log << r.policy_name << ": fqe " << format_double(r.initial_state_return) << (r.fqe_diverged ? " (diverged)" : "")
        << ", mape " << format_double(r.mape_pct) << "%, rmse " << format_double(r.rmse) << ", mean dose "
        << format_double(r.mean_dose_physical) << ", pearson " << format_double(r.pearson_dose_map) << "\n";
  }
  write_text_file(out / "metrics.json", metrics.dump(2) + "\n");
  write_text_file(out / "comparison.csv", eval::comparison_table_csv(reports));
  log << "reports -> " << out.string() << "\n";
  return reports;
}

explain::AttributionReport cmd_explain(const RunConfig& cfg, std::ostream& log) {
  const auto shap = cfg.shapley_config();
  const std::string name = cfg.get("explain_checkpoint");
  const algorithms::PcqlAgent agent = load_checkpoint_named(cfg, name);
  const OfflineDataset train = load_split(cfg, "train");
  const OfflineDataset test = load_split(cfg, "test");
  check_compatible(agent, test, name);
  const fs::path out = cfg.path("explain_dir");
  prepare_output_dir(out, cfg.flag("overwrite"));

  const std::uint64_t seed = cfg.u64("seed");
  const Matrix background =
      explain::sample_rows(eval::raw_states(train), cfg.integer("explain_background"), derive_seed(seed, "background"));
  const Matrix samples =
      explain::sample_rows(eval::raw_states(test), cfg.integer("explain_samples"), derive_seed(seed, "samples"));
  std::vector<std::string> names;
  for (auto n : feature_names()) names.emplace_back(n);
  const explain::ModelFn model = [&agent](const Matrix& rows) { return agent.act_raw(rows); };
  auto report = explain::explain_samples(model, samples, background, names, shap);

  write_text_file(out / "attribution.json", report.to_json().dump(2) + "\n");
  write_text_file(out / "scores.csv", report.scores_csv());
  const auto order = explain::rank_features(report.absolute_mean_scores);
  log << "explained " << samples.rows() << " samples against " << background.rows() << " background rows\n";
  for (std::size_t k = 0; k < std::min<std::size_t>(5, order.size()); ++k)
    log << "  " << (k + 1) << ". " << names[order[k]] << " " << format_double(report.absolute_mean_scores[order[k]])
        << "\n";
  log << "attribution -> " << out.string() << "\n";
  return report;
}

bool linear_probe_self_test(std::ostream& log) {
  const Index d = static_cast<Index>(kNumFeatures);
  std::mt19937_64 rng(derive_seed(0, "linear-probe"));
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::vector<double> w(d), x(d);
  Matrix background(1, d);
  for (Index i = 0; i < d; ++i) {
    w[i] = unif(rng);
    x[i] = unif(rng);
    background(0, i) = unif(rng);
  }
  const explain::ModelFn model = [&w](const Matrix& rows) {
    std::vector<double> out(rows.rows(), 0.5);
    for (Index r = 0; r < rows.rows(); ++r)
      for (Index i = 0; i < rows.cols(); ++i) out[r] += w[i] * rows(r, i);
    return out;
  };
  const auto res = explain::shapley_attribution(model, x, background, {50, 1});
  double worst = 0.0;
  for (Index i = 0; i < d; ++i) worst = std::max(worst, std::abs(res.values[i] - w[i] * (x[i] - background(0, i))));
  const bool ok = worst <= 1e-10;
  log << "linear-probe self-test: " << (ok ? "PASS" : "FAIL") << " (max error " << format_double(worst) << ")\n";
  return ok;
}

}  // namespace pcql::cli
