#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "pcql/cli/app.hpp"
#include "pcql/core/util.hpp"

namespace pcql::cli {

namespace {

std::string default_output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return (env != nullptr && *env != '\0') ? std::string(env) : std::string("runs");
}

}  // namespace

RunConfig::RunConfig() {
  entries_ = {
      {"seed", "0"},
      {"output_root", default_output_root()},
      {"overwrite", "false"},
      {"raw_dir", "raw"},
      {"processed_dir", "processed"},
      {"checkpoint_dir", "checkpoints"},
      {"eval_dir", "eval"},
      {"explain_dir", "explain"},
      // generate
      {"n_surgeries", "200"},
      {"duration_min", "60"},
      {"duration_max", "240"},
      {"missing_rate", "0"},
      {"adjustment_period", "10"},
      {"behavior_target_map", "80"},
      {"behavior_dose_noise", "0.3"},
      {"behavior_dose_cap", "8"},
      // ingest
      {"min_duration_steps", "30"},
      {"max_missing_fraction", "0.3"},
      {"knn_k", "5"},
      {"split_train", "0.7"},
      {"split_valid", "0.1"},
      {"split_test", "0.2"},
      // train
      {"variant", "pcql"},
      {"epochs", "200"},
      {"batch_size", "256"},
      {"gamma", "0.99"},
      {"alpha_cql", "5"},
      {"tau_temp", "0.5"},
      {"phi_weight", "1"},
      {"phi_mode", "latent"},
      {"phi_joint", "false"},
      {"n_action_samples", "10"},
      {"cql_policy_noise", "0.1"},
      {"target_update_rate", "0.005"},
      {"lr_actor", "1e-4"},
      {"lr_critic", "3e-4"},
      {"lr_h", "1e-4"},
      {"lr_g", "3e-4"},
      {"hidden", "256,256"},
      {"constraint_hidden", "128,128"},
      {"d_proj", "32"},
      // evaluate
      {"checkpoints", "pcql,cql"},
      {"fqe_gamma", "0.99"},
      {"fqe_iterations", "150"},
      {"fqe_epochs_per_iteration", "1"},
      {"fqe_batch_size", "256"},
      {"fqe_learning_rate", "1e-3"},
      {"fqe_hidden", "64,64"},
      {"fqe_bootstrap_episode_end", "true"},
      {"band_sigma", "0.05"},
      {"band_samples", "100"},
      {"mape_epsilon", "1e-8"},
      // explain
      {"explain_checkpoint", "pcql"},
      {"explain_samples", "50"},
      {"explain_background", "100"},
      {"explain_permutations", "200"},
  };
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
  if (it == entries_.end()) throw UsageError("unknown config key '" + key + "'");
  it->second = trim(value);
}

void RunConfig::load_text(std::string_view text, const std::string& source) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw UsageError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    try {
      set(key, body.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw UsageError("config file not found: " + path.string());
  load_text(read_text_file(path), path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
  if (it == entries_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::number(const std::string& key) const {
  try {
    return parse_double(get(key));
  } catch (const UsageError&) {
    throw;
  } catch (const Error&) {
    throw UsageError("config key '" + key + "' expects a number, got '" + get(key) + "'");
  }
}

int RunConfig::integer(const std::string& key) const {
  const std::string& v = get(key);
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw UsageError("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw UsageError("config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
  return out;
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::string> RunConfig::list(const std::string& key) const {
  std::vector<std::string> out;
  for (const auto& item : split_csv_line(get(key))) {
    std::string t = trim(item);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

std::vector<Index> RunConfig::widths(const std::string& key) const {
  std::vector<Index> out;
  for (const auto& item : list(key)) {
    Index w = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), w);
    if (ec != std::errc{} || ptr != item.data() + item.size() || w <= 0)
      throw UsageError("config key '" + key + "' expects positive comma-separated widths, got '" + get(key) + "'");
    out.push_back(w);
  }
  if (out.empty()) throw UsageError("config key '" + key + "' is empty");
  return out;
}

std::filesystem::path RunConfig::path(const std::string& key) const {
  std::filesystem::path p = get(key);
  if (key == "output_root" || p.is_absolute()) return p;
  return std::filesystem::path(get("output_root")) / p;
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

simenv::GeneratorConfig RunConfig::generator() const {
  simenv::GeneratorConfig g;
  const int n = integer("n_surgeries");
  if (n <= 0) throw UsageError("n_surgeries must be positive, got " + std::to_string(n));
  g.n_surgeries = static_cast<std::size_t>(n);
  g.duration_min = integer("duration_min");
  g.duration_max = integer("duration_max");
  g.seed = derive_seed(u64("seed"), "generate");
  g.missing_rate = number("missing_rate");
  g.behavior.adjustment_period = integer("adjustment_period");
  g.behavior.target_map = number("behavior_target_map");
  g.behavior.dose_noise_std = number("behavior_dose_noise");
  g.behavior.dose_cap = number("behavior_dose_cap");
  try {
    g.validate();
  } catch (const Error& e) {
    throw UsageError(std::string("generator settings: ") + e.what());
  }
  return g;
}

data::FilterRules RunConfig::filter_rules() const {
  data::FilterRules r;
  r.min_duration_steps = integer("min_duration_steps");
  r.max_missing_fraction = number("max_missing_fraction");
  if (r.min_duration_steps < 1) throw UsageError("min_duration_steps must be positive");
  if (!(r.max_missing_fraction > 0.0 && r.max_missing_fraction < 1.0))
    throw UsageError("max_missing_fraction must lie in (0, 1)");
  return r;
}

data::KnnOptions RunConfig::knn() const {
  data::KnnOptions o;
  o.k = integer("knn_k");
  if (o.k < 1) throw UsageError("knn_k must be positive");
  return o;
}

data::SplitRatios RunConfig::split_ratios() const {
  data::SplitRatios r{number("split_train"), number("split_valid"), number("split_test")};
  if (r.train <= 0.0 || r.valid < 0.0 || r.test < 0.0 || std::abs(r.train + r.valid + r.test - 1.0) > 1e-9)
    throw UsageError("split ratios must be nonnegative and sum to 1");
  return r;
}

algorithms::TrainConfig RunConfig::train_config() const {
  algorithms::TrainConfig c;
  c.gamma = number("gamma");
  c.alpha_cql = number("alpha_cql");
  c.tau_temp = number("tau_temp");
  c.phi_weight = number("phi_weight");
  c.n_action_samples = integer("n_action_samples");
  c.target_update_rate = number("target_update_rate");
  c.epochs = integer("epochs");
  c.batch_size = integer("batch_size");
  c.lr_actor = number("lr_actor");
  c.lr_critic = number("lr_critic");
  c.lr_h = number("lr_h");
  c.lr_g = number("lr_g");
  c.seed = derive_seed(u64("seed"), "train");
  c.hidden = widths("hidden");
  c.constraint_hidden = widths("constraint_hidden");
  c.d_proj = integer("d_proj");
  c.phi_joint = flag("phi_joint");
  c.cql_policy_noise = number("cql_policy_noise");
  try {
    c.phi_mode = algorithms::phi_mode_from_string(get("phi_mode"));
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const std::string variant = get("variant");
  if (variant == "cql") {
    c.phi_weight = 0.0;
  } else if (variant == "pcql") {
    if (c.phi_weight <= 0.0) throw UsageError("variant pcql needs phi_weight > 0");
  } else {
    throw UsageError("variant must be pcql or cql, got '" + variant + "'");
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw UsageError(std::string("training settings: ") + e.what());
  }
  return c;
}

eval::EvalConfig RunConfig::eval_config() const {
  eval::EvalConfig c;
  c.fqe.gamma = number("fqe_gamma");
  c.fqe.iterations = integer("fqe_iterations");
  c.fqe.epochs_per_iteration = integer("fqe_epochs_per_iteration");
  c.fqe.batch_size = integer("fqe_batch_size");
  c.fqe.learning_rate = number("fqe_learning_rate");
  c.fqe.hidden = widths("fqe_hidden");
  c.fqe.bootstrap_episode_end = flag("fqe_bootstrap_episode_end");
  c.fqe.seed = derive_seed(u64("seed"), "evaluate");
  c.band.sigma = number("band_sigma");
  c.band.n_samples = integer("band_samples");
  c.band.seed = derive_seed(u64("seed"), "band");
  c.mape_epsilon = number("mape_epsilon");
  try {
    c.fqe.validate();
    c.band.validate();
  } catch (const Error& e) {
    throw UsageError(std::string("evaluation settings: ") + e.what());
  }
  if (!(c.mape_epsilon > 0.0)) throw UsageError("mape_epsilon must be positive");
  return c;
}

explain::ShapleyConfig RunConfig::shapley_config() const {
  explain::ShapleyConfig c;
  c.n_permutations = integer("explain_permutations");
  c.seed = derive_seed(u64("seed"), "explain");
  if (c.n_permutations < 1) throw UsageError("explain_permutations must be positive");
  if (integer("explain_samples") < 1) throw UsageError("explain_samples must be positive");
  if (integer("explain_background") < 1) throw UsageError("explain_background must be positive");
  return c;
}

}  // namespace pcql::cli
