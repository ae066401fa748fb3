#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pcql/algorithms/pcql.hpp"
#include "pcql/core/errors.hpp"
#include "pcql/data/pipeline.hpp"
#include "pcql/eval/eval.hpp"
#include "pcql/explain/shapley.hpp"
#include "pcql/simenv/simulator.hpp"

namespace pcql::cli {

// Bad flags, bad config values, missing inputs: exit code 2.
class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

using nn::Index;
using nn::Matrix;

inline constexpr const char* kOutputRootEnv = "PCQL_OUTPUT_ROOT";

// Flat key/value configuration. Every key has a default; setting an unknown
// key is an error. Relative paths resolve against output_root.
class RunConfig {
 public:
  RunConfig();

  void set(const std::string& key, const std::string& value);
  // "key = value" lines; '#' starts a comment.
  void load_text(std::string_view text, const std::string& source);
  void load_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  int integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<Index> widths(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;
  std::filesystem::path path(const std::string& key) const;

  std::string dump() const;

  simenv::GeneratorConfig generator() const;
  data::FilterRules filter_rules() const;
  data::KnnOptions knn() const;
  data::SplitRatios split_ratios() const;
  algorithms::TrainConfig train_config() const;
  eval::EvalConfig eval_config() const;
  explain::ShapleyConfig shapley_config() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct GenerateSummary {
  std::size_t surgeries = 0;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
};

struct IngestSummary {
  data::FilterReport filter;
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
  std::size_t imputed_cells = 0;
};

GenerateSummary cmd_generate(const RunConfig& cfg, std::ostream& log);
IngestSummary cmd_ingest(const RunConfig& cfg, std::ostream& log);
algorithms::TrainResult cmd_train(const RunConfig& cfg, std::ostream& log);
std::vector<eval::EvalReport> cmd_evaluate(const RunConfig& cfg, std::ostream& log);
explain::AttributionReport cmd_explain(const RunConfig& cfg, std::ostream& log);

// Shapley oracle on a linear probe; prints one line and returns the verdict.
bool linear_probe_self_test(std::ostream& log);

// Entry point of the pcql tool. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pcql::cli
