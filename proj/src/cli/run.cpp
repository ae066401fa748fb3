#include <map>
#include <ostream>

#include "CLI11.hpp"
#include "pcql/cli/app.hpp"

namespace pcql::cli {

namespace {

// Subcommand flags that are shorthands for config keys.
struct FlagBinding {
  CLI::Option* option;
  std::string key;
};

class FlagTable {
 public:
  void bind(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto* opt = app->add_option(flag, values_[flag + "@" + app->get_name()], help);
    bindings_.push_back({opt, key});
    owners_.push_back(app);
  }

  void apply(RunConfig& cfg) const {
    for (std::size_t i = 0; i < bindings_.size(); ++i) {
      if (!owners_[i]->parsed() || bindings_[i].option->count() == 0) continue;
      cfg.set(bindings_[i].key, bindings_[i].option->as<std::string>());
    }
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<FlagBinding> bindings_;
  std::vector<CLI::App*> owners_;
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Offline RL pipeline for propofol dosing"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_file;
  std::vector<std::string> sets;
  std::string seed;
  std::string output_root;
  bool print_config = false;
  bool overwrite = false;
  app.add_option("--config", config_file, "Plain-text key = value config file");
  app.add_option("--set", sets, "Override one config key (KEY=VALUE), repeatable");
  app.add_option("--seed", seed, "Global seed");
  app.add_option("--output-root", output_root, "Directory that relative paths resolve against");
  app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");
  app.add_flag("--overwrite", overwrite, "Replace existing outputs");

  FlagTable flags;
  auto* gen = app.add_subcommand("generate", "Simulate surgeries into a raw CSV directory");
  flags.bind(gen, "--n", "n_surgeries", "Number of surgeries");
  flags.bind(gen, "--out", "raw_dir", "Raw output directory");
  flags.bind(gen, "--adjustment-period", "adjustment_period", "Steps between behavior dose changes");
  flags.bind(gen, "--missing-rate", "missing_rate", "Per-cell deletion probability");

  auto* ingest = app.add_subcommand("ingest", "Filter, impute, build transitions and split");
  flags.bind(ingest, "--in", "raw_dir", "Raw input directory");
  flags.bind(ingest, "--out", "processed_dir", "Processed output directory");

  auto* train = app.add_subcommand("train", "Train a PCQL or CQL agent");
  flags.bind(train, "--variant", "variant", "pcql or cql");
  flags.bind(train, "--epochs", "epochs", "Training epochs");
  flags.bind(train, "--data", "processed_dir", "Processed dataset directory");
  flags.bind(train, "--out", "checkpoint_dir", "Checkpoint directory");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate the behavior policy and checkpoints on the test split");
  flags.bind(evaluate, "--checkpoints", "checkpoints", "Comma-separated checkpoint names");
  flags.bind(evaluate, "--data", "processed_dir", "Processed dataset directory");
  flags.bind(evaluate, "--out", "eval_dir", "Evaluation output directory");

  auto* explain = app.add_subcommand("explain", "Shapley attribution of a trained policy");
  bool self_test = false;
  flags.bind(explain, "--checkpoint", "explain_checkpoint", "Checkpoint name");
  flags.bind(explain, "--samples", "explain_samples", "Number of test states to explain");
  flags.bind(explain, "--out", "explain_dir", "Explanation output directory");
  explain->add_flag("--self-test", self_test, "Run the linear-probe Shapley check and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!seed.empty()) cfg.set("seed", seed);
    if (!output_root.empty()) cfg.set("output_root", output_root);
    if (overwrite) cfg.set("overwrite", "true");
    flags.apply(cfg);

    if (print_config) {
      out << cfg.dump();
      return 0;
    }
    if (gen->parsed()) {
      cmd_generate(cfg, out);
    } else if (ingest->parsed()) {
      cmd_ingest(cfg, out);
    } else if (train->parsed()) {
      cmd_train(cfg, out);
    } else if (evaluate->parsed()) {
      cmd_evaluate(cfg, out);
    } else if (explain->parsed()) {
      if (self_test) return linear_probe_self_test(out) ? 0 : 1;
      cmd_explain(cfg, out);
    } else {
      err << app.help();
      return 2;
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace pcql::cli
