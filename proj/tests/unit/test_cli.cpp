#include <chrono>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "pcql/cli/app.hpp"
#include "pcql/core/util.hpp"

using namespace pcql;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "pcql");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_root(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pcql_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + read_text_file(f);
  return all;
}

// Tiny runs. The low dose cap is reached in the few training surgeries, so the
// training p_max also covers the validation and test doses.
std::vector<std::string> small(const fs::path& root, std::vector<std::string> rest) {
  std::vector<std::string> args = {"--output-root", root.string(), "--seed", "7", "--set", "duration_min=35",
                                   "--set", "duration_max=45", "--set", "hidden=16,16", "--set",
                                   "constraint_hidden=16,16", "--set", "d_proj=8", "--set", "fqe_iterations=3",
                                   "--set", "fqe_hidden=16", "--set", "explain_background=10", "--set",
                                   "explain_permutations=20", "--set", "behavior_dose_cap=5"};
  args.insert(args.end(), rest.begin(), rest.end());
  return args;
}

}  // namespace

TEST_CASE("config keys have defaults and unknown keys are rejected") {
  cli::RunConfig cfg;
  CHECK(cfg.integer("epochs") == 200);
  CHECK(cfg.integer("batch_size") == 256);
  CHECK(cfg.widths("hidden") == std::vector<cli::Index>{256, 256});
  CHECK_THROWS_AS(cfg.set("epochz", "3"), cli::UsageError);
  CHECK_THROWS_AS(cfg.load_text("epochs = 3\nbogus = 1\n", "test.cfg"), cli::UsageError);
  cfg.load_text("# comment\nepochs = 3  # trailing\n\nvariant = cql\n", "test.cfg");
  CHECK(cfg.integer("epochs") == 3);
  CHECK(cfg.train_config().phi_weight == 0.0);
  cfg.set("epochs", "three");
  CHECK_THROWS_AS(cfg.train_config(), cli::UsageError);
  cfg.set("epochs", "3");
  cfg.set("variant", "sac");
  CHECK_THROWS_AS(cfg.train_config(), cli::UsageError);
}

TEST_CASE("print-config reflects file, --set and flag overrides in that order") {
  const auto root = fresh_root("print");
  fs::create_directories(root);
  write_text_file(root / "run.cfg", "epochs = 5\nbatch_size = 64\n");
  const auto r = run_cli({"--config", (root / "run.cfg").string(), "--set", "batch_size=32", "--print-config",
                          "train", "--epochs", "9"});
  CHECK(r.code == 0);
  CHECK(r.out.find("epochs = 9\n") != std::string::npos);
  CHECK(r.out.find("batch_size = 32\n") != std::string::npos);
  CHECK(run_cli({"--config", (root / "missing.cfg").string(), "--print-config"}).code == 2);
  CHECK(run_cli({"--set", "nonsense=1", "--print-config"}).code == 2);
  CHECK(run_cli({"--no-such-flag"}).code == 2);
  fs::remove_all(root);
}

TEST_CASE("generate validates, counts and is deterministic") {
  const auto root = fresh_root("gen");
  CHECK(run_cli({"--output-root", root.string(), "generate", "--n", "0"}).code == 2);
  const auto r = run_cli({"--output-root", root.string(), "generate", "--n", "200", "--seed", "7"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("200 surgeries") != std::string::npos);
  CHECK(r.out.find("seed 7") != std::string::npos);
  std::size_t csvs = 0;
  for (const auto& e : fs::directory_iterator(root / "raw")) csvs += e.path().extension() == ".csv";
  CHECK(csvs == 201);
  CHECK(fs::exists(root / "raw" / "clinical.csv"));
  const std::string first = tree_bytes(root / "raw");

  const auto collide = run_cli({"--output-root", root.string(), "generate", "--n", "200", "--seed", "7"});
  CHECK(collide.code == 2);
  CHECK(collide.err.find("--overwrite") != std::string::npos);
  CHECK(run_cli({"--output-root", root.string(), "generate", "--n", "200", "--seed", "7", "--overwrite"}).code == 0);
  CHECK(tree_bytes(root / "raw") == first);
  fs::remove_all(root);
}

TEST_CASE("ingest reports filtering and the split sizes") {
  const auto root = fresh_root("ingest");
  REQUIRE(run_cli(small(root, {"generate", "--n", "11"})).code == 0);
  auto clean = run_cli(small(root, {"ingest"}));
  REQUIRE(clean.code == 0);
  CHECK(clean.out.find("rejected 0") != std::string::npos);
  CHECK(clean.out.find("8/1/2") != std::string::npos);

  // Mark one surgery as inhaled anesthesia.
  const auto clin = root / "raw" / "clinical.csv";
  std::string text = read_text_file(clin);
  const auto pos = text.find(",propofol");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 9, ",inhaled");
  write_text_file(clin, text);
  const auto planted = run_cli(small(root, {"ingest", "--overwrite"}));
  REQUIRE(planted.code == 0);
  const auto report = nlohmann::json::parse(read_text_file(root / "processed" / "filter_report.json"));
  CHECK(report.at("inhaled") == 1);
  CHECK(report.at("retained") == 10);
  CHECK(planted.out.find("7/1/2") != std::string::npos);
  CHECK(fs::exists(root / "processed" / "train" / "meta.json"));
  CHECK(run_cli(small(root, {"ingest", "--in", "nowhere", "--overwrite"})).code == 2);
  fs::remove_all(root);
}

TEST_CASE("train, evaluate and explain through the CLI") {
  const auto root = fresh_root("pipeline");
  CHECK(run_cli(small(root, {"train", "--epochs", "1"})).code == 2);
  REQUIRE(run_cli(small(root, {"generate", "--n", "10"})).code == 0);
  REQUIRE(run_cli(small(root, {"ingest"})).code == 0);

  const auto t0 = std::chrono::steady_clock::now();
  const auto trained = run_cli(small(root, {"train", "--epochs", "1", "--variant", "cql"}));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(trained.code == 0);
  CHECK(secs < 60.0);
  const auto ckpt = nlohmann::json::parse(read_text_file(root / "checkpoints" / "cql.ckpt.json"));
  CHECK(ckpt.at("payload").at("config").at("phi_weight") == 0.0);
  CHECK(fs::exists(root / "checkpoints" / "cql_train_log.csv"));
  REQUIRE(run_cli(small(root, {"train", "--epochs", "1"})).code == 0);
  CHECK(run_cli(small(root, {"train", "--epochs", "1"})).code == 2);

  REQUIRE(run_cli(small(root, {"evaluate"})).code == 0);
  const std::string metrics = read_text_file(root / "eval" / "metrics.json");
  const auto m = nlohmann::json::parse(metrics);
  REQUIRE(m.size() == 3);
  CHECK(m[0].at("policy") == "behavior");
  CHECK(m[0].at("mape_pct") == 0.0);
  const std::string table = read_text_file(root / "eval" / "comparison.csv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 4);
  REQUIRE(run_cli(small(root, {"evaluate", "--overwrite"})).code == 0);
  CHECK(read_text_file(root / "eval" / "metrics.json") == metrics);
  CHECK(run_cli(small(root, {"evaluate", "--checkpoints", "nope", "--overwrite"})).code == 2);

  REQUIRE(run_cli(small(root, {"explain", "--samples", "3"})).code == 0);
  const std::string attribution = read_text_file(root / "explain" / "attribution.json");
  REQUIRE(run_cli(small(root, {"explain", "--samples", "3", "--overwrite"})).code == 0);
  CHECK(read_text_file(root / "explain" / "attribution.json") == attribution);
  CHECK(read_text_file(root / "explain" / "scores.csv").rfind("feature,score\n", 0) == 0);
  CHECK(run_cli(small(root, {"explain", "--checkpoint", "missing", "--overwrite"})).code == 2);
  const auto probe = run_cli({"explain", "--self-test"});
  CHECK(probe.code == 0);
  CHECK(probe.out.find("PASS") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("a training abort exits with a runtime failure") {
  const auto root = fresh_root("abort");
  REQUIRE(run_cli(small(root, {"generate", "--n", "10"})).code == 0);
  REQUIRE(run_cli(small(root, {"ingest"})).code == 0);
  const auto r = run_cli(small(root, {"--set", "lr_critic=1e300", "--set", "alpha_cql=1e300", "train", "--epochs", "2"}));
  CHECK(r.code == 1);
  CHECK(r.err.find("training aborted") != std::string::npos);
  fs::remove_all(root);
}
