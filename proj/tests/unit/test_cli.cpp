#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "iclmark/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommandResult {
  int status = -1;
  std::string output;  // stdout + stderr interleaved
};

CommandResult run_cli(const std::string& args) {
  const std::string command = std::string(ICLMARK_CLI_PATH) + " " + args + " 2>&1";
  CommandResult result;
  FILE* pipe = popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (fgets(buf, sizeof(buf), pipe) != nullptr) result.output += buf;
  const int rc = pclose(pipe);
  result.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return result;
}

// Workspace with synthetic intent-style datasets and manifests.
class CliWorkspace {
 public:
  CliWorkspace() {
    dir_ = fs::temp_directory_path() /
           ("iclmark_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);

    write_split("taskA_train", 4, 10, 100, false);
    write_split("taskA_val", 4, 8, 200, false);
    write_split("taskB_train", 3, 10, 300, false);
    write_split("taskB_val", 3, 8, 400, false);
    write_split("target_test", 4, 5, 500, false);
    write_split("target_pool", 4, 6, 600, false);
    write_split("oos_val", 2, 4, 700, true);
    write_split("huff_test", 8, 8, 800, false);

    json pool;
    pool["style"] = "intent";
    pool["target"] = "target";
    pool["tasks"] = json::array({
        {{"dataset", "taskA"},
         {"inputs", "taskA_train.manifest.json"},
         {"demos", "taskA_val.manifest.json"}},
        {{"dataset", "taskB"},
         {"inputs", "taskB_train.manifest.json"},
         {"demos", "taskB_val.manifest.json"}},
    });
    std::ofstream(dir_ / "pool.json") << pool.dump(2);
  }

  ~CliWorkspace() { fs::remove_all(dir_); }

  const fs::path& dir() const { return dir_; }
  std::string path(const std::string& name) const {
    return (dir_ / name).string();
  }
  std::string runs() const { return (dir_ / "runs").string(); }

  // Most recent artifact dir for a command under runs/.
  fs::path latest_run(const std::string& command) const {
    fs::path best;
    for (const auto& entry : fs::directory_iterator(dir_ / "runs")) {
      const std::string name = entry.path().filename().string();
      if (name.find("-" + command) != std::string::npos) {
        if (best.empty() || entry.path().filename() > best.filename()) {
          best = entry.path();
        }
      }
    }
    return best;
  }

 private:
  // Class vocabularies are disjoint across labels so the hashed retriever
  // has real signal to work with.
  void write_split(const std::string& name, int classes, int per_class,
                   std::uint64_t seed, bool oos_labels) {
    iclmark::Rng rng(seed);
    std::ofstream records(dir_ / (name + ".jsonl"));
    json labels = json::array();
    for (int c = 0; c < classes; ++c) {
      const std::string label =
          (oos_labels ? "oos_" : "intent_") + std::to_string(c);
      labels.push_back(label);
      for (int i = 0; i < per_class; ++i) {
        std::string text = name.substr(0, 5) + "word" + std::to_string(c);
        const int extra = 1 + static_cast<int>(rng.below(3));
        for (int e = 0; e < extra; ++e) {
          text += " word" + std::to_string(c) + "v" + std::to_string(rng.below(4));
        }
        records << json{{"text", text}, {"label", label}}.dump() << "\n";
      }
    }
    json manifest;
    manifest["dataset"] = name;
    manifest["role"] = name.find("test") != std::string::npos ? "test" : "train";
    manifest["path"] = name + ".jsonl";
    manifest["preprocess"] = "intent";
    manifest["labels"] = labels;
    std::ofstream(dir_ / (name + ".manifest.json")) << manifest.dump(2);
  }

  fs::path dir_;
};

std::string common_flags(const CliWorkspace& ws) {
  return "--backend toy:seed=7 --embedder hashed:32 --out " + ws.runs();
}

}  // namespace

TEST_CASE("cli end to end") {
  CliWorkspace ws;

  SUBCASE("warmup smoke run writes checkpoint, manifest and loss trace") {
    const CommandResult r = run_cli(
        "warmup " + common_flags(ws) + " --dataset-manifest " + ws.path("pool.json") +
        " --steps 6 --batch-size 2 --k 3 --include-nota --seed 3");
    CAPTURE(r.output);
    REQUIRE(r.status == 0);

    const fs::path run = ws.latest_run("warmup");
    REQUIRE_FALSE(run.empty());
    CHECK(fs::exists(run / "checkpoint.bank"));
    CHECK(fs::exists(run / "loss_trace.csv"));
    REQUIRE(fs::exists(run / "manifest.json"));

    std::ifstream in(run / "manifest.json");
    json manifest;
    in >> manifest;
    CHECK(manifest.at("command") == "warmup");
    CHECK(manifest.at("config").at("steps") == 6);
    CHECK(manifest.at("config").at("seed") == 3);
    // NOTA present in a closed-world warm-up selects anneal by default
    CHECK(manifest.at("config").at("init") == "anneal");
    CHECK(manifest.contains("checkpoint_digest"));
    CHECK(manifest.at("inputs").contains("pool_manifest"));
  }

  SUBCASE("same seed reproduces the checkpoint digest") {
    const std::string cmd =
        "warmup " + common_flags(ws) + " --dataset-manifest " + ws.path("pool.json") +
        " --steps 4 --batch-size 2 --k 3 --seed 11";
    REQUIRE(run_cli(cmd).status == 0);
    REQUIRE(run_cli(cmd).status == 0);

    std::vector<std::string> digests;
    for (const auto& entry : fs::directory_iterator(ws.dir() / "runs")) {
      if (entry.path().filename().string().find("-warmup") == std::string::npos) {
        continue;
      }
      std::ifstream in(entry.path() / "manifest.json");
      json manifest;
      in >> manifest;
      if (manifest.at("config").at("seed") == 11) {
        digests.push_back(manifest.at("checkpoint_digest").get<std::string>());
      }
    }
    REQUIRE(digests.size() == 2);
    CHECK(digests[0] == digests[1]);
  }

  SUBCASE("closed-world eval emits the report schema") {
    const CommandResult w = run_cli(
        "warmup " + common_flags(ws) + " --dataset-manifest " + ws.path("pool.json") +
        " --steps 4 --batch-size 2 --k 3 --include-nota --seed 5");
    REQUIRE(w.status == 0);
    const fs::path checkpoint = ws.latest_run("warmup") / "checkpoint.bank";

    const CommandResult r = run_cli(
        "eval " + common_flags(ws) + " --checkpoint " + checkpoint.string() +
        " --dataset-manifest " + ws.path("target_test.manifest.json") +
        " --demo-pool " + ws.path("target_pool.manifest.json") +
        " --k 3 --include-nota --seed 2");
    CAPTURE(r.output);
    REQUIRE(r.status == 0);

    const fs::path run = ws.latest_run("eval");
    std::ifstream in(run / "report.json");
    json report;
    in >> report;
    CHECK(report.at("kind") == "closed");
    CHECK(report.contains("task_accuracy"));
    CHECK(report.contains("mc_accuracy"));
    CHECK(report.at("task_accuracy").get<double>() <=
          report.at("mc_accuracy").get<double>() + 1e-12);
    CHECK(report.at("nota").contains("f1"));
    CHECK(fs::exists(run / "report.txt"));
  }

  SUBCASE("open-world eval over seeded draws reports per-draw and mean/std") {
    const CommandResult r = run_cli(
        "eval " + common_flags(ws) +
        " --dataset-manifest " + ws.path("target_test.manifest.json") +
        " --demo-pool " + ws.path("target_pool.manifest.json") +
        " --oos-manifest " + ws.path("oos_val.manifest.json") +
        " --oos-kind id-oos --threshold 0.4 --draws 3 --shots 2"
        " --k 3 --include-nota --seed 4");
    CAPTURE(r.output);
    REQUIRE(r.status == 0);

    std::ifstream in(ws.latest_run("eval") / "report.json");
    json report;
    in >> report;
    CHECK(report.at("draws").size() == 3);
    CHECK(report.contains("in_scope_accuracy_mean"));
    CHECK(report.contains("in_scope_accuracy_std"));
    CHECK(report.contains("oos_recall_mean"));
    // distinct draw seeds recorded for reproducibility
    std::set<std::uint64_t> seeds;
    for (const json& d : report.at("draws")) {
      seeds.insert(d.at("draw_seed").get<std::uint64_t>());
    }
    CHECK(seeds.size() == 3);
  }

  SUBCASE("missing dataset path exits nonzero with a diagnostic") {
    const CommandResult r = run_cli(
        "eval " + common_flags(ws) +
        " --dataset-manifest /nonexistent/nope.json --demo-pool " +
        ws.path("target_pool.manifest.json"));
    CHECK(r.status != 0);
    CHECK(r.output.find("error:") != std::string::npos);
  }

  SUBCASE("id-oos without threshold is rejected") {
    const CommandResult r = run_cli(
        "eval " + common_flags(ws) +
        " --dataset-manifest " + ws.path("target_test.manifest.json") +
        " --demo-pool " + ws.path("target_pool.manifest.json") +
        " --oos-manifest " + ws.path("oos_val.manifest.json") +
        " --oos-kind id-oos --include-nota");
    CHECK(r.status != 0);
    CHECK(r.output.find("threshold") != std::string::npos);
  }

  SUBCASE("single-template sweep evaluates once and reports") {
    json axes;
    axes["axes"] = json::array({
        {{"name", "instruction"}, {"choices", {"Categorize the following."}}},
        {{"name", "options_header"}, {"choices", {"options:"}}},
        {{"name", "demo_indicator"}, {"choices", {""}}},
        {{"name", "input_keyword"}, {"choices", {"Input"}}},
        {{"name", "kv_separator"}, {"choices", {":"}}},
        {{"name", "demo_separator"}, {"choices", {"\n"}}},
    });
    std::ofstream(ws.dir() / "axes.json") << axes.dump(2);

    const CommandResult r = run_cli(
        "sweep " + common_flags(ws) + " --dataset-manifest " +
        ws.path("huff_test.manifest.json") + " --axes " + ws.path("axes.json") +
        " --ways 3 --shots 1 --episodes 2 --seed 9");
    CAPTURE(r.output);
    REQUIRE(r.status == 0);

    std::ifstream in(ws.latest_run("sweep") / "sweep_results.json");
    json results;
    in >> results;
    CHECK(results.at("results").size() == 1);
    CHECK(results.at("results")[0].contains("accuracy"));
  }

  SUBCASE("threshold command writes the full curve") {
    const CommandResult r = run_cli(
        "threshold " + common_flags(ws) +
        " --dataset-manifest " + ws.path("target_test.manifest.json") +
        " --oos-manifest " + ws.path("oos_val.manifest.json") +
        " --demo-pool " + ws.path("target_pool.manifest.json") +
        " --k 3 --grid-points 11 --seed 3");
    CAPTURE(r.output);
    REQUIRE(r.status == 0);

    std::ifstream in(ws.latest_run("threshold") / "threshold_curve.json");
    json curve;
    in >> curve;
    CHECK(curve.at("thresholds").size() == 11);
    CHECK(curve.at("objective").size() == 11);
    CHECK(curve.at("predicted_oos").size() == 11);
    CHECK(curve.contains("chosen_threshold"));
    // monotone predicted-OOS over the grid
    const auto counts = curve.at("predicted_oos").get<std::vector<long long>>();
    for (std::size_t i = 1; i < counts.size(); ++i) {
      CHECK(counts[i] <= counts[i - 1]);
    }
  }

  SUBCASE("report aggregates sweep results and run metrics") {
    // tiny sweep over a two-choice axis grid to feed the report
    json axes;
    axes["axes"] = json::array({
        {{"name", "instruction"}, {"choices", {"Categorize the following."}}},
        {{"name", "options_header"}, {"choices", {"options:"}}},
        {{"name", "demo_indicator"}, {"choices", {""}}},
        {{"name", "input_keyword"}, {"choices", {"Headline", "Input"}}},
        {{"name", "kv_separator"}, {"choices", {":"}}},
        {{"name", "demo_separator"}, {"choices", {"\n"}}},
    });
    std::ofstream(ws.dir() / "axes2.json") << axes.dump(2);
    const CommandResult s = run_cli(
        "sweep " + common_flags(ws) + " --dataset-manifest " +
        ws.path("huff_test.manifest.json") + " --axes " + ws.path("axes2.json") +
        " --ways 3 --shots 1 --episodes 2 --seed 9");
    REQUIRE(s.status == 0);
    const fs::path sweep_results = ws.latest_run("sweep") / "sweep_results.json";

    const CommandResult r = run_cli("report " + common_flags(ws) + " " +
                                    sweep_results.string());
    CAPTURE(r.output);
    REQUIRE(r.status == 0);
    std::ifstream in(ws.latest_run("report") / "report.json");
    json report;
    in >> report;
    REQUIRE(report.contains("sweeps"));
    const json& sweep = report.at("sweeps")[0];
    CHECK(sweep.at("count") == 2);
    CHECK(sweep.at("edit_effects").size() == 1);
    CHECK(sweep.at("edit_effects")[0].at("pairs") == 1);
    CHECK(fs::exists(ws.latest_run("report") / "report.txt"));
  }
}
