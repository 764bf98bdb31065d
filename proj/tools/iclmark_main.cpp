// iclmark: warm-up training, retrieval-controlled evaluation, prompt
// sweeps, OOS threshold tuning and report generation for soft-token ICL
// templates. Every run writes a manifest with the fully resolved
// configuration, all seeds and input digests, so artifacts can be
// reproduced from the manifest alone.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iclmark/checkpoint.hpp"
#include "iclmark/data.hpp"
#include "iclmark/digest.hpp"
#include "iclmark/errors.hpp"
#include "iclmark/eval.hpp"
#include "iclmark/markup.hpp"
#include "iclmark/pipeline.hpp"
#include "iclmark/retrieval.hpp"
#include "iclmark/rng.hpp"
#include "iclmark/seq2seq.hpp"
#include "iclmark/template_io.hpp"
#include "iclmark/warmup.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace iclmark;

namespace {

// --- shared helpers ----------------------------------------------------------

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Sha256 hash;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    hash.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return hash.hex();
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// Artifact directory with a lock guarding concurrent writers under the
// same root.
class ArtifactDir {
 public:
  ArtifactDir(const fs::path& root, const std::string& command) {
    fs::create_directories(root);
    lock_fd_ = ::open((root / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
    if (lock_fd_ < 0 || ::flock(lock_fd_, LOCK_EX) != 0) {
      throw IoError("cannot lock artifact root: " + root.string());
    }
    dir_ = root / (utc_timestamp() + "-" + command);
    if (fs::exists(dir_)) {
      dir_ += "-" + std::to_string(::getpid());
    }
    fs::create_directories(dir_);
    manifest_["command"] = command;
    manifest_["created_utc"] = utc_timestamp();
  }

  ~ArtifactDir() {
    if (lock_fd_ >= 0) {
      ::flock(lock_fd_, LOCK_UN);
      ::close(lock_fd_);
    }
  }

  const fs::path& dir() const { return dir_; }
  json& manifest() { return manifest_; }

  void record_input(const std::string& name, const fs::path& path) {
    manifest_["inputs"][name] = {{"path", fs::absolute(path).string()},
                                 {"sha256", file_digest(path)}};
  }

  void record_output(const std::string& name, const fs::path& path) {
    manifest_["outputs"][name] = fs::absolute(path).string();
  }

  void write_manifest() {
    std::ofstream out(dir_ / "manifest.json");
    out << manifest_.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  json manifest_;
  int lock_fd_ = -1;
};

// Backend spec: "toy" with optional overrides ("toy:seed=3,budget=256"),
// or a path to a saved weights file.
std::unique_ptr<model::Seq2SeqBackend> make_backend(const std::string& spec,
                                                    json& manifest) {
  if (spec.rfind("toy", 0) != 0) {
    auto backend = std::make_unique<model::Seq2SeqBackend>(
        model::Seq2SeqBackend::load(spec));
    manifest["backend"] = {{"spec", spec},
                           {"model_id", backend->model_id()},
                           {"digest", backend->base_param_digest()}};
    return backend;
  }

  model::Seq2SeqConfig config;
  std::uint64_t weight_seed = 7;
  if (spec.size() > 3) {
    if (spec[3] != ':') throw ConfigError("bad backend spec: " + spec);
    std::string rest = spec.substr(4);
    std::stringstream ss(rest);
    std::string kv;
    while (std::getline(ss, kv, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("bad backend option: " + kv);
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      if (key == "seed") {
        weight_seed = std::stoull(value);
      } else if (key == "budget") {
        config.context_budget = std::stoi(value);
        config.max_positions = std::max(config.max_positions, config.context_budget);
      } else if (key == "dim") {
        config.d_model = std::stoi(value);
      } else if (key == "layers") {
        config.enc_layers = config.dec_layers = std::stoi(value);
      } else if (key == "vocab") {
        config.vocab = std::stoi(value);
      } else if (key == "heads") {
        config.heads = std::stoi(value);
      } else {
        throw ConfigError("unknown backend option: " + key);
      }
    }
  }
  auto backend = std::make_unique<model::Seq2SeqBackend>(config, weight_seed);
  manifest["backend"] = {{"spec", spec},
                         {"model_id", backend->model_id()},
                         {"weight_seed", weight_seed},
                         {"digest", backend->base_param_digest()},
                         {"tokenizer", backend->tokenizer().id()}};
  return backend;
}

// Embedder spec: "hashed[:dim]" or a path to a precomputed table.
std::unique_ptr<retrieval::EmbeddingProvider> make_provider(
    const std::string& spec, json& manifest) {
  std::unique_ptr<retrieval::EmbeddingProvider> provider;
  if (spec.rfind("hashed", 0) == 0) {
    int dim = 64;
    if (spec.size() > 6 && spec[6] == ':') dim = std::stoi(spec.substr(7));
    provider = std::make_unique<retrieval::HashedEmbedder>(dim);
  } else {
    provider = std::make_unique<retrieval::PrecomputedEmbedder>(
        retrieval::PrecomputedEmbedder::load(spec));
  }
  manifest["embedder"] = provider->id();
  return provider;
}

std::vector<markup::Demonstration> to_demos(const data::DatasetSplit& split) {
  std::vector<markup::Demonstration> demos;
  demos.reserve(split.examples.size());
  for (const data::Example& e : split.examples) demos.push_back({e.text, e.label});
  return demos;
}

std::vector<eval::EvalInstance> to_instances(const data::DatasetSplit& split,
                                             bool oos) {
  std::vector<eval::EvalInstance> instances;
  instances.reserve(split.examples.size());
  for (const data::Example& e : split.examples) {
    instances.push_back({e.text, oos ? "" : e.label, oos});
  }
  return instances;
}

json nota_to_json(const eval::NotaStats& n) {
  return {{"actual_rate", n.actual_rate}, {"predicted_rate", n.predicted_rate},
          {"recall", n.recall},           {"precision", n.precision},
          {"f1", n.f1}};
}

json closed_report_to_json(const eval::EvalReport& report) {
  json per_class = json::object();
  for (const auto& [cls, stats] : report.per_class) {
    per_class[cls] = {{"count", stats.count}, {"correct", stats.correct}};
  }
  return {{"kind", "closed"},
          {"task_accuracy", report.task_accuracy},
          {"mc_accuracy", report.mc_accuracy},
          {"nota", nota_to_json(report.nota)},
          {"per_class", per_class},
          {"suite_size", report.suite_size}};
}

json oos_report_to_json(const eval::OOSReport& report) {
  json j = {{"kind", "open-world"},
            {"oos_kind", eval::to_string(report.kind)},
            {"in_scope_accuracy", report.in_scope_accuracy},
            {"oos_recall", report.oos_recall},
            {"oos_precision", report.oos_precision},
            {"predicted_oos", report.predicted_oos},
            {"suite_size", report.suite_size}};
  if (report.threshold.has_value()) j["threshold"] = *report.threshold;
  return j;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + " is not valid JSON: " + e.what());
  }
  return j;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// --- common option bundles ---------------------------------------------------

struct CommonOpts {
  std::string backend_spec = "toy";
  std::string embedder_spec = "hashed:64";
  std::string out_root = "runs";
  std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--backend", opts.backend_spec,
                  "backend spec: toy[:k=v,...] or a weights file")
      ->envname("ICLMARK_BACKEND");
  cmd->add_option("--embedder", opts.embedder_spec,
                  "embedder: hashed[:dim] or a precomputed table (jsonl)")
      ->envname("ICLMARK_EMBEDDER");
  cmd->add_option("--out", opts.out_root, "artifact root directory")
      ->envname("ICLMARK_OUT");
  cmd->add_option("--seed", opts.seed, "global run seed")
      ->envname("ICLMARK_SEED");
}

struct TemplateOpts {
  std::string template_path;
  int classification_width = 12;
  bool include_nota = false;
};

void add_template_opts(CLI::App* cmd, TemplateOpts& opts) {
  cmd->add_option("--template", opts.template_path,
                  "template spec file (default: built-in soft template)")
      ->envname("ICLMARK_TEMPLATE");
  cmd->add_option("--classification-width", opts.classification_width,
                  "soft tokens for the classification tag [9, 18]")
      ->envname("ICLMARK_CLASSIFICATION_WIDTH");
  cmd->add_flag("--include-nota", opts.include_nota,
                "append the none-of-the-above option")
      ->envname("ICLMARK_INCLUDE_NOTA");
}

markup::TemplateSpec resolve_template(const TemplateOpts& opts) {
  if (!opts.template_path.empty()) {
    return markup::load_template(opts.template_path);
  }
  return markup::default_soft_template();
}

// --- warmup ------------------------------------------------------------------

struct WarmupOpts {
  CommonOpts common;
  TemplateOpts tmpl;
  std::string pool_manifest;
  double learning_rate = 0.05;
  int steps = 200;
  int batch_size = 4;
  int k = 9;
  double lambda = 0.5;
  std::string init = "auto";
  int anneal_set = 1;
  std::string domain = "intent";
  bool open_world = false;
  std::string optimizer = "adam";
};

int cmd_warmup(const WarmupOpts& opts) {
  ArtifactDir artifacts(opts.common.out_root, "warmup");
  json& manifest = artifacts.manifest();

  const auto backend = make_backend(opts.common.backend_spec, manifest);
  const auto provider = make_provider(opts.common.embedder_spec, manifest);
  artifacts.record_input("pool_manifest", opts.pool_manifest);

  const json pool_json = load_json(opts.pool_manifest);
  const fs::path pool_dir = fs::path(opts.pool_manifest).parent_path();
  const std::string style = pool_json.value("style", std::string("intent"));
  const std::string target = pool_json.at("target").get<std::string>();

  std::vector<warmup::PoolTask> tasks;
  for (const json& t : pool_json.at("tasks")) {
    warmup::PoolTask task;
    task.dataset = t.at("dataset").get<std::string>();
    task.input_source =
        data::load_dataset(pool_dir / t.at("inputs").get<std::string>());
    task.demo_pool =
        data::load_dataset(pool_dir / t.at("demos").get<std::string>());
    task.weight = t.value("weight", 1.0);
    tasks.push_back(std::move(task));
  }
  const warmup::WarmupTaskPool pool(std::move(tasks), target);

  const markup::TagSet tags = markup::default_tagset(opts.tmpl.classification_width);

  warmup::WarmupConfig config;
  config.learning_rate = opts.learning_rate;
  config.steps = opts.steps;
  config.batch_size = opts.batch_size;
  config.seed = opts.common.seed;
  config.tagset = tags;
  config.template_spec = resolve_template(opts.tmpl);
  config.include_nota = opts.tmpl.include_nota;
  config.optimizer = warmup::optimizer_from_string(opts.optimizer);
  config.init = opts.init == "auto"
                    ? warmup::default_init_strategy(config.include_nota,
                                                    opts.open_world)
                    : model::init_strategy_from_string(opts.init);
  config.validate();

  std::map<std::string, std::string> phrases;
  const std::map<std::string, std::string>* phrases_ptr = nullptr;
  if (config.init == model::InitStrategy::anneal) {
    phrases = model::anneal_phrases(opts.domain == "legal"
                                        ? markup::TemplateDomain::legal
                                        : markup::TemplateDomain::intent,
                                    opts.anneal_set);
    phrases_ptr = &phrases;
  }
  model::SoftTokenBank bank = model::extend_vocabulary(
      *backend, tags, config.init, config.seed, phrases_ptr);

  std::unique_ptr<warmup::EpisodeStream> stream;
  if (style == "intent") {
    retrieval::RetrievalConfig rcfg;
    rcfg.k = opts.k;
    rcfg.lambda = opts.lambda;
    stream = warmup::build_intent_stream(pool, *provider, rcfg, config, *backend);
  } else if (style == "episodic") {
    std::vector<data::EpisodeSpec> specs;
    if (pool_json.contains("specs")) {
      for (const json& s : pool_json.at("specs")) {
        specs.push_back({s.at(0).get<int>(), s.at(1).get<int>(), 1});
      }
    } else {
      specs = {{5, 1, 1}, {5, 5, 1}, {10, 1, 1}, {10, 5, 1}};
    }
    stream = warmup::build_episodic_stream(
        pool, specs, pool_json.value("episodes_per_spec", 5000),
        pool_json.value("retrieval_k", 15), *provider, config, *backend);
  } else {
    throw ConfigError("unknown pool style: " + style);
  }

  const warmup::TrainResult result =
      warmup::train(*backend, std::move(bank), *stream, config);

  const fs::path checkpoint_path = artifacts.dir() / "checkpoint.bank";
  model::save_checkpoint(result.bank, checkpoint_path);
  artifacts.record_output("checkpoint", checkpoint_path);

  const fs::path trace_path = artifacts.dir() / "loss_trace.csv";
  {
    std::ofstream trace(trace_path);
    trace << "step,loss\n";
    for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
      trace << i << "," << result.loss_trace[i] << "\n";
    }
  }
  artifacts.record_output("loss_trace", trace_path);

  manifest["config"] = {
      {"style", style},
      {"target", target},
      {"learning_rate", config.learning_rate},
      {"steps", config.steps},
      {"batch_size", config.batch_size},
      {"seed", config.seed},
      {"init", model::to_string(config.init)},
      {"optimizer", warmup::to_string(config.optimizer)},
      {"include_nota", config.include_nota},
      {"classification_width", opts.tmpl.classification_width},
      {"total_width", tags.total_width()},
      {"k", opts.k},
      {"lambda", opts.lambda},
      {"anneal_set", opts.anneal_set},
      {"domain", opts.domain},
  };
  manifest["loss_first"] = result.loss_trace.empty() ? 0.0 : result.loss_trace.front();
  manifest["loss_last"] = result.loss_trace.empty() ? 0.0 : result.loss_trace.back();
  manifest["checkpoint_digest"] = file_digest(checkpoint_path);
  artifacts.write_manifest();

  std::cout << "warmup: " << config.steps << " steps, loss "
            << manifest["loss_first"] << " -> " << manifest["loss_last"] << "\n"
            << "checkpoint: " << checkpoint_path.string() << "\n";
  return 0;
}

// --- eval ----------------------------------------------------------------

struct EvalOpts {
  CommonOpts common;
  TemplateOpts tmpl;
  std::string checkpoint;
  std::string dataset_manifest;
  std::string demo_pool;
  std::string oos_manifest;
  std::string oos_kind;
  double threshold = -1.0;
  int k = 9;
  double lambda = 0.5;
  int ways = 0;
  int shots = 0;
  int episodes = 0;
  int draws = 0;
  int filter_max_tokens = 0;
  int retrieval_k = 0;
};

model::SoftTokenBank load_bank(const std::string& checkpoint,
                               const model::Backend& backend, json& manifest,
                               ArtifactDir* artifacts) {
  if (checkpoint.empty()) {
    // handwritten-only evaluation: dummy bank with matching dimension
    return model::extend_vocabulary(backend, markup::default_tagset(12),
                                    model::InitStrategy::random, 0);
  }
  if (artifacts != nullptr) artifacts->record_input("checkpoint", checkpoint);
  bool digest_ok = false;
  model::SoftTokenBank bank =
      model::load_checkpoint(checkpoint, backend, &digest_ok);
  manifest["checkpoint_digest_match"] = digest_ok;
  return bank;
}

void write_text_report(const fs::path& path, const json& report) {
  std::ofstream out(path);
  out << "metric                    value\n";
  out << "------------------------  ---------\n";
  for (const auto& [key, value] : report.items()) {
    if (value.is_number()) {
      char line[128];
      std::snprintf(line, sizeof(line), "%-24s  %.4f\n", key.c_str(),
                    value.get<double>());
      out << line;
    }
  }
}

int cmd_eval(const EvalOpts& opts) {
  ArtifactDir artifacts(opts.common.out_root, "eval");
  json& manifest = artifacts.manifest();

  const auto backend = make_backend(opts.common.backend_spec, manifest);
  const auto provider = make_provider(opts.common.embedder_spec, manifest);
  const model::SoftTokenBank bank =
      load_bank(opts.checkpoint, *backend, manifest, &artifacts);

  artifacts.record_input("dataset_manifest", opts.dataset_manifest);
  data::DatasetSplit test_split = data::load_dataset(opts.dataset_manifest);
  if (opts.filter_max_tokens > 0) {
    test_split = data::ledgar_filter(test_split, backend->tokenizer(),
                                     opts.filter_max_tokens);
  }

  eval::Pipeline pipeline;
  pipeline.backend = backend.get();
  pipeline.bank = &bank;
  pipeline.template_spec = resolve_template(opts.tmpl);
  pipeline.tagset = markup::default_tagset(opts.tmpl.classification_width);
  pipeline.provider = provider.get();
  pipeline.retrieval_cfg.k = opts.k;
  pipeline.retrieval_cfg.lambda = opts.lambda;
  pipeline.include_nota = opts.tmpl.include_nota;
  pipeline.label_map = test_split.label_map;

  json report_json;

  if (opts.ways > 0) {
    // episodic evaluation: classes from each sampled episode
    pipeline.demos_in_rank_order = false;
    const data::EpisodeSpec spec{opts.ways, std::max(1, opts.shots), 1};
    const int episodes = opts.episodes > 0 ? opts.episodes : 100;
    const auto records = eval::run_episodic(pipeline, test_split, spec, episodes,
                                            opts.retrieval_k, opts.common.seed);
    report_json = closed_report_to_json(eval::aggregate_closed(records));
    report_json["ways"] = opts.ways;
    report_json["shots"] = std::max(1, opts.shots);
    report_json["episodes"] = episodes;
  } else {
    if (opts.demo_pool.empty()) {
      throw ConfigError("retrieval evaluation needs --demo-pool");
    }
    artifacts.record_input("demo_pool", opts.demo_pool);
    data::DatasetSplit pool_split = data::load_dataset(opts.demo_pool);
    if (opts.filter_max_tokens > 0) {
      pool_split = data::ledgar_filter(pool_split, backend->tokenizer(),
                                       opts.filter_max_tokens);
    }
    pipeline.label_map.insert(pool_split.label_map.begin(),
                              pool_split.label_map.end());

    std::vector<eval::EvalInstance> suite = to_instances(test_split, false);
    if (!opts.oos_manifest.empty()) {
      artifacts.record_input("oos_manifest", opts.oos_manifest);
      const data::DatasetSplit oos_split = data::load_dataset(opts.oos_manifest);
      const auto oos_instances = to_instances(oos_split, true);
      suite.insert(suite.end(), oos_instances.begin(), oos_instances.end());
    }

    if (!opts.oos_kind.empty()) {
      const eval::OosKind kind = eval::oos_kind_from_string(opts.oos_kind);
      std::optional<double> threshold;
      if (opts.threshold >= 0.0) threshold = opts.threshold;

      const int draws = std::max(1, opts.draws);
      std::vector<double> is_acc, recall, precision;
      json per_draw = json::array();
      for (int d = 0; d < draws; ++d) {
        const std::uint64_t draw_seed = mix_seed(opts.common.seed, d);
        data::DatasetSplit draw_pool = pool_split;
        if (opts.draws > 0 && opts.shots > 0) {
          draw_pool = data::kshot_draw(pool_split, opts.shots, draw_seed);
        }
        const retrieval::VectorIndex index =
            retrieval::VectorIndex::build(to_demos(draw_pool), *provider);
        pipeline.index = &index;
        const eval::OOSReport report =
            eval::evaluate_open_world(pipeline, suite, kind, threshold, draw_seed);
        is_acc.push_back(report.in_scope_accuracy);
        recall.push_back(report.oos_recall);
        precision.push_back(report.oos_precision);
        json dj = oos_report_to_json(report);
        dj["draw_seed"] = draw_seed;
        per_draw.push_back(dj);
      }
      report_json = per_draw.back();
      report_json["draws"] = per_draw;
      report_json["in_scope_accuracy_mean"] = mean_of(is_acc);
      report_json["in_scope_accuracy_std"] = sample_std(is_acc);
      report_json["oos_recall_mean"] = mean_of(recall);
      report_json["oos_recall_std"] = sample_std(recall);
      report_json["oos_precision_mean"] = mean_of(precision);
      report_json["oos_precision_std"] = sample_std(precision);
    } else {
      const retrieval::VectorIndex index =
          retrieval::VectorIndex::build(to_demos(pool_split), *provider);
      pipeline.index = &index;
      const eval::EvalReport report =
          eval::evaluate_closed(pipeline, suite, opts.common.seed);
      report_json = closed_report_to_json(report);
    }
  }

  manifest["config"] = {
      {"k", opts.k},          {"lambda", opts.lambda},
      {"ways", opts.ways},    {"shots", opts.shots},
      {"draws", opts.draws},  {"include_nota", opts.tmpl.include_nota},
      {"seed", opts.common.seed},
      {"filter_max_tokens", opts.filter_max_tokens},
  };

  const fs::path report_path = artifacts.dir() / "report.json";
  write_json(report_path, report_json);
  artifacts.record_output("report", report_path);
  const fs::path text_path = artifacts.dir() / "report.txt";
  write_text_report(text_path, report_json);
  artifacts.record_output("report_text", text_path);
  artifacts.write_manifest();

  std::cout << report_json.dump(2) << "\n";
  return 0;
}

// --- sweep ---------------------------------------------------------------

struct SweepOpts {
  CommonOpts common;
  std::string dataset_manifest;
  std::string validation_manifest;
  std::string axes_file;
  int ways = 5;
  int shots = 1;
  int episodes = 20;
  int retrieval_k = 0;
};

eval::SweepAxes load_axes(const std::string& path) {
  if (path.empty()) return eval::default_sweep_axes();
  const json j = load_json(path);
  eval::SweepAxes axes;
  for (const json& a : j.at("axes")) {
    axes.axes.push_back({a.at("name").get<std::string>(),
                         a.at("choices").get<std::vector<std::string>>()});
  }
  axes.validate();
  return axes;
}

int cmd_sweep(const SweepOpts& opts) {
  ArtifactDir artifacts(opts.common.out_root, "sweep");
  json& manifest = artifacts.manifest();

  const auto backend = make_backend(opts.common.backend_spec, manifest);
  const auto provider = make_provider(opts.common.embedder_spec, manifest);
  const model::SoftTokenBank bank = load_bank("", *backend, manifest, nullptr);

  artifacts.record_input("dataset_manifest", opts.dataset_manifest);
  const data::DatasetSplit split = data::load_dataset(opts.dataset_manifest);
  std::optional<data::DatasetSplit> validation;
  if (!opts.validation_manifest.empty()) {
    artifacts.record_input("validation_manifest", opts.validation_manifest);
    validation = data::load_dataset(opts.validation_manifest);
  }
  if (!opts.axes_file.empty()) artifacts.record_input("axes", opts.axes_file);

  const eval::SweepAxes axes = load_axes(opts.axes_file);
  const auto entries = eval::generate_sweep(axes);
  const data::EpisodeSpec spec{opts.ways, opts.shots, 1};

  const auto evaluate_template = [&](const markup::TemplateSpec& tmpl,
                                     const data::DatasetSplit& eval_split) {
    eval::Pipeline pipeline;
    pipeline.backend = backend.get();
    pipeline.bank = &bank;
    pipeline.template_spec = tmpl;
    pipeline.tagset = markup::default_tagset(12);
    pipeline.provider = provider.get();
    pipeline.include_nota = false;
    pipeline.demos_in_rank_order = false;
    const auto records = eval::run_episodic(
        pipeline, eval_split, spec, opts.episodes, opts.retrieval_k,
        opts.common.seed);
    return eval::aggregate_closed(records).task_accuracy;
  };

  json results = json::array();
  std::vector<eval::SweepResult> sweep_results;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const double accuracy = evaluate_template(entries[i].template_spec, split);
    json row = {{"assignment", entries[i].assignment}, {"accuracy", accuracy}};
    if (validation.has_value()) {
      row["validation_accuracy"] =
          evaluate_template(entries[i].template_spec, *validation);
    }
    results.push_back(row);
    sweep_results.push_back({entries[i].assignment, accuracy});
    std::cout << "template " << (i + 1) << "/" << entries.size() << ": accuracy "
              << accuracy << "\n";
  }

  json axes_json = json::array();
  for (const eval::SweepAxis& axis : axes.axes) {
    axes_json.push_back({{"name", axis.name}, {"choices", axis.choices}});
  }
  std::vector<double> accuracies;
  for (const eval::SweepResult& r : sweep_results) accuracies.push_back(r.accuracy);
  const json sweep_json = {
      {"axes", axes_json},
      {"results", results},
      {"ways", opts.ways},
      {"shots", opts.shots},
      {"episodes", opts.episodes},
      {"accuracy_mean", mean_of(accuracies)},
      {"accuracy_std", sample_std(accuracies)},
  };

  const fs::path results_path = artifacts.dir() / "sweep_results.json";
  write_json(results_path, sweep_json);
  artifacts.record_output("sweep_results", results_path);
  manifest["config"] = {{"ways", opts.ways},
                        {"shots", opts.shots},
                        {"episodes", opts.episodes},
                        {"templates", entries.size()},
                        {"seed", opts.common.seed}};
  artifacts.write_manifest();

  std::cout << "sweep complete: " << entries.size() << " templates, mean accuracy "
            << mean_of(accuracies) << "\n";
  return 0;
}

// --- threshold -------------------------------------------------------------

struct ThresholdOpts {
  CommonOpts common;
  TemplateOpts tmpl;
  std::string checkpoint;
  std::string dataset_manifest;
  std::string oos_manifest;
  std::string demo_pool;
  int k = 9;
  double lambda = 0.5;
  int grid_points = 101;
};

int cmd_threshold(const ThresholdOpts& opts) {
  ArtifactDir artifacts(opts.common.out_root, "threshold");
  json& manifest = artifacts.manifest();

  const auto backend = make_backend(opts.common.backend_spec, manifest);
  const auto provider = make_provider(opts.common.embedder_spec, manifest);
  const model::SoftTokenBank bank =
      load_bank(opts.checkpoint, *backend, manifest, &artifacts);

  artifacts.record_input("dataset_manifest", opts.dataset_manifest);
  artifacts.record_input("oos_manifest", opts.oos_manifest);
  artifacts.record_input("demo_pool", opts.demo_pool);
  const data::DatasetSplit in_split = data::load_dataset(opts.dataset_manifest);
  const data::DatasetSplit oos_split = data::load_dataset(opts.oos_manifest);
  const data::DatasetSplit pool_split = data::load_dataset(opts.demo_pool);

  const retrieval::VectorIndex index =
      retrieval::VectorIndex::build(to_demos(pool_split), *provider);

  eval::Pipeline pipeline;
  pipeline.backend = backend.get();
  pipeline.bank = &bank;
  pipeline.template_spec = resolve_template(opts.tmpl);
  pipeline.tagset = markup::default_tagset(opts.tmpl.classification_width);
  pipeline.index = &index;
  pipeline.provider = provider.get();
  pipeline.retrieval_cfg.k = opts.k;
  pipeline.retrieval_cfg.lambda = opts.lambda;
  pipeline.include_nota = true;  // threshold tuning needs the NOTA option
  pipeline.label_map = in_split.label_map;
  pipeline.label_map.insert(pool_split.label_map.begin(),
                            pool_split.label_map.end());

  std::vector<eval::EvalInstance> suite = to_instances(in_split, false);
  const auto oos_instances = to_instances(oos_split, true);
  suite.insert(suite.end(), oos_instances.begin(), oos_instances.end());

  std::vector<double> grid;
  if (opts.grid_points == 101) {
    grid = eval::default_threshold_grid();
  } else {
    if (opts.grid_points < 2) throw ConfigError("grid needs at least 2 points");
    for (int i = 0; i < opts.grid_points; ++i) {
      grid.push_back(static_cast<double>(i) / (opts.grid_points - 1));
    }
  }

  const auto [threshold, curve] =
      eval::tune_threshold(pipeline, suite, grid, opts.common.seed);

  const json curve_json = {
      {"thresholds", curve.thresholds},
      {"objective", curve.objective},
      {"predicted_oos", curve.predicted_oos},
      {"chosen_threshold", threshold},
  };
  const fs::path curve_path = artifacts.dir() / "threshold_curve.json";
  write_json(curve_path, curve_json);
  artifacts.record_output("threshold_curve", curve_path);
  manifest["config"] = {{"k", opts.k},
                        {"lambda", opts.lambda},
                        {"grid_points", grid.size()},
                        {"seed", opts.common.seed}};
  manifest["chosen_threshold"] = threshold;
  artifacts.write_manifest();

  std::cout << "chosen threshold: " << threshold << "\n"
            << "curve: " << curve_path.string() << "\n";
  return 0;
}

// --- report ------------------------------------------------------------------

struct ReportOpts {
  CommonOpts common;
  std::vector<std::string> inputs;
  std::vector<std::string> validation_inputs;
  std::string metric = "task_accuracy";
};

int cmd_report(const ReportOpts& opts) {
  ArtifactDir artifacts(opts.common.out_root, "report");
  json& manifest = artifacts.manifest();

  json out;
  json summary_lines = json::array();

  std::vector<double> run_metrics;
  std::vector<double> validation_metrics;

  for (std::size_t i = 0; i < opts.inputs.size(); ++i) {
    const fs::path path = opts.inputs[i];
    artifacts.record_input("input_" + std::to_string(i), path);
    const json j = load_json(path);

    if (j.contains("results")) {
      // sweep results: distribution summary, quantiles, edit effects
      std::vector<double> accuracies;
      std::vector<eval::SweepResult> results;
      for (const json& row : j.at("results")) {
        const double acc = row.at("accuracy").get<double>();
        accuracies.push_back(acc);
        eval::SweepAssignment assignment;
        for (const auto& [axis, value] : row.at("assignment").items()) {
          assignment[axis] = value.get<std::string>();
        }
        results.push_back({assignment, acc});
      }
      eval::SweepAxes axes;
      for (const json& a : j.at("axes")) {
        axes.axes.push_back({a.at("name").get<std::string>(),
                             a.at("choices").get<std::vector<std::string>>()});
      }

      json sweep_summary = {
          {"source", path.string()},
          {"count", accuracies.size()},
          {"min", *std::min_element(accuracies.begin(), accuracies.end())},
          {"max", *std::max_element(accuracies.begin(), accuracies.end())},
          {"mean", mean_of(accuracies)},
          {"std", sample_std(accuracies)},
      };
      json quantiles = json::array();
      for (const auto& [q, v] : eval::quantile_series(accuracies)) {
        quantiles.push_back({{"q", q}, {"value", v}});
      }
      sweep_summary["quantiles"] = quantiles;

      json effects = json::array();
      for (const eval::SweepAxis& axis : axes.axes) {
        if (axis.choices.size() != 2) continue;
        const eval::EditEffect effect = eval::edit_effect(
            results, axes, axis.name, axis.choices[0], axis.choices[1]);
        effects.push_back({{"axis", axis.name},
                           {"edit", effect.label},
                           {"pairs", effect.deltas_pp.size()},
                           {"min_pp", effect.min_pp},
                           {"mean_pp", effect.mean_pp},
                           {"max_pp", effect.max_pp},
                           {"non_monotonic", effect.non_monotonic}});
      }
      sweep_summary["edit_effects"] = effects;
      out["sweeps"].push_back(sweep_summary);
      summary_lines.push_back("sweep " + path.string() + ": mean " +
                              std::to_string(mean_of(accuracies)));
    } else if (j.contains(opts.metric)) {
      run_metrics.push_back(j.at(opts.metric).get<double>() * 100.0);
    } else {
      throw InputError("report input has neither sweep results nor metric '" +
                       opts.metric + "': " + path.string());
    }
  }

  for (const std::string& v : opts.validation_inputs) {
    const json j = load_json(v);
    if (!j.contains(opts.metric)) {
      throw InputError("validation report lacks metric '" + opts.metric +
                       "': " + v);
    }
    validation_metrics.push_back(j.at(opts.metric).get<double>() * 100.0);
  }

  if (!run_metrics.empty()) {
    if (validation_metrics.empty()) {
      validation_metrics = run_metrics;  // best-on-val degrades to best-on-test
    }
    const eval::RunSummary summary =
        eval::aggregate_runs(run_metrics, validation_metrics);
    out["runs"] = {
        {"metric", opts.metric},
        {"count", run_metrics.size()},
        {"mean", summary.mean},
        {"std", summary.stddev},
        {"best_on_validation", summary.best_on_validation},
        {"formatted", summary.formatted},
    };
    summary_lines.push_back(opts.metric + ": " + summary.formatted);
  }

  const fs::path report_path = artifacts.dir() / "report.json";
  write_json(report_path, out);
  artifacts.record_output("report", report_path);

  const fs::path text_path = artifacts.dir() / "report.txt";
  {
    std::ofstream text(text_path);
    for (const json& line : summary_lines) text << line.get<std::string>() << "\n";
    if (out.contains("sweeps")) {
      for (const json& sweep : out["sweeps"]) {
        text << "\nsweep distribution (" << sweep.at("source").get<std::string>()
             << ")\n";
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "  n=%zu  min=%.4f  mean=%.4f  max=%.4f  std=%.4f\n",
                      sweep.at("count").get<std::size_t>(),
                      sweep.at("min").get<double>(), sweep.at("mean").get<double>(),
                      sweep.at("max").get<double>(), sweep.at("std").get<double>());
        text << buf;
        for (const json& effect : sweep.at("edit_effects")) {
          std::snprintf(buf, sizeof(buf),
                        "  edit %s: pairs=%zu min=%+.2fpp mean=%+.2fpp "
                        "max=%+.2fpp%s\n",
                        effect.at("edit").get<std::string>().c_str(),
                        effect.at("pairs").get<std::size_t>(),
                        effect.at("min_pp").get<double>(),
                        effect.at("mean_pp").get<double>(),
                        effect.at("max_pp").get<double>(),
                        effect.at("non_monotonic").get<bool>()
                            ? " (non-monotonic)"
                            : "");
          text << buf;
        }
      }
    }
  }
  artifacts.record_output("report_text", text_path);
  artifacts.write_manifest();

  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"soft-token ICL markup: warm-up, retrieval-controlled "
               "evaluation, sweeps and reports"};
  app.set_config("--config", "", "configuration file (TOML/INI)")
      ->envname("ICLMARK_CONFIG");
  app.require_subcommand(1);

  WarmupOpts warmup_opts;
  CLI::App* warmup_cmd =
      app.add_subcommand("warmup", "learn soft-token tags on a task pool");
  add_common(warmup_cmd, warmup_opts.common);
  add_template_opts(warmup_cmd, warmup_opts.tmpl);
  warmup_cmd->add_option("--dataset-manifest", warmup_opts.pool_manifest,
                         "pool manifest listing warm-up tasks")
      ->required()
      ->envname("ICLMARK_DATASET_MANIFEST");
  warmup_cmd->add_option("--lr", warmup_opts.learning_rate, "learning rate")
      ->envname("ICLMARK_LR");
  warmup_cmd->add_option("--steps", warmup_opts.steps, "optimizer steps")
      ->envname("ICLMARK_STEPS");
  warmup_cmd->add_option("--batch-size", warmup_opts.batch_size, "episodes per step")
      ->envname("ICLMARK_BATCH_SIZE");
  warmup_cmd->add_option("--k", warmup_opts.k, "demonstrations retrieved per input")
      ->envname("ICLMARK_K");
  warmup_cmd->add_option("--lambda", warmup_opts.lambda, "MMR trade-off in [0,1]")
      ->envname("ICLMARK_LAMBDA");
  warmup_cmd
      ->add_option("--init", warmup_opts.init, "random | anneal | auto")
      ->check(CLI::IsMember({"random", "anneal", "auto"}))
      ->envname("ICLMARK_INIT");
  warmup_cmd->add_option("--anneal-set", warmup_opts.anneal_set,
                         "handwritten set used for anneal init [1,5]")
      ->envname("ICLMARK_ANNEAL_SET");
  warmup_cmd->add_option("--domain", warmup_opts.domain, "intent | legal")
      ->check(CLI::IsMember({"intent", "legal"}))
      ->envname("ICLMARK_DOMAIN");
  warmup_cmd->add_flag("--open-world", warmup_opts.open_world,
                       "target task is open-world (affects auto init)")
      ->envname("ICLMARK_OPEN_WORLD");
  warmup_cmd->add_option("--optimizer", warmup_opts.optimizer, "sgd | adam")
      ->check(CLI::IsMember({"sgd", "adam"}))
      ->envname("ICLMARK_OPTIMIZER");

  EvalOpts eval_opts;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "closed- or open-world evaluation through the retrieval pipeline");
  add_common(eval_cmd, eval_opts.common);
  add_template_opts(eval_cmd, eval_opts.tmpl);
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "trained bank")
      ->envname("ICLMARK_CHECKPOINT");
  eval_cmd->add_option("--dataset-manifest", eval_opts.dataset_manifest,
                       "test split manifest")
      ->required()
      ->envname("ICLMARK_DATASET_MANIFEST");
  eval_cmd->add_option("--demo-pool", eval_opts.demo_pool,
                       "demonstration pool manifest (retrieval mode)")
      ->envname("ICLMARK_DEMO_POOL");
  eval_cmd->add_option("--oos-manifest", eval_opts.oos_manifest,
                       "out-of-scope queries manifest")
      ->envname("ICLMARK_OOS_MANIFEST");
  eval_cmd->add_option("--oos-kind", eval_opts.oos_kind, "id-oos | ood-oos")
      ->check(CLI::IsMember({"id-oos", "ood-oos"}))
      ->envname("ICLMARK_OOS_KIND");
  eval_cmd->add_option("--threshold", eval_opts.threshold,
                       "NOTA probability threshold (id-oos)")
      ->envname("ICLMARK_THRESHOLD");
  eval_cmd->add_option("--k", eval_opts.k, "demonstrations per query")
      ->envname("ICLMARK_K");
  eval_cmd->add_option("--lambda", eval_opts.lambda, "MMR trade-off")
      ->envname("ICLMARK_LAMBDA");
  eval_cmd->add_option("--ways", eval_opts.ways, "episodic mode: classes per episode")
      ->envname("ICLMARK_WAYS");
  eval_cmd->add_option("--shots", eval_opts.shots,
                       "supports per class (episodic) or draw size (open world)")
      ->envname("ICLMARK_SHOTS");
  eval_cmd->add_option("--episodes", eval_opts.episodes, "episodes to sample")
      ->envname("ICLMARK_EPISODES");
  eval_cmd->add_option("--draws", eval_opts.draws,
                       "number of seeded k-shot pool draws (open world)")
      ->envname("ICLMARK_DRAWS");
  eval_cmd->add_option("--filter-max-tokens", eval_opts.filter_max_tokens,
                       "drop examples longer than this many tokens")
      ->envname("ICLMARK_FILTER_MAX_TOKENS");
  eval_cmd->add_option("--retrieval-k", eval_opts.retrieval_k,
                       "episodic mode: reduce supports to top-k by MMR (0 = all)")
      ->envname("ICLMARK_RETRIEVAL_K");

  SweepOpts sweep_opts;
  CLI::App* sweep_cmd = app.add_subcommand(
      "sweep", "evaluate the handwritten-template grid");
  add_common(sweep_cmd, sweep_opts.common);
  sweep_cmd->add_option("--dataset-manifest", sweep_opts.dataset_manifest,
                        "episodic evaluation split")
      ->required()
      ->envname("ICLMARK_DATASET_MANIFEST");
  sweep_cmd->add_option("--validation-manifest", sweep_opts.validation_manifest,
                        "validation split for best-prompt selection")
      ->envname("ICLMARK_VALIDATION_MANIFEST");
  sweep_cmd->add_option("--axes", sweep_opts.axes_file,
                        "sweep axes file (default: built-in 96-template grid)")
      ->envname("ICLMARK_AXES");
  sweep_cmd->add_option("--ways", sweep_opts.ways, "classes per episode")
      ->envname("ICLMARK_WAYS");
  sweep_cmd->add_option("--shots", sweep_opts.shots, "supports per class")
      ->envname("ICLMARK_SHOTS");
  sweep_cmd->add_option("--episodes", sweep_opts.episodes, "episodes per template")
      ->envname("ICLMARK_EPISODES");
  sweep_cmd->add_option("--retrieval-k", sweep_opts.retrieval_k,
                        "reduce supports to top-k by MMR (0 = all)")
      ->envname("ICLMARK_RETRIEVAL_K");

  ThresholdOpts threshold_opts;
  CLI::App* threshold_cmd = app.add_subcommand(
      "threshold", "tune the id-oos threshold on a validation suite");
  add_common(threshold_cmd, threshold_opts.common);
  add_template_opts(threshold_cmd, threshold_opts.tmpl);
  threshold_cmd->add_option("--checkpoint", threshold_opts.checkpoint, "trained bank")
      ->envname("ICLMARK_CHECKPOINT");
  threshold_cmd
      ->add_option("--dataset-manifest", threshold_opts.dataset_manifest,
                   "in-scope validation manifest")
      ->required()
      ->envname("ICLMARK_DATASET_MANIFEST");
  threshold_cmd
      ->add_option("--oos-manifest", threshold_opts.oos_manifest,
                   "out-of-scope validation manifest")
      ->required()
      ->envname("ICLMARK_OOS_MANIFEST");
  threshold_cmd->add_option("--demo-pool", threshold_opts.demo_pool,
                            "demonstration pool manifest")
      ->required()
      ->envname("ICLMARK_DEMO_POOL");
  threshold_cmd->add_option("--k", threshold_opts.k, "demonstrations per query")
      ->envname("ICLMARK_K");
  threshold_cmd->add_option("--lambda", threshold_opts.lambda, "MMR trade-off")
      ->envname("ICLMARK_LAMBDA");
  threshold_cmd->add_option("--grid-points", threshold_opts.grid_points,
                            "evenly spaced grid points over [0,1]")
      ->envname("ICLMARK_GRID_POINTS");

  ReportOpts report_opts;
  CLI::App* report_cmd = app.add_subcommand(
      "report", "aggregate run reports and sweep results");
  add_common(report_cmd, report_opts.common);
  report_cmd->add_option("inputs", report_opts.inputs,
                         "report.json / sweep_results.json files")
      ->required();
  report_cmd->add_option("--validation", report_opts.validation_inputs,
                         "validation report.json files paired with inputs")
      ->envname("ICLMARK_VALIDATION");
  report_cmd->add_option("--metric", report_opts.metric,
                         "metric field aggregated from run reports")
      ->envname("ICLMARK_METRIC");

  CLI11_PARSE(app, argc, argv);

  try {
    if (warmup_cmd->parsed()) return cmd_warmup(warmup_opts);
    if (eval_cmd->parsed()) return cmd_eval(eval_opts);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_opts);
    if (threshold_cmd->parsed()) return cmd_threshold(threshold_opts);
    if (report_cmd->parsed()) return cmd_report(report_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
