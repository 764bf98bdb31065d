#include "iclmark/warmup.hpp"

#include <cmath>
#include <utility>

#include "iclmark/errors.hpp"
#include "iclmark/rng.hpp"

namespace iclmark::warmup {

std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

Optimizer optimizer_from_string(std::string_view s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ConfigError("unknown optimizer: " + std::string(s));
}

void WarmupConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  template_spec.validate();
}

model::InitStrategy default_init_strategy(bool include_nota, bool open_world) {
  if (include_nota && !open_world) return model::InitStrategy::anneal;
  return model::InitStrategy::random;
}

WarmupTaskPool::WarmupTaskPool(std::vector<PoolTask> tasks,
                               std::string target_dataset)
    : tasks_(std::move(tasks)), target_dataset_(std::move(target_dataset)) {
  if (tasks_.empty()) throw ConfigError("warm-up task pool is empty");
  for (const PoolTask& task : tasks_) {
    if (task.dataset == target_dataset_) {
      throw ConfigError("target task dataset must be withheld from the pool: " +
                        task.dataset);
    }
    if (task.input_source.examples.empty()) {
      throw ConfigError("task " + task.dataset + " has an empty input source");
    }
    if (task.demo_pool.examples.empty()) {
      throw ConfigError("task " + task.dataset + " has an empty demo pool");
    }
    if (task.weight <= 0.0) {
      throw ConfigError("task " + task.dataset + " has non-positive weight");
    }
  }
}

namespace {

markup::LabelMap merged_label_map(const PoolTask& task) {
  markup::LabelMap map = task.input_source.label_map;
  map.insert(task.demo_pool.label_map.begin(), task.demo_pool.label_map.end());
  return map;
}

std::size_t weighted_pick(const std::vector<double>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  const double r = rng.uniform01() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (r < acc) return i;
  }
  return weights.size() - 1;
}

class IntentMmrStream final : public EpisodeStream {
 public:
  IntentMmrStream(const WarmupTaskPool& pool,
                  const retrieval::EmbeddingProvider& provider,
                  retrieval::RetrievalConfig retrieval_cfg, WarmupConfig config,
                  const model::Backend& backend)
      : provider_(provider),
        retrieval_cfg_(retrieval_cfg),
        config_(std::move(config)),
        backend_(backend) {
    retrieval_cfg_.validate();
    for (const PoolTask& task : pool.tasks()) {
      std::vector<markup::Demonstration> demos;
      demos.reserve(task.demo_pool.examples.size());
      for (const data::Example& e : task.demo_pool.examples) {
        demos.push_back({e.text, e.label});
      }
      tasks_.push_back({task.input_source.examples, merged_label_map(task),
                        retrieval::VectorIndex::build(demos, provider_)});
      weights_.push_back(task.weight);
    }
  }

  TrainingEpisode next() override {
    // An episode may be unanswerable with no NOTA fallback; those are
    // skipped, so bound the attempts to fail loudly on degenerate pools.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::uint64_t episode_seed = mix_seed(config_.seed, counter_++);
      Rng rng(episode_seed);
      const TaskState& task = tasks_[weighted_pick(weights_, rng)];
      const data::Example& input =
          task.inputs[rng.below(task.inputs.size())];

      std::vector<markup::Demonstration> selected =
          retrieval::mmr_select(task.index, input.text, provider_, retrieval_cfg_);
      const markup::OptionBlock block = retrieval::rescope_options(
          selected, task.label_map, config_.include_nota, rng.next());
      selected = retrieval::trim_to_budget(config_.template_spec, config_.tagset,
                                           block, std::move(selected), input.text,
                                           task.label_map, backend_);

      auto gold_it = task.label_map.find(input.label);
      if (gold_it == task.label_map.end()) {
        throw LabelMapError("no descriptor for label: " + input.label);
      }
      std::optional<char> gold_letter = block.letter_for(gold_it->second);
      bool answerable = gold_letter.has_value();
      if (!answerable) {
        gold_letter = block.nota_letter();
        if (!gold_letter.has_value()) continue;
      }

      TrainingEpisode episode;
      episode.prompt = markup::render_prompt(
          config_.template_spec, config_.tagset, block, selected, input.text,
          task.label_map, backend_.tokenizer(), gold_letter);
      episode.target = model::target_for_letter(backend_, *gold_letter);
      episode.gold_letter = *gold_letter;
      episode.answerable = answerable;
      return episode;
    }
    throw TrainingError(
        "intent stream produced 1000 consecutive unanswerable episodes");
  }

 private:
  struct TaskState {
    std::vector<data::Example> inputs;
    markup::LabelMap label_map;
    retrieval::VectorIndex index;
  };

  const retrieval::EmbeddingProvider& provider_;
  retrieval::RetrievalConfig retrieval_cfg_;
  WarmupConfig config_;
  const model::Backend& backend_;
  std::vector<TaskState> tasks_;
  std::vector<double> weights_;
  std::uint64_t counter_ = 0;
};

class EpisodicStream final : public EpisodeStream {
 public:
  EpisodicStream(const WarmupTaskPool& pool, std::vector<data::EpisodeSpec> specs,
                 int episodes_per_spec, int retrieval_k,
                 const retrieval::EmbeddingProvider& provider, WarmupConfig config,
                 const model::Backend& backend)
      : specs_(std::move(specs)),
        episodes_per_spec_(episodes_per_spec),
        retrieval_k_(retrieval_k),
        provider_(provider),
        config_(std::move(config)),
        backend_(backend) {
    if (specs_.empty()) throw ConfigError("episodic stream needs at least one spec");
    if (episodes_per_spec_ < 1) {
      throw ConfigError("episodes per spec must be >= 1");
    }
    for (const PoolTask& task : pool.tasks()) {
      splits_.push_back(task.input_source);
      label_maps_.push_back(merged_label_map(task));
      weights_.push_back(task.weight);
    }
  }

  TrainingEpisode next() override {
    if (query_cursor_ >= current_.queries.size()) sample_next_episode();

    const data::Example& query = current_.queries[query_cursor_];
    const std::uint64_t query_seed = mix_seed(current_.option_seed, query_cursor_);
    ++query_cursor_;

    const markup::LabelMap& label_map = label_maps_[current_task_];
    std::vector<std::string> descriptors;
    descriptors.reserve(current_.classes.size());
    for (const std::string& cls : current_.classes) {
      auto it = label_map.find(cls);
      if (it == label_map.end()) throw LabelMapError("no descriptor for " + cls);
      descriptors.push_back(it->second);
    }
    const markup::OptionBlock block = markup::build_option_block(
        descriptors, config_.include_nota, query_seed);

    std::vector<markup::Demonstration> demos;
    for (const data::Example& e : current_.all_supports()) {
      demos.push_back({e.text, e.label});
    }
    if (retrieval_k_ > 0 && static_cast<int>(demos.size()) > retrieval_k_) {
      retrieval::RetrievalConfig rcfg;
      rcfg.k = retrieval_k_;
      const retrieval::VectorIndex index =
          retrieval::VectorIndex::build(demos, provider_);
      demos = retrieval::mmr_select(index, query.text, provider_, rcfg);
    }
    Rng demo_rng(mix_seed(query_seed, 0xD3));
    demo_rng.shuffle(demos);
    demos = retrieval::trim_to_budget(config_.template_spec, config_.tagset, block,
                                      std::move(demos), query.text, label_map,
                                      backend_);

    auto gold_it = label_map.find(query.label);
    if (gold_it == label_map.end()) {
      throw LabelMapError("no descriptor for label: " + query.label);
    }
    const std::optional<char> gold_letter = block.letter_for(gold_it->second);
    if (!gold_letter.has_value()) {
      throw TrainingError("episode query label missing from its own classes");
    }

    TrainingEpisode episode;
    episode.prompt = markup::render_prompt(
        config_.template_spec, config_.tagset, block, demos, query.text, label_map,
        backend_.tokenizer(), gold_letter);
    episode.target = model::target_for_letter(backend_, *gold_letter);
    episode.gold_letter = *gold_letter;
    episode.answerable = true;
    return episode;
  }

 private:
  void sample_next_episode() {
    const std::uint64_t episode_seed = mix_seed(config_.seed, episode_counter_);
    // Round-robin over specs: one full cycle visits each spec once, so a
    // block of specs.size() * episodes_per_spec episodes draws exactly
    // episodes_per_spec from each configuration.
    const std::size_t spec_idx = episode_counter_ % specs_.size();
    ++episode_counter_;

    Rng rng(episode_seed);
    current_task_ = weighted_pick(weights_, rng);
    current_ = data::sample_episode(splits_[current_task_], specs_[spec_idx],
                                    rng.next());
    query_cursor_ = 0;
  }

  std::vector<data::EpisodeSpec> specs_;
  int episodes_per_spec_;
  int retrieval_k_;
  const retrieval::EmbeddingProvider& provider_;
  WarmupConfig config_;
  const model::Backend& backend_;
  std::vector<data::DatasetSplit> splits_;
  std::vector<markup::LabelMap> label_maps_;
  std::vector<double> weights_;
  data::Episode current_;
  std::size_t current_task_ = 0;
  std::size_t query_cursor_ = 0;
  std::uint64_t episode_counter_ = 0;
};

}  // namespace

std::unique_ptr<EpisodeStream> build_intent_stream(
    const WarmupTaskPool& pool, const retrieval::EmbeddingProvider& provider,
    const retrieval::RetrievalConfig& retrieval_cfg, const WarmupConfig& config,
    const model::Backend& backend) {
  return std::make_unique<IntentMmrStream>(pool, provider, retrieval_cfg, config,
                                           backend);
}

std::unique_ptr<EpisodeStream> build_episodic_stream(
    const WarmupTaskPool& pool, std::vector<data::EpisodeSpec> specs,
    int episodes_per_spec, int retrieval_k,
    const retrieval::EmbeddingProvider& provider, const WarmupConfig& config,
    const model::Backend& backend) {
  return std::make_unique<EpisodicStream>(pool, std::move(specs), episodes_per_spec,
                                          retrieval_k, provider, config, backend);
}

TrainResult train(const model::Backend& backend, model::SoftTokenBank bank,
                  EpisodeStream& stream, const WarmupConfig& config) {
  if (config.steps < 0) throw ConfigError("steps must be >= 0");
  if (config.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (config.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");

  TrainResult result;
  result.loss_trace.reserve(static_cast<std::size_t>(config.steps));

  Eigen::MatrixXd adam_m, adam_v;
  if (config.optimizer == Optimizer::adam) {
    adam_m = Eigen::MatrixXd::Zero(bank.rows.rows(), bank.rows.cols());
    adam_v = Eigen::MatrixXd::Zero(bank.rows.rows(), bank.rows.cols());
  }

  for (int step = 0; step < config.steps; ++step) {
    Eigen::MatrixXd grads = Eigen::MatrixXd::Zero(bank.rows.rows(), bank.rows.cols());
    double loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const TrainingEpisode episode = stream.next();
      const model::ForwardResult forward =
          backend.forward_loss(bank, episode.prompt, episode.target);
      grads += forward.grads;
      loss += forward.loss;
    }
    const double inv_batch = 1.0 / config.batch_size;
    grads *= inv_batch;
    loss *= inv_batch;

    if (!std::isfinite(loss)) {
      throw TrainingError("loss diverged at step " + std::to_string(step));
    }
    result.loss_trace.push_back(loss);

    if (config.optimizer == Optimizer::sgd) {
      bank.rows -= config.learning_rate * grads;
    } else {
      const double t = step + 1;
      adam_m = config.adam_beta1 * adam_m + (1.0 - config.adam_beta1) * grads;
      adam_v = config.adam_beta2 * adam_v +
               (1.0 - config.adam_beta2) * grads.array().square().matrix();
      const double bias1 = 1.0 - std::pow(config.adam_beta1, t);
      const double bias2 = 1.0 - std::pow(config.adam_beta2, t);
      bank.rows -= (config.learning_rate *
                    ((adam_m / bias1).array() /
                     ((adam_v / bias2).array().sqrt() + config.adam_eps)))
                       .matrix();
    }
  }

  bank.meta.seed = config.seed;
  bank.meta.steps += config.steps;
  result.bank = std::move(bank);
  return result;
}

}  // namespace iclmark::warmup
