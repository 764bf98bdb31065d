#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "iclmark/backend.hpp"
#include "iclmark/data.hpp"
#include "iclmark/markup.hpp"
#include "iclmark/retrieval.hpp"

namespace iclmark::warmup {

enum class Optimizer { sgd, adam };

std::string to_string(Optimizer o);
Optimizer optimizer_from_string(std::string_view s);

/// Warm-up hyperparameters. The learning rate and step count have no
/// published reference values; the defaults here were established on the
/// synthetic validation tasks and every run records its resolved values in
/// its manifest.
struct WarmupConfig {
  double learning_rate = 0.5;
  int steps = 200;
  int batch_size = 4;
  std::uint64_t seed = 0;
  model::InitStrategy init = model::InitStrategy::random;
  markup::TagSet tagset;
  markup::TemplateSpec template_spec;
  bool include_nota = false;
  Optimizer optimizer = Optimizer::sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Default replication count for independent seeded training runs.
inline constexpr int kDefaultReplicationSeeds = 5;

/// Strategy selection rule: anneal when the template carries a NOTA option
/// but the task is not explicitly open-world, random otherwise.
model::InitStrategy default_init_strategy(bool include_nota, bool open_world);

/// One warm-up task: inputs drawn from one split, demonstrations retrieved
/// from another.
struct PoolTask {
  std::string dataset;
  data::DatasetSplit input_source;
  data::DatasetSplit demo_pool;
  double weight = 1.0;
};

/// The collection of related training tasks. The evaluation target is
/// withheld: constructing a pool that contains the target dataset is an
/// error.
class WarmupTaskPool {
 public:
  WarmupTaskPool(std::vector<PoolTask> tasks, std::string target_dataset);

  const std::vector<PoolTask>& tasks() const { return tasks_; }
  const std::string& target_dataset() const { return target_dataset_; }

 private:
  std::vector<PoolTask> tasks_;
  std::string target_dataset_;
};

struct TrainingEpisode {
  markup::RenderedPrompt prompt;
  std::vector<int> target;
  char gold_letter = 'A';
  bool answerable = true;
};

/// Deterministic source of training episodes.
class EpisodeStream {
 public:
  virtual ~EpisodeStream() = default;
  virtual TrainingEpisode next() = 0;
};

/// Retrieval-controlled stream for intent-style pools: one input per
/// episode, options re-scoped from the MMR selection; when the gold label
/// is not retrieved the target falls back to the NOTA letter (episodes
/// with no NOTA and no gold are skipped).
std::unique_ptr<EpisodeStream> build_intent_stream(
    const WarmupTaskPool& pool, const retrieval::EmbeddingProvider& provider,
    const retrieval::RetrievalConfig& retrieval_cfg, const WarmupConfig& config,
    const model::Backend& backend);

/// Episode-sampled stream: round-robins over the given way/shot
/// configurations, drawing `episodes_per_spec` episodes from each before
/// wrapping. Demonstration order is shuffled per query; when retrieval_k
/// is positive and the supports overflow it, the top-k MMR selection is
/// used instead of the full support set.
std::unique_ptr<EpisodeStream> build_episodic_stream(
    const WarmupTaskPool& pool, std::vector<data::EpisodeSpec> specs,
    int episodes_per_spec, int retrieval_k,
    const retrieval::EmbeddingProvider& provider, const WarmupConfig& config,
    const model::Backend& backend);

struct TrainResult {
  model::SoftTokenBank bank;
  std::vector<double> loss_trace;
};

/// Runs `config.steps` optimizer updates on the bank rows. Base parameters
/// are never touched; a non-finite loss aborts with the failing step index.
TrainResult train(const model::Backend& backend, model::SoftTokenBank bank,
                  EpisodeStream& stream, const WarmupConfig& config);

}  // namespace iclmark::warmup
