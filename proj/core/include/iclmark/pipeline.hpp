#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclmark/backend.hpp"
#include "iclmark/data.hpp"
#include "iclmark/eval.hpp"
#include "iclmark/markup.hpp"
#include "iclmark/retrieval.hpp"

namespace iclmark::eval {

struct EvalInstance {
  std::string query;
  std::string gold_label;  // empty for out-of-scope queries
  bool is_oos = false;
};

/// The retrieval-controlled prediction path: select demonstrations with
/// MMR, re-scope the options from their labels, trim to the context
/// budget, render, decode greedily and score the NOTA probability.
///
/// Per-query randomness (option permutations, demo shuffles) derives from
/// (suite seed, query index), so results do not depend on evaluation
/// order or parallelism.
struct Pipeline {
  const model::Backend* backend = nullptr;
  const model::SoftTokenBank* bank = nullptr;
  markup::TemplateSpec template_spec;
  markup::TagSet tagset;
  const retrieval::VectorIndex* index = nullptr;
  const retrieval::EmbeddingProvider* provider = nullptr;
  retrieval::RetrievalConfig retrieval_cfg;
  markup::LabelMap label_map;
  bool include_nota = true;
  /// rank order keeps the MMR ordering; otherwise demos are shuffled
  /// per query (the episodic convention)
  bool demos_in_rank_order = true;
  int decode_max_len = 4;

  PredictionRecord predict(const EvalInstance& instance, std::uint64_t query_id,
                           std::uint64_t suite_seed) const;
};

std::vector<PredictionRecord> run_pipeline(const Pipeline& pipeline,
                                           std::span<const EvalInstance> suite,
                                           std::uint64_t suite_seed);

EvalReport evaluate_closed(const Pipeline& pipeline,
                           std::span<const EvalInstance> suite,
                           std::uint64_t suite_seed);

OOSReport evaluate_open_world(const Pipeline& pipeline,
                              std::span<const EvalInstance> suite, OosKind kind,
                              std::optional<double> threshold,
                              std::uint64_t suite_seed);

std::pair<double, ThresholdCurve> tune_threshold(
    const Pipeline& pipeline, std::span<const EvalInstance> suite,
    std::span<const double> grid, std::uint64_t suite_seed);

/// Episode-structured evaluation (no retrieval index): every episode's
/// classes form the option block and its supports are the demonstrations,
/// MMR-reduced to retrieval_k when they overflow it (0 keeps all).
std::vector<PredictionRecord> run_episodic(
    const Pipeline& pipeline, const data::DatasetSplit& split,
    const data::EpisodeSpec& spec, int episodes, int retrieval_k,
    std::uint64_t suite_seed);

}  // namespace iclmark::eval
