#include "iclmark/pipeline.hpp"

#include "iclmark/errors.hpp"
#include "iclmark/rng.hpp"

namespace iclmark::eval {

namespace {

PredictionRecord finish_prediction(const Pipeline& pipeline,
                                   const markup::OptionBlock& block,
                                   const markup::RenderedPrompt& prompt,
                                   const EvalInstance& instance,
                                   std::uint64_t query_id) {
  PredictionRecord record;
  record.query_id = query_id;
  record.gold_is_oos = instance.is_oos;
  if (!instance.is_oos) {
    auto it = pipeline.label_map.find(instance.gold_label);
    if (it == pipeline.label_map.end()) {
      throw LabelMapError("no descriptor for label: " + instance.gold_label);
    }
    record.gold_descriptor = it->second;
    record.task_answerable = block.has_descriptor(record.gold_descriptor);
  }

  record.generated =
      pipeline.backend->greedy_decode(*pipeline.bank, prompt, pipeline.decode_max_len);
  record.resolved = resolve_prediction(record.generated, block);

  if (auto nota = block.nota_letter()) {
    const std::vector<char> letters = block.letters();
    const model::OptionScore score =
        pipeline.backend->score_options(*pipeline.bank, prompt, letters);
    record.nota_probability = score.per_letter.at(*nota);
  }
  return record;
}

}  // namespace

PredictionRecord Pipeline::predict(const EvalInstance& instance,
                                   std::uint64_t query_id,
                                   std::uint64_t suite_seed) const {
  if (backend == nullptr || bank == nullptr) {
    throw ConfigError("pipeline needs a backend and a bank");
  }
  if (index == nullptr || provider == nullptr) {
    throw ConfigError("pipeline needs a retrieval index and provider");
  }

  const std::uint64_t query_seed = mix_seed(suite_seed, query_id);

  std::vector<markup::Demonstration> selected =
      retrieval::mmr_select(*index, instance.query, *provider, retrieval_cfg);
  const markup::OptionBlock block =
      retrieval::rescope_options(selected, label_map, include_nota, query_seed);
  if (!demos_in_rank_order) {
    Rng rng(mix_seed(query_seed, 0xD3));
    rng.shuffle(selected);
  }
  selected = retrieval::trim_to_budget(template_spec, tagset, block,
                                       std::move(selected), instance.query,
                                       label_map, *backend);
  const markup::RenderedPrompt prompt =
      markup::render_prompt(template_spec, tagset, block, selected, instance.query,
                            label_map, backend->tokenizer());
  return finish_prediction(*this, block, prompt, instance, query_id);
}

std::vector<PredictionRecord> run_pipeline(const Pipeline& pipeline,
                                           std::span<const EvalInstance> suite,
                                           std::uint64_t suite_seed) {
  std::vector<PredictionRecord> records;
  records.reserve(suite.size());
  for (std::size_t i = 0; i < suite.size(); ++i) {
    records.push_back(pipeline.predict(suite[i], i, suite_seed));
  }
  return records;
}

EvalReport evaluate_closed(const Pipeline& pipeline,
                           std::span<const EvalInstance> suite,
                           std::uint64_t suite_seed) {
  return aggregate_closed(run_pipeline(pipeline, suite, suite_seed));
}

OOSReport evaluate_open_world(const Pipeline& pipeline,
                              std::span<const EvalInstance> suite, OosKind kind,
                              std::optional<double> threshold,
                              std::uint64_t suite_seed) {
  if (kind == OosKind::id_oos && !threshold.has_value()) {
    throw ConfigError("id-oos evaluation requires a threshold");
  }
  return aggregate_open_world(run_pipeline(pipeline, suite, suite_seed), kind,
                              threshold);
}

std::pair<double, ThresholdCurve> tune_threshold(
    const Pipeline& pipeline, std::span<const EvalInstance> suite,
    std::span<const double> grid, std::uint64_t suite_seed) {
  return tune_threshold(run_pipeline(pipeline, suite, suite_seed), grid);
}

std::vector<PredictionRecord> run_episodic(
    const Pipeline& pipeline, const data::DatasetSplit& split,
    const data::EpisodeSpec& spec, int episodes, int retrieval_k,
    std::uint64_t suite_seed) {
  if (pipeline.backend == nullptr || pipeline.bank == nullptr) {
    throw ConfigError("pipeline needs a backend and a bank");
  }
  if (episodes < 1) throw ConfigError("need at least one episode");

  Pipeline scoped = pipeline;
  scoped.label_map = split.label_map;

  std::vector<PredictionRecord> records;
  std::uint64_t query_id = 0;
  for (int e = 0; e < episodes; ++e) {
    const data::Episode episode =
        data::sample_episode(split, spec, mix_seed(suite_seed, e));

    std::vector<std::string> descriptors;
    for (const std::string& cls : episode.classes) {
      auto it = split.label_map.find(cls);
      if (it == split.label_map.end()) throw LabelMapError("no descriptor for " + cls);
      descriptors.push_back(it->second);
    }

    for (std::size_t q = 0; q < episode.queries.size(); ++q) {
      const data::Example& query = episode.queries[q];
      const std::uint64_t query_seed = mix_seed(episode.option_seed, q);
      const markup::OptionBlock block = markup::build_option_block(
          descriptors, pipeline.include_nota, query_seed);

      std::vector<markup::Demonstration> demos;
      for (const data::Example& s : episode.all_supports()) {
        demos.push_back({s.text, s.label});
      }
      if (retrieval_k > 0 && static_cast<int>(demos.size()) > retrieval_k) {
        if (pipeline.provider == nullptr) {
          throw ConfigError("episodic retrieval needs an embedding provider");
        }
        retrieval::RetrievalConfig rcfg = pipeline.retrieval_cfg;
        rcfg.k = retrieval_k;
        const retrieval::VectorIndex index =
            retrieval::VectorIndex::build(demos, *pipeline.provider);
        demos = retrieval::mmr_select(index, query.text, *pipeline.provider, rcfg);
      }
      if (!pipeline.demos_in_rank_order) {
        Rng rng(mix_seed(query_seed, 0xD3));
        rng.shuffle(demos);
      }
      demos = retrieval::trim_to_budget(pipeline.template_spec, pipeline.tagset,
                                        block, std::move(demos), query.text,
                                        split.label_map, *pipeline.backend);
      const markup::RenderedPrompt prompt = markup::render_prompt(
          pipeline.template_spec, pipeline.tagset, block, demos, query.text,
          split.label_map, pipeline.backend->tokenizer());

      EvalInstance instance{query.text, query.label, false};
      records.push_back(
          finish_prediction(scoped, block, prompt, instance, query_id++));
    }
  }
  return records;
}

}  // namespace iclmark::eval
