#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "iclmark/backend.hpp"
#include "iclmark/markup.hpp"
#include "iclmark/retrieval.hpp"
#include "iclmark/rng.hpp"
#include "iclmark/seq2seq.hpp"

using namespace iclmark;

namespace {

std::vector<markup::Demonstration> make_pool(int n) {
  Rng rng(17);
  std::vector<markup::Demonstration> pool;
  pool.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::string text;
    const int words = 4 + static_cast<int>(rng.below(6));
    for (int w = 0; w < words; ++w) {
      text += "tok" + std::to_string(rng.below(300)) + " ";
    }
    pool.push_back({text, "label_" + std::to_string(i % 20)});
  }
  return pool;
}

void BM_HashedEmbed(benchmark::State& state) {
  const retrieval::HashedEmbedder provider(64);
  const std::string text = "please transfer fifty dollars to my savings account";
  for (auto _ : state) {
    benchmark::DoNotOptimize(provider.embed(text));
  }
}
BENCHMARK(BM_HashedEmbed);

void BM_MmrSelect(benchmark::State& state) {
  const retrieval::HashedEmbedder provider(64);
  const auto pool = make_pool(static_cast<int>(state.range(0)));
  const retrieval::VectorIndex index = retrieval::VectorIndex::build(pool, provider);
  retrieval::RetrievalConfig cfg;
  cfg.k = 9;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        retrieval::mmr_select_indices(index, "tok42 tok87 tok13", provider, cfg));
  }
}
BENCHMARK(BM_MmrSelect)->Arg(128)->Arg(512)->Arg(2048);

void BM_RenderPrompt(benchmark::State& state) {
  const ByteTokenizer tokenizer;
  const markup::TagSet tags = markup::default_tagset(12);
  const markup::TemplateSpec tmpl = markup::default_soft_template();
  const markup::LabelMap lm{{"a", "alpha"}, {"b", "bravo"}, {"c", "carol"}};
  const markup::OptionBlock block =
      markup::build_option_block({"alpha", "bravo", "carol"}, true, 3);
  std::vector<markup::Demonstration> demos;
  const char* labels[] = {"a", "b", "c"};
  for (int i = 0; i < static_cast<int>(state.range(0)); ++i) {
    demos.push_back({"demonstration text number " + std::to_string(i),
                     labels[i % 3]});
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(markup::render_prompt(
        tmpl, tags, block, demos, "what is my balance", lm, tokenizer));
  }
}
BENCHMARK(BM_RenderPrompt)->Arg(0)->Arg(3)->Arg(9);

void BM_ForwardLoss(benchmark::State& state) {
  const model::Seq2SeqConfig cfg;
  const model::Seq2SeqBackend backend(cfg, 7);
  const markup::TagSet tags = markup::default_tagset(12);
  const model::SoftTokenBank bank =
      model::extend_vocabulary(backend, tags, model::InitStrategy::random, 42);
  const markup::TemplateSpec tmpl = markup::default_soft_template();
  const markup::LabelMap lm{{"a", "alpha"}, {"b", "bravo"}};
  const markup::OptionBlock block =
      markup::build_option_block({"alpha", "bravo"}, false, 3);
  const std::vector<markup::Demonstration> demos{
      {"pay my electric bill", "a"}, {"check account balance", "b"}};
  const markup::RenderedPrompt prompt = markup::render_prompt(
      tmpl, tags, block, demos, "send money to mom", lm, backend.tokenizer());
  const std::vector<int> target = model::target_for_letter(backend, 'A');
  for (auto _ : state) {
    benchmark::DoNotOptimize(backend.forward_loss(bank, prompt, target));
  }
}
BENCHMARK(BM_ForwardLoss);

void BM_GreedyDecode(benchmark::State& state) {
  const model::Seq2SeqConfig cfg;
  const model::Seq2SeqBackend backend(cfg, 7);
  const markup::TagSet tags = markup::default_tagset(12);
  const model::SoftTokenBank bank =
      model::extend_vocabulary(backend, tags, model::InitStrategy::random, 42);
  const markup::TemplateSpec tmpl = markup::default_soft_template();
  const markup::LabelMap lm{{"a", "alpha"}, {"b", "bravo"}};
  const markup::OptionBlock block =
      markup::build_option_block({"alpha", "bravo"}, false, 3);
  const markup::RenderedPrompt prompt = markup::render_prompt(
      tmpl, tags, block, {{"pay my bill", "a"}}, "send money", lm,
      backend.tokenizer());
  for (auto _ : state) {
    benchmark::DoNotOptimize(backend.greedy_decode(bank, prompt, 4));
  }
}
BENCHMARK(BM_GreedyDecode);

}  // namespace

BENCHMARK_MAIN();
