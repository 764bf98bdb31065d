#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "iclmark/errors.hpp"
#include "iclmark/retrieval.hpp"
#include "iclmark/rng.hpp"
#include "test_helpers.hpp"

using namespace iclmark;
using namespace iclmark::retrieval;

namespace {

// Independent re-implementation of the greedy rule, recomputing every
// term from scratch at every step. The oracle for mmr_select.
std::vector<std::size_t> mmr_brute_force(const Eigen::MatrixXd& vectors,
                                         const Eigen::VectorXd& query, int k,
                                         double lambda) {
  const auto cosine = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
  };
  const auto n = static_cast<std::size_t>(vectors.rows());
  std::vector<std::size_t> selected;
  while (selected.size() < std::min(static_cast<std::size_t>(k), n)) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_i = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(selected.begin(), selected.end(), i) != selected.end()) continue;
      const Eigen::VectorXd di = vectors.row(static_cast<Eigen::Index>(i));
      double score;
      if (selected.empty()) {
        score = cosine(query, di);
      } else {
        double max_sel = -std::numeric_limits<double>::infinity();
        for (std::size_t s : selected) {
          max_sel = std::max(
              max_sel, cosine(di, vectors.row(static_cast<Eigen::Index>(s))));
        }
        score = lambda * cosine(query, di) - (1.0 - lambda) * max_sel;
      }
      if (score > best) {
        best = score;
        best_i = i;
      }
    }
    selected.push_back(best_i);
  }
  return selected;
}

// Provider whose vectors are scripted per text, for exact-geometry tests.
class ScriptedProvider final : public EmbeddingProvider {
 public:
  ScriptedProvider(int dim, std::map<std::string, Eigen::VectorXd> table)
      : dim_(dim), table_(std::move(table)) {}
  Eigen::VectorXd embed(std::string_view text) const override {
    auto it = table_.find(std::string(text));
    if (it == table_.end()) throw ProviderError("no vector for " + std::string(text));
    return it->second;
  }
  int dim() const override { return dim_; }
  bool normalized() const override { return false; }
  std::string id() const override { return "scripted"; }

 private:
  int dim_;
  std::map<std::string, Eigen::VectorXd> table_;
};

}  // namespace

TEST_CASE("hashed embedder basics") {
  const HashedEmbedder provider(64);
  const Eigen::VectorXd a1 = provider.embed("transfer money to savings");
  const Eigen::VectorXd a2 = provider.embed("transfer money to savings");
  const Eigen::VectorXd b = provider.embed("weather forecast tomorrow");
  CHECK((a1 - a2).norm() == 0.0);
  CHECK(a1.norm() == doctest::Approx(1.0));
  CHECK(a1.dot(b) < 0.9);
  // overlapping text is closer than disjoint text
  const Eigen::VectorXd a3 = provider.embed("transfer money to checking");
  CHECK(a1.dot(a3) > a1.dot(b));
}

TEST_CASE("index build") {
  const HashedEmbedder provider(32);

  SUBCASE("pool of one") {
    const VectorIndex index = VectorIndex::build({{"hello", "a"}}, provider);
    CHECK(index.size() == 1);
    CHECK(index.provider_id() == provider.id());
  }
  SUBCASE("duplicate texts produce identical rows") {
    const VectorIndex index =
        VectorIndex::build({{"same text", "a"}, {"same text", "b"}}, provider);
    CHECK((index.vectors().row(0) - index.vectors().row(1)).norm() == 0.0);
  }
  SUBCASE("empty pool is an input error") {
    CHECK_THROWS_AS(VectorIndex::build({}, provider), InputError);
  }
  SUBCASE("one row per demonstration in a 77-class 10-shot pool") {
    std::vector<markup::Demonstration> pool;
    for (int c = 0; c < 77; ++c) {
      for (int s = 0; s < 10; ++s) {
        pool.push_back({"class " + std::to_string(c) + " sample " +
                            std::to_string(s),
                        "label_" + std::to_string(c)});
      }
    }
    CHECK(VectorIndex::build(pool, provider).size() == 770);
  }
}

TEST_CASE("index round-trips through its file") {
  const HashedEmbedder provider(16);
  const std::vector<markup::Demonstration> pool{
      {"alpha text", "a"}, {"bravo text", "b"}, {"carol text", "c"}};
  const VectorIndex index = VectorIndex::build(pool, provider);
  const auto path = std::filesystem::temp_directory_path() / "iclmark_idx.bin";
  index.save(path);
  const VectorIndex loaded = VectorIndex::load(path);
  std::filesystem::remove(path);

  CHECK(loaded.size() == index.size());
  CHECK(loaded.provider_id() == index.provider_id());
  CHECK((loaded.vectors() - index.vectors()).norm() == 0.0);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(loaded.payload(i) == index.payload(i));
  }
}

TEST_CASE("mmr selection") {
  const HashedEmbedder provider(64);

  SUBCASE("k >= pool returns the whole pool") {
    const std::vector<markup::Demonstration> pool{
        {"aa bb", "a"}, {"cc dd", "b"}, {"ee ff", "c"}};
    const VectorIndex index = VectorIndex::build(pool, provider);
    RetrievalConfig cfg;
    cfg.k = 10;
    const auto selected = mmr_select_indices(index, "aa", provider, cfg);
    CHECK(selected.size() == 3);
    std::vector<std::size_t> sorted = selected;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<std::size_t>{0, 1, 2});
  }

  SUBCASE("k = 1 is the nearest neighbour for any lambda") {
    const std::vector<markup::Demonstration> pool{
        {"transfer money now", "a"}, {"check the weather", "b"},
        {"play some jazz", "c"}, {"transfer money later", "a"}};
    const VectorIndex index = VectorIndex::build(pool, provider);
    std::vector<std::size_t> nn;
    for (double lambda : {0.0, 0.3, 1.0}) {
      RetrievalConfig cfg;
      cfg.k = 1;
      cfg.lambda = lambda;
      nn = mmr_select_indices(index, "transfer money now", provider, cfg);
      CHECK(nn.size() == 1);
      CHECK(nn[0] == 0);
    }
  }

  SUBCASE("ties go to the lowest pool index") {
    Eigen::VectorXd q(2), same(2), other(2);
    q << 1.0, 0.0;
    same << 1.0, 0.0;
    other << 0.0, 1.0;
    const ScriptedProvider scripted(
        2, {{"q", q}, {"d0", same}, {"d1", same}, {"d2", other}});
    // d0 and d1 are identical; d0 must win the first pick
    const VectorIndex index =
        VectorIndex::build({{"d0", "x"}, {"d1", "x"}, {"d2", "y"}}, scripted);
    RetrievalConfig cfg;
    cfg.k = 2;
    const auto selected = mmr_select_indices(index, "q", scripted, cfg);
    CHECK(selected[0] == 0);
    // second pick: d1 scores 0.5*1 - 0.5*1 = 0, d2 scores 0.5*0 - 0.5*0 = 0;
    // the tie again goes to the lower index
    CHECK(selected[1] == 1);
  }

  SUBCASE("selection is injective") {
    const std::vector<markup::Demonstration> pool{
        {"one", "a"}, {"two", "b"}, {"three", "c"}, {"four", "d"}, {"five", "e"}};
    const VectorIndex index = VectorIndex::build(pool, provider);
    RetrievalConfig cfg;
    cfg.k = 5;
    const auto selected = mmr_select_indices(index, "one two", provider, cfg);
    std::vector<std::size_t> sorted = selected;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  }

  SUBCASE("order is stable under payload relabeling") {
    std::vector<markup::Demonstration> pool{
        {"red car", "a"}, {"blue car", "b"}, {"red bus", "c"}, {"blue bus", "d"}};
    const VectorIndex i1 = VectorIndex::build(pool, provider);
    for (auto& d : pool) d.label = "relabeled_" + d.label;
    const VectorIndex i2 = VectorIndex::build(pool, provider);
    RetrievalConfig cfg;
    cfg.k = 3;
    CHECK(mmr_select_indices(i1, "red vehicle", provider, cfg) ==
          mmr_select_indices(i2, "red vehicle", provider, cfg));
  }

  SUBCASE("provider mismatch is rejected") {
    const VectorIndex index = VectorIndex::build({{"x", "a"}}, provider);
    const HashedEmbedder other(16);
    RetrievalConfig cfg;
    CHECK_THROWS_AS(mmr_select_indices(index, "x", other, cfg), ProviderError);
  }

  SUBCASE("config validation") {
    RetrievalConfig cfg;
    cfg.k = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.k = 1;
    cfg.lambda = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("mmr matches the brute-force oracle exactly") {
  Rng rng(2024);
  int trials = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(11));  // pool size <= 12
    const int dim = 4 + static_cast<int>(rng.below(5));
    std::vector<markup::Demonstration> pool;
    std::map<std::string, Eigen::VectorXd> table;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd v(dim);
      for (int d = 0; d < dim; ++d) v(d) = rng.normal();
      const std::string text = "d" + std::to_string(i);
      table[text] = v;
      pool.push_back({text, "l" + std::to_string(i % 3)});
    }
    Eigen::VectorXd q(dim);
    for (int d = 0; d < dim; ++d) q(d) = rng.normal();
    table["query"] = q;

    const ScriptedProvider provider(dim, table);
    const VectorIndex index = VectorIndex::build(pool, provider);

    static constexpr double kLambdas[] = {0.0, 0.3, 0.5, 0.7, 1.0};
    const double lambda = kLambdas[trial % 5];
    RetrievalConfig cfg;
    cfg.k = 1 + static_cast<int>(rng.below(5));  // k <= 5
    cfg.lambda = lambda;

    const auto got = mmr_select_indices(index, "query", provider, cfg);
    const auto expected = mmr_brute_force(index.vectors(), q, cfg.k, lambda);
    REQUIRE(got == expected);
    ++trials;
  }
  CHECK(trials >= 100);
}

TEST_CASE("rescope_options narrows the label space") {
  const markup::LabelMap lm{{"a", "alpha"}, {"b", "bravo"}, {"c", "carol"},
                            {"d", "delta"}, {"e", "echo"}};

  SUBCASE("nine demos, five distinct labels, NOTA on -> six options") {
    std::vector<markup::Demonstration> selected;
    const char* labels[] = {"a", "b", "c", "d", "e", "a", "b", "c", "d"};
    for (int i = 0; i < 9; ++i) selected.push_back({"t" + std::to_string(i), labels[i]});
    const markup::OptionBlock block = rescope_options(selected, lm, true, 5);
    CHECK(block.entries().size() == 6);
    CHECK(block.nota_letter() == 'F');
  }

  SUBCASE("all demos share a label, NOTA off -> one option") {
    const std::vector<markup::Demonstration> selected{
        {"x", "a"}, {"y", "a"}, {"z", "a"}};
    const markup::OptionBlock block = rescope_options(selected, lm, false, 5);
    CHECK(block.entries().size() == 1);
    CHECK(block.entries()[0].descriptor == "alpha");
  }

  SUBCASE("output size is bounded by k plus the NOTA slot") {
    Rng rng(7);
    for (int trial = 0; trial < 40; ++trial) {
      const int k = 1 + static_cast<int>(rng.below(9));
      std::vector<markup::Demonstration> selected;
      const char* keys = "abcde";
      for (int i = 0; i < k; ++i) {
        selected.push_back({"t" + std::to_string(i),
                            std::string(1, keys[rng.below(5)])});
      }
      const bool nota = rng.below(2) == 1;
      const markup::OptionBlock block = rescope_options(selected, lm, nota, trial);
      CHECK(block.entries().size() <= static_cast<std::size_t>(k) + (nota ? 1 : 0));
    }
  }

  SUBCASE("unmapped label") {
    CHECK_THROWS_AS(rescope_options({{"x", "zzz"}}, lm, false, 0), LabelMapError);
  }
  SUBCASE("empty selection") {
    CHECK_THROWS_AS(rescope_options({}, lm, false, 0), InputError);
  }
}

TEST_CASE("trim_to_budget drops from the lowest rank upward") {
  const markup::TagSet tags = markup::default_tagset(9);
  const markup::TemplateSpec tmpl = markup::default_soft_template();
  const markup::LabelMap lm = test::greek_label_map();
  const markup::OptionBlock block =
      markup::build_option_block({"alpha", "bravo", "carol"}, false, 1);
  const std::vector<markup::Demonstration> selected{
      {"first demo text", "a"}, {"second demo text", "b"}, {"third demo text", "c"}};

  const model::Seq2SeqBackend roomy = test::toy_backend(7, 512);
  const auto full_len =
      markup::render_prompt(tmpl, tags, block, selected, "the query", lm,
                            roomy.tokenizer())
          .size();
  const auto two_len =
      markup::render_prompt(tmpl, tags, block,
                            {selected.begin(), selected.begin() + 2}, "the query",
                            lm, roomy.tokenizer())
          .size();
  const auto none_len = markup::render_prompt(tmpl, tags, block, {}, "the query",
                                              lm, roomy.tokenizer())
                            .size();

  SUBCASE("already fits: unchanged") {
    const auto kept =
        trim_to_budget(tmpl, tags, block, selected, "the query", lm, roomy);
    CHECK(kept == selected);
  }

  SUBCASE("budget forcing removal of exactly one demo removes the last") {
    // between the 2-demo and 3-demo render lengths
    const model::Seq2SeqBackend tight =
        test::toy_backend(7, static_cast<int>((two_len + full_len) / 2));
    const auto kept =
        trim_to_budget(tmpl, tags, block, selected, "the query", lm, tight);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0] == selected[0]);
    CHECK(kept[1] == selected[1]);
  }

  SUBCASE("zero-demo render still over budget is an error") {
    const model::Seq2SeqBackend hopeless =
        test::toy_backend(7, static_cast<int>(none_len - 1));
    CHECK_THROWS_AS(
        trim_to_budget(tmpl, tags, block, selected, "the query", lm, hopeless),
        BudgetError);
  }
}

TEST_CASE("precomputed embedder") {
  const auto path = std::filesystem::temp_directory_path() / "iclmark_emb.jsonl";
  {
    std::ofstream out(path);
    out << R"({"text":"hello","vector":[1.0,0.0]})" << "\n";
    out << R"({"text":"world","vector":[0.0,1.0]})" << "\n";
  }
  const PrecomputedEmbedder provider = PrecomputedEmbedder::load(path);
  CHECK(provider.dim() == 2);
  CHECK(provider.normalized());
  CHECK(provider.embed("hello")(0) == 1.0);
  CHECK_THROWS_AS(provider.embed("unknown text"), ProviderError);
  std::filesystem::remove(path);
}
