#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "iclmark/backend.hpp"
#include "iclmark/markup.hpp"

namespace iclmark::retrieval {

/// Deterministic text -> vector contract. The same text must always embed
/// to the same vector.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual Eigen::VectorXd embed(std::string_view text) const = 0;
  virtual int dim() const = 0;
  virtual bool normalized() const = 0;
  /// Stable identifier recorded with built indexes for cache invalidation.
  virtual std::string id() const = 0;
};

/// Hashed character-trigram embedder. Needs no model download, is fully
/// deterministic, and gives cosine similarities that track text overlap,
/// which is all the retrieval test suite needs.
class HashedEmbedder final : public EmbeddingProvider {
 public:
  explicit HashedEmbedder(int dim = 64);
  Eigen::VectorXd embed(std::string_view text) const override;
  int dim() const override { return dim_; }
  bool normalized() const override { return true; }
  std::string id() const override;

 private:
  int dim_;
};

/// Looks vectors up from a table computed offline (e.g. by a sentence
/// encoder). Unknown texts raise a ProviderError naming the text.
class PrecomputedEmbedder final : public EmbeddingProvider {
 public:
  static PrecomputedEmbedder load(const std::filesystem::path& jsonl_path);

  Eigen::VectorXd embed(std::string_view text) const override;
  int dim() const override { return dim_; }
  bool normalized() const override { return normalized_; }
  std::string id() const override { return id_; }

 private:
  PrecomputedEmbedder() = default;
  std::map<std::string, Eigen::VectorXd, std::less<>> table_;
  int dim_ = 0;
  bool normalized_ = false;
  std::string id_;
};

/// Immutable brute-force index over a demonstration pool: one vector per
/// demonstration, payloads kept alongside.
class VectorIndex {
 public:
  static VectorIndex build(const std::vector<markup::Demonstration>& pool,
                           const EmbeddingProvider& provider);

  std::size_t size() const { return payloads_.size(); }
  const Eigen::MatrixXd& vectors() const { return vectors_; }
  const markup::Demonstration& payload(std::size_t i) const { return payloads_[i]; }
  const std::string& provider_id() const { return provider_id_; }

  void save(const std::filesystem::path& path) const;
  static VectorIndex load(const std::filesystem::path& path);

 private:
  VectorIndex() = default;
  Eigen::MatrixXd vectors_;  // pool size x dim
  std::vector<markup::Demonstration> payloads_;
  std::string provider_id_;
};

struct RetrievalConfig {
  int k = 9;
  double lambda = 0.5;  // relevance vs diversity trade-off

  void validate() const;
};

/// Greedy maximal-marginal-relevance selection.
///
/// The first pick maximizes cosine(query, d); every later pick maximizes
/// lambda*cos(q, d) - (1-lambda)*max over selected s of cos(d, s) among the
/// remaining pool. Ties go to the lowest pool index. Returns
/// min(k, pool size) indices in selection order.
std::vector<std::size_t> mmr_select_indices(const VectorIndex& index,
                                            std::string_view query,
                                            const EmbeddingProvider& provider,
                                            const RetrievalConfig& cfg);

std::vector<markup::Demonstration> mmr_select(const VectorIndex& index,
                                              std::string_view query,
                                              const EmbeddingProvider& provider,
                                              const RetrievalConfig& cfg);

/// Option block from the labels of the selected demonstrations:
/// descriptors deduplicated in selection order, permuted by seed, NOTA
/// appended when requested.
markup::OptionBlock rescope_options(const std::vector<markup::Demonstration>& selected,
                                    const markup::LabelMap& label_map,
                                    bool include_nota, std::uint64_t seed);

/// Drops demonstrations from the lowest MMR rank upward until the rendered
/// prompt fits the backend's context budget. The option block is not
/// recomputed, so trimming never changes the label space.
std::vector<markup::Demonstration> trim_to_budget(
    const markup::TemplateSpec& tmpl, const markup::TagSet& tags,
    const markup::OptionBlock& option_block,
    std::vector<markup::Demonstration> selected, std::string_view query,
    const markup::LabelMap& label_map, const model::Backend& backend);

}  // namespace iclmark::retrieval
