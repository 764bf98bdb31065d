#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>

#include "iclmark/backend.hpp"

namespace iclmark::model {

/// Architecture of the compact encoder-decoder backend. The defaults give
/// the CI-sized model: 2+2 layers, 64-dim, byte-level vocabulary. Larger
/// instances of the same architecture can be saved and reloaded, which is
/// how externally trained checkpoints plug in.
struct Seq2SeqConfig {
  int vocab = 1024;
  int d_model = 64;
  int heads = 4;
  int ff = 128;
  int enc_layers = 2;
  int dec_layers = 2;
  int context_budget = 512;
  int max_positions = 512;
  double emb_init_std = 0.1;
  std::string model_id = "toy-s2s";

  void validate() const;
};

class Seq2SeqBackend final : public Backend {
 public:
  Seq2SeqBackend(const Seq2SeqConfig& config, std::uint64_t weight_seed,
                 std::unique_ptr<Tokenizer> tokenizer = nullptr);
  ~Seq2SeqBackend() override;

  Seq2SeqBackend(Seq2SeqBackend&&) noexcept;
  Seq2SeqBackend& operator=(Seq2SeqBackend&&) noexcept;

  /// Round-trips the full parameter set bit-exactly.
  void save(const std::filesystem::path& path) const;
  static Seq2SeqBackend load(const std::filesystem::path& path);

  const Seq2SeqConfig& config() const;

  const Tokenizer& tokenizer() const override;
  int context_budget() const override;
  int embedding_dim() const override;
  std::string model_id() const override;
  const std::string& base_param_digest() const override;
  std::string recompute_digest() const override;
  Eigen::VectorXd token_embedding(int token_id) const override;
  double embedding_init_std() const override;

  ForwardResult forward_loss(const SoftTokenBank& bank,
                             const markup::RenderedPrompt& prompt,
                             std::span<const int> target_ids) const override;
  std::string greedy_decode(const SoftTokenBank& bank,
                            const markup::RenderedPrompt& prompt,
                            int max_len) const override;
  OptionScore score_options(const SoftTokenBank& bank,
                            const markup::RenderedPrompt& prompt,
                            std::span<const char> letters) const override;

 private:
  struct Impl;
  explicit Seq2SeqBackend(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace iclmark::model
