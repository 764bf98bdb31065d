#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclmark/markup.hpp"
#include "iclmark/tokenizer.hpp"

namespace iclmark::model {

enum class InitStrategy { random, anneal };

std::string to_string(InitStrategy s);
InitStrategy init_strategy_from_string(std::string_view s);

struct TagRange {
  int begin = 0;
  int width = 0;
};

struct BankMetadata {
  std::string base_model_id;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  InitStrategy init = InitStrategy::random;
  std::string base_param_digest;

  bool operator==(const BankMetadata&) const = default;
};

/// The only trainable state in the system: one embedding row per soft
/// token. Rows are laid out in tag-set order; `tag_offsets` maps each tag
/// to its contiguous row range.
struct SoftTokenBank {
  Eigen::MatrixXd rows;  // total_width x embedding_dim
  std::map<std::string, TagRange> tag_offsets;
  BankMetadata meta;

  int total_width() const { return static_cast<int>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }

  /// Row index for position `pos` of `tag`; throws on unknown tag or
  /// out-of-range position.
  int row_of(const std::string& tag, int pos) const;

  /// Bitwise equality of the trainable rows.
  bool rows_equal(const SoftTokenBank& other) const;
};

/// Probabilities over option letters at the first generation position.
struct OptionScore {
  enum class Normalization { first_position_letter_softmax };

  std::map<char, double> per_letter;
  Normalization normalization = Normalization::first_position_letter_softmax;
};

struct ForwardResult {
  double loss = 0.0;
  Eigen::MatrixXd grads;  // same shape as the bank's rows
};

/// Abstract sequence-to-sequence backend. All base parameters are frozen;
/// the trainable soft rows travel in and out through the SoftTokenBank, so
/// every member function is const and inference calls are safe to run
/// concurrently against one (backend, bank) pair.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const Tokenizer& tokenizer() const = 0;
  virtual int context_budget() const = 0;
  virtual int embedding_dim() const = 0;
  virtual std::string model_id() const = 0;

  /// Digest of all frozen parameters, fixed at construction.
  virtual const std::string& base_param_digest() const = 0;
  /// Re-hashes the live parameters; equal to base_param_digest() unless
  /// something has violated the freezing contract.
  virtual std::string recompute_digest() const = 0;

  /// Frozen embedding row of a base-vocabulary token (used by anneal init).
  virtual Eigen::VectorXd token_embedding(int token_id) const = 0;
  /// Standard deviation of the backend's embedding initialization
  /// distribution (used by random init).
  virtual double embedding_init_std() const = 0;

  /// Teacher-forced cross-entropy of `target_ids` given the prompt, plus
  /// the gradient restricted to the bank rows. Gradient support is exactly
  /// the prompt's soft-token occurrences; no base parameter is touched.
  virtual ForwardResult forward_loss(const SoftTokenBank& bank,
                                     const markup::RenderedPrompt& prompt,
                                     std::span<const int> target_ids) const = 0;

  /// Unconstrained argmax decoding until end-of-sequence or max_len.
  virtual std::string greedy_decode(const SoftTokenBank& bank,
                                    const markup::RenderedPrompt& prompt,
                                    int max_len) const = 0;

  /// Softmax over the first-position logits restricted to the given
  /// letters. Each letter must tokenize to a single token.
  virtual OptionScore score_options(const SoftTokenBank& bank,
                                    const markup::RenderedPrompt& prompt,
                                    std::span<const char> letters) const = 0;
};

/// Creates the trainable bank for a tag set.
///
/// random: rows are drawn from the backend's embedding initialization
/// distribution with the given seed. anneal: rows are copied from the
/// embeddings of each tag's source phrase; extra phrase tokens are
/// truncated and short phrases cycle to fill the tag's width.
SoftTokenBank extend_vocabulary(
    const Backend& backend, const markup::TagSet& tags, InitStrategy strategy,
    std::uint64_t seed,
    const std::map<std::string, std::string>* source_phrases = nullptr);

/// Source phrases for anneal init, taken from a stock handwritten set.
std::map<std::string, std::string> anneal_phrases(markup::TemplateDomain domain,
                                                  int handwritten_index);

/// Training target for a gold letter: the letter token followed by eos.
std::vector<int> target_for_letter(const Backend& backend, char letter);

}  // namespace iclmark::model
