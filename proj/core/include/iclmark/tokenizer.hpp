#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace iclmark {

/// Text <-> token-id mapping used by a backend. Implementations must be
/// deterministic: the same text always encodes to the same id sequence.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::vector<int> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const int> ids) const = 0;
  virtual int vocab_size() const = 0;
  virtual int pad_id() const = 0;
  virtual int eos_id() const = 0;
  /// Stable identifier recorded in manifests.
  virtual std::string id() const = 0;
};

/// Byte-level tokenizer for the compact reference backend.
///
/// Ids: 0 = pad, 1 = eos, 2 = unk, 3 + b for byte value b. The remaining
/// ids up to vocab_size() are reserved; the tokenizer never emits them and
/// decodes them to nothing. Every single character, in particular every
/// capital option letter, is exactly one token.
class ByteTokenizer final : public Tokenizer {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kEosId = 1;
  static constexpr int kUnkId = 2;
  static constexpr int kByteBase = 3;

  explicit ByteTokenizer(int vocab_size = 1024);

  std::vector<int> encode(std::string_view text) const override;
  std::string decode(std::span<const int> ids) const override;
  int vocab_size() const override { return vocab_size_; }
  int pad_id() const override { return kPadId; }
  int eos_id() const override { return kEosId; }
  std::string id() const override;

  static int byte_id(unsigned char b) { return kByteBase + static_cast<int>(b); }

 private:
  int vocab_size_;
};

}  // namespace iclmark
