#include "iclmark/tokenizer.hpp"

#include "iclmark/errors.hpp"

namespace iclmark {

ByteTokenizer::ByteTokenizer(int vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size_ < kByteBase + 256) {
    throw ConfigError("byte tokenizer needs a vocabulary of at least 259 ids");
  }
}

std::vector<int> ByteTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char b : text) ids.push_back(byte_id(b));
  return ids;
}

std::string ByteTokenizer::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= kByteBase && id < kByteBase + 256) {
      out.push_back(static_cast<char>(id - kByteBase));
    }
    // pad/eos/unk and reserved ids carry no text
  }
  return out;
}

std::string ByteTokenizer::id() const {
  return "byte-v1/" + std::to_string(vocab_size_);
}

}  // namespace iclmark
