#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace iclmark {

/// Incremental SHA-256, hex-encoded output. Backed by OpenSSL.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t len);
  void update(std::string_view text) { update(text.data(), text.size()); }

  /// Finalizes and returns the digest as lowercase hex. Call once.
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view data);

}  // namespace iclmark
