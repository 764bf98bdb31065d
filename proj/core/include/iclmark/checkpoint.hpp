#pragma once

#include <filesystem>

#include "iclmark/backend.hpp"

namespace iclmark::model {

/// Writes the bank to a binary container: JSON header (metadata, tag
/// offsets, declared float width) followed by the rows in row-major
/// float64. load(save(b)) reproduces b bit-exactly.
void save_checkpoint(const SoftTokenBank& bank, const std::filesystem::path& path);

SoftTokenBank load_checkpoint(const std::filesystem::path& path);

/// Load plus provenance verification against the active backend. On a
/// digest mismatch a warning is printed to stderr and *digest_ok (when
/// given) is set to false; the bank is still returned.
SoftTokenBank load_checkpoint(const std::filesystem::path& path,
                              const Backend& backend, bool* digest_ok);

}  // namespace iclmark::model
