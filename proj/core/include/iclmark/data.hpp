#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iclmark/markup.hpp"
#include "iclmark/tokenizer.hpp"

namespace iclmark::data {

struct Example {
  std::string text;
  std::string label;

  bool operator==(const Example&) const = default;
};

enum class SplitRole { train, validation, test };

std::string to_string(SplitRole role);
SplitRole split_role_from_string(std::string_view s);

struct DatasetSplit {
  std::string name;
  SplitRole role = SplitRole::train;
  std::vector<Example> examples;
  markup::LabelMap label_map;

  /// Sorted distinct labels present in the split.
  std::vector<std::string> classes() const;
  std::size_t size() const { return examples.size(); }
};

enum class PreprocessProfile { none, intent, huffpost };

PreprocessProfile preprocess_profile_from_string(std::string_view s);
std::string to_string(PreprocessProfile profile);

/// Dataset manifest: a JSON document naming the dataset, the split role,
/// the records file (line-delimited JSON with "text" and "label"), the
/// preprocessing profile, and optionally the full label inventory.
struct DatasetManifest {
  std::string dataset;
  SplitRole role = SplitRole::train;
  std::filesystem::path path;  // relative paths resolve against the manifest
  PreprocessProfile profile = PreprocessProfile::none;
  std::vector<std::string> labels;  // optional; validates coverage when given

  static DatasetManifest load(const std::filesystem::path& manifest_path);
};

DatasetSplit load_dataset(const std::filesystem::path& manifest_path);
DatasetSplit load_dataset(const DatasetManifest& manifest,
                          const std::filesystem::path& base_dir);

/// Human-readable descriptor for an intent label: underscores become
/// spaces, ATIS labels drop their dataset prefix and fix "flight no",
/// SNIPS labels split per the fixed seven-entry table.
std::string preprocess_intent_label(std::string_view raw, std::string_view dataset);

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 1;
  int queries_per_class = 1;
};

struct Episode {
  std::vector<std::string> classes;
  std::vector<std::vector<Example>> supports;  // classes.size() x k_shot
  std::vector<Example> queries;                // one per class per query slot
  std::uint64_t option_seed = 0;

  std::vector<Example> all_supports() const;
};

/// Seed-deterministic N-way K-shot episode: chooses classes, then one
/// query per class, then K disjoint supports per class.
Episode sample_episode(const DatasetSplit& split, const EpisodeSpec& spec,
                       std::uint64_t seed);

/// Keeps only examples whose tokenized length fits max_tokens.
DatasetSplit ledgar_filter(const DatasetSplit& split, const Tokenizer& tokenizer,
                           int max_tokens = 75);

/// K examples per class, seed-deterministic; the few-shot demo pools for
/// open-world draws.
DatasetSplit kshot_draw(const DatasetSplit& split, int k, std::uint64_t seed);

/// Verifies that class inventories across splits do not overlap.
void validate_disjoint_classes(std::span<const DatasetSplit> splits);

}  // namespace iclmark::data
