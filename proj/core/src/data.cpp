#include "iclmark/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "iclmark/errors.hpp"
#include "iclmark/rng.hpp"

namespace iclmark::data {

std::string to_string(SplitRole role) {
  switch (role) {
    case SplitRole::train: return "train";
    case SplitRole::validation: return "validation";
    case SplitRole::test: return "test";
  }
  return "train";
}

SplitRole split_role_from_string(std::string_view s) {
  if (s == "train") return SplitRole::train;
  if (s == "validation") return SplitRole::validation;
  if (s == "test") return SplitRole::test;
  throw InputError("unknown split role: " + std::string(s));
}

std::string to_string(PreprocessProfile profile) {
  switch (profile) {
    case PreprocessProfile::none: return "none";
    case PreprocessProfile::intent: return "intent";
    case PreprocessProfile::huffpost: return "huffpost";
  }
  return "none";
}

PreprocessProfile preprocess_profile_from_string(std::string_view s) {
  if (s == "none") return PreprocessProfile::none;
  if (s == "intent") return PreprocessProfile::intent;
  if (s == "huffpost") return PreprocessProfile::huffpost;
  throw InputError("unknown preprocessing profile: " + std::string(s));
}

std::vector<std::string> DatasetSplit::classes() const {
  std::set<std::string> distinct;
  for (const Example& e : examples) distinct.insert(e.label);
  return {distinct.begin(), distinct.end()};
}

namespace {

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string underscores_to_spaces(std::string_view s) {
  std::string out(s);
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

std::string descriptor_for(std::string_view label, std::string_view dataset,
                           PreprocessProfile profile) {
  switch (profile) {
    case PreprocessProfile::none:
      return std::string(label);
    case PreprocessProfile::intent:
      return preprocess_intent_label(label, dataset);
    case PreprocessProfile::huffpost:
      return lowercase(label);
  }
  return std::string(label);
}

}  // namespace

std::string preprocess_intent_label(std::string_view raw,
                                    std::string_view dataset) {
  if (raw.empty()) throw InputError("intent label must be non-empty");
  const std::string name = lowercase(dataset);
  std::string label = lowercase(raw);

  if (name == "snips") {
    // Fixed split table for the seven concatenated SNIPS intents.
    static const std::map<std::string, std::string> kSnips = {
        {"addtoplaylist", "add to play list"},
        {"bookrestaurant", "book restaurant"},
        {"getweather", "get weather"},
        {"playmusic", "play music"},
        {"ratebook", "rate book"},
        {"searchcreativework", "search creative work"},
        {"searchscreeningevent", "search screening event"},
    };
    auto it = kSnips.find(label);
    if (it != kSnips.end()) return it->second;
    return underscores_to_spaces(label);
  }
  if (name == "atis") {
    if (label.rfind("atis_", 0) == 0) label = label.substr(5);
    label = underscores_to_spaces(label);
    if (label == "flight no") return "flight number";
    return label;
  }
  return underscores_to_spaces(label);
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read dataset manifest: " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  DatasetManifest manifest;
  try {
    manifest.dataset = j.at("dataset").get<std::string>();
    manifest.role = split_role_from_string(j.at("role").get<std::string>());
    manifest.path = j.at("path").get<std::string>();
    manifest.profile =
        preprocess_profile_from_string(j.value("preprocess", std::string("none")));
    if (j.contains("labels")) {
      manifest.labels = j.at("labels").get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed dataset manifest: " + std::string(e.what()));
  }
  return manifest;
}

DatasetSplit load_dataset(const DatasetManifest& manifest,
                          const std::filesystem::path& base_dir) {
  std::filesystem::path records_path = manifest.path;
  if (records_path.is_relative()) records_path = base_dir / records_path;

  std::ifstream in(records_path);
  if (!in) throw IoError("cannot read dataset records: " + records_path.string());

  const std::set<std::string> declared(manifest.labels.begin(),
                                       manifest.labels.end());

  DatasetSplit split;
  split.name = manifest.dataset;
  split.role = manifest.role;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError("bad record at line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    if (!record.contains("text") || !record.contains("label")) {
      throw InputError("record at line " + std::to_string(line_no) +
                       " is missing a text or label field");
    }
    Example example;
    example.text = record.at("text").get<std::string>();
    example.label = record.at("label").get<std::string>();
    if (example.text.empty()) {
      throw InputError("record at line " + std::to_string(line_no) +
                       " has empty text");
    }
    if (example.label.empty()) {
      throw InputError("record at line " + std::to_string(line_no) +
                       " has empty label");
    }
    if (!declared.empty() && declared.count(example.label) == 0) {
      throw InputError("record at line " + std::to_string(line_no) +
                       " has unknown label: " + example.label);
    }
    if (manifest.profile == PreprocessProfile::intent) {
      example.text = lowercase(example.text);
    }
    split.examples.push_back(std::move(example));
  }

  for (const Example& e : split.examples) {
    split.label_map[e.label] =
        descriptor_for(e.label, manifest.dataset, manifest.profile);
  }
  for (const std::string& label : manifest.labels) {
    split.label_map[label] =
        descriptor_for(label, manifest.dataset, manifest.profile);
  }
  return split;
}

DatasetSplit load_dataset(const std::filesystem::path& manifest_path) {
  const DatasetManifest manifest = DatasetManifest::load(manifest_path);
  return load_dataset(manifest, manifest_path.parent_path());
}

std::vector<Example> Episode::all_supports() const {
  std::vector<Example> out;
  for (const auto& per_class : supports) {
    out.insert(out.end(), per_class.begin(), per_class.end());
  }
  return out;
}

Episode sample_episode(const DatasetSplit& split, const EpisodeSpec& spec,
                       std::uint64_t seed) {
  if (spec.n_way < 1 || spec.k_shot < 1 || spec.queries_per_class < 1) {
    throw ConfigError("episode spec fields must be positive");
  }

  // Bucket examples per class, keeping file order within each bucket.
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < split.examples.size(); ++i) {
    by_class[split.examples[i].label].push_back(i);
  }
  const std::size_t needed =
      static_cast<std::size_t>(spec.k_shot + spec.queries_per_class);
  std::vector<std::string> eligible;
  for (const auto& [label, members] : by_class) {
    if (members.size() >= needed) eligible.push_back(label);
  }
  if (eligible.size() < static_cast<std::size_t>(spec.n_way)) {
    throw InputError("not enough classes with " + std::to_string(needed) +
                     "+ examples: need " + std::to_string(spec.n_way) + ", have " +
                     std::to_string(eligible.size()));
  }

  Rng rng(seed);
  rng.shuffle(eligible);
  eligible.resize(static_cast<std::size_t>(spec.n_way));

  Episode episode;
  episode.classes = eligible;
  episode.supports.resize(eligible.size());

  // One pass per class: shuffle its bucket, take queries first, then the
  // K supports, so the two sets are always disjoint.
  std::vector<std::vector<std::size_t>> picked(eligible.size());
  for (std::size_t c = 0; c < eligible.size(); ++c) {
    std::vector<std::size_t> bucket = by_class[eligible[c]];
    rng.shuffle(bucket);
    picked[c] = std::move(bucket);
  }
  for (int q = 0; q < spec.queries_per_class; ++q) {
    for (std::size_t c = 0; c < eligible.size(); ++c) {
      episode.queries.push_back(
          split.examples[picked[c][static_cast<std::size_t>(q)]]);
    }
  }
  for (std::size_t c = 0; c < eligible.size(); ++c) {
    for (int k = 0; k < spec.k_shot; ++k) {
      episode.supports[c].push_back(
          split.examples[picked[c][static_cast<std::size_t>(
              spec.queries_per_class + k)]]);
    }
  }
  episode.option_seed = rng.next();
  return episode;
}

DatasetSplit ledgar_filter(const DatasetSplit& split, const Tokenizer& tokenizer,
                           int max_tokens) {
  DatasetSplit out;
  out.name = split.name;
  out.role = split.role;
  out.label_map = split.label_map;
  for (const Example& e : split.examples) {
    if (static_cast<int>(tokenizer.encode(e.text).size()) <= max_tokens) {
      out.examples.push_back(e);
    }
  }
  return out;
}

DatasetSplit kshot_draw(const DatasetSplit& split, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("k-shot draw requires k >= 1");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < split.examples.size(); ++i) {
    by_class[split.examples[i].label].push_back(i);
  }

  DatasetSplit out;
  out.name = split.name;
  out.role = split.role;
  out.label_map = split.label_map;
  Rng rng(seed);
  for (auto& [label, members] : by_class) {
    if (members.size() < static_cast<std::size_t>(k)) {
      throw InputError("class " + label + " has fewer than " + std::to_string(k) +
                       " examples");
    }
    rng.shuffle(members);
    for (int i = 0; i < k; ++i) {
      out.examples.push_back(split.examples[members[static_cast<std::size_t>(i)]]);
    }
  }
  return out;
}

void validate_disjoint_classes(std::span<const DatasetSplit> splits) {
  std::map<std::string, std::string> owner;
  for (const DatasetSplit& split : splits) {
    for (const std::string& cls : split.classes()) {
      auto [it, inserted] = owner.emplace(cls, to_string(split.role));
      if (!inserted) {
        throw InputError("class " + cls + " appears in both " + it->second +
                         " and " + to_string(split.role) + " splits");
      }
    }
  }
}

}  // namespace iclmark::data
