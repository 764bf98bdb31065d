#include "iclmark/backend.hpp"

#include <cstring>

#include "iclmark/errors.hpp"
#include "iclmark/rng.hpp"

namespace iclmark::model {

std::string to_string(InitStrategy s) {
  return s == InitStrategy::random ? "random" : "anneal";
}

InitStrategy init_strategy_from_string(std::string_view s) {
  if (s == "random") return InitStrategy::random;
  if (s == "anneal") return InitStrategy::anneal;
  throw ConfigError("unknown init strategy: " + std::string(s));
}

int SoftTokenBank::row_of(const std::string& tag, int pos) const {
  auto it = tag_offsets.find(tag);
  if (it == tag_offsets.end()) throw ConfigError("bank has no tag: " + tag);
  if (pos < 0 || pos >= it->second.width) {
    throw ConfigError("tag position out of range for " + tag + ": " +
                      std::to_string(pos));
  }
  return it->second.begin + pos;
}

bool SoftTokenBank::rows_equal(const SoftTokenBank& other) const {
  if (rows.rows() != other.rows.rows() || rows.cols() != other.rows.cols()) {
    return false;
  }
  return std::memcmp(rows.data(), other.rows.data(),
                     sizeof(double) * static_cast<std::size_t>(rows.size())) == 0;
}

SoftTokenBank extend_vocabulary(
    const Backend& backend, const markup::TagSet& tags, InitStrategy strategy,
    std::uint64_t seed, const std::map<std::string, std::string>* source_phrases) {
  const int dim = backend.embedding_dim();

  SoftTokenBank bank;
  bank.rows.resize(tags.total_width(), dim);
  int cursor = 0;
  for (const markup::TagSpec& tag : tags.tags()) {
    bank.tag_offsets[tag.name] = {cursor, tag.width};
    cursor += tag.width;
  }
  bank.meta.base_model_id = backend.model_id();
  bank.meta.seed = seed;
  bank.meta.steps = 0;
  bank.meta.init = strategy;
  bank.meta.base_param_digest = backend.base_param_digest();

  if (strategy == InitStrategy::random) {
    Rng rng(seed);
    const double std_dev = backend.embedding_init_std();
    for (Eigen::Index r = 0; r < bank.rows.rows(); ++r) {
      for (Eigen::Index c = 0; c < bank.rows.cols(); ++c) {
        bank.rows(r, c) = rng.normal() * std_dev;
      }
    }
    return bank;
  }

  if (source_phrases == nullptr) {
    throw ConfigError("anneal initialization requires one source phrase per tag");
  }
  for (const markup::TagSpec& tag : tags.tags()) {
    auto it = source_phrases->find(tag.name);
    if (it == source_phrases->end()) {
      throw ConfigError("anneal: missing source phrase for tag " + tag.name);
    }
    const std::vector<int> ids = backend.tokenizer().encode(it->second);
    if (ids.empty()) {
      throw ConfigError("anneal: source phrase for tag " + tag.name + " is empty");
    }
    const TagRange range = bank.tag_offsets.at(tag.name);
    for (int p = 0; p < range.width; ++p) {
      // truncate long phrases, cycle short ones
      const int src = ids[static_cast<std::size_t>(p) % ids.size()];
      bank.rows.row(range.begin + p) = backend.token_embedding(src).transpose();
    }
  }
  return bank;
}

std::map<std::string, std::string> anneal_phrases(markup::TemplateDomain domain,
                                                  int handwritten_index) {
  const markup::HandwrittenChoices choices =
      markup::handwritten_choices(handwritten_index, domain);
  return {
      {"classification", choices.icl_header},
      {"options", choices.options_header},
      {"demo", choices.demo_indicator},
      {"input", choices.input_indicator},
      {"label", choices.label_indicator},
  };
}

std::vector<int> target_for_letter(const Backend& backend, char letter) {
  const std::vector<int> ids =
      backend.tokenizer().encode(std::string(1, letter));
  if (ids.size() != 1) {
    throw TokenizerError(std::string("letter '") + letter +
                         "' does not tokenize to a single token");
  }
  return {ids[0], backend.tokenizer().eos_id()};
}

}  // namespace iclmark::model
