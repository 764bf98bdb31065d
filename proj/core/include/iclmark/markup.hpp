#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "iclmark/tokenizer.hpp"

namespace iclmark::markup {

enum class TagRole { header, options_header, demo_marker, input_marker, label_marker };

/// A named soft-token tag. A tag spans `width` consecutive trainable
/// vocabulary slots; widths above one give the tag phrase-like capacity.
struct TagSpec {
  std::string name;
  int width = 1;
  TagRole role = TagRole::header;

  bool operator==(const TagSpec&) const = default;
};

inline constexpr int kMinTotalWidth = 10;
inline constexpr int kMaxTotalWidth = 25;
inline constexpr int kMinClassificationWidth = 9;
inline constexpr int kMaxClassificationWidth = 18;

/// Ordered collection of tags with unique names. Total width is bounded
/// to keep the trainable budget small.
class TagSet {
 public:
  TagSet() = default;
  explicit TagSet(std::vector<TagSpec> tags);

  const std::vector<TagSpec>& tags() const { return tags_; }
  int total_width() const { return total_width_; }
  const TagSpec* find(std::string_view name) const;

  bool operator==(const TagSet&) const = default;

 private:
  std::vector<TagSpec> tags_;
  int total_width_ = 0;
};

/// The default five-tag set: classification (configurable width), options
/// (2), and single-token demo/input/label markers.
TagSet default_tagset(int classification_width);

// --- Templates ------------------------------------------------------------

enum class TemplateStyle { soft, handwritten };
enum class SlotKind { options, demos, query };

struct LiteralSeg {
  std::string text;
  bool operator==(const LiteralSeg&) const = default;
};
struct TagRefSeg {
  std::string tag;
  bool operator==(const TagRefSeg&) const = default;
};
struct SlotSeg {
  SlotKind kind;
  bool operator==(const SlotSeg&) const = default;
};

using Segment = std::variant<LiteralSeg, TagRefSeg, SlotSeg>;

/// How a demo/input/label position is marked: a soft tag or a keyword.
using Marker = std::variant<LiteralSeg, TagRefSeg>;

/// An ordered multiple-choice prompt template. The scaffold `segments`
/// must contain exactly one options slot, one demos slot and one query
/// slot, in that order. Soft templates mark demonstrations with tags,
/// handwritten templates with literal keywords; mixing is invalid.
struct TemplateSpec {
  TemplateStyle style = TemplateStyle::soft;
  std::vector<Segment> segments;
  Marker demo_marker = TagRefSeg{"demo"};
  Marker input_marker = TagRefSeg{"input"};
  Marker label_marker = TagRefSeg{"label"};
  /// Joiner between rendered demonstrations.
  std::string demo_separator = "\n";

  void validate() const;

  bool operator==(const TemplateSpec&) const = default;
};

/// The default soft template: classification header, options header,
/// options, demos, query, separated by single newlines.
TemplateSpec default_soft_template();

/// The five word choices that define a handwritten baseline template.
struct HandwrittenChoices {
  std::string icl_header;
  std::string options_header;
  std::string demo_indicator;   // may be empty: no per-demo marker line
  std::string input_indicator;  // includes its separator, e.g. "statement:"
  std::string label_indicator;
  std::string demo_separator = "\n";

  bool operator==(const HandwrittenChoices&) const = default;
};

TemplateSpec handwritten_template(const HandwrittenChoices& choices);

enum class TemplateDomain { intent, legal };

/// One of the five stock handwritten sets per domain, index in [1, 5].
HandwrittenChoices handwritten_choices(int index, TemplateDomain domain);
TemplateSpec load_handwritten_set(int index, TemplateDomain domain);

// --- Option blocks ----------------------------------------------------------

inline constexpr const char* kNotaDescriptor = "none of the above";
inline constexpr int kMaxOptions = 26;

struct OptionEntry {
  char letter = 'A';
  std::string descriptor;
  bool is_nota = false;

  bool operator==(const OptionEntry&) const = default;
};

/// Letter -> class-descriptor mapping shown to the model. Letters always
/// run A, B, C, ... regardless of the permutation applied to descriptors;
/// a "none of the above" entry, when present, is unique and last.
class OptionBlock {
 public:
  OptionBlock() = default;
  OptionBlock(std::vector<OptionEntry> entries, std::uint64_t permutation_seed);

  const std::vector<OptionEntry>& entries() const { return entries_; }
  std::uint64_t permutation_seed() const { return permutation_seed_; }

  const OptionEntry* find_letter(char letter) const;
  std::optional<char> letter_for(std::string_view descriptor) const;
  std::optional<char> nota_letter() const;
  bool has_descriptor(std::string_view descriptor) const;
  std::vector<char> letters() const;

  /// One "LETTER: descriptor" line per entry, newline-joined. The block
  /// is a valid YAML mapping.
  std::string to_text() const;

  bool operator==(const OptionBlock&) const = default;

 private:
  std::vector<OptionEntry> entries_;
  std::uint64_t permutation_seed_ = 0;
};

/// Permutes `descriptors` with a seeded generator, assigns letters from A,
/// and appends the NOTA entry last when requested.
OptionBlock build_option_block(const std::vector<std::string>& descriptors,
                               bool include_nota, std::uint64_t seed);

// --- Demonstrations and rendering -------------------------------------------

struct Demonstration {
  std::string text;
  std::string label;

  bool operator==(const Demonstration&) const = default;
};

/// Class-label identifier -> human-readable descriptor.
using LabelMap = std::map<std::string, std::string>;

struct BaseToken {
  int id = 0;
  bool operator==(const BaseToken&) const = default;
};
struct SoftToken {
  std::string tag;
  int pos = 0;  // position within the tag, 0..width-1
  bool operator==(const SoftToken&) const = default;
};
using Element = std::variant<BaseToken, SoftToken>;

/// A fully rendered token-level prompt. Base tokens carry tokenizer ids;
/// soft tokens reference a tag slot resolved by the backend at run time.
struct RenderedPrompt {
  std::vector<Element> elements;
  OptionBlock option_block;
  std::optional<char> target_letter;

  std::size_t size() const { return elements.size(); }
  int soft_token_count() const;

  /// Detokenized text with each soft tag occurrence shown as <name>.
  std::string text(const Tokenizer& tokenizer) const;

  /// Token ids under the vocabulary-extension contract: base ids as-is,
  /// soft tokens as base_vocab + offset(tag) + pos in tag-set order.
  std::vector<int> extended_ids(const TagSet& tags, int base_vocab) const;

  bool operator==(const RenderedPrompt&) const = default;
};

/// Fills a template with options, demonstrations and the pending query.
///
/// Demonstration labels resolve through `label_map` to descriptors that
/// must appear in `option_block`. Output is deterministic: identical
/// inputs produce an identical element sequence. Length is not checked
/// here; fitting the context budget is the retrieval layer's concern.
RenderedPrompt render_prompt(const TemplateSpec& tmpl, const TagSet& tags,
                             const OptionBlock& option_block,
                             const std::vector<Demonstration>& demos,
                             std::string_view query, const LabelMap& label_map,
                             const Tokenizer& tokenizer,
                             std::optional<char> target_letter = std::nullopt);

}  // namespace iclmark::markup
