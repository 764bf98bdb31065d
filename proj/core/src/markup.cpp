#include "iclmark/markup.hpp"

#include <algorithm>
#include <set>

#include "iclmark/errors.hpp"
#include "iclmark/rng.hpp"

namespace iclmark::markup {

TagSet::TagSet(std::vector<TagSpec> tags) : tags_(std::move(tags)) {
  std::set<std::string> seen;
  for (const TagSpec& tag : tags_) {
    if (tag.name.empty()) throw ConfigError("tag name must be non-empty");
    if (tag.width < 1) throw ConfigError("tag width must be >= 1: " + tag.name);
    if (!seen.insert(tag.name).second) {
      throw ConfigError("duplicate tag name: " + tag.name);
    }
    total_width_ += tag.width;
  }
  if (total_width_ < kMinTotalWidth || total_width_ > kMaxTotalWidth) {
    throw ConfigError("tag set total width " + std::to_string(total_width_) +
                      " outside [" + std::to_string(kMinTotalWidth) + ", " +
                      std::to_string(kMaxTotalWidth) + "]");
  }
}

const TagSpec* TagSet::find(std::string_view name) const {
  for (const TagSpec& tag : tags_) {
    if (tag.name == name) return &tag;
  }
  return nullptr;
}

TagSet default_tagset(int classification_width) {
  if (classification_width < kMinClassificationWidth ||
      classification_width > kMaxClassificationWidth) {
    throw ConfigError("classification tag width " +
                      std::to_string(classification_width) + " outside [" +
                      std::to_string(kMinClassificationWidth) + ", " +
                      std::to_string(kMaxClassificationWidth) + "]");
  }
  return TagSet({
      {"classification", classification_width, TagRole::header},
      {"options", 2, TagRole::options_header},
      {"demo", 1, TagRole::demo_marker},
      {"input", 1, TagRole::input_marker},
      {"label", 1, TagRole::label_marker},
  });
}

void TemplateSpec::validate() const {
  std::vector<SlotKind> slots;
  bool has_tag_segment = false;
  for (const Segment& seg : segments) {
    if (const auto* slot = std::get_if<SlotSeg>(&seg)) slots.push_back(slot->kind);
    if (std::holds_alternative<TagRefSeg>(seg)) has_tag_segment = true;
  }
  const std::vector<SlotKind> expected{SlotKind::options, SlotKind::demos,
                                       SlotKind::query};
  if (slots != expected) {
    throw ConfigError(
        "template must contain exactly one options, demos and query slot, in "
        "that order");
  }

  const bool markers_are_tags = std::holds_alternative<TagRefSeg>(demo_marker) &&
                                std::holds_alternative<TagRefSeg>(input_marker) &&
                                std::holds_alternative<TagRefSeg>(label_marker);
  const bool markers_are_literals =
      std::holds_alternative<LiteralSeg>(demo_marker) &&
      std::holds_alternative<LiteralSeg>(input_marker) &&
      std::holds_alternative<LiteralSeg>(label_marker);
  if (style == TemplateStyle::soft) {
    if (!markers_are_tags) {
      throw ConfigError("soft template markers must reference tags");
    }
  } else {
    if (!markers_are_literals || has_tag_segment) {
      throw ConfigError("handwritten template may contain only literals and slots");
    }
  }
}

TemplateSpec default_soft_template() {
  TemplateSpec tmpl;
  tmpl.style = TemplateStyle::soft;
  tmpl.segments = {
      TagRefSeg{"classification"}, LiteralSeg{"\n"},
      TagRefSeg{"options"},        LiteralSeg{"\n"},
      SlotSeg{SlotKind::options},  LiteralSeg{"\n"},
      SlotSeg{SlotKind::demos},    LiteralSeg{"\n"},
      SlotSeg{SlotKind::query},
  };
  tmpl.demo_marker = TagRefSeg{"demo"};
  tmpl.input_marker = TagRefSeg{"input"};
  tmpl.label_marker = TagRefSeg{"label"};
  tmpl.demo_separator = "\n";
  tmpl.validate();
  return tmpl;
}

TemplateSpec handwritten_template(const HandwrittenChoices& choices) {
  TemplateSpec tmpl;
  tmpl.style = TemplateStyle::handwritten;
  tmpl.segments = {
      LiteralSeg{choices.icl_header + "\n"},
      LiteralSeg{choices.options_header + "\n"},
      SlotSeg{SlotKind::options},
      LiteralSeg{"\n"},
      SlotSeg{SlotKind::demos},
      LiteralSeg{"\n"},
      SlotSeg{SlotKind::query},
  };
  tmpl.demo_marker = LiteralSeg{choices.demo_indicator};
  tmpl.input_marker = LiteralSeg{choices.input_indicator};
  tmpl.label_marker = LiteralSeg{choices.label_indicator};
  tmpl.demo_separator = choices.demo_separator;
  tmpl.validate();
  return tmpl;
}

HandwrittenChoices handwritten_choices(int index, TemplateDomain domain) {
  if (index < 1 || index > 5) {
    throw ConfigError("handwritten set index must be in [1, 5], got " +
                      std::to_string(index));
  }
  static const HandwrittenChoices kIntent[5] = {
      {"Categorize the following user statements according to their intent.",
       "category options:", "example", "statement:", "category:", "\n"},
      {"Classify the user inquiries below according to their intent.",
       "possible classes:", "demonstration", "inquiry:", "class:", "\n"},
      {"Label these user requests based on their intent type.",
       "label options:", "example", "request:", "label:", "\n"},
      {"Classify these user utterances based on their principal intent.",
       "possible classes:", "###", "utterance:", "class:", "\n"},
      {"Determine the intent of the following incoming user requests.",
       "intent options:", "e.g.", "request:", "intent:", "\n"},
  };
  static const HandwrittenChoices kLegal[5] = {
      {"Categorize the following contract provisions according to their main topic.",
       "category options:", "example", "provision:", "category:", "\n"},
      {"Classify the contract provisions below according to their main topic.",
       "possible classes:", "demonstration", "provision:", "class:", "\n"},
      {"Label these contract provisions based on their main topic.",
       "label options:", "example", "provision:", "label:", "\n"},
      {"Classify these contract provisions based on their primary topic.",
       "possible classes:", "###", "provision:", "class:", "\n"},
      {"Determine the main topic of the following contract provisions.",
       "topic options:", "e.g.", "provision:", "topic:", "\n"},
  };
  return domain == TemplateDomain::intent ? kIntent[index - 1] : kLegal[index - 1];
}

TemplateSpec load_handwritten_set(int index, TemplateDomain domain) {
  return handwritten_template(handwritten_choices(index, domain));
}

OptionBlock::OptionBlock(std::vector<OptionEntry> entries,
                         std::uint64_t permutation_seed)
    : entries_(std::move(entries)), permutation_seed_(permutation_seed) {
  if (entries_.empty()) throw InputError("option block must have at least one entry");
  if (entries_.size() > kMaxOptions) {
    throw CapacityError("option block limited to 26 entries, got " +
                        std::to_string(entries_.size()));
  }
  int nota_count = 0;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const OptionEntry& e = entries_[i];
    if (e.letter != static_cast<char>('A' + i)) {
      throw InputError("option letters must be consecutive from A");
    }
    if (e.descriptor.empty()) throw InputError("option descriptor must be non-empty");
    if (!seen.insert(e.descriptor).second) {
      throw InputError("duplicate option descriptor: " + e.descriptor);
    }
    if (e.is_nota) {
      ++nota_count;
      if (i + 1 != entries_.size()) {
        throw InputError("NOTA entry must be the final option");
      }
    }
  }
  if (nota_count > 1) throw InputError("at most one NOTA entry allowed");
}

const OptionEntry* OptionBlock::find_letter(char letter) const {
  for (const OptionEntry& e : entries_) {
    if (e.letter == letter) return &e;
  }
  return nullptr;
}

std::optional<char> OptionBlock::letter_for(std::string_view descriptor) const {
  for (const OptionEntry& e : entries_) {
    if (e.descriptor == descriptor) return e.letter;
  }
  return std::nullopt;
}

std::optional<char> OptionBlock::nota_letter() const {
  if (!entries_.empty() && entries_.back().is_nota) return entries_.back().letter;
  return std::nullopt;
}

bool OptionBlock::has_descriptor(std::string_view descriptor) const {
  return letter_for(descriptor).has_value();
}

std::vector<char> OptionBlock::letters() const {
  std::vector<char> out;
  out.reserve(entries_.size());
  for (const OptionEntry& e : entries_) out.push_back(e.letter);
  return out;
}

std::string OptionBlock::to_text() const {
  std::string out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (i > 0) out.push_back('\n');
    out.push_back(entries_[i].letter);
    out.append(": ");
    out.append(entries_[i].descriptor);
  }
  return out;
}

OptionBlock build_option_block(const std::vector<std::string>& descriptors,
                               bool include_nota, std::uint64_t seed) {
  const std::size_t total = descriptors.size() + (include_nota ? 1 : 0);
  if (total < 1) throw InputError("option block needs at least one descriptor");
  if (total > kMaxOptions) {
    throw CapacityError("too many descriptors for letter options: " +
                        std::to_string(total));
  }
  std::set<std::string> seen;
  for (const std::string& d : descriptors) {
    if (d.empty()) throw InputError("descriptor must be non-empty");
    if (!seen.insert(d).second) throw InputError("duplicate descriptor: " + d);
  }

  std::vector<std::string> permuted = descriptors;
  Rng rng(seed);
  rng.shuffle(permuted);

  std::vector<OptionEntry> entries;
  entries.reserve(total);
  for (std::size_t i = 0; i < permuted.size(); ++i) {
    entries.push_back({static_cast<char>('A' + i), permuted[i], false});
  }
  if (include_nota) {
    entries.push_back(
        {static_cast<char>('A' + permuted.size()), kNotaDescriptor, true});
  }
  return OptionBlock(std::move(entries), seed);
}

int RenderedPrompt::soft_token_count() const {
  int n = 0;
  for (const Element& el : elements) {
    if (std::holds_alternative<SoftToken>(el)) ++n;
  }
  return n;
}

std::string RenderedPrompt::text(const Tokenizer& tokenizer) const {
  std::string out;
  std::vector<int> run;
  auto flush = [&] {
    if (!run.empty()) {
      out += tokenizer.decode(run);
      run.clear();
    }
  };
  for (const Element& el : elements) {
    if (const auto* base = std::get_if<BaseToken>(&el)) {
      run.push_back(base->id);
    } else {
      const auto& soft = std::get<SoftToken>(el);
      if (soft.pos == 0) {
        flush();
        out.push_back('<');
        out += soft.tag;
        out.push_back('>');
      }
    }
  }
  flush();
  return out;
}

std::vector<int> RenderedPrompt::extended_ids(const TagSet& tags,
                                              int base_vocab) const {
  std::map<std::string, int> offsets;
  int cursor = 0;
  for (const TagSpec& tag : tags.tags()) {
    offsets[tag.name] = cursor;
    cursor += tag.width;
  }
  std::vector<int> ids;
  ids.reserve(elements.size());
  for (const Element& el : elements) {
    if (const auto* base = std::get_if<BaseToken>(&el)) {
      ids.push_back(base->id);
    } else {
      const auto& soft = std::get<SoftToken>(el);
      auto it = offsets.find(soft.tag);
      if (it == offsets.end()) throw RenderError("unknown tag in prompt: " + soft.tag);
      ids.push_back(base_vocab + it->second + soft.pos);
    }
  }
  return ids;
}

namespace {

void append_literal(std::vector<Element>& out, std::string_view text,
                    const Tokenizer& tokenizer) {
  for (int id : tokenizer.encode(text)) out.push_back(BaseToken{id});
}

void append_marker(std::vector<Element>& out, const Marker& marker,
                   const TagSet& tags, const Tokenizer& tokenizer) {
  if (const auto* tag_ref = std::get_if<TagRefSeg>(&marker)) {
    const TagSpec* tag = tags.find(tag_ref->tag);
    if (tag == nullptr) {
      throw RenderError("template references unknown tag: " + tag_ref->tag);
    }
    for (int p = 0; p < tag->width; ++p) out.push_back(SoftToken{tag->name, p});
  } else {
    append_literal(out, std::get<LiteralSeg>(marker).text, tokenizer);
  }
}

// One demonstration. Soft style keeps the tags inline and puts the answer
// letter immediately after the label tag, matching the pending query slot
// so that the letter is always the first generated token. Handwritten
// style uses one line per field.
void append_demo(std::vector<Element>& out, const TemplateSpec& tmpl,
                 const TagSet& tags, const Demonstration& demo, char letter,
                 const Tokenizer& tokenizer) {
  if (tmpl.style == TemplateStyle::soft) {
    append_marker(out, tmpl.demo_marker, tags, tokenizer);
    append_literal(out, " ", tokenizer);
    append_marker(out, tmpl.input_marker, tags, tokenizer);
    append_literal(out, " " + demo.text + " ", tokenizer);
    append_marker(out, tmpl.label_marker, tags, tokenizer);
    append_literal(out, std::string(1, letter), tokenizer);
  } else {
    const std::string& indicator = std::get<LiteralSeg>(tmpl.demo_marker).text;
    if (!indicator.empty()) append_literal(out, indicator + "\n", tokenizer);
    append_marker(out, tmpl.input_marker, tags, tokenizer);
    append_literal(out, " " + demo.text + "\n", tokenizer);
    append_marker(out, tmpl.label_marker, tags, tokenizer);
    append_literal(out, " " + std::string(1, letter), tokenizer);
  }
}

void append_query(std::vector<Element>& out, const TemplateSpec& tmpl,
                  const TagSet& tags, std::string_view query,
                  const Tokenizer& tokenizer) {
  if (tmpl.style == TemplateStyle::soft) {
    append_marker(out, tmpl.input_marker, tags, tokenizer);
    append_literal(out, " " + std::string(query) + " ", tokenizer);
    append_marker(out, tmpl.label_marker, tags, tokenizer);
  } else {
    append_marker(out, tmpl.input_marker, tags, tokenizer);
    append_literal(out, " " + std::string(query) + "\n", tokenizer);
    append_marker(out, tmpl.label_marker, tags, tokenizer);
    append_literal(out, " ", tokenizer);
  }
}

}  // namespace

RenderedPrompt render_prompt(const TemplateSpec& tmpl, const TagSet& tags,
                             const OptionBlock& option_block,
                             const std::vector<Demonstration>& demos,
                             std::string_view query, const LabelMap& label_map,
                             const Tokenizer& tokenizer,
                             std::optional<char> target_letter) {
  tmpl.validate();

  // Resolve every demo to its option letter up front.
  std::vector<char> demo_letters;
  demo_letters.reserve(demos.size());
  for (const Demonstration& demo : demos) {
    auto map_it = label_map.find(demo.label);
    if (map_it == label_map.end()) {
      throw RenderError("demonstration label has no descriptor: " + demo.label);
    }
    auto letter = option_block.letter_for(map_it->second);
    if (!letter.has_value()) {
      throw RenderError("demonstration label not among options: " + map_it->second);
    }
    demo_letters.push_back(*letter);
  }

  RenderedPrompt prompt;
  prompt.option_block = option_block;
  prompt.target_letter = target_letter;

  for (const Segment& seg : tmpl.segments) {
    if (const auto* lit = std::get_if<LiteralSeg>(&seg)) {
      append_literal(prompt.elements, lit->text, tokenizer);
    } else if (const auto* tag_ref = std::get_if<TagRefSeg>(&seg)) {
      append_marker(prompt.elements, TagRefSeg{tag_ref->tag}, tags, tokenizer);
    } else {
      switch (std::get<SlotSeg>(seg).kind) {
        case SlotKind::options:
          append_literal(prompt.elements, option_block.to_text(), tokenizer);
          break;
        case SlotKind::demos:
          for (std::size_t i = 0; i < demos.size(); ++i) {
            if (i > 0) append_literal(prompt.elements, tmpl.demo_separator, tokenizer);
            append_demo(prompt.elements, tmpl, tags, demos[i], demo_letters[i],
                        tokenizer);
          }
          break;
        case SlotKind::query:
          append_query(prompt.elements, tmpl, tags, query, tokenizer);
          break;
      }
    }
  }
  return prompt;
}

}  // namespace iclmark::markup
