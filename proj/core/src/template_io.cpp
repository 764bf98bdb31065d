#include "iclmark/template_io.hpp"

#include <fstream>

#include <json.hpp>

#include "iclmark/errors.hpp"

namespace iclmark::markup {

namespace {

using nlohmann::json;

json segment_to_json(const Segment& seg) {
  if (const auto* lit = std::get_if<LiteralSeg>(&seg)) {
    return json{{"kind", "literal"}, {"text", lit->text}};
  }
  if (const auto* tag = std::get_if<TagRefSeg>(&seg)) {
    return json{{"kind", "tag"}, {"name", tag->tag}};
  }
  const auto& slot = std::get<SlotSeg>(seg);
  const char* name = slot.kind == SlotKind::options ? "options"
                     : slot.kind == SlotKind::demos ? "demos"
                                                    : "query";
  return json{{"kind", "slot"}, {"slot", name}};
}

Segment segment_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "literal") return LiteralSeg{j.at("text").get<std::string>()};
  if (kind == "tag") return TagRefSeg{j.at("name").get<std::string>()};
  if (kind == "slot") {
    const std::string slot = j.at("slot").get<std::string>();
    if (slot == "options") return SlotSeg{SlotKind::options};
    if (slot == "demos") return SlotSeg{SlotKind::demos};
    if (slot == "query") return SlotSeg{SlotKind::query};
    throw InputError("unknown slot kind: " + slot);
  }
  throw InputError("unknown segment kind: " + kind);
}

json marker_to_json(const Marker& marker) {
  if (const auto* tag = std::get_if<TagRefSeg>(&marker)) {
    return json{{"tag", tag->tag}};
  }
  return json{{"text", std::get<LiteralSeg>(marker).text}};
}

Marker marker_from_json(const json& j) {
  if (j.contains("tag")) return TagRefSeg{j.at("tag").get<std::string>()};
  return LiteralSeg{j.at("text").get<std::string>()};
}

}  // namespace

std::string serialize_template(const TemplateSpec& tmpl) {
  json j;
  j["style"] = tmpl.style == TemplateStyle::soft ? "soft" : "handwritten";
  j["segments"] = json::array();
  for (const Segment& seg : tmpl.segments) j["segments"].push_back(segment_to_json(seg));
  j["demo_marker"] = marker_to_json(tmpl.demo_marker);
  j["input_marker"] = marker_to_json(tmpl.input_marker);
  j["label_marker"] = marker_to_json(tmpl.label_marker);
  j["demo_separator"] = tmpl.demo_separator;
  return j.dump(2);
}

TemplateSpec parse_template(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("template file is not valid JSON: ") + e.what());
  }
  try {
    TemplateSpec tmpl;
    const std::string style = j.at("style").get<std::string>();
    if (style == "soft") {
      tmpl.style = TemplateStyle::soft;
    } else if (style == "handwritten") {
      tmpl.style = TemplateStyle::handwritten;
    } else {
      throw InputError("unknown template style: " + style);
    }
    for (const json& seg : j.at("segments")) {
      tmpl.segments.push_back(segment_from_json(seg));
    }
    tmpl.demo_marker = marker_from_json(j.at("demo_marker"));
    tmpl.input_marker = marker_from_json(j.at("input_marker"));
    tmpl.label_marker = marker_from_json(j.at("label_marker"));
    tmpl.demo_separator = j.at("demo_separator").get<std::string>();
    tmpl.validate();
    return tmpl;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed template document: ") + e.what());
  }
}

void save_template(const TemplateSpec& tmpl, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write template file: " + path.string());
  out << serialize_template(tmpl) << '\n';
}

TemplateSpec load_template(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read template file: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_template(text);
}

}  // namespace iclmark::markup
