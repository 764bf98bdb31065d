#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "iclmark/markup.hpp"

namespace iclmark::markup {

/// Template spec file format: a JSON document listing segments in order,
/// the three markers, the style and the demo separator. parse(serialize(t))
/// reproduces t exactly for every valid template.
std::string serialize_template(const TemplateSpec& tmpl);
TemplateSpec parse_template(std::string_view text);

void save_template(const TemplateSpec& tmpl, const std::filesystem::path& path);
TemplateSpec load_template(const std::filesystem::path& path);

}  // namespace iclmark::markup
