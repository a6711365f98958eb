#pragma once

#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace knowfree {

enum class PromptKind { kEnt, kSeg, kPos, kMerge, kExp, kExt };

PromptKind parse_prompt_kind(std::string_view name);
std::string_view to_string(PromptKind kind);

// Prompt text with {name} placeholders. Every placeholder must be bound at
// render time and every binding must name a placeholder.
class PromptTemplate {
 public:
  PromptTemplate(PromptKind kind, std::string text);

  // The bundled template for each kind. Sentences and lists are wrapped in
  // [TAG] ... [/TAG] blocks so responses can be audited against the request.
  static PromptTemplate builtin(PromptKind kind);

  PromptKind kind() const { return kind_; }
  std::string_view name() const { return to_string(kind_); }
  const std::string& text() const { return text_; }
  const std::vector<std::string>& placeholders() const { return placeholders_; }

  std::string render(const std::map<std::string, std::string>& bindings) const;

 private:
  PromptKind kind_;
  std::string text_;
  std::vector<std::string> placeholders_;
};

// Contents of a [TAG] ... [/TAG] block in a rendered prompt, or empty.
std::string prompt_block(std::string_view prompt, std::string_view tag);

struct ParsedPairs {
  std::vector<std::pair<std::string, std::string>> items;
  bool failed = false;  // no usable line and no NONE, including an empty reply
};

// Extraction responses: one "surface<TAB>label" per line. Numbering, bullets,
// code fences and prose lines are skipped; a line reading NONE marks an
// intentionally empty answer. With `bare_words`, a line holding a single
// whitespace-free word is accepted with an empty label.
ParsedPairs parse_pairs(std::string_view response, bool bare_words = false);

struct ParsedGroups {
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  bool failed = false;
};

// Merge responses: "STANDARD: name1, name2, ..." per line.
ParsedGroups parse_groups(std::string_view response);

// Synthesis responses: code fences removed, whitespace runs collapsed to one
// space, surrounding quotes stripped.
std::string parse_free_text(std::string_view response);

}  // namespace knowfree
