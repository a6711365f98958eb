#include "knowfree/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace knowfree {

namespace {

constexpr std::string_view kEntText =
    "You are a domain expert who annotates text for information extraction.\n"
    "List every named entity and domain term that appears in the sentence below, each with a\n"
    "short type name of your own choosing (for example: person, city, drug, company).\n"
    "Copy every entity exactly as written in the sentence.\n"
    "Reply with one entity per line in the form: entity<TAB>type\n"
    "Reply with NONE if the sentence has no entity.\n"
    "\n"
    "[SENTENCE]\n{sentence}\n[/SENTENCE]\n";

constexpr std::string_view kSegText =
    "You are a linguist and domain expert. Split the sentence below into words.\n"
    "Keep the original order and copy characters exactly.\n"
    "Reply with one word per line in the form: word<TAB>WORD\n"
    "\n"
    "[SENTENCE]\n{sentence}\n[/SENTENCE]\n";

constexpr std::string_view kPosText =
    "You are a linguist and domain expert. The sentence below has already been split into\n"
    "words. Give a part-of-speech tag for every listed word without skipping any.\n"
    "Reply with one word per line in the form: word<TAB>tag\n"
    "\n"
    "[SENTENCE]\n{sentence}\n[/SENTENCE]\n"
    "[WORDS]\n{words}\n[/WORDS]\n";

constexpr std::string_view kMergeText =
    "You are a domain expert maintaining an annotation scheme.\n"
    "The entity type names below were written by different annotators. Put names that mean\n"
    "the same category into one group and give each group a standard name.\n"
    "Only use names from the list; names without a synonym may be omitted.\n"
    "Reply with one group per line in the form: STANDARD: name1, name2, ...\n"
    "\n"
    "[LABELS]\n{labels}\n[/LABELS]\n";

constexpr std::string_view kExpText =
    "You are a domain expert writing reference material.\n"
    "Using the sentence below as context, write one new self-contained sentence that explains\n"
    "the entity listed under ENTITY. Mention the entity verbatim.\n"
    "Reply with the new sentence only.\n"
    "\n"
    "[SENTENCE]\n{sentence}\n[/SENTENCE]\n"
    "[ENTITY]\n{entity}\t{label}\n[/ENTITY]\n"
    "[VARIANT]\n{variant}\n[/VARIANT]\n";

constexpr std::string_view kExtText =
    "You are a domain expert writing reference material.\n"
    "Write one new self-contained sentence that describes the key phrases and background of\n"
    "the sentence below.\n"
    "Reply with the new sentence only.\n"
    "\n"
    "[SENTENCE]\n{sentence}\n[/SENTENCE]\n"
    "[VARIANT]\n{variant}\n[/VARIANT]\n";

std::string_view trim(std::string_view s) {
  const auto is_ws = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_ws(s.back())) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return out;
}

// Drops "1.", "2)", "-", "*" and "•" prefixes.
std::string_view strip_marker(std::string_view line) {
  line = trim(line);
  std::size_t i = 0;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
  if (i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')')) {
    return trim(line.substr(i + 1));
  }
  if (!line.empty() && (line[0] == '-' || line[0] == '*')) return trim(line.substr(1));
  constexpr std::string_view bullet = "\xE2\x80\xA2";
  if (line.substr(0, bullet.size()) == bullet) return trim(line.substr(bullet.size()));
  return line;
}

bool is_fence(std::string_view line) { return trim(line).substr(0, 3) == "```"; }

bool is_none(std::string_view line) {
  std::string upper(trim(line));
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  while (!upper.empty() && (upper.back() == '.' || upper.back() == '!')) upper.pop_back();
  return upper == "NONE";
}

bool has_space(std::string_view s) {
  return std::any_of(s.begin(), s.end(),
                     [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; });
}

}  // namespace

PromptKind parse_prompt_kind(std::string_view name) {
  for (PromptKind k : {PromptKind::kEnt, PromptKind::kSeg, PromptKind::kPos, PromptKind::kMerge,
                       PromptKind::kExp, PromptKind::kExt}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown prompt kind: " + std::string(name));
}

std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::kEnt: return "ent";
    case PromptKind::kSeg: return "seg";
    case PromptKind::kPos: return "pos";
    case PromptKind::kMerge: return "merge";
    case PromptKind::kExp: return "exp";
    case PromptKind::kExt: return "ext";
  }
  return "ent";
}

PromptTemplate::PromptTemplate(PromptKind kind, std::string text)
    : kind_(kind), text_(std::move(text)) {
  std::set<std::string> seen;
  for (std::size_t pos = text_.find('{'); pos != std::string::npos; pos = text_.find('{', pos + 1)) {
    const std::size_t close = text_.find('}', pos);
    if (close == std::string::npos) throw std::invalid_argument("prompt template: unclosed '{'");
    std::string name = text_.substr(pos + 1, close - pos - 1);
    if (name.empty() || has_space(name)) throw std::invalid_argument("prompt template: bad placeholder");
    if (seen.insert(name).second) placeholders_.push_back(std::move(name));
  }
}

PromptTemplate PromptTemplate::builtin(PromptKind kind) {
  switch (kind) {
    case PromptKind::kEnt: return {kind, std::string(kEntText)};
    case PromptKind::kSeg: return {kind, std::string(kSegText)};
    case PromptKind::kPos: return {kind, std::string(kPosText)};
    case PromptKind::kMerge: return {kind, std::string(kMergeText)};
    case PromptKind::kExp: return {kind, std::string(kExpText)};
    case PromptKind::kExt: return {kind, std::string(kExtText)};
  }
  throw std::invalid_argument("unknown prompt kind");
}

std::string PromptTemplate::render(const std::map<std::string, std::string>& bindings) const {
  for (const auto& p : placeholders_) {
    if (bindings.count(p) == 0) {
      throw std::invalid_argument("prompt '" + std::string(name()) + "': unbound placeholder {" + p + "}");
    }
  }
  for (const auto& [key, _] : bindings) {
    if (std::find(placeholders_.begin(), placeholders_.end(), key) == placeholders_.end()) {
      throw std::invalid_argument("prompt '" + std::string(name()) + "': unknown binding " + key);
    }
  }
  std::string out;
  std::size_t pos = 0;
  while (pos < text_.size()) {
    const std::size_t open = text_.find('{', pos);
    if (open == std::string::npos) {
      out.append(text_, pos);
      break;
    }
    const std::size_t close = text_.find('}', open);
    out.append(text_, pos, open - pos);
    out += bindings.at(text_.substr(open + 1, close - open - 1));
    pos = close + 1;
  }
  return out;
}

std::string prompt_block(std::string_view prompt, std::string_view tag) {
  const std::string open = "[" + std::string(tag) + "]\n";
  const std::string close = "\n[/" + std::string(tag) + "]";
  const std::size_t a = prompt.find(open);
  if (a == std::string_view::npos) return {};
  const std::size_t start = a + open.size();
  const std::size_t b = prompt.find(close, start);
  if (b == std::string_view::npos) return {};
  return std::string(prompt.substr(start, b - start));
}

ParsedPairs parse_pairs(std::string_view response, bool bare_words) {
  ParsedPairs out;
  bool none = false;
  for (std::string_view raw : lines_of(response)) {
    if (is_fence(raw) || trim(raw).empty()) continue;
    const std::string_view line = strip_marker(raw);
    if (is_none(line)) {
      none = true;
      continue;
    }
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) {
      if (bare_words && !line.empty() && !has_space(line) && line.back() != ':') {
        out.items.emplace_back(std::string(line), std::string());
      }
      continue;
    }
    const std::string_view surface = trim(line.substr(0, tab));
    const std::string_view label = trim(line.substr(tab + 1));
    if (surface.empty() || label.empty()) continue;
    out.items.emplace_back(std::string(surface), std::string(label));
  }
  out.failed = out.items.empty() && !none;
  return out;
}

ParsedGroups parse_groups(std::string_view response) {
  ParsedGroups out;
  bool none = false;
  for (std::string_view raw : lines_of(response)) {
    if (is_fence(raw) || trim(raw).empty()) continue;
    const std::string_view line = strip_marker(raw);
    if (is_none(line)) {
      none = true;
      continue;
    }
    const std::size_t colon = line.find(':');
    if (colon == std::string_view::npos) continue;
    const std::string standard(trim(line.substr(0, colon)));
    std::vector<std::string> members;
    std::string_view rest = line.substr(colon + 1);
    while (!rest.empty()) {
      const std::size_t cut = rest.find_first_of(",;");
      const std::string_view part = trim(rest.substr(0, cut));
      if (!part.empty()) members.emplace_back(part);
      if (cut == std::string_view::npos) break;
      rest.remove_prefix(cut + 1);
    }
    if (standard.empty() || members.empty()) continue;
    out.groups.emplace_back(standard, std::move(members));
  }
  out.failed = out.groups.empty() && !none;
  return out;
}

std::string parse_free_text(std::string_view response) {
  std::string joined;
  for (std::string_view line : lines_of(response)) {
    if (is_fence(line)) continue;
    joined += line;
    joined += ' ';
  }
  std::string out;
  bool space = false;
  for (char c : joined) {
    if (std::isspace(static_cast<unsigned char>(c)) != 0) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out += ' ';
    space = false;
    out += c;
  }
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return std::string(trim(out));
}

}  // namespace knowfree
