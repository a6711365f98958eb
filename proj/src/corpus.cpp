#include "knowfree/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace knowfree {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::vector<std::string> split_tokens(std::string_view text, TokenizerMode mode) {
  if (mode == TokenizerMode::kCharacter) return utf8_code_points(text);
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

SpanSet parse_spans(const nlohmann::json& array, std::size_t length,
                    const char* field) {
  if (!array.is_array()) {
    throw DataError(std::string("field '") + field + "' must be an array");
  }
  SpanSet spans;
  spans.reserve(array.size());
  for (const auto& item : array) {
    if (!item.is_array() || item.size() != 3 || !item[0].is_number_integer() ||
        !item[1].is_number_integer() || !item[2].is_string()) {
      throw DataError(std::string("malformed span in '") + field +
                      "', expected [start,end,label]");
    }
    const auto start = item[0].get<long long>();
    const auto end = item[1].get<long long>();
    if (start < 0 || end < start || static_cast<std::size_t>(end) >= length) {
      std::ostringstream msg;
      msg << "span out of bounds: [" << start << "," << end << "] on a "
          << length << "-token sentence";
      throw DataError(msg.str());
    }
    spans.push_back(Span{static_cast<std::size_t>(start),
                         static_cast<std::size_t>(end),
                         item[2].get<std::string>()});
  }
  return spans;
}

void check_unique(SpanSet spans, const char* field) {
  std::sort(spans.begin(), spans.end());
  if (std::adjacent_find(spans.begin(), spans.end()) != spans.end()) {
    throw DataError(std::string("duplicate span in '") + field + "'");
  }
}

}  // namespace

TokenizerMode parse_tokenizer_mode(std::string_view name) {
  if (name == "char" || name == "character") return TokenizerMode::kCharacter;
  if (name == "whitespace") return TokenizerMode::kWhitespace;
  throw DataError("unknown tokenizer mode: " + std::string(name));
}

std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::kCharacter ? "char" : "whitespace";
}

std::vector<std::string> utf8_code_points(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = lead < 0xF0 ? 3 : 1;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

TokenSequence::TokenSequence(std::vector<std::string> tokens, TokenizerMode mode)
    : tokens_(std::move(tokens)), mode_(mode) {
  if (tokens_.empty()) throw DataError("empty sentence");
  for (const auto& t : tokens_) {
    if (t.empty()) throw DataError("empty token");
  }
}

TokenSequence TokenSequence::tokenize(std::string_view text, TokenizerMode mode) {
  return TokenSequence(split_tokens(text, mode), mode);
}

std::string_view TokenSequence::joiner() const {
  return mode_ == TokenizerMode::kCharacter ? "" : " ";
}

std::string TokenSequence::text() const { return slice(0, tokens_.size() - 1); }

std::string TokenSequence::slice(std::size_t start, std::size_t end) const {
  std::string out;
  for (std::size_t i = start; i <= end && i < tokens_.size(); ++i) {
    if (i > start) out += joiner();
    out += tokens_[i];
  }
  return out;
}

void canonicalize(SpanSet& spans) {
  std::sort(spans.begin(), spans.end());
  spans.erase(std::unique(spans.begin(), spans.end()), spans.end());
}

Provenance parse_provenance(std::string_view name) {
  if (name == "original") return Provenance::kOriginal;
  if (name == "fusion") return Provenance::kFusion;
  if (name == "synthetic") return Provenance::kSynthetic;
  throw DataError("unknown provenance: " + std::string(name));
}

std::string_view to_string(Provenance provenance) {
  switch (provenance) {
    case Provenance::kOriginal: return "original";
    case Provenance::kFusion: return "fusion";
    case Provenance::kSynthetic: return "synthetic";
  }
  return "original";
}

LabelVocabulary::LabelVocabulary(std::vector<std::string> target_labels,
                                 std::vector<std::string> extension_labels)
    : target_(std::move(target_labels)), extension_(std::move(extension_labels)) {
  std::set<std::string, std::less<>> seen;
  for (std::size_t i = 0; i < target_.size(); ++i) {
    if (!seen.insert(target_[i]).second) {
      throw DataError("duplicate label in vocabulary: " + target_[i]);
    }
    target_index_.emplace(target_[i], i);
  }
  for (std::size_t i = 0; i < extension_.size(); ++i) {
    if (!seen.insert(extension_[i]).second) {
      throw DataError("duplicate label in vocabulary: " + extension_[i]);
    }
    extension_index_.emplace(extension_[i], i);
  }
}

LabelVocabulary LabelVocabulary::infer(const std::vector<AnnotatedSample>& samples) {
  std::set<std::string> target, extension;
  for (const auto& s : samples) {
    for (const auto& span : s.target_spans) target.insert(span.label);
    for (const auto& span : s.extension_spans) extension.insert(span.label);
  }
  return LabelVocabulary({target.begin(), target.end()},
                         {extension.begin(), extension.end()});
}

std::optional<std::size_t> LabelVocabulary::target_channel(std::string_view label) const {
  auto it = target_index_.find(label);
  if (it == target_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> LabelVocabulary::extension_channel(std::string_view label) const {
  auto it = extension_index_.find(label);
  if (it == extension_index_.end()) return std::nullopt;
  return target_.size() + it->second;
}

const std::string& LabelVocabulary::channel_label(std::size_t channel) const {
  if (channel < target_.size()) return target_[channel];
  return extension_.at(channel - target_.size());
}

void validate_sample(const AnnotatedSample& sample, const LabelVocabulary* vocab) {
  const std::size_t length = sample.sequence.size();
  auto check = [&](const SpanSet& spans, const char* field, bool target) {
    for (const auto& s : spans) {
      if (s.start > s.end || s.end >= length) {
        std::ostringstream msg;
        msg << "span out of bounds: [" << s.start << "," << s.end << "] on a "
            << length << "-token sentence";
        throw DataError(msg.str());
      }
      if (vocab != nullptr) {
        const bool known = target ? vocab->target_channel(s.label).has_value()
                                  : vocab->extension_channel(s.label).has_value();
        if (!known) {
          throw DataError(std::string("unknown ") + (target ? "target" : "extension") +
                          " label: " + s.label);
        }
      }
    }
    check_unique(spans, field);
  };
  check(sample.target_spans, "target", true);
  check(sample.extension_spans, "extension", false);
}

AnnotatedSample parse_sample_json(std::string_view line, TokenizerMode mode,
                                  const LabelVocabulary* vocab) {
  nlohmann::json record;
  try {
    record = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("malformed JSON: ") + e.what());
  }
  if (!record.is_object()) throw DataError("record must be a JSON object");
  auto text_it = record.find("text");
  if (text_it == record.end() || !text_it->is_string()) {
    throw DataError("missing string field 'text'");
  }
  auto target_it = record.find("target");
  if (target_it == record.end()) throw DataError("missing field 'target'");

  AnnotatedSample sample{TokenSequence::tokenize(text_it->get<std::string>(), mode),
                         {}, {}, Provenance::kOriginal};
  sample.target_spans = parse_spans(*target_it, sample.sequence.size(), "target");
  if (auto it = record.find("extension"); it != record.end()) {
    sample.extension_spans = parse_spans(*it, sample.sequence.size(), "extension");
  }
  if (auto it = record.find("provenance"); it != record.end()) {
    if (!it->is_string()) throw DataError("field 'provenance' must be a string");
    sample.provenance = parse_provenance(it->get<std::string>());
  }
  validate_sample(sample, vocab);
  canonicalize(sample.target_spans);
  canonicalize(sample.extension_spans);
  return sample;
}

std::string to_json_line(const AnnotatedSample& sample) {
  auto spans_json = [](SpanSet spans) {
    canonicalize(spans);
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& s : spans) out.push_back({s.start, s.end, s.label});
    return out;
  };
  nlohmann::ordered_json record;
  record["text"] = sample.sequence.text();
  record["target"] = spans_json(sample.target_spans);
  record["extension"] = spans_json(sample.extension_spans);
  record["provenance"] = std::string(to_string(sample.provenance));
  return record.dump();
}

std::vector<AnnotatedSample> load_jsonl(const std::filesystem::path& path,
                                        TokenizerMode mode,
                                        const LabelVocabulary* vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  std::vector<AnnotatedSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      samples.push_back(parse_sample_json(line, mode, vocab));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

void save_jsonl(const std::filesystem::path& path,
                const std::vector<AnnotatedSample>& samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  for (const auto& s : samples) out << to_json_line(s) << '\n';
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

SpanSet bio_to_spans(const std::vector<std::string>& tags) {
  SpanSet spans;
  std::optional<Span> open;
  auto close = [&] {
    if (open) spans.push_back(*open);
    open.reset();
  };
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::string& tag = tags[i];
    if (tag.size() >= 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
      std::string label = tag.substr(2);
      if (tag[0] == 'I' && open && open->label == label) {
        open->end = i;
        continue;
      }
      close();
      open = Span{i, i, std::move(label)};
    } else {
      close();
    }
  }
  close();
  canonicalize(spans);
  return spans;
}

SpanSet bio_to_spans(const std::vector<std::string>& tags, std::size_t length) {
  if (tags.size() != length) {
    throw DataError("BIO tag count " + std::to_string(tags.size()) +
                    " does not match sentence length " + std::to_string(length));
  }
  return bio_to_spans(tags);
}

std::vector<std::string> spans_to_bio(const SpanSet& spans, std::size_t length) {
  std::vector<std::string> tags(length, "O");
  std::vector<bool> used(length, false);
  for (const auto& s : spans) {
    if (s.start > s.end || s.end >= length) throw DataError("span out of bounds");
    for (std::size_t i = s.start; i <= s.end; ++i) {
      if (used[i]) throw DataError("overlapping spans cannot be written as BIO");
      used[i] = true;
      tags[i] = (i == s.start ? "B-" : "I-") + s.label;
    }
  }
  return tags;
}

SpanSet ground_entity_mentions(const TokenSequence& sentence,
                               std::string_view surface,
                               const std::string& label) {
  const auto needle = split_tokens(surface, sentence.mode());
  SpanSet spans;
  if (needle.empty() || needle.size() > sentence.size()) return spans;
  const auto& hay = sentence.tokens();
  for (std::size_t start = 0; start + needle.size() <= hay.size(); ++start) {
    if (std::equal(needle.begin(), needle.end(), hay.begin() + start)) {
      spans.push_back(Span{start, start + needle.size() - 1, label});
    }
  }
  return spans;
}

}  // namespace knowfree
