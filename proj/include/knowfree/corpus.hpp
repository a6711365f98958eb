#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace knowfree {

// Raised for malformed input data: bad JSONL records, out-of-range spans,
// labels outside the vocabulary.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TokenizerMode { kCharacter, kWhitespace };

TokenizerMode parse_tokenizer_mode(std::string_view name);
std::string_view to_string(TokenizerMode mode);

// A tokenized sentence. Tokens are UTF-8 code points in character mode and
// whitespace-separated words otherwise; joining the tokens with joiner()
// reproduces text().
class TokenSequence {
 public:
  TokenSequence(std::vector<std::string> tokens, TokenizerMode mode);

  static TokenSequence tokenize(std::string_view text, TokenizerMode mode);

  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }
  const std::string& operator[](std::size_t i) const { return tokens_[i]; }
  TokenizerMode mode() const { return mode_; }
  std::string_view joiner() const;
  std::string text() const;
  // Text of tokens [start, end], inclusive.
  std::string slice(std::size_t start, std::size_t end) const;

 private:
  std::vector<std::string> tokens_;
  TokenizerMode mode_;
};

// Splits UTF-8 text into code points. Invalid lead bytes are kept as single
// bytes.
std::vector<std::string> utf8_code_points(std::string_view text);

struct Span {
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // inclusive
  std::string label;

  friend auto operator<=>(const Span&, const Span&) = default;
};

using SpanSet = std::vector<Span>;

// Sorts by (start, end, label) and drops duplicate triples.
void canonicalize(SpanSet& spans);

enum class Provenance { kOriginal, kFusion, kSynthetic };

Provenance parse_provenance(std::string_view name);
std::string_view to_string(Provenance provenance);

struct AnnotatedSample {
  TokenSequence sequence;
  SpanSet target_spans;
  SpanSet extension_spans;
  Provenance provenance = Provenance::kOriginal;
};

// Ordered label space. Target label i owns channel i; extension label j owns
// channel num_target() + j.
class LabelVocabulary {
 public:
  LabelVocabulary() = default;
  LabelVocabulary(std::vector<std::string> target_labels,
                  std::vector<std::string> extension_labels);

  // Sorted distinct labels observed in the samples.
  static LabelVocabulary infer(const std::vector<AnnotatedSample>& samples);

  const std::vector<std::string>& target_labels() const { return target_; }
  const std::vector<std::string>& extension_labels() const { return extension_; }
  std::size_t num_target() const { return target_.size(); }
  std::size_t num_extension() const { return extension_.size(); }
  std::size_t num_channels() const { return target_.size() + extension_.size(); }

  std::optional<std::size_t> target_channel(std::string_view label) const;
  std::optional<std::size_t> extension_channel(std::string_view label) const;
  const std::string& channel_label(std::size_t channel) const;

  friend bool operator==(const LabelVocabulary& a, const LabelVocabulary& b) {
    return a.target_ == b.target_ && a.extension_ == b.extension_;
  }

 private:
  std::vector<std::string> target_;
  std::vector<std::string> extension_;
  std::map<std::string, std::size_t, std::less<>> target_index_;
  std::map<std::string, std::size_t, std::less<>> extension_index_;
};

// Checks span bounds, duplicate triples and (if given) label partitions.
void validate_sample(const AnnotatedSample& sample, const LabelVocabulary* vocab);

AnnotatedSample parse_sample_json(std::string_view line, TokenizerMode mode,
                                  const LabelVocabulary* vocab);
// Canonical single-line form: keys text, target, extension, provenance; no
// whitespace; spans sorted.
std::string to_json_line(const AnnotatedSample& sample);

// Reads one record per line. With a vocabulary, span labels are checked
// against the target and extension partitions.
std::vector<AnnotatedSample> load_jsonl(const std::filesystem::path& path,
                                        TokenizerMode mode,
                                        const LabelVocabulary* vocab = nullptr);
void save_jsonl(const std::filesystem::path& path,
                const std::vector<AnnotatedSample>& samples);

// Lenient BIO decoding: an I-x that does not continue a run of x opens a new
// span.
SpanSet bio_to_spans(const std::vector<std::string>& tags);
SpanSet bio_to_spans(const std::vector<std::string>& tags, std::size_t length);
// Requires non-overlapping spans.
std::vector<std::string> spans_to_bio(const SpanSet& spans, std::size_t length);

// Every occurrence of the tokenized surface as a contiguous token run.
SpanSet ground_entity_mentions(const TokenSequence& sentence,
                               std::string_view surface,
                               const std::string& label);

}  // namespace knowfree
