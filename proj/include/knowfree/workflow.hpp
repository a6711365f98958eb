#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/corpus.hpp"
#include "knowfree/label_merge.hpp"
#include "knowfree/llm_client.hpp"
#include "knowfree/prompts.hpp"
#include "knowfree/span_model.hpp"

namespace knowfree {

// Extension label prefixes keep the three extraction kinds apart in one
// vocabulary: "ent:<standard label>", "seg:WORD", "pos:<tag>".
inline constexpr std::string_view kSegLabel = "WORD";
inline constexpr std::string_view kFallbackPos = "X";
std::string extension_label(PromptKind kind, std::string_view label);

struct ExtractionItem {
  std::string surface;
  std::string label;

  friend bool operator==(const ExtractionItem&, const ExtractionItem&) = default;
};

struct ExtractionResult {
  std::size_t sample_id = 0;
  PromptKind kind = PromptKind::kEnt;
  std::vector<ExtractionItem> items;
  bool parse_failed = false;

  nlohmann::json to_json() const;
  static ExtractionResult from_json(const nlohmann::json& j);
};

struct SynthesisResult {
  std::size_t sample_id = 0;
  PromptKind origin = PromptKind::kExp;
  std::string text;

  nlohmann::json to_json() const;
  static SynthesisResult from_json(const nlohmann::json& j);
};

// Counters and messages collected while running the pipelines, in input
// order.
struct PipelineLog {
  std::size_t parse_failures = 0;
  std::size_t grounding_misses = 0;
  std::size_t partial_token_drops = 0;
  std::size_t coverage_warnings = 0;
  std::size_t empty_generations = 0;
  std::vector<std::string> warnings;

  void warn(std::string message) { warnings.push_back(std::move(message)); }
  nlohmann::json summary() const;
};

struct PromptSet {
  PromptTemplate ent = PromptTemplate::builtin(PromptKind::kEnt);
  PromptTemplate seg = PromptTemplate::builtin(PromptKind::kSeg);
  PromptTemplate pos = PromptTemplate::builtin(PromptKind::kPos);
  PromptTemplate merge = PromptTemplate::builtin(PromptKind::kMerge);
  PromptTemplate exp = PromptTemplate::builtin(PromptKind::kExp);
  PromptTemplate ext = PromptTemplate::builtin(PromptKind::kExt);
};

// One result per sample, in input order. `kind` must be ent or seg; seg items
// always carry the label WORD.
std::vector<ExtractionResult> run_extraction(const std::vector<AnnotatedSample>& samples,
                                             const PromptTemplate& prompt, LlmClient& client,
                                             PipelineLog& log);

// POS tags for the words of `seg`. Words the reply leaves untagged get the
// fallback tag X and a coverage warning.
ExtractionResult combine_seg_pos(const AnnotatedSample& sample, const ExtractionResult& seg,
                                 LlmClient& client, const PromptTemplate& pos_prompt,
                                 PipelineLog& log);
std::vector<ExtractionResult> run_pos(const std::vector<AnnotatedSample>& samples,
                                      const std::vector<ExtractionResult>& seg, LlmClient& client,
                                      const PromptTemplate& pos_prompt, PipelineLog& log);

struct LabelMergeOutcome {
  SynonymMap synonyms;
  MergeResult result;
};

// Asks the LLM for synonym groups over all raw ent labels, then refines them
// by embedding clustering. Synonyms outside the raw label set are ignored.
LabelMergeOutcome run_label_merge(const std::vector<ExtractionResult>& ent, LlmClient& client,
                                  const PromptTemplate& merge_prompt, const Embedder& embedder,
                                  const MergePolicy& policy, PipelineLog& log);

// Grounds every extracted surface in its sentence and adds the spans as
// extension labels. Raw ent labels missing from `ent_mapping` keep their
// name. Target spans are untouched.
std::vector<AnnotatedSample> build_fusion_set(const std::vector<AnnotatedSample>& samples,
                                              const std::vector<ExtractionResult>& ent,
                                              const std::vector<ExtractionResult>& seg,
                                              const std::vector<ExtractionResult>& pos,
                                              const std::map<std::string, std::string>& ent_mapping,
                                              PipelineLog& log);

struct SynthesisOptions {
  int per_sample = 1;        // generations per (sample, entity) or per entity-free sample
  std::size_t max_tokens = 0;  // truncate generated texts; 0 keeps them whole

  void validate() const;
};

// exp prompts for each target entity of a sample; one ext prompt for samples
// without target entities.
std::vector<SynthesisResult> synthesize_explanations(const std::vector<AnnotatedSample>& samples,
                                                     LlmClient& client, const PromptSet& prompts,
                                                     const SynthesisOptions& options,
                                                     PipelineLog& log);

// Target spans from the frozen model, extension spans from an extraction pass
// over the synthetic texts (with the original label mapping). Texts without
// any predicted span are kept.
std::vector<AnnotatedSample> annotate_synthetic(const std::vector<SynthesisResult>& texts,
                                                const SpanModel& frozen,
                                                const std::vector<std::string>& target_labels,
                                                TokenizerMode mode, LlmClient& client,
                                                const PromptSet& prompts,
                                                const std::map<std::string, std::string>& ent_mapping,
                                                double threshold, PipelineLog& log);

}  // namespace knowfree
