#include "knowfree/workflow.hpp"

#include <algorithm>
#include <set>

namespace knowfree {

namespace {

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i > 0) out += '\n';
    out += lines[i];
  }
  return out;
}

std::string sentence_of(const AnnotatedSample& s) { return s.sequence.text(); }

ExtractionResult parse_extraction(std::size_t id, PromptKind kind, const std::string& reply,
                                  PipelineLog& log) {
  ExtractionResult r;
  r.sample_id = id;
  r.kind = kind;
  const ParsedPairs parsed = parse_pairs(reply, kind == PromptKind::kSeg);
  r.parse_failed = parsed.failed;
  if (parsed.failed) {
    ++log.parse_failures;
    log.warn("sample " + std::to_string(id) + ": unparseable " + std::string(to_string(kind)) +
             " response");
  }
  for (const auto& [surface, label] : parsed.items) {
    r.items.push_back({surface, kind == PromptKind::kSeg ? std::string(kSegLabel) : label});
  }
  return r;
}

Request pos_request(const AnnotatedSample& sample, const ExtractionResult& seg,
                    const PromptTemplate& prompt) {
  std::vector<std::string> words;
  for (const auto& item : seg.items) words.push_back(item.surface);
  return {std::string(prompt.name()),
          prompt.render({{"sentence", sentence_of(sample)}, {"words", join_lines(words)}})};
}

// One POS item per seg word, in seg order; tags are matched by surface and
// consumed so repeated words keep their own tags.
ExtractionResult finish_pos(const ExtractionResult& seg, const std::string& reply,
                            PipelineLog& log) {
  ExtractionResult r = parse_extraction(seg.sample_id, PromptKind::kPos, reply, log);
  std::vector<ExtractionItem> tagged = std::move(r.items);
  std::vector<bool> used(tagged.size(), false);
  r.items.clear();
  for (const auto& word : seg.items) {
    std::string tag;
    for (std::size_t k = 0; k < tagged.size(); ++k) {
      if (!used[k] && tagged[k].surface == word.surface) {
        used[k] = true;
        tag = tagged[k].label;
        break;
      }
    }
    if (tag.empty()) {
      tag = std::string(kFallbackPos);
      ++log.coverage_warnings;
      log.warn("sample " + std::to_string(seg.sample_id) + ": no POS tag for word '" +
               word.surface + "', using " + std::string(kFallbackPos));
    }
    r.items.push_back({word.surface, tag});
  }
  return r;
}

void check_aligned(const std::vector<AnnotatedSample>& samples,
                   const std::vector<ExtractionResult>& results, const char* what) {
  if (results.size() != samples.size()) {
    throw std::invalid_argument(std::string(what) + ": expected one result per sample");
  }
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].sample_id != i) {
      throw std::invalid_argument(std::string(what) + ": result " + std::to_string(i) +
                                  " belongs to sample " + std::to_string(results[i].sample_id));
    }
  }
}

bool contains_text(const TokenSequence& sentence, std::string_view surface) {
  return sentence.text().find(surface) != std::string::npos;
}

}  // namespace

std::string extension_label(PromptKind kind, std::string_view label) {
  return std::string(to_string(kind)) + ":" + std::string(label);
}

nlohmann::json ExtractionResult::to_json() const {
  nlohmann::json items_json = nlohmann::json::array();
  for (const auto& it : items) items_json.push_back({it.surface, it.label});
  return {{"sample_id", sample_id},
          {"kind", std::string(to_string(kind))},
          {"items", items_json},
          {"parse_failed", parse_failed}};
}

ExtractionResult ExtractionResult::from_json(const nlohmann::json& j) {
  ExtractionResult r;
  r.sample_id = j.at("sample_id").get<std::size_t>();
  r.kind = parse_prompt_kind(j.at("kind").get<std::string>());
  for (const auto& it : j.at("items")) {
    r.items.push_back({it.at(0).get<std::string>(), it.at(1).get<std::string>()});
  }
  r.parse_failed = j.value("parse_failed", false);
  return r;
}

nlohmann::json SynthesisResult::to_json() const {
  return {{"sample_id", sample_id}, {"origin", std::string(to_string(origin))}, {"text", text}};
}

SynthesisResult SynthesisResult::from_json(const nlohmann::json& j) {
  SynthesisResult r;
  r.sample_id = j.at("sample_id").get<std::size_t>();
  r.origin = parse_prompt_kind(j.at("origin").get<std::string>());
  r.text = j.at("text").get<std::string>();
  if (r.text.empty()) throw DataError("synthesis result with empty text");
  return r;
}

nlohmann::json PipelineLog::summary() const {
  return {{"parse_failures", parse_failures},
          {"grounding_misses", grounding_misses},
          {"partial_token_drops", partial_token_drops},
          {"coverage_warnings", coverage_warnings},
          {"empty_generations", empty_generations},
          {"warnings", warnings.size()}};
}

std::vector<ExtractionResult> run_extraction(const std::vector<AnnotatedSample>& samples,
                                             const PromptTemplate& prompt, LlmClient& client,
                                             PipelineLog& log) {
  if (prompt.kind() != PromptKind::kEnt && prompt.kind() != PromptKind::kSeg) {
    throw std::invalid_argument("run_extraction: template must be ent or seg");
  }
  std::vector<Request> requests;
  requests.reserve(samples.size());
  for (const auto& s : samples) {
    requests.push_back({std::string(prompt.name()), prompt.render({{"sentence", sentence_of(s)}})});
  }
  const auto replies = client.complete_all(requests);
  std::vector<ExtractionResult> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(parse_extraction(i, prompt.kind(), replies[i], log));
  }
  return out;
}

ExtractionResult combine_seg_pos(const AnnotatedSample& sample, const ExtractionResult& seg,
                                 LlmClient& client, const PromptTemplate& pos_prompt,
                                 PipelineLog& log) {
  if (seg.items.empty()) return {seg.sample_id, PromptKind::kPos, {}, false};
  return finish_pos(seg, client.complete(pos_request(sample, seg, pos_prompt)), log);
}

std::vector<ExtractionResult> run_pos(const std::vector<AnnotatedSample>& samples,
                                      const std::vector<ExtractionResult>& seg, LlmClient& client,
                                      const PromptTemplate& pos_prompt, PipelineLog& log) {
  check_aligned(samples, seg, "run_pos");
  std::vector<Request> requests;
  std::vector<std::size_t> asked;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (seg[i].items.empty()) continue;
    requests.push_back(pos_request(samples[i], seg[i], pos_prompt));
    asked.push_back(i);
  }
  const auto replies = client.complete_all(requests);
  std::vector<ExtractionResult> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = {i, PromptKind::kPos, {}, false};
  for (std::size_t k = 0; k < asked.size(); ++k) {
    out[asked[k]] = finish_pos(seg[asked[k]], replies[k], log);
  }
  return out;
}

LabelMergeOutcome run_label_merge(const std::vector<ExtractionResult>& ent, LlmClient& client,
                                  const PromptTemplate& merge_prompt, const Embedder& embedder,
                                  const MergePolicy& policy, PipelineLog& log) {
  std::vector<EntityTypePair> pairs;
  std::set<std::string> raw_labels;
  for (const auto& r : ent) {
    for (const auto& item : r.items) {
      pairs.push_back({item.surface, item.label});
      raw_labels.insert(item.label);
    }
  }
  LabelMergeOutcome outcome;
  if (pairs.empty()) return outcome;

  const std::vector<std::string> label_list(raw_labels.begin(), raw_labels.end());
  const std::string reply = client.complete(
      {std::string(merge_prompt.name()), merge_prompt.render({{"labels", join_lines(label_list)}})});
  const ParsedGroups parsed = parse_groups(reply);
  if (parsed.failed) {
    ++log.parse_failures;
    log.warn("unparseable merge response; every raw label stays independent");
  }
  std::set<std::string> claimed, standards;
  for (const auto& [standard, members] : parsed.groups) {
    if (!standards.insert(standard).second) {
      log.warn("merge response repeats standard label '" + standard + "'; later group ignored");
      continue;
    }
    std::vector<std::string> kept;
    for (const auto& m : members) {
      if (raw_labels.count(m) == 0) {
        log.warn("merge response names unknown label '" + m + "'");
      } else if (!claimed.insert(m).second) {
        log.warn("merge response lists label '" + m + "' under two standard labels");
      } else {
        kept.push_back(m);
      }
    }
    if (!kept.empty()) outcome.synonyms.add(standard, std::move(kept));
  }
  const auto vectors = embed_pairs(pairs, embedder);
  const auto clusters = build_clusters(pairs, vectors, policy);
  outcome.result = merge_labels(outcome.synonyms, clusters, policy);
  return outcome;
}

std::vector<AnnotatedSample> build_fusion_set(const std::vector<AnnotatedSample>& samples,
                                              const std::vector<ExtractionResult>& ent,
                                              const std::vector<ExtractionResult>& seg,
                                              const std::vector<ExtractionResult>& pos,
                                              const std::map<std::string, std::string>& ent_mapping,
                                              PipelineLog& log) {
  check_aligned(samples, ent, "build_fusion_set (ent)");
  check_aligned(samples, seg, "build_fusion_set (seg)");
  check_aligned(samples, pos, "build_fusion_set (pos)");
  std::vector<AnnotatedSample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    AnnotatedSample fused = samples[i];
    fused.provenance = Provenance::kFusion;
    auto add = [&](const ExtractionItem& item, PromptKind kind, const std::string& label) {
      const SpanSet spans = ground_entity_mentions(fused.sequence, item.surface,
                                                   extension_label(kind, label));
      if (!spans.empty()) {
        fused.extension_spans.insert(fused.extension_spans.end(), spans.begin(), spans.end());
      } else if (contains_text(fused.sequence, item.surface)) {
        ++log.partial_token_drops;
        log.warn("sample " + std::to_string(i) + ": '" + item.surface +
                 "' does not align with token boundaries");
      } else {
        ++log.grounding_misses;
        log.warn("sample " + std::to_string(i) + ": '" + item.surface + "' not found");
      }
    };
    for (const auto& item : ent[i].items) {
      auto it = ent_mapping.find(item.label);
      add(item, PromptKind::kEnt, it == ent_mapping.end() ? item.label : it->second);
    }
    for (const auto& item : seg[i].items) add(item, PromptKind::kSeg, std::string(kSegLabel));
    for (const auto& item : pos[i].items) add(item, PromptKind::kPos, item.label);
    canonicalize(fused.extension_spans);
    out.push_back(std::move(fused));
  }
  return out;
}

void SynthesisOptions::validate() const {
  if (per_sample < 1) throw std::invalid_argument("synthesis: per_sample must be >= 1");
}

std::vector<SynthesisResult> synthesize_explanations(const std::vector<AnnotatedSample>& samples,
                                                     LlmClient& client, const PromptSet& prompts,
                                                     const SynthesisOptions& options,
                                                     PipelineLog& log) {
  options.validate();
  struct Job {
    std::size_t sample_id;
    PromptKind origin;
  };
  std::vector<Request> requests;
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    for (int v = 1; v <= options.per_sample; ++v) {
      const std::string variant = std::to_string(v);
      if (s.target_spans.empty()) {
        requests.push_back({std::string(prompts.ext.name()),
                            prompts.ext.render({{"sentence", sentence_of(s)}, {"variant", variant}})});
        jobs.push_back({i, PromptKind::kExt});
        continue;
      }
      for (const auto& span : s.target_spans) {
        requests.push_back(
            {std::string(prompts.exp.name()),
             prompts.exp.render({{"sentence", sentence_of(s)},
                                 {"entity", s.sequence.slice(span.start, span.end)},
                                 {"label", span.label},
                                 {"variant", variant}})});
        jobs.push_back({i, PromptKind::kExp});
      }
    }
  }
  const auto replies = client.complete_all(requests);
  std::vector<SynthesisResult> out;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    std::string text = parse_free_text(replies[k]);
    const TokenizerMode mode = samples[jobs[k].sample_id].sequence.mode();
    if (!text.empty() && options.max_tokens > 0) {
      const auto seq = TokenSequence::tokenize(text, mode);
      if (seq.size() > options.max_tokens) text = seq.slice(0, options.max_tokens - 1);
    }
    if (text.empty()) {
      ++log.empty_generations;
      log.warn("sample " + std::to_string(jobs[k].sample_id) + ": empty " +
               std::string(to_string(jobs[k].origin)) + " generation dropped");
      continue;
    }
    out.push_back({jobs[k].sample_id, jobs[k].origin, std::move(text)});
  }
  return out;
}

std::vector<AnnotatedSample> annotate_synthetic(const std::vector<SynthesisResult>& texts,
                                                const SpanModel& frozen,
                                                const std::vector<std::string>& target_labels,
                                                TokenizerMode mode, LlmClient& client,
                                                const PromptSet& prompts,
                                                const std::map<std::string, std::string>& ent_mapping,
                                                double threshold, PipelineLog& log) {
  if (frozen.tokenizer() != mode) {
    throw DataError("frozen model uses the " + std::string(to_string(frozen.tokenizer())) +
                    " tokenizer, dataset uses " + std::string(to_string(mode)));
  }
  if (frozen.labels().target_labels() != target_labels) {
    throw DataError("frozen model target labels differ from the dataset's");
  }
  const auto max_length = static_cast<std::size_t>(frozen.encoder_config().max_length);
  std::vector<AnnotatedSample> synthetic;
  synthetic.reserve(texts.size());
  for (std::size_t k = 0; k < texts.size(); ++k) {
    TokenSequence seq = TokenSequence::tokenize(texts[k].text, mode);
    if (seq.size() == 0) continue;
    if (seq.size() > max_length) {
      log.warn("synthetic text " + std::to_string(k) + " truncated to " +
               std::to_string(max_length) + " tokens");
      seq = TokenSequence::tokenize(seq.slice(0, max_length - 1), mode);
    }
    SpanSet predicted = frozen.annotate(seq, threshold);
    synthetic.push_back({std::move(seq), std::move(predicted), {}, Provenance::kSynthetic});
  }
  const auto ent = run_extraction(synthetic, prompts.ent, client, log);
  const auto seg = run_extraction(synthetic, prompts.seg, client, log);
  const auto pos = run_pos(synthetic, seg, client, prompts.pos, log);
  auto out = build_fusion_set(synthetic, ent, seg, pos, ent_mapping, log);
  for (auto& s : out) s.provenance = Provenance::kSynthetic;
  return out;
}

}  // namespace knowfree
