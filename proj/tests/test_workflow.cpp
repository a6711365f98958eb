#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <random>
#include <set>
#include <thread>

#include "knowfree/testing/scripted_llm.hpp"
#include "knowfree/testing/toy_corpus.hpp"
#include "knowfree/workflow.hpp"

using namespace knowfree;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Replies with the prompt reversed after a prompt-dependent delay, so
// completions finish out of order.
class ShuffledTransport : public Transport {
 public:
  std::string complete(const Request& request) override {
    const auto delay = std::hash<std::string>{}(request.prompt) % 5;
    std::this_thread::sleep_for(std::chrono::milliseconds(delay));
    return {request.prompt.rbegin(), request.prompt.rend()};
  }
};

// Fails the first `failures` calls with a transport error.
class FlakyTransport : public Transport {
 public:
  explicit FlakyTransport(int failures, bool transport_error = true)
      : failures_(failures), transport_error_(transport_error) {}
  std::string complete(const Request&) override {
    ++calls;
    if (failures_-- > 0) {
      if (transport_error_) throw TransportError("connection reset");
      throw std::runtime_error("bad request");
    }
    return "ok";
  }
  std::atomic<int> calls{0};

 private:
  std::atomic<int> failures_;
  bool transport_error_;
};

// Returns canned replies keyed by template name; exp/ext replies are empty
// for every prompt whose variant block reads "2".
class CannedTransport : public Transport {
 public:
  std::string complete(const Request& request) override {
    if (request.template_name == "exp" || request.template_name == "ext") {
      if (prompt_block(request.prompt, "VARIANT") == "2") return "```\n```";
      return "Text about " + prompt_block(request.prompt, "SENTENCE") + " one two three four";
    }
    return "NONE";
  }
};

LlmClient live_client(std::unique_ptr<Transport> transport, int concurrency = 4,
                      fs::path fixtures = {}) {
  ClientOptions o;
  o.mode = ClientMode::kLive;
  o.concurrency = concurrency;
  o.backoff_seconds = 0.0;
  o.fixture_dir = std::move(fixtures);
  return LlmClient(o, std::move(transport));
}

AnnotatedSample ws_sample(const std::string& text, SpanSet targets = {}) {
  return {TokenSequence::tokenize(text, TokenizerMode::kWhitespace), std::move(targets), {},
          Provenance::kOriginal};
}

// Expected counters for grounding one surface: token-aligned occurrences by
// exhaustive slice comparison, else a plain substring test on the text.
struct GroundingTally {
  std::size_t spans = 0, misses = 0, partial = 0;
  void add(const TokenSequence& seq, const std::string& surface) {
    std::size_t found = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      for (std::size_t j = i; j < seq.size(); ++j) found += seq.slice(i, j) == surface;
    }
    if (found > 0) {
      spans += found;
    } else if (seq.text().find(surface) != std::string::npos) {
      ++partial;
    } else {
      ++misses;
    }
  }
};

}  // namespace

TEST_CASE("prompts: render checks bindings, prompt_block reads blocks back") {
  const PromptTemplate t(PromptKind::kExp, "A {x} and {y}.");
  CHECK(t.placeholders().size() == 2);
  CHECK(t.render({{"x", "1"}, {"y", "2"}}) == "A 1 and 2.");
  CHECK_THROWS_AS(t.render({{"x", "1"}}), std::invalid_argument);
  CHECK_THROWS_AS(t.render({{"x", "1"}, {"y", "2"}, {"z", "3"}}), std::invalid_argument);

  const auto ent = PromptTemplate::builtin(PromptKind::kEnt);
  const std::string rendered = ent.render({{"sentence", "Bank of Paris"}});
  CHECK(prompt_block(rendered, "SENTENCE") == "Bank of Paris");
  CHECK(prompt_block(rendered, "WORDS").empty());
  CHECK(parse_prompt_kind("pos") == PromptKind::kPos);
  CHECK_THROWS(parse_prompt_kind("nope"));
}

TEST_CASE("parse_pairs: tolerant of list formatting") {
  const auto r = parse_pairs("Here are the entities:\n```\n1. Paris\tcity\n- Bank of Paris\tbank\n"
                             "* \tempty\n```\n");
  CHECK_FALSE(r.failed);
  REQUIRE(r.items.size() == 2);
  CHECK(r.items[0] == std::pair<std::string, std::string>{"Paris", "city"});
  CHECK(r.items[1].first == "Bank of Paris");

  CHECK(parse_pairs("NONE").items.empty());
  CHECK_FALSE(parse_pairs("none\n").failed);
  CHECK(parse_pairs("I could not find anything useful.").failed);
  CHECK(parse_pairs("").failed);

  const auto words = parse_pairs("Words:\nBank\nof\nParis\n", true);
  REQUIRE(words.items.size() == 3);
  CHECK(words.items[2].first == "Paris");
  CHECK(words.items[2].second.empty());
}

TEST_CASE("parse_groups and parse_free_text") {
  const auto g = parse_groups("Groups:\nperson: human, people; individual\nnothing here\nplace:\n");
  REQUIRE(g.groups.size() == 1);
  CHECK(g.groups[0].first == "person");
  CHECK(g.groups[0].second == std::vector<std::string>{"human", "people", "individual"});
  CHECK(parse_groups("no groups").failed);
  CHECK_FALSE(parse_groups("NONE").failed);

  CHECK(parse_free_text("```text\n\"Paris  is\n a city.\"\n```") == "Paris is a city.");
  CHECK(parse_free_text("  \n ").empty());
}

TEST_CASE("FixtureStore: key formula, round trip and one file per request") {
  const auto dir = fresh_dir("knowfree_fixture_test");
  FixtureStore store(dir);
  CHECK(FixtureStore::key("ent", "abc") == sha256_hex(std::string("ent") + '\0' + "abc"));
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK_FALSE(store.find("ent", "abc").has_value());
  store.put("ent", "abc", "reply");
  const auto f = store.find("ent", "abc");
  REQUIRE(f.has_value());
  CHECK(f->response == "reply");
  CHECK(f->template_name == "ent");
  CHECK(fs::exists(dir / (FixtureStore::key("ent", "abc") + ".json")));
  CHECK_FALSE(store.find("seg", "abc").has_value());
  fs::remove_all(dir);
}

TEST_CASE("LlmClient: replies come back in request order") {
  auto client = live_client(std::make_unique<ShuffledTransport>(), 4);
  std::vector<Request> requests;
  for (int i = 0; i < 40; ++i) requests.push_back({"ent", "prompt-" + std::to_string(i)});
  const auto replies = client.complete_all(requests);
  REQUIRE(replies.size() == requests.size());
  for (std::size_t i = 0; i < replies.size(); ++i) {
    CHECK(replies[i] == std::string(requests[i].prompt.rbegin(), requests[i].prompt.rend()));
  }
  CHECK(client.requests() == 40);
}

TEST_CASE("LlmClient: in-flight requests never exceed the concurrency limit") {
  for (int limit : {1, 3}) {
    auto client = live_client(std::make_unique<ShuffledTransport>(), limit);
    std::atomic<int> worst{0};
    client.set_in_flight_hook([&](int n) {
      int seen = worst.load();
      while (n > seen && !worst.compare_exchange_weak(seen, n)) {
      }
    });
    std::vector<Request> requests(30, Request{"seg", "x"});
    for (std::size_t i = 0; i < requests.size(); ++i) requests[i].prompt += std::to_string(i);
    client.complete_all(requests);
    CHECK(worst.load() <= limit);
    CHECK(client.max_in_flight() <= limit);
    CHECK(worst.load() >= 1);
  }
}

TEST_CASE("LlmClient: retries transport errors only, within the budget") {
  {
    auto transport = std::make_unique<FlakyTransport>(2);
    auto* raw = transport.get();
    auto client = live_client(std::move(transport));
    CHECK(client.complete({"ent", "p"}) == "ok");
    CHECK(raw->calls == 3);
    CHECK(client.retries() == 2);
  }
  {
    auto client = live_client(std::make_unique<FlakyTransport>(4));
    CHECK_THROWS_AS(client.complete({"ent", "p"}), TransportError);
    CHECK(client.retries() == 3);
  }
  {
    auto transport = std::make_unique<FlakyTransport>(1, false);
    auto* raw = transport.get();
    auto client = live_client(std::move(transport));
    CHECK_THROWS_AS(client.complete({"ent", "p"}), std::runtime_error);
    CHECK(raw->calls == 1);
  }
}

TEST_CASE("LlmClient: live mode records, replay mode reproduces, missing fixtures fail") {
  const auto dir = fresh_dir("knowfree_replay_test");
  std::vector<Request> requests;
  for (int i = 0; i < 12; ++i) requests.push_back({"ext", "sentence " + std::to_string(i)});
  auto live = live_client(std::make_unique<ShuffledTransport>(), 3, dir);
  const auto recorded = live.complete_all(requests);

  ClientOptions o;
  o.mode = ClientMode::kReplay;
  o.fixture_dir = dir;
  LlmClient replay(o, nullptr);
  CHECK(replay.complete_all(requests) == recorded);
  CHECK(replay.complete_all(requests) == recorded);
  CHECK_THROWS_AS(replay.complete({"ext", "never recorded"}), FixtureMissingError);
  requests.push_back({"ext", "also missing"});
  CHECK_THROWS_AS(replay.complete_all(requests), FixtureMissingError);

  ClientOptions no_dir;
  CHECK_THROWS_AS(LlmClient(no_dir, nullptr), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("run_extraction: one result per sample, seg items labelled WORD") {
  const auto samples = testing::generate_toy_corpus(12, 5);
  auto client = live_client(std::make_unique<testing::LexiconTransport>(testing::toy_lexicon()));
  const PromptSet prompts;
  PipelineLog log;
  const auto ent = run_extraction(samples, prompts.ent, client, log);
  const auto seg = run_extraction(samples, prompts.seg, client, log);
  REQUIRE(ent.size() == samples.size());
  REQUIRE(seg.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(ent[i].sample_id == i);
    CHECK(ent[i].kind == PromptKind::kEnt);
    CHECK(seg[i].kind == PromptKind::kSeg);
    for (const auto& item : seg[i].items) CHECK(item.label == "WORD");
    CHECK(ExtractionResult::from_json(ent[i].to_json()).items == ent[i].items);
  }
  CHECK(log.parse_failures == 0);
  CHECK_THROWS_AS(run_extraction(samples, prompts.pos, client, log), std::invalid_argument);
}

TEST_CASE("run_pos: every seg word tagged once, fallbacks counted") {
  const fs::path mini = fs::path(KNOWFREE_DATA_DIR) / "mini";
  auto all = load_jsonl(mini / "train.jsonl", TokenizerMode::kCharacter);
  REQUIRE(all.size() >= 50);
  const std::vector<AnnotatedSample> samples(all.begin(), all.begin() + 50);
  ClientOptions o;
  o.mode = ClientMode::kReplay;
  o.fixture_dir = mini / "fixtures";
  LlmClient client(o, nullptr);
  const PromptSet prompts;
  PipelineLog log;
  const auto seg = run_extraction(samples, prompts.seg, client, log);
  const auto pos = run_pos(samples, seg, client, prompts.pos, log);
  REQUIRE(pos.size() == samples.size());
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    REQUIRE(pos[i].items.size() == seg[i].items.size());
    for (std::size_t k = 0; k < seg[i].items.size(); ++k) {
      CHECK(pos[i].items[k].surface == seg[i].items[k].surface);
      CHECK_FALSE(pos[i].items[k].label.empty());
      fallbacks += pos[i].items[k].label == "X";
    }
  }
  CHECK(log.coverage_warnings == fallbacks);
  CHECK(fallbacks > 0);

  ExtractionResult empty_seg;
  empty_seg.kind = PromptKind::kSeg;
  PipelineLog quiet;
  const long before = client.requests();
  const auto none = combine_seg_pos(samples[0], empty_seg, client, prompts.pos, quiet);
  CHECK(none.items.empty());
  CHECK(client.requests() == before);
}

TEST_CASE("build_fusion_set: spans and counters agree with an exhaustive oracle") {
  std::mt19937_64 rng(29);
  const std::vector<std::string> words = {"a", "b", "ab", "c"};
  const std::vector<std::string> raw_labels = {"city", "town", "firm"};
  const std::map<std::string, std::string> mapping = {{"city", "place"}, {"town", "place"}};
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<AnnotatedSample> samples;
    std::vector<ExtractionResult> ent, seg, pos;
    GroundingTally tally;
    for (std::size_t i = 0; i < 4; ++i) {
      std::string text;
      const std::size_t n = 1 + rng() % 6;
      for (std::size_t k = 0; k < n; ++k) text += (k ? " " : "") + words[rng() % words.size()];
      samples.push_back(ws_sample(text, {{0, 0, "PER"}}));
      ent.push_back({i, PromptKind::kEnt, {}, false});
      seg.push_back({i, PromptKind::kSeg, {}, false});
      pos.push_back({i, PromptKind::kPos, {}, false});
      for (std::size_t m = rng() % 4; m > 0; --m) {
        std::string surface = words[rng() % words.size()];
        if (rng() % 2) surface += " " + words[rng() % words.size()];
        ent.back().items.push_back({surface, raw_labels[rng() % raw_labels.size()]});
        tally.add(samples.back().sequence, surface);
      }
      for (std::size_t m = rng() % 3; m > 0; --m) {
        const std::string surface = words[rng() % words.size()];
        seg.back().items.push_back({surface, "WORD"});
        pos.back().items.push_back({surface, "NN"});
        tally.add(samples.back().sequence, surface);
        tally.add(samples.back().sequence, surface);
      }
    }
    PipelineLog log;
    const auto fused = build_fusion_set(samples, ent, seg, pos, mapping, log);
    std::size_t span_total = 0;
    for (std::size_t i = 0; i < fused.size(); ++i) {
      CHECK(fused[i].provenance == Provenance::kFusion);
      CHECK(fused[i].target_spans == samples[i].target_spans);
      CHECK(std::is_sorted(fused[i].extension_spans.begin(), fused[i].extension_spans.end()));
      for (const auto& s : fused[i].extension_spans) {
        CHECK((s.label == "ent:place" || s.label == "ent:firm" || s.label == "seg:WORD" ||
               s.label == "pos:NN"));
      }
      span_total += fused[i].extension_spans.size();
    }
    CHECK(log.grounding_misses == tally.misses);
    CHECK(log.partial_token_drops == tally.partial);
    // Canonicalization removes duplicate triples, so the oracle's count is an
    // upper bound; equality holds when no triple repeats.
    CHECK(span_total <= tally.spans);
  }
  std::vector<ExtractionResult> short_list(1);
  PipelineLog log;
  CHECK_THROWS_AS(build_fusion_set({ws_sample("a"), ws_sample("b")}, short_list, short_list,
                                   short_list, {}, log),
                  std::invalid_argument);
}

TEST_CASE("build_fusion_set: partial-token surfaces are dropped, not misgrounded") {
  const std::vector<AnnotatedSample> samples = {ws_sample("Parisian art in Paris")};
  const std::vector<ExtractionResult> ent = {
      {0, PromptKind::kEnt, {{"Paris", "city"}, {"Parisia", "x"}, {"Rome", "city"}}, false}};
  const std::vector<ExtractionResult> empty = {{0, PromptKind::kSeg, {}, false}};
  PipelineLog log;
  const auto fused = build_fusion_set(samples, ent, empty, empty, {}, log);
  CHECK(fused[0].extension_spans == SpanSet{{3, 3, "ent:city"}});
  CHECK(log.partial_token_drops == 1);
  CHECK(log.grounding_misses == 1);
  CHECK(log.warnings.size() == 2);
}

TEST_CASE("synthesize_explanations: request counts, empty replies and truncation") {
  std::vector<AnnotatedSample> samples = {
      ws_sample("Alice met Bob", {{0, 0, "PER"}, {2, 2, "PER"}}),
      ws_sample("nothing here"),
      ws_sample("Bank of Paris", {{0, 2, "ORG"}, {2, 2, "LOC"}, {1, 1, "X"}}),
  };
  for (int per_sample : {1, 2, 3}) {
    auto client = live_client(std::make_unique<CannedTransport>());
    PipelineLog log;
    SynthesisOptions options;
    options.per_sample = per_sample;
    options.max_tokens = 4;
    const auto texts = synthesize_explanations(samples, client, PromptSet{}, options, log);

    std::size_t requests = 0, expected_exp = 0, expected_ext = 0;
    for (const auto& s : samples) {
      const std::size_t per_variant = s.target_spans.empty() ? 1 : s.target_spans.size();
      requests += per_variant * static_cast<std::size_t>(per_sample);
      // Variant 2 answers with an empty fenced block.
      const std::size_t kept = per_variant * static_cast<std::size_t>(per_sample - (per_sample >= 2));
      (s.target_spans.empty() ? expected_ext : expected_exp) += kept;
    }
    CHECK(client.requests() == static_cast<long>(requests));
    CHECK(log.empty_generations == requests - expected_exp - expected_ext);
    CHECK(texts.size() == expected_exp + expected_ext);
    std::size_t exp = 0, ext = 0;
    for (const auto& t : texts) {
      (t.origin == PromptKind::kExp ? exp : ext) += 1;
      CHECK(TokenSequence::tokenize(t.text, TokenizerMode::kWhitespace).size() <= 4);
      CHECK(SynthesisResult::from_json(t.to_json()).text == t.text);
    }
    CHECK(exp == expected_exp);
    CHECK(ext == expected_ext);
    CHECK(std::is_sorted(texts.begin(), texts.end(), [](const auto& a, const auto& b) {
      return a.sample_id < b.sample_id;
    }));
  }
  SynthesisOptions bad;
  bad.per_sample = 0;
  auto client = live_client(std::make_unique<CannedTransport>());
  PipelineLog log;
  CHECK_THROWS_AS(synthesize_explanations(samples, client, PromptSet{}, bad, log),
                  std::invalid_argument);
}

TEST_CASE("annotate_synthetic: texts without predicted spans are kept") {
  const auto corpus = testing::generate_toy_corpus(6, 2);
  EncoderConfig ec;
  ec.hidden_dim = 16;
  ec.layers = 1;
  ec.attention_heads = 2;
  ec.feed_forward_dim = 32;
  ec.max_length = 6;
  HeadConfig hc;
  hc.projection_dim = 8;
  hc.biaffine_dim = 8;
  hc.biaffine_heads = 2;
  hc.attention_heads = 2;
  TokenVocab tokens = TokenVocab::build(corpus);
  ec.vocab_size = tokens.size();
  const LabelVocabulary labels({"LOC", "ORG", "PER"}, {});
  const SpanModel frozen(ec, hc, labels, tokens, TokenizerMode::kWhitespace, 3);

  const std::vector<SynthesisResult> texts = {
      {0, PromptKind::kExp, "Paris is a city in France"},
      {1, PromptKind::kExt, "A quiet morning"},
      {1, PromptKind::kExt, "Alice works at the Bank of Paris every day"},
  };
  auto client = live_client(std::make_unique<testing::LexiconTransport>(testing::toy_lexicon()));
  PipelineLog log;
  const auto synthetic = annotate_synthetic(texts, frozen, labels.target_labels(),
                                            TokenizerMode::kWhitespace, client, PromptSet{}, {},
                                            0.5, log);
  REQUIRE(synthetic.size() == texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    CHECK(synthetic[i].provenance == Provenance::kSynthetic);
    CHECK(synthetic[i].sequence.size() <= 6);
    for (const auto& s : synthetic[i].target_spans) CHECK(labels.target_channel(s.label));
  }
  CHECK(synthetic[0].sequence.text() == "Paris is a city in France");
  CHECK(synthetic[2].sequence.size() == 6);
  CHECK_FALSE(synthetic[2].extension_spans.empty());

  const std::vector<std::string> other = {"PER"};
  CHECK_THROWS_AS(annotate_synthetic(texts, frozen, other, TokenizerMode::kWhitespace, client,
                                     PromptSet{}, {}, 0.5, log),
                  DataError);
  CHECK_THROWS_AS(annotate_synthetic(texts, frozen, labels.target_labels(),
                                     TokenizerMode::kCharacter, client, PromptSet{}, {}, 0.5, log),
                  DataError);
}

TEST_CASE("run_label_merge: groups stay within the lexicon's synonym sets") {
  const auto samples = testing::generate_toy_corpus(30, 1);
  const auto lexicon = testing::toy_lexicon();
  auto client = live_client(std::make_unique<testing::LexiconTransport>(lexicon));
  PipelineLog log;
  const auto ent = run_extraction(samples, PromptSet{}.ent, client, log);
  const HashingEmbedder embedder(64);
  const auto outcome = run_label_merge(ent, client, PromptSet{}.merge, embedder, MergePolicy{}, log);
  std::set<std::string> raw;
  for (const auto& r : ent) {
    for (const auto& item : r.items) raw.insert(item.label);
  }
  CHECK_FALSE(outcome.synonyms.empty());
  for (const auto& [standard, members] : outcome.synonyms.entries()) {
    REQUIRE(lexicon.synonym_groups.count(standard) == 1);
    const auto& group = lexicon.synonym_groups.at(standard);
    for (const auto& m : members) {
      CHECK(raw.count(m) == 1);
      CHECK(std::find(group.begin(), group.end(), m) != group.end());
    }
  }
  for (const auto& [from, to] : outcome.result.mapping) {
    CHECK(raw.count(from) == 1);
    CHECK((to == from || lexicon.synonym_groups.count(to) == 1));
  }

  std::vector<ExtractionResult> nothing(3);
  for (std::size_t i = 0; i < nothing.size(); ++i) nothing[i].sample_id = i;
  const long before = client.requests();
  const auto empty = run_label_merge(nothing, client, PromptSet{}.merge, embedder, MergePolicy{}, log);
  CHECK(empty.result.mapping.empty());
  CHECK(client.requests() == before);
}
