#include "knowfree/cli.hpp"

#include <fstream>
#include <ios>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "knowfree/checkpoint.hpp"
#include "knowfree/testing/lexicon.hpp"
#include "knowfree/testing/scripted_llm.hpp"

namespace knowfree::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stage layout under the output directory.
constexpr const char* kExtractDir = "extract";
constexpr const char* kMergeDir = "merge";
constexpr const char* kFuseDir = "fuse";
constexpr const char* kSynthesizeDir = "synthesize";
constexpr const char* kAnnotateDir = "annotate";
constexpr const char* kEvaluateDir = "evaluate";
constexpr const char* kSampleDir = "sample";

void check_keys(const json& section, const json& allowed, const std::string& where) {
  if (!section.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : section.items()) {
    if (!allowed.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

fs::path resolve(const fs::path& base, const json& value) {
  const fs::path p = value.get<std::string>();
  if (p.empty() || p.is_absolute()) return p;
  return (base / p).lexically_normal();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& value) { write_text(path, value.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<AnnotatedSample> read_corpus(const fs::path& path, TokenizerMode mode) {
  if (path.empty()) throw ConfigError("dataset path not configured");
  if (!fs::exists(path)) throw IoError("missing file: " + path.string());
  return load_jsonl(path, mode);
}

void write_corpus(const fs::path& path, const std::vector<AnnotatedSample>& samples) {
  fs::create_directories(path.parent_path());
  save_jsonl(path, samples);
}

template <typename T>
void write_records(const fs::path& path, const std::vector<T>& records) {
  std::string text;
  for (const auto& r : records) text += r.to_json().dump() + "\n";
  write_text(path, text);
}

template <typename T>
std::vector<T> read_records(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing upstream artifact: " + path.string());
  std::vector<T> out;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(T::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

json log_json(const PipelineLog& log) {
  json j = log.summary();
  j["messages"] = log.warnings;
  return j;
}

std::unique_ptr<Transport> make_transport(const LlmSettings& llm) {
  if (llm.mode == ClientMode::kReplay) return nullptr;
  if (llm.provider == Provider::kLexicon) {
    return std::make_unique<testing::LexiconTransport>(testing::Lexicon::load(llm.lexicon.string()));
  }
  return make_http_transport(llm.http);
}

LlmClient make_client(const RunConfig& cfg) {
  ClientOptions options;
  options.mode = cfg.llm.mode;
  options.fixture_dir = cfg.llm.fixtures;
  options.concurrency = cfg.llm.concurrency;
  options.retry_budget = cfg.llm.retry_budget;
  options.backoff_seconds = cfg.llm.backoff_seconds;
  return LlmClient(options, make_transport(cfg.llm));
}

PromptSet load_prompts(const RunConfig& cfg) {
  PromptSet set;
  for (const auto& [name, path] : cfg.prompt_files) {
    const PromptKind kind = parse_prompt_kind(name);
    PromptTemplate t(kind, read_text(path));
    switch (kind) {
      case PromptKind::kEnt: set.ent = t; break;
      case PromptKind::kSeg: set.seg = t; break;
      case PromptKind::kPos: set.pos = t; break;
      case PromptKind::kMerge: set.merge = t; break;
      case PromptKind::kExp: set.exp = t; break;
      case PromptKind::kExt: set.ext = t; break;
    }
  }
  return set;
}

std::map<std::string, std::string> read_label_map(const fs::path& out) {
  const fs::path path = out / kMergeDir / "label_map.json";
  if (!fs::exists(path)) throw IoError("missing upstream artifact: " + path.string());
  return read_json(path).at("mapping").get<std::map<std::string, std::string>>();
}

std::vector<std::string> dataset_targets(const RunConfig& cfg) {
  return LabelVocabulary::infer(read_corpus(cfg.train_path, cfg.tokenizer)).target_labels();
}

fs::path stage_dir(const RunConfig& cfg, const std::string& stage) { return cfg.output / stage; }

std::unique_ptr<SpanModel> load_stage_model(const RunConfig& cfg, const std::string& stage) {
  const fs::path pointer = stage_dir(cfg, stage) / "checkpoint.json";
  if (!fs::exists(pointer)) throw IoError("missing upstream artifact: " + pointer.string());
  const auto base = read_json(pointer).at("base").get<std::string>();
  return load_model(stage_dir(cfg, stage) / base);
}

// Each command returns a summary printed as one JSON line.
json cmd_extract(const RunConfig& cfg) {
  const auto samples = read_corpus(cfg.train_path, cfg.tokenizer);
  auto client = make_client(cfg);
  const auto prompts = load_prompts(cfg);
  PipelineLog log;
  const auto ent = run_extraction(samples, prompts.ent, client, log);
  const auto seg = run_extraction(samples, prompts.seg, client, log);
  const auto pos = run_pos(samples, seg, client, prompts.pos, log);
  // Grounding does not depend on the label mapping, so a dry fusion pass
  // yields the miss counts here.
  build_fusion_set(samples, ent, seg, pos, {}, log);

  const fs::path dir = stage_dir(cfg, kExtractDir);
  write_records(dir / "ent.jsonl", ent);
  write_records(dir / "seg.jsonl", seg);
  write_records(dir / "pos.jsonl", pos);
  auto count_items = [](const std::vector<ExtractionResult>& rs) {
    std::size_t n = 0;
    for (const auto& r : rs) n += r.items.size();
    return n;
  };
  json summary = {{"stage", "extract"},
                  {"samples", samples.size()},
                  {"ent_items", count_items(ent)},
                  {"seg_items", count_items(seg)},
                  {"pos_items", count_items(pos)},
                  {"llm_requests", client.requests()}};
  summary.update(log.summary());
  write_json(dir / "summary.json", {{"summary", summary}, {"log", log_json(log)}});
  return summary;
}

json cmd_merge_labels(const RunConfig& cfg) {
  const auto ent = read_records<ExtractionResult>(stage_dir(cfg, kExtractDir) / "ent.jsonl");
  auto client = make_client(cfg);
  PipelineLog log;
  const HashingEmbedder embedder(cfg.embedding_dim);
  const auto outcome = run_label_merge(ent, client, load_prompts(cfg).merge, embedder, cfg.merge, log);
  json synonyms = json::array();
  for (const auto& [standard, members] : outcome.synonyms.entries()) {
    synonyms.push_back({{"standard", standard}, {"synonyms", members}});
  }
  const fs::path dir = stage_dir(cfg, kMergeDir);
  write_json(dir / "label_map.json", {{"synonyms", synonyms},
                                      {"mapping", outcome.result.mapping},
                                      {"report", outcome.result.report()},
                                      {"log", log_json(log)}});
  std::set<std::string> standards;
  for (const auto& [raw, standard] : outcome.result.mapping) standards.insert(standard);
  json summary = {{"stage", "merge-labels"},
                  {"raw_labels", outcome.result.mapping.size()},
                  {"standard_labels", standards.size()}};
  summary.update(log.summary());
  return summary;
}

json cmd_fuse(const RunConfig& cfg) {
  const auto samples = read_corpus(cfg.train_path, cfg.tokenizer);
  const fs::path extract = stage_dir(cfg, kExtractDir);
  const auto ent = read_records<ExtractionResult>(extract / "ent.jsonl");
  const auto seg = read_records<ExtractionResult>(extract / "seg.jsonl");
  const auto pos = read_records<ExtractionResult>(extract / "pos.jsonl");
  PipelineLog log;
  const auto fused = build_fusion_set(samples, ent, seg, pos, read_label_map(cfg.output), log);
  const fs::path dir = stage_dir(cfg, kFuseDir);
  write_corpus(dir / "fusion.jsonl", fused);
  std::size_t spans = 0;
  for (const auto& s : fused) spans += s.extension_spans.size();
  json summary = {{"stage", "fuse"}, {"samples", fused.size()}, {"extension_spans", spans}};
  summary.update(log.summary());
  write_json(dir / "summary.json", {{"summary", summary}, {"log", log_json(log)}});
  return summary;
}

json cmd_train(const RunConfig& cfg, const std::string& stage) {
  const auto targets = dataset_targets(cfg);
  const auto fusion = read_corpus(cfg.output / kFuseDir / "fusion.jsonl", cfg.tokenizer);
  std::vector<AnnotatedSample> synthetic;
  TrainConfig train_config = cfg.train;
  if (stage == "frozen") {
    train_config.beta = 0.0;
  } else if (cfg.train.beta > 0.0) {
    const fs::path path = cfg.output / kAnnotateDir / "synthetic.jsonl";
    if (!fs::exists(path)) throw IoError("missing upstream artifact: " + path.string());
    synthetic = read_corpus(path, cfg.tokenizer);
  }
  std::vector<AnnotatedSample> all = fusion;
  all.insert(all.end(), synthetic.begin(), synthetic.end());
  std::vector<AnnotatedSample> dev;
  if (!cfg.dev_path.empty()) dev = read_corpus(cfg.dev_path, cfg.tokenizer);

  LabelVocabulary labels(targets, LabelVocabulary::infer(all).extension_labels());
  TokenVocab tokens = TokenVocab::build(all);
  EncoderConfig encoder = cfg.encoder;
  encoder.vocab_size = tokens.size();
  SpanModel model(encoder, cfg.head, labels, tokens, cfg.tokenizer, cfg.seed);
  const TrainResult result = train(model, fusion, synthetic, train_config, dev);

  const int epoch = result.best_epoch > 0 ? result.best_epoch
                                          : static_cast<int>(result.trace.size());
  const std::string base = "knowfree-" + cfg.hash() + "-e" + std::to_string(epoch);
  const fs::path dir = stage_dir(cfg, stage);
  fs::create_directories(dir);
  save_model(model, dir / base);
  write_json(dir / "checkpoint.json", {{"base", base}});
  write_json(dir / "trace.json", result.trace_json());
  return {{"stage", "train"},
          {"model", stage},
          {"checkpoint", base},
          {"fusion_samples", fusion.size()},
          {"synthetic_samples", synthetic.size()},
          {"extension_labels", labels.num_extension()},
          {"final_loss", result.trace.empty() ? 0.0 : result.trace.back().loss}};
}

json cmd_synthesize(const RunConfig& cfg) {
  const auto samples = read_corpus(cfg.train_path, cfg.tokenizer);
  auto client = make_client(cfg);
  PipelineLog log;
  const auto texts = synthesize_explanations(samples, client, load_prompts(cfg), cfg.synthesis, log);
  const fs::path dir = stage_dir(cfg, kSynthesizeDir);
  write_records(dir / "texts.jsonl", texts);
  std::size_t exp = 0;
  for (const auto& t : texts) exp += t.origin == PromptKind::kExp ? 1 : 0;
  json summary = {{"stage", "synthesize"},
                  {"texts", texts.size()},
                  {"exp", exp},
                  {"ext", texts.size() - exp}};
  summary.update(log.summary());
  write_json(dir / "summary.json", {{"summary", summary}, {"log", log_json(log)}});
  return summary;
}

json cmd_annotate(const RunConfig& cfg) {
  const auto texts = read_records<SynthesisResult>(stage_dir(cfg, kSynthesizeDir) / "texts.jsonl");
  const auto frozen = load_stage_model(cfg, "frozen");
  auto client = make_client(cfg);
  PipelineLog log;
  const auto synthetic =
      annotate_synthetic(texts, *frozen, dataset_targets(cfg), cfg.tokenizer, client,
                         load_prompts(cfg), read_label_map(cfg.output), cfg.train.threshold, log);
  const fs::path dir = stage_dir(cfg, kAnnotateDir);
  write_corpus(dir / "synthetic.jsonl", synthetic);
  std::size_t targets = 0;
  for (const auto& s : synthetic) targets += s.target_spans.size();
  json summary = {{"stage", "annotate"}, {"samples", synthetic.size()}, {"target_spans", targets}};
  summary.update(log.summary());
  write_json(dir / "summary.json", {{"summary", summary}, {"log", log_json(log)}});
  return summary;
}

json cmd_evaluate(const RunConfig& cfg, const std::string& stage) {
  const auto model = load_stage_model(cfg, stage);
  const auto test = read_corpus(cfg.test_path, cfg.tokenizer);
  const EvalReport report = evaluate(*model, test, cfg.train.threshold);
  write_json(stage_dir(cfg, kEvaluateDir) / ("eval_report_" + stage + ".json"), report.to_json());
  return {{"stage", "evaluate"},
          {"model", stage},
          {"precision", report.precision},
          {"recall", report.recall},
          {"f1", report.f1}};
}

json cmd_sample(const RunConfig& cfg) {
  const auto corpus = read_corpus(cfg.train_path, cfg.tokenizer);
  const auto labels = LabelVocabulary::infer(corpus).target_labels();
  const KShotResult picked = sample_kshot(corpus, labels, cfg.kshot, cfg.seed);
  const fs::path dir = stage_dir(cfg, kSampleDir);
  std::vector<AnnotatedSample> chosen;
  for (std::size_t i : picked.indices) chosen.push_back(corpus[i]);
  write_corpus(dir / "kshot.jsonl", chosen);
  write_json(dir / "kshot.json", {{"k", cfg.kshot},
                                  {"indices", picked.indices},
                                  {"coverage", picked.coverage},
                                  {"under_supplied", picked.under_supplied}});
  const auto subsets = sample_nested_subsets(corpus.size(), cfg.subset_sizes, cfg.seed);
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    std::vector<AnnotatedSample> subset;
    for (std::size_t i : subsets[s]) subset.push_back(corpus[i]);
    write_corpus(dir / ("subset_" + std::to_string(cfg.subset_sizes[s]) + ".jsonl"), subset);
  }
  return {{"stage", "sample"},
          {"kshot_samples", chosen.size()},
          {"under_supplied", picked.under_supplied},
          {"subsets", subsets.size()}};
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const fs::path& base) {
  RunConfig c;
  try {
    check_keys(j, {{"dataset", 0}, {"llm", 0}, {"prompts", 0}, {"merge", 0}, {"encoder", 0},
                   {"head", 0}, {"train", 0}, {"synthesis", 0}, {"sample", 0}, {"output", 0},
                   {"seed", 0}},
               "config");
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      check_keys(d, {{"train", 0}, {"test", 0}, {"dev", 0}, {"tokenizer", 0}}, "dataset");
      if (d.contains("train")) c.train_path = resolve(base, d["train"]);
      if (d.contains("test")) c.test_path = resolve(base, d["test"]);
      if (d.contains("dev")) c.dev_path = resolve(base, d["dev"]);
      if (d.contains("tokenizer")) c.tokenizer = parse_tokenizer_mode(d["tokenizer"].get<std::string>());
    }
    if (j.contains("llm")) {
      const auto& l = j["llm"];
      check_keys(l, {{"mode", 0}, {"provider", 0}, {"fixtures", 0}, {"lexicon", 0},
                     {"concurrency", 0}, {"retry_budget", 0}, {"backoff_seconds", 0}, {"http", 0}},
                 "llm");
      if (l.contains("mode")) c.llm.mode = parse_client_mode(l["mode"].get<std::string>());
      if (l.contains("provider")) {
        const auto p = l["provider"].get<std::string>();
        if (p != "http" && p != "lexicon") throw ConfigError("llm.provider must be http or lexicon");
        c.llm.provider = p == "http" ? Provider::kHttp : Provider::kLexicon;
      }
      if (l.contains("fixtures")) c.llm.fixtures = resolve(base, l["fixtures"]);
      if (l.contains("lexicon")) c.llm.lexicon = resolve(base, l["lexicon"]);
      c.llm.concurrency = l.value("concurrency", c.llm.concurrency);
      c.llm.retry_budget = l.value("retry_budget", c.llm.retry_budget);
      c.llm.backoff_seconds = l.value("backoff_seconds", c.llm.backoff_seconds);
      if (l.contains("http")) {
        check_keys(l["http"], HttpSettings{}.to_json(), "llm.http");
        c.llm.http = HttpSettings::from_json(l["http"]);
      }
    }
    if (j.contains("prompts")) {
      for (const auto& [kind, path] : j["prompts"].items()) {
        parse_prompt_kind(kind);
        c.prompt_files[kind] = resolve(base, path);
      }
    }
    if (j.contains("merge")) {
      const auto& m = j["merge"];
      check_keys(m, {{"epsilon", 0}, {"top_p", 0}, {"embedding_dim", 0}}, "merge");
      c.merge.epsilon = m.value("epsilon", c.merge.epsilon);
      c.merge.top_p = m.value("top_p", c.merge.top_p);
      c.embedding_dim = m.value("embedding_dim", c.embedding_dim);
    }
    if (j.contains("encoder")) {
      check_keys(j["encoder"], EncoderConfig{}.to_json(), "encoder");
      if (j["encoder"].contains("vocab_size")) {
        throw ConfigError("encoder.vocab_size is derived from the training data");
      }
      c.encoder = EncoderConfig::from_json(j["encoder"]);
    }
    if (j.contains("head")) {
      check_keys(j["head"], HeadConfig{}.to_json(), "head");
      c.head = HeadConfig::from_json(j["head"]);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("train")) {
      if (j["train"].contains("seed")) throw ConfigError("train.seed: use the top-level seed");
      c.train = TrainConfig::from_json(j["train"]);
    }
    c.train.seed = c.seed;
    if (j.contains("synthesis")) {
      const auto& s = j["synthesis"];
      check_keys(s, {{"per_sample", 0}, {"max_tokens", 0}}, "synthesis");
      c.synthesis.per_sample = s.value("per_sample", c.synthesis.per_sample);
      c.synthesis.max_tokens = s.value("max_tokens", c.synthesis.max_tokens);
    }
    if (j.contains("sample")) {
      const auto& s = j["sample"];
      check_keys(s, {{"k", 0}, {"sizes", 0}}, "sample");
      c.kshot = s.value("k", c.kshot);
      if (s.contains("sizes")) c.subset_sizes = s["sizes"].get<std::vector<std::size_t>>();
    }
    if (j.contains("output")) c.output = resolve(base, j["output"]);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json RunConfig::to_json() const {
  json prompts = json::object();
  for (const auto& [kind, path] : prompt_files) prompts[kind] = path.string();
  json encoder_json = encoder.to_json();
  encoder_json.erase("vocab_size");
  json train_json = train.to_json();
  train_json.erase("seed");
  return {
      {"dataset",
       {{"train", train_path.string()},
        {"test", test_path.string()},
        {"dev", dev_path.string()},
        {"tokenizer", std::string(to_string(tokenizer))}}},
      {"llm",
       {{"mode", std::string(to_string(llm.mode))},
        {"provider", llm.provider == Provider::kHttp ? "http" : "lexicon"},
        {"fixtures", llm.fixtures.string()},
        {"lexicon", llm.lexicon.string()},
        {"concurrency", llm.concurrency},
        {"retry_budget", llm.retry_budget},
        {"backoff_seconds", llm.backoff_seconds},
        {"http", llm.http.to_json()}}},
      {"prompts", prompts},
      {"merge",
       {{"epsilon", merge.epsilon}, {"top_p", merge.top_p}, {"embedding_dim", embedding_dim}}},
      {"encoder", encoder_json},
      {"head", head.to_json()},
      {"train", train_json},
      {"synthesis", {{"per_sample", synthesis.per_sample}, {"max_tokens", synthesis.max_tokens}}},
      {"sample", {{"k", kshot}, {"sizes", subset_sizes}}},
      {"output", output.string()},
      {"seed", seed}};
}

void RunConfig::validate() const {
  try {
    if (output.empty()) throw ConfigError("no output directory (set output or pass --out)");
    if (llm.concurrency < 1) throw ConfigError("llm.concurrency must be >= 1");
    if (llm.retry_budget < 0) throw ConfigError("llm.retry_budget must be >= 0");
    if (llm.backoff_seconds < 0) throw ConfigError("llm.backoff_seconds must be >= 0");
    if (llm.mode == ClientMode::kReplay && llm.fixtures.empty()) {
      throw ConfigError("replay mode needs llm.fixtures");
    }
    if (llm.mode == ClientMode::kLive && llm.provider == Provider::kLexicon && llm.lexicon.empty()) {
      throw ConfigError("the lexicon provider needs llm.lexicon");
    }
    if (embedding_dim < 1) throw ConfigError("merge.embedding_dim must be >= 1");
    if (kshot < 1) throw ConfigError("sample.k must be >= 1");
    merge.validate();
    EncoderConfig e = encoder;
    e.vocab_size = TokenVocab::kReserved + 1;
    e.validate();
    head.validate();
    train.validate();
    synthesis.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string RunConfig::hash() const {
  const json model_part = {{"tokenizer", std::string(to_string(tokenizer))},
                           {"encoder", to_json()["encoder"]},
                           {"head", head.to_json()},
                           {"train", train.to_json()}};
  return sha256_hex(model_part.dump()).substr(0, 12);
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing config file: " + path.string());
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j, fs::absolute(path).parent_path());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Span-based nested NER with LLM-extended labels", "knowfree"};
  app.require_subcommand(1);
  std::string config_path, mode, out;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Run configuration (JSON)")->required();
  app.add_option("--mode", mode, "LLM mode: live or replay")->check(CLI::IsMember({"live", "replay"}));
  app.add_option("--seed", seed, "Overrides the configured seed");
  app.add_option("--out", out, "Overrides the configured output directory");
  app.fallthrough();

  std::string train_stage = "final", eval_stage = "final";
  std::optional<int> k;
  app.add_subcommand("extract", "Extract entities, word segments and POS tags");
  app.add_subcommand("merge-labels", "Unify raw entity labels");
  app.add_subcommand("fuse", "Ground extractions into fusion samples");
  auto* train_cmd = app.add_subcommand("train", "Train the frozen or the final model");
  train_cmd->add_option("--stage", train_stage)->check(CLI::IsMember({"frozen", "final"}));
  app.add_subcommand("synthesize", "Generate explanation texts");
  app.add_subcommand("annotate", "Label synthetic texts with the frozen model");
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a trained model on the test set");
  eval_cmd->add_option("--stage", eval_stage)->check(CLI::IsMember({"frozen", "final"}));
  auto* sample_cmd = app.add_subcommand("sample", "k-shot and nested subset sampling");
  sample_cmd->add_option("--k", k, "Overrides sample.k");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    if (!mode.empty()) cfg.llm.mode = parse_client_mode(mode);
    if (seed) cfg.seed = cfg.train.seed = *seed;
    if (!out.empty()) cfg.output = fs::absolute(out).lexically_normal();
    if (k) cfg.kshot = *k;
    cfg.validate();

    const std::string command = app.get_subcommands().front()->get_name();
    json summary;
    if (command == "extract") summary = cmd_extract(cfg);
    else if (command == "merge-labels") summary = cmd_merge_labels(cfg);
    else if (command == "fuse") summary = cmd_fuse(cfg);
    else if (command == "train") summary = cmd_train(cfg, train_stage);
    else if (command == "synthesize") summary = cmd_synthesize(cfg);
    else if (command == "annotate") summary = cmd_annotate(cfg);
    else if (command == "evaluate") summary = cmd_evaluate(cfg, eval_stage);
    else summary = cmd_sample(cfg);

    std::string stage_name = command == "train" ? train_stage : command;
    if (command == "evaluate") stage_name = kEvaluateDir;
    write_json(cfg.output / stage_name / "run_config.json", cfg.to_json());
    std::cout << summary.dump() << std::endl;
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "pipeline error: " << e.what() << '\n';
    return kPipelineError;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("knowfree");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace knowfree::cli
