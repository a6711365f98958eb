#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/encoder.hpp"
#include "knowfree/label_merge.hpp"
#include "knowfree/llm_client.hpp"
#include "knowfree/span_model.hpp"
#include "knowfree/train_eval.hpp"
#include "knowfree/workflow.hpp"

namespace knowfree::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kIoError = 3, kPipelineError = 4 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// "http" talks to a chat-completions endpoint; "lexicon" answers from a
// lexicon file without network access.
enum class Provider { kHttp, kLexicon };

struct LlmSettings {
  ClientMode mode = ClientMode::kReplay;
  Provider provider = Provider::kHttp;
  std::filesystem::path fixtures;
  std::filesystem::path lexicon;
  int concurrency = 4;
  int retry_budget = 3;
  double backoff_seconds = 1.0;
  HttpSettings http;
};

struct RunConfig {
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  std::filesystem::path dev_path;  // optional
  TokenizerMode tokenizer = TokenizerMode::kCharacter;
  LlmSettings llm;
  std::map<std::string, std::filesystem::path> prompt_files;  // kind -> template file
  MergePolicy merge;
  int embedding_dim = 256;
  EncoderConfig encoder;
  HeadConfig head;
  TrainConfig train;
  SynthesisOptions synthesis;
  int kshot = 5;
  std::vector<std::size_t> subset_sizes;
  std::filesystem::path output;
  std::uint64_t seed = 13;

  // Relative paths resolve against `base_dir`. Unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
  void validate() const;

  // First 12 hex digits of SHA-256 over the serialized config.
  std::string hash() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// Entry point of the `knowfree` binary; returns the process exit code.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace knowfree::cli
