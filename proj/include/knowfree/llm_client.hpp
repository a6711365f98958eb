#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace knowfree {

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FixtureMissingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Request {
  std::string template_name;
  std::string prompt;
};

// Sends one prompt to a language model and returns the reply text. Must be
// safe to call from several threads at once.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string complete(const Request& request) = 0;
};

struct HttpSettings {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  double temperature = 0.0;
  int timeout_seconds = 120;
  std::string api_key_env = "KNOWFREE_API_KEY";

  nlohmann::json to_json() const;
  static HttpSettings from_json(const nlohmann::json& j);
};

// OpenAI-compatible chat completions endpoint. The API key is read from the
// environment variable named in the settings.
std::unique_ptr<Transport> make_http_transport(const HttpSettings& settings);

std::string sha256_hex(std::string_view data);

struct Fixture {
  std::string key;
  std::string template_name;
  std::string prompt;
  std::string response;
};

// One pretty-printed JSON file per request, named <key>.json, where key is
// SHA-256 of template name + '\0' + rendered prompt.
class FixtureStore {
 public:
  explicit FixtureStore(std::filesystem::path dir);

  static std::string key(std::string_view template_name, std::string_view prompt);

  const std::filesystem::path& dir() const { return dir_; }
  std::optional<Fixture> find(std::string_view template_name, std::string_view prompt) const;
  void put(std::string_view template_name, std::string_view prompt, std::string_view response);

 private:
  std::filesystem::path dir_;
  std::mutex write_mutex_;
};

enum class ClientMode { kLive, kReplay };

ClientMode parse_client_mode(std::string_view name);
std::string_view to_string(ClientMode mode);

struct ClientOptions {
  ClientMode mode = ClientMode::kReplay;
  std::filesystem::path fixture_dir;  // replay source; in live mode, recorded to when set
  int concurrency = 4;
  int retry_budget = 3;               // retries after the first attempt, live mode only
  double backoff_seconds = 1.0;       // delay before retry k is backoff * 2^(k-1)
};

class LlmClient {
 public:
  // `transport` is required in live mode and ignored in replay mode.
  LlmClient(ClientOptions options, std::unique_ptr<Transport> transport);

  ClientMode mode() const { return options_.mode; }
  const ClientOptions& options() const { return options_; }

  std::string complete(const Request& request);

  // Dispatches up to `concurrency` requests at a time; replies come back in
  // request order. The first failure (by request index) is rethrown after
  // all workers stop.
  std::vector<std::string> complete_all(const std::vector<Request>& requests);

  // Called with the in-flight count right after each request starts.
  void set_in_flight_hook(std::function<void(int)> hook) { hook_ = std::move(hook); }
  int max_in_flight() const { return max_in_flight_.load(); }
  long requests() const { return requests_.load(); }
  long retries() const { return retries_.load(); }

 private:
  std::string dispatch(const Request& request);

  ClientOptions options_;
  std::unique_ptr<Transport> transport_;
  std::optional<FixtureStore> store_;
  std::function<void(int)> hook_;
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  std::atomic<long> requests_{0};
  std::atomic<long> retries_{0};
};

}  // namespace knowfree
