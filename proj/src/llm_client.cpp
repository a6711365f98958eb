#include "knowfree/llm_client.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

namespace knowfree {

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * length);
  for (unsigned int i = 0; i < length; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

nlohmann::json HttpSettings::to_json() const {
  return {{"base_url", base_url},         {"path", path},
          {"model", model},               {"temperature", temperature},
          {"timeout_seconds", timeout_seconds}, {"api_key_env", api_key_env}};
}

HttpSettings HttpSettings::from_json(const nlohmann::json& j) {
  HttpSettings s;
  s.base_url = j.value("base_url", s.base_url);
  s.path = j.value("path", s.path);
  s.model = j.value("model", s.model);
  s.temperature = j.value("temperature", s.temperature);
  s.timeout_seconds = j.value("timeout_seconds", s.timeout_seconds);
  s.api_key_env = j.value("api_key_env", s.api_key_env);
  if (s.timeout_seconds <= 0) throw std::invalid_argument("llm: timeout_seconds must be positive");
  return s;
}

FixtureStore::FixtureStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::string FixtureStore::key(std::string_view template_name, std::string_view prompt) {
  std::string material(template_name);
  material += '\0';
  material += prompt;
  return sha256_hex(material);
}

std::optional<Fixture> FixtureStore::find(std::string_view template_name,
                                          std::string_view prompt) const {
  const std::string k = key(template_name, prompt);
  std::ifstream in(dir_ / (k + ".json"));
  if (!in) return std::nullopt;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("fixture " + k + ": " + e.what());
  }
  Fixture f{j.at("key").get<std::string>(), j.at("template").get<std::string>(),
            j.at("prompt").get<std::string>(), j.at("response").get<std::string>()};
  if (f.key != k || f.template_name != template_name || f.prompt != prompt) {
    throw std::runtime_error("fixture " + k + " does not match its request");
  }
  return f;
}

void FixtureStore::put(std::string_view template_name, std::string_view prompt,
                       std::string_view response) {
  const std::string k = key(template_name, prompt);
  nlohmann::ordered_json j;
  j["key"] = k;
  j["template"] = template_name;
  j["prompt"] = prompt;
  j["response"] = response;
  std::lock_guard lock(write_mutex_);
  std::filesystem::create_directories(dir_);
  const auto path = dir_ / (k + ".json");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write fixture " + path.string());
  out << j.dump(2) << '\n';
}

ClientMode parse_client_mode(std::string_view name) {
  if (name == "live") return ClientMode::kLive;
  if (name == "replay") return ClientMode::kReplay;
  throw std::invalid_argument("unknown client mode: " + std::string(name));
}

std::string_view to_string(ClientMode mode) {
  return mode == ClientMode::kLive ? "live" : "replay";
}

LlmClient::LlmClient(ClientOptions options, std::unique_ptr<Transport> transport)
    : options_(std::move(options)), transport_(std::move(transport)) {
  if (options_.concurrency < 1) throw std::invalid_argument("llm: concurrency must be >= 1");
  if (options_.retry_budget < 0) throw std::invalid_argument("llm: retry_budget must be >= 0");
  if (options_.mode == ClientMode::kReplay) {
    if (options_.fixture_dir.empty()) throw std::invalid_argument("llm: replay mode needs a fixture directory");
    transport_.reset();
  } else if (!transport_) {
    throw std::invalid_argument("llm: live mode needs a transport");
  }
  if (!options_.fixture_dir.empty()) store_.emplace(options_.fixture_dir);
}

std::string LlmClient::dispatch(const Request& request) {
  if (options_.mode == ClientMode::kReplay) {
    auto fixture = store_->find(request.template_name, request.prompt);
    if (!fixture) {
      throw FixtureMissingError("no fixture for template '" + request.template_name + "' (key " +
                                FixtureStore::key(request.template_name, request.prompt) +
                                ") in " + options_.fixture_dir.string());
    }
    return fixture->response;
  }
  for (int attempt = 0;; ++attempt) {
    try {
      std::string reply = transport_->complete(request);
      if (store_) store_->put(request.template_name, request.prompt, reply);
      return reply;
    } catch (const TransportError& e) {
      if (attempt >= options_.retry_budget) {
        throw TransportError("giving up after " + std::to_string(attempt + 1) +
                             " attempts: " + e.what());
      }
      ++retries_;
      const double delay = options_.backoff_seconds * std::pow(2.0, attempt);
      if (delay > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
  }
}

std::string LlmClient::complete(const Request& request) {
  ++requests_;
  const int now = ++in_flight_;
  int seen = max_in_flight_.load();
  while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
  }
  if (hook_) hook_(now);
  struct Leave {
    std::atomic<int>& counter;
    ~Leave() { --counter; }
  } leave{in_flight_};
  return dispatch(request);
}

std::vector<std::string> LlmClient::complete_all(const std::vector<Request>& requests) {
  std::vector<std::string> replies(requests.size());
  std::vector<std::exception_ptr> errors(requests.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  auto work = [&] {
    for (std::size_t i = next++; i < requests.size() && !stop; i = next++) {
      try {
        replies[i] = complete(requests[i]);
      } catch (...) {
        errors[i] = std::current_exception();
        stop = true;
      }
    }
  };
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(options_.concurrency), requests.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return replies;
}

}  // namespace knowfree
