#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>

#include "knowfree/llm_client.hpp"

namespace knowfree {

namespace {

class HttpTransport : public Transport {
 public:
  explicit HttpTransport(HttpSettings settings) : settings_(std::move(settings)) {
    const char* key = std::getenv(settings_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw std::invalid_argument("live mode: environment variable " + settings_.api_key_env +
                                  " is not set");
    }
    api_key_ = key;
  }

  std::string complete(const Request& request) override {
    // httplib clients are not thread-safe; one per call.
    httplib::Client client(settings_.base_url);
    client.set_read_timeout(settings_.timeout_seconds, 0);
    client.set_write_timeout(settings_.timeout_seconds, 0);
    client.set_connection_timeout(settings_.timeout_seconds, 0);
    const nlohmann::json body = {
        {"model", settings_.model},
        {"temperature", settings_.temperature},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})}};
    const httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
    auto res = client.Post(settings_.path, headers, body.dump(), "application/json");
    if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
      throw TransportError("HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw std::runtime_error("HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    try {
      const auto reply = nlohmann::json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("malformed completion payload: ") + e.what());
    }
  }

 private:
  HttpSettings settings_;
  std::string api_key_;
};

}  // namespace

std::unique_ptr<Transport> make_http_transport(const HttpSettings& settings) {
  return std::make_unique<HttpTransport>(settings);
}

}  // namespace knowfree
