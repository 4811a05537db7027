#pragma once

// JSON-over-HTTP plumbing shared by the completion and embedding backends.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "adaptrec/common.hpp"

namespace adaptrec {

using nlohmann::json;

inline constexpr double kMinTimeoutSeconds = 0.1;

/// Transport-level failure after all attempts; retriable by the caller.
class TransportError : public Error {
public:
  TransportError(const std::string& what, int attempts) : Error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

private:
  int attempts_;
};

class HttpStatusError : public Error {
public:
  HttpStatusError(int status, const std::string& body, int attempts)
      : Error("HTTP " + std::to_string(status) + ": " + body.substr(0, 200)),
        status_(status),
        attempts_(attempts),
        body_(body) {}
  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }
  int attempts() const noexcept { return attempts_; }

private:
  int status_;
  int attempts_;
  std::string body_;
};

struct EndpointConfig {
  std::string url;                          // e.g. http://localhost:8000/v1
  std::string model;
  std::string auth_env = "OPENAI_API_KEY";  // name of the variable holding the bearer token
  double timeout_s = 60.0;
  int max_attempts = 4;
  double backoff_ms = 500.0;
  std::size_t max_in_flight = 4;

  void validate() const {
    if (url.rfind("http://", 0) != 0 && url.rfind("https://", 0) != 0)
      throw ConfigError("endpoint url must start with http:// or https://: '" + url + "'");
    if (!(timeout_s >= kMinTimeoutSeconds))
      throw ConfigError("endpoint timeout " + std::to_string(timeout_s) + "s is below the " +
                        std::to_string(kMinTimeoutSeconds) + "s floor");
    if (max_attempts < 1) throw ConfigError("endpoint max_attempts must be >= 1");
    if (backoff_ms < 0) throw ConfigError("endpoint backoff_ms must be >= 0");
    if (max_in_flight < 1) throw ConfigError("endpoint max_in_flight must be >= 1");
  }
};

inline void to_json(json& j, const EndpointConfig& c) {
  j = {{"url", c.url},           {"model", c.model},           {"auth_env", c.auth_env},
       {"timeout_s", c.timeout_s}, {"max_attempts", c.max_attempts}, {"backoff_ms", c.backoff_ms},
       {"max_in_flight", c.max_in_flight}};
}

inline void from_json(const json& j, EndpointConfig& c) {
  c.url = j.value("url", c.url);
  c.model = j.value("model", c.model);
  c.auth_env = j.value("auth_env", c.auth_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
}

struct HttpResult {
  json body;
  int attempts = 0;
  double latency_ms = 0;
};

/// POSTs JSON with bounded concurrency and exponential backoff on transport
/// errors, 429 and 5xx. Other non-2xx statuses fail immediately.
class JsonPoster {
public:
  explicit JsonPoster(EndpointConfig config)
      : config_(std::move(config)),
        slots_(std::make_shared<std::counting_semaphore<1024>>(
            static_cast<std::ptrdiff_t>(std::min<std::size_t>(config_.max_in_flight, 1024)))) {
    config_.validate();
    const auto scheme_end = config_.url.find("://") + 3;
    const auto path_start = config_.url.find('/', scheme_end);
    origin_ = config_.url.substr(0, path_start);
    base_path_ = path_start == std::string::npos ? "" : config_.url.substr(path_start);
    while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  }

  const EndpointConfig& config() const { return config_; }

  HttpResult post(const std::string& path, const json& payload) const {
    slots_->acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{*slots_};

    httplib::Client client(origin_);
    const auto secs = static_cast<time_t>(config_.timeout_s);
    const auto usecs = static_cast<time_t>((config_.timeout_s - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);

    httplib::Headers headers;
    if (!config_.auth_env.empty())
      if (const char* token = std::getenv(config_.auth_env.c_str()); token && *token)
        headers.emplace("Authorization", std::string("Bearer ") + token);

    const std::string body = payload.dump();
    const auto start = std::chrono::steady_clock::now();
    std::string last_error;
    int last_status = 0;
    std::string last_body;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
      if (attempt > 1) {
        const double delay = config_.backoff_ms * std::pow(2.0, attempt - 2);
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay));
      }
      auto res = client.Post(base_path_ + path, headers, body, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        last_status = 0;
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_status = res->status;
        last_body = res->body;
        continue;
      }
      if (res->status < 200 || res->status >= 300) throw HttpStatusError(res->status, res->body, attempt);
      HttpResult out;
      try {
        out.body = json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw TransportError(std::string("malformed JSON from endpoint: ") + e.what(), attempt);
      }
      out.attempts = attempt;
      out.latency_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      return out;
    }
    if (last_status != 0) throw HttpStatusError(last_status, last_body, config_.max_attempts);
    throw TransportError("transport failure after " + std::to_string(config_.max_attempts) +
                             " attempts: " + last_error,
                         config_.max_attempts);
  }

private:
  EndpointConfig config_;
  std::shared_ptr<std::counting_semaphore<1024>> slots_;
  std::string origin_;
  std::string base_path_;
};

}  // namespace adaptrec
