#pragma once

// Chat-completion clients for the judge and the CoT editor, plus the rate
// limiting, retry and bounded-parallelism helpers they share.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "precot/core.hpp"

namespace precot {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  std::optional<nlohmann::json> json_schema;  // strict structured output when set
  std::string schema_name = "response";
  double temperature = 1.0;
};

struct ChatResponse {
  std::string content;
  std::optional<std::string> refusal;
  nlohmann::json raw;  // provider payload, kept for audit logs
};

inline nlohmann::json to_json_log(const ChatRequest& r) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"messages", msgs}, {"schema_name", r.schema_name}, {"temperature", r.temperature}};
}

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string model_name() const = 0;
  // Throws TransportError for failures worth retrying.
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Rate limiting and retries
// ---------------------------------------------------------------------------

// Token bucket refilled continuously at `per_minute` tokens per minute.
class RateLimiter {
 public:
  explicit RateLimiter(double per_minute, double burst = 1.0)
      : rate_per_sec_(per_minute / 60.0), capacity_(std::max(1.0, burst)), tokens_(capacity_),
        last_(std::chrono::steady_clock::now()) {
    if (!(per_minute > 0.0)) throw ConfigError("requests_per_minute must be positive");
  }

  void acquire() {
    while (true) {
      std::chrono::duration<double> wait{0.0};
      {
        std::lock_guard lock(mu_);
        refill();
        if (tokens_ >= 1.0) {
          tokens_ -= 1.0;
          return;
        }
        wait = std::chrono::duration<double>((1.0 - tokens_) / rate_per_sec_);
      }
      std::this_thread::sleep_for(wait);
    }
  }

 private:
  void refill() {
    const auto now = std::chrono::steady_clock::now();
    const double dt = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    tokens_ = std::min(capacity_, tokens_ + dt * rate_per_sec_);
  }

  double rate_per_sec_;
  double capacity_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
  std::mutex mu_;
};

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{30000};
};

// Calls fn, retrying TransportError with exponential backoff. Other errors
// propagate immediately.
template <typename F>
auto with_retry(F&& fn, const RetryPolicy& policy,
                const std::function<void(std::chrono::milliseconds)>& sleep =
                    [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const TransportError&) {
      if (attempt >= policy.max_retries) throw;
      const auto scaled = policy.base_delay * (std::int64_t{1} << std::min(attempt, 20));
      sleep(std::min(scaled, policy.max_delay));
    }
  }
}

// Runs fn over items with at most max_parallel concurrent calls. Results keep
// input order; exceptions from fn are rethrown after all workers finish.
template <typename T, typename F>
auto parallel_map(const std::vector<T>& items, std::size_t max_parallel, F fn)
    -> std::vector<decltype(fn(items.front()))> {
  using R = decltype(fn(items.front()));
  std::vector<std::optional<R>> slots(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  const std::size_t workers = std::clamp<std::size_t>(max_parallel, 1, std::max<std::size_t>(items.size(), 1));
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < items.size(); i = next++) {
          try {
            slots[i].emplace(fn(items[i]));
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<R> out;
  out.reserve(items.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

struct OpenAIClientConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-5-mini";
  std::string api_key_env = "OPENAI_API_KEY";
  double requests_per_minute = 60.0;
  std::size_t max_parallel = 4;
  int connect_timeout_sec = 10;
  int read_timeout_sec = 120;
};

// OpenAI-compatible chat completions over HTTP(S). The key is read from the
// environment variable named in the config, never from config files.
class OpenAIChatClient final : public ChatClient {
 public:
  explicit OpenAIChatClient(OpenAIClientConfig cfg)
      : cfg_(std::move(cfg)), limiter_(cfg_.requests_per_minute),
        slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(cfg_.max_parallel, 1))) {
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) api_key_ = key;
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (cfg_.base_url.starts_with("https://"))
      throw ConfigError("https endpoint configured but this build has no TLS support");
#endif
  }

  std::string model_name() const override { return cfg_.model; }

  ChatResponse complete(const ChatRequest& request) override {
    if (api_key_.empty()) throw ConfigError("environment variable " + cfg_.api_key_env + " is not set");
    nlohmann::json body = {{"model", cfg_.model}, {"messages", nlohmann::json::array()}};
    for (const auto& m : request.messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    if (request.json_schema) {
      body["response_format"] = {
          {"type", "json_schema"},
          {"json_schema", {{"name", request.schema_name}, {"schema", *request.json_schema}, {"strict", true}}}};
    }
    if (request.temperature != 1.0) body["temperature"] = request.temperature;

    slots_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{slots_};
    limiter_.acquire();

    httplib::Client cli(cfg_.base_url);
    cli.set_connection_timeout(cfg_.connect_timeout_sec, 0);
    cli.set_read_timeout(cfg_.read_timeout_sec, 0);
    const httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
    auto res = cli.Post(cfg_.path, headers, body.dump(), "application/json");
    if (!res) throw TransportError("chat request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
      throw TransportError("chat endpoint returned HTTP " + std::to_string(res->status));
    if (res->status != 200) throw Error("chat endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body);

    ChatResponse out;
    try {
      out.raw = nlohmann::json::parse(res->body);
      const auto& msg = out.raw.at("choices").at(0).at("message");
      if (msg.contains("content") && msg["content"].is_string()) out.content = msg["content"].get<std::string>();
      if (msg.contains("refusal") && msg["refusal"].is_string()) out.refusal = msg["refusal"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("malformed chat response: ") + e.what());
    }
    return out;
  }

 private:
  OpenAIClientConfig cfg_;
  std::string api_key_;
  RateLimiter limiter_;
  std::counting_semaphore<> slots_;
};

// Replies through a caller-supplied function; records every request.
class ScriptedChatClient final : public ChatClient {
 public:
  using Handler = std::function<ChatResponse(const ChatRequest&)>;
  explicit ScriptedChatClient(Handler handler, std::string name = "scripted")
      : handler_(std::move(handler)), name_(std::move(name)) {}

  std::string model_name() const override { return name_; }

  ChatResponse complete(const ChatRequest& request) override {
    {
      std::lock_guard lock(mu_);
      requests_.push_back(request);
    }
    return handler_(request);
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return requests_.size();
  }
  std::vector<ChatRequest> requests() const {
    std::lock_guard lock(mu_);
    return requests_;
  }

 private:
  Handler handler_;
  std::string name_;
  mutable std::mutex mu_;
  std::vector<ChatRequest> requests_;
};

// Fills {{name}} placeholders; unknown placeholders are an error.
inline std::string fill_template(std::string_view tmpl, const std::vector<std::pair<std::string, std::string>>& vars) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    const auto open = tmpl.find("{{", i);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(i));
      break;
    }
    out.append(tmpl.substr(i, open - i));
    const auto close = tmpl.find("}}", open);
    if (close == std::string_view::npos) throw ConfigError("unterminated placeholder in template");
    const std::string key(tmpl.substr(open + 2, close - open - 2));
    auto it = std::find_if(vars.begin(), vars.end(), [&](const auto& kv) { return kv.first == key; });
    if (it == vars.end()) throw ConfigError("template placeholder without value: " + key);
    out += it->second;
    i = close + 2;
  }
  return out;
}

// Text between <tag> and </tag>, trimmed of one leading and trailing newline.
inline std::optional<std::string> tagged_section(std::string_view text, std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  const auto a = text.find(open);
  if (a == std::string_view::npos) return std::nullopt;
  const auto b = text.find(close, a + open.size());
  if (b == std::string_view::npos) return std::nullopt;
  std::string_view s = text.substr(a + open.size(), b - a - open.size());
  if (s.starts_with("\n")) s.remove_prefix(1);
  if (s.ends_with("\n")) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace precot
