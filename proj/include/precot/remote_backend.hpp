#pragma once

// InferenceBackend over a small JSON-over-HTTP protocol, so real models can
// be served from any runtime (see tools/hf_backend_server.py):
//
//   GET  /info      -> {name, num_layers, hidden_dim, supports_unembedding, context_limit}
//   POST /capture   {prompt, layers}                 -> {activations: {"<layer>": {position, values}}}
//   POST /generate  {prompt, params, steering|null}  -> {text, tokens, prompt_tokens, finish_reason}
//   POST /unembed   {vector}                         -> {logits: [[token, logit], ...]}
//
// Failures return a non-200 status with {error: {kind, message, ...}} where
// kind is t0_mismatch | context_overflow | config | capability | internal.

#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/inference_backend.hpp"

namespace precot {

namespace detail {

[[noreturn]] inline void throw_remote_error(int status, const std::string& body) {
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.contains("error")) {
    if (status >= 500) throw TransportError("backend server returned HTTP " + std::to_string(status));
    throw Error("backend server returned HTTP " + std::to_string(status) + ": " + body);
  }
  const auto& e = j["error"];
  const std::string kind = e.value("kind", "internal");
  const std::string msg = e.value("message", "");
  if (kind == "t0_mismatch") throw T0MismatchError(msg);
  if (kind == "config") throw ConfigError(msg);
  if (kind == "capability") throw CapabilityError(msg);
  if (kind == "context_overflow")
    throw ContextOverflowError(e.value("prompt_tokens", std::size_t{0}), e.value("requested_new", std::size_t{0}),
                               e.value("context_limit", std::size_t{0}));
  throw Error("backend server error: " + msg);
}

}  // namespace detail

class RemoteBackend final : public InferenceBackend {
 public:
  explicit RemoteBackend(std::string base_url, int read_timeout_sec = 600)
      : base_url_(std::move(base_url)), read_timeout_sec_(read_timeout_sec) {
    const auto info = get("/info");
    desc_.name = info.value("name", "remote");
    desc_.num_layers = info.at("num_layers").get<int>();
    desc_.hidden_dim = info.at("hidden_dim").get<int>();
    desc_.supports_unembedding = info.value("supports_unembedding", false);
    desc_.context_limit = info.value("context_limit", std::size_t{8192});
    if (desc_.num_layers < 1 || desc_.hidden_dim < 2) throw ConfigError("remote backend reported invalid dimensions");
  }

  const BackendDescriptor& descriptor() const override { return desc_; }

 protected:
  ActivationMap do_capture(std::string_view prompt, std::span<const int> layers) override {
    const auto res = post("/capture", {{"prompt", prompt}, {"layers", std::vector<int>(layers.begin(), layers.end())}});
    ActivationMap out;
    for (const auto& [k, v] : res.at("activations").items()) {
      const int layer = std::stoi(k);
      out[layer] = ActivationVector{layer, v.at("position").get<std::size_t>(), v.at("values").get<Vec>()};
    }
    return out;
  }

  GenerationRecord do_generate(std::string_view prompt, const DecodeParams& params,
                               const SteeringSpec* steering) override {
    nlohmann::json body = {{"prompt", prompt}, {"params", params}, {"steering", nullptr}};
    if (steering)
      body["steering"] = {{"layer", steering->layer}, {"alpha", steering->alpha}, {"direction", steering->direction}};
    auto res = post("/generate", body);
    res["params"] = params;
    GenerationRecord rec = res.get<GenerationRecord>();
    rec.prompt = std::string(prompt);
    rec.params = params;
    if (steering) rec.steering = SteeringSummary{steering->layer, steering->alpha, norm(steering->direction)};
    return rec;
  }

  std::vector<TokenLogit> do_unembed(std::span<const double> vec) override {
    const auto res = post("/unembed", {{"vector", Vec(vec.begin(), vec.end())}});
    std::vector<TokenLogit> out;
    for (const auto& p : res.at("logits")) out.push_back({p.at(0).get<std::string>(), p.at(1).get<double>()});
    return out;
  }

 private:
  httplib::Client client() const {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(10, 0);
    cli.set_read_timeout(read_timeout_sec_, 0);
    return cli;
  }

  nlohmann::json get(const std::string& path) const {
    auto cli = client();
    auto res = cli.Get(path);
    if (!res) throw TransportError("backend server unreachable at " + base_url_ + ": " + httplib::to_string(res.error()));
    if (res->status != 200) detail::throw_remote_error(res->status, res->body);
    return nlohmann::json::parse(res->body);
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body) const {
    auto cli = client();
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) throw TransportError("backend server unreachable at " + base_url_ + ": " + httplib::to_string(res.error()));
    if (res->status != 200) detail::throw_remote_error(res->status, res->body);
    return nlohmann::json::parse(res->body);
  }

  std::string base_url_;
  int read_timeout_sec_;
  BackendDescriptor desc_;
};

// Serves any InferenceBackend over the protocol above on 127.0.0.1. Requests
// are serialized: a backend handles one call at a time.
class BackendServer {
 public:
  explicit BackendServer(InferenceBackend& backend, int port = 0) : backend_(backend) {
    server_.Get("/info", [this](const httplib::Request&, httplib::Response& res) {
      const auto& d = backend_.descriptor();
      reply(res, {{"name", d.name},
                  {"num_layers", d.num_layers},
                  {"hidden_dim", d.hidden_dim},
                  {"supports_unembedding", d.supports_unembedding},
                  {"context_limit", d.context_limit}});
    });
    server_.Post("/capture", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        const auto layers = body.at("layers").get<std::vector<int>>();
        const auto acts = backend_.capture_pre_cot_activations(body.at("prompt").get<std::string>(), layers);
        nlohmann::json out = nlohmann::json::object();
        for (const auto& [l, a] : acts) out[std::to_string(l)] = {{"position", a.position}, {"values", a.values}};
        return nlohmann::json{{"activations", out}};
      });
    });
    server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        const std::string prompt = body.at("prompt").get<std::string>();
        const auto params = body.at("params").get<DecodeParams>();
        GenerationRecord rec;
        if (body.contains("steering") && !body["steering"].is_null()) {
          const auto& s = body["steering"];
          rec = backend_.generate_with_steering(
              prompt, params, SteeringSpec{s.at("layer").get<int>(), s.at("direction").get<Vec>(), s.at("alpha").get<double>()});
        } else {
          rec = backend_.generate(prompt, params);
        }
        return nlohmann::json{{"text", rec.text},
                              {"tokens", rec.tokens},
                              {"prompt_tokens", rec.prompt_tokens},
                              {"finish_reason", rec.finish_reason}};
      });
    });
    server_.Post("/unembed", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        const auto logits = backend_.unembed(body.at("vector").get<Vec>());
        nlohmann::json out = nlohmann::json::array();
        for (const auto& t : logits) out.push_back({t.token, t.logit});
        return nlohmann::json{{"logits", out}};
      });
    });
    port_ = port == 0 ? server_.bind_to_any_port("127.0.0.1") : (server_.bind_to_port("127.0.0.1", port) ? port : -1);
    if (port_ < 0) throw ConfigError("backend server could not bind");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~BackendServer() { stop(); }
  BackendServer(const BackendServer&) = delete;
  BackendServer& operator=(const BackendServer&) = delete;

  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void reply(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename F>
  void handle(httplib::Response& res, F&& fn) {
    std::lock_guard lock(mu_);
    auto fail = [&](std::string kind, const std::string& msg, int status, nlohmann::json extra = nlohmann::json::object()) {
      extra["kind"] = std::move(kind);
      extra["message"] = msg;
      reply(res, {{"error", extra}}, status);
    };
    try {
      reply(res, fn());
    } catch (const T0MismatchError& e) {
      fail("t0_mismatch", e.what(), 422);
    } catch (const ContextOverflowError& e) {
      fail("context_overflow", e.what(), 413,
           {{"prompt_tokens", e.prompt_tokens()}, {"requested_new", e.requested_new()}, {"context_limit", e.context_limit()}});
    } catch (const CapabilityError& e) {
      fail("capability", e.what(), 501);
    } catch (const ConfigError& e) {
      fail("config", e.what(), 400);
    } catch (const nlohmann::json::exception& e) {
      fail("config", std::string("malformed request: ") + e.what(), 400);
    } catch (const std::exception& e) {
      fail("internal", e.what(), 500);
    }
  }

  InferenceBackend& backend_;
  httplib::Server server_;
  std::thread thread_;
  std::mutex mu_;
  int port_ = -1;
};

}  // namespace precot
