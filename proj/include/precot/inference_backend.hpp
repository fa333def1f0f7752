#pragma once

// Uniform causal-LM interface: sampling, residual capture at the last
// pre-CoT token, additive steering on decoded positions, unembedding.
//
// Layer ℓ denotes the residual stream after block ℓ, ℓ ∈ [0, num_layers).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"

namespace precot {

struct BackendDescriptor {
  std::string name;
  int num_layers = 1;
  int hidden_dim = 2;
  bool supports_unembedding = false;
  std::size_t context_limit = 8192;
};

struct DecodeParams {
  double temperature = 0.7;
  int max_new_tokens = 256;
  std::uint64_t rng_seed = 0;
};

struct ActivationVector {
  int layer = 0;
  std::size_t position = 0;
  Vec values;
};

using ActivationMap = std::map<int, ActivationVector>;

struct SteeringSpec {
  int layer = 0;
  Vec direction;
  double alpha = 0.0;
};

// Compact description of the edit that produced a generation.
struct SteeringSummary {
  int layer = 0;
  double alpha = 0.0;
  double direction_norm = 0.0;
};

struct GenerationRecord {
  std::string prompt;
  std::string text;
  std::vector<std::string> tokens;
  std::size_t prompt_tokens = 0;
  std::string finish_reason;  // "stop" or "length"
  DecodeParams params;
  std::optional<SteeringSummary> steering;
};

struct TokenLogit {
  std::string token;
  double logit = 0.0;
};

inline void to_json(nlohmann::json& j, const DecodeParams& p) {
  j = nlohmann::json{{"temperature", p.temperature}, {"max_new_tokens", p.max_new_tokens}, {"rng_seed", p.rng_seed}};
}

inline void from_json(const nlohmann::json& j, DecodeParams& p) {
  p.temperature = j.value("temperature", 0.7);
  p.max_new_tokens = j.value("max_new_tokens", 256);
  p.rng_seed = j.value("rng_seed", std::uint64_t{0});
}

inline void to_json(nlohmann::json& j, const GenerationRecord& g) {
  j = nlohmann::json{{"text", g.text},
                     {"tokens", g.tokens},
                     {"prompt_tokens", g.prompt_tokens},
                     {"finish_reason", g.finish_reason},
                     {"params", g.params}};
  if (g.steering) {
    j["steering"] = {{"layer", g.steering->layer},
                     {"alpha", g.steering->alpha},
                     {"direction_norm", g.steering->direction_norm}};
  } else {
    j["steering"] = nullptr;
  }
}

inline void from_json(const nlohmann::json& j, GenerationRecord& g) {
  g.text = j.at("text").get<std::string>();
  g.tokens = j.value("tokens", std::vector<std::string>{});
  g.prompt_tokens = j.value("prompt_tokens", std::size_t{0});
  g.finish_reason = j.value("finish_reason", "");
  g.params = j.value("params", DecodeParams{});
  if (j.contains("prompt")) g.prompt = j["prompt"].get<std::string>();
  if (j.contains("steering") && !j["steering"].is_null()) {
    const auto& s = j["steering"];
    g.steering = SteeringSummary{s.at("layer").get<int>(), s.at("alpha").get<double>(),
                                 s.at("direction_norm").get<double>()};
  }
}

class InferenceBackend {
 public:
  virtual ~InferenceBackend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;

  // Residual state at t0 for each requested layer, from one forward pass.
  ActivationMap capture_pre_cot_activations(std::string_view prompt, std::span<const int> layers) {
    for (int l : layers) check_layer(l);
    ActivationMap out = do_capture(prompt, layers);
    for (int l : layers) {
      auto it = out.find(l);
      if (it == out.end()) throw Error("backend did not return layer " + std::to_string(l));
      if (it->second.values.size() != static_cast<std::size_t>(descriptor().hidden_dim))
        throw Error("backend returned wrong hidden_dim for layer " + std::to_string(l));
      if (!all_finite(it->second.values)) throw Error("non-finite activation at layer " + std::to_string(l));
    }
    std::erase_if(out, [&](const auto& kv) {
      return std::find(layers.begin(), layers.end(), kv.first) == layers.end();
    });
    return out;
  }

  GenerationRecord generate(std::string_view prompt, const DecodeParams& params) {
    check_params(params);
    return do_generate(prompt, params, nullptr);
  }

  // Adds alpha * direction to the layer's residual at every decoded position
  // t > t0. Prompt positions are left untouched.
  GenerationRecord generate_with_steering(std::string_view prompt, const DecodeParams& params,
                                          const SteeringSpec& spec) {
    check_params(params);
    check_layer(spec.layer);
    if (spec.direction.size() != static_cast<std::size_t>(descriptor().hidden_dim))
      throw ConfigError("steering direction has dimension " + std::to_string(spec.direction.size()) +
                        ", backend hidden_dim is " + std::to_string(descriptor().hidden_dim));
    if (!all_finite(spec.direction) || !std::isfinite(spec.alpha))
      throw ConfigError("steering spec contains non-finite values");
    if (norm(spec.direction) == 0.0) throw ConfigError("steering direction has zero norm");
    return do_generate(prompt, params, &spec);
  }

  void check_layer(int layer) const {
    if (layer < 0 || layer >= descriptor().num_layers)
      throw ConfigError("layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(descriptor().num_layers) + ")");
  }

  std::vector<TokenLogit> unembed(std::span<const double> vec) {
    if (!descriptor().supports_unembedding)
      throw CapabilityError("backend '" + descriptor().name + "' does not support unembedding");
    if (vec.size() != static_cast<std::size_t>(descriptor().hidden_dim))
      throw ConfigError("unembed: vector dimension mismatch");
    return do_unembed(vec);
  }

 protected:
  virtual ActivationMap do_capture(std::string_view prompt, std::span<const int> layers) = 0;
  virtual GenerationRecord do_generate(std::string_view prompt, const DecodeParams& params,
                                       const SteeringSpec* steering) = 0;
  virtual std::vector<TokenLogit> do_unembed(std::span<const double> vec) = 0;

 private:
  static void check_params(const DecodeParams& p) {
    if (!(p.temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (p.max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
  }
};

}  // namespace precot
