#pragma once

// The single declarative experiment config. Output locations are not part of
// it, so the config hash identifies an experiment independent of where its
// results are written.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/inference_backend.hpp"
#include "precot/llm_client.hpp"
#include "precot/planted_backend.hpp"
#include "precot/response_parsing.hpp"
#include "precot/steering_engine.hpp"
#include "precot/task_corpus.hpp"

#ifndef PRECOT_DEFAULT_DATA_DIR
#define PRECOT_DEFAULT_DATA_DIR "data"
#endif
#ifndef PRECOT_DEFAULT_ASSET_DIR
#define PRECOT_DEFAULT_ASSET_DIR "assets"
#endif

namespace precot {

struct BackendConfig {
  std::string name = "planted";  // planted | remote
  PlantedConfig planted;
  std::string url = "http://127.0.0.1:8765";
  int read_timeout_sec = 600;
};

struct TaskConfig {
  TaskName name = TaskName::sports_understanding;
  std::string data_dir = PRECOT_DEFAULT_DATA_DIR;
  std::int64_t split_seed = 0;
  std::int64_t option_seed = 0;
  std::size_t train_size = 500;
  std::size_t test_size = 500;
  // When > 0, a synthetic source of this many items is generated under the
  // output directory instead of reading data_dir/<task>/source.*.
  std::size_t synthetic_items = 0;
};

struct ClientSettings {
  std::string provider = "synthetic";  // synthetic | openai
  OpenAIClientConfig openai;
  int max_retries = 4;
};

struct JudgeSettings {
  ClientSettings client;
  std::size_t sample_cap = 50;
  std::size_t min_n = 20;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  BackendConfig backend;
  TaskConfig task;
  std::vector<int> layers;  // empty: every layer
  DecodeParams decode;
  SweepConfig steering;
  bool auto_layer = true;  // steering.layer := best probe layer
  std::size_t intervention_n = 50;
  JudgeSettings judge;
  ClientSettings editor;
  Strictness strictness = Strictness::tolerant;
  std::string assets_dir = PRECOT_DEFAULT_ASSET_DIR;
};

inline nlohmann::json client_to_json(const ClientSettings& c) {
  return {{"provider", c.provider},
          {"model", c.openai.model},
          {"base_url", c.openai.base_url},
          {"path", c.openai.path},
          {"api_key_env", c.openai.api_key_env},
          {"requests_per_minute", c.openai.requests_per_minute},
          {"max_parallel", c.openai.max_parallel},
          {"max_retries", c.max_retries}};
}

inline ClientSettings client_from_json(const nlohmann::json& j, ClientSettings c = {}) {
  c.provider = j.value("provider", c.provider);
  c.openai.model = j.value("model", c.openai.model);
  c.openai.base_url = j.value("base_url", c.openai.base_url);
  c.openai.path = j.value("path", c.openai.path);
  c.openai.api_key_env = j.value("api_key_env", c.openai.api_key_env);
  c.openai.requests_per_minute = j.value("requests_per_minute", c.openai.requests_per_minute);
  c.openai.max_parallel = j.value("max_parallel", c.openai.max_parallel);
  c.max_retries = j.value("max_retries", c.max_retries);
  if (c.provider != "synthetic" && c.provider != "openai") throw ConfigError("unknown client provider: " + c.provider);
  if (j.contains("api_key")) throw ConfigError("credentials must come from the environment (api_key_env), not the config");
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json backend = {{"name", c.backend.name}};
  if (c.backend.name == "planted") backend["planted"] = c.backend.planted;
  else backend["url"] = c.backend.url;
  nlohmann::json steering = c.steering;
  steering.erase("seed");  // stage seeds derive from the top-level seed
  if (c.auto_layer) steering["layer"] = "auto";
  nlohmann::json judge = client_to_json(c.judge.client);
  judge["sample_cap"] = c.judge.sample_cap;
  judge["min_n"] = c.judge.min_n;
  return {{"seed", c.seed},
          {"backend", backend},
          {"task",
           {{"name", to_string(c.task.name)},
            {"data_dir", c.task.data_dir},
            {"split_seed", c.task.split_seed},
            {"option_seed", c.task.option_seed},
            {"train_size", c.task.train_size},
            {"test_size", c.task.test_size},
            {"synthetic_items", c.task.synthetic_items}}},
          {"layers", c.layers},
          {"decode", {{"temperature", c.decode.temperature}, {"max_new_tokens", c.decode.max_new_tokens}}},
          {"steering", steering},
          {"intervention", {{"n", c.intervention_n}}},
          {"judge", judge},
          {"editor", client_to_json(c.editor)},
          {"parsing", {{"strictness", c.strictness == Strictness::strict ? "strict" : "tolerant"}}},
          {"assets_dir", c.assets_dir}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("backend")) {
      const auto& b = j["backend"];
      c.backend.name = b.value("name", c.backend.name);
      if (c.backend.name != "planted" && c.backend.name != "remote")
        throw ConfigError("backend.name must be planted or remote");
      if (b.contains("planted")) c.backend.planted = b["planted"].get<PlantedConfig>();
      c.backend.url = b.value("url", c.backend.url);
      c.backend.read_timeout_sec = b.value("read_timeout_sec", c.backend.read_timeout_sec);
    }
    if (j.contains("task")) {
      const auto& t = j["task"];
      if (t.contains("name")) c.task.name = parse_task_name(t["name"].get<std::string>());
      c.task.data_dir = t.value("data_dir", c.task.data_dir);
      c.task.split_seed = t.value("split_seed", c.task.split_seed);
      c.task.option_seed = t.value("option_seed", c.task.option_seed);
      c.task.train_size = t.value("train_size", c.task.train_size);
      c.task.test_size = t.value("test_size", c.task.test_size);
      c.task.synthetic_items = t.value("synthetic_items", c.task.synthetic_items);
    }
    if (j.contains("layers") && j["layers"].is_array()) c.layers = j["layers"].get<std::vector<int>>();
    if (j.contains("decode")) {
      c.decode.temperature = j["decode"].value("temperature", c.decode.temperature);
      c.decode.max_new_tokens = j["decode"].value("max_new_tokens", c.decode.max_new_tokens);
    }
    if (j.contains("steering")) {
      nlohmann::json s = j["steering"];
      c.auto_layer = !s.contains("layer") || s["layer"] == "auto";
      if (c.auto_layer) s.erase("layer");
      c.steering = s.get<SweepConfig>();
    }
    if (j.contains("intervention")) c.intervention_n = j["intervention"].value("n", c.intervention_n);
    if (j.contains("judge")) {
      c.judge.client = client_from_json(j["judge"], c.judge.client);
      c.judge.sample_cap = j["judge"].value("sample_cap", c.judge.sample_cap);
      c.judge.min_n = j["judge"].value("min_n", c.judge.min_n);
    }
    // The editor defaults to the judge's provider and model.
    c.editor = j.contains("editor") ? client_from_json(j["editor"], c.judge.client) : c.judge.client;
    if (j.contains("parsing")) c.strictness = parse_strictness(j["parsing"].value("strictness", "tolerant"));
    c.assets_dir = j.value("assets_dir", c.assets_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (c.decode.temperature < 0.0) throw ConfigError("decode.temperature must be >= 0");
  c.steering.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path.string());
  return config_from_json(j);
}

}  // namespace precot
