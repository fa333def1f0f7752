#pragma once

// Difference-of-means probes on pre-CoT residual activations.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/inference_backend.hpp"

namespace precot {

// Where a training label came from. Probes are fitted on the model's own
// final answers; gold labels are rejected.
enum class LabelSource { model_answer, gold };

inline std::string_view to_string(LabelSource s) { return s == LabelSource::gold ? "gold" : "model_answer"; }

struct LabeledActivation {
  std::string instance_id;
  Vec values;
  Answer label = Answer::yes;
  LabelSource source = LabelSource::model_answer;
};

struct Probe {
  int layer = 0;
  Vec direction;  // mean_yes - mean_no
  Vec mean_yes;
  Vec mean_no;
  std::size_t n_yes = 0;
  std::size_t n_no = 0;
  std::optional<double> test_auc;
};

struct ProbeScore {
  std::string instance_id;
  double score = 0.0;
  Answer label = Answer::yes;
};

inline void to_json(nlohmann::json& j, const Probe& p) {
  j = nlohmann::json{{"layer", p.layer},       {"direction", p.direction}, {"mean_yes", p.mean_yes},
                     {"mean_no", p.mean_no},   {"n_yes", p.n_yes},         {"n_no", p.n_no},
                     {"test_auc", p.test_auc ? nlohmann::json(*p.test_auc) : nlohmann::json(nullptr)}};
}

inline void from_json(const nlohmann::json& j, Probe& p) {
  p.layer = j.at("layer").get<int>();
  p.direction = j.at("direction").get<Vec>();
  p.mean_yes = j.at("mean_yes").get<Vec>();
  p.mean_no = j.at("mean_no").get<Vec>();
  p.n_yes = j.at("n_yes").get<std::size_t>();
  p.n_no = j.at("n_no").get<std::size_t>();
  if (j.contains("test_auc") && !j["test_auc"].is_null()) p.test_auc = j["test_auc"].get<double>();
}

namespace detail {

// Mean over rows summed in a canonical order, so the result does not depend
// on the order the caller supplied.
inline Vec canonical_mean(std::vector<const Vec*> rows) {
  std::sort(rows.begin(), rows.end(), [](const Vec* a, const Vec* b) {
    return std::lexicographical_compare(a->begin(), a->end(), b->begin(), b->end());
  });
  Vec mean(rows.front()->size(), 0.0);
  for (const Vec* r : rows) axpy(mean, 1.0, *r);
  for (auto& v : mean) v /= static_cast<double>(rows.size());
  return mean;
}

}  // namespace detail

inline Probe fit_probe(std::span<const LabeledActivation> train, int layer) {
  std::vector<const Vec*> yes;
  std::vector<const Vec*> no;
  std::size_t dim = 0;
  for (const auto& ex : train) {
    if (ex.source == LabelSource::gold)
      throw ProvenanceError("fit_probe: gold label supplied for " + ex.instance_id +
                            "; probes must be trained on model answers");
    if (dim == 0) dim = ex.values.size();
    if (ex.values.size() != dim || dim == 0) throw ConfigError("fit_probe: inconsistent activation dimension");
    (ex.label == Answer::yes ? yes : no).push_back(&ex.values);
  }
  if (yes.empty() || no.empty())
    throw DegenerateTrainingError("fit_probe: layer " + std::to_string(layer) + " has " +
                                  std::to_string(yes.size()) + " yes and " + std::to_string(no.size()) +
                                  " no examples; both classes are required");
  Probe p;
  p.layer = layer;
  p.n_yes = yes.size();
  p.n_no = no.size();
  p.mean_yes = detail::canonical_mean(std::move(yes));
  p.mean_no = detail::canonical_mean(std::move(no));
  p.direction = sub(p.mean_yes, p.mean_no);
  if (norm(p.direction) == 0.0)
    throw DegenerateProbeError("fit_probe: class means coincide at layer " + std::to_string(layer));
  return p;
}

inline double score(const Probe& probe, std::span<const double> activation) {
  if (activation.size() != probe.direction.size()) throw ConfigError("score: dimension mismatch");
  if (norm(activation) == 0.0) throw UndefinedScoreError("score: zero-norm activation");
  return cosine(activation, probe.direction);
}

// Mann-Whitney U / (n_yes * n_no) with midranks for ties.
inline double auc(std::span<const ProbeScore> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a].score < scores[b].score; });
  double rank_sum_yes = 0.0;
  std::size_t n_yes = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && scores[order[j]].score == scores[order[i]].score) ++j;
    // Ranks i+1 .. j share the midrank.
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (scores[order[k]].label == Answer::yes) {
        rank_sum_yes += midrank;
        ++n_yes;
      }
    }
    i = j;
  }
  const std::size_t n_no = scores.size() - n_yes;
  if (n_yes == 0 || n_no == 0) throw UndefinedAucError("auc: both labels are required");
  const double ny = static_cast<double>(n_yes);
  const double u = rank_sum_yes - ny * (ny + 1.0) / 2.0;
  return u / (ny * static_cast<double>(n_no));
}

// One instance's t0 activations across layers, labeled by the model's answer.
struct ActivationRecord {
  std::string instance_id;
  Answer label = Answer::yes;
  LabelSource source = LabelSource::model_answer;
  std::map<int, Vec> layers;
};

inline std::vector<LabeledActivation> at_layer(std::span<const ActivationRecord> records, int layer) {
  std::vector<LabeledActivation> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto it = r.layers.find(layer);
    if (it == r.layers.end()) throw LookupError("no activation for " + r.instance_id + " at layer " + std::to_string(layer));
    out.push_back({r.instance_id, it->second, r.label, r.source});
  }
  return out;
}

inline std::vector<ProbeScore> score_all(const Probe& probe, std::span<const LabeledActivation> test) {
  std::vector<ProbeScore> out;
  out.reserve(test.size());
  for (const auto& ex : test) out.push_back({ex.instance_id, score(probe, ex.values), ex.label});
  return out;
}

struct LayerResult {
  std::optional<Probe> probe;
  std::optional<double> auc;
  std::string error;
  bool ok() const { return probe.has_value() && auc.has_value(); }
};

using LayerSweep = std::map<int, LayerResult>;

inline LayerSweep layer_sweep(std::span<const ActivationRecord> train, std::span<const ActivationRecord> test,
                              std::span<const int> layers) {
  if (layers.empty()) throw SweepError("layer_sweep: empty layer set");
  LayerSweep out;
  for (int layer : layers) {
    LayerResult res;
    try {
      Probe p = fit_probe(at_layer(train, layer), layer);
      const auto test_at = at_layer(test, layer);
      res.auc = auc(score_all(p, test_at));
      p.test_auc = res.auc;
      res.probe = std::move(p);
    } catch (const Error& e) {
      res.probe.reset();
      res.auc.reset();
      res.error = e.what();
    }
    out[layer] = std::move(res);
  }
  return out;
}

// argmax of test AUC; ties go to the smallest layer index.
inline int select_best_layer(const LayerSweep& sweep) {
  std::optional<int> best;
  double best_auc = -1.0;
  for (const auto& [layer, res] : sweep) {
    if (!res.ok()) continue;
    if (*res.auc > best_auc) {
      best = layer;
      best_auc = *res.auc;
    }
  }
  if (!best) throw SweepError("select_best_layer: every layer failed");
  return *best;
}

// ---------------------------------------------------------------------------
// Activation cache
// ---------------------------------------------------------------------------

// t0 activations on disk, one JSONL record per (instance, layer), keyed within
// a file that belongs to one (backend, task). A record is reused only when its
// prompt hash matches, so re-rendered prompts are captured afresh.
class ActivationCache {
 public:
  explicit ActivationCache(std::filesystem::path file) : file_(std::move(file)) {
    if (!std::filesystem::exists(file_)) return;
    std::ifstream in(file_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;  // torn final line from an interrupted run
      entries_[{j.at("instance_id").get<std::string>(), j.at("layer").get<int>()}] = {
          j.at("prompt_hash").get<std::string>(), j.at("values").get<Vec>()};
    }
  }

  const std::filesystem::path& file() const { return file_; }
  std::size_t size() const { return entries_.size(); }

  std::optional<Vec> get(const std::string& instance_id, int layer, const std::string& prompt_hash) const {
    auto it = entries_.find({instance_id, layer});
    if (it == entries_.end() || it->second.first != prompt_hash) return std::nullopt;
    return it->second.second;
  }

  void put(const std::string& instance_id, int layer, const std::string& prompt_hash, std::size_t position,
           const Vec& values) {
    std::filesystem::create_directories(file_.parent_path());
    std::ofstream out(file_, std::ios::binary | std::ios::app);
    out << nlohmann::json{{"instance_id", instance_id}, {"layer", layer},     {"prompt_hash", prompt_hash},
                          {"position", position},       {"values", values}}.dump()
        << '\n';
    entries_[{instance_id, layer}] = {prompt_hash, values};
  }

 private:
  std::filesystem::path file_;
  std::map<std::pair<std::string, int>, std::pair<std::string, Vec>> entries_;
};

// Activations for the requested layers, from the cache where possible and
// from one backend forward pass for whatever is missing.
inline std::map<int, Vec> capture_cached(InferenceBackend& backend, ActivationCache& cache,
                                         const std::string& instance_id, const std::string& prompt,
                                         std::span<const int> layers) {
  const std::string prompt_hash = hex64(fnv1a64(prompt));
  std::map<int, Vec> out;
  std::vector<int> missing;
  for (int l : layers) {
    if (auto v = cache.get(instance_id, l, prompt_hash)) out[l] = std::move(*v);
    else missing.push_back(l);
  }
  if (!missing.empty()) {
    for (auto& [l, a] : backend.capture_pre_cot_activations(prompt, missing)) {
      cache.put(instance_id, l, prompt_hash, a.position, a.values);
      out[l] = std::move(a.values);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logit lens
// ---------------------------------------------------------------------------

// Keeps purely alphabetical tokens without interior capitals. Leading
// word-boundary markers (space, "▁", "Ġ") are ignored.
inline bool lens_token_allowed(std::string_view token) {
  while (true) {
    if (token.starts_with(" ")) token.remove_prefix(1);
    else if (token.starts_with("\xE2\x96\x81")) token.remove_prefix(3);  // ▁
    else if (token.starts_with("\xC4\xA0")) token.remove_prefix(2);      // Ġ
    else break;
  }
  if (token.empty()) return false;
  for (std::size_t i = 0; i < token.size(); ++i) {
    const auto c = static_cast<unsigned char>(token[i]);
    if (!std::isalpha(c)) return false;
    if (i > 0 && std::isupper(c)) return false;
  }
  return true;
}

struct LensResult {
  std::vector<TokenLogit> positive;
  std::vector<TokenLogit> negative;
};

inline std::vector<TokenLogit> top_k_filtered(std::vector<TokenLogit> logits, std::size_t k,
                                              const std::function<bool(std::string_view)>& filter) {
  std::erase_if(logits, [&](const TokenLogit& t) { return !filter(t.token); });
  std::sort(logits.begin(), logits.end(), [](const TokenLogit& a, const TokenLogit& b) {
    return a.logit != b.logit ? a.logit > b.logit : a.token < b.token;
  });
  if (logits.size() > k) logits.resize(k);
  return logits;
}

inline LensResult logit_lens(const Probe& probe, InferenceBackend& backend, std::size_t k = 5,
                             const std::function<bool(std::string_view)>& filter = lens_token_allowed) {
  LensResult out;
  out.positive = top_k_filtered(backend.unembed(probe.direction), k, filter);
  out.negative = top_k_filtered(backend.unembed(scaled(probe.direction, -1.0)), k, filter);
  return out;
}

}  // namespace precot
