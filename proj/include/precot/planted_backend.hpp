#pragma once

// A deterministic toy language model with a known ("planted") answer
// direction. It exists so probe fitting, steering sweeps and the reporting
// stack can be checked against analytically known ground truth without a GPU.
//
// Geometry (separation Δ = ‖μ_yes − μ_no‖, unit planted direction u):
//   layer p (planted):  x = b_p + (±Δ/2)·u + noise,  b_p ⟂ u
//   other layers:       x = b_ℓ + noise            (no label information)
// The answer is a threshold readout of the layer-p projection onto u,
// averaged over decoded positions. An edit at layer ℓ ≤ p reaches the
// readout (residual edits propagate downstream); edits above p do not.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "precot/core.hpp"
#include "precot/inference_backend.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

struct PlantedConfig {
  int hidden_dim = 64;
  int num_layers = 8;
  int planted_layer = 4;
  double separation = 1.0;
  double noise_scale = 0.1;
  std::uint64_t seed = 0;
  double base_norm = 2.0;          // ‖b_ℓ‖ in units of separation
  double readout_gain = 20.0;      // yes/no logit gap per separation of projection
  double conviction_spread = 6.0;  // per-instance extra margin, uniform in [0, spread]·Δ
  double garble_norm = 10.0;       // ‖edit‖/Δ at which CoT degenerates (0 disables)
  double collapse_norm = 16.0;     // ‖edit‖/Δ at which no answer is emitted (0 disables)
  double flip_fraction = 0.0;      // share of instances whose planted belief contradicts gold
  double cot_reliance = 0.0;       // share of instances that follow a premise stated in a supplied CoT
  std::size_t context_limit = 16384;
};

inline void to_json(nlohmann::json& j, const PlantedConfig& c) {
  j = nlohmann::json{{"hidden_dim", c.hidden_dim},
                     {"num_layers", c.num_layers},
                     {"planted_layer", c.planted_layer},
                     {"separation", c.separation},
                     {"noise_scale", c.noise_scale},
                     {"seed", c.seed},
                     {"base_norm", c.base_norm},
                     {"readout_gain", c.readout_gain},
                     {"conviction_spread", c.conviction_spread},
                     {"garble_norm", c.garble_norm},
                     {"collapse_norm", c.collapse_norm},
                     {"flip_fraction", c.flip_fraction},
                     {"cot_reliance", c.cot_reliance},
                     {"context_limit", c.context_limit}};
}

inline void from_json(const nlohmann::json& j, PlantedConfig& c) {
  PlantedConfig d;
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.planted_layer = j.value("planted_layer", d.planted_layer);
  c.separation = j.value("separation", d.separation);
  c.noise_scale = j.value("noise_scale", d.noise_scale);
  c.seed = j.value("seed", d.seed);
  c.base_norm = j.value("base_norm", d.base_norm);
  c.readout_gain = j.value("readout_gain", d.readout_gain);
  c.conviction_spread = j.value("conviction_spread", d.conviction_spread);
  c.garble_norm = j.value("garble_norm", d.garble_norm);
  c.collapse_norm = j.value("collapse_norm", d.collapse_norm);
  c.flip_fraction = j.value("flip_fraction", d.flip_fraction);
  c.cot_reliance = j.value("cot_reliance", d.cot_reliance);
  c.context_limit = j.value("context_limit", d.context_limit);
}

// Splits text into word / punctuation pieces; leading whitespace attaches to
// the following piece, so concatenating the pieces reproduces the text.
inline std::vector<std::string> toy_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == text.size()) {
      out.emplace_back(text.substr(i));
      break;
    }
    std::size_t k = j;
    if (std::isalnum(static_cast<unsigned char>(text[k]))) {
      while (k < text.size() && std::isalnum(static_cast<unsigned char>(text[k]))) ++k;
    } else if (text.substr(k).starts_with("(A)") || text.substr(k).starts_with("(B)")) {
      k += 3;
    } else {
      ++k;
    }
    out.emplace_back(text.substr(i, k - i));
    i = k;
  }
  return out;
}

namespace detail {

struct ToyWord {
  const char* text;
  double alignment;  // unembedding row component along u
};

// Fixed toy vocabulary: answer-format pieces, the templated CoT words, and a
// few lens probes (camel-case and non-alphabetic entries exercise filtering).
inline const std::vector<ToyWord>& toy_vocabulary() {
  static const std::vector<ToyWord> vocab = {
      {" The", 0}, {" the", 0}, {" best", 0}, {" answer", 0}, {" is", 0}, {":", 0}, {" (A)", 0}, {" (B)", 0},
      {".", 0}, {",", 0}, {" So", 0}, {" question", 0}, {" asks", 0}, {" about", 0}, {" details", 0},
      {" are", 0}, {" consistent", 1.6}, {" inconsistent", -1.6}, {" This", 0}, {" needs", 0}, {" care", 0},
      {" Checking", 0}, {" each", 0}, {" part", 0}, {" in", 0}, {" turn", 0}, {" yes", 3.0}, {" no", -3.0},
      {" Yes", 2.5}, {" No", -2.5}, {" plausible", 1.8}, {" implausible", -1.8}, {" possible", 1.2},
      {" impossible", -1.2}, {" true", 1.0}, {" false", -1.0}, {" correct", 0.9}, {" wrong", -0.9},
      {" iPhone", 2.8}, {" x2", -2.8}, {" McDonald", 2.2}, {"_no", -2.6}, {" 2024", 2.0}, {" maybe", 0},
      {" it", 0}, {" seems", 0}, {" and", 0}, {" or", 0}, {" not", 0}, {" of", 0}, {" to", 0}, {" a", 0},
      {" we", 0}, {" know", 0}, {" that", 0}, {" statement", 0}, {" sentence", 0}, {" action", 0},
      {" event", 0}, {" time", 0}, {" place", 0}, {" person", 0}, {" team", 0}, {" game", 0},
      {" rule", 0}, {" order", 0}, {" first", 0}, {" last", 0}, {" left", 0}, {" right", 0},
      {" before", 0}, {" after", 0}, {" because", 0}, {" given", 0}, {" facts", 0}, {" choyevness", 0},
      {" phraseology", 0}, {" neutral", 0}, {" again", 0}, {" loop", 0}, {" then", 0}, {" thus", 0},
      {" if", 0}, {" which", 0}, {" clear", 0}, {" unclear", 0}, {" appropriate", 0.7},
      {" inappropriate", -0.7}, {" anachronistic", -0.5}, {" modern", 0}, {" ancient", 0},
      {" player", 0}, {" sport", 0}, {" ball", 0}, {" goal", 0}, {" step", 0}, {" think", 0},
      {" Let", 0}, {"'s", 0}, {" by", 0}, {"\n", 0}, {"<eos>", 0}};
  return vocab;
}

inline const std::vector<std::string>& garble_words() {
  static const std::vector<std::string> words = {" choyevness", " phraseology", " neutral", " details", " again",
                                                 " loop", " maybe", " the", " of", " which", " unclear", " then"};
  return words;
}

}  // namespace detail

class PlantedBackend final : public InferenceBackend {
 public:
  explicit PlantedBackend(PlantedConfig cfg) : cfg_(cfg) {
    if (cfg_.hidden_dim < 8) throw ConfigError("planted backend requires hidden_dim >= 8");
    if (cfg_.num_layers < 1) throw ConfigError("planted backend requires num_layers >= 1");
    if (cfg_.planted_layer < 0 || cfg_.planted_layer >= cfg_.num_layers)
      throw ConfigError("planted_layer outside layer range");
    if (!(cfg_.separation > 0.0)) throw ConfigError("separation must be positive");
    if (cfg_.noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
    desc_ = {"planted", cfg_.num_layers, cfg_.hidden_dim, true, cfg_.context_limit};

    const auto dim = static_cast<std::size_t>(cfg_.hidden_dim);
    Rng geo(SeedMixer(cfg_.seed).add("geometry").value());
    direction_ = geo.normal_vector(dim);
    direction_ = scaled(direction_, 1.0 / norm(direction_));
    for (int l = 0; l < cfg_.num_layers; ++l) {
      Vec b = geo.normal_vector(dim);
      if (l == cfg_.planted_layer) axpy(b, -dot(b, direction_), direction_);
      b = scaled(b, cfg_.base_norm * cfg_.separation / norm(b));
      bases_.push_back(std::move(b));
    }
    for (const auto& w : detail::toy_vocabulary()) {
      Vec row = geo.normal_vector(dim);
      row = scaled(row, 0.3 / std::sqrt(static_cast<double>(dim)));
      axpy(row, w.alignment, direction_);
      unembedding_.push_back(std::move(row));
    }
  }

  const BackendDescriptor& descriptor() const override { return desc_; }
  const PlantedConfig& config() const { return cfg_; }

  // Unit vector u; μ_yes − μ_no = separation · u.
  const Vec& planted_direction() const { return direction_; }
  Vec class_mean(Answer a) const {
    Vec m = bases_[static_cast<std::size_t>(cfg_.planted_layer)];
    axpy(m, (a == Answer::yes ? 0.5 : -0.5) * cfg_.separation, direction_);
    return m;
  }

  // Gold labels keyed by question text; unknown questions get a hash label.
  void set_reference_labels(std::unordered_map<std::string, Answer> labels) { labels_ = std::move(labels); }
  void add_reference_labels(const std::vector<TaskInstance>& instances) {
    for (const auto& t : instances) labels_[t.question_text] = t.gold_answer;
  }

  // The belief planted for a question (gold, possibly inverted by flip_fraction).
  Answer planted_answer(std::string_view question) const {
    Answer a;
    if (auto it = labels_.find(std::string(question)); it != labels_.end()) {
      a = it->second;
    } else {
      a = (SeedMixer(cfg_.seed).add("label").add(question).value() >> 63) ? Answer::yes : Answer::no;
    }
    if (cfg_.flip_fraction > 0.0 && unit_hash("flip", question) < cfg_.flip_fraction) a = opposite(a);
    return a;
  }

  // Extra readout margin for a question, in units of separation.
  double conviction(std::string_view question) const {
    return cfg_.conviction_spread * unit_hash("conviction", question);
  }

  static std::string question_of(std::string_view prompt) {
    auto q = last_question_start(prompt);
    if (!q) return std::string(prompt);
    auto end = prompt.find("\n\nAnswer choices:", *q);
    return std::string(prompt.substr(*q, end == std::string_view::npos ? std::string_view::npos : end - *q));
  }

  // Slot that holds the "Yes, ..." option in the final question block.
  static Slot yes_slot_of(std::string_view prompt) {
    auto q = last_question_start(prompt);
    const std::size_t from = q ? *q : 0;
    auto a = prompt.find("\n(A) ", from);
    if (a != std::string_view::npos && prompt.substr(a + 5).starts_with("Yes")) return Slot::A;
    auto b = prompt.find("\n(B) ", from);
    if (b != std::string_view::npos && prompt.substr(b + 5).starts_with("Yes")) return Slot::B;
    return Slot::A;
  }

 protected:
  ActivationMap do_capture(std::string_view prompt, std::span<const int> layers) override {
    const auto t0 = locate_t0(prompt);
    const std::string question = question_of(prompt);
    ActivationMap out;
    for (int l : layers) out[l] = ActivationVector{l, t0, residual(question, l)};
    return out;
  }

  GenerationRecord do_generate(std::string_view prompt, const DecodeParams& params,
                               const SteeringSpec* steering) override {
    GenerationRecord rec;
    rec.prompt = std::string(prompt);
    rec.params = params;
    const auto prompt_tokens = toy_tokenize(prompt);
    rec.prompt_tokens = prompt_tokens.size();
    if (rec.prompt_tokens + static_cast<std::size_t>(params.max_new_tokens) > cfg_.context_limit)
      throw ContextOverflowError(rec.prompt_tokens, static_cast<std::size_t>(params.max_new_tokens),
                                 cfg_.context_limit);
    if (steering) rec.steering = SteeringSummary{steering->layer, steering->alpha, norm(steering->direction)};

    const std::string question = question_of(prompt);
    const Answer belief = planted_answer(question);
    const double sign = belief == Answer::yes ? 1.0 : -1.0;
    const Slot yes_slot = yes_slot_of(prompt);
    const auto p = static_cast<std::size_t>(cfg_.planted_layer);
    const Vec x0 = residual(question, cfg_.planted_layer);
    const double delta = cfg_.separation;
    const double margin = sign * conviction(question) * delta;

    Rng rng(SeedMixer(params.rng_seed).add("decode").value());
    const double edit_norm = steering ? std::abs(steering->alpha) * norm(steering->direction) / delta : 0.0;
    const bool collapsed = cfg_.collapse_norm > 0.0 && edit_norm >= cfg_.collapse_norm;
    const bool garbled = cfg_.garble_norm > 0.0 && edit_norm >= cfg_.garble_norm;

    // Decode-position state at layer p: the t0 belief carried forward plus
    // the edit, when the edit is applied at or below p.
    auto readout_at_step = [&](double shift_weight) {
      Vec x = x0;
      if (steering && static_cast<std::size_t>(steering->layer) <= p)
        axpy(x, shift_weight * steering->alpha, steering->direction);
      return dot(sub(x, bases_[p]), direction_) + margin;
    };

    auto sample_answer = [&](double readout) {
      if (params.temperature == 0.0) return readout >= 0.0 ? Answer::yes : Answer::no;
      const double logit = cfg_.readout_gain * readout / (delta * params.temperature);
      const double p_yes = 1.0 / (1.0 + std::exp(-logit));
      return rng.uniform() < p_yes ? Answer::yes : Answer::no;
    };

    std::vector<std::string> out;
    auto emit = [&](std::initializer_list<const char*> pieces) {
      for (const char* s : pieces) out.emplace_back(s);
    };
    auto letter_token = [&](Answer a) {
      const Slot s = a == Answer::yes ? yes_slot : other(yes_slot);
      return s == Slot::A ? " (A)" : " (B)";
    };

    const Region region = classify_region(prompt);
    if (collapsed) {
      const auto& g = detail::garble_words();
      for (int i = 0; i < 24; ++i) out.push_back(g[rng.below(g.size())]);
    } else if (region == Region::fresh_cot) {
      // Premises track the belief under half the edit; the answer under all of it.
      double acc = 0.0;
      int steps = 0;
      const Answer premise = readout_at_step(0.5) >= 0.0 ? Answer::yes : Answer::no;
      if (garbled) {
        const auto& g = detail::garble_words();
        for (int i = 0; i < 12; ++i) {
          out.push_back(g[rng.below(g.size())]);
          acc += readout_at_step(1.0);
          ++steps;
        }
        out.emplace_back(".");
      } else {
        emit({" The", " question", " asks", " about", " the", " details", "."});
        if (params.temperature > 0.0 && rng.uniform() < 0.5) emit({" This", " needs", " care", "."});
        if (premise == Answer::yes) emit({" The", " details", " are", " consistent", "."});
        else emit({" The", " details", " are", " inconsistent", "."});
        for (std::size_t i = 0; i < out.size(); ++i) {
          acc += readout_at_step(1.0);
          ++steps;
        }
      }
      const Answer answer = sample_answer(acc / std::max(steps, 1));
      if (!garbled) {
        out.emplace_back(" So");
        emit({",", " the", " answer", " is"});
        out.emplace_back(answer == Answer::yes ? " yes" : " no");
        out.emplace_back(".");
      }
      emit({" The", " best", " answer", " is", ":"});
      out.emplace_back(letter_token(answer));
    } else {
      Answer answer = sample_answer(readout_at_step(1.0));
      // A supplied CoT that states a premise overrides the belief for the
      // instances that rely on their reasoning.
      if (region != Region::no_cot && unit_hash("reliance", question) < cfg_.cot_reliance) {
        const std::string_view tail = prompt.substr(prompt.rfind(kCotPreamble));
        if (tail.find("details are inconsistent") != std::string_view::npos) answer = Answer::no;
        else if (tail.find("details are consistent") != std::string_view::npos) answer = Answer::yes;
      }
      if (region != Region::continuation_needs_letter) emit({" The", " best", " answer", " is", ":"});
      out.emplace_back(letter_token(answer));
    }

    const auto limit = static_cast<std::size_t>(params.max_new_tokens);
    rec.finish_reason = out.size() > limit ? "length" : "stop";
    if (out.size() > limit) out.resize(limit);
    rec.tokens = out;
    for (const auto& t : out) rec.text += t;
    return rec;
  }

  std::vector<TokenLogit> do_unembed(std::span<const double> vec) override {
    std::vector<TokenLogit> out;
    const auto& vocab = detail::toy_vocabulary();
    for (std::size_t i = 0; i < vocab.size(); ++i) out.push_back({vocab[i].text, dot(unembedding_[i], vec)});
    return out;
  }

 private:
  enum class Region { fresh_cot, continuation_needs_letter, continuation_needs_statement, no_cot };

  static std::optional<std::size_t> last_question_start(std::string_view prompt) {
    std::size_t pos = prompt.rfind("\nQ: ");
    if (pos != std::string_view::npos) return pos + 4;
    if (prompt.starts_with("Q: ")) return 3;
    return std::nullopt;
  }

  static Region classify_region(std::string_view prompt) {
    const auto q = last_question_start(prompt).value_or(0);
    const auto pre = prompt.find(kCotPreamble, q);
    if (pre == std::string_view::npos) return Region::no_cot;
    const std::string tail = rtrim(std::string(prompt.substr(pre + kCotPreamble.size())));
    if (tail.empty()) return Region::fresh_cot;
    std::string lower;
    for (char c : tail) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (lower.ends_with("best answer is:") || lower.ends_with("best answer is")) {
      return Region::continuation_needs_letter;
    }
    return Region::continuation_needs_statement;
  }

  std::size_t locate_t0(std::string_view prompt) const {
    const auto tokens = toy_tokenize(prompt);
    if (tokens.empty() || tokens.back() != ":" || !prompt.ends_with(kCotPreamble))
      throw T0MismatchError("prompt does not end with the CoT preamble colon");
    return tokens.size() - 1;
  }

  double unit_hash(std::string_view salt, std::string_view question) const {
    return static_cast<double>(SeedMixer(cfg_.seed).add(salt).add(question).value() >> 11) * 0x1.0p-53;
  }

  Vec residual(const std::string& question, int layer) const {
    const auto l = static_cast<std::size_t>(layer);
    Vec x = bases_[l];
    Rng noise(SeedMixer(cfg_.seed).add("noise").add(question).add(layer).value());
    for (auto& v : x) v += cfg_.noise_scale * noise.normal();
    if (layer == cfg_.planted_layer) {
      const double s = planted_answer(question) == Answer::yes ? 0.5 : -0.5;
      axpy(x, s * cfg_.separation, direction_);
    }
    return x;
  }

  PlantedConfig cfg_;
  BackendDescriptor desc_;
  Vec direction_;
  std::vector<Vec> bases_;
  std::vector<Vec> unembedding_;
  std::unordered_map<std::string, Answer> labels_;
};

inline std::unique_ptr<PlantedBackend> make_planted_backend(int hidden_dim, int num_layers, int planted_layer,
                                                            double noise_scale, std::uint64_t seed) {
  PlantedConfig cfg;
  cfg.hidden_dim = hidden_dim;
  cfg.num_layers = num_layers;
  cfg.planted_layer = planted_layer;
  cfg.noise_scale = noise_scale;
  cfg.seed = seed;
  return std::make_unique<PlantedBackend>(cfg);
}

}  // namespace precot
