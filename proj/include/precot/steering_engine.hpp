#pragma once

// Steering sweeps along the probe direction and the per-example orthogonal
// norm-matched baseline, with Wilson intervals on flip rates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/evaluation.hpp"
#include "precot/inference_backend.hpp"
#include "precot/probe_lab.hpp"
#include "precot/response_parsing.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

// probe_yes pushes toward "yes" (α ≥ 0, run on S_no); probe_no pushes toward
// "no" (α ≤ 0, run on S_yes).
enum class DirectionKind { probe_yes, probe_no, orthogonal };

inline std::string_view to_string(DirectionKind k) {
  switch (k) {
    case DirectionKind::probe_yes: return "probe_yes";
    case DirectionKind::probe_no: return "probe_no";
    case DirectionKind::orthogonal: return "orthogonal";
  }
  return "orthogonal";
}

inline DirectionKind parse_direction_kind(std::string_view s) {
  if (s == "probe_yes") return DirectionKind::probe_yes;
  if (s == "probe_no") return DirectionKind::probe_no;
  if (s == "orthogonal") return DirectionKind::orthogonal;
  throw ConfigError("unknown direction kind: " + std::string(s));
}

inline std::vector<double> alpha_grid(double step, int count) {
  std::vector<double> out;
  for (int i = 0; i <= count; ++i) out.push_back(step * i + 0.0);  // +0.0 turns -0 into 0
  return out;
}

struct SweepConfig {
  std::vector<double> alphas_yes = alpha_grid(2.0, 10);
  std::vector<double> alphas_no = alpha_grid(-2.0, 10);
  int layer = 0;
  std::size_t subset_cap = 50;
  bool full_subset = false;
  std::size_t baseline_n = 50;
  std::size_t min_parsed = 20;
  bool per_alpha_resample = false;
  std::uint64_t seed = 0;

  void validate() const {
    auto has_zero = [](const std::vector<double>& v) { return std::find(v.begin(), v.end(), 0.0) != v.end(); };
    if (!has_zero(alphas_yes) || !has_zero(alphas_no)) throw ConfigError("alpha grids must contain 0");
    for (double a : alphas_yes)
      if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("alphas_yes must be finite and >= 0");
    for (double a : alphas_no)
      if (!(a <= 0.0) || !std::isfinite(a)) throw ConfigError("alphas_no must be finite and <= 0");
    if (baseline_n == 0) throw ConfigError("baseline_n must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SweepConfig& c) {
  j = nlohmann::json{{"alphas_yes", c.alphas_yes},     {"alphas_no", c.alphas_no},
                     {"layer", c.layer},               {"subset_cap", c.subset_cap},
                     {"full_subset", c.full_subset},   {"baseline_n", c.baseline_n},
                     {"min_parsed", c.min_parsed},     {"per_alpha_resample", c.per_alpha_resample},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SweepConfig& c) {
  SweepConfig d;
  c.alphas_yes = j.value("alphas_yes", d.alphas_yes);
  c.alphas_no = j.value("alphas_no", d.alphas_no);
  c.layer = j.value("layer", d.layer);
  c.subset_cap = j.value("subset_cap", d.subset_cap);
  c.full_subset = j.value("full_subset", d.full_subset);
  c.baseline_n = j.value("baseline_n", d.baseline_n);
  c.min_parsed = j.value("min_parsed", d.min_parsed);
  c.per_alpha_resample = j.value("per_alpha_resample", d.per_alpha_resample);
  c.seed = j.value("seed", d.seed);
}

struct Interval {
  double low = 0.0;
  double high = 1.0;
};

// Wilson score interval for k successes in n trials.
inline Interval wilson_ci(std::size_t k, std::size_t n, double z = 1.96) {
  if (n == 0) throw UndefinedIntervalError("wilson_ci: n = 0");
  if (k > n) throw ConfigError("wilson_ci: k > n");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {std::clamp(center - half, 0.0, 1.0), std::clamp(center + half, 0.0, 1.0)};
}

struct SweepPoint {
  DirectionKind kind = DirectionKind::probe_yes;
  double alpha = 0.0;
  std::size_t n_total = 0;
  std::size_t n_parsed = 0;
  std::size_t n_flipped = 0;
  double flip_rate = 0.0;  // 0 with interval (0, 1) when nothing parsed
  double ci_low = 0.0;
  double ci_high = 1.0;
  bool excluded_from_plots = false;  // n_parsed < min_parsed

  double parse_failure_rate() const {
    return n_total == 0 ? 0.0 : static_cast<double>(n_total - n_parsed) / static_cast<double>(n_total);
  }
};

inline void to_json(nlohmann::json& j, const SweepPoint& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)},       {"alpha", p.alpha},
                     {"n_total", p.n_total},            {"n_parsed", p.n_parsed},
                     {"n_flipped", p.n_flipped},        {"flip_rate", p.flip_rate},
                     {"ci_low", p.ci_low},              {"ci_high", p.ci_high},
                     {"excluded_from_plots", p.excluded_from_plots}};
}

inline void from_json(const nlohmann::json& j, SweepPoint& p) {
  p.kind = parse_direction_kind(j.at("kind").get<std::string>());
  p.alpha = j.at("alpha").get<double>();
  p.n_total = j.at("n_total").get<std::size_t>();
  p.n_parsed = j.at("n_parsed").get<std::size_t>();
  p.n_flipped = j.at("n_flipped").get<std::size_t>();
  p.flip_rate = j.at("flip_rate").get<double>();
  p.ci_low = j.at("ci_low").get<double>();
  p.ci_high = j.at("ci_high").get<double>();
  p.excluded_from_plots = j.value("excluded_from_plots", false);
}

// What a sweep needs about one example. Deliberately carries no gold label,
// so the orthogonal baseline cannot read correctness.
struct SteerTarget {
  std::string instance_id;
  std::string prompt;
  OptionAssignment assignment;
  Answer original_answer = Answer::yes;
};

struct FlipRecord {
  std::string instance_id;
  DirectionKind kind = DirectionKind::probe_yes;
  double alpha = 0.0;
  Answer original_answer = Answer::yes;
  SemanticAnswer steered_answer = SemanticAnswer::failed;
  bool flipped = false;
  std::uint64_t decode_seed = 0;
  std::optional<std::uint64_t> direction_seed;  // orthogonal baseline only
  GenerationRecord generation;
  std::string cot_text;
  std::string error;
};

inline void to_json(nlohmann::json& j, const FlipRecord& r) {
  j = nlohmann::json{{"instance_id", r.instance_id},
                     {"kind", to_string(r.kind)},
                     {"alpha", r.alpha},
                     {"original_answer", to_string(r.original_answer)},
                     {"steered_answer", to_string(r.steered_answer)},
                     {"flipped", r.flipped},
                     {"decode_seed", r.decode_seed},
                     {"direction_seed", r.direction_seed ? nlohmann::json(*r.direction_seed) : nlohmann::json(nullptr)},
                     {"generation", r.generation},
                     {"cot_text", r.cot_text},
                     {"error", r.error}};
}

inline void from_json(const nlohmann::json& j, FlipRecord& r) {
  r.instance_id = j.at("instance_id").get<std::string>();
  r.kind = parse_direction_kind(j.at("kind").get<std::string>());
  r.alpha = j.at("alpha").get<double>();
  r.original_answer = parse_answer_word(j.at("original_answer").get<std::string>());
  r.steered_answer = parse_semantic_word(j.at("steered_answer").get<std::string>());
  r.flipped = j.at("flipped").get<bool>();
  r.decode_seed = j.at("decode_seed").get<std::uint64_t>();
  r.direction_seed.reset();
  if (j.contains("direction_seed") && !j["direction_seed"].is_null())
    r.direction_seed = j["direction_seed"].get<std::uint64_t>();
  r.generation = j.at("generation").get<GenerationRecord>();
  r.cot_text = j.value("cot_text", "");
  r.error = j.value("error", "");
}

struct SweepResult {
  std::vector<SweepPoint> points;
  std::vector<FlipRecord> flips;
  std::optional<double> terminated_at;  // α whose cell had n_parsed = 0
};

// ---------------------------------------------------------------------------
// Subsets
// ---------------------------------------------------------------------------

struct Subsets {
  std::vector<EvalRecord> yes;  // parsed, correct, answered yes
  std::vector<EvalRecord> no;
  std::vector<std::string> warnings;
};

inline Subsets build_subsets(std::span<const EvalRecord> test_generations) {
  Subsets s;
  for (const auto& r : test_generations) {
    if (!r.correct()) continue;
    (r.answer == SemanticAnswer::yes ? s.yes : s.no).push_back(r);
  }
  if (s.yes.empty()) s.warnings.push_back("S_yes is empty; probe_no sweep skipped");
  if (s.no.empty()) s.warnings.push_back("S_no is empty; probe_yes sweep skipped");
  return s;
}

// Deterministic subsample of at most `cap` records, original order kept.
template <typename T>
std::vector<T> cap_subset(std::span<const T> items, std::size_t cap, std::uint64_t seed, std::string_view salt) {
  if (items.size() <= cap) return {items.begin(), items.end()};
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(SeedMixer(seed).add("subset").add(salt).value());
  rng.shuffle(idx);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  std::vector<T> out;
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

inline std::vector<SteerTarget> make_targets(std::span<const EvalRecord> records, const TaskDataset& ds) {
  std::map<std::string, const TaskInstance*> by_id;
  for (const auto& t : ds.train) by_id[t.instance_id] = &t;
  for (const auto& t : ds.test) by_id[t.instance_id] = &t;
  std::vector<SteerTarget> out;
  for (const auto& r : records) {
    const auto answer = to_answer(r.answer);
    if (!answer) continue;
    auto it = by_id.find(r.instance_id);
    if (it == by_id.end()) throw LookupError("instance " + r.instance_id + " not in dataset");
    out.push_back({r.instance_id, render_prompt(ds, *it->second, r.assignment, r.mode).rendered_text, r.assignment,
                   *answer});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orthogonal sampling
// ---------------------------------------------------------------------------

// Uniform on the sphere of radius ‖w‖ inside the hyperplane ⟂ w.
inline Vec sample_orthogonal(std::span<const double> w, std::uint64_t rng_seed) {
  if (w.size() < 2) throw ImpossibleOrthogonalError("sample_orthogonal: dimension " + std::to_string(w.size()) +
                                                    " has no orthogonal complement");
  const double wn = norm(w);
  if (!(wn > 0.0) || !all_finite(w)) throw ConfigError("sample_orthogonal: w must be finite and nonzero");
  const Vec unit = scaled(w, 1.0 / wn);
  Rng rng(SeedMixer(rng_seed).add("orthogonal").value());
  while (true) {
    Vec r = rng.normal_vector(w.size());
    // Two projection passes keep the residual component at rounding level.
    axpy(r, -dot(r, unit), unit);
    axpy(r, -dot(r, unit), unit);
    const double rn = norm(r);
    if (rn > 1e-8) return scaled(r, wn / rn);
  }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> by_magnitude(std::vector<double> alphas) {
  std::stable_sort(alphas.begin(), alphas.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  return alphas;
}

inline std::uint64_t steer_decode_seed(std::uint64_t seed, DirectionKind kind, std::string_view id, double alpha) {
  return SeedMixer(seed).add("steer").add(to_string(kind)).add(id).add(alpha).value();
}

inline SweepPoint summarize(DirectionKind kind, double alpha, std::span<const FlipRecord> cell, std::size_t min_parsed) {
  SweepPoint p;
  p.kind = kind;
  p.alpha = alpha;
  p.n_total = cell.size();
  for (const auto& r : cell) {
    if (r.steered_answer == SemanticAnswer::failed) continue;
    ++p.n_parsed;
    if (r.flipped) ++p.n_flipped;
  }
  if (p.n_parsed > 0) {
    p.flip_rate = static_cast<double>(p.n_flipped) / static_cast<double>(p.n_parsed);
    const Interval ci = wilson_ci(p.n_flipped, p.n_parsed);
    p.ci_low = std::min(ci.low, p.flip_rate);
    p.ci_high = std::max(ci.high, p.flip_rate);
  }
  p.excluded_from_plots = p.n_parsed < min_parsed;
  return p;
}

// Direction for one target at one α.
using DirectionFn = std::function<std::pair<Vec, std::optional<std::uint64_t>>(const SteerTarget&, double)>;

inline SweepResult run_sweep(InferenceBackend& backend, std::span<const SteerTarget> subset, DirectionKind kind,
                             const std::vector<double>& alphas, int layer, const SweepConfig& config,
                             const DecodeParams& decode, const DirectionFn& direction_for) {
  SweepResult out;
  for (double alpha : by_magnitude(alphas)) {
    std::vector<FlipRecord> cell;
    cell.reserve(subset.size());
    for (const auto& t : subset) {
      FlipRecord rec;
      rec.instance_id = t.instance_id;
      rec.kind = kind;
      rec.alpha = alpha;
      rec.original_answer = t.original_answer;
      rec.decode_seed = steer_decode_seed(config.seed, kind, t.instance_id, alpha);
      DecodeParams params = decode;
      params.rng_seed = rec.decode_seed;
      rec.generation.params = params;
      try {
        auto [dir, dir_seed] = direction_for(t, alpha);
        rec.direction_seed = dir_seed;
        rec.generation = backend.generate_with_steering(t.prompt, params, SteeringSpec{layer, std::move(dir), alpha});
        const ParsedAnswer parsed = parse_answer(rec.generation.text, t.assignment);
        rec.steered_answer = to_semantic(parsed, t.assignment);
        rec.cot_text = parsed.cot_text;
        rec.flipped = rec.steered_answer != SemanticAnswer::failed && rec.steered_answer != to_semantic(t.original_answer);
      } catch (const Error& e) {
        rec.steered_answer = SemanticAnswer::failed;
        rec.error = e.what();
      }
      cell.push_back(std::move(rec));
    }
    SweepPoint p = summarize(kind, alpha, cell, config.min_parsed);
    out.points.push_back(p);
    for (auto& r : cell) out.flips.push_back(std::move(r));
    if (p.n_parsed == 0) {
      out.terminated_at = alpha;
      break;
    }
  }
  return out;
}

}  // namespace detail

inline SweepResult run_probe_sweep(InferenceBackend& backend, const Probe& probe, std::span<const SteerTarget> subset,
                                   DirectionKind kind, const SweepConfig& config, const DecodeParams& decode) {
  config.validate();
  if (kind == DirectionKind::orthogonal) throw ConfigError("run_probe_sweep: use run_orthogonal_baseline");
  if (subset.empty()) throw ConfigError("run_probe_sweep: empty subset");
  if (probe.layer != config.layer)
    throw ConfigError("run_probe_sweep: probe layer " + std::to_string(probe.layer) + " != config layer " +
                      std::to_string(config.layer));
  const Answer expected = kind == DirectionKind::probe_yes ? Answer::no : Answer::yes;
  for (const auto& t : subset)
    if (t.original_answer != expected)
      throw ConfigError("run_probe_sweep: " + std::string(to_string(kind)) + " runs on examples answered " +
                        std::string(to_string(expected)));
  const auto& alphas = kind == DirectionKind::probe_yes ? config.alphas_yes : config.alphas_no;
  const auto capped = config.full_subset ? std::vector<SteerTarget>(subset.begin(), subset.end())
                                         : cap_subset(subset, config.subset_cap, config.seed, to_string(kind));
  return detail::run_sweep(backend, capped, kind, alphas, probe.layer, config, decode,
                           [&](const SteerTarget&, double) { return std::pair{probe.direction, std::optional<std::uint64_t>{}}; });
}

inline std::uint64_t orthogonal_seed(std::uint64_t seed, std::string_view instance_id, std::optional<double> alpha) {
  SeedMixer m(seed);
  m.add("baseline-direction").add(instance_id);
  if (alpha) m.add(*alpha);
  return m.value();
}

// Correctness-blind sample of examples with a parsed unsteered answer, each
// steered along its own r_j ⟂ w with ‖r_j‖ = ‖w‖ over the positive α grid.
inline SweepResult run_orthogonal_baseline(InferenceBackend& backend, const Probe& probe,
                                           std::span<const SteerTarget> candidates, const SweepConfig& config,
                                           const DecodeParams& decode) {
  config.validate();
  if (candidates.empty()) throw ConfigError("run_orthogonal_baseline: no candidates");
  const auto chosen = cap_subset(candidates, config.baseline_n, config.seed, "baseline");
  std::map<std::string, std::pair<Vec, std::uint64_t>> fixed;
  if (!config.per_alpha_resample) {
    for (const auto& t : chosen) {
      const auto s = orthogonal_seed(config.seed, t.instance_id, std::nullopt);
      fixed[t.instance_id] = {sample_orthogonal(probe.direction, s), s};
    }
  }
  return detail::run_sweep(backend, chosen, DirectionKind::orthogonal, config.alphas_yes, probe.layer, config, decode,
                           [&](const SteerTarget& t, double alpha) {
                             if (!config.per_alpha_resample) {
                               const auto& [r, s] = fixed.at(t.instance_id);
                               return std::pair{r, std::optional<std::uint64_t>{s}};
                             }
                             const auto s = orthogonal_seed(config.seed, t.instance_id, alpha);
                             return std::pair{sample_orthogonal(probe.direction, s), std::optional<std::uint64_t>{s}};
                           });
}

}  // namespace precot
