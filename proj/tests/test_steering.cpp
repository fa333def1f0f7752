#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>

#include "precot/planted_backend.hpp"
#include "precot/steering_engine.hpp"
#include "test_util.hpp"

namespace {
using namespace precot;

// Backend whose reply depends only on the steering coefficient; records every
// direction it was asked to apply.
class ScriptedBackend final : public InferenceBackend {
 public:
  explicit ScriptedBackend(std::function<std::string(double)> reply, int dim = 4)
      : reply_(std::move(reply)), desc_{"scripted", 4, dim, false, 100000} {}
  const BackendDescriptor& descriptor() const override { return desc_; }

  struct Call {
    std::string prompt;
    double alpha;
    Vec direction;
  };
  std::vector<Call> calls;

 protected:
  ActivationMap do_capture(std::string_view, std::span<const int>) override { return {}; }
  GenerationRecord do_generate(std::string_view prompt, const DecodeParams& params, const SteeringSpec* s) override {
    GenerationRecord g;
    g.prompt = std::string(prompt);
    g.params = params;
    g.finish_reason = "stop";
    const double alpha = s ? s->alpha : 0.0;
    if (s) calls.push_back({g.prompt, alpha, s->direction});
    g.text = reply_(alpha);
    return g;
  }
  std::vector<TokenLogit> do_unembed(std::span<const double>) override { return {}; }

 private:
  std::function<std::string(double)> reply_;
  BackendDescriptor desc_;
};

std::vector<SteerTarget> targets(std::size_t n, Answer original) {
  std::vector<SteerTarget> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({"t" + std::to_string(i), "prompt " + std::to_string(i), {Slot::A, Slot::B, 0}, original});
  return out;
}

Probe unit_probe(int layer = 1) {
  Probe p;
  p.layer = layer;
  p.direction = {1, 0, 0, 0};
  return p;
}

// Direct transcription of the score interval.
std::pair<double, double> wilson_oracle(double k, double n, double z = 1.96) {
  const double p = k / n;
  const double a = p + z * z / (2 * n);
  const double b = z * std::sqrt(p * (1 - p) / n + z * z / (4 * n * n));
  const double c = 1 + z * z / n;
  return {(a - b) / c, (a + b) / c};
}

TEST(Steering, AlphaGridsAreSymmetricAndContainZero) {
  const SweepConfig c;
  ASSERT_EQ(c.alphas_yes.size(), 11u);
  ASSERT_EQ(c.alphas_no.size(), 11u);
  for (std::size_t i = 0; i < 11; ++i) {
    EXPECT_DOUBLE_EQ(c.alphas_yes[i], 2.0 * i);
    EXPECT_DOUBLE_EQ(c.alphas_no[i], -2.0 * i);
  }
  EXPECT_FALSE(std::signbit(c.alphas_no[0]));
  EXPECT_NO_THROW(c.validate());
}

TEST(Steering, InvalidGridsAreRejected) {
  SweepConfig c;
  c.alphas_yes = {2, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.alphas_no = {0, 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Steering, WilsonKnownValues) {
  const auto zero = wilson_ci(0, 50);
  EXPECT_DOUBLE_EQ(zero.low, 0.0);
  EXPECT_NEAR(zero.high, 1.96 * 1.96 / (50 + 1.96 * 1.96), 1e-12);
  const auto half = wilson_ci(25, 50);
  EXPECT_NEAR(half.low, 0.3664, 5e-5);
  EXPECT_NEAR(half.high, 0.6336, 5e-5);
  EXPECT_THROW(wilson_ci(0, 0), UndefinedIntervalError);
  EXPECT_THROW(wilson_ci(3, 2), ConfigError);
}

TEST(Steering, WilsonMatchesFormulaOnGrid) {
  for (std::size_t n : {1, 2, 5, 10, 20, 37, 50, 100, 500}) {
    for (std::size_t k = 0; k <= n; k += std::max<std::size_t>(1, n / 17)) {
      const auto [lo, hi] = wilson_oracle(static_cast<double>(k), static_cast<double>(n));
      const auto ci = wilson_ci(k, n);
      EXPECT_NEAR(ci.low, std::max(0.0, lo), 1e-9);
      EXPECT_NEAR(ci.high, std::min(1.0, hi), 1e-9);
      EXPECT_LE(ci.low, ci.high);
    }
  }
}

// The interval always brackets the observed rate and is symmetric under k -> n - k.
TEST(Steering, WilsonBracketsAndMirrors) {
  for (std::size_t n = 1; n <= 60; ++n) {
    for (std::size_t k = 0; k <= n; ++k) {
      const auto ci = wilson_ci(k, n);
      const double p = static_cast<double>(k) / static_cast<double>(n);
      EXPECT_LE(ci.low, p + 1e-12);
      EXPECT_GE(ci.high, p - 1e-12);
      const auto m = wilson_ci(n - k, n);
      EXPECT_NEAR(ci.low, 1.0 - m.high, 1e-12);
    }
  }
}

TEST(Steering, OrthogonalTwoDimensional) {
  const Vec w = {1, 0};
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto r = sample_orthogonal(w, s);
    EXPECT_NEAR(r[0], 0.0, 1e-12);
    EXPECT_NEAR(std::abs(r[1]), 1.0, 1e-12);
  }
}

TEST(Steering, OrthogonalIsNormMatchedAndPerpendicular) {
  Rng rng(77);
  for (std::size_t d : {2, 16, 256}) {
    const Vec w = scaled(rng.normal_vector(d), 3.7);
    const double wn = norm(w);
    for (std::uint64_t s = 0; s < 300; ++s) {
      const auto r = sample_orthogonal(w, s);
      EXPECT_LE(std::abs(dot(r, w)), 1e-6 * wn * wn);
      EXPECT_LE(std::abs(norm(r) - wn), 1e-6 * wn);
    }
  }
}

TEST(Steering, OrthogonalSamplesAreSpreadOut) {
  Rng rng(1);
  const Vec w = rng.normal_vector(16);
  std::vector<Vec> rs;
  for (std::uint64_t s = 0; s < 60; ++s) rs.push_back(sample_orthogonal(w, s));
  double total = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = i + 1; j < rs.size(); ++j) {
      total += std::abs(cosine(rs[i], rs[j]));
      ++pairs;
    }
  EXPECT_LE(total / pairs, 0.25);
  EXPECT_EQ(sample_orthogonal(w, 5), sample_orthogonal(w, 5));
  EXPECT_NE(sample_orthogonal(w, 5), sample_orthogonal(w, 6));
}

TEST(Steering, OrthogonalNeedsTwoDimensionsAndNonzeroW) {
  EXPECT_THROW(sample_orthogonal(Vec{2.0}, 0), ImpossibleOrthogonalError);
  EXPECT_THROW(sample_orthogonal(Vec{0.0, 0.0}, 0), ConfigError);
}

TEST(Steering, SubsetsKeepOnlyCorrectParsedAnswers) {
  auto rec = [](std::string id, Answer gold, SemanticAnswer ans) {
    EvalRecord r;
    r.instance_id = std::move(id);
    r.gold = gold;
    r.answer = ans;
    return r;
  };
  const std::vector<EvalRecord> gens = {rec("1", Answer::yes, SemanticAnswer::yes), rec("2", Answer::yes, SemanticAnswer::no),
                                        rec("3", Answer::no, SemanticAnswer::no), rec("4", Answer::no, SemanticAnswer::failed)};
  const auto s = build_subsets(gens);
  ASSERT_EQ(s.yes.size(), 1u);
  ASSERT_EQ(s.no.size(), 1u);
  EXPECT_EQ(s.yes[0].instance_id, "1");
  EXPECT_EQ(s.no[0].instance_id, "3");
  EXPECT_TRUE(s.warnings.empty());
  const auto empty = build_subsets(std::vector<EvalRecord>{gens[0]});
  EXPECT_FALSE(empty.warnings.empty());
}

TEST(Steering, CapSubsetIsSeededAndOrderPreserving) {
  std::vector<int> items(120);
  std::iota(items.begin(), items.end(), 0);
  const auto a = cap_subset<int>(items, 50, 3, "x");
  EXPECT_EQ(a.size(), 50u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(a, cap_subset<int>(items, 50, 3, "x"));
  EXPECT_NE(a, cap_subset<int>(items, 50, 4, "x"));
  EXPECT_EQ(cap_subset<int>(std::span<const int>(items).first(30), 50, 3, "x").size(), 30u);
}

TEST(Steering, AlphasRunInAscendingMagnitude) {
  ScriptedBackend b([](double) { return "The best answer is: (A)"; });
  SweepConfig c;
  c.layer = 1;
  const auto res = run_probe_sweep(b, unit_probe(), targets(3, Answer::yes), DirectionKind::probe_no, c, {0.0, 64, 0});
  ASSERT_EQ(res.points.size(), 11u);
  for (std::size_t i = 0; i < res.points.size(); ++i) EXPECT_DOUBLE_EQ(res.points[i].alpha, -2.0 * i);
  EXPECT_FALSE(res.terminated_at);
  for (const auto& p : res.points) {
    EXPECT_EQ(p.n_parsed, 3u);
    EXPECT_EQ(p.n_flipped, 0u);
  }
}

TEST(Steering, SweepStopsAfterTheFirstEmptyCell) {
  ScriptedBackend b([](double a) { return std::abs(a) >= 12 ? std::string("garble garble") : "The best answer is: (B)"; });
  SweepConfig c;
  c.layer = 1;
  const auto res = run_probe_sweep(b, unit_probe(), targets(25, Answer::yes), DirectionKind::probe_no, c, {0.0, 64, 0});
  ASSERT_TRUE(res.terminated_at);
  EXPECT_DOUBLE_EQ(*res.terminated_at, -12.0);
  ASSERT_EQ(res.points.size(), 7u);
  EXPECT_DOUBLE_EQ(res.points.back().alpha, -12.0);
  EXPECT_EQ(res.points.back().n_parsed, 0u);
  EXPECT_DOUBLE_EQ(res.points.back().flip_rate, 0.0);
  EXPECT_DOUBLE_EQ(res.points.back().ci_low, 0.0);
  EXPECT_DOUBLE_EQ(res.points.back().ci_high, 1.0);
  EXPECT_TRUE(res.points.back().excluded_from_plots);
  for (double a : {-14.0, -16.0, -18.0, -20.0})
    for (const auto& call : b.calls) EXPECT_NE(call.alpha, a);
  // Alpha 0 is the unsteered control; all others flip yes -> no.
  EXPECT_EQ(res.points[0].n_flipped, 25u);  // scripted reply ignores alpha below 12
  EXPECT_FALSE(res.points[1].excluded_from_plots);
}

TEST(Steering, SparseCellsAreExcludedFromPlots) {
  ScriptedBackend b([](double) { return "The best answer is: (B)"; });
  SweepConfig c;
  c.layer = 1;
  const auto res = run_probe_sweep(b, unit_probe(), targets(19, Answer::yes), DirectionKind::probe_no, c, {0.0, 64, 0});
  for (const auto& p : res.points) EXPECT_TRUE(p.excluded_from_plots);
  const auto ok = run_probe_sweep(b, unit_probe(), targets(20, Answer::yes), DirectionKind::probe_no, c, {0.0, 64, 0});
  for (const auto& p : ok.points) EXPECT_FALSE(p.excluded_from_plots);
}

TEST(Steering, SubsetIsCappedUnlessFullRequested) {
  ScriptedBackend b([](double) { return "The best answer is: (A)"; });
  SweepConfig c;
  c.layer = 1;
  c.alphas_no = {0.0};
  auto res = run_probe_sweep(b, unit_probe(), targets(80, Answer::yes), DirectionKind::probe_no, c, {0.0, 64, 0});
  EXPECT_EQ(res.points[0].n_total, 50u);
  c.full_subset = true;
  res = run_probe_sweep(b, unit_probe(), targets(80, Answer::yes), DirectionKind::probe_no, c, {0.0, 64, 0});
  EXPECT_EQ(res.points[0].n_total, 80u);
}

TEST(Steering, ProbeSweepPreconditions) {
  ScriptedBackend b([](double) { return "The best answer is: (A)"; });
  SweepConfig c;
  c.layer = 1;
  EXPECT_THROW(run_probe_sweep(b, unit_probe(), targets(3, Answer::no), DirectionKind::probe_no, c, {}), ConfigError);
  EXPECT_THROW(run_probe_sweep(b, unit_probe(), {}, DirectionKind::probe_no, c, {}), ConfigError);
  EXPECT_THROW(run_probe_sweep(b, unit_probe(2), targets(3, Answer::yes), DirectionKind::probe_no, c, {}), ConfigError);
  EXPECT_THROW(run_probe_sweep(b, unit_probe(), targets(3, Answer::yes), DirectionKind::orthogonal, c, {}), ConfigError);
}

TEST(Steering, BaselineDirectionIsFixedAcrossAlpha) {
  ScriptedBackend b([](double) { return "The best answer is: (A)"; });
  SweepConfig c;
  c.layer = 1;
  const auto probe = unit_probe();
  const auto res = run_orthogonal_baseline(b, probe, targets(5, Answer::yes), c, {0.0, 64, 0});
  std::map<std::string, Vec> seen;
  for (const auto& call : b.calls) {
    EXPECT_NEAR(dot(call.direction, probe.direction), 0.0, 1e-12);
    EXPECT_NEAR(norm(call.direction), 1.0, 1e-12);
    auto [it, fresh] = seen.try_emplace(call.prompt, call.direction);
    if (!fresh) EXPECT_EQ(it->second, call.direction);
  }
  EXPECT_EQ(seen.size(), 5u);
  for (const auto& f : res.flips) EXPECT_TRUE(f.direction_seed.has_value());
  // Baseline uses the positive grid.
  for (const auto& p : res.points) EXPECT_GE(p.alpha, 0.0);
}

TEST(Steering, BaselineResampleFlagDrawsPerAlpha) {
  ScriptedBackend b([](double) { return "The best answer is: (A)"; });
  SweepConfig c;
  c.layer = 1;
  c.per_alpha_resample = true;
  c.alphas_yes = {0.0, 2.0};
  run_orthogonal_baseline(b, unit_probe(), targets(1, Answer::yes), c, {0.0, 64, 0});
  ASSERT_EQ(b.calls.size(), 2u);
  EXPECT_NE(b.calls[0].direction, b.calls[1].direction);
}

// Selection depends on ids and seed only, never on the original answers.
TEST(Steering, BaselineSelectionIsCorrectnessBlind) {
  auto ids_of = [](Answer a) {
    ScriptedBackend b([](double) { return "The best answer is: (A)"; });
    SweepConfig c;
    c.layer = 1;
    c.alphas_yes = {0.0};
    c.baseline_n = 10;
    const auto res = run_orthogonal_baseline(b, unit_probe(), targets(40, a), c, {0.0, 64, 0});
    std::vector<std::string> ids;
    for (const auto& f : res.flips) ids.push_back(f.instance_id);
    return ids;
  };
  EXPECT_EQ(ids_of(Answer::yes), ids_of(Answer::no));
  EXPECT_EQ(ids_of(Answer::yes).size(), 10u);
}

TEST(Steering, PlantedSweepFlipsAndBaselineDoesNot) {
  PlantedBackend backend(PlantedConfig{});
  std::vector<SteerTarget> yes_targets;
  for (int i = 0; i < 200 && yes_targets.size() < 30; ++i) {
    const std::string q = "Is the following sentence plausible? \"Player " + std::to_string(i) + " ran.\"";
    const TaskInstance t{TaskName::sports_understanding, q, Answer::yes, make_instance_id(TaskName::sports_understanding, q)};
    if (backend.planted_answer(q) != Answer::yes) continue;
    const OptionAssignment a = assign_options(t.instance_id, 0);
    yes_targets.push_back({t.instance_id, render_prompt(t, a, PromptMode::cot, "").rendered_text, a, Answer::yes});
  }
  ASSERT_EQ(yes_targets.size(), 30u);
  Probe probe;
  probe.layer = 4;
  probe.direction = backend.planted_direction();
  SweepConfig c;
  c.layer = 4;
  const DecodeParams greedy{0.0, 256, 0};
  const auto res = run_probe_sweep(backend, probe, yes_targets, DirectionKind::probe_no, c, greedy);
  EXPECT_DOUBLE_EQ(res.points[0].flip_rate, 0.0);
  double best = 0;
  for (const auto& p : res.points) best = std::max(best, p.flip_rate);
  EXPECT_GE(best, 0.9);
  const auto base = run_orthogonal_baseline(backend, probe, yes_targets, c, greedy);
  for (const auto& p : base.points) EXPECT_LE(p.flip_rate, 0.1);
}

TEST(Steering, FlipRecordJsonRoundTrip) {
  FlipRecord r;
  r.instance_id = "x";
  r.kind = DirectionKind::orthogonal;
  r.alpha = 4;
  r.original_answer = Answer::no;
  r.steered_answer = SemanticAnswer::yes;
  r.flipped = true;
  r.decode_seed = 99;
  r.direction_seed = 7;
  r.generation.text = "abc";
  const nlohmann::json j = r;
  const auto back = j.get<FlipRecord>();
  EXPECT_EQ(nlohmann::json(back), j);
}

}  // namespace
