#include <gtest/gtest.h>

#include "precot/cot_sensitivity.hpp"
#include "precot/evaluation.hpp"
#include "precot/planted_backend.hpp"
#include "test_util.hpp"

namespace {
using namespace precot;
using precot::testing::TempDir;

EditorTemplates shipped_templates() {
  const auto dir = precot::testing::repo_assets_dir();
  return {read_text_file(dir / "editor_extract_v1.txt"), read_text_file(dir / "editor_edit_v1.txt")};
}

const std::string kPrompt = "Demo block\n\nQ: Is it?\n\nAnswer choices:\n(A) Yes\n(B) No\n\nA: Let's think step by step:";
const std::string kResponse =
    " The question asks about the details. The details are consistent. So, the answer is yes. The best answer is: (A)";

ChatResponse reply(const std::string& content) { return {content, std::nullopt, {}}; }

TEST(CotSensitivity, EllipsesReplacesTheReasoning) {
  const auto out = ellipses_intervene(kPrompt);
  EXPECT_TRUE(out.ends_with("... So, the best answer is:"));
  EXPECT_TRUE(out.starts_with(kPrompt));
  EXPECT_THROW(ellipses_intervene("no preamble"), ConfigError);
}

TEST(CotSensitivity, EditDistance) {
  EXPECT_EQ(edit_distance("", ""), 0u);
  EXPECT_EQ(edit_distance("abc", ""), 3u);
  EXPECT_EQ(edit_distance("kitten", "sitting"), 3u);
  EXPECT_EQ(edit_distance("flaw", "lawn"), 2u);
}

// Metric properties on random strings.
TEST(CotSensitivity, EditDistanceIsAMetric) {
  Rng rng(2);
  auto rand_str = [&] {
    std::string s;
    for (auto n = rng.below(12); n > 0; --n) s.push_back("abc"[rng.below(3)]);
    return s;
  };
  for (int i = 0; i < 300; ++i) {
    const auto a = rand_str(), b = rand_str(), c = rand_str();
    EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
    EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
    EXPECT_EQ(edit_distance(a, a), 0u);
    EXPECT_GE(edit_distance(a, b), a.size() > b.size() ? a.size() - b.size() : b.size() - a.size());
  }
}

TEST(CotSensitivity, SyntheticEditorProducesAMinimalSplice) {
  auto editor = make_synthetic_editor();
  const auto e = wrong_cot_intervene(kPrompt, kResponse, "Is it?", "(B) No", *editor, shipped_templates());
  ASSERT_TRUE(e.modified_prompt) << e.skip_reason;
  EXPECT_EQ(e.extracted, "The question asks about the details. The details are consistent.");
  EXPECT_EQ(e.edited, "The question asks about the details. The details are inconsistent.");
  EXPECT_EQ(e.distance, 2u);
  EXPECT_FALSE(e.non_minimal);
  EXPECT_EQ(*e.modified_prompt, kPrompt + " " + e.edited);
  ASSERT_EQ(editor->calls(), 2u);
  EXPECT_EQ(editor->requests()[0].schema_name, "cot_extract");
  EXPECT_EQ(editor->requests()[1].schema_name, "cot_edit");
  EXPECT_NE(editor->requests()[1].messages.back().content.find("(B) No"), std::string::npos);
}

TEST(CotSensitivity, LargeEditsAreFlaggedNonMinimal) {
  ScriptedChatClient editor([](const ChatRequest& r) {
    if (r.schema_name == "cot_extract") return reply(R"({"cot": "The details are consistent."})");
    return reply(R"({"edited_cot": "Everything about this is wrong in every way."})");
  });
  const auto e = wrong_cot_intervene(kPrompt, kResponse, "q", "(B) No", editor, shipped_templates());
  ASSERT_TRUE(e.modified_prompt);
  EXPECT_TRUE(e.non_minimal);
  EXPECT_GT(static_cast<double>(e.distance), 0.3 * static_cast<double>(e.extracted.size()));
}

TEST(CotSensitivity, ThirtyPercentBoundary) {
  const std::string original(10, 'a');
  for (std::size_t changed : {3u, 4u}) {
    std::string edited = original;
    for (std::size_t i = 0; i < changed; ++i) edited[i] = 'b';
    ScriptedChatClient editor([&](const ChatRequest& r) {
      if (r.schema_name == "cot_extract") return reply(nlohmann::json{{"cot", original}}.dump());
      return reply(nlohmann::json{{"edited_cot", edited}}.dump());
    });
    const auto e = wrong_cot_intervene(kPrompt, " " + original + " The best answer is: (A)", "q", "t", editor,
                                       shipped_templates());
    ASSERT_TRUE(e.modified_prompt);
    EXPECT_EQ(e.non_minimal, changed == 4u);
  }
}

struct SkipCase {
  std::string extract_reply;
  std::string edit_reply;
  bool refuse_extract = false;
  std::string reason;
};

TEST(CotSensitivity, InvalidEditorOutputIsSkippedWithAReason) {
  const std::vector<SkipCase> cases = {
      {"not json", "", false, "editor refused or returned malformed extraction"},
      {R"({"cot": ""})", "", false, "no CoT span to edit"},
      {R"({"cot": "Invented text not in the response."})", "", false,
       "extracted span is not a verbatim pre-answer span of the response"},
      {R"({"cot": "The details are consistent."})", "{}", false, "editor refused or returned malformed edit"},
      {R"({"cot": "The details are consistent."})", R"({"edited_cot": "The details are consistent."})", false,
       "edit is empty or identical to the original"},
      {R"({"cot": "The details are consistent."})", R"x({"edited_cot": "Inconsistent. The best answer is: (B)"})x", false,
       "edit states a final answer"},
      {"", "", true, "editor refused or returned malformed extraction"},
  };
  for (const auto& c : cases) {
    ScriptedChatClient editor([&](const ChatRequest& r) {
      ChatResponse out = reply(r.schema_name == "cot_extract" ? c.extract_reply : c.edit_reply);
      if (c.refuse_extract) out.refusal = "no";
      return out;
    });
    const auto e = wrong_cot_intervene(kPrompt, kResponse, "q", "t", editor, shipped_templates());
    EXPECT_FALSE(e.modified_prompt.has_value()) << c.reason;
    EXPECT_EQ(e.skip_reason, c.reason);
  }
}

TEST(CotSensitivity, CodeFencedReplyIsAccepted) {
  ScriptedChatClient editor([](const ChatRequest& r) {
    if (r.schema_name == "cot_extract") return reply("```json\n{\"cot\": \"The details are consistent.\"}\n```");
    return reply(R"({"edited_cot": "The details are inconsistent."})");
  });
  const auto e = wrong_cot_intervene(kPrompt, kResponse, "q", "t", editor, shipped_templates());
  EXPECT_TRUE(e.modified_prompt.has_value()) << e.skip_reason;
}

TEST(CotSensitivity, TransportErrorsAreRetried) {
  int failures = 2;
  ScriptedChatClient editor([&](const ChatRequest& r) {
    if (failures-- > 0) throw TransportError("flaky");
    if (r.schema_name == "cot_extract") return reply(R"({"cot": "The details are consistent."})");
    return reply(R"({"edited_cot": "The details are inconsistent."})");
  });
  RetryPolicy fast{3, std::chrono::milliseconds(0), std::chrono::milliseconds(0)};
  const auto e = wrong_cot_intervene(kPrompt, kResponse, "q", "t", editor, shipped_templates(), fast);
  EXPECT_TRUE(e.modified_prompt.has_value());
  EXPECT_EQ(editor.calls(), 4u);
}

class PlantedInterventions : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto data = precot::testing::make_data_dir(tmp.path(), TaskName::sports_understanding, 120);
    ds = load_task(TaskName::sports_understanding, 0, data, {40, 40});
    PlantedConfig cfg;
    cfg.cot_reliance = 0.5;
    backend = std::make_unique<PlantedBackend>(cfg);
    backend->add_reference_labels(ds.train);
    backend->add_reference_labels(ds.test);
    EvalSettings s;
    s.decode.temperature = 0.0;
    gens = evaluate_split(*backend, ds, ds.test, s);
  }
  TempDir tmp;
  TaskDataset ds;
  std::unique_ptr<PlantedBackend> backend;
  std::vector<EvalRecord> gens;
};

TEST_F(PlantedInterventions, EllipsesDoNotChangeGreedyAnswers) {
  InterventionContext ctx;
  ctx.dataset = &ds;
  ctx.decode.temperature = 0.0;
  const auto r = measure_change_rate(*backend, gens, InterventionKind::ellipses, ctx, 30, 1);
  EXPECT_EQ(r.n_sampled, 30u);
  EXPECT_EQ(r.n_parsed, 30u);
  EXPECT_DOUBLE_EQ(r.rate, 0.0);
  for (const auto& rec : r.records) {
    EXPECT_TRUE(rec.modified_prompt.ends_with(kEllipsesSuffix));
    EXPECT_NE(rec.modified_prompt.find(ds.fewshot_cot), std::string::npos);
  }
}

TEST_F(PlantedInterventions, WrongCotChangesReliantInstances) {
  auto editor = make_synthetic_editor();
  const auto templates = shipped_templates();
  InterventionContext ctx;
  ctx.dataset = &ds;
  ctx.editor = editor.get();
  ctx.templates = &templates;
  ctx.decode.temperature = 0.0;
  const auto r = measure_change_rate(*backend, gens, InterventionKind::wrong_cot, ctx, 30, 1);
  EXPECT_EQ(r.n_skipped, 0u);
  EXPECT_EQ(r.n_non_minimal, 0u);
  EXPECT_GT(r.rate, 0.2);
  EXPECT_LT(r.rate, 0.8);
  EXPECT_LE(r.ci.low, r.rate);
  EXPECT_GE(r.ci.high, r.rate);
}

TEST_F(PlantedInterventions, SmallPoolUsesEverythingWithANote) {
  InterventionContext ctx;
  ctx.dataset = &ds;
  const auto r = measure_change_rate(*backend, std::span<const EvalRecord>(gens).first(5), InterventionKind::ellipses,
                                     ctx, 30, 1);
  EXPECT_LE(r.n_sampled, 5u);
  EXPECT_FALSE(r.notes.empty());
}

TEST_F(PlantedInterventions, WrongCotNeedsAnEditor) {
  InterventionContext ctx;
  ctx.dataset = &ds;
  EXPECT_THROW(measure_change_rate(*backend, gens, InterventionKind::wrong_cot, ctx, 5, 1), ConfigError);
}

}  // namespace
