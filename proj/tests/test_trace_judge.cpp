#include <gtest/gtest.h>

#include <fstream>

#include "precot/trace_judge.hpp"
#include "test_util.hpp"

namespace {
using namespace precot;

std::string judge_template() { return read_text_file(precot::testing::repo_assets_dir() / "judge_prompt_v1.txt"); }

ChatResponse reply(const std::string& s) { return {s, std::nullopt, {}}; }

std::string verdict_json(bool fp, bool cf) {
  return nlohmann::json(JudgeVerdict{fp, "premise note", cf, "entailment note"}).dump();
}

JudgeInput input(std::string id, std::string response = "Some reasoning. The best answer is: (A)") {
  return {std::move(id), "Is it?", "(A) Yes", "(B) No", std::move(response)};
}

RetryPolicy no_wait() { return {2, std::chrono::milliseconds(0), std::chrono::milliseconds(0)}; }

TEST(TraceJudge, MappingIsExhaustive) {
  EXPECT_EQ(verdict_to_label(false, true), TraceLabel::sound);
  EXPECT_EQ(verdict_to_label(false, false), TraceLabel::non_entailment);
  EXPECT_EQ(verdict_to_label(true, true), TraceLabel::confabulation);
  EXPECT_EQ(verdict_to_label(true, false), TraceLabel::hallucination);
  std::set<TraceLabel> seen;
  for (bool fp : {false, true})
    for (bool cf : {false, true}) seen.insert(verdict_to_label(fp, cf));
  EXPECT_EQ(seen.size(), 4u);
}

TEST(TraceJudge, LabelNamesRoundTrip) {
  for (auto l : kAllTraceLabels) EXPECT_EQ(parse_trace_label(to_string(l)), l);
  EXPECT_THROW(parse_trace_label("bogus"), ConfigError);
}

TEST(TraceJudge, ExampleTracesReproduceTheirLabels) {
  const auto examples = precot::testing::read_fixture_jsonl(precot::testing::fixture("judge_examples.jsonl"));
  ASSERT_GE(examples.size(), 6u);
  const auto tmpl = judge_template();
  for (const auto& ex : examples) {
    SCOPED_TRACE(ex.at("id").get<std::string>());
    const TaskName task = parse_task_name(ex.at("task").get<std::string>());
    const Slot ys = ex.at("yes_slot") == "A" ? Slot::A : Slot::B;
    const OptionAssignment a{ys, other(ys), 0};
    const JudgeInput in{ex.at("id"), ex.at("question"),
                        answer_display(task, a, parse_answer_word(ex.at("original_answer").get<std::string>())),
                        answer_display(task, a, parse_answer_word(ex.at("steered_answer").get<std::string>())),
                        ex.at("response")};
    // The judge sees the trace and both answers; it replies with the recorded verdict.
    ScriptedChatClient judge([&](const ChatRequest& r) {
      const auto& prompt = r.messages.back().content;
      EXPECT_NE(prompt.find(in.full_response), std::string::npos);
      EXPECT_NE(prompt.find(in.correct_answer), std::string::npos);
      EXPECT_NE(prompt.find(in.model_answer), std::string::npos);
      EXPECT_EQ(r.json_schema, verdict_schema());
      return reply(ex.at("verdict").dump());
    });
    const auto rec = classify_trace(judge, tmpl, in, no_wait());
    ASSERT_TRUE(rec.classified()) << rec.failure_reason;
    EXPECT_EQ(std::string(to_string(*rec.label)), ex.at("expected_label").get<std::string>());
    EXPECT_EQ(judge.calls(), 1u);
    EXPECT_EQ(rec.calls.size(), 1u);
  }
}

TEST(TraceJudge, AnswerDisplayFollowsAssignment) {
  const OptionAssignment b{Slot::B, Slot::A, 0};
  EXPECT_EQ(answer_display(TaskName::social_chemistry, b, Answer::yes), "(B) Yes, the action is appropriate");
  EXPECT_EQ(answer_display(TaskName::sports_understanding, b, Answer::no), "(A) No, the sentence is implausible");
}

TEST(TraceJudge, VerdictParsingIsStrict) {
  EXPECT_TRUE(parse_verdict(verdict_json(true, false)));
  EXPECT_TRUE(parse_verdict("```json\n" + verdict_json(true, false) + "\n```"));
  EXPECT_FALSE(parse_verdict("not json"));
  EXPECT_FALSE(parse_verdict(R"({"false_premises": "yes", "premises_explanation": "", "conclusion_follows": true, "entailment_explanation": ""})"));
  EXPECT_FALSE(parse_verdict(R"({"false_premises": true, "premises_explanation": "", "conclusion_follows": true})"));
  auto extra = nlohmann::json::parse(verdict_json(true, true));
  extra["label"] = "sound";
  EXPECT_FALSE(parse_verdict(extra.dump()));
  EXPECT_FALSE(parse_verdict("[1, 2, 3, 4]"));
}

TEST(TraceJudge, EmptyResponseIsUnclassifiableWithoutACall) {
  ScriptedChatClient judge([](const ChatRequest&) { return reply(verdict_json(false, true)); });
  const auto rec = classify_trace(judge, judge_template(), input("e", "  \n"), no_wait());
  EXPECT_FALSE(rec.classified());
  EXPECT_EQ(rec.failure_reason, "empty response");
  EXPECT_EQ(judge.calls(), 0u);
}

TEST(TraceJudge, SchemaInvalidOutputIsRetriedOnce) {
  int n = 0;
  ScriptedChatClient judge([&](const ChatRequest&) { return reply(n++ == 0 ? "oops" : verdict_json(false, false)); });
  const auto rec = classify_trace(judge, judge_template(), input("r"), no_wait());
  ASSERT_TRUE(rec.classified());
  EXPECT_EQ(*rec.label, TraceLabel::non_entailment);
  EXPECT_EQ(rec.calls.size(), 2u);

  ScriptedChatClient bad([](const ChatRequest&) { return reply("still not json"); });
  const auto failed = classify_trace(bad, judge_template(), input("r"), no_wait());
  EXPECT_FALSE(failed.classified());
  EXPECT_EQ(failed.failure_reason, "judge output failed schema validation");
  EXPECT_EQ(bad.calls(), 2u);
}

TEST(TraceJudge, RefusalCountsAsInvalid) {
  ScriptedChatClient judge([](const ChatRequest&) {
    ChatResponse r;
    r.refusal = "cannot help";
    return r;
  });
  const auto rec = classify_trace(judge, judge_template(), input("x"), no_wait());
  EXPECT_FALSE(rec.classified());
  EXPECT_EQ(judge.calls(), 2u);
}

TEST(TraceJudge, BatchKeepsOrderAndIsolatesFailures) {
  ScriptedChatClient judge([](const ChatRequest& r) {
    if (r.messages.back().content.find("explode") != std::string::npos) throw TransportError("down");
    return reply(verdict_json(true, true));
  });
  std::vector<JudgeInput> inputs;
  for (int i = 0; i < 12; ++i) inputs.push_back(input("r" + std::to_string(i), i == 5 ? "explode" : "text"));
  const auto out = classify_batch(judge, judge_template(), inputs, 4, {1, std::chrono::milliseconds(0), std::chrono::milliseconds(0)});
  ASSERT_EQ(out.size(), 12u);
  for (int i = 0; i < 12; ++i) {
    EXPECT_EQ(out[i].record_id, "r" + std::to_string(i));
    EXPECT_EQ(out[i].classified(), i != 5);
  }
  EXPECT_NE(out[5].failure_reason.find("judge call failed"), std::string::npos);
}

TEST(TraceJudge, TemplateFillRejectsUnknownPlaceholders) {
  EXPECT_THROW(render_judge_prompt("{{nope}}", input("a")), ConfigError);
  EXPECT_EQ(render_judge_prompt("{{question}}|{{model_answer}}", input("a")), "Is it?|(B) No");
}

std::vector<FlipRecord> records(std::size_t n) {
  std::vector<FlipRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].instance_id = "i" + std::to_string(i);
  return out;
}

TEST(TraceJudge, SelectionCapsAndExcludes) {
  const SettingKey big{"planted", "sports_understanding", DirectionKind::probe_yes, 8};
  const SettingKey small{"planted", "sports_understanding", DirectionKind::probe_yes, 10};
  const SettingKey edge{"planted", "sports_understanding", DirectionKind::probe_no, -8};
  std::map<SettingKey, std::vector<FlipRecord>> groups{{big, records(120)}, {small, records(19)}, {edge, records(20)}};
  const auto s = select_for_classification(groups, 3);
  ASSERT_TRUE(s.selected.contains(big));
  EXPECT_EQ(s.selected.at(big).size(), 50u);
  EXPECT_FALSE(s.selected.contains(small));
  EXPECT_EQ(s.excluded.at(small), 19u);
  ASSERT_TRUE(s.selected.contains(edge));
  EXPECT_EQ(s.selected.at(edge).size(), 20u);
  std::set<std::string> ids;
  for (const auto& r : s.selected.at(big)) ids.insert(r.instance_id);
  EXPECT_EQ(ids.size(), 50u);
  const auto again = select_for_classification(groups, 3);
  for (std::size_t i = 0; i < 50; ++i)
    EXPECT_EQ(again.selected.at(big)[i].instance_id, s.selected.at(big)[i].instance_id);
}

LabelMatrix fixture_label_matrix(const nlohmann::json& j) {
  LabelMatrix m{};
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) m[a][b] = j.at("label_matrix")[a][b].get<std::size_t>();
  return m;
}

TEST(TraceJudge, AuditReproducesReportedAgreement) {
  const auto j = nlohmann::json::parse(read_text_file(precot::testing::fixture("audit_matrices.json")));
  const auto r = audit_from_label_matrix(fixture_label_matrix(j));
  EXPECT_EQ(r.n, 200u);
  EXPECT_NEAR(r.overall, j["expected"]["overall"].get<double>(), 1e-9);
  EXPECT_NEAR(r.premises_agreement, j["expected"]["premises"].get<double>(), 1e-9);
  EXPECT_NEAR(r.entailment_agreement, j["expected"]["entailment"].get<double>(), 1e-9);
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_EQ(r.premises[a][b], j["premises_matrix"][a][b].get<std::size_t>());
      EXPECT_EQ(r.entailment[a][b], j["entailment_matrix"][a][b].get<std::size_t>());
    }
  for (auto l : kAllTraceLabels) {
    ASSERT_TRUE(r.per_label[label_index(l)]);
    EXPECT_NEAR(*r.per_label[label_index(l)], j["expected"]["per_label"][std::string(to_string(l))].get<double>(), 5e-4);
  }
}

TEST(TraceJudge, FieldAgreementFromFieldMatrices) {
  EXPECT_NEAR(field_agreement({{{33, 12}, {4, 151}}}), 0.92, 1e-12);
  EXPECT_NEAR(field_agreement({{{142, 6}, {15, 37}}}), 0.895, 1e-12);
  EXPECT_THROW(field_agreement(FieldMatrix{}), AuditError);
}

TEST(TraceJudge, ConsistencyAuditPairsByRecord) {
  std::map<std::string, JudgeVerdict> run1{{"a", {false, "", true, ""}}, {"b", {true, "", false, ""}}, {"c", {true, "", true, ""}}};
  std::map<std::string, JudgeVerdict> run2{{"a", {false, "", true, ""}}, {"b", {true, "", true, ""}}};
  const auto r = consistency_audit(run1, run2);
  EXPECT_EQ(r.n, 2u);
  EXPECT_DOUBLE_EQ(r.overall, 0.5);
  EXPECT_DOUBLE_EQ(r.premises_agreement, 1.0);
  EXPECT_DOUBLE_EQ(r.entailment_agreement, 0.5);
  EXPECT_FALSE(r.per_label[label_index(TraceLabel::hallucination)].has_value());
  const auto j = to_json(r);
  EXPECT_TRUE(j["per_label"]["hallucination"].is_null());
}

TEST(TraceJudge, OrphansAreReported) {
  std::map<std::string, JudgeVerdict> run1{{"a", {}}};
  std::map<std::string, JudgeVerdict> run2{{"a", {}}, {"z", {}}};
  try {
    consistency_audit(run1, run2);
    FAIL() << "expected AuditError";
  } catch (const AuditError& e) {
    EXPECT_EQ(e.orphans(), std::vector<std::string>{"z"});
  }
  EXPECT_THROW(consistency_audit(run1, {}), AuditError);
}

// Identical runs agree everywhere.
TEST(TraceJudge, SelfAuditIsPerfect) {
  Rng rng(8);
  std::map<std::string, JudgeVerdict> run;
  for (int i = 0; i < 100; ++i) run["r" + std::to_string(i)] = {rng.below(2) == 1, "", rng.below(2) == 1, ""};
  const auto r = consistency_audit(run, run);
  EXPECT_DOUBLE_EQ(r.overall, 1.0);
  EXPECT_DOUBLE_EQ(r.premises_agreement, 1.0);
  EXPECT_DOUBLE_EQ(r.entailment_agreement, 1.0);
}

TEST(TraceJudge, SyntheticJudgeGradesTemplatedTraces) {
  auto judge = make_synthetic_judge();
  const auto tmpl = judge_template();
  const JudgeInput in{"s", "q", "(A) Yes, the sentence is plausible", "(B) No, the sentence is implausible",
                      " The details are inconsistent. So, the answer is no. The best answer is: (B)"};
  const auto rec = classify_trace(*judge, tmpl, in, no_wait());
  ASSERT_TRUE(rec.classified());
  EXPECT_EQ(*rec.label, TraceLabel::confabulation);
  JudgeInput garbled = in;
  garbled.full_response = " loop again maybe. The best answer is: (B)";
  EXPECT_EQ(*classify_trace(*judge, tmpl, garbled, no_wait()).label, TraceLabel::hallucination);
}

TEST(TraceJudge, ClassificationRecordJsonRoundTrip) {
  ScriptedChatClient judge([](const ChatRequest&) { return reply(verdict_json(true, false)); });
  const auto rec = classify_trace(judge, judge_template(), input("rt"), no_wait());
  const nlohmann::json j = rec;
  EXPECT_EQ(nlohmann::json(j.get<ClassificationRecord>()), j);
}

}  // namespace
