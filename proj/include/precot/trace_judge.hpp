#pragma once

// Judge-based classification of steered reasoning traces into
// sound / non-entailment / confabulation / hallucination, sampling of
// settings for judging, and run-to-run consistency audits.

#include <algorithm>
#include <array>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/llm_client.hpp"
#include "precot/steering_engine.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

struct JudgeVerdict {
  bool false_premises = false;
  std::string premises_explanation;
  bool conclusion_follows = false;
  std::string entailment_explanation;
};

inline void to_json(nlohmann::json& j, const JudgeVerdict& v) {
  j = nlohmann::json{{"false_premises", v.false_premises},
                     {"premises_explanation", v.premises_explanation},
                     {"conclusion_follows", v.conclusion_follows},
                     {"entailment_explanation", v.entailment_explanation}};
}

inline void from_json(const nlohmann::json& j, JudgeVerdict& v) {
  v.false_premises = j.at("false_premises").get<bool>();
  v.premises_explanation = j.at("premises_explanation").get<std::string>();
  v.conclusion_follows = j.at("conclusion_follows").get<bool>();
  v.entailment_explanation = j.at("entailment_explanation").get<std::string>();
}

enum class TraceLabel { sound, non_entailment, confabulation, hallucination };

inline constexpr std::array<TraceLabel, 4> kAllTraceLabels = {TraceLabel::sound, TraceLabel::non_entailment,
                                                             TraceLabel::confabulation, TraceLabel::hallucination};
inline constexpr std::array<TraceLabel, 3> kFailureLabels = {TraceLabel::non_entailment, TraceLabel::confabulation,
                                                            TraceLabel::hallucination};

inline std::string_view to_string(TraceLabel l) {
  switch (l) {
    case TraceLabel::sound: return "sound";
    case TraceLabel::non_entailment: return "non_entailment";
    case TraceLabel::confabulation: return "confabulation";
    case TraceLabel::hallucination: return "hallucination";
  }
  return "sound";
}

inline TraceLabel parse_trace_label(std::string_view s) {
  for (auto l : kAllTraceLabels)
    if (to_string(l) == s) return l;
  throw ConfigError("unknown trace label: " + std::string(s));
}

inline std::size_t label_index(TraceLabel l) { return static_cast<std::size_t>(l); }

//                      follows   does not follow
//   true premises      sound     non_entailment
//   false premises     confab.   hallucination
inline TraceLabel verdict_to_label(bool false_premises, bool conclusion_follows) {
  if (!false_premises) return conclusion_follows ? TraceLabel::sound : TraceLabel::non_entailment;
  return conclusion_follows ? TraceLabel::confabulation : TraceLabel::hallucination;
}

inline TraceLabel verdict_to_label(const JudgeVerdict& v) {
  return verdict_to_label(v.false_premises, v.conclusion_follows);
}

// ---------------------------------------------------------------------------
// Verdict schema
// ---------------------------------------------------------------------------

inline nlohmann::json verdict_schema() {
  return {{"type", "object"},
          {"properties",
           {{"false_premises", {{"type", "boolean"}}},
            {"premises_explanation", {{"type", "string"}}},
            {"conclusion_follows", {{"type", "boolean"}}},
            {"entailment_explanation", {{"type", "string"}}}}},
          {"required", {"false_premises", "premises_explanation", "conclusion_follows", "entailment_explanation"}},
          {"additionalProperties", false}};
}

// Strict check: one JSON object with exactly the four fields and their types.
// A surrounding markdown code fence is tolerated.
inline std::optional<JudgeVerdict> parse_verdict(std::string_view content) {
  std::string text = trim(std::string(content));
  if (text.starts_with("```")) {
    const auto nl = text.find('\n');
    const auto end = text.rfind("```");
    if (nl == std::string::npos || end <= nl) return std::nullopt;
    text = trim(text.substr(nl + 1, end - nl - 1));
  }
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.size() != 4) return std::nullopt;
  auto field = [&](const char* k) { return j.find(k); };
  const auto fp = field("false_premises");
  const auto pe = field("premises_explanation");
  const auto cf = field("conclusion_follows");
  const auto ee = field("entailment_explanation");
  if (fp == j.end() || pe == j.end() || cf == j.end() || ee == j.end()) return std::nullopt;
  if (!fp->is_boolean() || !cf->is_boolean() || !pe->is_string() || !ee->is_string()) return std::nullopt;
  return j.get<JudgeVerdict>();
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

struct JudgeInput {
  std::string record_id;
  std::string question;
  std::string correct_answer;
  std::string model_answer;
  std::string full_response;
};

inline void to_json(nlohmann::json& j, const JudgeInput& in) {
  j = nlohmann::json{{"record_id", in.record_id},
                     {"question", in.question},
                     {"correct_answer", in.correct_answer},
                     {"model_answer", in.model_answer},
                     {"full_response", in.full_response}};
}

inline void from_json(const nlohmann::json& j, JudgeInput& in) {
  in.record_id = j.at("record_id").get<std::string>();
  in.question = j.at("question").get<std::string>();
  in.correct_answer = j.at("correct_answer").get<std::string>();
  in.model_answer = j.at("model_answer").get<std::string>();
  in.full_response = j.at("full_response").get<std::string>();
}

struct JudgeCall {
  nlohmann::json request;
  std::string response;
};

struct ClassificationRecord {
  std::string record_id;
  std::optional<JudgeVerdict> verdict;
  std::optional<TraceLabel> label;
  std::string failure_reason;  // set iff unclassifiable
  std::vector<JudgeCall> calls;

  bool classified() const { return label.has_value(); }
};

inline void to_json(nlohmann::json& j, const ClassificationRecord& r) {
  nlohmann::json calls = nlohmann::json::array();
  for (const auto& c : r.calls) calls.push_back({{"request", c.request}, {"response", c.response}});
  j = nlohmann::json{{"record_id", r.record_id},
                     {"verdict", r.verdict ? nlohmann::json(*r.verdict) : nlohmann::json(nullptr)},
                     {"label", r.label ? nlohmann::json(std::string(to_string(*r.label))) : nlohmann::json(nullptr)},
                     {"failure_reason", r.failure_reason},
                     {"calls", calls}};
}

inline void from_json(const nlohmann::json& j, ClassificationRecord& r) {
  r.record_id = j.at("record_id").get<std::string>();
  r.verdict.reset();
  r.label.reset();
  if (!j.at("verdict").is_null()) r.verdict = j["verdict"].get<JudgeVerdict>();
  if (!j.at("label").is_null()) r.label = parse_trace_label(j["label"].get<std::string>());
  r.failure_reason = j.value("failure_reason", "");
  r.calls.clear();
  for (const auto& c : j.value("calls", nlohmann::json::array()))
    r.calls.push_back({c.at("request"), c.at("response").get<std::string>()});
}

inline std::string render_judge_prompt(std::string_view tmpl, const JudgeInput& in) {
  return fill_template(tmpl, {{"question", in.question},
                              {"correct_answer", in.correct_answer},
                              {"model_answer", in.model_answer},
                              {"response", in.full_response}});
}

// One judge call, one retry on schema-invalid output. Transport failures are
// retried with backoff and rethrown once the policy is exhausted.
inline ClassificationRecord classify_trace(ChatClient& judge, std::string_view prompt_template, const JudgeInput& in,
                                           const RetryPolicy& retry = {}) {
  ClassificationRecord rec;
  rec.record_id = in.record_id;
  if (trim(in.full_response).empty()) {
    rec.failure_reason = "empty response";
    return rec;
  }
  ChatRequest req;
  req.messages = {{"user", render_judge_prompt(prompt_template, in)}};
  req.json_schema = verdict_schema();
  req.schema_name = "trace_verdict";
  for (int attempt = 0; attempt < 2; ++attempt) {
    const ChatResponse resp = with_retry([&] { return judge.complete(req); }, retry);
    rec.calls.push_back({to_json_log(req), resp.refusal ? "[refusal] " + *resp.refusal : resp.content});
    if (auto v = parse_verdict(resp.content)) {
      rec.verdict = *v;
      rec.label = verdict_to_label(*v);
      return rec;
    }
  }
  rec.failure_reason = "judge output failed schema validation";
  return rec;
}

inline std::vector<ClassificationRecord> classify_batch(ChatClient& judge, std::string_view prompt_template,
                                                        const std::vector<JudgeInput>& inputs, std::size_t max_parallel,
                                                        const RetryPolicy& retry = {}) {
  return parallel_map(inputs, max_parallel, [&](const JudgeInput& in) {
    try {
      return classify_trace(judge, prompt_template, in, retry);
    } catch (const Error& e) {
      ClassificationRecord rec;
      rec.record_id = in.record_id;
      rec.failure_reason = std::string("judge call failed: ") + e.what();
      return rec;
    }
  });
}

// Answer as shown to the judge: "(B) Yes, the action is appropriate".
inline std::string answer_display(TaskName task, const OptionAssignment& a, Answer answer) {
  const OptionTexts opts = option_texts(task);
  return "(" + std::string(to_string(a.slot_of(answer))) + ") " + (answer == Answer::yes ? opts.yes : opts.no);
}

// ---------------------------------------------------------------------------
// Sampling of settings
// ---------------------------------------------------------------------------

struct SettingKey {
  std::string backend;
  std::string task;
  DirectionKind direction = DirectionKind::probe_yes;
  double alpha = 0.0;
  auto operator<=>(const SettingKey&) const = default;
};

inline std::string setting_id(const SettingKey& k) {
  return k.backend + "/" + k.task + "/" + std::string(to_string(k.direction)) + "/" + format_double(k.alpha);
}

struct Selection {
  std::map<SettingKey, std::vector<FlipRecord>> selected;
  std::map<SettingKey, std::size_t> excluded;  // settings with too few records, and their counts
};

// Uniformly samples min(cap, n) records per setting; settings with fewer than
// min_n records are dropped.
inline Selection select_for_classification(const std::map<SettingKey, std::vector<FlipRecord>>& groups,
                                           std::uint64_t seed, std::size_t cap = 50, std::size_t min_n = 20) {
  Selection out;
  for (const auto& [key, records] : groups) {
    if (records.size() < min_n) {
      out.excluded[key] = records.size();
      continue;
    }
    out.selected[key] = cap_subset(std::span<const FlipRecord>(records), cap, seed, "judge/" + setting_id(key));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Consistency audit
// ---------------------------------------------------------------------------

using LabelMatrix = std::array<std::array<std::size_t, 4>, 4>;  // [run1][run2], label order as TraceLabel
using FieldMatrix = std::array<std::array<std::size_t, 2>, 2>;  // [run1][run2], index 0 = false, 1 = true

struct AuditReport {
  std::size_t n = 0;
  LabelMatrix labels{};
  FieldMatrix premises{};
  FieldMatrix entailment{};
  double overall = 0.0;
  double premises_agreement = 0.0;
  double entailment_agreement = 0.0;
  std::array<std::optional<double>, 4> per_label{};  // conditioned on the run-2 label
};

inline double field_agreement(const FieldMatrix& m) {
  const std::size_t n = m[0][0] + m[0][1] + m[1][0] + m[1][1];
  if (n == 0) throw AuditError("field_agreement: empty matrix", {});
  return static_cast<double>(m[0][0] + m[1][1]) / static_cast<double>(n);
}

inline AuditReport audit_from_label_matrix(const LabelMatrix& m) {
  AuditReport r;
  r.labels = m;
  std::size_t diag = 0;
  for (auto a : kAllTraceLabels) {
    for (auto b : kAllTraceLabels) {
      const std::size_t c = m[label_index(a)][label_index(b)];
      r.n += c;
      if (a == b) diag += c;
      const bool fa = a == TraceLabel::confabulation || a == TraceLabel::hallucination;
      const bool fb = b == TraceLabel::confabulation || b == TraceLabel::hallucination;
      const bool ea = a == TraceLabel::sound || a == TraceLabel::confabulation;
      const bool eb = b == TraceLabel::sound || b == TraceLabel::confabulation;
      r.premises[fa][fb] += c;
      r.entailment[ea][eb] += c;
    }
  }
  if (r.n == 0) throw AuditError("consistency audit: no paired records", {});
  r.overall = static_cast<double>(diag) / static_cast<double>(r.n);
  r.premises_agreement = field_agreement(r.premises);
  r.entailment_agreement = field_agreement(r.entailment);
  for (auto b : kAllTraceLabels) {
    std::size_t col = 0;
    for (auto a : kAllTraceLabels) col += m[label_index(a)][label_index(b)];
    if (col > 0)
      r.per_label[label_index(b)] = static_cast<double>(m[label_index(b)][label_index(b)]) / static_cast<double>(col);
  }
  return r;
}

// run2 re-classifies a subset of run1. Keys present only in run2 are orphans.
inline AuditReport consistency_audit(const std::map<std::string, JudgeVerdict>& run1,
                                     const std::map<std::string, JudgeVerdict>& run2) {
  std::vector<std::string> orphans;
  for (const auto& [k, _] : run2)
    if (!run1.contains(k)) orphans.push_back(k);
  if (!orphans.empty())
    throw AuditError("consistency audit: " + std::to_string(orphans.size()) + " run-2 records have no run-1 match",
                     orphans);
  LabelMatrix m{};
  for (const auto& [k, v2] : run2) ++m[label_index(verdict_to_label(run1.at(k)))][label_index(verdict_to_label(v2))];
  return audit_from_label_matrix(m);
}

inline nlohmann::json to_json(const AuditReport& r) {
  nlohmann::json per_label = nlohmann::json::object();
  for (auto l : kAllTraceLabels) {
    const auto& v = r.per_label[label_index(l)];
    per_label[std::string(to_string(l))] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return {{"n", r.n},
          {"overall", r.overall},
          {"premises_agreement", r.premises_agreement},
          {"entailment_agreement", r.entailment_agreement},
          {"per_label", per_label},
          {"label_matrix", r.labels},
          {"premises_matrix", r.premises},
          {"entailment_matrix", r.entailment}};
}

// ---------------------------------------------------------------------------
// Offline judge for planted-backend traces
// ---------------------------------------------------------------------------

namespace detail {

inline bool mentions_yes_option(std::string_view answer) {
  const auto close = answer.find(") ");
  const std::string_view text = close == std::string_view::npos ? answer : answer.substr(close + 2);
  return text.starts_with("Yes");
}

}  // namespace detail

// Grades the planted backend's templated traces without a network call. The
// premise sentence "The details are consistent/inconsistent." carries the
// trace's factual claim; garbled traces have no premise and count as false
// premises that support nothing.
inline ChatResponse synthetic_judge_reply(const ChatRequest& req) {
  const std::string& prompt = req.messages.back().content;
  const auto correct = tagged_section(prompt, "correct_answer").value_or("");
  const auto model = tagged_section(prompt, "model_answer").value_or("");
  const auto response = tagged_section(prompt, "response").value_or("");
  const bool correct_yes = detail::mentions_yes_option(correct);
  const bool model_yes = detail::mentions_yes_option(model);
  std::optional<bool> premise_yes;
  if (response.find("details are inconsistent") != std::string::npos) premise_yes = false;
  else if (response.find("details are consistent") != std::string::npos) premise_yes = true;

  JudgeVerdict v;
  if (!premise_yes) {
    v = {true, "The reasoning is not a coherent statement about the question.", false,
         "Nothing in the text supports the chosen answer."};
  } else {
    v.false_premises = *premise_yes != correct_yes;
    v.premises_explanation = v.false_premises ? "The stated assessment of the details contradicts the facts."
                                              : "The stated assessment of the details is accurate.";
    v.conclusion_follows = *premise_yes == model_yes;
    v.entailment_explanation = v.conclusion_follows ? "The answer matches the stated assessment."
                                                    : "The answer contradicts the stated assessment.";
  }
  ChatResponse out;
  out.content = nlohmann::json(v).dump();
  return out;
}

inline std::unique_ptr<ScriptedChatClient> make_synthetic_judge() {
  return std::make_unique<ScriptedChatClient>(synthetic_judge_reply, "synthetic-judge");
}

}  // namespace precot
