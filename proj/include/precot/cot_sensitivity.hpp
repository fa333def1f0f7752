#pragma once

// CoT interventions on correct generations: replacing the CoT with an
// ellipsis, and substituting a minimally edited CoT that argues for the
// other answer. Both measure how often the final answer changes.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/evaluation.hpp"
#include "precot/inference_backend.hpp"
#include "precot/llm_client.hpp"
#include "precot/response_parsing.hpp"
#include "precot/steering_engine.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

enum class InterventionKind { ellipses, wrong_cot };

inline std::string_view to_string(InterventionKind k) { return k == InterventionKind::ellipses ? "ellipses" : "wrong_cot"; }

inline InterventionKind parse_intervention_kind(std::string_view s) {
  if (s == "ellipses") return InterventionKind::ellipses;
  if (s == "wrong_cot" || s == "wrong-cot") return InterventionKind::wrong_cot;
  throw ConfigError("unknown intervention: " + std::string(s));
}

inline constexpr std::string_view kEllipsesSuffix = " ... So, the best answer is:";

struct InterventionRecord {
  InterventionKind kind = InterventionKind::ellipses;
  std::string instance_id;
  Answer original_answer = Answer::yes;
  std::string modified_prompt;
  SemanticAnswer new_answer = SemanticAnswer::failed;
  bool changed = false;
  bool skipped = false;
  std::string skip_reason;
  std::string original_cot;
  std::string edited_cot;
  std::optional<std::size_t> edit_distance;
  bool non_minimal = false;
  std::uint64_t decode_seed = 0;
  GenerationRecord generation;
  std::string error;
};

inline void to_json(nlohmann::json& j, const InterventionRecord& r) {
  j = nlohmann::json{{"kind", to_string(r.kind)},
                     {"instance_id", r.instance_id},
                     {"original_answer", to_string(r.original_answer)},
                     {"modified_prompt_tail", r.modified_prompt.size() > 400
                                                  ? r.modified_prompt.substr(r.modified_prompt.size() - 400)
                                                  : r.modified_prompt},
                     {"new_answer", to_string(r.new_answer)},
                     {"changed", r.changed},
                     {"skipped", r.skipped},
                     {"skip_reason", r.skip_reason},
                     {"original_cot", r.original_cot},
                     {"edited_cot", r.edited_cot},
                     {"edit_distance", r.edit_distance ? nlohmann::json(*r.edit_distance) : nlohmann::json(nullptr)},
                     {"non_minimal", r.non_minimal},
                     {"decode_seed", r.decode_seed},
                     {"generation", r.generation},
                     {"error", r.error}};
}

inline void from_json(const nlohmann::json& j, InterventionRecord& r) {
  r.kind = parse_intervention_kind(j.at("kind").get<std::string>());
  r.instance_id = j.at("instance_id").get<std::string>();
  r.original_answer = parse_answer_word(j.at("original_answer").get<std::string>());
  r.modified_prompt = j.value("modified_prompt_tail", "");
  r.new_answer = parse_semantic_word(j.at("new_answer").get<std::string>());
  r.changed = j.at("changed").get<bool>();
  r.skipped = j.at("skipped").get<bool>();
  r.skip_reason = j.value("skip_reason", "");
  r.original_cot = j.value("original_cot", "");
  r.edited_cot = j.value("edited_cot", "");
  r.edit_distance.reset();
  if (j.contains("edit_distance") && !j["edit_distance"].is_null()) r.edit_distance = j["edit_distance"].get<std::size_t>();
  r.non_minimal = j.value("non_minimal", false);
  r.decode_seed = j.value("decode_seed", std::uint64_t{0});
  r.generation = j.at("generation").get<GenerationRecord>();
  r.error = j.value("error", "");
}

// Levenshtein distance over bytes.
inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kMinimalEditFraction = 0.3;

// The CoT prompt followed by an empty reasoning span; demonstrations are untouched.
inline std::string ellipses_intervene(std::string_view cot_prompt) {
  if (!cot_prompt.ends_with(kCotPreamble)) throw ConfigError("ellipses_intervene: prompt is not a CoT prompt");
  return std::string(cot_prompt) + std::string(kEllipsesSuffix);
}

// ---------------------------------------------------------------------------
// Wrong-CoT editing
// ---------------------------------------------------------------------------

struct EditorTemplates {
  std::string extract;
  std::string edit;
};

struct WrongCotEdit {
  std::optional<std::string> modified_prompt;  // empty when skipped
  std::string extracted;
  std::string edited;
  std::size_t distance = 0;
  bool non_minimal = false;
  std::string skip_reason;
};

namespace detail {

inline std::optional<std::string> json_string_field(const ChatResponse& r, const char* key) {
  if (r.refusal) return std::nullopt;
  std::string text = trim(r.content);
  if (text.starts_with("```")) {
    const auto nl = text.find('\n');
    const auto end = text.rfind("```");
    if (nl == std::string::npos || end <= nl) return std::nullopt;
    text = trim(text.substr(nl + 1, end - nl - 1));
  }
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains(key) || !j[key].is_string()) return std::nullopt;
  return j[key].get<std::string>();
}

inline bool mentions_final_answer(std::string_view s) {
  std::string lower;
  for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return lower.find("best answer is") != std::string::npos;
}

}  // namespace detail

// Extract the CoT span with the editor, edit it toward the other answer, and
// splice the edit after the CoT preamble. Refusals and invalid edits yield a
// skip reason; TransportError propagates for the caller to retry.
inline WrongCotEdit wrong_cot_intervene(std::string_view cot_prompt, std::string_view response, std::string_view question,
                                        std::string_view target_answer, ChatClient& editor,
                                        const EditorTemplates& templates, const RetryPolicy& retry = {}) {
  WrongCotEdit out;
  if (!cot_prompt.ends_with(kCotPreamble)) throw ConfigError("wrong_cot_intervene: prompt is not a CoT prompt");

  ChatRequest extract;
  extract.messages = {{"user", fill_template(templates.extract, {{"response", std::string(response)}})}};
  extract.json_schema = nlohmann::json{{"type", "object"},
                                       {"properties", {{"cot", {{"type", "string"}}}}},
                                       {"required", {"cot"}},
                                       {"additionalProperties", false}};
  extract.schema_name = "cot_extract";
  const auto extracted = detail::json_string_field(with_retry([&] { return editor.complete(extract); }, retry), "cot");
  if (!extracted) {
    out.skip_reason = "editor refused or returned malformed extraction";
    return out;
  }
  out.extracted = trim(*extracted);
  if (out.extracted.empty()) {
    out.skip_reason = "no CoT span to edit";
    return out;
  }
  if (response.find(out.extracted) == std::string_view::npos || detail::mentions_final_answer(out.extracted)) {
    out.skip_reason = "extracted span is not a verbatim pre-answer span of the response";
    return out;
  }

  ChatRequest edit;
  edit.messages = {{"user", fill_template(templates.edit, {{"question", std::string(question)},
                                                          {"target_answer", std::string(target_answer)},
                                                          {"cot", out.extracted}})}};
  edit.json_schema = nlohmann::json{{"type", "object"},
                                    {"properties", {{"edited_cot", {{"type", "string"}}}}},
                                    {"required", {"edited_cot"}},
                                    {"additionalProperties", false}};
  edit.schema_name = "cot_edit";
  const auto edited = detail::json_string_field(with_retry([&] { return editor.complete(edit); }, retry), "edited_cot");
  if (!edited) {
    out.skip_reason = "editor refused or returned malformed edit";
    return out;
  }
  out.edited = trim(*edited);
  if (out.edited.empty() || out.edited == out.extracted) {
    out.skip_reason = "edit is empty or identical to the original";
    return out;
  }
  if (detail::mentions_final_answer(out.edited)) {
    out.skip_reason = "edit states a final answer";
    return out;
  }
  out.distance = edit_distance(out.extracted, out.edited);
  out.non_minimal = static_cast<double>(out.distance) > kMinimalEditFraction * static_cast<double>(out.extracted.size());
  out.modified_prompt = std::string(cot_prompt) + " " + out.edited;
  return out;
}

// Offline editor for planted-backend traces: extraction via the response
// parser, editing by swapping the assessment words.
inline ChatResponse synthetic_editor_reply(const ChatRequest& req) {
  const std::string& prompt = req.messages.back().content;
  ChatResponse out;
  if (req.schema_name == "cot_extract") {
    const auto response = tagged_section(prompt, "response").value_or("");
    const ParsedAnswer p = parse_answer(response);
    out.content = nlohmann::json{{"cot", p.cot_text}}.dump();
    return out;
  }
  std::string cot = tagged_section(prompt, "reasoning").value_or("");
  const std::pair<std::string_view, std::string_view> swaps[] = {
      {"are inconsistent", "are consistent"}, {"are consistent", "are inconsistent"}};
  for (const auto& [from, to] : swaps) {
    if (auto pos = cot.find(from); pos != std::string::npos) {
      cot.replace(pos, from.size(), to);
      break;
    }
  }
  out.content = nlohmann::json{{"edited_cot", cot}}.dump();
  return out;
}

inline std::unique_ptr<ScriptedChatClient> make_synthetic_editor() {
  return std::make_unique<ScriptedChatClient>(synthetic_editor_reply, "synthetic-editor");
}

// ---------------------------------------------------------------------------
// Change-rate measurement
// ---------------------------------------------------------------------------

struct ChangeRateResult {
  InterventionKind kind = InterventionKind::ellipses;
  std::size_t n_requested = 0;
  std::size_t n_available = 0;
  std::size_t n_sampled = 0;
  std::size_t n_skipped = 0;
  std::size_t n_non_minimal = 0;
  std::size_t n_parsed = 0;
  std::size_t n_changed = 0;
  double rate = 0.0;
  Interval ci;
  std::vector<InterventionRecord> records;
  std::vector<std::string> notes;
};

inline nlohmann::json summary_json(const ChangeRateResult& r) {
  return {{"kind", to_string(r.kind)},       {"n_requested", r.n_requested}, {"n_available", r.n_available},
          {"n_sampled", r.n_sampled},        {"n_skipped", r.n_skipped},     {"n_non_minimal", r.n_non_minimal},
          {"n_parsed", r.n_parsed},          {"n_changed", r.n_changed},     {"rate", r.rate},
          {"ci_low", r.ci.low},              {"ci_high", r.ci.high},         {"notes", r.notes}};
}

struct InterventionContext {
  const TaskDataset* dataset = nullptr;
  ChatClient* editor = nullptr;  // required for wrong_cot
  const EditorTemplates* templates = nullptr;
  DecodeParams decode;
  RetryPolicy retry;
};

inline std::uint64_t intervention_decode_seed(std::uint64_t seed, InterventionKind kind, std::string_view id) {
  return SeedMixer(seed).add("intervene").add(to_string(kind)).add(id).value();
}

// Samples n correct, parsed CoT generations (all of them when fewer exist)
// and measures the share whose answer changes under the intervention.
inline ChangeRateResult measure_change_rate(InferenceBackend& backend, std::span<const EvalRecord> generations,
                                            InterventionKind kind, const InterventionContext& ctx, std::size_t n,
                                            std::uint64_t seed) {
  if (!ctx.dataset) throw ConfigError("measure_change_rate: dataset required");
  if (kind == InterventionKind::wrong_cot && (!ctx.editor || !ctx.templates))
    throw ConfigError("wrong_cot intervention requires an editor client");
  std::vector<EvalRecord> pool;
  for (const auto& g : generations)
    if (g.correct() && g.mode == PromptMode::cot) pool.push_back(g);

  ChangeRateResult res;
  res.kind = kind;
  res.n_requested = n;
  res.n_available = pool.size();
  if (pool.size() < n)
    res.notes.push_back("only " + std::to_string(pool.size()) + " correct generations available; using all");
  const auto sample = cap_subset(std::span<const EvalRecord>(pool), n, seed, std::string("intervene/") + std::string(to_string(kind)));
  res.n_sampled = sample.size();
  const auto targets = make_targets(sample, *ctx.dataset);

  std::map<std::string, const TaskInstance*> by_id;
  for (const auto& t : ctx.dataset->test) by_id[t.instance_id] = &t;
  for (const auto& t : ctx.dataset->train) by_id[t.instance_id] = &t;

  for (std::size_t i = 0; i < sample.size(); ++i) {
    const EvalRecord& g = sample[i];
    const SteerTarget& t = targets[i];
    InterventionRecord rec;
    rec.kind = kind;
    rec.instance_id = g.instance_id;
    rec.original_answer = t.original_answer;
    rec.original_cot = g.cot_text;
    if (kind == InterventionKind::ellipses) {
      rec.modified_prompt = ellipses_intervene(t.prompt);
    } else {
      const TaskInstance& inst = *by_id.at(g.instance_id);
      const Answer target = opposite(t.original_answer);
      const OptionTexts opts = option_texts(inst.task);
      const std::string target_text = "(" + std::string(to_string(t.assignment.slot_of(target))) + ") " +
                                      (target == Answer::yes ? opts.yes : opts.no);
      const WrongCotEdit e = wrong_cot_intervene(t.prompt, g.generation.text, inst.question_text, target_text,
                                                 *ctx.editor, *ctx.templates, ctx.retry);
      rec.original_cot = e.extracted.empty() ? g.cot_text : e.extracted;
      rec.edited_cot = e.edited;
      if (!e.modified_prompt) {
        rec.skipped = true;
        rec.skip_reason = e.skip_reason;
        ++res.n_skipped;
        res.records.push_back(std::move(rec));
        continue;
      }
      rec.edit_distance = e.distance;
      rec.non_minimal = e.non_minimal;
      if (e.non_minimal) ++res.n_non_minimal;
      rec.modified_prompt = *e.modified_prompt;
    }
    rec.decode_seed = intervention_decode_seed(seed, kind, g.instance_id);
    DecodeParams params = ctx.decode;
    params.rng_seed = rec.decode_seed;
    rec.generation.params = params;
    try {
      rec.generation = backend.generate(rec.modified_prompt, params);
      // The cue "best answer is:" may sit in the prompt, so the parse covers
      // the modified reasoning plus the continuation.
      const auto pre = rec.modified_prompt.rfind(kCotPreamble);
      const std::string continuation =
          (pre == std::string::npos ? std::string() : rec.modified_prompt.substr(pre + kCotPreamble.size())) +
          rec.generation.text;
      rec.new_answer = to_semantic(parse_answer(continuation, t.assignment), t.assignment);
    } catch (const Error& e) {
      rec.error = e.what();
      rec.new_answer = SemanticAnswer::failed;
    }
    rec.changed = rec.new_answer != SemanticAnswer::failed && rec.new_answer != to_semantic(t.original_answer);
    if (rec.new_answer != SemanticAnswer::failed) ++res.n_parsed;
    if (rec.changed) ++res.n_changed;
    res.records.push_back(std::move(rec));
  }
  if (res.n_parsed > 0) {
    res.rate = static_cast<double>(res.n_changed) / static_cast<double>(res.n_parsed);
    res.ci = wilson_ci(res.n_changed, res.n_parsed);
  }
  return res;
}

}  // namespace precot
