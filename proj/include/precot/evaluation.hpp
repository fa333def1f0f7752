#pragma once

// Unsteered generations over a task split: render, generate, parse, score.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "precot/core.hpp"
#include "precot/inference_backend.hpp"
#include "precot/response_parsing.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

struct EvalRecord {
  std::string instance_id;
  Answer gold = Answer::yes;
  OptionAssignment assignment;
  PromptMode mode = PromptMode::cot;
  SemanticAnswer answer = SemanticAnswer::failed;
  std::optional<Slot> letter;
  std::string cot_text;
  GenerationRecord generation;
  std::string error;  // backend failure, if any; such records count as parse failures

  bool parsed() const { return answer != SemanticAnswer::failed; }
  bool correct() const { return parsed() && answer == to_semantic(gold); }
};

inline void to_json(nlohmann::json& j, const EvalRecord& r) {
  j = nlohmann::json{{"instance_id", r.instance_id},
                     {"gold", to_string(r.gold)},
                     {"assignment", r.assignment},
                     {"mode", to_string(r.mode)},
                     {"answer", to_string(r.answer)},
                     {"letter", r.letter ? nlohmann::json(std::string(to_string(*r.letter))) : nlohmann::json(nullptr)},
                     {"cot_text", r.cot_text},
                     {"generation", r.generation},
                     {"error", r.error}};
}

inline void from_json(const nlohmann::json& j, EvalRecord& r) {
  r.instance_id = j.at("instance_id").get<std::string>();
  r.gold = parse_answer_word(j.at("gold").get<std::string>());
  r.assignment = j.at("assignment").get<OptionAssignment>();
  r.mode = parse_mode(j.at("mode").get<std::string>());
  r.answer = parse_semantic_word(j.at("answer").get<std::string>());
  r.letter.reset();
  if (j.contains("letter") && !j["letter"].is_null()) r.letter = j["letter"].get<std::string>() == "A" ? Slot::A : Slot::B;
  r.cot_text = j.value("cot_text", "");
  r.generation = j.at("generation").get<GenerationRecord>();
  r.error = j.value("error", "");
}

struct EvalSettings {
  PromptMode mode = PromptMode::cot;
  std::int64_t option_seed = 0;
  DecodeParams decode;
  std::uint64_t seed = 0;
  Strictness strictness = Strictness::tolerant;
};

inline std::uint64_t eval_decode_seed(std::uint64_t seed, PromptMode mode, std::string_view instance_id) {
  return SeedMixer(seed).add("eval").add(to_string(mode)).add(instance_id).value();
}

inline EvalRecord evaluate_instance(InferenceBackend& backend, const TaskDataset& ds, const TaskInstance& inst,
                                    const EvalSettings& s) {
  EvalRecord r;
  r.instance_id = inst.instance_id;
  r.gold = inst.gold_answer;
  r.mode = s.mode;
  r.assignment = assign_options(inst.instance_id, s.option_seed);
  const PromptInstance prompt = render_prompt(ds, inst, r.assignment, s.mode);
  DecodeParams params = s.decode;
  params.rng_seed = eval_decode_seed(s.seed, s.mode, inst.instance_id);
  r.generation.params = params;
  try {
    r.generation = backend.generate(prompt.rendered_text, params);
  } catch (const Error& e) {
    r.error = e.what();
    return r;
  }
  const ParsedAnswer parsed = parse_answer(r.generation.text, r.assignment, s.strictness);
  r.letter = parsed.letter;
  r.answer = to_semantic(parsed, r.assignment);
  r.cot_text = parsed.cot_text;
  return r;
}

inline std::vector<EvalRecord> evaluate_split(InferenceBackend& backend, const TaskDataset& ds,
                                              std::span<const TaskInstance> split, const EvalSettings& s) {
  std::vector<EvalRecord> out;
  out.reserve(split.size());
  for (const auto& inst : split) out.push_back(evaluate_instance(backend, ds, inst, s));
  return out;
}

}  // namespace precot
