#pragma once

// Final-answer extraction for "(A)"/"(B)" style responses. Parsing is total:
// a missing answer is a `failed` status, never an exception.

#include <optional>
#include <regex>
#include <string>
#include <string_view>

#include "precot/core.hpp"
#include "precot/task_corpus.hpp"

namespace precot {

enum class ParseStatus { parsed, failed };
enum class Strictness { tolerant, strict };
enum class SemanticAnswer { yes, no, failed };

inline std::string_view to_string(ParseStatus s) { return s == ParseStatus::parsed ? "parsed" : "failed"; }
inline std::string_view to_string(SemanticAnswer s) {
  switch (s) {
    case SemanticAnswer::yes: return "yes";
    case SemanticAnswer::no: return "no";
    case SemanticAnswer::failed: return "failed";
  }
  return "failed";
}

inline SemanticAnswer parse_semantic_word(std::string_view s) {
  if (s == "yes") return SemanticAnswer::yes;
  if (s == "no") return SemanticAnswer::no;
  if (s == "failed") return SemanticAnswer::failed;
  throw ConfigError("expected yes/no/failed, got: " + std::string(s));
}

inline SemanticAnswer to_semantic(Answer a) { return a == Answer::yes ? SemanticAnswer::yes : SemanticAnswer::no; }
inline std::optional<Answer> to_answer(SemanticAnswer s) {
  if (s == SemanticAnswer::yes) return Answer::yes;
  if (s == SemanticAnswer::no) return Answer::no;
  return std::nullopt;
}

inline Strictness parse_strictness(std::string_view s) {
  if (s == "tolerant") return Strictness::tolerant;
  if (s == "strict") return Strictness::strict;
  throw ConfigError("unknown parsing strictness: " + std::string(s));
}

struct ParsedAnswer {
  ParseStatus status = ParseStatus::failed;
  std::optional<Slot> letter;
  std::optional<Answer> semantic;
  std::string cot_text;
};

namespace detail {

inline constexpr std::string_view kEndMarkers[] = {"<eos>", "</s>", "<|endoftext|>", "<|im_end|>",
                                                   "<end_of_turn>", "<|eot_id|>", "<|end|>"};

inline std::string_view strip_trailing_markers(std::string_view text) {
  bool changed = true;
  while (changed) {
    changed = false;
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) {
      text.remove_suffix(1);
      changed = true;
    }
    for (auto m : kEndMarkers) {
      if (text.ends_with(m)) {
        text.remove_suffix(m.size());
        changed = true;
      }
    }
  }
  return text;
}

inline const std::regex& tolerant_pattern() {
  // "best answer is" in any case, optional colon/dash, optional bold or
  // italic markers, then "(A)" / "(b)" or a bare capital letter.
  static const std::regex re(
      R"([Bb][Ee][Ss][Tt]\s+[Aa][Nn][Ss][Ww][Ee][Rr]\s+[Ii][Ss]\s*[:\-]?\s*[*_]{0,2}\s*)"
      R"((?:\(\s*([AaBb])\s*\)|([AB])(?=[\s.,;:!*_)]|$)))");
  return re;
}

inline const std::regex& strict_pattern() {
  static const std::regex re(R"(The best answer is: \(([AB])\))");
  return re;
}

inline bool is_conclusive_sentence(std::string_view s) {
  std::string lower;
  for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  const std::string t = trim(lower);
  const bool opener = t.starts_with("so,") || t.starts_with("so ") || t.starts_with("therefore") ||
                      t.starts_with("thus") || t.starts_with("hence");
  return opener && t.find("answer") != std::string::npos;
}

// Trailing sentences that only announce the answer are not part of the CoT.
inline std::string trim_conclusive_tail(std::string cot) {
  while (true) {
    cot = rtrim(std::move(cot));
    if (cot.empty()) return cot;
    // Find the start of the last sentence (skip the final terminator itself).
    std::size_t end = cot.size() - 1;
    std::size_t start = 0;
    for (std::size_t i = end; i-- > 0;) {
      if (cot[i] == '.' || cot[i] == '!' || cot[i] == '?' || cot[i] == '\n') {
        start = i + 1;
        break;
      }
    }
    if (!is_conclusive_sentence(std::string_view(cot).substr(start))) return cot;
    cot.resize(start);
  }
}

}  // namespace detail

// Text between the CoT preamble (when present) and the sentence carrying the
// final answer statement.
inline std::string extract_cot(std::string_view text, std::optional<std::size_t> answer_pos) {
  std::size_t begin = 0;
  if (auto p = text.rfind(kCotPreamble); p != std::string_view::npos &&
                                         (!answer_pos || p < *answer_pos)) {
    begin = p + kCotPreamble.size();
  }
  std::size_t end = text.size();
  if (answer_pos) {
    // Back up to the start of the sentence holding the answer statement.
    std::size_t i = *answer_pos;
    while (i > begin) {
      const char c = text[i - 1];
      if (c == '.' || c == '!' || c == '?' || c == '\n') break;
      --i;
    }
    end = i;
  }
  std::string cot(text.substr(begin, end > begin ? end - begin : 0));
  return trim(detail::trim_conclusive_tail(std::move(cot)));
}

inline ParsedAnswer parse_answer(std::string_view raw, Strictness strictness = Strictness::tolerant) {
  ParsedAnswer out;
  const std::string_view text = detail::strip_trailing_markers(raw);
  const std::regex& re = strictness == Strictness::strict ? detail::strict_pattern() : detail::tolerant_pattern();
  const std::string buf(text);
  std::optional<std::size_t> last_pos;
  std::optional<Slot> last_letter;
  for (auto it = std::sregex_iterator(buf.begin(), buf.end(), re); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    std::string letter;
    for (std::size_t g = 1; g < m.size(); ++g)
      if (m[g].matched) letter = m[g].str();
    if (letter.empty()) continue;
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(letter[0])));
    last_letter = c == 'A' ? Slot::A : Slot::B;
    last_pos = static_cast<std::size_t>(m.position(0));
  }
  if (last_letter) {
    out.status = ParseStatus::parsed;
    out.letter = last_letter;
  }
  out.cot_text = extract_cot(text, last_pos);
  return out;
}

inline ParsedAnswer parse_answer(std::string_view raw, const OptionAssignment& assignment,
                                 Strictness strictness = Strictness::tolerant) {
  ParsedAnswer p = parse_answer(raw, strictness);
  if (p.letter) p.semantic = assignment.answer_in(*p.letter);
  return p;
}

inline SemanticAnswer to_semantic(const ParsedAnswer& parsed, const OptionAssignment& assignment) {
  if (parsed.status != ParseStatus::parsed || !parsed.letter) return SemanticAnswer::failed;
  return to_semantic(assignment.answer_in(*parsed.letter));
}

}  // namespace precot
