#include <gtest/gtest.h>

#include "precot/core.hpp"
#include "precot/response_parsing.hpp"
#include "test_util.hpp"

namespace {
using namespace precot;

struct Case {
  std::string id, text, status, note;
  std::optional<std::string> letter, cot;
};

std::vector<Case> corpus() {
  std::vector<Case> out;
  for (const auto& j : precot::testing::read_fixture_jsonl(precot::testing::test_dir() / "parse_corpus.jsonl")) {
    Case c{j.at("id"), j.at("text"), j.at("status"), j.value("note", ""), {}, {}};
    if (!j.at("letter").is_null()) c.letter = j.at("letter").get<std::string>();
    if (j.contains("cot")) c.cot = j.at("cot").get<std::string>();
    out.push_back(std::move(c));
  }
  return out;
}

TEST(Parsing, CorpusHasEnoughCases) {
  const auto cases = corpus();
  EXPECT_GE(cases.size(), 40u);
  std::size_t failures = 0;
  for (const auto& c : cases) failures += c.status == "failed";
  EXPECT_GE(failures, 10u);
}

TEST(Parsing, CorpusIsParsedExactly) {
  for (const auto& c : corpus()) {
    SCOPED_TRACE(c.id + " (" + c.note + ")");
    const auto p = parse_answer(c.text);
    EXPECT_EQ(std::string(to_string(p.status)), c.status);
    if (c.letter) {
      ASSERT_TRUE(p.letter.has_value());
      EXPECT_EQ(std::string(to_string(*p.letter)), *c.letter);
    } else {
      EXPECT_FALSE(p.letter.has_value());
    }
    if (c.cot) EXPECT_EQ(p.cot_text, *c.cot);
  }
}

TEST(Parsing, LastAnswerStatementWins) {
  const auto p = parse_answer("The best answer is: (A). Wait, actually the best answer is: (B)");
  ASSERT_EQ(p.status, ParseStatus::parsed);
  EXPECT_EQ(*p.letter, Slot::B);
}

TEST(Parsing, TrailingEndMarkersAreIgnored) {
  for (std::string marker : {"<eos>", "</s>", "<end_of_turn>", "<|eot_id|>", "  \n", "<eos>\n<eos>"}) {
    const auto p = parse_answer("The best answer is: (B)" + marker);
    ASSERT_EQ(p.status, ParseStatus::parsed) << marker;
    EXPECT_EQ(*p.letter, Slot::B);
  }
}

TEST(Parsing, StrictModeRequiresTheExactForm) {
  EXPECT_EQ(parse_answer("The best answer is: (A)", Strictness::strict).status, ParseStatus::parsed);
  EXPECT_EQ(parse_answer("the best answer is (a)", Strictness::strict).status, ParseStatus::failed);
  EXPECT_EQ(parse_answer("the best answer is (a)", Strictness::tolerant).status, ParseStatus::parsed);
}

TEST(Parsing, SemanticAnswerFollowsAssignment) {
  const OptionAssignment yes_a{Slot::A, Slot::B, 0};
  const OptionAssignment yes_b{Slot::B, Slot::A, 0};
  const auto p = parse_answer("The best answer is: (A)");
  EXPECT_EQ(to_semantic(p, yes_a), SemanticAnswer::yes);
  EXPECT_EQ(to_semantic(p, yes_b), SemanticAnswer::no);
  EXPECT_EQ(to_semantic(parse_answer("nothing"), yes_a), SemanticAnswer::failed);
  EXPECT_EQ(parse_answer("The best answer is: (B)", yes_b).semantic, Answer::yes);
}

// Total: any byte string parses to exactly one of the two statuses.
TEST(Parsing, TotalOverRandomBytes) {
  Rng rng(11);
  const std::string alphabet = "The bst answr i:()AB ab\n*_-.<>/eos";
  for (int i = 0; i < 3000; ++i) {
    std::string s;
    const auto n = rng.below(80);
    for (std::uint64_t k = 0; k < n; ++k) {
      if (rng.below(10) == 0) s.push_back(static_cast<char>(rng.below(256)));
      else s.push_back(alphabet[rng.below(alphabet.size())]);
    }
    ParsedAnswer p;
    ASSERT_NO_THROW(p = parse_answer(s));
    EXPECT_EQ(p.status == ParseStatus::parsed, p.letter.has_value());
  }
}

// Formatting the statement for a letter and parsing returns the same letter.
TEST(Parsing, RenderParseRoundTrip) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Slot s = rng.below(2) ? Slot::A : Slot::B;
    const std::string prefix = "Reasoning step " + std::to_string(i) + ". ";
    const auto p = parse_answer(prefix + "The best answer is: (" + std::string(to_string(s)) + ")");
    ASSERT_TRUE(p.letter);
    EXPECT_EQ(*p.letter, s);
    EXPECT_EQ(p.cot_text, trim(prefix));
  }
}

TEST(Parsing, CotExcludesPromptPreambleAndAnswer) {
  const auto p = parse_answer("Let's think step by step: One. Two. The best answer is: (A)");
  EXPECT_EQ(p.cot_text, "One. Two.");
}

TEST(Parsing, EmptyInputFails) {
  const auto p = parse_answer("");
  EXPECT_EQ(p.status, ParseStatus::failed);
  EXPECT_TRUE(p.cot_text.empty());
}

}  // namespace
