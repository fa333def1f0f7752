#include <gtest/gtest.h>

#include "precot/planted_backend.hpp"
#include "precot/remote_backend.hpp"
#include "precot/response_parsing.hpp"
#include "precot/task_corpus.hpp"
#include "test_util.hpp"

namespace {
using namespace precot;

TaskInstance item(int i, Answer gold = Answer::yes) {
  const std::string q = "Is the following sentence plausible? \"Player " + std::to_string(i) + " scored.\"";
  return {TaskName::sports_understanding, q, gold, make_instance_id(TaskName::sports_understanding, q)};
}

std::string cot_prompt(const TaskInstance& t, Slot yes_slot = Slot::A) {
  return render_prompt(t, {yes_slot, other(yes_slot), 0}, PromptMode::cot, "").rendered_text;
}

DecodeParams greedy(int max_new = 256) { return {0.0, max_new, 1}; }

TEST(PlantedBackend, DescriptorMatchesConfig) {
  PlantedConfig cfg;
  cfg.hidden_dim = 32;
  cfg.num_layers = 6;
  cfg.planted_layer = 2;
  PlantedBackend b(cfg);
  EXPECT_EQ(b.descriptor().hidden_dim, 32);
  EXPECT_EQ(b.descriptor().num_layers, 6);
  EXPECT_TRUE(b.descriptor().supports_unembedding);
  EXPECT_NEAR(norm(b.planted_direction()), 1.0, 1e-12);
  EXPECT_NEAR(norm(sub(b.class_mean(Answer::yes), b.class_mean(Answer::no))), cfg.separation, 1e-12);
}

TEST(PlantedBackend, InvalidConfigIsRejected) {
  PlantedConfig cfg;
  cfg.planted_layer = 9;
  EXPECT_THROW(PlantedBackend{cfg}, ConfigError);
  cfg = {};
  cfg.hidden_dim = 2;
  EXPECT_THROW(PlantedBackend{cfg}, ConfigError);
}

TEST(PlantedBackend, CaptureIsDeterministicAndShaped) {
  PlantedBackend b(PlantedConfig{});
  const auto p = cot_prompt(item(1));
  const std::vector<int> layers = {0, 4, 7};
  const auto a = b.capture_pre_cot_activations(p, layers);
  const auto c = b.capture_pre_cot_activations(p, layers);
  ASSERT_EQ(a.size(), 3u);
  for (int l : layers) {
    EXPECT_EQ(a.at(l).values.size(), 64u);
    EXPECT_EQ(a.at(l).values, c.at(l).values);
    EXPECT_EQ(a.at(l).position, toy_tokenize(p).size() - 1);
  }
}

TEST(PlantedBackend, CaptureRequiresThePreambleColonAtTheEnd) {
  PlantedBackend b(PlantedConfig{});
  const std::vector<int> layers = {1};
  EXPECT_THROW(b.capture_pre_cot_activations(cot_prompt(item(1)) + " The", layers), T0MismatchError);
  const auto no_cot = render_prompt(item(1), {Slot::A, Slot::B, 0}, PromptMode::no_cot, "").rendered_text;
  EXPECT_THROW(b.capture_pre_cot_activations(no_cot, layers), T0MismatchError);
}

TEST(PlantedBackend, LayerOutOfRangeIsAConfigError) {
  PlantedBackend b(PlantedConfig{});
  const std::vector<int> bad = {8};
  EXPECT_THROW(b.capture_pre_cot_activations(cot_prompt(item(1)), bad), ConfigError);
  EXPECT_THROW(b.generate_with_steering(cot_prompt(item(1)), greedy(), {-1, b.planted_direction(), 1.0}),
               ConfigError);
}

TEST(PlantedBackend, UnsteeredCotAnswersItsBelief) {
  PlantedBackend b(PlantedConfig{});
  std::vector<TaskInstance> items;
  for (int i = 0; i < 40; ++i) items.push_back(item(i, i % 2 ? Answer::yes : Answer::no));
  b.add_reference_labels(items);
  for (const auto& t : items) {
    for (Slot ys : {Slot::A, Slot::B}) {
      const OptionAssignment a{ys, other(ys), 0};
      const auto rec = b.generate(cot_prompt(t, ys), greedy());
      const auto parsed = parse_answer(rec.text, a);
      ASSERT_EQ(parsed.status, ParseStatus::parsed) << rec.text;
      EXPECT_EQ(*parsed.semantic, t.gold_answer);
      EXPECT_EQ(rec.finish_reason, "stop");
      EXPECT_FALSE(rec.steering.has_value());
    }
  }
}

TEST(PlantedBackend, NoCotAnswerIsJustTheStatement) {
  PlantedBackend b(PlantedConfig{});
  const auto t = item(3, Answer::no);
  b.add_reference_labels({t});
  const auto p = render_prompt(t, {Slot::B, Slot::A, 0}, PromptMode::no_cot, "").rendered_text;
  const auto rec = b.generate(p, greedy());
  EXPECT_EQ(rec.text, " The best answer is: (A)");
}

TEST(PlantedBackend, GenerationIsSeedDeterministic) {
  PlantedBackend b(PlantedConfig{});
  const auto p = cot_prompt(item(5));
  const DecodeParams hot{0.7, 256, 42};
  EXPECT_EQ(b.generate(p, hot).text, b.generate(p, hot).text);
}

TEST(PlantedBackend, SteeringAlongTheDirectionFlipsTheAnswer) {
  PlantedBackend b(PlantedConfig{});
  const auto t = item(8, Answer::yes);
  b.add_reference_labels({t});
  const OptionAssignment a{Slot::A, Slot::B, 0};
  const auto rec = b.generate_with_steering(cot_prompt(t), greedy(), {4, b.planted_direction(), -8.0});
  const auto parsed = parse_answer(rec.text, a);
  ASSERT_EQ(parsed.status, ParseStatus::parsed) << rec.text;
  EXPECT_EQ(*parsed.semantic, Answer::no);
  ASSERT_TRUE(rec.steering);
  EXPECT_EQ(rec.steering->layer, 4);
  EXPECT_DOUBLE_EQ(rec.steering->alpha, -8.0);
}

TEST(PlantedBackend, EditsAbovePlantedLayerDoNotReachTheReadout) {
  PlantedBackend b(PlantedConfig{});
  const auto t = item(9, Answer::yes);
  b.add_reference_labels({t});
  const auto base = b.generate(cot_prompt(t), greedy()).text;
  const auto rec = b.generate_with_steering(cot_prompt(t), greedy(), {6, b.planted_direction(), -8.0});
  EXPECT_EQ(rec.text, base);
}

TEST(PlantedBackend, LargeEditsCollapseTheOutput) {
  PlantedBackend b(PlantedConfig{});
  const auto rec = b.generate_with_steering(cot_prompt(item(2)), greedy(), {4, b.planted_direction(), 20.0});
  EXPECT_EQ(rec.tokens.size(), 24u);
  EXPECT_EQ(parse_answer(rec.text).status, ParseStatus::failed);
}

TEST(PlantedBackend, BadSteeringSpecsAreRejected) {
  PlantedBackend b(PlantedConfig{});
  EXPECT_THROW(b.generate_with_steering(cot_prompt(item(1)), greedy(), {4, Vec(3, 1.0), 1.0}), ConfigError);
  EXPECT_THROW(b.generate_with_steering(cot_prompt(item(1)), greedy(), {4, Vec(64, 0.0), 1.0}), ConfigError);
  EXPECT_THROW(b.generate(cot_prompt(item(1)), {-1.0, 10, 0}), ConfigError);
  EXPECT_THROW(b.generate(cot_prompt(item(1)), {0.0, 0, 0}), ConfigError);
}

TEST(PlantedBackend, TruncationIsReported) {
  PlantedBackend b(PlantedConfig{});
  const auto rec = b.generate(cot_prompt(item(1)), greedy(5));
  EXPECT_EQ(rec.finish_reason, "length");
  EXPECT_EQ(rec.tokens.size(), 5u);
}

TEST(PlantedBackend, ContextOverflowCarriesCounts) {
  PlantedConfig cfg;
  cfg.context_limit = 50;
  PlantedBackend b(cfg);
  try {
    b.generate(cot_prompt(item(1)), greedy(40));
    FAIL() << "expected overflow";
  } catch (const ContextOverflowError& e) {
    EXPECT_EQ(e.requested_new(), 40u);
    EXPECT_EQ(e.context_limit(), 50u);
    EXPECT_GT(e.prompt_tokens(), 10u);
  }
}

TEST(PlantedBackend, ToyTokenizerRoundTrips) {
  const std::string s = "Q: A (B) thing,  with spaces.\n\nLet's think step by step:";
  std::string joined;
  for (const auto& t : toy_tokenize(s)) joined += t;
  EXPECT_EQ(joined, s);
  EXPECT_EQ(toy_tokenize(s).back(), ":");
}

class RemoteFixture : public ::testing::Test {
 protected:
  RemoteFixture() : planted(PlantedConfig{}), server(planted), remote(server.url()) {}
  PlantedBackend planted;
  BackendServer server;
  RemoteBackend remote;
};

TEST_F(RemoteFixture, DescriptorIsForwarded) {
  EXPECT_EQ(remote.descriptor().hidden_dim, 64);
  EXPECT_EQ(remote.descriptor().num_layers, 8);
  EXPECT_TRUE(remote.descriptor().supports_unembedding);
}

TEST_F(RemoteFixture, CaptureGenerateAndUnembedMatchLocal) {
  const auto p = cot_prompt(item(4));
  const std::vector<int> layers = {1, 4};
  const auto local = planted.capture_pre_cot_activations(p, layers);
  const auto via = remote.capture_pre_cot_activations(p, layers);
  for (int l : layers) {
    EXPECT_EQ(via.at(l).values, local.at(l).values);
    EXPECT_EQ(via.at(l).position, local.at(l).position);
  }
  const DecodeParams hot{0.7, 256, 3};
  EXPECT_EQ(remote.generate(p, hot).text, planted.generate(p, hot).text);
  const SteeringSpec spec{4, planted.planted_direction(), 6.0};
  EXPECT_EQ(remote.generate_with_steering(p, hot, spec).text, planted.generate_with_steering(p, hot, spec).text);
  const auto lu = planted.unembed(planted.planted_direction());
  const auto ru = remote.unembed(planted.planted_direction());
  ASSERT_EQ(lu.size(), ru.size());
  for (std::size_t i = 0; i < lu.size(); ++i) {
    EXPECT_EQ(lu[i].token, ru[i].token);
    EXPECT_DOUBLE_EQ(lu[i].logit, ru[i].logit);
  }
}

TEST_F(RemoteFixture, ErrorsMapToTypedExceptions) {
  const std::vector<int> layers = {1};
  EXPECT_THROW(remote.capture_pre_cot_activations("no preamble here", layers), T0MismatchError);
  const std::vector<int> bad = {99};
  EXPECT_THROW(remote.capture_pre_cot_activations(cot_prompt(item(1)), bad), ConfigError);
  EXPECT_THROW(remote.generate(cot_prompt(item(1)), {0.0, 100000, 0}), ContextOverflowError);
}

TEST(RemoteBackend, UnreachableServerIsATransportError) {
  PlantedBackend planted(PlantedConfig{});
  std::string url;
  {
    BackendServer server(planted);
    url = server.url();
  }
  EXPECT_THROW(RemoteBackend{url}, TransportError);
}

}  // namespace
