#include <gtest/gtest.h>

#include "sgt/sgt.hpp"
#include "support.hpp"

using namespace sgt;
using sgt::testing::make_task;

namespace {

const std::string kSelectExecutor =
    "python3 " + shell_quote(std::string(SGT_SOURCE_DIR) + "/tools/executors/literal_select.py") + " {program}";

TaskInstance with_kind(TaskInstance t, RewardKind k) {
  t.reward_kind = k;
  return t;
}

}  // namespace

TEST(ExactMatch, Normalisation) {
  Evaluator e(EvaluatorConfig{});
  auto t = make_task("t#0", "Capital of France?", "paris");
  EXPECT_EQ(e.evaluate("  Paris.", t), 1);
  EXPECT_EQ(e.evaluate("PARIS", t), 1);
  EXPECT_EQ(e.evaluate("Paris, France", t), 0);
  EXPECT_EQ(e.evaluate("", t), 0);

  auto spaced = make_task("t#1", "q", "New   York");
  EXPECT_EQ(e.evaluate("new york!", spaced), 1);
  auto wide = make_task("t#2", "q", "ＡＢＣ");
  EXPECT_EQ(e.evaluate("abc", wide), 1);
}

TEST(ExactMatch, AnswerExtraction) {
  EvaluatorConfig c;
  c.answer_extract = R"(Final answer:\s*(.+))";
  Evaluator e(c);
  auto t = make_task("t#0", "q", "42");
  EXPECT_EQ(e.evaluate("Let me think. 6*7.\nFinal answer: 42", t), 1);
  EXPECT_EQ(e.evaluate("42 is close, Final answer: 41", t), 0);
}

TEST(MultipleChoice, HandLabelledPhrasings) {
  // (actor output, the letter a careful reader would extract)
  const std::vector<std::pair<std::string, char>> cases = {
      {"The answer is (B)", 'B'},
      {"The answer is B", 'B'},
      {"the answer is b.", 'B'},
      {"Answer: C", 'C'},
      {"answer: (d)", 'D'},
      {"Answer - E", 'E'},
      {"(A)", 'A'},
      {"A", 'A'},
      {"B.", 'B'},
      {"I choose C", 'C'},
      {"Option (D) is correct.", 'D'},
      {"It must be E", 'E'},
      {"Between A and B, the answer is B", 'B'},
      {"A is wrong, C is wrong, so D", 'D'},
      {"The correct option: (A)", 'A'},
      {"Final answer: B", 'B'},
      {"My answer is: C", 'C'},
      {"Answer:D", 'D'},
      {"answer is (e)", 'E'},
      {"(B) because the others fail", 'B'},
      {"Clearly (C).", 'C'},
      {"Not A. Answer: B", 'B'},
      {"So, the answer is A", 'A'},
      {"After elimination: E", 'E'},
      {"Considering all, D", 'D'},
      {"I think it's (A)", 'A'},
      {"Answer is C.", 'C'},
      {"answer: b", 'B'},
      {"The best choice is D.", 'D'},
      {"Choice E", 'E'},
      {"The answer is A, not B", 'A'},
      {"Answer: A\nExplanation: option B is a trap", 'A'},
      {"B) is right", 'B'},
      {"(C) and also (D), answer is C", 'C'},
      {"we get E at the end", 'E'},
      {"Answer: (A) Paris", 'A'},
      {"the answer is: D", 'D'},
      {"Answer : C", 'C'},
      {"Pick B", 'B'},
      {"Result: (E)", 'E'},
      {"A seems plausible but D is right", 'D'},
      {"Hence the answer is (C).", 'C'},
      {"I'd say A.", 'A'},
      {"ANSWER: E", 'E'},
      {"(D)", 'D'},
      {"option C", 'C'},
      {"So answer: A", 'A'},
      {"both wrong; B", 'B'},
      {"Correct: D", 'D'},
      {"answer (C)", 'C'},
  };
  ASSERT_EQ(cases.size(), 50u);
  EvaluatorConfig c;
  c.kind = RewardKind::multiple_choice;
  Evaluator e(c);
  for (const auto& [text, letter] : cases) {
    EXPECT_EQ(extract_choice(text), letter) << text;
    for (char g = 'A'; g <= 'E'; ++g) {
      auto t = with_kind(make_task("t", "q", std::string("(") + g + ")"), RewardKind::multiple_choice);
      EXPECT_EQ(e.evaluate(text, t), g == letter ? 1 : 0) << text << " vs " << g;
    }
  }
}

TEST(MultipleChoice, NoLetterScoresZeroAndBadGoldFlags) {
  EvaluatorConfig c;
  c.kind = RewardKind::multiple_choice;
  Evaluator e(c);
  auto t = make_task("t", "q", "B");
  EXPECT_EQ(e.evaluate("none of these", t), 0);
  auto bad = make_task("t", "q", "nothing");
  auto r = e.score("B", bad);
  EXPECT_TRUE(r.flagged);
  EXPECT_EQ(r.reward, 0);
}

TEST(MultipleChoice, CustomPattern) {
  EvaluatorConfig c;
  c.kind = RewardKind::multiple_choice;
  c.choice_pattern = R"(<<([A-J])>>)";
  Evaluator e(c);
  auto t = make_task("t", "q", "<<G>>");
  EXPECT_EQ(e.evaluate("I pick <<G>>", t), 1);
  EXPECT_EQ(e.evaluate("I pick G", t), 0);
}

TEST(ExecutionEquivalence, LiteralSelectStub) {
  EvaluatorConfig c;
  c.kind = RewardKind::execution_equivalence;
  c.command = kSelectExecutor;
  Evaluator e(c);
  auto t = make_task("t", "q", "SELECT 1+1");
  EXPECT_EQ(e.evaluate("SELECT 2", t), 1);
  EXPECT_EQ(e.evaluate("SELECT 3", t), 0);
  EXPECT_EQ(e.evaluate("select 4/2", t), 1);
  auto bad = e.score("DROP TABLE x", t);
  EXPECT_TRUE(bad.flagged);
  EXPECT_EQ(bad.reward, 0);
  EXPECT_FALSE(bad.error.empty());
}

TEST(ExecutionEquivalence, MissingCommandIsConfigError) {
  EvaluatorConfig c;
  c.kind = RewardKind::execution_equivalence;
  EXPECT_THROW(Evaluator{c}, ConfigError);
}

TEST(ExternalCommand, ExitCodes) {
  auto t = make_task("t", "q", "gold");
  auto eval_with = [&](const std::string& cmd) {
    EvaluatorConfig c;
    c.kind = RewardKind::external_command;
    c.command = cmd;
    return Evaluator(c).score("cand", t);
  };
  EXPECT_EQ(eval_with("exit 0").reward, 1);
  EXPECT_EQ(eval_with("exit 1").reward, 0);
  EXPECT_FALSE(eval_with("exit 1").flagged);
  auto crashed = eval_with("exit 7");
  EXPECT_TRUE(crashed.flagged);
  EXPECT_EQ(crashed.reward, 0);
  EXPECT_EQ(eval_with("cmp -s {candidate} {gold}").reward, 0);
  EXPECT_EQ(eval_with("grep -q '\"candidate\": *\"cand\"'").reward, 1);
}

TEST(ExternalCommand, TimeoutFlags) {
  EvaluatorConfig c;
  c.kind = RewardKind::external_command;
  c.command = "sleep 5";
  c.timeout = std::chrono::milliseconds(100);
  auto r = Evaluator(c).score("x", make_task("t", "q", "g"));
  EXPECT_TRUE(r.flagged);
  EXPECT_EQ(r.reward, 0);
}

TEST(ExternalCommand, Deterministic) {
  EvaluatorConfig c;
  c.kind = RewardKind::external_command;
  c.command = "cmp -s {candidate} {gold}";
  Evaluator e(c);
  auto t = make_task("t", "q", "same");
  for (int i = 0; i < 3; ++i) EXPECT_EQ(e.evaluate("same", t), 1);
}

TEST(Partition, Empty) {
  auto p = partition("t", {});
  EXPECT_TRUE(p.positive.empty());
  EXPECT_TRUE(p.negative.empty());
}

TEST(Partition, SmallExample) {
  using sgt::testing::sample;
  std::vector<ScoredSample> s = {sample("t", "summary", 1, "a"), sample("t", "cot", 0, "b"),
                                 sample("t", "hint", 1, "c")};
  auto p = partition("t", s);
  ASSERT_EQ(p.positive.size(), 2u);
  ASSERT_EQ(p.negative.size(), 1u);
  EXPECT_EQ(p.positive[0].raw, "a");
  EXPECT_EQ(p.positive[1].raw, "c");
  EXPECT_EQ(p.negative[0].raw, "b");
}

TEST(Partition, RejectsForeignTask) {
  EXPECT_THROW(partition("t", {sgt::testing::sample("u", "summary", 1, "a")}), UsageError);
}

TEST(Partition, RecountOverRandomSamples) {
  Rng rng(2024);
  std::vector<ScoredSample> s;
  std::size_t ones = 0;
  for (int i = 0; i < 1000; ++i) {
    int r = static_cast<int>(rng.below(2));
    ones += static_cast<std::size_t>(r);
    s.push_back(sgt::testing::sample("t", "summary", r, "raw" + std::to_string(i)));
  }
  auto p = partition("t", s);
  EXPECT_EQ(p.positive.size() + p.negative.size(), 1000u);
  EXPECT_EQ(p.positive.size(), ones);
  std::set<std::string> pos, neg;
  for (const auto& x : p.positive) {
    EXPECT_EQ(x.reward, 1);
    pos.insert(x.raw);
  }
  for (const auto& x : p.negative) {
    EXPECT_EQ(x.reward, 0);
    neg.insert(x.raw);
  }
  for (const auto& x : s) EXPECT_EQ(pos.count(x.raw) + neg.count(x.raw), 1u);
  // order preserved
  std::size_t pi = 0, ni = 0;
  for (const auto& x : s) {
    if (x.reward == 1) EXPECT_EQ(p.positive[pi++].raw, x.raw);
    else EXPECT_EQ(p.negative[ni++].raw, x.raw);
  }
}

TEST(ScoredSample, JsonRoundTripAndRange) {
  auto s = sgt::testing::sample("t", "summary", 1, "raw");
  s.seed = 99;
  s.sample_index = 3;
  auto back = ScoredSample::from_json(s.to_json());
  EXPECT_EQ(back.to_json(), s.to_json());
  EXPECT_EQ(back.sample_hash(), s.sample_hash());
  s.reward = 2;
  EXPECT_THROW(s.to_json(), UsageError);
  auto j = back.to_json();
  j["reward"] = 5;
  EXPECT_THROW(ScoredSample::from_json(j), IoError);
}
