#include <gtest/gtest.h>

#include "sgt/sgt.hpp"
#include "support.hpp"

using namespace sgt;
using sgt::testing::actor_scenario;
using sgt::testing::generator_scenario;
using sgt::testing::MockRig;
using sgt::testing::uniform_types;

TEST(SftCandidates, NineTypesTimesK) {
  auto tasks = sgt::testing::make_tasks(1, Split::train);
  MockRig rig(generator_scenario(uniform_types()), actor_scenario(TriggerRule::Mode::never), tasks);
  auto s = sample_sft_candidates(rig.ctx, tasks, 5);
  ASSERT_EQ(s.size(), 45u);
  std::map<std::string, int> per_type;
  for (const auto& x : s) {
    per_type[x.stype_key]++;
    EXPECT_EQ(x.stage, "sft");
    EXPECT_EQ(x.split, Split::train);
    EXPECT_EQ(x.source, x.stype_key == "free_style" ? SampleSource::free : SampleSource::predefined);
  }
  EXPECT_EQ(per_type.size(), 9u);
  for (const auto& [k, n] : per_type) EXPECT_EQ(n, 5) << k;
}

TEST(SftCandidates, OnlySummaryRewardedUnderTypeTrigger) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto tasks = sgt::testing::make_tasks(1, Split::train);
    MockRig rig(generator_scenario(uniform_types(), seed), actor_scenario(TriggerRule::Mode::type, {"summary"}),
                tasks, seed);
    auto s = sample_sft_candidates(rig.ctx, tasks, 1);
    ASSERT_EQ(s.size(), 9u);
    for (const auto& x : s) EXPECT_EQ(x.reward, x.stype_key == "summary" ? 1 : 0) << x.stype_key;
  }
}

TEST(SftCandidates, GreedyRepetitionsAreIdentical) {
  auto tasks = sgt::testing::make_tasks(2, Split::train);
  MockRig rig(generator_scenario(uniform_types()), actor_scenario(TriggerRule::Mode::never), tasks);
  rig.ctx.sample_temperature = 0.0;
  auto s = sample_sft_candidates(rig.ctx, tasks, 5);
  std::map<std::pair<std::string, std::string>, std::set<std::string>> texts;
  for (const auto& x : s) texts[{x.task_id, x.stype_key}].insert(x.raw);
  ASSERT_EQ(texts.size(), 18u);
  for (const auto& [k, v] : texts) EXPECT_EQ(v.size(), 1u) << k.first << "/" << k.second;
}

TEST(SftCandidates, RejectsNonTrainTasks) {
  auto tasks = sgt::testing::make_tasks(1, Split::val);
  MockRig rig(generator_scenario(uniform_types()), actor_scenario(TriggerRule::Mode::never), tasks);
  EXPECT_THROW(sample_sft_candidates(rig.ctx, tasks, 1), UsageError);
}

TEST(GoldSupplements, AnswerPairsOneShot) {
  auto tasks = sgt::testing::make_tasks(3, Split::train);
  tasks[0].gold = "42";
  auto g = build_gold_supplements(tasks[0], tasks, {}, 1);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].raw, R"({"answer": "42"})");
  EXPECT_TRUE(g[1].stype.is_predefined(Predefined::pairs));
  EXPECT_EQ(g[1].content[0].second, "42");
  EXPECT_EQ(g[1].content[1].second, "24");
  EXPECT_TRUE(g[2].stype.is_predefined(Predefined::one_shot));

  auto observed = build_gold_supplements(tasks[0], tasks, {"42", "  ", "wrong-x"}, 1);
  EXPECT_EQ(observed[1].content[1].second, "wrong-x");

  auto lonely = std::vector<TaskInstance>{tasks[0]};
  EXPECT_EQ(build_gold_supplements(tasks[0], lonely, {}, 1).size(), 2u);
}

TEST(GoldSupplements, OneShotNeverUsesTheTaskItself) {
  auto tasks = sgt::testing::make_tasks(40, Split::train);
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (const auto& t : tasks) {
      auto g = build_gold_supplements(t, tasks, {}, seed);
      const auto& text = g.at(2).content[0].second;
      EXPECT_EQ(text.find("Question: " + t.query + "\n"), std::string::npos) << t.id;
    }
}

TEST(GoldSupplements, PairsIncorrectDiffersFromGold) {
  Rng rng(4);
  std::vector<TaskInstance> tasks;
  for (int i = 0; i < 200; ++i) {
    std::string gold;
    const auto len = 1 + rng.below(4);
    for (std::size_t k = 0; k < len; ++k) gold.push_back("aAb1 ."[rng.below(6)]);
    if (trim(gold).empty()) gold = "a";
    tasks.push_back(sgt::testing::make_task("t#" + std::to_string(i), "q" + std::to_string(i), gold, Split::train));
  }
  for (const auto& t : tasks) {
    std::vector<std::string> wrong;
    if (rng.below(2)) wrong.push_back(t.gold);
    auto g = build_gold_supplements(t, tasks, wrong, 1);
    EXPECT_NE(normalize_answer(g[1].content[1].second), normalize_answer(t.gold)) << "gold '" << t.gold << "'";
  }
}

TEST(SftStage, EmissionIsByteIdenticalAndConsistent) {
  sgt::testing::TempDir dir;
  auto tasks = sgt::testing::make_tasks(6, Split::train);
  auto run = [&](const std::string& sub) {
    MockRig rig(generator_scenario(uniform_types()), actor_scenario(TriggerRule::Mode::type, {"summary", "cot"}),
                tasks);
    SampleJournal journal(dir / (sub + "/journal"));
    return build_sft_stage(rig.ctx, tasks, journal, dir / (sub + "/sft.jsonl"));
  };
  auto a = run("a");
  auto b = run("b");
  EXPECT_EQ(read_file(a.data), read_file(b.data));
  EXPECT_EQ(read_file(a.stats), read_file(b.stats));

  auto records = read_jsonl(a.data);
  auto stats = read_json_file(a.stats);
  EXPECT_EQ(stats["records"].get<std::size_t>(), records.size());
  std::size_t sum = 0;
  for (auto& [k, v] : stats["per_type"].items()) sum += v.get<std::size_t>();
  EXPECT_EQ(sum, records.size());
  // default target: min(positives, 2 x tasks) = 12, split evenly over cot and summary
  EXPECT_EQ(records.size(), 12u);
  EXPECT_EQ(stats["per_type"]["cot"], 6);
  EXPECT_EQ(stats["per_type"]["summary"], 6);

  SampleJournal journal(dir / "a/journal");
  std::map<std::tuple<std::string, std::string, std::string>, int> reward;
  for (const auto& s : journal.read_stage("sft")) {
    EXPECT_EQ(s.split, Split::train);
    reward[{s.task_id, s.stype_key, s.raw}] = std::max(reward[{s.task_id, s.stype_key, s.raw}], s.reward);
  }
  for (const auto& r : records) {
    auto key = std::tuple{r["task_id"].get<std::string>(), r["stype_key"].get<std::string>(),
                          r["completion"].get<std::string>()};
    ASSERT_TRUE(reward.count(key));
    EXPECT_EQ(reward[key], 1);
    EXPECT_EQ(parse_supplement(r["completion"].get<std::string>()).stype.key(), r["stype_key"]);
  }
}

TEST(SftSelection, FlaggedAndNegativesExcludedAndBalanced) {
  std::vector<ScoredSample> s;
  for (int i = 0; i < 10; ++i) {
    auto a = sgt::testing::sample("t" + std::to_string(i % 3), i < 7 ? "summary" : "cot", 1, "r" + std::to_string(i), "sft");
    a.split = Split::train;
    s.push_back(a);
  }
  auto neg = s[0];
  neg.reward = 0;
  neg.raw = "neg";
  s.push_back(neg);
  auto flagged = s[1];
  flagged.flagged = true;
  flagged.raw = "flagged";
  s.push_back(flagged);
  auto recs = select_sft_records(s, 6, 3, 1);
  ASSERT_EQ(recs.size(), 6u);
  std::map<std::string, int> per;
  for (const auto& r : recs) {
    per[r.stype_key]++;
    EXPECT_NE(r.completion, "neg");
    EXPECT_NE(r.completion, "flagged");
  }
  EXPECT_EQ(per["cot"], 3);
  EXPECT_EQ(per["summary"], 3);

  auto bad = s;
  bad[0].split = Split::val;
  EXPECT_THROW(select_sft_records(bad, std::nullopt, 3, 1), UsageError);
}
