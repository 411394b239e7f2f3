#include <gtest/gtest.h>

#include <cmath>

#include "sgt/sgt.hpp"
#include "support.hpp"

using namespace sgt;

namespace {

BenchmarkManifest manifest(const fs::path& file, const std::string& name = "toy") {
  BenchmarkManifest m;
  m.name = name;
  m.path = file;
  m.fields.query = {"question"};
  m.fields.gold = "answer";
  return m;
}

void write_lines(const fs::path& p, std::size_t n) {
  std::string body;
  for (std::size_t i = 0; i < n; ++i)
    body += json{{"question", "q" + std::to_string(i)}, {"answer", "a" + std::to_string(i)}}.dump() + "\n";
  write_file_atomic(p, body);
}

}  // namespace

TEST(LoadBenchmark, IdsFollowLineIndex) {
  sgt::testing::TempDir dir;
  write_lines(dir / "d.jsonl", 3);
  auto tasks = load_benchmark(manifest(dir / "d.jsonl"));
  ASSERT_EQ(tasks.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(tasks[i].id, "toy#" + std::to_string(i));
    EXPECT_EQ(tasks[i].query, "q" + std::to_string(i));
    EXPECT_EQ(tasks[i].gold, "a" + std::to_string(i));
    EXPECT_EQ(tasks[i].benchmark, "toy");
  }
}

TEST(LoadBenchmark, DeclaredSize) {
  sgt::testing::TempDir dir;
  write_lines(dir / "full.jsonl", 2000);
  write_lines(dir / "short.jsonl", 1999);
  auto m = manifest(dir / "full.jsonl");
  m.declared_size = 2000;
  EXPECT_EQ(load_benchmark(m).size(), 2000u);
  m.path = dir / "short.jsonl";
  EXPECT_THROW(load_benchmark(m), LoadError);
}

TEST(LoadBenchmark, MissingGoldNamesFieldAndLine) {
  sgt::testing::TempDir dir;
  write_file_atomic(dir / "d.jsonl", R"({"question": "q0", "answer": "a0"}
{"question": "q1"}
)");
  try {
    load_benchmark(manifest(dir / "d.jsonl"));
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'answer'"), std::string::npos) << msg;
  }
}

TEST(LoadBenchmark, IdFieldDuplicatesAndMultiFieldQuery) {
  sgt::testing::TempDir dir;
  write_file_atomic(dir / "d.jsonl", R"({"id": 7, "ctx": "Tables: a", "question": "q", "answer": "x", "opts": ["A","B"]}
{"id": 7, "ctx": "Tables: b", "question": "q", "answer": "y"}
)");
  auto m = manifest(dir / "d.jsonl");
  m.fields.id = "id";
  m.fields.query = {"ctx", "question"};
  m.fields.aux = {"opts"};
  EXPECT_THROW(load_benchmark(m), LoadError);

  write_file_atomic(dir / "d.jsonl", R"({"id": 7, "ctx": "Tables: a", "question": "q", "answer": "x", "opts": ["A","B"]}
)");
  auto tasks = load_benchmark(m);
  ASSERT_EQ(tasks.size(), 1u);
  EXPECT_EQ(tasks[0].id, "toy#7");
  EXPECT_EQ(tasks[0].query, "Tables: a\n\nq");
  EXPECT_EQ(tasks[0].aux.at("opts"), R"(["A","B"])");
}

TEST(LoadBenchmark, BadJsonNamesLine) {
  sgt::testing::TempDir dir;
  write_file_atomic(dir / "d.jsonl", "{\"question\": \"q\", \"answer\": \"a\"}\nnot json\n");
  try {
    load_benchmark(manifest(dir / "d.jsonl"));
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(ManifestFile, ResolvesRelativePaths) {
  sgt::testing::TempDir dir;
  write_lines(dir / "d.jsonl", 4);
  write_file_atomic(dir / "m.json", R"({"benchmarks": [{"name": "toy", "path": "d.jsonl", "reward_kind": "multiple_choice",
    "fields": {"query": "question", "gold": "answer"}, "declared_size": 4}]})");
  auto ms = load_manifest_file(dir / "m.json");
  ASSERT_EQ(ms.size(), 1u);
  EXPECT_EQ(ms[0].path, dir / "d.jsonl");
  EXPECT_EQ(ms[0].reward_kind, RewardKind::multiple_choice);
  EXPECT_EQ(ms[0].evaluator.kind, RewardKind::multiple_choice);
  EXPECT_EQ(load_benchmark(ms[0]).size(), 4u);

  write_file_atomic(dir / "bad.json", R"({"benchmarks": [{"name": "toy", "path": "d.jsonl", "reward_kind": "vibes",
    "fields": {"query": "question", "gold": "answer"}}]})");
  EXPECT_THROW(load_manifest_file(dir / "bad.json"), ConfigError);
}

TEST(Split, SizesFollowFloorRemainderRule) {
  EXPECT_EQ(split_sizes(10, {}).train, 6u);
  EXPECT_EQ(split_sizes(10, {}).val, 2u);
  EXPECT_EQ(split_sizes(10, {}).test, 2u);
  EXPECT_EQ(split_sizes(11, {}).train, 6u);
  EXPECT_EQ(split_sizes(11, {}).val, 2u);
  EXPECT_EQ(split_sizes(11, {}).test, 3u);
  for (std::size_t n = 3; n < 400; ++n) {
    auto s = split_sizes(n, {});
    EXPECT_EQ(s.train, n * 6 / 10) << n;
    EXPECT_EQ(s.val, n * 2 / 10) << n;
    EXPECT_EQ(s.train + s.val + s.test, n);
  }
}

TEST(Split, PartitionAndDeterminism) {
  auto tasks = sgt::testing::make_tasks(11, Split::unassigned);
  auto a = split_dataset(tasks, {}, 42);
  auto b = split_dataset(tasks, {}, 42);
  EXPECT_EQ(split_manifest(a), split_manifest(b));
  std::map<Split, std::size_t> count;
  for (const auto& t : a) count[t.split]++;
  EXPECT_EQ(count[Split::train], 6u);
  EXPECT_EQ(count[Split::val], 2u);
  EXPECT_EQ(count[Split::test], 3u);
  EXPECT_EQ(count[Split::unassigned], 0u);
  EXPECT_EQ(select_split(a, Split::test).size(), 3u);

  bool any_diff = false;
  for (std::uint64_t seed = 1; seed < 10 && !any_diff; ++seed)
    any_diff = split_manifest(split_dataset(tasks, {}, seed)) != split_manifest(a);
  EXPECT_TRUE(any_diff);
}

TEST(Split, Errors) {
  EXPECT_THROW(split_dataset(sgt::testing::make_tasks(2, Split::unassigned), {}, 1), UsageError);
  EXPECT_THROW(split_dataset(sgt::testing::make_tasks(5, Split::unassigned), {0.5, 0.5, 0.5}, 1), UsageError);
}
