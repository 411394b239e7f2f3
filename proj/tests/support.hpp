#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "sgt/sgt.hpp"

namespace sgt::testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("sgt-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline TaskInstance make_task(const std::string& id, const std::string& query, const std::string& gold,
                              Split split = Split::train, const std::string& bench = "b") {
  TaskInstance t;
  t.id = id;
  t.benchmark = bench;
  t.query = query;
  t.gold = gold;
  t.split = split;
  return t;
}

inline std::vector<TaskInstance> make_tasks(std::size_t n, Split split, const std::string& bench = "b") {
  std::vector<TaskInstance> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(make_task(bench + "#" + std::to_string(i), "Question " + bench + " " + std::to_string(i) + "?",
                            "gold" + std::to_string(i), split, bench));
  return out;
}

inline std::map<std::string, double> uniform_types(const std::vector<std::string>& extra = {}) {
  std::map<std::string, double> d;
  for (auto p : kAllPredefined) d[std::string(type_name(p))] = 1.0;
  d["free_style"] = 1.0;
  for (const auto& e : extra) d[e] = 0.5;
  return d;
}

inline MockScenario generator_scenario(std::map<std::string, double> dist, std::uint64_t seed = 1) {
  MockScenario s;
  s.seed = seed;
  s.type_distribution = std::move(dist);
  return s;
}

inline MockScenario actor_scenario(TriggerRule::Mode mode, std::vector<std::string> values = {}) {
  MockScenario s;
  s.trigger.mode = mode;
  s.trigger.values = std::move(values);
  return s;
}

/// Generator + actor mocks, evaluators and a context wired together.
struct MockRig {
  std::shared_ptr<MockBackend> generator;
  std::shared_ptr<MockBackend> actor;
  EvaluatorSet evaluators;
  SamplingContext ctx;

  MockRig(MockScenario gen, MockScenario act, const std::vector<TaskInstance>& tasks, std::uint64_t run_seed = 7) {
    generator = std::make_shared<MockBackend>(gen, MockBackend::Role::generator, "gen");
    actor = std::make_shared<MockBackend>(act, MockBackend::Role::actor, "actor");
    auto key = std::make_shared<AnswerKey>();
    for (const auto& t : tasks) {
      (*key)[t.query] = t.gold;
      evaluators[t.benchmark] = std::make_shared<Evaluator>(EvaluatorConfig{});
    }
    actor->bind_answer_key(key);
    ctx.generator = generator.get();
    ctx.actor = actor.get();
    ctx.evaluators = &evaluators;
    ctx.run_seed = run_seed;
  }
};

inline ScoredSample sample(const std::string& task, const std::string& type, int reward, const std::string& raw,
                           const std::string& stage = "dpo_1") {
  ScoredSample s;
  s.task_id = task;
  s.benchmark = "b";
  s.split = Split::val;
  s.stage = stage;
  s.source = SampleSource::free;
  s.stype_key = type;
  s.raw = raw;
  s.prompt = "prompt for " + task;
  s.reward = reward;
  return s;
}

/// A self-contained mock run on disk: one exact-match benchmark, generator
/// and actor scenarios, and a config that `overrides` is merge-patched into.
struct RunFixture {
  TempDir dir;
  fs::path config;

  explicit RunFixture(std::size_t tasks = 20, const MockScenario& generator = generator_scenario(uniform_types()),
                      const MockScenario& actor = actor_scenario(TriggerRule::Mode::type, {"summary"}),
                      const json& overrides = json::object()) {
    std::string body;
    for (std::size_t i = 0; i < tasks; ++i)
      body += json{{"question", "Toy question number " + std::to_string(i) + "?"}, {"answer", "ans" + std::to_string(i)}}
                  .dump() +
              "\n";
    write_file_atomic(dir / "toy.jsonl", body);
    write_file_atomic(dir / "benchmarks.json",
                      json{{"benchmarks",
                            {{{"name", "toy"},
                              {"path", "toy.jsonl"},
                              {"reward_kind", "exact_match"},
                              {"fields", {{"query", "question"}, {"gold", "answer"}}}}}}}
                          .dump(2));
    generator.save(dir / "generator.json");
    actor.save(dir / "actor.json");
    json cfg = {{"manifest", "benchmarks.json"},
                {"output", "out"},
                {"seed", 11},
                {"generator", "mock:generator.json"},
                {"actor", "mock:actor.json"},
                {"iterations", 1},
                {"parallelism", 2}};
    cfg.merge_patch(overrides);
    config = dir / "config.json";
    write_file_atomic(config, cfg.dump(2));
  }

  RunConfig load() const { return RunConfig::load(config); }
  fs::path out() const { return dir / "out"; }
};

}  // namespace sgt::testing
