#pragma once

// Stage state machine: warm-start SFT, then DPO iterations 1..T, with
// evaluation after SFT and after every iteration. State is persisted after
// each stage so a re-run resumes at the first incomplete one.
//
// Stage ranks: init 0, sft_data 1, sft_trained 2, eval(0) 3, and for
// t >= 1 dpo_data(t) 3t+1, dpo_trained(t) 3t+2, eval(t) 3t+3.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "sgt/analytics.hpp"
#include "sgt/bench_io.hpp"
#include "sgt/dpo_builder.hpp"
#include "sgt/http_backend.hpp"
#include "sgt/journal.hpp"
#include "sgt/mock_backend.hpp"
#include "sgt/sampling.hpp"
#include "sgt/sft_builder.hpp"
#include "sgt/trainer.hpp"

namespace sgt {

inline constexpr std::string_view kItsSuffix = "\n\nLet's think step by step.";

enum class EvalMode { baseline, its, prompt, supplement };

inline std::string_view to_string(EvalMode m) {
  switch (m) {
    case EvalMode::baseline: return "baseline";
    case EvalMode::its: return "its";
    case EvalMode::prompt: return "prompt";
    case EvalMode::supplement: return "supplement";
  }
  return "?";
}

inline EvalMode eval_mode_from_string(std::string_view s) {
  if (s == "baseline") return EvalMode::baseline;
  if (s == "its") return EvalMode::its;
  if (s == "prompt") return EvalMode::prompt;
  if (s == "supplement") return EvalMode::supplement;
  throw ConfigError("unknown evaluation mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Config

struct TrainerConfig {
  std::string kind = "reference";  // reference | command | none
  double eta = 0.5;
  std::string sft_command = "sgt-train sft --data {data} --base {base} --out {out} --alpha {alpha} --beta {beta}";
  std::string dpo_command =
      "sgt-train dpo --data {data} --base {base} --ref {ref} --out {out} --alpha {alpha} --beta {beta}";
};

struct RunConfig {
  fs::path config_dir;
  fs::path manifest;
  fs::path output = "out";
  std::uint64_t seed = 0;
  SplitRatios ratios;
  json generator;  // "mock:<scenario>" or {"url": ...}
  json actor;
  int iterations = 5;
  int k_sft = 5;
  std::optional<std::size_t> sft_target;
  int repeats = 5;
  int n_free = 20;
  std::size_t cap = 20;
  int ood_types = 3;
  int concat_pairs = 3;
  double sample_temperature = 1.0;
  double actor_temperature = 0.0;
  double alpha = 1.0;
  double beta = 0.1;
  int parallelism = 4;
  int max_in_flight = 8;
  int max_tokens = 512;
  TrainerConfig trainer;
  std::optional<fs::path> cache_dir;
  std::optional<fs::path> prompts;
  std::string delimiter = std::string(kDefaultDelimiter);
  std::vector<EvalMode> eval_baselines = {EvalMode::baseline, EvalMode::its, EvalMode::prompt};
  json raw;

  static json resolve_endpoint(const json& e, const fs::path& dir) {
    if (e.is_string()) {
      auto s = e.get<std::string>();
      if (is_mock_ref(s)) {
        fs::path p = mock_ref_path(s);
        if (p.is_relative()) p = dir / p;
        return std::string(kMockRefPrefix) + p.lexically_normal().string();
      }
      return s;
    }
    if (e.is_object() && e.contains("url")) return e;
    throw ConfigError("endpoint must be \"mock:<scenario>\", an http(s) URL, or {\"url\": ...}");
  }

  static RunConfig from_json(const json& j, const fs::path& dir) {
    RunConfig c;
    c.raw = j;
    c.config_dir = dir;
    try {
      auto rel = [&](const std::string& p) {
        fs::path x = p;
        return x.is_relative() ? (dir / x).lexically_normal() : x;
      };
      c.manifest = rel(j.at("manifest").get<std::string>());
      c.output = rel(j.value("output", "out"));
      c.seed = j.value("seed", std::uint64_t{0});
      if (j.contains("split")) {
        const auto& s = j["split"];
        c.ratios = SplitRatios{s.value("train", 0.6), s.value("val", 0.2), s.value("test", 0.2)};
      }
      c.generator = resolve_endpoint(j.at("generator"), dir);
      c.actor = resolve_endpoint(j.at("actor"), dir);
      c.iterations = j.value("iterations", 5);
      c.k_sft = j.value("k_sft", 5);
      if (j.contains("sft_target") && !j["sft_target"].is_null()) c.sft_target = j["sft_target"].get<std::size_t>();
      c.repeats = j.value("repeats", 5);
      c.n_free = j.value("n_free", 20);
      c.cap = j.value("cap", std::size_t{20});
      c.ood_types = j.value("ood_types", 3);
      c.concat_pairs = j.value("concat_pairs", 3);
      if (j.contains("temperature")) {
        c.sample_temperature = j["temperature"].value("sample", 1.0);
        c.actor_temperature = j["temperature"].value("actor", 0.0);
      }
      c.alpha = j.value("alpha", 1.0);
      c.beta = j.value("beta", 0.1);
      c.parallelism = j.value("parallelism", 4);
      c.max_in_flight = j.value("max_in_flight", 8);
      c.max_tokens = j.value("max_tokens", 512);
      if (j.contains("trainer")) {
        const auto& t = j["trainer"];
        c.trainer.kind = t.value("kind", "reference");
        c.trainer.eta = t.value("eta", 0.5);
        c.trainer.sft_command = t.value("sft_command", c.trainer.sft_command);
        c.trainer.dpo_command = t.value("dpo_command", c.trainer.dpo_command);
      }
      if (j.contains("cache_dir")) c.cache_dir = rel(j["cache_dir"].get<std::string>());
      if (j.contains("prompts")) c.prompts = rel(j["prompts"].get<std::string>());
      c.delimiter = j.value("delimiter", c.delimiter);
      if (j.contains("eval_baselines")) {
        c.eval_baselines.clear();
        for (const auto& m : j["eval_baselines"]) c.eval_baselines.push_back(eval_mode_from_string(m.get<std::string>()));
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static RunConfig load(const fs::path& path) {
    json j;
    try {
      j = read_json_file(path);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    return from_json(j, fs::absolute(path).parent_path());
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(iterations >= 0, "iterations must be >= 0");
    need(k_sft >= 1 && repeats >= 1 && n_free >= 1 && cap >= 1, "sampling constants must be positive");
    need(ood_types >= 0 && concat_pairs >= 0, "ood_types and concat_pairs must be >= 0");
    need(sample_temperature >= 0 && actor_temperature >= 0, "temperatures must be >= 0");
    need(parallelism >= 1 && max_in_flight >= 1, "parallelism must be >= 1");
    need(std::abs(ratios.train + ratios.val + ratios.test - 1.0) <= 1e-9, "split ratios must sum to 1");
    need(fs::exists(manifest), "manifest not found: " + manifest.string());
    for (const auto& b : load_manifest_file(manifest))
      need(fs::exists(b.path), "benchmark file not found: " + b.path.string());
    for (const auto* e : {&generator, &actor})
      if (e->is_string() && is_mock_ref(e->get<std::string>()))
        need(fs::exists(mock_ref_path(e->get<std::string>())), "scenario not found: " + e->get<std::string>());
    need(trainer.kind == "reference" || trainer.kind == "command" || trainer.kind == "none",
         "trainer.kind must be reference, command or none");
    if (trainer.kind == "reference")
      need(generator.is_string() && is_mock_ref(generator.get<std::string>()),
           "the reference trainer needs a mock generator");
    if (prompts) need(fs::exists(*prompts), "prompt file not found: " + prompts->string());
  }

  std::string fingerprint() const {
    json j = raw;
    j.erase("output");
    return hex64(fnv1a64(j.dump()));
  }
};

// ---------------------------------------------------------------------------
// State

struct IterationState {
  int rank = 0;
  std::string status = "running";  // running | halted | complete
  std::string halt_reason;
  std::string fingerprint;
  std::map<std::string, std::string> checkpoints;  // "base", "sft", "dpo_<t>"
  std::map<std::string, std::string> datasets;     // "sft", "dpo_<t>"
  // "eval_<t>" -> mode -> benchmark -> score
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> metrics;
  // "eval_<t>" -> type key -> mean probability under that checkpoint
  std::map<std::string, std::map<std::string, double>> type_mass;

  static std::string stage_name(int rank) {
    if (rank == 0) return "init";
    if (rank == 1) return "sft_data";
    if (rank == 2) return "sft_trained";
    if (rank % 3 == 1) return "dpo_data(" + std::to_string((rank - 1) / 3) + ")";
    if (rank % 3 == 2) return "dpo_trained(" + std::to_string((rank - 2) / 3) + ")";
    return "eval(" + std::to_string(rank / 3 - 1) + ")";
  }
  static int rank_dpo_data(int t) { return 3 * t + 1; }
  static int rank_dpo_trained(int t) { return 3 * t + 2; }
  static int rank_eval(int t) { return 3 * t + 3; }

  std::string stage() const { return stage_name(rank); }

  /// Generator checkpoint after iteration t (t = 0 is the SFT model).
  std::optional<std::string> checkpoint_for(int t) const {
    auto it = checkpoints.find(t == 0 ? "sft" : "dpo_" + std::to_string(t));
    if (it == checkpoints.end()) return std::nullopt;
    return it->second;
  }

  json to_json() const {
    return json{{"rank", rank},       {"stage", stage()},         {"status", status},
                {"halt_reason", halt_reason}, {"fingerprint", fingerprint}, {"checkpoints", checkpoints},
                {"datasets", datasets},   {"metrics", metrics},
                {"type_mass", type_mass}};
  }

  static IterationState from_json(const json& j) {
    IterationState s;
    s.rank = j.at("rank").get<int>();
    s.status = j.value("status", "running");
    s.halt_reason = j.value("halt_reason", "");
    s.fingerprint = j.value("fingerprint", "");
    s.checkpoints = j.value("checkpoints", std::map<std::string, std::string>{});
    s.datasets = j.value("datasets", std::map<std::string, std::string>{});
    if (j.contains("metrics"))
      s.metrics = j["metrics"].get<std::map<std::string, std::map<std::string, std::map<std::string, double>>>>();
    s.type_mass = j.value("type_mass", std::map<std::string, std::map<std::string, double>>{});
    return s;
  }
};

class StateStore {
 public:
  explicit StateStore(fs::path root) : path_(std::move(root) / "state.json") {}
  const fs::path& path() const { return path_; }
  bool exists() const { return fs::exists(path_); }
  IterationState load() const { return IterationState::from_json(read_json_file(path_)); }

  /// Refuses to move the stage backwards.
  void save(const IterationState& s) const {
    if (exists() && load().rank > s.rank)
      throw UsageError("state would move backwards from " + load().stage() + " to " + s.stage());
    write_file_atomic(path_, s.to_json().dump(2) + "\n");
  }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Endpoints

/// Builds a backend from an endpoint description: "mock:<scenario>",
/// "http(s)://host:port[/model]" or an HttpEndpointConfig object.
inline BackendPtr make_backend(const json& endpoint, MockBackend::Role role) {
  if (endpoint.is_string()) {
    auto s = endpoint.get<std::string>();
    if (is_mock_ref(s)) return std::make_shared<MockBackend>(MockScenario::load(mock_ref_path(s)), role, s);
    if (starts_with(s, "http://") || starts_with(s, "https://")) {
      HttpEndpointConfig cfg;
      auto scheme_end = s.find("://") + 3;
      auto slash = s.find('/', scheme_end);
      cfg.base_url = s.substr(0, slash);
      cfg.model = slash == std::string::npos ? "default" : s.substr(slash + 1);
      return std::make_shared<HttpBackend>(cfg);
    }
    throw ConfigError("cannot build an endpoint from '" + s + "'");
  }
  return std::make_shared<HttpBackend>(HttpEndpointConfig::from_json(endpoint));
}

inline std::string endpoint_ref(const json& endpoint) {
  return endpoint.is_string() ? endpoint.get<std::string>() : endpoint.dump();
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::map<std::string, double> scores;  // benchmark -> mean reward
  std::vector<ScoredSample> samples;
};

/// Scores one checkpoint (or no generator) on the test tasks. `generator` may
/// be null for baseline and its.
inline EvalResult evaluate_checkpoint(EvalMode mode, const SamplingContext& base_ctx, Backend* generator,
                                      const std::vector<TaskInstance>& test_tasks, const std::string& stage) {
  if (test_tasks.empty()) throw UsageError("evaluation needs a non-empty test split");
  for (const auto& t : test_tasks)
    if (t.split != Split::test) throw UsageError("evaluation got non-test task " + t.id);
  const bool needs_gen = mode == EvalMode::prompt || mode == EvalMode::supplement;
  if (needs_gen && !generator) throw UsageError(std::string(to_string(mode)) + " evaluation needs a generator");

  SamplingContext ctx = base_ctx;
  ctx.generator = needs_gen ? generator : nullptr;
  const std::string suffix = mode == EvalMode::its ? std::string(kItsSuffix) : std::string();

  EvalResult r;
  r.samples = sample_tasks(ctx, test_tasks, [&](const TaskInstance& task, std::vector<ScoredSample>& acc) {
    Candidate c;
    c.source = SampleSource::none;
    if (needs_gen) {
      const auto prompt = render_prompt(task, SupplementType::free_style(), ctx.templates);
      const auto seed = derive_seed(ctx.run_seed, {task.id, stage, "generator"});
      auto cands = generate_candidates(ctx, prompt, std::nullopt, 1, 0.0, seed, SampleSource::free);
      if (!cands.empty()) c = cands.front();
      c.prompt = prompt;
    }
    acc.push_back(score_candidate(ctx, task, c, stage, suffix));
  });

  std::map<std::string, std::pair<double, std::size_t>> sums;
  for (const auto& t : test_tasks) sums[t.benchmark];
  for (const auto& s : r.samples) {
    sums[s.benchmark].first += s.reward;
    sums[s.benchmark].second++;
  }
  for (const auto& [b, v] : sums) {
    if (v.second == 0) {
      spdlog::warn("{}: no scored test tasks in {}", stage, b);
      continue;
    }
    r.scores[b] = v.first / static_cast<double>(v.second);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pipeline

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::shared_ptr<Trainer> trainer = nullptr)
      : cfg_(std::move(cfg)), trainer_(std::move(trainer)), store_(cfg_.output), journal_(cfg_.output / "journal") {
    fs::create_directories(cfg_.output);
    manifests_ = load_manifest_file(cfg_.manifest);
    for (const auto& m : manifests_) {
      auto loaded = load_benchmark(m);
      auto split = split_dataset(std::move(loaded), cfg_.ratios, derive_seed(cfg_.seed, {"split", m.name}));
      tasks_.insert(tasks_.end(), split.begin(), split.end());
      evaluators_[m.name] = std::make_shared<Evaluator>(m.evaluator);
    }
    answer_key_ = std::make_shared<AnswerKey>();
    for (const auto& t : tasks_) (*answer_key_)[t.query] = t.gold;
    templates_ = cfg_.prompts ? PromptTemplates::load(*cfg_.prompts) : PromptTemplates::defaults();
    if (cfg_.cache_dir) cache_ = std::make_shared<ResponseCache>(*cfg_.cache_dir);
    actor_ = wrap(make_backend(cfg_.actor, MockBackend::Role::actor));
    actor_->bind_answer_key(answer_key_);
    if (!trainer_) trainer_ = make_trainer();
  }

  const RunConfig& config() const { return cfg_; }
  const std::vector<TaskInstance>& tasks() const { return tasks_; }
  const SampleJournal& journal() const { return journal_; }
  const StateStore& store() const { return store_; }
  Backend& actor() { return *actor_; }

  fs::path data_dir() const { return cfg_.output / "data"; }
  fs::path checkpoint_dir() const { return cfg_.output / "checkpoints"; }
  fs::path report_dir() const { return cfg_.output / "report"; }

  std::vector<TaskInstance> split(Split s) const { return select_split(tasks_, s); }

  void write_splits() const { write_file_atomic(cfg_.output / "splits.json", split_manifest(tasks_)); }

  IterationState state() const {
    if (!store_.exists()) {
      IterationState s;
      s.fingerprint = cfg_.fingerprint();
      s.checkpoints["base"] = endpoint_ref(cfg_.generator);
      return s;
    }
    auto s = store_.load();
    if (s.fingerprint != cfg_.fingerprint())
      throw ConfigError("output root " + cfg_.output.string() + " holds a run with a different config");
    return s;
  }

  /// A generator backend for a checkpoint ref (or the configured base).
  BackendPtr generator_for(const std::string& ref) const {
    json e = ref == endpoint_ref(cfg_.generator) ? cfg_.generator : json(ref);
    return wrap(make_backend(e, MockBackend::Role::generator));
  }

  SamplingContext context(Backend* generator) const {
    SamplingContext ctx;
    ctx.generator = generator;
    ctx.actor = actor_.get();
    ctx.evaluators = &evaluators_;
    ctx.templates = templates_;
    ctx.delimiter = cfg_.delimiter;
    ctx.run_seed = cfg_.seed;
    ctx.sample_temperature = cfg_.sample_temperature;
    ctx.actor_temperature = cfg_.actor_temperature;
    ctx.parallelism = cfg_.parallelism;
    ctx.max_tokens = cfg_.max_tokens;
    ctx.stats = std::make_shared<SamplingStats>();
    return ctx;
  }

  // --- stages -------------------------------------------------------------

  DatasetFiles sft_data(const std::string& generator_ref) const {
    auto gen = generator_for(generator_ref);
    auto ctx = context(gen.get());
    return build_sft_stage(ctx, split(Split::train), journal_, data_dir() / "sft.jsonl", cfg_.k_sft, cfg_.sft_target);
  }

  DatasetFiles dpo_data(int t, const std::string& generator_ref) const {
    IterationPlan plan;
    plan.t = t;
    plan.repeats = cfg_.repeats;
    plan.ood_count = cfg_.ood_types;
    plan.concat_count = cfg_.concat_pairs;
    plan.n_free = cfg_.n_free;
    plan.cap = cfg_.cap;
    auto gen = generator_for(generator_ref);
    auto ctx = context(gen.get());
    std::vector<ScoredSample> history;
    if (t == 1) {
      if (!journal_.has_stage(kSftStage))
        spdlog::warn("no SFT journal; iteration 1 will have no concat pairs");
      history = journal_.read_stage(kSftStage);
    }
    return build_dpo_stage(plan, ctx, split(Split::val), journal_, history,
                           data_dir() / ("dpo_" + std::to_string(t) + ".jsonl"));
  }

  /// Scores one mode; journals the per-task samples under eval_<t>_<mode>.
  std::map<std::string, double> eval(EvalMode mode, int t, const std::optional<std::string>& checkpoint) const {
    const std::string stage = "eval_" + std::to_string(t) + "_" + std::string(to_string(mode));
    BackendPtr gen;
    if (mode == EvalMode::prompt) gen = generator_for(endpoint_ref(cfg_.generator));
    if (mode == EvalMode::supplement) {
      if (!checkpoint) throw UsageError("supplement evaluation needs a checkpoint");
      gen = generator_for(*checkpoint);
    }
    auto r = evaluate_checkpoint(mode, context(nullptr), gen.get(), split(Split::test), stage);
    journal_.write_stage(stage, r.samples);
    return r.scores;
  }

  /// Mean type distribution of a checkpoint over the test queries, from
  /// token probabilities when available, else from n_free samples per query.
  std::map<std::string, double> type_mass(const std::string& checkpoint, int t) const {
    auto gen = generator_for(checkpoint);
    auto ctx = context(gen.get());
    const auto tasks = split(Split::test);
    std::map<std::string, double> mass;
    for (const auto& task : tasks) {
      const auto seed = derive_seed(cfg_.seed, {task.id, "type_mass", std::to_string(t)});
      std::map<std::string, double> d;
      try {
        d = type_distribution(*gen, task, templates_, seed);
      } catch (const UnsupportedCapability&) {
        d = frequency_type_distribution(ctx, task, cfg_.n_free, seed);
      }
      for (const auto& [k, v] : d) mass[k] += v / static_cast<double>(tasks.size());
    }
    return mass;
  }

  // --- orchestration -------------------------------------------------------

  /// Runs from the first incomplete stage. `stop_after` ends the run once
  /// that rank has been persisted.
  IterationState run(std::optional<int> stop_after = std::nullopt) {
    auto s = state();
    if (s.status == "halted") {
      spdlog::info("resuming halted run at {}", IterationState::stage_name(s.rank + 1));
      s.status = "running";
      s.halt_reason.clear();
    }
    const int last = IterationState::rank_eval(cfg_.iterations);
    if (s.rank == 0) write_splits();

    while (s.rank < last) {
      const int next = s.rank + 1;
      spdlog::info("stage {}", IterationState::stage_name(next));
      try {
        run_stage(next, s);
      } catch (const TrainerUnavailable& e) {
        s.status = "halted";
        s.halt_reason = e.what();
        spdlog::warn("halting at {}: {}", s.stage(), e.what());
        store_.save(s);
        return s;
      }
      s.rank = next;
      store_.save(s);
      if (stop_after && s.rank >= *stop_after) return s;
    }
    s.status = "complete";
    store_.save(s);
    write_report(journal_, s.to_json(), report_dir());
    return s;
  }

 private:
  void run_stage(int rank, IterationState& s) {
    if (rank == 1) {
      auto f = sft_data(s.checkpoints.at("base"));
      s.datasets["sft"] = f.data.string();
      return;
    }
    if (rank == 2) {
      s.checkpoints["sft"] = trainer_->train_sft(s.datasets.at("sft"), s.checkpoints.at("base"), "sft");
      return;
    }
    if (rank % 3 == 0) {
      const int t = rank / 3 - 1;
      auto key = "eval_" + std::to_string(t);
      auto ck = s.checkpoint_for(t);
      if (t == 0)
        for (auto m : cfg_.eval_baselines) s.metrics[key][std::string(to_string(m))] = eval(m, t, std::nullopt);
      s.metrics[key]["supplement"] = eval(EvalMode::supplement, t, ck);
      s.type_mass[key] = type_mass(*ck, t);
      return;
    }
    if (rank % 3 == 1) {
      const int t = (rank - 1) / 3;
      auto f = dpo_data(t, *s.checkpoint_for(t - 1));
      s.datasets["dpo_" + std::to_string(t)] = f.data.string();
      return;
    }
    const int t = (rank - 2) / 3;
    const auto prev = *s.checkpoint_for(t - 1);
    s.checkpoints["dpo_" + std::to_string(t)] =
        trainer_->train_dpo(s.datasets.at("dpo_" + std::to_string(t)), prev, prev, "dpo_" + std::to_string(t));
  }

  BackendPtr wrap(BackendPtr b) const {
    if (cache_) b = std::make_shared<CachingBackend>(b, cache_);
    return std::make_shared<ThrottledBackend>(b, cfg_.max_in_flight);
  }

  std::shared_ptr<Trainer> make_trainer() const {
    if (cfg_.trainer.kind == "reference") return std::make_shared<ReferenceTypeTrainer>(checkpoint_dir(), cfg_.trainer.eta);
    if (cfg_.trainer.kind == "command") {
      TrainHyper h{cfg_.alpha, cfg_.beta, {}};
      return std::make_shared<CommandTrainer>(cfg_.trainer.sft_command, cfg_.trainer.dpo_command, checkpoint_dir(), h);
    }
    return std::make_shared<NoTrainer>();
  }

  RunConfig cfg_;
  std::shared_ptr<Trainer> trainer_;
  StateStore store_;
  SampleJournal journal_;
  std::vector<BenchmarkManifest> manifests_;
  std::vector<TaskInstance> tasks_;
  EvaluatorSet evaluators_;
  std::shared_ptr<AnswerKey> answer_key_;
  PromptTemplates templates_ = PromptTemplates::defaults();
  std::shared_ptr<ResponseCache> cache_;
  BackendPtr actor_;
};

}  // namespace sgt
