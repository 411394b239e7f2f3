#pragma once

// Plumbing shared by the SFT and DPO dataset builders: generator calls,
// actor scoring, and the per-task fan-out.

#include <atomic>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "sgt/backend.hpp"
#include "sgt/reward.hpp"
#include "sgt/supplement.hpp"
#include "sgt/task.hpp"

namespace sgt {

using EvaluatorSet = std::map<std::string, std::shared_ptr<const Evaluator>>;

struct SamplingStats {
  std::atomic<std::size_t> generated{0};
  std::atomic<std::size_t> parse_failures{0};
  std::atomic<std::size_t> aborted_tasks{0};
  std::atomic<std::size_t> flagged{0};

  json to_json() const {
    return json{{"generated", generated.load()},
                {"parse_failures", parse_failures.load()},
                {"aborted_tasks", aborted_tasks.load()},
                {"flagged", flagged.load()}};
  }
};

struct SamplingContext {
  Backend* generator = nullptr;
  Backend* actor = nullptr;
  const EvaluatorSet* evaluators = nullptr;
  PromptTemplates templates = PromptTemplates::defaults();
  std::string delimiter = std::string(kDefaultDelimiter);
  std::uint64_t run_seed = 0;
  double sample_temperature = 1.0;
  double actor_temperature = 0.0;
  int parallelism = 4;
  int max_tokens = 512;
  std::shared_ptr<SamplingStats> stats = std::make_shared<SamplingStats>();

  const Evaluator& evaluator_for(const TaskInstance& t) const {
    auto it = evaluators->find(t.benchmark);
    if (it == evaluators->end()) throw ConfigError("no evaluator for benchmark " + t.benchmark);
    return *it->second;
  }
};

/// A generated supplement plus where it came from.
struct Candidate {
  std::optional<Supplement> supplement;  // nullopt only for no-supplement evaluation
  std::string prompt;
  SampleSource source = SampleSource::none;
  std::uint64_t seed = 0;
  int sample_index = 0;
  double temperature = 0.0;
};

/// n generations for one prompt. Parse failures are logged and dropped; the
/// returned candidates keep their original sample index.
inline std::vector<Candidate> generate_candidates(const SamplingContext& ctx, const std::string& prompt,
                                                  const std::optional<std::string>& prefix, int n,
                                                  double temperature, std::uint64_t seed, SampleSource source) {
  GenRequest req;
  req.model_ref = ctx.generator->endpoint_id();
  req.messages = {{"user", prompt}};
  req.n = n;
  req.temperature = temperature;
  req.seed = seed;
  req.output_prefix = prefix;
  req.max_tokens = ctx.max_tokens;
  auto completions = ctx.generator->generate(req);
  if (completions.size() != static_cast<std::size_t>(n))
    throw ProtocolError(ctx.generator->endpoint_id() + " returned " + std::to_string(completions.size()) +
                        " completions, expected " + std::to_string(n));
  std::vector<Candidate> out;
  for (int i = 0; i < n; ++i) {
    ctx.stats->generated++;
    try {
      auto s = parse_supplement(completions[static_cast<std::size_t>(i)].text);
      out.push_back(Candidate{std::move(s), prompt, source, seed, i, temperature});
    } catch (const ParseFailure& e) {
      ctx.stats->parse_failures++;
      spdlog::debug("dropping unparseable supplement ({}): {}", e.what(), e.raw);
    }
  }
  return out;
}

/// Type-forced generation: the type's prompt plus its output prefix.
inline std::vector<Candidate> generate_forced(const SamplingContext& ctx, const TaskInstance& task,
                                              const SupplementType& stype, const std::string& prompt, int n,
                                              std::uint64_t seed, SampleSource source) {
  return generate_candidates(ctx, prompt, output_prefix(stype), n, ctx.sample_temperature, seed, source);
}

/// Sends (query, supplement) to the actor and scores the answer.
inline ScoredSample score_candidate(const SamplingContext& ctx, const TaskInstance& task, const Candidate& c,
                                    const std::string& stage, const std::string& actor_suffix = {}) {
  GenRequest req;
  req.model_ref = ctx.actor->endpoint_id();
  auto input = format_actor_input(task, c.supplement, ctx.delimiter) + actor_suffix;
  req.messages = {{"user", input}};
  req.temperature = ctx.actor_temperature;
  req.seed = derive_seed(ctx.run_seed, {task.id, stage, "actor"});
  req.max_tokens = ctx.max_tokens;
  auto out = ctx.actor->generate(req);
  if (out.empty()) throw ProtocolError(ctx.actor->endpoint_id() + " returned no completion");

  ScoredSample s;
  s.task_id = task.id;
  s.benchmark = task.benchmark;
  s.split = task.split;
  s.stage = stage;
  s.source = c.source;
  if (c.supplement) {
    s.stype_key = c.supplement->stype.key();
    s.raw = c.supplement->raw;
  }
  s.prompt = c.prompt;
  s.actor_output = out[0].text;
  auto r = ctx.evaluator_for(task).score(s.actor_output, task);
  s.reward = r.reward;
  s.flagged = r.flagged;
  s.error = r.error;
  if (r.flagged) ctx.stats->flagged++;
  s.temperature = c.temperature;
  s.seed = c.seed;
  s.sample_index = c.sample_index;
  return s;
}

/// Runs fn(i) for i in [0, n) on up to `parallelism` threads. Results are
/// indexed by i, so scheduling never affects output order. The first
/// exception is rethrown after all workers stop.
template <typename R>
std::vector<R> parallel_map(std::size_t n, int parallelism, const std::function<R(std::size_t)>& fn) {
  std::vector<R> out(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::max(1, parallelism));
  if (threads == 1 || n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  }
  if (err) std::rethrow_exception(err);
  return out;
}

/// Per-task sampling with the failure policy: transport or protocol errors
/// end that task's sampling but keep what it already produced.
inline std::vector<ScoredSample> sample_tasks(
    const SamplingContext& ctx, const std::vector<TaskInstance>& tasks,
    const std::function<void(const TaskInstance&, std::vector<ScoredSample>&)>& per_task) {
  auto per = parallel_map<std::vector<ScoredSample>>(tasks.size(), ctx.parallelism, [&](std::size_t i) {
    std::vector<ScoredSample> acc;
    try {
      per_task(tasks[i], acc);
    } catch (const TransportError& e) {
      ctx.stats->aborted_tasks++;
      spdlog::warn("{}: sampling aborted: {}", tasks[i].id, e.what());
    } catch (const ProtocolError& e) {
      ctx.stats->aborted_tasks++;
      spdlog::warn("{}: sampling aborted: {}", tasks[i].id, e.what());
    }
    return acc;
  });
  std::vector<ScoredSample> out;
  for (auto& v : per) out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  return out;
}

}  // namespace sgt
