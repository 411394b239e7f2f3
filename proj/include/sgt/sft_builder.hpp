#pragma once

// Warm-start SFT data: nine prompt-guided types x k samples per training
// query, gold-built Answer/Pairs/One-Shot supplements, actor scoring,
// positive filtering and type-stratified selection.

#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <spdlog/spdlog.h>

#include "sgt/journal.hpp"
#include "sgt/reward.hpp"
#include "sgt/sampling.hpp"
#include "sgt/stratify.hpp"
#include "sgt/supplement.hpp"

namespace sgt {

inline constexpr const char* kSftStage = "sft";

struct SftRecord {
  std::string task_id;
  std::string prompt;
  std::string completion;
  std::string stype_key;
  std::string sample_hash;  // sort key only; not written

  json to_json() const {
    return json{{"task_id", task_id}, {"prompt", prompt}, {"completion", completion}, {"stype_key", stype_key}};
  }
};

/// The nine prompt-guided types: eight predefined plus free style.
inline std::vector<SupplementType> sft_prompt_types() {
  std::vector<SupplementType> out;
  for (auto p : kAllPredefined) out.push_back(SupplementType::predefined(p));
  out.push_back(SupplementType::free_style());
  return out;
}

/// k prefix-forced samples of each of the nine types per task, each scored
/// by the actor.
inline std::vector<ScoredSample> sample_sft_candidates(const SamplingContext& ctx,
                                                       const std::vector<TaskInstance>& train_tasks, int k = 5) {
  for (const auto& t : train_tasks)
    if (t.split != Split::train) throw UsageError("SFT sampling got non-train task " + t.id);
  const auto types = sft_prompt_types();
  return sample_tasks(ctx, train_tasks, [&](const TaskInstance& task, std::vector<ScoredSample>& acc) {
    for (const auto& stype : types) {
      const auto seed = derive_seed(ctx.run_seed, {task.id, kSftStage, "predefined", stype.key()});
      const auto prompt = render_prompt(task, stype, ctx.templates);
      auto source = stype.is_free_style() ? SampleSource::free : SampleSource::predefined;
      for (const auto& c : generate_forced(ctx, task, stype, prompt, k, seed, source))
        acc.push_back(score_candidate(ctx, task, c, kSftStage));
    }
  });
}

/// Deterministic corruption used when no wrong answer was observed.
inline std::string corrupt_answer(const std::string& gold) {
  const auto core = trim(gold);
  std::string rev(core.rbegin(), core.rend());
  if (normalize_answer(rev) != normalize_answer(core)) return rev;
  return core + " (incorrect)";
}

/// Answer, Pairs and One-Shot built from gold data. `wrong_outputs` are actor
/// outputs already observed to fail this task, used as the incorrect side of
/// Pairs when available.
inline std::vector<Supplement> build_gold_supplements(const TaskInstance& task,
                                                      const std::vector<TaskInstance>& train_tasks,
                                                      const std::vector<std::string>& wrong_outputs,
                                                      std::uint64_t seed) {
  if (task.split != Split::train) throw UsageError("gold supplements are built for train tasks only: " + task.id);
  std::vector<Supplement> out;
  out.push_back(make_supplement(SupplementType::predefined(Predefined::answer), task.gold));

  std::string incorrect;
  const auto gold_norm = normalize_answer(task.gold);
  for (const auto& w : wrong_outputs)
    if (!trim_view(w).empty() && normalize_answer(w) != gold_norm) {
      incorrect = w;
      break;
    }
  if (incorrect.empty()) incorrect = corrupt_answer(task.gold);
  out.push_back(make_supplement(SupplementType::predefined(Predefined::pairs),
                                SupplementContent{{std::string(kCorrectAnswerKey), task.gold},
                                                  {std::string(kIncorrectAnswerKey), incorrect}}));

  std::vector<const TaskInstance*> others;
  for (const auto& t : train_tasks)
    if (t.id != task.id) others.push_back(&t);
  if (others.empty()) {
    spdlog::warn("{}: only one training task, skipping One-Shot gold supplement", task.id);
  } else {
    const auto* ex = others[derive_seed(seed, {task.id, "one_shot"}) % others.size()];
    out.push_back(make_supplement(SupplementType::predefined(Predefined::one_shot),
                                  "Question: " + ex->query + "\nAnswer: " + ex->gold));
  }
  return out;
}

/// Gold supplements for every task, scored like any other sample.
inline std::vector<ScoredSample> score_gold_supplements(const SamplingContext& ctx,
                                                        const std::vector<TaskInstance>& train_tasks,
                                                        const std::vector<ScoredSample>& sampled) {
  std::map<std::string, std::vector<std::string>> wrong;
  for (const auto& s : sampled)
    if (s.reward == 0 && !s.flagged) wrong[s.task_id].push_back(s.actor_output);
  return sample_tasks(ctx, train_tasks, [&](const TaskInstance& task, std::vector<ScoredSample>& acc) {
    auto it = wrong.find(task.id);
    const auto& w = it == wrong.end() ? std::vector<std::string>{} : it->second;
    for (auto& supp : build_gold_supplements(task, train_tasks, w, ctx.run_seed)) {
      Candidate c;
      c.prompt = render_prompt(task, supp.stype, ctx.templates);
      c.supplement = std::move(supp);
      c.source = SampleSource::gold;
      c.seed = derive_seed(ctx.run_seed, {task.id, kSftStage, "gold", c.supplement->stype.key()});
      acc.push_back(score_candidate(ctx, task, c, kSftStage));
    }
  });
}

/// Default SFT size: twice the number of training tasks, capped by supply.
inline std::size_t default_sft_target(std::size_t positives, std::size_t train_tasks) {
  return std::min(positives, 2 * train_tasks);
}

/// Positive, unflagged samples stratified by type down to `target`.
inline std::vector<SftRecord> select_sft_records(const std::vector<ScoredSample>& samples,
                                                 std::optional<std::size_t> target, std::size_t train_task_count,
                                                 std::uint64_t seed) {
  std::map<std::string, std::vector<SftRecord>> by_type;
  std::size_t positives = 0;
  for (const auto& s : samples) {
    if (s.reward != 1 || s.flagged) continue;
    if (s.split != Split::train) throw UsageError("SFT selection saw non-train sample " + s.task_id);
    by_type[s.stype_key].push_back(SftRecord{s.task_id, s.prompt, s.raw, s.stype_key, s.sample_hash()});
    ++positives;
  }
  const auto t = target.value_or(default_sft_target(positives, train_task_count));
  return stratified_sample(by_type, t, derive_seed(seed, {"sft_stratify"}));
}

struct DatasetFiles {
  fs::path data;
  fs::path stats;
};

inline fs::path stats_path_for(const fs::path& data) {
  auto p = data;
  p.replace_extension(".stats.json");
  return p;
}

/// Writes records sorted by (task_id, stype_key, sample hash) and a sidecar
/// with per-type counts.
inline DatasetFiles emit_sft_dataset(std::vector<SftRecord> records, const fs::path& path,
                                     const json& extra_stats = json::object()) {
  std::sort(records.begin(), records.end(), [](const SftRecord& a, const SftRecord& b) {
    return std::tie(a.task_id, a.stype_key, a.sample_hash) < std::tie(b.task_id, b.stype_key, b.sample_hash);
  });
  std::string body;
  std::map<std::string, std::size_t> per_type;
  for (const auto& r : records) {
    body += r.to_json().dump();
    body.push_back('\n');
    per_type[r.stype_key]++;
  }
  json stats = {{"records", records.size()}, {"per_type", per_type}};
  for (auto& [k, v] : extra_stats.items()) stats[k] = v;
  DatasetFiles files{path, stats_path_for(path)};
  write_file_atomic(files.data, body);
  write_file_atomic(files.stats, stats.dump(2) + "\n");
  return files;
}

/// Whole SFT stage: sample, add gold supplements, journal, select, emit.
inline DatasetFiles build_sft_stage(const SamplingContext& ctx, const std::vector<TaskInstance>& train_tasks,
                                    const SampleJournal& journal, const fs::path& out_path, int k = 5,
                                    std::optional<std::size_t> target = std::nullopt) {
  auto samples = sample_sft_candidates(ctx, train_tasks, k);
  auto gold = score_gold_supplements(ctx, train_tasks, samples);
  samples.insert(samples.end(), gold.begin(), gold.end());
  journal.write_stage(kSftStage, samples);
  auto records = select_sft_records(samples, target, train_tasks.size(), ctx.run_seed);
  spdlog::info("sft: {} samples, {} records, {} parse failures", samples.size(), records.size(),
               ctx.stats->parse_failures.load());
  return emit_sft_dataset(std::move(records), out_path, json{{"sampling", ctx.stats->to_json()}});
}

}  // namespace sgt
