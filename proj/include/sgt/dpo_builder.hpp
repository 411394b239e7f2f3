#pragma once

// Iterative DPO preference data. Iteration 1 draws from three sources
// (predefined, out-of-distribution, concatenated types); later iterations
// sample freely. Pairs come from S+ x S-, split into cross-type and
// within-type, and are capped per task and category with stratification on
// the chosen type.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "sgt/backend.hpp"
#include "sgt/journal.hpp"
#include "sgt/reward.hpp"
#include "sgt/sampling.hpp"
#include "sgt/sft_builder.hpp"
#include "sgt/stratify.hpp"

namespace sgt {

enum class PairCategory { cross_type, within_type };

inline std::string_view to_string(PairCategory c) { return c == PairCategory::cross_type ? "cross_type" : "within_type"; }

struct PreferencePair {
  std::string task_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  PairCategory category = PairCategory::cross_type;
  std::string chosen_type;
  std::string rejected_type;
  std::string chosen_hash;    // sort keys only; not written
  std::string rejected_hash;

  json to_json() const {
    return json{{"task_id", task_id},         {"prompt", prompt},
                {"chosen", chosen},           {"rejected", rejected},
                {"category", to_string(category)}, {"chosen_type", chosen_type},
                {"rejected_type", rejected_type}};
  }
};

struct IterationPlan {
  int t = 1;
  int repeats = 5;       // iteration 1: samples per source type
  int ood_count = 3;
  int concat_count = 3;
  int n_free = 20;       // iteration >= 2
  std::size_t cap = 20;  // pairs per task per category

  std::size_t max_candidates_per_task() const {
    if (t == 1) return static_cast<std::size_t>(repeats) * (kAllPredefined.size() + ood_count + concat_count);
    return static_cast<std::size_t>(n_free);
  }
};

inline std::string dpo_stage(int t) { return "dpo_" + std::to_string(t); }

// ---------------------------------------------------------------------------
// Source selection

/// The `k` most probable keys outside the predefined set (and not free
/// style or composite), probability descending, ties by key.
inline std::vector<std::string> select_ood_types(const std::map<std::string, double>& dist, std::size_t k = 3) {
  std::vector<std::pair<std::string, double>> cands;
  for (const auto& [key, p] : dist) {
    if (is_reserved_key(key) || key.find('+') != std::string::npos || p <= 0) continue;
    cands.emplace_back(key, p);
  }
  std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(k, cands.size()); ++i) out.push_back(cands[i].first);
  if (out.size() < k) spdlog::info("only {} out-of-distribution type(s) available (wanted {})", out.size(), k);
  return out;
}

struct TypeRate {
  std::size_t samples = 0;
  std::size_t positives = 0;
  double rate() const { return samples ? static_cast<double>(positives) / static_cast<double>(samples) : 0.0; }
};

/// Positive rate per non-composite type over generator-produced samples.
/// Gold-built supplements are left out: they reflect the gold answer, not
/// the generator.
inline std::map<std::string, TypeRate> positive_rates(const std::vector<ScoredSample>& history) {
  std::map<std::string, TypeRate> rates;
  for (const auto& s : history) {
    if (s.flagged || s.source == SampleSource::gold || s.stype_key.empty()) continue;
    if (s.stype_key.find('+') != std::string::npos) continue;
    auto& r = rates[s.stype_key];
    r.samples++;
    r.positives += static_cast<std::size_t>(s.reward);
  }
  return rates;
}

/// Ranks successful types (rate > 0) by rate, ties by key, and returns the
/// first k unordered pairs in the order (1,2), (1,3), (2,3), (1,4), ...
inline std::vector<std::pair<std::string, std::string>> select_concat_pairs(
    const std::map<std::string, TypeRate>& rates, std::size_t k = 3) {
  std::vector<std::pair<std::string, double>> ranked;
  for (const auto& [key, r] : rates)
    if (r.samples > 0 && r.positives > 0) ranked.emplace_back(key, r.rate());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t j = 1; j < ranked.size() && out.size() < k; ++j)
    for (std::size_t i = 0; i < j && out.size() < k; ++i) out.emplace_back(ranked[i].first, ranked[j].first);
  if (out.size() < k) spdlog::info("only {} concat pair(s) from {} successful type(s)", out.size(), ranked.size());
  return out;
}

/// Frequency estimate of the type distribution from n free-style samples,
/// for endpoints without log-probabilities.
inline std::map<std::string, double> frequency_type_distribution(const SamplingContext& ctx, const TaskInstance& task,
                                                                 int n, std::uint64_t seed) {
  const auto prompt = render_prompt(task, SupplementType::free_style(), ctx.templates);
  auto cands = generate_candidates(ctx, prompt, std::nullopt, n, ctx.sample_temperature, seed, SampleSource::free);
  std::map<std::string, double> dist;
  for (const auto& c : cands) dist[c.supplement->stype.key()] += 1.0;
  for (auto& [k, v] : dist) v /= static_cast<double>(cands.size());
  return dist;
}

// ---------------------------------------------------------------------------
// Sampling

struct IterationSamples {
  std::vector<ScoredSample> samples;
  std::map<std::string, std::vector<std::string>> ood_keys;  // per task
  std::vector<std::pair<std::string, std::string>> concat_pairs;
};

inline IterationSamples sample_iteration(const IterationPlan& plan, const SamplingContext& ctx,
                                         const std::vector<TaskInstance>& val_tasks,
                                         const std::vector<std::pair<std::string, std::string>>& concat_pairs) {
  for (const auto& t : val_tasks)
    if (t.split != Split::val) throw UsageError("DPO sampling got non-val task " + t.id);
  if (plan.t < 1) throw UsageError("DPO iteration index starts at 1");

  const auto stage = dpo_stage(plan.t);
  IterationSamples result;
  result.concat_pairs = concat_pairs;
  std::mutex ood_mu;

  result.samples = sample_tasks(ctx, val_tasks, [&](const TaskInstance& task, std::vector<ScoredSample>& acc) {
    auto seed_for = [&](std::initializer_list<std::string_view> parts) {
      std::vector<std::string> p{task.id, stage};
      p.insert(p.end(), parts.begin(), parts.end());
      auto h = derive_seed(ctx.run_seed, {p[0], p[1]});
      for (std::size_t i = 2; i < p.size(); ++i) h = derive_seed(h, {p[i]});
      return h;
    };

    if (plan.t >= 2) {
      const auto prompt = render_prompt(task, SupplementType::free_style(), ctx.templates);
      for (const auto& c : generate_candidates(ctx, prompt, std::nullopt, plan.n_free, ctx.sample_temperature,
                                               seed_for({"free"}), SampleSource::free))
        acc.push_back(score_candidate(ctx, task, c, stage));
      return;
    }

    // Pre-defined
    for (auto p : kAllPredefined) {
      auto stype = SupplementType::predefined(p);
      for (const auto& c : generate_forced(ctx, task, stype, render_prompt(task, stype, ctx.templates), plan.repeats,
                                           seed_for({"predefined", stype.key()}), SampleSource::predefined))
        acc.push_back(score_candidate(ctx, task, c, stage));
    }

    // Out-of-distribution
    std::map<std::string, double> dist;
    try {
      dist = type_distribution(*ctx.generator, task, ctx.templates, seed_for({"type_probe"}));
    } catch (const UnsupportedCapability&) {
      dist = frequency_type_distribution(ctx, task, plan.n_free, seed_for({"type_frequency"}));
    }
    auto ood = select_ood_types(dist, static_cast<std::size_t>(plan.ood_count));
    {
      std::lock_guard lock(ood_mu);
      result.ood_keys[task.id] = ood;
    }
    for (const auto& key : ood) {
      auto stype = SupplementType::named(key);
      for (const auto& c : generate_forced(ctx, task, stype, render_prompt(task, stype, ctx.templates), plan.repeats,
                                           seed_for({"ood", key}), SampleSource::ood))
        acc.push_back(score_candidate(ctx, task, c, stage));
    }

    // Concat: members forced independently, merged index by index.
    const auto free_prompt = render_prompt(task, SupplementType::free_style(), ctx.templates);
    for (const auto& [a, b] : concat_pairs) {
      const auto pair_key = a + "+" + b;
      auto ta = SupplementType::from_key(a);
      auto tb = SupplementType::from_key(b);
      auto ma = generate_forced(ctx, task, ta, render_prompt(task, ta, ctx.templates), plan.repeats,
                                seed_for({"concat", pair_key, a}), SampleSource::concat);
      auto mb = generate_forced(ctx, task, tb, render_prompt(task, tb, ctx.templates), plan.repeats,
                                seed_for({"concat", pair_key, b}), SampleSource::concat);
      std::map<int, const Candidate*> by_index;
      for (const auto& c : mb) by_index[c.sample_index] = &c;
      for (const auto& ca : ma) {
        auto it = by_index.find(ca.sample_index);
        if (it == by_index.end()) continue;
        Candidate merged;
        try {
          merged.supplement = make_concat(*ca.supplement, *it->second->supplement);
        } catch (const UsageError& e) {
          ctx.stats->parse_failures++;
          spdlog::debug("{}: cannot merge concat members: {}", task.id, e.what());
          continue;
        }
        merged.prompt = free_prompt;
        merged.source = SampleSource::concat;
        merged.seed = seed_for({"concat", pair_key});
        merged.sample_index = ca.sample_index;
        merged.temperature = ctx.sample_temperature;
        acc.push_back(score_candidate(ctx, task, merged, stage));
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Pairs

/// Full S+ x S- cross product, minus identical texts and repeated pairs.
inline std::vector<PreferencePair> build_pairs(std::string_view task_id, const std::vector<ScoredSample>& positives,
                                               const std::vector<ScoredSample>& negatives) {
  std::vector<PreferencePair> out;
  if (positives.empty() || negatives.empty()) return out;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& c : positives) {
    if (c.task_id != task_id || c.reward != 1) throw UsageError("bad chosen sample for " + std::string(task_id));
    for (const auto& r : negatives) {
      if (r.task_id != task_id || r.reward != 0) throw UsageError("bad rejected sample for " + std::string(task_id));
      if (c.raw == r.raw) continue;
      if (!seen.emplace(c.raw, r.raw).second) continue;
      PreferencePair p;
      p.task_id = std::string(task_id);
      p.prompt = c.prompt;
      p.chosen = c.raw;
      p.rejected = r.raw;
      p.chosen_type = c.stype_key;
      p.rejected_type = r.stype_key;
      p.category = c.stype_key == r.stype_key ? PairCategory::within_type : PairCategory::cross_type;
      p.chosen_hash = c.sample_hash();
      p.rejected_hash = r.sample_hash();
      out.push_back(std::move(p));
    }
  }
  return out;
}

/// Per category: keep everything at or under the cap, otherwise a stratified
/// draw of `cap` pairs on the chosen type.
inline std::vector<PreferencePair> cap_and_stratify(const std::vector<PreferencePair>& pairs, std::size_t cap,
                                                    std::uint64_t seed) {
  std::vector<PreferencePair> out;
  for (auto cat : {PairCategory::cross_type, PairCategory::within_type}) {
    std::vector<PreferencePair> in_cat;
    for (const auto& p : pairs)
      if (p.category == cat) in_cat.push_back(p);
    if (in_cat.size() <= cap) {
      out.insert(out.end(), in_cat.begin(), in_cat.end());
      continue;
    }
    std::map<std::string, std::vector<PreferencePair>> by_chosen;
    for (auto& p : in_cat) by_chosen[p.chosen_type].push_back(std::move(p));
    auto picked = stratified_sample(by_chosen, cap, derive_seed(seed, {to_string(cat)}));
    out.insert(out.end(), picked.begin(), picked.end());
  }
  return out;
}

/// Pairs for every task in a stage's samples. Flagged samples never pair.
inline std::vector<PreferencePair> build_iteration_pairs(const std::vector<ScoredSample>& samples, std::size_t cap,
                                                         std::uint64_t seed) {
  std::map<std::string, std::vector<ScoredSample>> by_task;
  for (const auto& s : samples)
    if (!s.flagged) by_task[s.task_id].push_back(s);
  std::vector<PreferencePair> out;
  for (const auto& [task_id, ss] : by_task) {
    auto part = partition(task_id, ss);
    auto pairs = build_pairs(task_id, part.positive, part.negative);
    auto capped = cap_and_stratify(pairs, cap, derive_seed(seed, {task_id, "cap"}));
    out.insert(out.end(), capped.begin(), capped.end());
  }
  return out;
}

/// Fractions of each type key among a set of samples.
inline std::map<std::string, double> type_fractions(const std::vector<ScoredSample>& samples) {
  std::map<std::string, double> out;
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.stype_key.empty()) continue;
    out[s.stype_key] += 1.0;
    ++n;
  }
  for (auto& [k, v] : out) v /= static_cast<double>(n);
  return out;
}

inline DatasetFiles emit_dpo_dataset(int t, std::vector<PreferencePair> pairs, const fs::path& path,
                                     const json& snapshot = json::object()) {
  std::sort(pairs.begin(), pairs.end(), [](const PreferencePair& a, const PreferencePair& b) {
    auto ka = std::tie(a.task_id, a.category, a.chosen_type, a.chosen_hash, a.rejected_hash);
    auto kb = std::tie(b.task_id, b.category, b.chosen_type, b.chosen_hash, b.rejected_hash);
    return ka < kb;
  });
  std::string body;
  std::map<std::string, std::size_t> per_category{{"cross_type", 0}, {"within_type", 0}};
  std::map<std::string, std::size_t> per_chosen;
  for (const auto& p : pairs) {
    body += p.to_json().dump();
    body.push_back('\n');
    per_category[std::string(to_string(p.category))]++;
    per_chosen[p.chosen_type]++;
  }
  json stats = {{"iteration", t},
                {"pairs", pairs.size()},
                {"per_category", per_category},
                {"per_chosen_type", per_chosen},
                {"type_distribution", snapshot}};
  DatasetFiles files{path, stats_path_for(path)};
  write_file_atomic(files.data, body);
  write_file_atomic(files.stats, stats.dump(2) + "\n");
  return files;
}

/// Whole DPO data stage for iteration t.
inline DatasetFiles build_dpo_stage(const IterationPlan& plan, const SamplingContext& ctx,
                                    const std::vector<TaskInstance>& val_tasks, const SampleJournal& journal,
                                    const std::vector<ScoredSample>& sft_history, const fs::path& out_path) {
  std::vector<std::pair<std::string, std::string>> concat_pairs;
  if (plan.t == 1) concat_pairs = select_concat_pairs(positive_rates(sft_history), static_cast<std::size_t>(plan.concat_count));
  auto it = sample_iteration(plan, ctx, val_tasks, concat_pairs);
  journal.write_stage(dpo_stage(plan.t), it.samples);
  auto pairs = build_iteration_pairs(it.samples, plan.cap, derive_seed(ctx.run_seed, {dpo_stage(plan.t)}));

  json concat = json::array();
  for (const auto& [a, b] : it.concat_pairs) concat.push_back({a, b});
  json snapshot = {{"sampled", type_fractions(it.samples)},
                   {"ood_keys", it.ood_keys},
                   {"concat_pairs", concat},
                   {"sampling", ctx.stats->to_json()}};
  spdlog::info("{}: {} samples, {} pairs", dpo_stage(plan.t), it.samples.size(), pairs.size());
  return emit_dpo_dataset(plan.t, std::move(pairs), out_path, snapshot);
}

}  // namespace sgt
