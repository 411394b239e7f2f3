#pragma once

// Score tables with Avg. Gain, and supplement-type distributions per stage.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "sgt/common.hpp"
#include "sgt/journal.hpp"
#include "sgt/reward.hpp"

namespace sgt {

struct ScoreCell {
  std::string method;
  std::string actor;
  std::string benchmark;
  double score = 0.0;
};

/// Mean over cells of (score - baseline) / baseline. Cells are matched on
/// (actor, benchmark); both rows must cover the same keys. Zero baselines
/// are skipped. nullopt when no cell is usable.
inline std::optional<double> avg_gain(const std::vector<ScoreCell>& row, const std::vector<ScoreCell>& baseline) {
  std::map<std::pair<std::string, std::string>, double> base;
  for (const auto& c : baseline) {
    if (c.score < 0 || c.score > 1) throw UsageError("baseline score out of [0,1] for " + c.benchmark);
    if (!base.emplace(std::pair{c.actor, c.benchmark}, c.score).second)
      throw UsageError("duplicate baseline cell " + c.actor + "/" + c.benchmark);
  }
  std::set<std::pair<std::string, std::string>> seen;
  double sum = 0;
  std::size_t n = 0;
  for (const auto& c : row) {
    if (c.score < 0 || c.score > 1) throw UsageError("score out of [0,1] for " + c.benchmark);
    auto key = std::pair{c.actor, c.benchmark};
    if (!seen.insert(key).second) throw UsageError("duplicate cell " + c.actor + "/" + c.benchmark);
    auto it = base.find(key);
    if (it == base.end()) throw UsageError("no baseline for " + c.actor + "/" + c.benchmark);
    if (it->second == 0) {
      spdlog::debug("baseline for {}/{} is 0; cell excluded from Avg. Gain", c.actor, c.benchmark);
      continue;
    }
    sum += (c.score - it->second) / it->second;
    ++n;
  }
  if (seen.size() != base.size()) throw UsageError("method and baseline rows cover different cells");
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct TypeDistribution {
  std::string stage;
  std::string benchmark;  // "*" for all benchmarks
  std::map<std::string, double> fractions;
  std::size_t samples = 0;
};

/// Type fractions over the generator-produced journal rows of one stage and
/// benchmark (gold-built supplements are skipped). Concat samples count
/// under their composite key. An empty selection gives empty fractions.
inline TypeDistribution type_distribution(const std::vector<ScoredSample>& journal, const std::string& stage,
                                          const std::string& benchmark = "*") {
  TypeDistribution d{stage, benchmark, {}, 0};
  std::map<std::string, std::size_t> counts;
  for (const auto& s : journal) {
    if (s.stage != stage || s.stype_key.empty() || s.source == SampleSource::gold) continue;
    if (benchmark != "*" && s.benchmark != benchmark) continue;
    counts[s.stype_key]++;
    d.samples++;
  }
  for (const auto& [k, c] : counts) d.fractions[k] = static_cast<double>(c) / static_cast<double>(d.samples);
  return d;
}

// ---------------------------------------------------------------------------
// Report

struct ScoreTable {
  std::vector<std::string> methods;     // row order
  std::vector<std::string> benchmarks;  // column order
  std::vector<ScoreCell> cells;

  std::vector<ScoreCell> row(const std::string& method) const {
    std::vector<ScoreCell> out;
    for (const auto& c : cells)
      if (c.method == method) out.push_back(c);
    return out;
  }
};

/// Rows from run-state metrics: baseline, its, prompt (eval_0), sft
/// (eval_0 supplement) and iter_t (eval_t supplement).
inline ScoreTable score_table(const json& state, const std::string& actor = "actor") {
  ScoreTable t;
  std::set<std::string> benches;
  auto add = [&](const std::string& method, const json& scores) {
    t.methods.push_back(method);
    for (auto& [b, v] : scores.items()) {
      t.cells.push_back(ScoreCell{method, actor, b, v.get<double>()});
      benches.insert(b);
    }
  };
  const auto metrics = state.value("metrics", json::object());
  if (metrics.contains("eval_0")) {
    const auto& e0 = metrics["eval_0"];
    for (const char* m : {"baseline", "its", "prompt"})
      if (e0.contains(m)) add(m, e0[m]);
    if (e0.contains("supplement")) add("sft", e0["supplement"]);
  }
  for (int i = 1; metrics.contains("eval_" + std::to_string(i)); ++i) {
    const auto& e = metrics["eval_" + std::to_string(i)];
    if (e.contains("supplement")) add("iter_" + std::to_string(i), e["supplement"]);
  }
  t.benchmarks.assign(benches.begin(), benches.end());
  return t;
}

inline std::string fixed(double v, int digits = 4) { return fmt::format("{:.{}f}", v, digits); }

/// scores.json, scores.tsv, distributions.json and summary.md under `dir`.
/// Output depends only on the state and journal contents.
inline void write_report(const SampleJournal& journal, const json& state, const fs::path& dir,
                         const std::string& actor = "actor") {
  fs::create_directories(dir);
  const auto table = score_table(state, actor);
  const auto base = table.row("baseline");

  for (const auto& c : base)
    if (c.score == 0) spdlog::warn("baseline for {}/{} is 0; cell excluded from Avg. Gain", c.actor, c.benchmark);
  std::map<std::string, std::optional<double>> gains;
  for (const auto& m : table.methods)
    gains[m] = base.empty() ? std::nullopt : avg_gain(table.row(m), base);

  // scores
  json cells = json::array();
  for (const auto& c : table.cells)
    cells.push_back({{"method", c.method}, {"actor", c.actor}, {"benchmark", c.benchmark}, {"score", c.score}});
  json gj = json::object();
  for (const auto& [m, g] : gains) gj[m] = g ? json(*g) : json(nullptr);
  write_file_atomic(dir / "scores.json", json{{"cells", cells}, {"avg_gain", gj}}.dump(2) + "\n");

  std::string tsv = "method";
  for (const auto& b : table.benchmarks) tsv += "\t" + b;
  tsv += "\tavg_gain\n";
  for (const auto& m : table.methods) {
    tsv += m;
    std::map<std::string, double> by_bench;
    for (const auto& c : table.row(m)) by_bench[c.benchmark] = c.score;
    for (const auto& b : table.benchmarks) tsv += "\t" + (by_bench.count(b) ? fixed(by_bench[b], 3) : "-");
    tsv += "\t" + (gains[m] ? fixed(*gains[m]) : "-") + "\n";
  }
  write_file_atomic(dir / "scores.tsv", tsv);

  // distributions
  const auto samples = journal.read_all();
  std::map<std::string, std::set<std::string>> stage_benches;
  for (const auto& s : samples)
    if (!s.stype_key.empty() && s.source != SampleSource::gold) stage_benches[s.stage].insert(s.benchmark);
  json dists = json::object();
  std::string md = "# Run summary\n\n";
  md += "Stage: " + state.value("stage", std::string("?")) + " (" + state.value("status", std::string("?")) + ")\n\n";
  md += "## Scores\n\n| method |";
  for (const auto& b : table.benchmarks) md += " " + b + " |";
  md += " avg gain |\n|---|";
  for (std::size_t i = 0; i <= table.benchmarks.size(); ++i) md += "---|";
  md += "\n";
  for (const auto& m : table.methods) {
    md += "| " + m + " |";
    std::map<std::string, double> by_bench;
    for (const auto& c : table.row(m)) by_bench[c.benchmark] = c.score;
    for (const auto& b : table.benchmarks) md += " " + (by_bench.count(b) ? fixed(by_bench[b], 3) : "-") + " |";
    md += " " + (gains[m] ? fixed(*gains[m] * 100, 1) + "%" : "-") + " |\n";
  }
  md += "\n## Supplement types by stage\n\n";
  for (const auto& [stage, benches] : stage_benches) {
    json per = json::object();
    auto all = type_distribution(samples, stage);
    per["*"] = {{"samples", all.samples}, {"fractions", all.fractions}};
    for (const auto& b : benches) {
      auto d = type_distribution(samples, stage, b);
      per[b] = {{"samples", d.samples}, {"fractions", d.fractions}};
    }
    dists[stage] = per;
    md += "- " + stage + " (" + std::to_string(all.samples) + " samples):";
    std::vector<std::pair<std::string, double>> sorted(all.fractions.begin(), all.fractions.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.second > b.second; });
    for (const auto& [k, v] : sorted) md += " " + k + " " + fixed(v, 3) + ";";
    md += "\n";
  }
  const auto mass = state.value("type_mass", json::object());
  if (!mass.empty()) {
    md += "\n## Generator type probabilities by checkpoint\n\n";
    for (auto& [stage, m] : mass.items()) {
      std::vector<std::pair<std::string, double>> sorted;
      for (auto& [k, v] : m.items()) sorted.emplace_back(k, v.get<double>());
      std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.second > b.second; });
      md += "- " + stage + ":";
      for (const auto& [k, v] : sorted) md += " " + k + " " + fixed(v, 3) + ";";
      md += "\n";
    }
  }
  write_file_atomic(dir / "distributions.json", json{{"stages", dists}, {"checkpoints", mass}}.dump(2) + "\n");
  write_file_atomic(dir / "summary.md", md);
}

}  // namespace sgt
