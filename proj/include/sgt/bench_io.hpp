#pragma once

// Benchmark ingestion and the seeded train/val/test split.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sgt/common.hpp"
#include "sgt/reward.hpp"
#include "sgt/task.hpp"

namespace sgt {

struct FieldMap {
  std::optional<std::string> id;
  std::vector<std::string> query;  // joined with a blank line when several
  std::string gold;
  std::vector<std::string> aux;
};

struct BenchmarkManifest {
  std::string name;
  fs::path path;
  RewardKind reward_kind = RewardKind::exact_match;
  FieldMap fields;
  std::optional<std::size_t> declared_size;
  EvaluatorConfig evaluator;

  static BenchmarkManifest from_json(const json& j, const fs::path& base_dir) {
    BenchmarkManifest m;
    m.name = j.at("name").get<std::string>();
    if (m.name.empty()) throw ConfigError("benchmark with empty name");
    m.path = j.at("path").get<std::string>();
    if (m.path.is_relative()) m.path = base_dir / m.path;
    m.reward_kind = reward_kind_from_string(j.value("reward_kind", "exact_match"));
    const auto& f = j.at("fields");
    if (f.contains("id")) m.fields.id = f["id"].get<std::string>();
    if (f.at("query").is_array()) m.fields.query = f["query"].get<std::vector<std::string>>();
    else m.fields.query = {f["query"].get<std::string>()};
    m.fields.gold = f.at("gold").get<std::string>();
    m.fields.aux = f.value("aux", std::vector<std::string>{});
    if (j.contains("declared_size")) m.declared_size = j["declared_size"].get<std::size_t>();
    m.evaluator = EvaluatorConfig::from_json(j.value("evaluator", json::object()), m.reward_kind);
    m.evaluator.kind = m.reward_kind;
    return m;
  }
};

/// Manifest file: {"benchmarks": [ {...}, ... ]}. Relative paths resolve
/// against the manifest's directory.
inline std::vector<BenchmarkManifest> load_manifest_file(const fs::path& path) {
  auto j = read_json_file(path);
  std::vector<BenchmarkManifest> out;
  std::set<std::string> names;
  try {
    for (const auto& b : j.at("benchmarks")) {
      out.push_back(BenchmarkManifest::from_json(b, path.parent_path()));
      if (!names.insert(out.back().name).second) throw ConfigError("duplicate benchmark name " + out.back().name);
    }
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (out.empty()) throw ConfigError(path.string() + ": no benchmarks");
  return out;
}

namespace detail {

inline std::optional<std::string> field_text(const json& rec, const std::string& field) {
  if (!rec.contains(field) || rec[field].is_null()) return std::nullopt;
  const auto& v = rec[field];
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace detail

/// One record per line. Ids come from the id field, else "<name>#<index>".
inline std::vector<TaskInstance> load_benchmark(const BenchmarkManifest& m) {
  std::ifstream in(m.path, std::ios::binary);
  if (!in) throw LoadError(m.name + ": cannot open " + m.path.string());
  std::vector<TaskInstance> tasks;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0, index = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim_view(line).empty()) continue;
    const std::string where = m.name + " line " + std::to_string(lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw LoadError(where + ": " + e.what());
    }
    if (!rec.is_object()) throw LoadError(where + ": record is not an object");

    TaskInstance t;
    t.benchmark = m.name;
    t.reward_kind = m.reward_kind;
    if (m.fields.id) {
      auto id = detail::field_text(rec, *m.fields.id);
      if (!id) throw LoadError(where + ": missing id field '" + *m.fields.id + "'");
      t.id = m.name + "#" + *id;
    } else {
      t.id = m.name + "#" + std::to_string(index);
    }
    for (const auto& f : m.fields.query) {
      auto q = detail::field_text(rec, f);
      if (!q) throw LoadError(where + ": missing query field '" + f + "'");
      if (!t.query.empty()) t.query += "\n\n";
      t.query += *q;
    }
    if (trim_view(t.query).empty()) throw LoadError(where + ": empty query");
    auto gold = detail::field_text(rec, m.fields.gold);
    if (!gold) throw LoadError(where + ": missing gold field '" + m.fields.gold + "'");
    if (trim_view(*gold).empty()) throw LoadError(where + ": empty gold field '" + m.fields.gold + "'");
    t.gold = *gold;
    for (const auto& f : m.fields.aux)
      if (auto v = detail::field_text(rec, f)) t.aux[f] = *v;
    if (!ids.insert(t.id).second) throw LoadError(where + ": duplicate id " + t.id);
    tasks.push_back(std::move(t));
    ++index;
  }
  if (m.declared_size && *m.declared_size != tasks.size())
    throw LoadError(m.name + ": declared size " + std::to_string(*m.declared_size) + " but loaded " +
                    std::to_string(tasks.size()));
  return tasks;
}

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct SplitSizes {
  std::size_t train, val, test;
};

/// Floors for train and val, remainder to test.
inline SplitSizes split_sizes(std::size_t n, const SplitRatios& r) {
  auto fl = [n](double ratio) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  };
  SplitSizes s{fl(r.train), fl(r.val), 0};
  s.test = n - s.train - s.val;
  return s;
}

/// Seeded Fisher-Yates shuffle, then contiguous train/val/test blocks.
inline std::vector<TaskInstance> split_dataset(std::vector<TaskInstance> tasks, const SplitRatios& ratios,
                                               std::uint64_t seed) {
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) throw UsageError("split ratios must sum to 1");
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0) throw UsageError("split ratios must be non-negative");
  if (tasks.size() < 3) throw UsageError("need at least 3 tasks to split, got " + std::to_string(tasks.size()));
  const auto sizes = split_sizes(tasks.size(), ratios);
  std::vector<std::size_t> order(tasks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    auto& t = tasks[order[rank]];
    t.split = rank < sizes.train ? Split::train : rank < sizes.train + sizes.val ? Split::val : Split::test;
  }
  return tasks;
}

/// task id -> split, keys sorted. Byte-stable for a given assignment.
inline std::string split_manifest(const std::vector<TaskInstance>& tasks) {
  std::map<std::string, std::string> m;
  for (const auto& t : tasks) m[t.id] = std::string(to_string(t.split));
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j.dump(1) + "\n";
}

inline std::vector<TaskInstance> select_split(const std::vector<TaskInstance>& tasks, Split s) {
  std::vector<TaskInstance> out;
  for (const auto& t : tasks)
    if (t.split == s) out.push_back(t);
  return out;
}

}  // namespace sgt
