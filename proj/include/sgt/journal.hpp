#pragma once

#include <map>
#include <string>
#include <vector>

#include "sgt/common.hpp"
#include "sgt/reward.hpp"

namespace sgt {

/// Sample journal: one JSONL file per stage under a directory. A stage's file
/// is written once, atomically, when the stage finishes sampling; re-running
/// the stage replaces it wholesale.
class SampleJournal {
 public:
  explicit SampleJournal(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }
  fs::path stage_path(const std::string& stage) const { return dir_ / (stage + ".jsonl"); }
  bool has_stage(const std::string& stage) const { return fs::exists(stage_path(stage)); }

  void write_stage(const std::string& stage, const std::vector<ScoredSample>& samples) const {
    std::string body;
    for (const auto& s : samples) {
      if (s.stage != stage) throw UsageError("sample of stage " + s.stage + " written to journal stage " + stage);
      body += s.to_json().dump();
      body.push_back('\n');
    }
    write_file_atomic(stage_path(stage), body);
  }

  std::vector<ScoredSample> read_stage(const std::string& stage) const {
    std::vector<ScoredSample> out;
    if (!has_stage(stage)) return out;
    for (const auto& row : read_jsonl(stage_path(stage))) out.push_back(ScoredSample::from_json(row));
    return out;
  }

  std::vector<std::string> stages() const {
    std::vector<std::string> out;
    if (!fs::exists(dir_)) return out;
    for (const auto& e : fs::directory_iterator(dir_))
      if (e.path().extension() == ".jsonl") out.push_back(e.path().stem().string());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<ScoredSample> read_all() const {
    std::vector<ScoredSample> out;
    for (const auto& st : stages()) {
      auto v = read_stage(st);
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  }

 private:
  fs::path dir_;
};

}  // namespace sgt
