#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "sgt/common.hpp"

namespace sgt {

enum class RewardKind { exact_match, multiple_choice, execution_equivalence, external_command };

inline std::string_view to_string(RewardKind k) {
  switch (k) {
    case RewardKind::exact_match: return "exact_match";
    case RewardKind::multiple_choice: return "multiple_choice";
    case RewardKind::execution_equivalence: return "execution_equivalence";
    case RewardKind::external_command: return "external_command";
  }
  return "?";
}

inline RewardKind reward_kind_from_string(std::string_view s) {
  if (s == "exact_match") return RewardKind::exact_match;
  if (s == "multiple_choice") return RewardKind::multiple_choice;
  if (s == "execution_equivalence") return RewardKind::execution_equivalence;
  if (s == "external_command") return RewardKind::external_command;
  throw ConfigError("unknown reward kind '" + std::string(s) + "'");
}

enum class Split { unassigned, train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::unassigned: return "unassigned";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

/// One benchmark item. The query is self-contained: question, context and
/// instruction all live in it, the gold answer is only used for scoring.
struct TaskInstance {
  std::string id;
  std::string benchmark;
  std::string query;
  std::string gold;
  RewardKind reward_kind = RewardKind::exact_match;
  Split split = Split::unassigned;
  std::map<std::string, std::string> aux;
};

}  // namespace sgt
