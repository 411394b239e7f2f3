#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "sgt/common.hpp"

namespace sgt {

/// Per-stratum quotas for a target total, strata given in ascending key
/// order. Each round hands out floor(remaining / open strata); a stratum
/// whose supply is at or below that share is taken whole and its shortfall
/// goes back into the pool. Once every open stratum can cover the share, the
/// leftover units go one each to the lowest keys.
inline std::vector<std::size_t> quota_allocation(const std::vector<std::size_t>& supply, std::size_t target) {
  std::vector<std::size_t> alloc(supply.size(), 0);
  std::size_t total = 0;
  for (auto s : supply) total += s;
  std::size_t remaining = std::min(target, total);

  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < supply.size(); ++i)
    if (supply[i] > 0) open.push_back(i);

  while (remaining > 0 && !open.empty()) {
    const std::size_t share = remaining / open.size();
    std::vector<std::size_t> still_open;
    bool saturated = false;
    for (auto i : open) {
      if (supply[i] <= share) {
        alloc[i] = supply[i];
        remaining -= supply[i];
        saturated = true;
      } else {
        still_open.push_back(i);
      }
    }
    if (saturated) {
      open = std::move(still_open);
      continue;
    }
    const std::size_t extra = remaining % open.size();
    for (std::size_t r = 0; r < open.size(); ++r) alloc[open[r]] = share + (r < extra ? 1 : 0);
    remaining = 0;
  }
  return alloc;
}

/// Stratified draw over groups keyed by stratum. Quotas follow
/// quota_allocation; inside a stratum the members are shuffled with a seed
/// derived from the stratum key. Output is grouped by ascending key.
template <typename T>
std::vector<T> stratified_sample(const std::map<std::string, std::vector<T>>& groups, std::size_t target,
                                 std::uint64_t seed) {
  std::vector<std::size_t> supply;
  for (const auto& [k, v] : groups) supply.push_back(v.size());
  const auto quota = quota_allocation(supply, target);
  std::vector<T> out;
  std::size_t i = 0;
  for (const auto& [k, members] : groups) {
    std::vector<std::size_t> idx(members.size());
    for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
    Rng rng(derive_seed(seed, {k}));
    rng.shuffle(idx);
    for (std::size_t j = 0; j < quota[i]; ++j) out.push_back(members[idx[j]]);
    ++i;
  }
  return out;
}

}  // namespace sgt
