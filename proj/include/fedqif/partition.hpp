#pragma once

#include <algorithm>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedqif/errors.hpp"

namespace fedqif {

// (block j, cohort k), both one based.
struct SourceId {
  int block = 1;
  int cohort = 1;

  friend auto operator<=>(const SourceId&, const SourceId&) = default;
  friend bool operator==(const SourceId&, const SourceId&) = default;
};

inline std::string to_string(const SourceId& id) {
  return "(" + std::to_string(id.block) + "," + std::to_string(id.cohort) + ")";
}

// Disjoint groups of data sources sharing one coefficient vector. Sources
// keep the order in which they were listed; that order fixes the row layout
// of every stacked matrix downstream.
class Partition {
 public:
  Partition() = default;

  Partition(int blocks, int cohorts, std::vector<std::vector<SourceId>> groups)
      : blocks_(blocks), cohorts_(cohorts), groups_(std::move(groups)) {
    validate();
  }

  // One group holding everything, entries ordered cohort-major.
  static Partition homogeneous(int blocks, int cohorts) {
    std::vector<SourceId> all;
    for (int k = 1; k <= cohorts; ++k) {
      for (int j = 1; j <= blocks; ++j) all.push_back({j, k});
    }
    return Partition(blocks, cohorts, {all});
  }

  static Partition singletons(int blocks, int cohorts) {
    std::vector<std::vector<SourceId>> groups;
    for (int k = 1; k <= cohorts; ++k) {
      for (int j = 1; j <= blocks; ++j) groups.push_back({{j, k}});
    }
    return Partition(blocks, cohorts, std::move(groups));
  }

  // Group g collects block g across all cohorts.
  static Partition by_block(int blocks, int cohorts) {
    std::vector<std::vector<SourceId>> groups(static_cast<std::size_t>(blocks));
    for (int j = 1; j <= blocks; ++j) {
      for (int k = 1; k <= cohorts; ++k) {
        groups[static_cast<std::size_t>(j - 1)].push_back({j, k});
      }
    }
    return Partition(blocks, cohorts, std::move(groups));
  }

  // Groups given as lists of block indices; each group spans every cohort.
  static Partition from_block_groups(int blocks, int cohorts,
                                     const std::vector<std::vector<int>>& block_groups) {
    std::vector<std::vector<SourceId>> groups;
    for (const auto& bg : block_groups) {
      std::vector<SourceId> g;
      for (int k = 1; k <= cohorts; ++k) {
        for (int j : bg) g.push_back({j, k});
      }
      groups.push_back(std::move(g));
    }
    return Partition(blocks, cohorts, std::move(groups));
  }

  [[nodiscard]] int blocks() const { return blocks_; }
  [[nodiscard]] int cohorts() const { return cohorts_; }
  [[nodiscard]] int num_groups() const { return static_cast<int>(groups_.size()); }
  [[nodiscard]] const std::vector<std::vector<SourceId>>& groups() const {
    return groups_;
  }
  [[nodiscard]] const std::vector<SourceId>& group(int g) const {
    return groups_.at(static_cast<std::size_t>(g));
  }

  [[nodiscard]] int group_of(const SourceId& id) const {
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (std::find(groups_[g].begin(), groups_[g].end(), id) != groups_[g].end()) {
        return static_cast<int>(g);
      }
    }
    throw ConfigError("source " + to_string(id) + " is not in the partition");
  }

  // Sources in canonical order: group by group, entry order within a group.
  [[nodiscard]] std::vector<SourceId> canonical_order() const {
    std::vector<SourceId> out;
    for (const auto& g : groups_) out.insert(out.end(), g.begin(), g.end());
    return out;
  }

  // True when every group of this partition is a union of groups of `fine`.
  [[nodiscard]] bool is_coarsening_of(const Partition& fine) const {
    if (fine.blocks_ != blocks_ || fine.cohorts_ != cohorts_) return false;
    for (const auto& fg : fine.groups_) {
      const int target = group_of(fg.front());
      for (const auto& id : fg) {
        if (group_of(id) != target) return false;
      }
    }
    return true;
  }

  void validate() const {
    if (blocks_ < 1 || cohorts_ < 1) {
      throw ConfigError("partition needs at least one block and one cohort");
    }
    std::set<SourceId> seen;
    std::size_t total = 0;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (groups_[g].empty()) {
        throw ConfigError("partition group " + std::to_string(g + 1) + " is empty");
      }
      for (const auto& id : groups_[g]) {
        if (id.block < 1 || id.block > blocks_ || id.cohort < 1 ||
            id.cohort > cohorts_) {
          throw ConfigError("partition references unknown source " + to_string(id));
        }
        if (!seen.insert(id).second) {
          throw ConfigError("source " + to_string(id) +
                            " appears more than once in the partition");
        }
        ++total;
      }
    }
    if (total != static_cast<std::size_t>(blocks_) * static_cast<std::size_t>(cohorts_)) {
      throw ConfigError("partition covers " + std::to_string(total) + " of " +
                        std::to_string(blocks_ * cohorts_) + " data sources");
    }
  }

  friend bool operator==(const Partition&, const Partition&) = default;

 private:
  int blocks_ = 0;
  int cohorts_ = 0;
  std::vector<std::vector<SourceId>> groups_;
};

}  // namespace fedqif
