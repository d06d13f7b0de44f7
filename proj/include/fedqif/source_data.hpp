#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedqif/basis.hpp"
#include "fedqif/errors.hpp"
#include "fedqif/link.hpp"
#include "fedqif/linalg.hpp"

namespace fedqif {

// One participant's outcome vector for one block and its m x p covariates.
struct Participant {
  Vec y;
  Mat x;
};

// All participants of one (block, cohort) data source.
struct SourceData {
  std::vector<Participant> participants;
  LinkFunction link;
  BasisSet basis;

  [[nodiscard]] Index n() const {
    return static_cast<Index>(participants.size());
  }

  [[nodiscard]] Index p() const {
    return participants.empty() ? 0 : participants.front().x.cols();
  }

  // Moment dimension p * s.
  [[nodiscard]] Index moment_dim() const { return p() * basis.size(); }

  [[nodiscard]] Index total_outcomes() const {
    Index total = 0;
    for (const auto& part : participants) total += part.y.size();
    return total;
  }

  void validate() const {
    if (participants.empty()) throw ConfigError("data source has no participants");
    const Index cols = p();
    if (cols == 0) throw DimensionError("covariate matrices have no columns");
    for (std::size_t i = 0; i < participants.size(); ++i) {
      const auto& part = participants[i];
      if (part.y.size() == 0) {
        throw DimensionError("participant " + std::to_string(i) +
                             " has an empty outcome vector");
      }
      if (part.x.rows() != part.y.size() || part.x.cols() != cols) {
        throw DimensionError(
            "participant " + std::to_string(i) + ": covariates are " +
            std::to_string(part.x.rows()) + "x" + std::to_string(part.x.cols()) +
            " but outcome has " + std::to_string(part.y.size()) +
            " entries and p = " + std::to_string(cols));
      }
      if (!part.y.allFinite() || !part.x.allFinite()) {
        throw ConfigError("participant " + std::to_string(i) +
                          " has non-finite data");
      }
      if (link.kind == LinkKind::logit) {
        for (Index r = 0; r < part.y.size(); ++r) {
          if (part.y(r) != 0.0 && part.y(r) != 1.0) {
            throw ConfigError("logit link requires 0/1 outcomes; participant " +
                              std::to_string(i) + " has " +
                              std::to_string(part.y(r)));
          }
        }
      }
    }
  }
};

}  // namespace fedqif
