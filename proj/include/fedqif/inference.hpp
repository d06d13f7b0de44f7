#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "fedqif/combiner.hpp"
#include "fedqif/errors.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/partition.hpp"

namespace fedqif {

// Upper tail P(X > x) of a chi-square with `df` degrees of freedom.
inline double chi2_upper_tail(double x, double df) {
  if (!(df > 0.0)) throw NumericalError("chi-square tail needs positive df");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

// Quantile of a chi-square with `df` degrees of freedom.
inline double chi2_quantile(double prob, double df) {
  if (!(df > 0.0)) throw NumericalError("chi-square quantile needs positive df");
  if (!(prob > 0.0 && prob < 1.0)) throw NumericalError("quantile level must lie in (0, 1)");
  return 2.0 * boost::math::gamma_p_inv(0.5 * df, prob);
}

// Round-two payload: Psi_jk re-evaluated at the integrated estimate of one
// partition for every block of one cohort.
struct ScoreMessage {
  static constexpr std::uint32_t kFormatVersion = 1;

  struct Entry {
    int block = 1;
    Vec psi;
  };

  int cohort_id = 1;
  std::uint64_t n = 0;
  std::string partition_label;
  std::vector<Entry> scores;

  bool operator==(const ScoreMessage& o) const {
    if (cohort_id != o.cohort_id || n != o.n || partition_label != o.partition_label ||
        scores.size() != o.scores.size()) {
      return false;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].block != o.scores[i].block ||
          !same_values(scores[i].psi, o.scores[i].psi)) {
        return false;
      }
    }
    return true;
  }
};

struct FitStatistic {
  double q_n = 0.0;
  int df = 0;
  std::optional<double> p_value;  // absent when df == 0
  double bic = 0.0;
  std::uint64_t N = 0;
  int G = 0;
};

// Psi_N(theta) = (1/N) [ n_k Psi_jk(theta_g) ] in canonical order.
inline Vec stacked_score(const MomentSystem& sys, std::span<const ScoreMessage> scores) {
  std::map<std::pair<int, int>, const ScoreMessage::Entry*> lookup;
  std::map<int, std::uint64_t> n_of;
  for (const auto& msg : scores) {
    n_of[msg.cohort_id] = msg.n;
    for (const auto& e : msg.scores) lookup[{e.block, msg.cohort_id}] = &e;
  }
  const double big_n = static_cast<double>(sys.N);
  Vec out(sys.dim);
  for (const auto& slot : sys.slots) {
    const auto it = lookup.find({slot.id.block, slot.id.cohort});
    if (it == lookup.end()) {
      throw ConfigError("missing round-two score for source " + to_string(slot.id));
    }
    if (it->second->psi.size() != slot.rows) {
      throw DimensionError("round-two score for source " + to_string(slot.id) +
                           " has length " + std::to_string(it->second->psi.size()) +
                           ", expected " + std::to_string(slot.rows));
    }
    const double nk = static_cast<double>(n_of.at(slot.id.cohort));
    out.segment(slot.row, slot.rows) = (nk / big_n) * it->second->psi;
  }
  return out;
}

inline int degrees_of_freedom(Index moment_dim, int groups, Index p) {
  return static_cast<int>(moment_dim - static_cast<Index>(groups) * p);
}

inline FitStatistic make_statistic(double q, int df, std::uint64_t big_n, int groups) {
  if (df < 0) throw NumericalError("negative degrees of freedom");
  FitStatistic st;
  st.q_n = std::max(0.0, q);
  st.df = df;
  st.N = big_n;
  st.G = groups;
  if (df > 0) st.p_value = chi2_upper_tail(st.q_n, df);
  st.bic = st.q_n - std::log(static_cast<double>(big_n)) * df;
  return st;
}

// Q_N = N Psi_N(theta)^T V_N^{-1} Psi_N(theta), with V_N the weight already
// used by the combine step (or its principal-component reduction).
inline FitStatistic q_statistic(const MomentSystem& sys, const IntegratedResult& result,
                                std::span<const ScoreMessage> scores) {
  const Vec psi = stacked_score(sys, scores);
  const Vec w = result.whitening.apply(psi);
  const double q = static_cast<double>(sys.N) * w.squaredNorm();
  return make_statistic(q, degrees_of_freedom(result.effective_moment_dim(), sys.G, sys.p),
                        sys.N, sys.G);
}

// Link and basis of every source; two fits can only be compared when these
// agree.
using ModelSignature = std::map<SourceId, std::pair<LinkKind, BasisFamily>>;

inline ModelSignature signature_of(std::span<const CohortSummary> summaries) {
  ModelSignature sig;
  for (const auto& cs : summaries) {
    for (const auto& f : cs.fits) sig[{f.block, cs.cohort_id}] = {f.link, f.family};
  }
  return sig;
}

// What a nested comparison needs to know about one fitted partition.
struct PartitionFit {
  std::string label;
  Partition partition;
  FitStatistic statistic;
  Index p = 0;
  ModelSignature signature;
};

struct NestedTestResult {
  double q = 0.0;      // after clamping
  double raw_q = 0.0;  // coarse minus fine, unclamped
  int df = 0;
  std::optional<double> p_value;
  bool clamped = false;
  std::string fine_label;
  std::string coarse_label;
};

// Homogeneity test of `coarse` against the finer `fine`:
// Q = Q_coarse - Q_fine on (G_fine - G_coarse) p degrees of freedom.
inline NestedTestResult nested_test(const PartitionFit& fine, const PartitionFit& coarse) {
  if (!coarse.partition.is_coarsening_of(fine.partition)) {
    throw ConfigError("partition '" + coarse.label + "' is not a coarsening of '" +
                      fine.label + "'");
  }
  if (fine.p != coarse.p) throw ConfigError("the two fits use different p");
  if (fine.signature != coarse.signature) {
    throw ConfigError("the two fits use different link or working-correlation settings");
  }
  NestedTestResult out;
  out.fine_label = fine.label;
  out.coarse_label = coarse.label;
  out.raw_q = coarse.statistic.q_n - fine.statistic.q_n;
  out.df = (fine.partition.num_groups() - coarse.partition.num_groups()) *
           static_cast<int>(fine.p);
  out.q = out.raw_q;
  if (out.q < 0.0) {
    out.q = 0.0;
    out.clamped = true;
  }
  if (out.df > 0) out.p_value = chi2_upper_tail(out.q, out.df);
  return out;
}

struct BicCandidate {
  std::string label;
  Partition partition;
  FitStatistic statistic;
};

// Ascending GMM-BIC; ties go to the partition with fewer groups.
inline std::vector<BicCandidate> compare_bic(std::vector<BicCandidate> candidates) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const BicCandidate& a, const BicCandidate& b) {
                     if (a.statistic.bic != b.statistic.bic) {
                       return a.statistic.bic < b.statistic.bic;
                     }
                     return a.partition.num_groups() < b.partition.num_groups();
                   });
  return candidates;
}

}  // namespace fedqif
