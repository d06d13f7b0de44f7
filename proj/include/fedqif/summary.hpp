#pragma once

#include <cstdint>
#include <exception>
#include <span>
#include <string>
#include <vector>

#include "fedqif/errors.hpp"
#include "fedqif/fit.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/parallel.hpp"
#include "fedqif/source_data.hpp"

namespace fedqif {

// The part of a SourceFit that leaves the worker.
struct SourceEstimate {
  int block = 1;
  LinkKind link = LinkKind::identity;
  BasisFamily family = BasisFamily::independence;
  int s = 1;
  Vec theta_hat;
  Mat S_hat;
  double q_value = 0.0;
  bool converged = false;
  int iterations = 0;
  double dispersion = 1.0;

  [[nodiscard]] Index p() const { return theta_hat.size(); }
  [[nodiscard]] Index moment_dim() const { return p() * s; }

  friend bool operator==(const SourceEstimate& a, const SourceEstimate& b) {
    return a.block == b.block && a.link == b.link && a.family == b.family &&
           a.s == b.s && same_values(a.theta_hat, b.theta_hat) &&
           same_values(a.S_hat, b.S_hat) && a.q_value == b.q_value &&
           a.converged == b.converged && a.iterations == b.iterations &&
           a.dispersion == b.dispersion;
  }
};

// Round-one payload of one cohort: every block fit plus the cross-block
// covariance of the stacked scores. Nothing in here grows with n_k.
struct CohortSummary {
  static constexpr std::uint32_t kFormatVersion = 1;

  int cohort_id = 1;
  std::uint64_t n = 0;
  std::vector<SourceEstimate> fits;  // ordered as the blocks were fitted
  Mat V;                             // (sum_j p*s_j) squared

  [[nodiscard]] Index dim() const {
    Index d = 0;
    for (const auto& f : fits) d += f.moment_dim();
    return d;
  }

  [[nodiscard]] const SourceEstimate& fit_for_block(int block) const {
    for (const auto& f : fits) {
      if (f.block == block) return f;
    }
    throw ConfigError("cohort " + std::to_string(cohort_id) + " has no fit for block " +
                      std::to_string(block));
  }

  // Row offset of `block` inside V.
  [[nodiscard]] Index offset_of(int block) const {
    Index at = 0;
    for (const auto& f : fits) {
      if (f.block == block) return at;
      at += f.moment_dim();
    }
    throw ConfigError("cohort " + std::to_string(cohort_id) + " has no fit for block " +
                      std::to_string(block));
  }

  bool operator==(const CohortSummary& o) const {
    return cohort_id == o.cohort_id && n == o.n && fits == o.fits &&
           same_values(V, o.V);
  }
};

inline SourceEstimate to_estimate(int block, const SourceFit& fit) {
  SourceEstimate e;
  e.block = block;
  e.link = fit.link;
  e.family = fit.family;
  e.s = fit.s();
  e.theta_hat = fit.theta_hat;
  e.S_hat = fit.S_hat;
  e.q_value = fit.q_value;
  e.converged = fit.converged;
  e.iterations = fit.iterations;
  e.dispersion = fit.dispersion;
  return e;
}

// V_k = (1/n_k) sum_i psi_{i,k} psi_{i,k}^T where psi_{i,k} stacks the
// participant's scores over all blocks of the cohort.
inline Mat cohort_covariance(std::span<const SourceFit> fits) {
  if (fits.empty()) throw ConfigError("cohort has no block fits");
  const Index n = fits.front().n();
  Index dim = 0;
  for (const auto& f : fits) {
    if (f.n() != n) {
      throw DimensionError("blocks of one cohort must share participants (" +
                           std::to_string(f.n()) + " vs " + std::to_string(n) + ")");
    }
    dim += f.psi_at_fit.cols();
  }
  Mat stacked(n, dim);
  Index at = 0;
  for (const auto& f : fits) {
    stacked.middleCols(at, f.psi_at_fit.cols()) = f.psi_at_fit;
    at += f.psi_at_fit.cols();
  }
  return moment_covariance(stacked);
}

inline CohortSummary assemble_cohort(int cohort_id, std::span<const int> blocks,
                                     std::span<const SourceFit> fits) {
  if (blocks.size() != fits.size()) {
    throw DimensionError("block labels and fits differ in number");
  }
  CohortSummary out;
  out.cohort_id = cohort_id;
  out.n = static_cast<std::uint64_t>(fits.front().n());
  for (std::size_t b = 0; b < fits.size(); ++b) {
    out.fits.push_back(to_estimate(blocks[b], fits[b]));
  }
  out.V = cohort_covariance(fits);
  return out;
}

// Per-block fits of one cohort, kept alongside the summary when the worker
// also needs the row-level scores.
struct CohortFit {
  CohortSummary summary;
  std::vector<SourceFit> fits;
};

// Fits every block of a cohort and assembles its summary. `blocks[b]` is
// the one-based block index of `data[b]`. Blocks are fitted on up to
// `threads` threads; the result does not depend on the thread count.
inline CohortFit fit_cohort(int cohort_id, std::span<const int> blocks,
                            std::span<const SourceData> data,
                            const SolverControl& ctrl = {}, unsigned threads = 1) {
  if (blocks.size() != data.size() || data.empty()) {
    throw DimensionError("cohort needs one block label per data source");
  }
  CohortFit out;
  out.fits.resize(data.size());
  std::vector<std::exception_ptr> errors(data.size());
  parallel_for(
      data.size(),
      [&](std::size_t b) {
        try {
          out.fits[b] = fit_source(data[b], std::nullopt, ctrl);
        } catch (...) {
          errors[b] = std::current_exception();
        }
      },
      threads);
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  out.summary = assemble_cohort(cohort_id, blocks, out.fits);
  return out;
}

}  // namespace fedqif
