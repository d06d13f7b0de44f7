#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedqif/errors.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/partition.hpp"
#include "fedqif/summary.hpp"

namespace fedqif {

// Where one data source's moments sit in the stacked system.
struct MomentSlot {
  SourceId id;
  int group = 0;
  Index row = 0;   // first canonical row
  Index rows = 0;  // p * s
  std::size_t summary_index = 0;
  Index cohort_offset = 0;  // first row inside the cohort's V_k
};

// One cohort's share of V_N: (n_k / N) V_k, with `rows[t]` the canonical
// row of V_k's row t. Entries pairing different cohorts are zero, so V_N is
// the direct sum of these blocks under a permutation.
struct WeightBlock {
  int cohort_id = 0;
  std::vector<Index> rows;
  Mat V;
};

// The stacked linear system behind the integrated estimator:
//   theta = (S^T V_N^{-1} S)^{-1} S^T V_N^{-1} rhs.
struct MomentSystem {
  int G = 0;
  Index p = 0;
  std::uint64_t N = 0;
  Index dim = 0;
  std::vector<MomentSlot> slots;
  Mat S;    // dim x (G p), block diagonal over groups of stacked n_k S_jk
  Vec rhs;  // stacked n_k S_jk theta_jk
  std::vector<WeightBlock> weight;

  [[nodiscard]] Mat dense_weight() const {
    Mat out = Mat::Zero(dim, dim);
    for (const auto& b : weight) {
      for (std::size_t a = 0; a < b.rows.size(); ++a) {
        for (std::size_t c = 0; c < b.rows.size(); ++c) {
          out(b.rows[a], b.rows[c]) = b.V(static_cast<Index>(a), static_cast<Index>(c));
        }
      }
    }
    return out;
  }
};

enum class PcaMode {
  disabled,  // singular V_N is an error
  fallback,  // reduce only when V_N is numerically singular
  always,
};

struct IntegrateOptions {
  PcaMode pca = PcaMode::fallback;
  double pca_threshold = 1e-10;  // relative to the largest eigenvalue
  double singular_rcond = 1e-12;
};

namespace detail {

inline std::vector<MomentSlot> layout_sources(std::span<const CohortSummary> summaries,
                                              const Partition& partition, Index& p_out) {
  std::map<int, std::size_t> by_cohort;
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const int k = summaries[i].cohort_id;
    if (k < 1 || k > partition.cohorts()) {
      throw ConfigError("summary for cohort " + std::to_string(k) +
                        " is outside the partition's " +
                        std::to_string(partition.cohorts()) + " cohorts");
    }
    if (!by_cohort.emplace(k, i).second) {
      throw ConfigError("two summaries for cohort " + std::to_string(k));
    }
    if (summaries[i].V.rows() != summaries[i].dim() ||
        summaries[i].V.cols() != summaries[i].dim()) {
      throw DimensionError("cohort " + std::to_string(k) + " V_k is " +
                           std::to_string(summaries[i].V.rows()) + "x" +
                           std::to_string(summaries[i].V.cols()) +
                           " but its fits need " + std::to_string(summaries[i].dim()));
    }
  }
  std::vector<MomentSlot> slots;
  Index row = 0;
  std::optional<Index> p;
  for (int g = 0; g < partition.num_groups(); ++g) {
    std::optional<LinkKind> group_link;
    for (const auto& id : partition.group(g)) {
      const auto it = by_cohort.find(id.cohort);
      if (it == by_cohort.end()) {
        throw ConfigError("missing summary for cohort " + std::to_string(id.cohort) +
                          " (needed by source " + to_string(id) + ")");
      }
      const CohortSummary& cs = summaries[it->second];
      const SourceEstimate& est = cs.fit_for_block(id.block);
      if (p && *p != est.p()) {
        throw DimensionError("source " + to_string(id) + " has p = " +
                             std::to_string(est.p()) + ", expected " + std::to_string(*p));
      }
      p = est.p();
      if (group_link && *group_link != est.link) {
        throw ConfigError("group " + std::to_string(g + 1) + " mixes link functions");
      }
      group_link = est.link;
      if (est.S_hat.rows() != est.moment_dim() || est.S_hat.cols() != est.p()) {
        throw DimensionError("source " + to_string(id) + " has a malformed sensitivity");
      }
      MomentSlot slot;
      slot.id = id;
      slot.group = g;
      slot.row = row;
      slot.rows = est.moment_dim();
      slot.summary_index = it->second;
      slot.cohort_offset = cs.offset_of(id.block);
      slots.push_back(slot);
      row += slot.rows;
    }
  }
  // Every fit shipped in a summary must be used.
  std::size_t total_fits = 0;
  for (const auto& cs : summaries) total_fits += cs.fits.size();
  if (total_fits != slots.size()) {
    throw ConfigError("summaries carry " + std::to_string(total_fits) +
                      " block fits but the partition names " +
                      std::to_string(slots.size()) + " sources");
  }
  p_out = p.value_or(0);
  return slots;
}

}  // namespace detail

// S = blockdiag_g { (n_k S_jk)_{(j,k) in P_g} }, rows in canonical order.
inline Mat stack_sensitivities(std::span<const CohortSummary> summaries,
                               const Partition& partition) {
  Index p = 0;
  const auto slots = detail::layout_sources(summaries, partition, p);
  Index dim = 0;
  for (const auto& s : slots) dim += s.rows;
  Mat out = Mat::Zero(dim, partition.num_groups() * p);
  for (const auto& s : slots) {
    const CohortSummary& cs = summaries[s.summary_index];
    const auto& est = cs.fit_for_block(s.id.block);
    out.block(s.row, s.group * p, s.rows, p) = static_cast<double>(cs.n) * est.S_hat;
  }
  return out;
}

inline std::uint64_t total_participants(std::span<const CohortSummary> summaries) {
  std::uint64_t n = 0;
  for (const auto& cs : summaries) n += cs.n;
  return n;
}

// V_N as per-cohort blocks (n_k / N) V_k mapped onto canonical rows.
inline std::vector<WeightBlock> assemble_weight(std::span<const CohortSummary> summaries,
                                                const Partition& partition) {
  Index p = 0;
  const auto slots = detail::layout_sources(summaries, partition, p);
  const double big_n = static_cast<double>(total_participants(summaries));
  std::vector<WeightBlock> out;
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const CohortSummary& cs = summaries[i];
    WeightBlock b;
    b.cohort_id = cs.cohort_id;
    b.rows.assign(static_cast<std::size_t>(cs.dim()), -1);
    for (const auto& s : slots) {
      if (s.summary_index != i) continue;
      for (Index r = 0; r < s.rows; ++r) {
        b.rows[static_cast<std::size_t>(s.cohort_offset + r)] = s.row + r;
      }
    }
    b.V = (static_cast<double>(cs.n) / big_n) * cs.V;
    out.push_back(std::move(b));
  }
  return out;
}

inline MomentSystem build_moment_system(std::span<const CohortSummary> summaries,
                                        const Partition& partition) {
  MomentSystem sys;
  sys.slots = detail::layout_sources(summaries, partition, sys.p);
  sys.G = partition.num_groups();
  sys.N = total_participants(summaries);
  for (const auto& s : sys.slots) sys.dim += s.rows;
  sys.S = stack_sensitivities(summaries, partition);
  sys.rhs = Vec::Zero(sys.dim);
  for (const auto& s : sys.slots) {
    const CohortSummary& cs = summaries[s.summary_index];
    const auto& est = cs.fit_for_block(s.id.block);
    sys.rhs.segment(s.row, s.rows) =
        static_cast<double>(cs.n) * (est.S_hat * est.theta_hat);
  }
  sys.weight = assemble_weight(summaries, partition);
  return sys;
}

// Map x -> T x with T^T T = V_N^{-1} (full rank) or the inverse on the
// retained principal subspace (reduced). Applied block by block.
class Whitening {
 public:
  struct Block {
    std::vector<Index> rows;
    Mat transform;  // out_rows x rows.size()
  };

  Whitening() = default;
  Whitening(std::vector<Block> blocks, bool reduced)
      : blocks_(std::move(blocks)), reduced_(reduced) {
    for (const auto& b : blocks_) out_dim_ += b.transform.rows();
  }

  [[nodiscard]] bool reduced() const { return reduced_; }
  [[nodiscard]] Index out_dim() const { return out_dim_; }
  [[nodiscard]] const std::vector<Block>& blocks() const { return blocks_; }

  [[nodiscard]] Mat apply(const Mat& x) const {
    Mat out(out_dim_, x.cols());
    Index at = 0;
    for (const auto& b : blocks_) {
      Mat sub(static_cast<Index>(b.rows.size()), x.cols());
      for (std::size_t r = 0; r < b.rows.size(); ++r) {
        sub.row(static_cast<Index>(r)) = x.row(b.rows[r]);
      }
      out.middleRows(at, b.transform.rows()).noalias() = b.transform * sub;
      at += b.transform.rows();
    }
    return out;
  }

  [[nodiscard]] Vec apply(const Vec& x) const {
    const Mat m = x;
    return apply(m).col(0);
  }

 private:
  std::vector<Block> blocks_;
  Index out_dim_ = 0;
  bool reduced_ = false;
};

// Principal-component reduction of the moment system.
struct ReducedSystem {
  Mat S;                  // U^T S
  Vec rhs;                // U^T rhs
  Vec weight;             // retained eigenvalues; the reduced V is diag(weight)
  Index rank = 0;
  Vec eigenvalues;        // all eigenvalues of V_N, descending
  Vec explained;          // eigenvalues / their sum, descending
  Whitening whitening;    // diag(weight)^{-1/2} U^T
};

namespace detail {

struct Eigenblocks {
  std::vector<Eigen::SelfAdjointEigenSolver<Mat>> solvers;
  double lambda_max = 0.0;
};

inline Eigenblocks eigen_blocks(const std::vector<WeightBlock>& weight) {
  Eigenblocks out;
  for (const auto& b : weight) {
    out.solvers.emplace_back(symmetrized(b.V));
    if (out.solvers.back().info() != Eigen::Success) {
      throw NumericalError("eigendecomposition of V_k failed for cohort " +
                           std::to_string(b.cohort_id));
    }
    if (b.V.rows() > 0) {
      out.lambda_max = std::max(out.lambda_max, out.solvers.back().eigenvalues().maxCoeff());
    }
  }
  return out;
}

}  // namespace detail

// Keeps eigenvectors of V_N with eigenvalue > threshold * lambda_max and
// projects the system onto them.
inline ReducedSystem pca_reduce(const MomentSystem& sys, double threshold) {
  const auto eig = detail::eigen_blocks(sys.weight);
  if (!(eig.lambda_max > 0.0)) throw NumericalError("V_N is identically zero");
  const double cut = std::max(threshold, 0.0) * eig.lambda_max;

  std::vector<double> all;
  std::vector<double> kept;
  std::vector<Whitening::Block> wblocks;
  std::vector<Mat> rotations;
  for (std::size_t b = 0; b < sys.weight.size(); ++b) {
    const auto& solver = eig.solvers[b];
    const Vec& lam = solver.eigenvalues();  // ascending
    const Mat& vec = solver.eigenvectors();
    std::vector<Index> keep;
    for (Index t = lam.size() - 1; t >= 0; --t) {
      all.push_back(lam(t));
      if (lam(t) > cut && lam(t) > 0.0) keep.push_back(t);
    }
    Whitening::Block wb;
    wb.rows = sys.weight[b].rows;
    wb.transform.resize(static_cast<Index>(keep.size()), lam.size());
    Mat rot(static_cast<Index>(keep.size()), lam.size());
    for (std::size_t t = 0; t < keep.size(); ++t) {
      const Index col = keep[t];
      rot.row(static_cast<Index>(t)) = vec.col(col).transpose();
      wb.transform.row(static_cast<Index>(t)) =
          vec.col(col).transpose() / std::sqrt(lam(col));
      kept.push_back(lam(col));
    }
    rotations.push_back(std::move(rot));
    wblocks.push_back(std::move(wb));
  }

  ReducedSystem out;
  out.rank = static_cast<Index>(kept.size());
  std::sort(all.begin(), all.end(), std::greater<>());
  out.eigenvalues = Eigen::Map<const Vec>(all.data(), static_cast<Index>(all.size()));
  double positive_sum = 0.0;
  for (double v : all) positive_sum += std::max(v, 0.0);
  out.explained = out.eigenvalues.cwiseMax(0.0) / positive_sum;
  out.weight = Eigen::Map<const Vec>(kept.data(), static_cast<Index>(kept.size()));

  // Rotated (unscaled) system, block by block in the same order as `weight`.
  std::vector<Whitening::Block> rblocks;
  for (std::size_t b = 0; b < wblocks.size(); ++b) {
    rblocks.push_back({wblocks[b].rows, rotations[b]});
  }
  const Whitening rotation(std::move(rblocks), true);
  out.S = rotation.apply(sys.S);
  out.rhs = rotation.apply(sys.rhs);
  out.whitening = Whitening(std::move(wblocks), true);
  if (out.rank < sys.G * sys.p) {
    throw NumericalError("principal-component reduction kept " +
                         std::to_string(out.rank) + " moments for " +
                         std::to_string(sys.G * sys.p) +
                         " parameters; the system is under-identified");
  }
  return out;
}

struct IntegrateDiagnostics {
  double min_weight_rcond = 0.0;
  bool pca_applied = false;
  double information_rcond = 0.0;
  double covariance_asymmetry = 0.0;
  std::vector<std::string> warnings;
};

struct IntegratedResult {
  Vec theta;       // G*p, groups stacked
  Mat covariance;  // N (S^T V_N^{-1} S)^{-1}
  int G = 0;
  Index p = 0;
  std::uint64_t N = 0;
  Index moment_dim = 0;
  std::optional<Index> pca_rank;
  Vec explained_variance;  // filled when the reduction ran
  IntegrateDiagnostics diagnostics;
  Whitening whitening;

  [[nodiscard]] Vec std_errors() const { return covariance.diagonal().cwiseSqrt(); }
  [[nodiscard]] Vec group_theta(int g) const { return theta.segment(g * p, p); }
  [[nodiscard]] Mat group_covariance(int g) const {
    return covariance.block(g * p, g * p, p, p);
  }
  // Moment dimension actually used (after any reduction).
  [[nodiscard]] Index effective_moment_dim() const {
    return pca_rank ? *pca_rank : moment_dim;
  }
};

namespace detail {

inline std::optional<Whitening> cholesky_whitening(const MomentSystem& sys,
                                                   double singular_rcond,
                                                   double& min_rcond) {
  std::vector<Whitening::Block> blocks;
  min_rcond = std::numeric_limits<double>::infinity();
  bool singular = false;
  for (const auto& b : sys.weight) {
    const Eigen::LLT<Mat> llt(b.V);
    double rc = 0.0;
    if (llt.info() == Eigen::Success) rc = llt.rcond();
    min_rcond = std::min(min_rcond, rc);
    if (llt.info() != Eigen::Success || !(rc >= singular_rcond)) {
      singular = true;
      continue;
    }
    const Index d = b.V.rows();
    Whitening::Block wb;
    wb.rows = b.rows;
    wb.transform = llt.matrixL().solve(Mat(Mat::Identity(d, d)));
    blocks.push_back(std::move(wb));
  }
  if (singular) return std::nullopt;
  return Whitening(std::move(blocks), false);
}

}  // namespace detail

// Solves the system through its whitened least-squares form
//   min_theta || T (S theta - rhs) ||^2 ,  T^T T = V_N^{-1},
// which has the same solution as the normal equations.
inline IntegratedResult integrate_system(const MomentSystem& sys,
                                         const IntegrateOptions& opts = {}) {
  IntegratedResult out;
  out.G = sys.G;
  out.p = sys.p;
  out.N = sys.N;
  out.moment_dim = sys.dim;
  const Index k = sys.G * sys.p;
  if (sys.dim < k) {
    throw NumericalError("moment dimension " + std::to_string(sys.dim) +
                         " is below the parameter dimension " + std::to_string(k));
  }

  double min_rcond = 0.0;
  std::optional<Whitening> white;
  if (opts.pca != PcaMode::always) {
    white = detail::cholesky_whitening(sys, opts.singular_rcond, min_rcond);
  }
  out.diagnostics.min_weight_rcond = min_rcond;
  if (!white) {
    if (opts.pca == PcaMode::disabled) {
      throw NumericalError(
          "V_N is numerically singular (reciprocal condition " +
          std::to_string(min_rcond) +
          "); enable the principal-component fallback (--pca fallback) to reduce "
          "the moment conditions");
    }
    ReducedSystem red = pca_reduce(sys, opts.pca_threshold);
    out.pca_rank = red.rank;
    out.explained_variance = red.explained;
    out.diagnostics.pca_applied = true;
    if (opts.pca == PcaMode::fallback) {
      out.diagnostics.warnings.push_back("V_N singular; moment conditions reduced to " +
                                         std::to_string(red.rank) +
                                         " principal components");
    }
    white = std::move(red.whitening);
  }

  const Mat y = white->apply(sys.S);
  const Vec z = white->apply(sys.rhs);
  const Eigen::ColPivHouseholderQR<Mat> qr(y);
  if (qr.rank() < k) {
    throw NumericalError(
        "S^T V_N^{-1} S is singular: some partition group carries no information");
  }
  out.theta = qr.solve(z);
  const Mat r = qr.matrixR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
  const Mat r_inv =
      r.template triangularView<Eigen::Upper>().solve(Mat(Mat::Identity(k, k)));
  const Mat inner = r_inv * r_inv.transpose();
  const auto& perm = qr.colsPermutation();
  const Mat cov = static_cast<double>(sys.N) * (perm * inner * perm.transpose());
  out.diagnostics.covariance_asymmetry = asymmetry(cov);
  out.covariance = symmetrized(cov);
  const Vec rd = r.diagonal().cwiseAbs();
  out.diagnostics.information_rcond =
      rd.maxCoeff() > 0.0 ? std::pow(rd.minCoeff() / rd.maxCoeff(), 2) : 0.0;
  out.whitening = std::move(*white);
  return out;
}

// Integrated estimator from cohort summaries under a homogeneity partition.
inline IntegratedResult integrate(std::span<const CohortSummary> summaries,
                                  const Partition& partition,
                                  const IntegrateOptions& opts = {}) {
  return integrate_system(build_moment_system(summaries, partition), opts);
}

// Fully homogeneous case computed from per-cohort Godambe blocks
//   J_ijk = S_ik^T [V_k^{-1}]_{i;j} S_jk ,
//   theta = (sum n_k J_ijk)^{-1} sum n_k J_ijk theta_jk .
// Independent of the stacked-system path.
inline IntegratedResult godambe_combine(std::span<const CohortSummary> summaries,
                                        const Partition& partition) {
  if (partition.num_groups() != 1) {
    throw ConfigError("godambe_combine needs a single-group partition");
  }
  Index p = 0;
  (void)detail::layout_sources(summaries, partition, p);
  Mat info = Mat::Zero(p, p);
  Vec weighted = Vec::Zero(p);
  for (const auto& cs : summaries) {
    const Eigen::FullPivLU<Mat> lu(cs.V);
    if (!lu.isInvertible()) {
      throw NumericalError("V_k of cohort " + std::to_string(cs.cohort_id) +
                           " is singular");
    }
    const Mat v_inv = lu.inverse();
    const double nk = static_cast<double>(cs.n);
    Index oi = 0;
    for (const auto& fi : cs.fits) {
      Index oj = 0;
      for (const auto& fj : cs.fits) {
        const Mat block = v_inv.block(oi, oj, fi.moment_dim(), fj.moment_dim());
        const Mat j_ijk = fi.S_hat.transpose() * block * fj.S_hat;
        info += nk * j_ijk;
        weighted += nk * j_ijk * fj.theta_hat;
        oj += fj.moment_dim();
      }
      oi += fi.moment_dim();
    }
  }
  const Eigen::FullPivLU<Mat> lu(info);
  if (!lu.isInvertible()) throw NumericalError("combined Godambe information is singular");
  IntegratedResult out;
  out.G = 1;
  out.p = p;
  out.N = total_participants(summaries);
  out.theta = lu.solve(weighted);
  out.covariance = symmetrized(lu.inverse());
  Index dim = 0;
  for (const auto& cs : summaries) dim += cs.dim();
  out.moment_dim = dim;
  return out;
}

}  // namespace fedqif
