#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedqif {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// Largest absolute entry of A - A^T.
inline double asymmetry(const Mat& a) {
  if (a.size() == 0) return 0.0;
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

// Exact equality including shape.
template <typename A, typename B>
bool same_values(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

inline Mat symmetrized(const Mat& a) { return 0.5 * (a + a.transpose()); }

// Symmetric positive (semi-)definite factorization with a reciprocal
// condition estimate and an optional ridge.
class SymmetricFactor {
 public:
  SymmetricFactor() = default;

  // Factorizes `a`. When the reciprocal condition number falls below
  // `rcond_floor`, a ridge of `ridge_scale * trace(a) / dim` is added and
  // ridged() reports true.
  explicit SymmetricFactor(const Mat& a, double rcond_floor = 0.0,
                           double ridge_scale = 0.0) {
    const Index n = a.rows();
    ldlt_.compute(a);
    rcond_ = ldlt_.info() == Eigen::Success ? ldlt_.rcond() : 0.0;
    if (!std::isfinite(rcond_)) rcond_ = 0.0;
    bool negative = false;
    if (ldlt_.info() == Eigen::Success) {
      negative = (ldlt_.vectorD().array() < 0.0).any();
      rcond_ = std::min(rcond_, pivot_ratio());
    }
    if ((rcond_ < rcond_floor || negative) && ridge_scale > 0.0 && n > 0) {
      double lambda = ridge_scale * a.trace() / static_cast<double>(n);
      if (!(lambda > 0.0)) lambda = ridge_scale;
      Mat ridged = a;
      ridged.diagonal().array() += lambda;
      ldlt_.compute(ridged);
      ridge_ = lambda;
      rcond_ = ldlt_.info() == Eigen::Success ? std::min(ldlt_.rcond(), pivot_ratio()) : 0.0;
    }
    ok_ = ldlt_.info() == Eigen::Success && rcond_ > 0.0;
  }

  [[nodiscard]] bool ok() const { return ok_; }
  [[nodiscard]] bool ridged() const { return ridge_ > 0.0; }
  [[nodiscard]] double ridge() const { return ridge_; }
  [[nodiscard]] double rcond() const { return rcond_; }

  template <typename Rhs>
  [[nodiscard]] auto solve(const Eigen::MatrixBase<Rhs>& b) const {
    return ldlt_.solve(b);
  }

 private:
  // LDLT solves through zero pivots silently, so its rcond estimate alone
  // misses exactly singular input.
  [[nodiscard]] double pivot_ratio() const {
    const auto d = ldlt_.vectorD().cwiseAbs();
    if (d.size() == 0) return 1.0;
    const double top = d.maxCoeff();
    return top > 0.0 ? d.minCoeff() / top : 0.0;
  }

  Eigen::LDLT<Mat> ldlt_;
  double rcond_ = 0.0;
  double ridge_ = 0.0;
  bool ok_ = false;
};

}  // namespace fedqif
