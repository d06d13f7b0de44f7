#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "fedqif/errors.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/source_data.hpp"

namespace fedqif {

// Fitted logit means must stay inside (kMeanFloor, 1 - kMeanFloor).
inline constexpr double kMeanFloor = 1e-12;

// Reciprocal condition number below which the moment covariance gets a ridge.
inline constexpr double kCovarianceRcondFloor = 1e-12;
inline constexpr double kCovarianceRidgeScale = 1e-8;

// Whether the score Jacobian keeps the residual-weighted link-curvature
// terms (exact) or only the expected-information term.
enum class SensitivityKind { exact, expected };

struct ScoreEvaluation {
  Vec mean;             // Psi(theta), length p*s
  Mat per_participant;  // n x (p*s), row i is psi_i(theta)
  Mat jacobian;         // d Psi / d theta, (p*s) x p; empty unless requested
};

namespace detail {

// Per-outcome quantities of psi_i = X^T diag(c) B_s u with
// c = h'(eta)/sqrt(var) and u = (y - mu)/sqrt(var).
struct Standardized {
  Vec c, dc, u, du;
};

inline Standardized standardize(const Participant& part, const LinkFunction& link,
                                const Vec& eta, double dispersion,
                                SensitivityKind kind) {
  const Index m = part.y.size();
  Standardized st{Vec(m), Vec(m), Vec(m), Vec(m)};
  if (link.kind == LinkKind::identity) {
    const double sd = std::sqrt(dispersion);
    for (Index r = 0; r < m; ++r) {
      st.c(r) = 1.0 / sd;
      st.dc(r) = 0.0;
      st.u(r) = (part.y(r) - eta(r)) / sd;
      st.du(r) = -1.0 / sd;
    }
    return st;
  }
  for (Index r = 0; r < m; ++r) {
    const double t = std::exp(-std::abs(eta(r)));
    const double small = t / (1.0 + t);
    if (small <= kMeanFloor) {
      throw DegenerateFitError(
          "logit mean collapsed to 0 or 1 (linear predictor " +
          std::to_string(eta(r)) + ")");
    }
    const double mu = eta(r) >= 0.0 ? 1.0 / (1.0 + t) : small;
    const double v = mu * (1.0 - mu);
    const double a = std::sqrt(v);
    const double e = part.y(r) - mu;
    st.c(r) = a;
    st.u(r) = e / a;
    if (kind == SensitivityKind::exact) {
      st.dc(r) = 0.5 * a * (1.0 - 2.0 * mu);
      st.du(r) = -a - e * (1.0 - 2.0 * mu) / (2.0 * a);
    } else {
      st.dc(r) = 0.0;
      st.du(r) = -a;
    }
  }
  return st;
}

}  // namespace detail

// Extended score of one data source: block s of psi_i is
//   mu_dot_i^T D_i^{-1/2} B_s D_i^{-1/2} (y_i - mu_i).
// `dispersion` is the residual variance used for D_i under the identity link.
inline ScoreEvaluation evaluate_score(const SourceData& data, const Vec& theta,
                                      double dispersion = 1.0,
                                      bool with_jacobian = false,
                                      SensitivityKind kind = SensitivityKind::exact) {
  const Index p = data.p();
  const int s = data.basis.size();
  const Index dim = p * s;
  if (theta.size() != p) {
    throw DimensionError("theta has length " + std::to_string(theta.size()) +
                         " but the data source has p = " + std::to_string(p));
  }
  if (!theta.allFinite()) throw NumericalError("theta is not finite");
  if (data.link.kind == LinkKind::identity && !(dispersion > 0.0)) {
    throw NumericalError("identity-link dispersion must be positive");
  }

  ScoreEvaluation out;
  out.per_participant.setZero(data.n(), dim);
  out.mean.setZero(dim);
  if (with_jacobian) out.jacobian.setZero(dim, p);

  Mat scaled;
  Mat basis_scaled;
  Mat t;
  Vec z;
  for (Index i = 0; i < data.n(); ++i) {
    const Participant& part = data.participants[static_cast<std::size_t>(i)];
    const Index m = part.y.size();
    if (part.x.rows() != m || part.x.cols() != p) {
      throw DimensionError("participant " + std::to_string(i) +
                           " covariates do not match its outcome length or p");
    }
    const Vec eta = part.x * theta;
    if (!eta.allFinite()) throw NumericalError("non-finite linear predictor");
    const auto st = detail::standardize(part, data.link, eta, dispersion, kind);

    if (with_jacobian) scaled = st.du.asDiagonal() * part.x;
    for (int b = 0; b < s; ++b) {
      z.resize(m);
      data.basis.apply(b, st.u, z);
      out.per_participant.row(i).segment(b * p, p) =
          (part.x.transpose() * st.c.cwiseProduct(z)).transpose();
      if (with_jacobian) {
        basis_scaled.resize(m, p);
        data.basis.apply(b, scaled, basis_scaled);
        t = st.dc.cwiseProduct(z).asDiagonal() * part.x;
        t.noalias() += st.c.asDiagonal() * basis_scaled;
        out.jacobian.middleRows(b * p, p).noalias() += part.x.transpose() * t;
      }
    }
    out.mean += out.per_participant.row(i).transpose();
  }
  const double inv_n = 1.0 / static_cast<double>(data.n());
  out.mean *= inv_n;
  if (with_jacobian) out.jacobian *= inv_n;
  return out;
}

// Psi(theta) and the individual psi_i(theta).
inline std::pair<Vec, Mat> extended_score(const SourceData& data, const Vec& theta,
                                          double dispersion = 1.0) {
  auto eval = evaluate_score(data, theta, dispersion);
  return {std::move(eval.mean), std::move(eval.per_participant)};
}

// S = -grad_theta Psi(theta), (p*s) x p.
inline Mat sensitivity(const SourceData& data, const Vec& theta,
                       double dispersion = 1.0,
                       SensitivityKind kind = SensitivityKind::exact) {
  return -evaluate_score(data, theta, dispersion, true, kind).jacobian;
}

// C = (1/n) sum psi_i psi_i^T.
inline Mat moment_covariance(const Mat& per_participant) {
  const double n = static_cast<double>(per_participant.rows());
  Mat c = per_participant.transpose() * per_participant / n;
  return symmetrized(c);
}

struct QifValue {
  double q = 0.0;
  Mat c;
  bool ridged = false;
  double rcond = 0.0;
};

// Q from an already evaluated score; C^{-1} is ridge-regularized when C is
// numerically singular.
inline QifValue qif_from_score(const Vec& mean, const Mat& per_participant) {
  const Index n = per_participant.rows();
  const Index dim = per_participant.cols();
  if (n < dim) {
    throw ConfigError("only " + std::to_string(n) +
                      " participants for a moment dimension of " +
                      std::to_string(dim) +
                      "; the moment covariance cannot be full rank. Use a "
                      "smaller basis or pool data sources.");
  }
  QifValue out;
  out.c = moment_covariance(per_participant);
  const SymmetricFactor factor(out.c, kCovarianceRcondFloor, kCovarianceRidgeScale);
  if (!factor.ok()) throw NumericalError("moment covariance cannot be factorized");
  out.ridged = factor.ridged();
  out.rcond = factor.rcond();
  const Vec w = factor.solve(mean);
  out.q = std::max(0.0, static_cast<double>(n) * mean.dot(w));
  return out;
}

// Q(theta) = n Psi^T C^{-1} Psi with C evaluated at the same theta.
inline QifValue qif_objective(const SourceData& data, const Vec& theta,
                              double dispersion = 1.0) {
  const auto eval = evaluate_score(data, theta, dispersion);
  return qif_from_score(eval.mean, eval.per_participant);
}

}  // namespace fedqif
