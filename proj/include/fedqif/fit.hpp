#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "fedqif/errors.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/score.hpp"
#include "fedqif/source_data.hpp"

namespace fedqif {

struct SolverControl {
  int max_iter = 100;
  double grad_tol = 1e-8;  // on the infinity norm of grad Q
  int max_halvings = 20;
  SensitivityKind sensitivity = SensitivityKind::exact;
};

// Output of one data-source QIF fit. psi_at_fit is row-level and stays with
// the worker that produced it.
struct SourceFit {
  Vec theta_hat;
  Mat S_hat;       // -grad Psi at theta_hat, (p*s) x p
  Mat psi_at_fit;  // n x (p*s)
  double q_value = 0.0;
  bool converged = false;
  int iterations = 0;
  double gradient_norm = std::numeric_limits<double>::infinity();
  double dispersion = 1.0;  // identity-link residual variance; 1 for logit
  bool ridged = false;
  LinkKind link = LinkKind::identity;
  BasisFamily family = BasisFamily::independence;

  [[nodiscard]] Index p() const { return theta_hat.size(); }
  [[nodiscard]] Index n() const { return psi_at_fit.rows(); }
  [[nodiscard]] int s() const {
    return family == BasisFamily::independence ? 1 : 2;
  }
  [[nodiscard]] Vec score_mean() const {
    return psi_at_fit.colwise().mean().transpose();
  }
};

// Independence-working GLM estimate and its dispersion.
struct GlmStart {
  Vec theta;
  double dispersion = 1.0;
};

namespace detail {

inline void stack_rows(const SourceData& data, Mat& x, Vec& y) {
  const Index rows = data.total_outcomes();
  x.resize(rows, data.p());
  y.resize(rows);
  Index at = 0;
  for (const auto& part : data.participants) {
    const Index m = part.y.size();
    x.middleRows(at, m) = part.x;
    y.segment(at, m) = part.y;
    at += m;
  }
}

inline double logit_deviance(const Mat& x, const Vec& y, const Vec& theta) {
  const Vec eta = x * theta;
  double dev = 0.0;
  for (Index r = 0; r < y.size(); ++r) {
    // log(1 + exp(eta)) - y * eta, written without overflow
    const double e = eta(r);
    const double softplus = e > 0.0 ? e + std::log1p(std::exp(-e))
                                    : std::log1p(std::exp(e));
    dev += softplus - y(r) * e;
  }
  return 2.0 * dev;
}

}  // namespace detail

// Ordinary least squares (identity) or IRLS logistic regression on all
// outcomes stacked, ignoring within-participant correlation.
inline GlmStart independence_glm(const SourceData& data) {
  Mat x;
  Vec y;
  detail::stack_rows(data, x, y);
  const Index p = data.p();
  if (x.rows() <= p) {
    throw ConfigError("data source has " + std::to_string(x.rows()) +
                      " outcomes for " + std::to_string(p) + " coefficients");
  }
  GlmStart out;
  if (data.link.kind == LinkKind::identity) {
    const Eigen::ColPivHouseholderQR<Mat> qr(x);
    if (qr.rank() < p) throw NumericalError("covariate matrix is rank deficient");
    out.theta = qr.solve(y);
    const double rss = (y - x * out.theta).squaredNorm();
    out.dispersion = rss / static_cast<double>(x.rows() - p);
    if (!(out.dispersion > 0.0) || !std::isfinite(out.dispersion)) {
      out.dispersion = 1.0;
    }
    return out;
  }

  Vec theta = Vec::Zero(p);
  double dev = detail::logit_deviance(x, y, theta);
  const LinkFunction link{LinkKind::logit};
  for (int iter = 0; iter < 50; ++iter) {
    const Vec eta = x * theta;
    Vec w(y.size());
    Vec work(y.size());
    for (Index r = 0; r < y.size(); ++r) {
      const double mu = link.mean(eta(r));
      w(r) = std::max(mu * (1.0 - mu), 1e-12);
      work(r) = eta(r) + (y(r) - mu) / w(r);
    }
    const Mat xtwx = x.transpose() * w.asDiagonal() * x;
    const Vec xtwz = x.transpose() * w.cwiseProduct(work);
    const Eigen::LDLT<Mat> ldlt(xtwx);
    if (ldlt.info() != Eigen::Success) {
      throw NumericalError("IRLS weight matrix is singular");
    }
    const Vec next = ldlt.solve(xtwz);
    Vec step = next - theta;
    double trial_dev = detail::logit_deviance(x, y, theta + step);
    int halvings = 0;
    while (!(trial_dev <= dev) && halvings < 30) {
      step *= 0.5;
      trial_dev = detail::logit_deviance(x, y, theta + step);
      ++halvings;
    }
    theta += step;
    const double change = std::abs(dev - trial_dev);
    dev = trial_dev;
    if (change < 1e-10 * (std::abs(dev) + 1.0)) break;
  }
  out.theta = theta;
  out.dispersion = 1.0;
  return out;
}

// Minimizes Q(theta) = n Psi^T C^{-1} Psi by Gauss-Newton. C is refreshed at
// every iterate and held fixed within it; the step is halved while the
// fixed-C quadratic form would increase. The returned
// fit carries the best iterate even when the gradient tolerance was missed.
inline SourceFit fit_source(const SourceData& data,
                            const std::optional<Vec>& init = std::nullopt,
                            const SolverControl& ctrl = {}) {
  data.validate();
  const Index p = data.p();
  const double n = static_cast<double>(data.n());
  if (data.n() < data.moment_dim()) {
    throw ConfigError("only " + std::to_string(data.n()) +
                      " participants for a moment dimension of " +
                      std::to_string(data.moment_dim()) +
                      "; use a smaller basis or pool data sources");
  }

  const GlmStart start = independence_glm(data);
  Vec theta = init ? *init : start.theta;
  if (theta.size() != p) throw DimensionError("initial value has the wrong length");
  const double dispersion = start.dispersion;

  SourceFit fit;
  fit.link = data.link.kind;
  fit.family = data.basis.family();
  fit.dispersion = dispersion;

  int iter = 0;
  double grad_norm = std::numeric_limits<double>::infinity();
  bool at_precision = false;
  for (;; ++iter) {
    const auto eval = evaluate_score(data, theta, dispersion, true, ctrl.sensitivity);
    const Mat c = moment_covariance(eval.per_participant);
    const SymmetricFactor factor(c, kCovarianceRcondFloor, kCovarianceRidgeScale);
    if (!factor.ok()) throw NumericalError("moment covariance cannot be factorized");
    const Vec cinv_psi = factor.solve(eval.mean);
    const Mat cinv_jac = factor.solve(eval.jacobian);
    const double q = std::max(0.0, n * eval.mean.dot(cinv_psi));
    const Vec grad = 2.0 * n * eval.jacobian.transpose() * cinv_psi;
    grad_norm = grad.cwiseAbs().maxCoeff();
    if (grad_norm < ctrl.grad_tol || iter >= ctrl.max_iter) break;

    const Mat h = eval.jacobian.transpose() * cinv_jac;
    const Eigen::LDLT<Mat> hf(symmetrized(h));
    if (hf.info() != Eigen::Success || hf.rcond() < 1e-14 ||
        (hf.vectorD().array() <= 0.0).any()) {
      throw NumericalError("singular Gauss-Newton step matrix");
    }
    const Vec step = -hf.solve(eval.jacobian.transpose() * cinv_psi);

    bool accepted = false;
    double scale = 1.0;
    for (int h_count = 0; h_count <= ctrl.max_halvings; ++h_count, scale *= 0.5) {
      const Vec trial = theta + scale * step;
      try {
        // Q with C frozen at the current iterate; the Gauss-Newton step is a
        // descent direction for it.
        const Vec psi_trial = evaluate_score(data, trial, dispersion).mean;
        const double q_trial = n * psi_trial.dot(factor.solve(psi_trial));
        // Changes at the rounding level of Q are accepted so the iteration
        // can finish driving the gradient down.
        if (q_trial < q + 64.0 * std::numeric_limits<double>::epsilon() * std::max(q, 1.0)) {
          // The gradient grows with the inverse residual scale, so on
          // near-noiseless data it can stay above grad_tol after theta has
          // stopped moving in floating point: convergence at machine precision.
          at_precision = same_values(trial, theta);
          theta = trial;
          accepted = true;
          break;
        }
      } catch (const NumericalError&) {
        // degenerate trial point; shrink the step
      }
    }
    if (!accepted || at_precision) break;
  }

  const auto final_eval =
      evaluate_score(data, theta, dispersion, true, ctrl.sensitivity);
  const QifValue qv = qif_from_score(final_eval.mean, final_eval.per_participant);
  fit.theta_hat = theta;
  fit.S_hat = -final_eval.jacobian;
  fit.psi_at_fit = final_eval.per_participant;
  fit.q_value = qv.q;
  fit.ridged = qv.ridged;
  fit.iterations = iter;
  fit.gradient_norm = grad_norm;
  fit.converged = grad_norm < ctrl.grad_tol || at_precision;
  return fit;
}

}  // namespace fedqif
