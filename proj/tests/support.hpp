#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "fedqif/fit.hpp"
#include "fedqif/score.hpp"
#include "fedqif/source_data.hpp"
#include "fedqif/summary.hpp"

namespace fedqif::testing {

inline double rel_diff(const Mat& a, const Mat& b) {
  const double scale = std::max({1.0, a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

// Random source: intercept plus standard normal covariates, outcomes from
// the marginal model with independent noise.
inline SourceData random_source(std::mt19937_64& rng, int n, int m_min, int m_max, int p,
                                LinkKind link, BasisFamily basis, const Vec& theta) {
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> md(m_min, m_max);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SourceData d;
  d.link = LinkFunction{link};
  d.basis = BasisSet(basis);
  for (int i = 0; i < n; ++i) {
    const int m = md(rng);
    Participant part;
    part.x.resize(m, p);
    part.y.resize(m);
    const double shared = nd(rng);
    for (int r = 0; r < m; ++r) {
      part.x(r, 0) = 1.0;
      for (int c = 1; c < p; ++c) part.x(r, c) = nd(rng);
      const double eta = part.x.row(r).dot(theta);
      if (link == LinkKind::identity) {
        part.y(r) = eta + 0.5 * shared + nd(rng);
      } else {
        part.y(r) = u(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0;
      }
    }
    d.participants.push_back(std::move(part));
  }
  return d;
}

inline Vec random_theta(std::mt19937_64& rng, int p, double scale = 0.5) {
  std::normal_distribution<double> nd;
  Vec t(p);
  for (int c = 0; c < p; ++c) t(c) = scale * nd(rng);
  return t;
}

// Dense basis matrices, written out entry by entry.
inline std::vector<Mat> dense_basis(BasisFamily family, Index m) {
  std::vector<Mat> out{Mat::Identity(m, m)};
  if (family == BasisFamily::ar1) {
    Mat b = Mat::Zero(m, m);
    for (Index r = 0; r + 1 < m; ++r) b(r, r + 1) = b(r + 1, r) = 1.0;
    out.push_back(b);
  } else if (family == BasisFamily::exchangeable) {
    Mat b = Mat::Ones(m, m);
    b.diagonal().setZero();
    out.push_back(b);
  }
  return out;
}

// psi_i by explicit products mu_dot^T D^{-1/2} B D^{-1/2} (y - mu).
inline Mat dense_scores(const SourceData& data, const Vec& theta, double dispersion) {
  const Index p = theta.size();
  const auto s = static_cast<Index>(dense_basis(data.basis.family(), 1).size());
  Mat out(data.n(), p * s);
  for (Index i = 0; i < data.n(); ++i) {
    const auto& part = data.participants[static_cast<std::size_t>(i)];
    const Index m = part.y.size();
    Vec mu(m), deriv(m), var(m);
    for (Index r = 0; r < m; ++r) {
      const double eta = part.x.row(r).dot(theta);
      if (data.link.kind == LinkKind::identity) {
        mu(r) = eta;
        deriv(r) = 1.0;
        var(r) = dispersion;
      } else {
        mu(r) = 1.0 / (1.0 + std::exp(-eta));
        deriv(r) = mu(r) * (1.0 - mu(r));
        var(r) = mu(r) * (1.0 - mu(r));
      }
    }
    const Mat mu_dot = deriv.asDiagonal() * part.x;
    Mat d_half = Mat::Zero(m, m);
    for (Index r = 0; r < m; ++r) d_half(r, r) = 1.0 / std::sqrt(var(r));
    const auto bases = dense_basis(data.basis.family(), m);
    for (Index b = 0; b < s; ++b) {
      const Vec block =
          mu_dot.transpose() * d_half * bases[static_cast<std::size_t>(b)] * d_half * (part.y - mu);
      out.row(i).segment(b * p, p) = block.transpose();
    }
  }
  return out;
}

// Central-difference Jacobian of Psi.
inline Mat fd_jacobian(const SourceData& data, const Vec& theta, double dispersion,
                       double h = 1e-6) {
  const Index p = theta.size();
  const Index dim = data.moment_dim();
  Mat jac(dim, p);
  for (Index c = 0; c < p; ++c) {
    Vec up = theta;
    Vec down = theta;
    up(c) += h;
    down(c) -= h;
    jac.col(c) = (evaluate_score(data, up, dispersion).mean -
                  evaluate_score(data, down, dispersion).mean) /
                 (2.0 * h);
  }
  return jac;
}

// Several blocks over the same participants, with cross-block correlation
// through a shared participant effect.
inline std::vector<SourceData> random_cohort(std::mt19937_64& rng, int n, const std::vector<int>& m,
                                             int p, LinkKind link, BasisFamily basis,
                                             const std::vector<Vec>& theta) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SourceData> out(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) {
    out[j].link = LinkFunction{link};
    out[j].basis = BasisSet(basis);
  }
  for (int i = 0; i < n; ++i) {
    const double shared = nd(rng);
    for (std::size_t j = 0; j < m.size(); ++j) {
      Participant part;
      part.x.resize(m[j], p);
      part.y.resize(m[j]);
      for (int r = 0; r < m[j]; ++r) {
        part.x(r, 0) = 1.0;
        for (int c = 1; c < p; ++c) part.x(r, c) = nd(rng);
        const double eta = part.x.row(r).dot(theta[j]);
        const double z = 0.6 * shared + 0.8 * nd(rng);
        if (link == LinkKind::identity) {
          part.y(r) = eta + z;
        } else {
          part.y(r) = u(rng) < 1.0 / (1.0 + std::exp(-eta - 0.5 * z)) ? 1.0 : 0.0;
        }
      }
      out[j].participants.push_back(std::move(part));
    }
  }
  return out;
}

inline std::vector<int> iota_blocks(std::size_t count) {
  std::vector<int> b;
  for (std::size_t j = 0; j < count; ++j) b.push_back(static_cast<int>(j) + 1);
  return b;
}

}  // namespace fedqif::testing
