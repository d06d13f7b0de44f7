#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "fedqif/errors.hpp"

namespace fedqif {

enum class LinkKind : std::uint8_t { identity = 0, logit = 1 };

inline std::string_view to_string(LinkKind kind) {
  return kind == LinkKind::identity ? "identity" : "logit";
}

inline LinkKind parse_link(std::string_view name) {
  if (name == "identity" || name == "gaussian" || name == "linear") {
    return LinkKind::identity;
  }
  if (name == "logit" || name == "logistic" || name == "binomial") {
    return LinkKind::logit;
  }
  throw ConfigError("unknown link function '" + std::string(name) +
                    "' (expected identity or logit)");
}

// Mean model E(y) = h(eta) together with the marginal variance used for
// standardizing residuals.
struct LinkFunction {
  LinkKind kind = LinkKind::identity;

  [[nodiscard]] double mean(double eta) const {
    if (kind == LinkKind::identity) return eta;
    // Split on sign so exp never overflows.
    if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
  }

  // d mu / d eta.
  [[nodiscard]] double derivative(double eta) const {
    if (kind == LinkKind::identity) return 1.0;
    const double mu = mean(eta);
    return mu * (1.0 - mu);
  }

  // Marginal variance as a function of the mean; `dispersion` is the
  // identity-link residual variance and is ignored for logit.
  [[nodiscard]] double variance(double mu, double dispersion) const {
    return kind == LinkKind::identity ? dispersion : mu * (1.0 - mu);
  }

  friend bool operator==(const LinkFunction&, const LinkFunction&) = default;
};

}  // namespace fedqif
