#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "fedqif/errors.hpp"
#include "fedqif/linalg.hpp"

namespace fedqif {

enum class BasisFamily : std::uint8_t {
  independence = 0,
  ar1 = 1,
  exchangeable = 2,
};

inline std::string_view to_string(BasisFamily family) {
  switch (family) {
    case BasisFamily::independence:
      return "independence";
    case BasisFamily::ar1:
      return "ar1";
    case BasisFamily::exchangeable:
      return "exchangeable";
  }
  return "unknown";
}

inline BasisFamily parse_basis(std::string_view name) {
  if (name == "independence" || name == "ind") return BasisFamily::independence;
  if (name == "ar1" || name == "AR1" || name == "ar(1)") return BasisFamily::ar1;
  if (name == "exchangeable" || name == "cs" || name == "exch") {
    return BasisFamily::exchangeable;
  }
  throw ConfigError("unknown basis family '" + std::string(name) +
                    "' (expected independence, ar1 or exchangeable)");
}

// 0/1 basis matrices spanning an inverse working correlation.
//
//   independence : B_1 = I
//   ar1          : B_1 = I, B_2 = ones on the first super- and sub-diagonal
//   exchangeable : B_1 = I, B_2 = all ones minus I
//
// The matrices are never stored; products are evaluated from the structure,
// so a basis applies to vectors of any length and unbalanced outcome
// dimensions need no special handling.
class BasisSet {
 public:
  BasisSet() = default;
  explicit BasisSet(BasisFamily family) : family_(family) {}

  [[nodiscard]] BasisFamily family() const { return family_; }

  [[nodiscard]] int size() const {
    return family_ == BasisFamily::independence ? 1 : 2;
  }

  // out = B_index * in, for each column. `index` is zero based.
  template <typename In, typename Out>
  void apply(int index, const Eigen::MatrixBase<In>& in,
             Eigen::MatrixBase<Out>& out) const {
    const Index m = in.rows();
    if (index == 0) {
      out = in;
      return;
    }
    if (family_ == BasisFamily::ar1) {
      for (Index c = 0; c < in.cols(); ++c) {
        for (Index r = 0; r < m; ++r) {
          double v = 0.0;
          if (r > 0) v += in(r - 1, c);
          if (r + 1 < m) v += in(r + 1, c);
          out(r, c) = v;
        }
      }
      return;
    }
    // exchangeable
    for (Index c = 0; c < in.cols(); ++c) {
      const double total = in.col(c).sum();
      for (Index r = 0; r < m; ++r) out(r, c) = total - in(r, c);
    }
  }

  [[nodiscard]] Mat apply(int index, const Mat& in) const {
    Mat out(in.rows(), in.cols());
    apply(index, in, out);
    return out;
  }

  [[nodiscard]] Vec apply(int index, const Vec& in) const {
    Vec out(in.size());
    apply(index, in, out);
    return out;
  }

  // Explicit m x m matrix; tests and small diagnostics only.
  [[nodiscard]] Mat dense(int index, Index m) const {
    return apply(index, Mat(Mat::Identity(m, m)));
  }

  friend bool operator==(const BasisSet&, const BasisSet&) = default;

 private:
  BasisFamily family_ = BasisFamily::independence;
};

}  // namespace fedqif
