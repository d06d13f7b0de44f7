#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedqif/errors.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/parallel.hpp"
#include "fedqif/partition.hpp"
#include "fedqif/pipeline.hpp"
#include "fedqif/source_data.hpp"

namespace fedqif {

enum class CorrelationFamily { ar1, exchangeable };

inline CorrelationFamily parse_correlation(std::string_view name) {
  if (name == "ar1" || name == "AR1") return CorrelationFamily::ar1;
  if (name == "exchangeable" || name == "cs") return CorrelationFamily::exchangeable;
  throw ConfigError("unknown correlation family '" + std::string(name) + "'");
}

inline std::string_view to_string(CorrelationFamily f) {
  return f == CorrelationFamily::ar1 ? "ar1" : "exchangeable";
}

// Seed derivation: every (seed, stream...) tuple maps to an independent
// 64-bit state, so replications and cohorts never share a sequence.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b) ^ c);
}

struct SimDesign {
  int K = 2;
  int J = 4;
  std::vector<std::uint64_t> n;  // per cohort
  std::vector<int> m;            // per block
  int p = 3;                     // intercept plus p-1 continuous covariates
  bool null_covariate = false;   // append one covariate with coefficient 0
  LinkKind link = LinkKind::logit;
  Partition partition;
  std::vector<Vec> theta;  // per group, length p
  CorrelationFamily truth = CorrelationFamily::ar1;
  BasisFamily working = BasisFamily::ar1;
  std::vector<double> rho;     // per source, index (k-1)*J + (j-1); drawn when empty
  std::vector<double> sigma2;  // per source; 1 when empty
  double covariate_correlation = 0.3;
  double cross_block_correlation = 0.0;  // shared latent factor across blocks
  std::uint64_t seed = 1;

  [[nodiscard]] int total_p() const { return p + (null_covariate ? 1 : 0); }

  [[nodiscard]] Vec group_truth(int g) const {
    Vec out = Vec::Zero(total_p());
    out.head(p) = theta.at(static_cast<std::size_t>(g));
    return out;
  }

  [[nodiscard]] static std::size_t source_index(int j, int k, int blocks) {
    return static_cast<std::size_t>((k - 1) * blocks + (j - 1));
  }

  // Fills rho (uniform on [0.3, 0.7], seeded) and sigma2 defaults, then
  // checks every invariant.
  void finalize() {
    const std::size_t sources = static_cast<std::size_t>(J) * static_cast<std::size_t>(K);
    if (rho.empty()) {
      std::mt19937_64 rng(derive_seed(seed, 0x72686fULL));
      std::uniform_real_distribution<double> u(0.3, 0.7);
      rho.resize(sources);
      for (auto& r : rho) r = u(rng);
    }
    if (sigma2.empty()) sigma2.assign(sources, 1.0);
    validate();
  }

  void validate() const {
    const std::size_t sources = static_cast<std::size_t>(J) * static_cast<std::size_t>(K);
    if (K < 1 || J < 1) throw ConfigError("design needs K >= 1 and J >= 1");
    if (n.size() != static_cast<std::size_t>(K)) throw ConfigError("design needs one n per cohort");
    if (m.size() != static_cast<std::size_t>(J)) throw ConfigError("design needs one m per block");
    for (int mj : m) {
      if (mj < 1) throw ConfigError("block dimensions must be positive");
    }
    if (p < 1) throw ConfigError("design needs p >= 1");
    if (partition.blocks() != J || partition.cohorts() != K) {
      throw ConfigError("design partition does not match J and K");
    }
    if (theta.size() != static_cast<std::size_t>(partition.num_groups())) {
      throw ConfigError("design needs one true theta per partition group");
    }
    for (const auto& t : theta) {
      if (t.size() != p) throw ConfigError("true theta length differs from p");
    }
    if (rho.size() != sources || sigma2.size() != sources) {
      throw ConfigError("rho and sigma2 need one entry per data source");
    }
    for (double r : rho) {
      if (!(std::abs(r) < 1.0)) throw ConfigError("correlation parameters need |rho| < 1");
      if (truth == CorrelationFamily::exchangeable && r < 0.0) {
        throw ConfigError("exchangeable generation needs rho >= 0");
      }
    }
    for (double s2 : sigma2) {
      if (!(s2 > 0.0)) throw ConfigError("variances must be positive");
    }
    if (!(covariate_correlation >= 0.0 && covariate_correlation < 1.0)) {
      throw ConfigError("covariate correlation must lie in [0, 1)");
    }
    if (!(cross_block_correlation >= 0.0 && cross_block_correlation < 1.0)) {
      throw ConfigError("cross-block correlation must lie in [0, 1)");
    }
  }
};

namespace detail {

// Unit-variance correlated normals for one block: AR(1) by the O(m)
// recursion or exchangeable through a shared factor.
inline void latent_block(std::mt19937_64& rng, CorrelationFamily family, double rho,
                         Index m, Eigen::Ref<Vec> out) {
  std::normal_distribution<double> nd;
  if (family == CorrelationFamily::ar1) {
    const double innov = std::sqrt(1.0 - rho * rho);
    double prev = nd(rng);
    out(0) = prev;
    for (Index r = 1; r < m; ++r) {
      prev = rho * prev + innov * nd(rng);
      out(r) = prev;
    }
    return;
  }
  const double common = std::sqrt(rho) * nd(rng);
  const double own = std::sqrt(1.0 - rho);
  for (Index r = 0; r < m; ++r) out(r) = common + own * nd(rng);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace detail

// One cohort of simulated data. Deterministic in (design.seed, replication,
// cohort); cohorts can be generated independently.
inline CohortData generate_cohort(const SimDesign& design, std::uint64_t replication,
                                  int cohort) {
  std::mt19937_64 rng(derive_seed(design.seed, replication + 1, static_cast<std::uint64_t>(cohort)));
  std::normal_distribution<double> nd;
  const int tp = design.total_p();
  Index total_m = 0;
  for (int mj : design.m) total_m += mj;
  const auto n = static_cast<Index>(design.n.at(static_cast<std::size_t>(cohort - 1)));

  CohortData out;
  out.cohort_id = cohort;
  for (int j = 1; j <= design.J; ++j) {
    out.blocks.push_back(j);
    SourceData sd;
    sd.link = LinkFunction{design.link};
    sd.basis = BasisSet(design.working);
    sd.participants.resize(static_cast<std::size_t>(n));
    out.data.push_back(std::move(sd));
  }

  const double cx = design.covariate_correlation;
  const double cb = design.cross_block_correlation;
  const LinkFunction link{design.link};
  Mat x_all(total_m, tp);
  Vec latent(total_m);
  for (Index i = 0; i < n; ++i) {
    // Covariates: intercept, then equicorrelated continuous columns over all
    // M outcome positions.
    x_all.col(0).setOnes();
    for (int c = 1; c < tp; ++c) {
      const double common = std::sqrt(cx) * nd(rng);
      const double own = std::sqrt(1.0 - cx);
      for (Index r = 0; r < total_m; ++r) x_all(r, c) = common + own * nd(rng);
    }
    const double shared = nd(rng);
    Index at = 0;
    for (int j = 1; j <= design.J; ++j) {
      const Index mj = design.m[static_cast<std::size_t>(j - 1)];
      const std::size_t src = SimDesign::source_index(j, cohort, design.J);
      detail::latent_block(rng, design.truth, design.rho[src], mj, latent.segment(at, mj));
      if (cb > 0.0) {
        latent.segment(at, mj) =
            std::sqrt(cb) * Vec::Constant(mj, shared) + std::sqrt(1.0 - cb) * latent.segment(at, mj);
      }
      at += mj;
    }
    at = 0;
    for (int j = 1; j <= design.J; ++j) {
      const Index mj = design.m[static_cast<std::size_t>(j - 1)];
      const std::size_t src = SimDesign::source_index(j, cohort, design.J);
      const Vec theta = design.group_truth(design.partition.group_of({j, cohort}));
      Participant& part = out.data[static_cast<std::size_t>(j - 1)]
                              .participants[static_cast<std::size_t>(i)];
      part.x = x_all.middleRows(at, mj);
      const Vec eta = part.x * theta;
      part.y.resize(mj);
      for (Index r = 0; r < mj; ++r) {
        const double z = latent(at + r);
        if (design.link == LinkKind::identity) {
          part.y(r) = eta(r) + std::sqrt(design.sigma2[src]) * z;
        } else {
          part.y(r) = detail::normal_cdf(z) <= link.mean(eta(r)) ? 1.0 : 0.0;
        }
      }
      at += mj;
    }
  }
  return out;
}

inline std::vector<CohortData> generate(const SimDesign& design, std::uint64_t replication) {
  std::vector<CohortData> out;
  for (int k = 1; k <= design.K; ++k) out.push_back(generate_cohort(design, replication, k));
  return out;
}

// Multivariate normal outcomes with block-AR(1) (or exchangeable) covariance.
inline std::vector<CohortData> gen_gaussian(const SimDesign& design,
                                            std::uint64_t replication = 0) {
  if (design.link != LinkKind::identity) throw ConfigError("gen_gaussian needs the identity link");
  return generate(design, replication);
}

// Correlated Bernoulli outcomes by thresholding a Gaussian copula at the
// logistic marginal means.
inline std::vector<CohortData> gen_binary(const SimDesign& design,
                                          std::uint64_t replication = 0) {
  if (design.link != LinkKind::logit) throw ConfigError("gen_binary needs the logit link");
  return generate(design, replication);
}

struct StudyOptions {
  PipelineOptions pipeline;
  // Partition used for estimation; the design's partition when absent.
  std::optional<Partition> estimation_partition;
  unsigned threads = 0;  // 0: thread_count()
};

struct ReplicationRecord {
  bool ok = false;
  std::string error;
  int non_converged = 0;
  Vec theta;
  Vec se;
  std::optional<FitStatistic> statistic;
};

// Per-coefficient Monte Carlo summary (rows: group-major coefficients).
struct MetricsReport {
  std::vector<std::string> names;
  Vec truth;
  Vec rmse, ese, ase, bias, coverage, length;
  std::vector<std::optional<double>> err;  // defined for coefficients whose truth is 0
  std::vector<bool> degenerate;            // ASE collapsed to zero
  int replications = 0;
  int used = 0;
  int failed = 0;
};

struct StudyOutput {
  MetricsReport metrics;
  std::vector<ReplicationRecord> records;
};

inline std::vector<std::string> coefficient_names(const SimDesign& design, int groups) {
  std::vector<std::string> names;
  for (int g = 1; g <= groups; ++g) {
    for (int c = 0; c < design.total_p(); ++c) {
      std::string base = c == 0 ? "Intercept"
                         : (design.null_covariate && c == design.total_p() - 1)
                             ? "Null"
                             : "X" + std::to_string(c);
      names.push_back(groups > 1 ? "g" + std::to_string(g) + ":" + base : base);
    }
  }
  return names;
}

inline constexpr double kNormal975 = 1.959963984540054;

inline MetricsReport summarize(const std::vector<ReplicationRecord>& records, const Vec& truth,
                               std::vector<std::string> names) {
  MetricsReport r;
  r.names = std::move(names);
  r.truth = truth;
  r.replications = static_cast<int>(records.size());
  const Index d = truth.size();
  std::vector<const ReplicationRecord*> ok;
  for (const auto& rec : records) {
    if (rec.ok) ok.push_back(&rec);
  }
  r.used = static_cast<int>(ok.size());
  r.failed = r.replications - r.used;
  r.rmse = r.ese = r.ase = r.bias = r.coverage = r.length = Vec::Constant(d, std::nan(""));
  r.err.assign(static_cast<std::size_t>(d), std::nullopt);
  r.degenerate.assign(static_cast<std::size_t>(d), false);
  if (ok.empty()) return r;
  const double cnt = static_cast<double>(ok.size());
  for (Index c = 0; c < d; ++c) {
    double sum = 0, sq = 0, ase = 0, hit = 0, len = 0, rej = 0;
    for (const auto* rec : ok) {
      const double est = rec->theta(c);
      const double se = rec->se(c);
      const double dev = est - truth(c);
      sum += dev;
      sq += dev * dev;
      ase += se;
      if (std::abs(dev) <= kNormal975 * se) hit += 1.0;
      len += 2.0 * kNormal975 * se;
      if (std::abs(est) > kNormal975 * se) rej += 1.0;
    }
    const double mean_dev = sum / cnt;
    double var = 0.0;
    for (const auto* rec : ok) {
      const double dv = rec->theta(c) - truth(c) - mean_dev;
      var += dv * dv;
    }
    r.bias(c) = mean_dev;
    r.rmse(c) = std::sqrt(sq / cnt);
    r.ese(c) = ok.size() > 1 ? std::sqrt(var / (cnt - 1.0)) : 0.0;
    r.ase(c) = ase / cnt;
    r.length(c) = len / cnt;
    r.degenerate[static_cast<std::size_t>(c)] =
        r.ase(c) <= 1e-10 * std::max(1.0, std::abs(truth(c)));
    r.coverage(c) = r.degenerate[static_cast<std::size_t>(c)] ? std::nan("") : hit / cnt;
    if (truth(c) == 0.0) r.err[static_cast<std::size_t>(c)] = rej / cnt;
  }
  return r;
}

// Monte Carlo study: generate, fit every source, integrate, score.
inline StudyOutput run_study(const SimDesign& design_in, int replications,
                             const StudyOptions& opts = {}) {
  if (replications < 2) throw ConfigError("a study needs at least two replications");
  SimDesign design = design_in;
  design.finalize();
  const Partition est_part = opts.estimation_partition.value_or(design.partition);
  const std::vector<LabeledPartition> parts{{"estimation", est_part}};

  // Truth under the estimation partition: each group takes the common value
  // of its sources (sources in one estimation group are assumed homogeneous).
  Vec truth(est_part.num_groups() * design.total_p());
  for (int g = 0; g < est_part.num_groups(); ++g) {
    const SourceId first = est_part.group(g).front();
    truth.segment(g * design.total_p(), design.total_p()) =
        design.group_truth(design.partition.group_of(first));
  }

  StudyOutput out;
  out.records.resize(static_cast<std::size_t>(replications));
  parallel_for(
      static_cast<std::size_t>(replications),
      [&](std::size_t rep) {
        ReplicationRecord& rec = out.records[rep];
        try {
          const auto cohorts = generate(design, rep);
          const auto res = run_pipeline(cohorts, parts, opts.pipeline);
          for (const auto& cf : res.cohorts) {
            for (const auto& f : cf.fits) {
              if (!f.converged) ++rec.non_converged;
            }
          }
          const auto& a = res.analyses.front();
          rec.theta = a.result.theta;
          rec.se = a.result.std_errors();
          rec.statistic = a.statistic;
          rec.ok = rec.non_converged == 0;
          if (!rec.ok) rec.error = "non-converged source fit";
        } catch (const Error& e) {
          rec.ok = false;
          rec.error = e.what();
        }
      },
      opts.threads == 0 ? thread_count() : opts.threads);
  out.metrics = summarize(out.records, truth, coefficient_names(design, est_part.num_groups()));
  return out;
}

}  // namespace fedqif
