#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedqif/combiner.hpp"
#include "fedqif/fit.hpp"
#include "fedqif/inference.hpp"
#include "fedqif/partition.hpp"
#include "fedqif/summary.hpp"

namespace fedqif {

// Everything one worker holds: the blocks of a single cohort.
struct CohortData {
  int cohort_id = 1;
  std::vector<int> blocks;  // one-based block index of data[b]
  std::vector<SourceData> data;
};

struct LabeledPartition {
  std::string label;
  Partition partition;
};

struct PipelineOptions {
  SolverControl solver;
  IntegrateOptions integrate;
  bool second_round = false;
  unsigned block_threads = 1;  // threads per cohort for the block fits
};

struct PartitionAnalysis {
  std::string label;
  Partition partition;
  MomentSystem system;
  IntegratedResult result;
  std::optional<FitStatistic> statistic;
};

struct PipelineResult {
  std::vector<CohortFit> cohorts;
  std::vector<CohortSummary> summaries;
  std::vector<PartitionAnalysis> analyses;
};

// Round one on a worker.
inline CohortFit worker_fit(const CohortData& cohort, const SolverControl& ctrl,
                           unsigned threads = 1) {
  return fit_cohort(cohort.cohort_id, cohort.blocks, cohort.data, ctrl, threads);
}

// theta_g for the group holding `id`.
inline Vec theta_for_source(const IntegratedResult& result, const Partition& partition,
                            const SourceId& id) {
  return result.group_theta(partition.group_of(id));
}

// Round two on a worker: Psi_jk at the integrated estimate, using the same
// dispersion as round one.
inline ScoreMessage worker_scores(const CohortData& cohort, const LabeledPartition& lp,
                                  const IntegratedResult& result) {
  const Partition& partition = lp.partition;
  ScoreMessage msg;
  msg.cohort_id = cohort.cohort_id;
  msg.partition_label = lp.label;
  msg.n = cohort.data.empty() ? 0 : static_cast<std::uint64_t>(cohort.data.front().n());
  for (std::size_t b = 0; b < cohort.data.size(); ++b) {
    const SourceId id{cohort.blocks[b], cohort.cohort_id};
    const Vec theta = theta_for_source(result, partition, id);
    const double dispersion = independence_glm(cohort.data[b]).dispersion;
    msg.scores.push_back(
        {id.block, evaluate_score(cohort.data[b], theta, dispersion).mean});
  }
  return msg;
}

// Coordinator step for one partition given the round-one summaries and,
// optionally, the round-two score messages.
inline PartitionAnalysis coordinate_partition(std::span<const CohortSummary> summaries,
                                              const LabeledPartition& lp,
                                              const IntegrateOptions& opts) {
  PartitionAnalysis a;
  a.label = lp.label;
  a.partition = lp.partition;
  a.system = build_moment_system(summaries, lp.partition);
  a.result = integrate_system(a.system, opts);
  return a;
}

// Monolithic run: every cohort fitted in-process, then the same coordinator
// code as the distributed path.
inline PipelineResult run_pipeline(std::span<const CohortData> cohorts,
                                   std::span<const LabeledPartition> partitions,
                                   const PipelineOptions& opts) {
  PipelineResult out;
  for (const auto& c : cohorts) {
    out.cohorts.push_back(worker_fit(c, opts.solver, opts.block_threads));
    out.summaries.push_back(out.cohorts.back().summary);
  }
  for (const auto& lp : partitions) {
    PartitionAnalysis a = coordinate_partition(out.summaries, lp, opts.integrate);
    if (opts.second_round) {
      std::vector<ScoreMessage> scores;
      for (const auto& c : cohorts) scores.push_back(worker_scores(c, lp, a.result));
      a.statistic = q_statistic(a.system, a.result, scores);
    }
    out.analyses.push_back(std::move(a));
  }
  return out;
}

// Covariance of a single source's estimate, (S^T C^{-1} S)^{-1} / n_k, with
// C the source's diagonal block of V_k.
inline Mat source_covariance(const CohortSummary& cs, int block) {
  const SourceEstimate& est = cs.fit_for_block(block);
  const Index off = cs.offset_of(block);
  const Mat c = cs.V.block(off, off, est.moment_dim(), est.moment_dim());
  const Eigen::LDLT<Mat> ldlt(c);
  if (ldlt.info() != Eigen::Success) throw NumericalError("source covariance block is singular");
  const Mat info = est.S_hat.transpose() * ldlt.solve(est.S_hat);
  return symmetrized(info.inverse()) / static_cast<double>(cs.n);
}

}  // namespace fedqif
