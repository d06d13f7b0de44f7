// fedqif command line: monolithic fits, worker rounds, coordinator, nested
// tests and simulation studies.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedqif/runtime.hpp"

namespace {

namespace fs = std::filesystem;
using namespace fedqif;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitNonConverged = 4;

int finish(int non_converged) {
  if (non_converged > 0) {
    std::cerr << "warning: " << non_converged
              << " source fit(s) did not converge; output was written with flags\n";
    return kExitNonConverged;
  }
  return kExitOk;
}

fs::path report_path(const JobConfig& cfg, const std::string& out) {
  return out.empty() ? cfg.output_dir / "report.json" : fs::path(out);
}

void write_report(const JobConfig& cfg, const CoordinatorOutput& res, const fs::path& path) {
  write_json_file(path, res.report);
  if (cfg.write_csv) {
    write_forest_csv(path.parent_path() / (path.stem().string() + "_forest.csv"), res.report);
  }
  std::cout << "report written to " << path.string() << '\n';
}

int cmd_fit(const std::string& config, const std::string& out, bool second_round) {
  JobConfig cfg = load_job_config(config);
  cfg.second_round = cfg.second_round || second_round;
  const CoordinatorOutput res = run_monolithic(cfg);
  write_report(cfg, res, report_path(cfg, out));
  return finish(res.non_converged);
}

int cmd_worker(const std::string& config, std::optional<int> cohort, const std::string& estimate,
               const std::string& out) {
  const JobConfig cfg = load_job_config(config);
  const int k = resolve_worker_cohort(cfg, cohort);
  const fs::path dir = out.empty() ? cfg.output_dir : fs::path(out);
  if (!estimate.empty()) {
    const WorkerRound2 r2 = worker_round2(cfg, k, read_json_file(estimate), dir);
    for (const auto& p : r2.paths) std::cout << "round-two scores written to " << p.string() << '\n';
    return kExitOk;
  }
  const WorkerRound1 r1 = worker_round1(cfg, k, dir);
  std::cout << "summary written to " << r1.path.string() << '\n';
  return finish(r1.non_converged);
}

int cmd_combine(const std::string& config, const std::vector<std::string>& summary_files,
                const std::vector<std::string>& score_files, const std::string& out,
                bool second_round) {
  JobConfig cfg = load_job_config(config);
  cfg.second_round = cfg.second_round || second_round;
  std::vector<CohortSummary> summaries;
  for (const auto& f : summary_files) {
    auto msg = read_message(f);
    auto* cs = std::get_if<CohortSummary>(&msg);
    if (cs == nullptr) throw ConfigError(f + " is a round-two message, not a cohort summary");
    summaries.push_back(std::move(*cs));
  }
  std::vector<ScoreMessage> scores;
  for (const auto& f : score_files) {
    auto msg = read_message(f);
    auto* sm = std::get_if<ScoreMessage>(&msg);
    if (sm == nullptr) throw ConfigError(f + " is a cohort summary, not a round-two message");
    scores.push_back(std::move(*sm));
  }
  const CoordinatorOutput res = coordinate(cfg, std::move(summaries), scores);
  write_report(cfg, res, report_path(cfg, out));
  if (cfg.second_round && scores.empty()) {
    std::cout << "second round requested: run each worker with --estimate "
              << report_path(cfg, out).string() << ", then combine again with --scores\n";
  }
  return finish(res.non_converged);
}

// Coordinator mode of `run`: picks up whatever messages sit in the output
// directory.
int cmd_coordinate_dir(const std::string& config, const std::string& out, bool second_round) {
  const JobConfig cfg = load_job_config(config);
  std::vector<std::string> summaries;
  std::vector<std::string> scores;
  for (const auto& c : cfg.cohorts) {
    const fs::path s = cfg.output_dir / summary_file_name(c.id, cfg.message_format);
    if (fs::exists(s)) summaries.push_back(s.string());
    for (std::size_t p = 0; p < cfg.partitions.size(); ++p) {
      const fs::path sc = cfg.output_dir / scores_file_name(c.id, p, cfg.message_format);
      if (fs::exists(sc)) scores.push_back(sc.string());
    }
  }
  return cmd_combine(config, summaries, scores, out, second_round);
}

int cmd_simulate(const std::string& config, std::optional<std::uint64_t> seed,
                 std::optional<int> replications, const std::string& out, bool second_round) {
  StudyConfig sc = parse_study_config(read_json_file(config));
  if (seed) sc.design.seed = *seed;
  if (replications) sc.replications = *replications;
  StudyOptions opts;
  opts.pipeline.second_round = sc.second_round || second_round;
  opts.estimation_partition = sc.estimation_partition;
  const StudyOutput res = run_study(sc.design, sc.replications, opts);
  std::cout << metrics_table(res.metrics);
  for (std::size_t r = 0; r < res.records.size(); ++r) {
    if (!res.records[r].ok) {
      std::cerr << "replication " << r << " excluded: " << res.records[r].error << '\n';
    }
  }
  if (!out.empty()) {
    json j = metrics_json(res.metrics);
    j["seed"] = sc.design.seed;
    if (opts.pipeline.second_round) {
      json q = json::array();
      for (const auto& rec : res.records) {
        if (rec.ok && rec.statistic) q.push_back(rec.statistic->q_n);
      }
      j["q_n"] = q;
      for (const auto& rec : res.records) {
        if (rec.ok && rec.statistic) {
          j["df"] = rec.statistic->df;
          break;
        }
      }
    }
    write_json_file(out, j);
    std::cout << "metrics written to " << out << '\n';
  }
  return res.metrics.failed > 0 ? kExitNonConverged : kExitOk;
}

int cmd_generate(const std::string& config, std::optional<std::uint64_t> seed,
                 std::uint64_t replication, const std::string& out, bool second_round) {
  StudyConfig sc = parse_study_config(read_json_file(config));
  if (seed) sc.design.seed = *seed;
  if (out.empty()) throw ConfigError("generate needs --out DIR");
  const fs::path job = write_simulated_job(sc, replication, out, second_round || sc.second_round);
  std::cout << "data and job config written to " << job.string() << '\n';
  return kExitOk;
}

int cmd_test(const std::string& fine_report, const std::string& fine_label,
             const std::string& coarse_report, const std::string& coarse_label,
             const std::string& out) {
  const PartitionFit fine = partition_fit_from_report(read_json_file(fine_report), fine_label);
  const PartitionFit coarse =
      partition_fit_from_report(read_json_file(coarse_report), coarse_label);
  const NestedTestResult r = nested_test(fine, coarse);
  const json j = nested_test_json(r);
  if (r.clamped) {
    std::cerr << "warning: Q_coarse - Q_fine was negative (" << r.raw_q << "); clamped to 0\n";
  }
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_json_file(out, j);
    std::cout << "test result written to " << out << '\n';
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed quadratic inference functions: fit, combine and test"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "fedqif 0.1.0");

  std::string config;
  std::string out;
  bool second_round = false;
  std::optional<int> cohort;
  std::string estimate;
  std::vector<std::string> summaries;
  std::vector<std::string> scores;
  std::optional<std::uint64_t> seed;
  std::optional<int> replications;
  std::uint64_t replication = 0;
  std::string mode;
  std::string fine, fine_label, coarse, coarse_label;

  auto* fit = app.add_subcommand("fit", "Fit every cohort in-process and integrate");
  fit->add_option("--config", config, "Job config (JSON)")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", out, "Report path (default: <output dir>/report.json)");
  fit->add_flag("--second-round", second_round, "Also compute Q_N and GMM-BIC");

  auto* worker = app.add_subcommand("worker", "Round one (summary) or round two (scores)");
  worker->add_option("--config", config, "Job config (JSON)")->required()->check(CLI::ExistingFile);
  worker->add_option("--cohort", cohort, "Cohort held by this worker");
  worker->add_option("--estimate", estimate, "Coordinator report; runs round two")
      ->check(CLI::ExistingFile);
  worker->add_option("--out", out, "Output directory (default: config output dir)");

  auto* combine = app.add_subcommand("combine", "Coordinator: integrate cohort summaries");
  combine->add_option("--config", config, "Job config (JSON)")->required()->check(CLI::ExistingFile);
  combine->add_option("--summaries", summaries, "Round-one summary files")
      ->check(CLI::ExistingFile);
  combine->add_option("--scores", scores, "Round-two score files")->check(CLI::ExistingFile);
  combine->add_option("--out", out, "Report path (default: <output dir>/report.json)");
  combine->add_flag("--second-round", second_round, "Request the second round");

  auto* run = app.add_subcommand("run", "Run the job in the mode given by the config or --mode");
  run->add_option("--config", config, "Job config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--mode", mode, "monolithic, coordinator or worker")
      ->check(CLI::IsMember({"monolithic", "coordinator", "worker"}));
  run->add_option("--cohort", cohort, "Cohort held by this worker");
  run->add_option("--estimate", estimate, "Coordinator report; worker runs round two")
      ->check(CLI::ExistingFile);
  run->add_option("--out", out, "Report path or worker output directory");
  run->add_flag("--second-round", second_round, "Also compute Q_N and GMM-BIC");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo study from a design file");
  simulate->add_option("--config", config, "Design (JSON)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--seed", seed, "Override the design seed");
  simulate->add_option("--replications", replications, "Override the replication count")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--out", out, "Metrics JSON path");
  simulate->add_flag("--second-round", second_round, "Record Q_N per replication");

  auto* generate = app.add_subcommand("generate", "Write one simulated data set and its job config");
  generate->add_option("--config", config, "Design (JSON)")->required()->check(CLI::ExistingFile);
  generate->add_option("--seed", seed, "Override the design seed");
  generate->add_option("--replication", replication, "Replication index");
  generate->add_option("--out", out, "Output directory")->required();
  generate->add_flag("--second-round", second_round, "Enable the second round in the job");

  auto* test = app.add_subcommand("test", "Nested homogeneity test between two reports");
  test->add_option("--fine", fine, "Report holding the finer partition")
      ->required()
      ->check(CLI::ExistingFile);
  test->add_option("--fine-label", fine_label, "Partition label inside the fine report");
  test->add_option("--coarse", coarse, "Report holding the coarser partition")
      ->required()
      ->check(CLI::ExistingFile);
  test->add_option("--coarse-label", coarse_label, "Partition label inside the coarse report");
  test->add_option("--out", out, "Result path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (fit->parsed()) return cmd_fit(config, out, second_round);
    if (worker->parsed()) return cmd_worker(config, cohort, estimate, out);
    if (combine->parsed()) return cmd_combine(config, summaries, scores, out, second_round);
    if (simulate->parsed()) return cmd_simulate(config, seed, replications, out, second_round);
    if (generate->parsed()) return cmd_generate(config, seed, replication, out, second_round);
    if (test->parsed()) return cmd_test(fine, fine_label, coarse, coarse_label, out);
    if (run->parsed()) {
      const RunMode m = mode.empty() ? load_job_config(config).mode : parse_mode(mode);
      switch (m) {
        case RunMode::monolithic:
          return cmd_fit(config, out, second_round);
        case RunMode::worker:
          return cmd_worker(config, cohort, estimate, out);
        case RunMode::coordinator:
          return cmd_coordinate_dir(config, out, second_round);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumerical;
  }
  return kExitConfig;
}
