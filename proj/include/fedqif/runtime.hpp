#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedqif/combiner.hpp"
#include "fedqif/errors.hpp"
#include "fedqif/inference.hpp"
#include "fedqif/partition.hpp"
#include "fedqif/pipeline.hpp"
#include "fedqif/serialize.hpp"
#include "fedqif/simgen.hpp"
#include "fedqif/summary.hpp"

namespace fedqif {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kReportVersion = 1;

enum class RunMode { monolithic, coordinator, worker };

inline RunMode parse_mode(std::string_view name) {
  if (name == "monolithic") return RunMode::monolithic;
  if (name == "coordinator") return RunMode::coordinator;
  if (name == "worker") return RunMode::worker;
  throw ConfigError("unknown mode '" + std::string(name) +
                    "' (expected monolithic, coordinator or worker)");
}

inline std::string_view to_string(RunMode m) {
  switch (m) {
    case RunMode::monolithic:
      return "monolithic";
    case RunMode::coordinator:
      return "coordinator";
    case RunMode::worker:
      return "worker";
  }
  return "unknown";
}

enum class MessageFormat { binary, json };

struct BlockInput {
  int block = 1;
  fs::path path;
  LinkKind link = LinkKind::identity;
  BasisFamily basis = BasisFamily::independence;
};

struct CohortInput {
  int id = 1;
  std::vector<BlockInput> blocks;
};

struct JobConfig {
  RunMode mode = RunMode::monolithic;
  std::vector<CohortInput> cohorts;
  std::vector<LabeledPartition> partitions;
  SolverControl solver;
  IntegrateOptions integrate;
  bool second_round = false;
  std::optional<int> worker_cohort;
  std::vector<std::string> covariate_names;  // report labels; numbered when empty
  fs::path output_dir = ".";
  MessageFormat message_format = MessageFormat::binary;
  bool write_csv = false;

  [[nodiscard]] int K() const { return static_cast<int>(cohorts.size()); }
  [[nodiscard]] int J() const {
    return cohorts.empty() ? 0 : static_cast<int>(cohorts.front().blocks.size());
  }

  [[nodiscard]] const CohortInput& cohort(int id) const {
    for (const auto& c : cohorts) {
      if (c.id == id) return c;
    }
    throw ConfigError("cohort " + std::to_string(id) + " is not declared in the config");
  }

  [[nodiscard]] const LabeledPartition& partition(std::string_view label) const {
    for (const auto& p : partitions) {
      if (p.label == label) return p;
    }
    throw ConfigError("no partition labelled '" + std::string(label) + "'");
  }
};

// ---------------------------------------------------------------------------
// Partition specifications, shared by job configs and simulation designs.
//
//   {"label": "pooled", "type": "homogeneous" | "singletons" | "by_block"}
//   {"label": "three", "block_groups": [[1, 2], [3], [4, 5]]}
//   {"label": "custom", "groups": [[[1, 1], [2, 1]], [[1, 2], [2, 2]]]}
//
// In "groups", each pair is [block, cohort].

inline Partition parse_partition(const json& spec, int blocks, int cohorts) {
  if (spec.contains("groups")) {
    std::vector<std::vector<SourceId>> groups;
    for (const auto& g : spec.at("groups")) {
      std::vector<SourceId> ids;
      for (const auto& pair : g) {
        if (!pair.is_array() || pair.size() != 2) {
          throw ConfigError("partition groups list [block, cohort] pairs");
        }
        ids.push_back({pair[0].get<int>(), pair[1].get<int>()});
      }
      groups.push_back(std::move(ids));
    }
    return Partition(blocks, cohorts, std::move(groups));
  }
  if (spec.contains("block_groups")) {
    return Partition::from_block_groups(blocks, cohorts,
                                        spec.at("block_groups").get<std::vector<std::vector<int>>>());
  }
  const std::string type = spec.value("type", "homogeneous");
  if (type == "homogeneous") return Partition::homogeneous(blocks, cohorts);
  if (type == "singletons") return Partition::singletons(blocks, cohorts);
  if (type == "by_block") return Partition::by_block(blocks, cohorts);
  throw ConfigError("unknown partition type '" + type + "'");
}

inline json partition_json(const Partition& p) {
  json groups = json::array();
  for (const auto& g : p.groups()) {
    json ids = json::array();
    for (const auto& id : g) ids.push_back({id.block, id.cohort});
    groups.push_back(std::move(ids));
  }
  return groups;
}

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline PcaMode parse_pca_mode(std::string_view name) {
  if (name == "disabled" || name == "off") return PcaMode::disabled;
  if (name == "fallback") return PcaMode::fallback;
  if (name == "always") return PcaMode::always;
  throw ConfigError("unknown PCA mode '" + std::string(name) +
                    "' (expected disabled, fallback or always)");
}

inline SensitivityKind parse_sensitivity(std::string_view name) {
  if (name == "exact") return SensitivityKind::exact;
  if (name == "expected") return SensitivityKind::expected;
  throw ConfigError("unknown sensitivity '" + std::string(name) +
                    "' (expected exact or expected)");
}

inline void reject_unknown_keys(const json& obj, std::initializer_list<std::string_view> known,
                                std::string_view where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

}  // namespace detail

// Parses a job config; relative data and output paths are taken relative
// to `base_dir`.
inline JobConfig parse_job_config(const json& j, const fs::path& base_dir = ".") {
  try {
    detail::reject_unknown_keys(j,
                                {"mode", "cohorts", "partitions", "solver", "pca",
                                 "second_round", "cohort", "covariate_names", "output"},
                                "job config");
    JobConfig cfg;
    cfg.mode = parse_mode(j.value("mode", "monolithic"));
    if (!j.contains("cohorts") || j.at("cohorts").empty()) {
      throw ConfigError("job config declares no cohorts");
    }
    for (const auto& cj : j.at("cohorts")) {
      detail::reject_unknown_keys(cj, {"id", "blocks"}, "cohort entry");
      CohortInput c;
      c.id = cj.at("id").get<int>();
      for (const auto& bj : cj.at("blocks")) {
        detail::reject_unknown_keys(bj, {"block", "path", "link", "basis"}, "block entry");
        BlockInput b;
        b.block = bj.at("block").get<int>();
        b.path = detail::resolve(base_dir, bj.at("path").get<std::string>());
        b.link = parse_link(bj.value("link", "identity"));
        b.basis = parse_basis(bj.value("basis", "independence"));
        c.blocks.push_back(std::move(b));
      }
      cfg.cohorts.push_back(std::move(c));
    }
    std::sort(cfg.cohorts.begin(), cfg.cohorts.end(),
              [](const CohortInput& a, const CohortInput& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < cfg.cohorts.size(); ++i) {
      auto& c = cfg.cohorts[i];
      if (c.id != static_cast<int>(i) + 1) {
        throw ConfigError("cohort ids must be 1.." + std::to_string(cfg.cohorts.size()));
      }
      std::sort(c.blocks.begin(), c.blocks.end(),
                [](const BlockInput& a, const BlockInput& b) { return a.block < b.block; });
      if (c.blocks.size() != cfg.cohorts.front().blocks.size()) {
        throw ConfigError("every cohort must declare the same blocks");
      }
      for (std::size_t b = 0; b < c.blocks.size(); ++b) {
        if (c.blocks[b].block != static_cast<int>(b) + 1) {
          throw ConfigError("cohort " + std::to_string(c.id) + " must declare blocks 1.." +
                            std::to_string(c.blocks.size()));
        }
      }
    }
    if (j.contains("partitions")) {
      std::set<std::string> labels;
      for (const auto& pj : j.at("partitions")) {
        detail::reject_unknown_keys(pj, {"label", "type", "block_groups", "groups"},
                                    "partition entry");
        LabeledPartition lp;
        lp.label = pj.at("label").get<std::string>();
        if (!labels.insert(lp.label).second) {
          throw ConfigError("duplicate partition label '" + lp.label + "'");
        }
        lp.partition = parse_partition(pj, cfg.J(), cfg.K());
        cfg.partitions.push_back(std::move(lp));
      }
    }
    if (cfg.partitions.empty()) {
      cfg.partitions.push_back({"homogeneous", Partition::homogeneous(cfg.J(), cfg.K())});
    }
    if (j.contains("solver")) {
      const auto& sj = j.at("solver");
      detail::reject_unknown_keys(sj, {"max_iter", "grad_tol", "max_halvings", "sensitivity"},
                                  "solver");
      cfg.solver.max_iter = sj.value("max_iter", cfg.solver.max_iter);
      cfg.solver.grad_tol = sj.value("grad_tol", cfg.solver.grad_tol);
      cfg.solver.max_halvings = sj.value("max_halvings", cfg.solver.max_halvings);
      cfg.solver.sensitivity = detail::parse_sensitivity(sj.value("sensitivity", "exact"));
      if (cfg.solver.max_iter < 0 || cfg.solver.max_halvings < 0 ||
          !(cfg.solver.grad_tol > 0.0)) {
        throw ConfigError("solver controls must be positive");
      }
    }
    if (j.contains("pca")) {
      const auto& pj = j.at("pca");
      detail::reject_unknown_keys(pj, {"mode", "threshold"}, "pca");
      cfg.integrate.pca = detail::parse_pca_mode(pj.value("mode", "fallback"));
      cfg.integrate.pca_threshold = pj.value("threshold", cfg.integrate.pca_threshold);
    }
    cfg.second_round = j.value("second_round", false);
    if (j.contains("cohort")) cfg.worker_cohort = j.at("cohort").get<int>();
    if (j.contains("covariate_names")) {
      cfg.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
    }
    if (j.contains("output")) {
      const auto& oj = j.at("output");
      detail::reject_unknown_keys(oj, {"dir", "format", "csv"}, "output");
      cfg.output_dir = detail::resolve(base_dir, oj.value("dir", "."));
      const std::string fmt = oj.value("format", "binary");
      if (fmt == "binary") {
        cfg.message_format = MessageFormat::binary;
      } else if (fmt == "json") {
        cfg.message_format = MessageFormat::json;
      } else {
        throw ConfigError("output.format must be binary or json");
      }
      cfg.write_csv = oj.value("csv", false);
    } else {
      cfg.output_dir = base_dir;
    }
    if (cfg.worker_cohort) (void)cfg.cohort(*cfg.worker_cohort);
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed job config: ") + e.what());
  }
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw ConfigError("failed writing " + path.string());
}

inline JobConfig load_job_config(const fs::path& path) {
  return parse_job_config(read_json_file(path), path.parent_path().empty()
                                                    ? fs::path(".")
                                                    : path.parent_path());
}

// ---------------------------------------------------------------------------
// Long-format CSV: header "id,y,<covariate>...", one row per outcome, the
// rows of a participant contiguous and in outcome order.

struct SourceTable {
  SourceData data;
  std::vector<std::string> ids;
  std::vector<std::string> covariate_names;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view cell = line.substr(start, comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) {
      cell.remove_suffix(1);
    }
    out.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_double(std::string_view cell, const fs::path& path, std::size_t line) {
  double v = 0.0;
  const auto* end = cell.data() + cell.size();
  const auto res = std::from_chars(cell.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw FormatError(path.string() + ":" + std::to_string(line) + ": '" +
                      std::string(cell) + "' is not a number");
  }
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

}  // namespace detail

inline SourceTable read_source_csv(const fs::path& path, LinkKind link, BasisFamily basis) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open data file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3) {
    throw FormatError(path.string() + ": header needs id, y and at least one covariate");
  }
  SourceTable t;
  for (std::size_t c = 2; c < header.size(); ++c) t.covariate_names.emplace_back(header[c]);
  const Index p = static_cast<Index>(header.size() - 2);

  std::vector<std::vector<double>> rows;
  std::string current;
  std::set<std::string> finished;
  std::size_t line_no = 1;
  auto flush = [&] {
    if (rows.empty()) return;
    Participant part;
    const Index m = static_cast<Index>(rows.size());
    part.y.resize(m);
    part.x.resize(m, p);
    for (Index r = 0; r < m; ++r) {
      part.y(r) = rows[static_cast<std::size_t>(r)][0];
      for (Index c = 0; c < p; ++c) part.x(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c) + 1];
    }
    t.data.participants.push_back(std::move(part));
    t.ids.push_back(current);
    finished.insert(current);
    rows.clear();
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields, found " +
                        std::to_string(cells.size()));
    }
    const std::string id(cells[0]);
    if (id != current) {
      flush();
      if (finished.count(id) != 0) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": rows of participant '" +
                          id + "' are not contiguous");
      }
      current = id;
    }
    std::vector<double> values;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      values.push_back(detail::parse_double(cells[c], path, line_no));
    }
    rows.push_back(std::move(values));
  }
  flush();
  if (t.data.participants.empty()) throw FormatError(path.string() + ": no data rows");
  t.data.link = LinkFunction{link};
  t.data.basis = BasisSet(basis);
  return t;
}

inline void write_source_csv(const fs::path& path, const SourceData& data,
                             const std::vector<std::string>& covariate_names) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "id,y";
  for (const auto& name : covariate_names) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < data.participants.size(); ++i) {
    const auto& part = data.participants[i];
    for (Index r = 0; r < part.y.size(); ++r) {
      out << (i + 1) << ',' << detail::format_double(part.y(r));
      for (Index c = 0; c < part.x.cols(); ++c) out << ',' << detail::format_double(part.x(r, c));
      out << '\n';
    }
  }
  if (!out) throw ConfigError("failed writing " + path.string());
}

struct LoadedCohort {
  CohortData cohort;
  std::vector<std::string> covariate_names;
};

// Reads every block of one cohort and checks that they share participants.
inline LoadedCohort load_cohort(const JobConfig& cfg, int cohort_id) {
  const CohortInput& input = cfg.cohort(cohort_id);
  LoadedCohort out;
  out.cohort.cohort_id = cohort_id;
  std::vector<std::string> ids;
  for (const auto& b : input.blocks) {
    SourceTable t = read_source_csv(b.path, b.link, b.basis);
    if (out.cohort.data.empty()) {
      ids = t.ids;
      out.covariate_names = t.covariate_names;
    } else {
      if (t.ids != ids) {
        throw ConfigError("blocks of cohort " + std::to_string(cohort_id) +
                          " must list the same participants in the same order (" +
                          b.path.string() + " differs)");
      }
      if (t.covariate_names.size() != out.covariate_names.size()) {
        throw ConfigError(b.path.string() + " has a different number of covariates");
      }
    }
    t.data.validate();
    out.cohort.blocks.push_back(b.block);
    out.cohort.data.push_back(std::move(t.data));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Worker side.

inline std::string summary_file_name(int cohort, MessageFormat fmt) {
  return "summary_c" + std::to_string(cohort) + (fmt == MessageFormat::json ? ".json" : ".fqif");
}

inline std::string scores_file_name(int cohort, std::size_t partition_index,
                                    MessageFormat fmt) {
  return "scores_c" + std::to_string(cohort) + "_p" + std::to_string(partition_index + 1) +
         (fmt == MessageFormat::json ? ".json" : ".fqif");
}

inline void write_message(const fs::path& path, const CohortSummary& cs, MessageFormat fmt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (fmt == MessageFormat::json) {
    write_json_file(path, to_json(cs));
  } else {
    write_file_bytes(path, serialize(cs));
  }
}

inline void write_message(const fs::path& path, const ScoreMessage& msg, MessageFormat fmt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (fmt == MessageFormat::json) {
    write_json_file(path, to_json(msg));
  } else {
    write_file_bytes(path, serialize(msg));
  }
}

inline int resolve_worker_cohort(const JobConfig& cfg, std::optional<int> cohort) {
  if (cohort) {
    (void)cfg.cohort(*cohort);
    return *cohort;
  }
  if (cfg.worker_cohort) return *cfg.worker_cohort;
  if (cfg.K() == 1) return 1;
  throw ConfigError("worker mode needs exactly one cohort; pass --cohort or set \"cohort\"");
}

struct WorkerRound1 {
  CohortSummary summary;
  fs::path path;
  int non_converged = 0;
};

inline WorkerRound1 worker_round1(const JobConfig& cfg, int cohort_id, const fs::path& out_dir) {
  const LoadedCohort lc = load_cohort(cfg, cohort_id);
  const CohortFit cf = worker_fit(lc.cohort, cfg.solver, thread_count());
  WorkerRound1 out;
  out.summary = cf.summary;
  for (const auto& f : cf.fits) {
    if (!f.converged) ++out.non_converged;
  }
  out.path = out_dir / summary_file_name(cohort_id, cfg.message_format);
  write_message(out.path, out.summary, cfg.message_format);
  return out;
}

// The integrated estimate of one partition as published in a report.
inline IntegratedResult estimate_from_report(const json& analysis) {
  IntegratedResult r;
  r.G = analysis.at("G").get<int>();
  r.p = analysis.at("p").get<Index>();
  r.N = analysis.at("N").get<std::uint64_t>();
  r.theta = detail::json_vector(analysis.at("theta"));
  if (r.theta.size() != r.G * r.p) throw FormatError("report theta has the wrong length");
  return r;
}

struct WorkerRound2 {
  std::vector<ScoreMessage> messages;
  std::vector<fs::path> paths;
};

// Round two: scores at the published estimate of every partition in `report`.
inline WorkerRound2 worker_round2(const JobConfig& cfg, int cohort_id, const json& report,
                                  const fs::path& out_dir) {
  const LoadedCohort lc = load_cohort(cfg, cohort_id);
  WorkerRound2 out;
  const auto& analyses = report.at("analyses");
  for (std::size_t a = 0; a < cfg.partitions.size(); ++a) {
    const auto& lp = cfg.partitions[a];
    const json* match = nullptr;
    for (const auto& an : analyses) {
      if (an.at("label").get<std::string>() == lp.label) match = &an;
    }
    if (match == nullptr) {
      throw ConfigError("report has no estimate for partition '" + lp.label + "'");
    }
    const Partition published =
        parse_partition(json{{"groups", match->at("groups")}}, cfg.J(), cfg.K());
    if (!(published == lp.partition)) {
      throw ConfigError("partition '" + lp.label + "' in the report differs from the config");
    }
    const IntegratedResult est = estimate_from_report(*match);
    out.messages.push_back(worker_scores(lc.cohort, lp, est));
    out.paths.push_back(out_dir / scores_file_name(cohort_id, a, cfg.message_format));
    write_message(out.paths.back(), out.messages.back(), cfg.message_format);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Coordinator side and the JSON report.

inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

inline std::vector<std::string> coefficient_labels(const std::vector<std::string>& names,
                                                   Index p) {
  std::vector<std::string> out;
  for (Index c = 0; c < p; ++c) {
    if (static_cast<std::size_t>(c) < names.size()) {
      out.push_back(names[static_cast<std::size_t>(c)]);
    } else {
      out.push_back("x" + std::to_string(c));
    }
  }
  return out;
}

inline json statistic_json(const std::optional<FitStatistic>& st) {
  if (!st) return nullptr;
  json j{{"q_n", st->q_n}, {"df", st->df}, {"bic", st->bic}, {"N", st->N}, {"G", st->G}};
  j["p_value"] = st->p_value ? json(*st->p_value) : json(nullptr);
  return j;
}

inline json analysis_json(const PartitionAnalysis& a, const std::vector<std::string>& names) {
  const IntegratedResult& r = a.result;
  json j;
  j["label"] = a.label;
  j["G"] = r.G;
  j["p"] = r.p;
  j["N"] = r.N;
  j["groups"] = partition_json(a.partition);
  j["theta"] = detail::vector_json(r.theta);
  j["covariance"] = detail::matrix_json(r.covariance);
  const auto labels = coefficient_labels(names, r.p);
  const Vec se = r.std_errors();
  j["coefficients"] = json::array();
  for (int g = 0; g < r.G; ++g) {
    for (Index c = 0; c < r.p; ++c) {
      const Index at = g * r.p + c;
      const double z = r.theta(at) / se(at);
      j["coefficients"].push_back({{"group", g + 1},
                                   {"name", labels[static_cast<std::size_t>(c)]},
                                   {"estimate", r.theta(at)},
                                   {"std_error", se(at)},
                                   {"z", z},
                                   {"p_value", normal_two_sided_p(z)}});
    }
  }
  j["moment_dim"] = r.moment_dim;
  j["effective_moment_dim"] = r.effective_moment_dim();
  j["pca_rank"] = r.pca_rank ? json(*r.pca_rank) : json(nullptr);
  j["statistic"] = statistic_json(a.statistic);
  const auto& d = r.diagnostics;
  j["diagnostics"] = {{"min_weight_rcond", d.min_weight_rcond},
                      {"pca_applied", d.pca_applied},
                      {"information_rcond", d.information_rcond},
                      {"covariance_asymmetry", d.covariance_asymmetry},
                      {"warnings", d.warnings}};
  if (r.pca_rank) j["diagnostics"]["explained_variance"] = detail::vector_json(r.explained_variance);
  return j;
}

struct CoordinatorOutput {
  json report;
  std::vector<PartitionAnalysis> analyses;
  int non_converged = 0;
};

inline json build_report(const JobConfig& cfg, std::span<const CohortSummary> summaries,
                         const std::vector<PartitionAnalysis>& analyses,
                         const std::vector<std::string>& names, bool round2_complete) {
  json rep;
  rep["format"] = "fedqif-report";
  rep["format_version"] = kReportVersion;
  rep["J"] = cfg.J();
  rep["K"] = cfg.K();
  rep["N"] = total_participants(summaries);
  rep["cohorts"] = json::array();
  rep["sources"] = json::array();
  std::vector<std::string> warnings;
  for (const auto& cs : summaries) {
    rep["cohorts"].push_back({{"cohort", cs.cohort_id}, {"n", cs.n}});
    for (const auto& f : cs.fits) {
      rep["sources"].push_back({{"block", f.block},
                                {"cohort", cs.cohort_id},
                                {"link", std::string(to_string(f.link))},
                                {"basis", std::string(to_string(f.family))},
                                {"theta_hat", detail::vector_json(f.theta_hat)},
                                {"q", f.q_value},
                                {"converged", f.converged},
                                {"iterations", f.iterations}});
      if (!f.converged) {
        warnings.push_back("source " + to_string(SourceId{f.block, cs.cohort_id}) +
                           " did not converge");
      }
    }
  }
  rep["analyses"] = json::array();
  std::vector<BicCandidate> candidates;
  for (const auto& a : analyses) {
    rep["analyses"].push_back(analysis_json(a, names));
    if (a.statistic) candidates.push_back({a.label, a.partition, *a.statistic});
  }
  if (candidates.size() >= 2) {
    json ranking = json::array();
    for (const auto& c : compare_bic(candidates)) {
      ranking.push_back({{"label", c.label}, {"bic", c.statistic.bic}});
    }
    rep["bic_ranking"] = ranking;
  }
  rep["second_round"] = {{"requested", cfg.second_round}, {"complete", round2_complete}};
  rep["warnings"] = warnings;
  return rep;
}

// Integrates every configured partition; when score messages are supplied,
// also computes Q_N for each partition that has a full set of them.
inline CoordinatorOutput coordinate(const JobConfig& cfg,
                                    std::vector<CohortSummary> summaries,
                                    const std::vector<ScoreMessage>& scores = {}) {
  std::set<int> present;
  for (const auto& cs : summaries) {
    if (!present.insert(cs.cohort_id).second) {
      throw ConfigError("two summaries for cohort " + std::to_string(cs.cohort_id));
    }
  }
  std::vector<int> missing;
  for (const auto& c : cfg.cohorts) {
    if (present.count(c.id) == 0) missing.push_back(c.id);
  }
  if (!missing.empty()) {
    std::string expected;
    for (const auto& c : cfg.cohorts) {
      expected += (expected.empty() ? "" : ", ") + std::to_string(c.id);
    }
    std::string absent;
    for (int k : missing) absent += (absent.empty() ? "" : ", ") + std::to_string(k);
    throw ConfigError("missing cohort summaries; expected cohorts " + expected +
                      ", missing " + absent);
  }
  for (const auto& cs : summaries) {
    if (cs.cohort_id < 1 || cs.cohort_id > cfg.K()) {
      throw ConfigError("summary for undeclared cohort " + std::to_string(cs.cohort_id));
    }
  }
  std::sort(summaries.begin(), summaries.end(),
            [](const CohortSummary& a, const CohortSummary& b) { return a.cohort_id < b.cohort_id; });

  CoordinatorOutput out;
  for (const auto& cs : summaries) {
    for (const auto& f : cs.fits) {
      if (!f.converged) ++out.non_converged;
    }
  }
  bool complete = !scores.empty();
  for (const auto& lp : cfg.partitions) {
    PartitionAnalysis a;
    try {
      a = coordinate_partition(summaries, lp, cfg.integrate);
    } catch (const NumericalError& e) {
      throw NumericalError("partition '" + lp.label + "': " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("partition '" + lp.label + "': " + e.what());
    }
    if (!scores.empty()) {
      std::vector<ScoreMessage> mine;
      for (const auto& s : scores) {
        if (s.partition_label == lp.label) mine.push_back(s);
      }
      if (mine.size() != summaries.size()) {
        throw ConfigError("partition '" + lp.label + "' has round-two scores from " +
                          std::to_string(mine.size()) + " of " +
                          std::to_string(summaries.size()) + " cohorts");
      }
      a.statistic = q_statistic(a.system, a.result, mine);
    }
    out.analyses.push_back(std::move(a));
  }
  const std::vector<std::string> names = cfg.covariate_names;
  out.report = build_report(cfg, summaries, out.analyses, names, complete);
  return out;
}

// In-process run with the same coordinator code; scores go through the
// same message type as the distributed path.
inline CoordinatorOutput run_monolithic(const JobConfig& cfg) {
  std::vector<LoadedCohort> loaded;
  std::vector<CohortSummary> summaries;
  for (const auto& c : cfg.cohorts) {
    loaded.push_back(load_cohort(cfg, c.id));
    summaries.push_back(worker_fit(loaded.back().cohort, cfg.solver, thread_count()).summary);
  }
  CoordinatorOutput first = coordinate(cfg, summaries);
  if (!cfg.second_round) return first;
  std::vector<ScoreMessage> scores;
  for (const auto& lp : cfg.partitions) {
    const PartitionAnalysis* match = nullptr;
    for (const auto& a : first.analyses) {
      if (a.label == lp.label) match = &a;
    }
    for (const auto& lc : loaded) scores.push_back(worker_scores(lc.cohort, lp, match->result));
  }
  return coordinate(cfg, summaries, scores);
}

inline void write_forest_csv(const fs::path& path, const json& report) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "partition,group,coefficient,estimate,std_error,lower,upper\n";
  for (const auto& a : report.at("analyses")) {
    for (const auto& c : a.at("coefficients")) {
      const double est = c.at("estimate").get<double>();
      const double se = c.at("std_error").get<double>();
      out << a.at("label").get<std::string>() << ',' << c.at("group").get<int>() << ','
          << c.at("name").get<std::string>() << ',' << detail::format_double(est) << ','
          << detail::format_double(se) << ','
          << detail::format_double(est - kNormal975 * se) << ','
          << detail::format_double(est + kNormal975 * se) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Nested comparison of two reported partitions.

inline PartitionFit partition_fit_from_report(const json& report, const std::string& label) {
  try {
    const auto& analyses = report.at("analyses");
    const json* match = nullptr;
    if (label.empty()) {
      if (analyses.size() != 1) {
        throw ConfigError("report holds " + std::to_string(analyses.size()) +
                          " partitions; name one");
      }
      match = &analyses.front();
    } else {
      for (const auto& a : analyses) {
        if (a.at("label").get<std::string>() == label) match = &a;
      }
      if (match == nullptr) throw ConfigError("report has no partition labelled '" + label + "'");
    }
    PartitionFit fit;
    fit.label = match->at("label").get<std::string>();
    fit.partition = parse_partition(json{{"groups", match->at("groups")}},
                                    report.at("J").get<int>(), report.at("K").get<int>());
    fit.p = match->at("p").get<Index>();
    const auto& st = match->at("statistic");
    if (st.is_null()) {
      throw ConfigError("partition '" + fit.label +
                        "' has no Q_N; rerun it with the second round enabled");
    }
    fit.statistic.q_n = st.at("q_n").get<double>();
    fit.statistic.df = st.at("df").get<int>();
    fit.statistic.bic = st.at("bic").get<double>();
    fit.statistic.N = st.at("N").get<std::uint64_t>();
    fit.statistic.G = st.at("G").get<int>();
    for (const auto& s : report.at("sources")) {
      fit.signature[{s.at("block").get<int>(), s.at("cohort").get<int>()}] = {
          parse_link(s.at("link").get<std::string>()),
          parse_basis(s.at("basis").get<std::string>())};
    }
    return fit;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

inline json nested_test_json(const NestedTestResult& r) {
  json j{{"fine", r.fine_label},       {"coarse", r.coarse_label}, {"q", r.q},
         {"raw_q", r.raw_q},           {"df", r.df},               {"clamped", r.clamped}};
  j["p_value"] = r.p_value ? json(*r.p_value) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Simulation designs.
//
//   {"K": 2, "J": 4, "n": [500, 500], "m": [8, 10, 14, 18], "p": 3,
//    "null_covariate": true, "link": "logit", "truth": "ar1", "working": "ar1",
//    "theta": [[-4.44, 1.11, -2.22]], "partition": {"type": "homogeneous"},
//    "rho": [...], "sigma2": [...], "covariate_correlation": 0.3,
//    "cross_block_correlation": 0.0, "seed": 1, "replications": 200,
//    "second_round": false}

struct StudyConfig {
  SimDesign design;
  int replications = 2;
  bool second_round = false;
  std::optional<Partition> estimation_partition;
};

inline StudyConfig parse_study_config(const json& j) {
  try {
    detail::reject_unknown_keys(
        j,
        {"K", "J", "n", "m", "p", "null_covariate", "link", "truth", "working", "theta",
         "partition", "estimation_partition", "rho", "sigma2", "covariate_correlation",
         "cross_block_correlation", "seed", "replications", "second_round", "description"},
        "design");
    StudyConfig sc;
    SimDesign& d = sc.design;
    d.K = j.at("K").get<int>();
    d.J = j.at("J").get<int>();
    d.n = j.at("n").get<std::vector<std::uint64_t>>();
    d.m = j.at("m").get<std::vector<int>>();
    d.p = j.value("p", 3);
    d.null_covariate = j.value("null_covariate", false);
    d.link = parse_link(j.value("link", "logit"));
    d.truth = parse_correlation(j.value("truth", "ar1"));
    d.working = parse_basis(j.value("working", "ar1"));
    for (const auto& t : j.at("theta")) {
      const auto v = t.get<std::vector<double>>();
      d.theta.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size())));
    }
    if (d.K < 1 || d.J < 1) throw ConfigError("design needs K >= 1 and J >= 1");
    d.partition = parse_partition(j.value("partition", json::object()), d.J, d.K);
    if (j.contains("estimation_partition")) {
      sc.estimation_partition = parse_partition(j.at("estimation_partition"), d.J, d.K);
    }
    if (j.contains("rho") && !j.at("rho").is_null()) d.rho = j.at("rho").get<std::vector<double>>();
    if (j.contains("sigma2") && !j.at("sigma2").is_null()) {
      d.sigma2 = j.at("sigma2").get<std::vector<double>>();
    }
    d.covariate_correlation = j.value("covariate_correlation", d.covariate_correlation);
    d.cross_block_correlation = j.value("cross_block_correlation", d.cross_block_correlation);
    d.seed = j.value("seed", std::uint64_t{1});
    sc.replications = j.value("replications", 2);
    sc.second_round = j.value("second_round", false);
    d.finalize();
    return sc;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed design: ") + e.what());
  }
}

inline json metrics_json(const MetricsReport& m) {
  json rows = json::array();
  for (std::size_t c = 0; c < m.names.size(); ++c) {
    const auto at = static_cast<Index>(c);
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    rows.push_back({{"name", m.names[c]},
                    {"truth", m.truth(at)},
                    {"rmse", num(m.rmse(at))},
                    {"ese", num(m.ese(at))},
                    {"ase", num(m.ase(at))},
                    {"bias", num(m.bias(at))},
                    {"coverage", num(m.coverage(at))},
                    {"length", num(m.length(at))},
                    {"err", m.err[c] ? json(*m.err[c]) : json(nullptr)},
                    {"degenerate", static_cast<bool>(m.degenerate[c])}});
  }
  return {{"coefficients", rows},
          {"replications", m.replications},
          {"used", m.used},
          {"failed", m.failed}};
}

inline std::string metrics_table(const MetricsReport& m) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  auto cell = [&](double v) {
    std::ostringstream c;
    c.setf(std::ios::fixed);
    c.precision(4);
    if (std::isfinite(v)) {
      c << v;
    } else {
      c << "-";
    }
    std::string s = c.str();
    return std::string(s.size() < 10 ? 10 - s.size() : 0, ' ') + s;
  };
  os << "coefficient        truth      RMSE       ESE       ASE         B        CI         L       ERR\n";
  for (std::size_t c = 0; c < m.names.size(); ++c) {
    const auto at = static_cast<Index>(c);
    std::string name = m.names[c];
    name.resize(std::max<std::size_t>(name.size(), 14), ' ');
    os << name << cell(m.truth(at)) << cell(m.rmse(at)) << cell(m.ese(at)) << cell(m.ase(at))
       << cell(m.bias(at)) << cell(m.coverage(at)) << cell(m.length(at))
       << cell(m.err[c] ? *m.err[c] : std::nan("")) << '\n';
  }
  os << "replications " << m.replications << ", used " << m.used << ", failed " << m.failed
     << '\n';
  return os.str();
}

// Writes one simulated replication as CSV files plus a job config that fits
// it; returns the config path.
inline fs::path write_simulated_job(const StudyConfig& sc, std::uint64_t replication,
                                    const fs::path& dir, bool second_round) {
  const SimDesign& d = sc.design;
  const auto cohorts = generate(d, replication);
  std::vector<std::string> names{"intercept"};
  for (int c = 1; c < d.p; ++c) names.push_back("x" + std::to_string(c));
  if (d.null_covariate) names.push_back("null");
  json cfg;
  cfg["mode"] = "monolithic";
  cfg["cohorts"] = json::array();
  for (const auto& c : cohorts) {
    json blocks = json::array();
    for (std::size_t b = 0; b < c.data.size(); ++b) {
      const std::string file =
          "c" + std::to_string(c.cohort_id) + "_b" + std::to_string(c.blocks[b]) + ".csv";
      write_source_csv(dir / file, c.data[b], names);
      blocks.push_back({{"block", c.blocks[b]},
                        {"path", file},
                        {"link", std::string(to_string(d.link))},
                        {"basis", std::string(to_string(d.working))}});
    }
    cfg["cohorts"].push_back({{"id", c.cohort_id}, {"blocks", blocks}});
  }
  const Partition est = sc.estimation_partition.value_or(d.partition);
  cfg["partitions"] = json::array({{{"label", "design"}, {"groups", partition_json(est)}}});
  cfg["second_round"] = second_round;
  cfg["covariate_names"] = names;
  const fs::path path = dir / "job.json";
  write_json_file(path, cfg);
  return path;
}

}  // namespace fedqif
