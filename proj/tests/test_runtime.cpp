#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fedqif/runtime.hpp"
#include "support.hpp"

namespace fedqif {
namespace {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  ScratchDir() {
    static std::atomic<int> counter{0};
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("fedqif_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" +
             std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  [[nodiscard]] const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

SimDesign design(LinkKind link, int K, int J, std::uint64_t n, std::vector<int> m) {
  SimDesign d;
  d.K = K;
  d.J = J;
  d.n.assign(static_cast<std::size_t>(K), n);
  d.m = std::move(m);
  d.p = 3;
  d.link = link;
  d.truth = CorrelationFamily::ar1;
  d.working = BasisFamily::ar1;
  d.partition = Partition::homogeneous(J, K);
  Vec t(3);
  if (link == LinkKind::logit) {
    t << -1.0, 0.6, -0.4;
  } else {
    t << 1.0, -0.5, 0.25;
  }
  d.theta = {t};
  d.seed = 2024;
  d.finalize();
  return d;
}

CohortSummary fitted_summary(const SimDesign& d, int cohort = 1) {
  const auto cohorts = generate(d, 0);
  return worker_fit(cohorts.at(static_cast<std::size_t>(cohort - 1)), SolverControl{}).summary;
}

ScoreMessage fitted_scores(const SimDesign& d) {
  const auto cohorts = generate(d, 0);
  const LabeledPartition lp{"pooled", d.partition};
  std::vector<CohortSummary> summaries;
  for (const auto& c : cohorts) summaries.push_back(worker_fit(c, SolverControl{}).summary);
  const PartitionAnalysis a = coordinate_partition(summaries, lp, IntegrateOptions{});
  return worker_scores(cohorts.front(), lp, a.result);
}

// Small summary with fixed, exactly representable values.
CohortSummary handmade_summary() {
  CohortSummary cs;
  cs.cohort_id = 2;
  cs.n = 37;
  for (int b = 1; b <= 2; ++b) {
    SourceEstimate f;
    f.block = b;
    f.link = b == 1 ? LinkKind::identity : LinkKind::logit;
    f.family = b == 1 ? BasisFamily::independence : BasisFamily::ar1;
    f.s = b == 1 ? 1 : 2;
    f.theta_hat = Vec(2);
    f.theta_hat << 0.5 * b, -0.25;
    f.S_hat = Mat(2 * f.s, 2);
    for (Index r = 0; r < f.S_hat.rows(); ++r) {
      for (Index c = 0; c < 2; ++c) f.S_hat(r, c) = 0.125 * static_cast<double>(r + 1) - 0.5 * c;
    }
    f.q_value = 1.5 * b;
    f.converged = b == 1;
    f.iterations = 3 + b;
    f.dispersion = 2.0;
    cs.fits.push_back(f);
  }
  cs.V = Mat::Identity(6, 6);
  cs.V(0, 3) = cs.V(3, 0) = 0.25;
  cs.V(5, 1) = cs.V(1, 5) = -0.0625;
  return cs;
}

std::vector<std::uint8_t> reseal(std::vector<std::uint8_t> bytes) {
  const std::size_t body = bytes.size() - 8;
  const std::uint64_t sum = fnv1a64(std::span<const std::uint8_t>(bytes.data(), body));
  for (int i = 0; i < 8; ++i) bytes[body + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(sum >> (8 * i));
  return bytes;
}

bool contains_double(const std::vector<std::uint8_t>& bytes, double v) {
  std::uint8_t raw[8];
  std::memcpy(raw, &v, 8);
  for (std::size_t at = 0; at + 8 <= bytes.size(); ++at) {
    if (std::memcmp(bytes.data() + at, raw, 8) == 0) return true;
  }
  return false;
}

fs::path golden_dir() { return fs::path(FEDQIF_GOLDEN_DIR); }

TEST(Wire, SummaryBinaryRoundTripIsBitExact) {
  for (LinkKind link : {LinkKind::identity, LinkKind::logit}) {
    const CohortSummary cs = fitted_summary(design(link, 1, 3, 120, {4, 6, 3}));
    const auto bytes = serialize(cs);
    EXPECT_EQ(deserialize_summary(bytes), cs);
    EXPECT_EQ(serialize(deserialize_summary(bytes)), bytes);
  }
}

TEST(Wire, ScoresBinaryRoundTripIsBitExact) {
  const ScoreMessage msg = fitted_scores(design(LinkKind::logit, 2, 2, 150, {5, 7}));
  const auto bytes = serialize(msg);
  EXPECT_EQ(deserialize_scores(bytes), msg);
  EXPECT_EQ(deserialize_scores(bytes).partition_label, "pooled");
}

TEST(Wire, JsonRoundTripIsBitExact) {
  const CohortSummary cs = fitted_summary(design(LinkKind::logit, 1, 2, 120, {5, 6}));
  EXPECT_EQ(summary_from_json(json::parse(to_json(cs).dump())), cs);
  const ScoreMessage msg = fitted_scores(design(LinkKind::identity, 2, 2, 100, {3, 4}));
  EXPECT_EQ(scores_from_json(json::parse(to_json(msg).dump())), msg);
}

TEST(Wire, FilesRoundTripInBothFormats) {
  ScratchDir dir;
  const CohortSummary cs = handmade_summary();
  write_message(dir.path() / "s.fqif", cs, MessageFormat::binary);
  write_message(dir.path() / "s.json", cs, MessageFormat::json);
  EXPECT_EQ(std::get<CohortSummary>(read_message(dir.path() / "s.fqif")), cs);
  EXPECT_EQ(std::get<CohortSummary>(read_message(dir.path() / "s.json")), cs);
}

TEST(Wire, HeaderLayout) {
  const auto bytes = serialize(handmade_summary());
  ASSERT_GT(bytes.size(), 17u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FQIF");
  EXPECT_EQ(bytes[4], kWireVersion);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(serialize(ScoreMessage{})[8], 2);
}

TEST(Wire, CorruptedPayloadIsRejected) {
  const auto good = serialize(handmade_summary());
  for (std::size_t at : {std::size_t{9}, good.size() / 2, good.size() - 9, good.size() - 1}) {
    auto bad = good;
    bad[at] ^= 0x10;
    try {
      (void)deserialize(bad);
      FAIL() << "flipped byte " << at << " was accepted";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
  }
}

TEST(Wire, BadMagicVersionRoundAndLengthAreRejected) {
  const auto good = serialize(handmade_summary());
  auto magic = good;
  magic[0] = 'X';
  EXPECT_THROW((void)deserialize(reseal(magic)), FormatError);

  auto version = good;
  version[4] = 2;
  try {
    (void)deserialize(reseal(version));
    FAIL() << "version 2 accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }

  auto round = good;
  round[8] = 3;
  EXPECT_THROW((void)deserialize(reseal(round)), FormatError);

  std::vector<std::uint8_t> truncated(good.begin(), good.begin() + 40);
  truncated.resize(48);
  EXPECT_THROW((void)deserialize(reseal(truncated)), FormatError);
  EXPECT_THROW((void)deserialize(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)),
               FormatError);

  auto trailing = good;
  trailing.insert(trailing.end() - 8, std::uint8_t{0});
  EXPECT_THROW((void)deserialize(reseal(trailing)), FormatError);

  EXPECT_THROW((void)deserialize_scores(good), FormatError);
  EXPECT_THROW((void)deserialize_summary(serialize(ScoreMessage{})), FormatError);
}

TEST(Wire, JsonHeaderIsChecked) {
  json j = to_json(handmade_summary());
  j["format_version"] = 7;
  EXPECT_THROW((void)summary_from_json(j), FormatError);
  EXPECT_THROW((void)scores_from_json(to_json(handmade_summary())), FormatError);
}

TEST(Wire, GoldenSummaryBytes) {
  const fs::path golden = golden_dir() / "summary_v1.fqif";
  const auto bytes = serialize(handmade_summary());
  if (std::getenv("FEDQIF_UPDATE_GOLDEN") != nullptr) write_file_bytes(golden, bytes);
  ASSERT_TRUE(fs::exists(golden)) << golden;
  EXPECT_EQ(read_file_bytes(golden), bytes);
  EXPECT_EQ(std::get<CohortSummary>(read_message(golden)), handmade_summary());
}

TEST(Privacy, PayloadSizeDoesNotDependOnN) {
  const auto small = serialize(fitted_summary(design(LinkKind::logit, 1, 3, 100, {4, 6, 8})));
  const auto large = serialize(fitted_summary(design(LinkKind::logit, 1, 3, 10000, {4, 6, 8})));
  EXPECT_EQ(small.size(), large.size());
  const auto s2 = serialize(fitted_scores(design(LinkKind::identity, 2, 2, 100, {3, 5})));
  const auto l2 = serialize(fitted_scores(design(LinkKind::identity, 2, 2, 10000, {3, 5})));
  EXPECT_EQ(s2.size(), l2.size());
}

TEST(Privacy, PayloadsHoldNoRowValues) {
  const SimDesign d = design(LinkKind::identity, 2, 2, 60, {4, 5});
  const auto cohorts = generate(d, 0);
  std::vector<CohortSummary> summaries;
  for (const auto& c : cohorts) summaries.push_back(worker_fit(c, SolverControl{}).summary);
  const LabeledPartition lp{"pooled", d.partition};
  const PartitionAnalysis a = coordinate_partition(summaries, lp, IntegrateOptions{});
  const auto round1 = serialize(summaries.front());
  const auto round2 = serialize(worker_scores(cohorts.front(), lp, a.result));
  const std::string text = to_json(summaries.front()).dump() +
                           to_json(worker_scores(cohorts.front(), lp, a.result)).dump();
  int checked = 0;
  for (const auto& sd : cohorts.front().data) {
    for (const auto& part : sd.participants) {
      for (Index r = 0; r < part.y.size(); ++r) {
        std::vector<double> values{part.y(r)};
        for (Index c = 1; c < part.x.cols(); ++c) values.push_back(part.x(r, c));
        for (double v : values) {
          ASSERT_FALSE(contains_double(round1, v)) << v;
          ASSERT_FALSE(contains_double(round2, v)) << v;
          ASSERT_EQ(text.find(detail::format_double(v)), std::string::npos) << v;
          ++checked;
        }
      }
    }
  }
  EXPECT_GT(checked, 1000);
}

json two_cohort_job(const fs::path& dir) {
  return {{"cohorts",
           {{{"id", 2}, {"blocks", {{{"block", 1}, {"path", "c2_b1.csv"}}}}},
            {{"id", 1}, {"blocks", {{{"block", 1}, {"path", "c1_b1.csv"}}}}}}},
          {"output", {{"dir", dir.string()}}}};
}

TEST(Config, DefaultsAndOrdering) {
  const JobConfig cfg = parse_job_config(two_cohort_job("out"), "/data");
  EXPECT_EQ(cfg.K(), 2);
  EXPECT_EQ(cfg.J(), 1);
  EXPECT_EQ(cfg.cohorts.front().id, 1);
  EXPECT_EQ(cfg.cohorts.front().blocks.front().path, fs::path("/data/c1_b1.csv"));
  ASSERT_EQ(cfg.partitions.size(), 1u);
  EXPECT_EQ(cfg.partitions.front().label, "homogeneous");
  EXPECT_EQ(cfg.partitions.front().partition.num_groups(), 1);
  EXPECT_EQ(cfg.mode, RunMode::monolithic);
  EXPECT_EQ(cfg.message_format, MessageFormat::binary);
  EXPECT_EQ(cfg.output_dir, fs::path("/data/out"));
  EXPECT_FALSE(cfg.second_round);
}

TEST(Config, InvalidJobsAreRejected) {
  auto expect_config_error = [](const json& j, const std::string& fragment) {
    try {
      (void)parse_job_config(j, ".");
      ADD_FAILURE() << "accepted: " << j.dump();
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  json j = two_cohort_job("o");
  j["sedond_round"] = true;
  expect_config_error(j, "sedond_round");

  j = two_cohort_job("o");
  j["cohorts"][0]["id"] = 3;
  expect_config_error(j, "cohort ids");

  j = two_cohort_job("o");
  j["cohorts"][0]["blocks"][0]["block"] = 2;
  expect_config_error(j, "blocks");

  j = two_cohort_job("o");
  j["cohorts"][0]["blocks"][0]["colour"] = "red";
  expect_config_error(j, "colour");

  j = two_cohort_job("o");
  j["partitions"] = {{{"label", "a"}, {"type", "singletons"}}, {{"label", "a"}}};
  expect_config_error(j, "duplicate");

  j = two_cohort_job("o");
  j["partitions"] = {{{"label", "a"}, {"groups", {{{1, 1}}}}}};
  expect_config_error(j, "");

  j = two_cohort_job("o");
  j["partitions"] = {{{"label", "a"}, {"groups", {{{1, 1}, {1, 3}}, {{1, 2}}}}}};
  expect_config_error(j, "");

  j = two_cohort_job("o");
  j["cohort"] = 5;
  expect_config_error(j, "cohort 5");

  j = two_cohort_job("o");
  j["output"]["format"] = "xml";
  expect_config_error(j, "format");

  j = two_cohort_job("o");
  j["solver"] = {{"grad_tol", -1.0}};
  expect_config_error(j, "solver");

  j = two_cohort_job("o");
  j["pca"] = {{"mode", "sometimes"}};
  expect_config_error(j, "PCA");

  j = two_cohort_job("o");
  j["cohorts"][0]["blocks"][0]["link"] = "probit";
  EXPECT_THROW((void)parse_job_config(j, "."), Error);

  j = two_cohort_job("o");
  j.erase("cohorts");
  expect_config_error(j, "no cohorts");
}

TEST(Config, WorkerCohortResolution) {
  json j = two_cohort_job("o");
  const JobConfig cfg = parse_job_config(j, ".");
  EXPECT_THROW((void)resolve_worker_cohort(cfg, std::nullopt), ConfigError);
  EXPECT_EQ(resolve_worker_cohort(cfg, 2), 2);
  EXPECT_THROW((void)resolve_worker_cohort(cfg, 3), ConfigError);
  j["cohort"] = 1;
  EXPECT_EQ(resolve_worker_cohort(parse_job_config(j, "."), std::nullopt), 1);
}

TEST(Csv, RoundTripIsExact) {
  ScratchDir dir;
  std::mt19937_64 rng(5);
  Vec theta(3);
  theta << 0.3, -1.0 / 3.0, 1e-7;
  const SourceData sd =
      testing::random_source(rng, 40, 1, 6, 3, LinkKind::identity, BasisFamily::ar1, theta);
  write_source_csv(dir.path() / "b.csv", sd, {"intercept", "x1", "x2"});
  const SourceTable t = read_source_csv(dir.path() / "b.csv", LinkKind::identity, BasisFamily::ar1);
  EXPECT_EQ(t.covariate_names, (std::vector<std::string>{"intercept", "x1", "x2"}));
  ASSERT_EQ(t.data.n(), sd.n());
  for (std::size_t i = 0; i < sd.participants.size(); ++i) {
    EXPECT_TRUE(same_values(t.data.participants[i].y, sd.participants[i].y));
    EXPECT_TRUE(same_values(t.data.participants[i].x, sd.participants[i].x));
  }
  EXPECT_EQ(t.ids.front(), "1");
}

TEST(Csv, MalformedFilesAreRejected) {
  ScratchDir dir;
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream(dir.path() / name) << body;
    return dir.path() / name;
  };
  EXPECT_THROW((void)read_source_csv(write("a.csv", "id,y\n1,2\n"), LinkKind::identity,
                                     BasisFamily::independence),
               FormatError);
  EXPECT_THROW((void)read_source_csv(write("b.csv", "id,y,x\n1,2\n"), LinkKind::identity,
                                     BasisFamily::independence),
               FormatError);
  EXPECT_THROW((void)read_source_csv(write("c.csv", "id,y,x\n1,2,abc\n"), LinkKind::identity,
                                     BasisFamily::independence),
               FormatError);
  EXPECT_THROW((void)read_source_csv(write("d.csv", "id,y,x\n1,2,1\n2,1,1\n1,0,1\n"),
                                     LinkKind::identity, BasisFamily::independence),
               FormatError);
  EXPECT_THROW((void)read_source_csv(write("e.csv", "id,y,x\n"), LinkKind::identity,
                                     BasisFamily::independence),
               FormatError);
  EXPECT_THROW((void)read_source_csv(dir.path() / "missing.csv", LinkKind::identity,
                                     BasisFamily::independence),
               ConfigError);
}

// Writes one replication of `d` as a job with two partitions.
JobConfig simulated_job(const SimDesign& d, const fs::path& dir, bool second_round,
                        MessageFormat fmt = MessageFormat::binary) {
  StudyConfig sc;
  sc.design = d;
  const fs::path path = write_simulated_job(sc, 0, dir, second_round);
  json j = read_json_file(path);
  j["partitions"] = {{{"label", "pooled"}, {"type", "homogeneous"}},
                     {{"label", "blocks"}, {"type", "by_block"}}};
  j["output"] = {{"dir", "exchange"}, {"format", fmt == MessageFormat::json ? "json" : "binary"}};
  write_json_file(path, j);
  return load_job_config(path);
}

// Worker and coordinator steps over files, as separate processes would run them.
json distributed_report(const JobConfig& cfg) {
  std::vector<CohortSummary> summaries;
  for (const auto& c : cfg.cohorts) {
    const WorkerRound1 r1 = worker_round1(cfg, c.id, cfg.output_dir);
    summaries.push_back(std::get<CohortSummary>(read_message(r1.path)));
  }
  const json first = coordinate(cfg, summaries).report;
  if (!cfg.second_round) return first;
  write_json_file(cfg.output_dir / "round1.json", first);
  const json published = read_json_file(cfg.output_dir / "round1.json");
  std::vector<ScoreMessage> scores;
  for (const auto& c : cfg.cohorts) {
    for (const auto& p : worker_round2(cfg, c.id, published, cfg.output_dir).paths) {
      scores.push_back(std::get<ScoreMessage>(read_message(p)));
    }
  }
  return coordinate(cfg, summaries, scores).report;
}

TEST(Pipeline, DistributedEqualsMonolithic) {
  for (MessageFormat fmt : {MessageFormat::binary, MessageFormat::json}) {
    ScratchDir dir;
    const JobConfig cfg =
        simulated_job(design(LinkKind::logit, 2, 3, 200, {4, 6, 5}), dir.path(), true, fmt);
    const json mono = run_monolithic(cfg).report;
    const json dist = distributed_report(cfg);
    EXPECT_EQ(mono.dump(), dist.dump());
    ASSERT_EQ(mono.at("analyses").size(), 2u);
    for (const auto& a : mono.at("analyses")) EXPECT_FALSE(a.at("statistic").is_null());
  }
}

TEST(Pipeline, WorkerSummaryEqualsInProcessSummary) {
  ScratchDir dir;
  const SimDesign d = design(LinkKind::identity, 2, 2, 150, {3, 5});
  const JobConfig cfg = simulated_job(d, dir.path(), false);
  const auto cohorts = generate(d, 0);
  for (const auto& c : cohorts) {
    const WorkerRound1 r1 = worker_round1(cfg, c.cohort_id, cfg.output_dir);
    EXPECT_EQ(std::get<CohortSummary>(read_message(r1.path)), worker_fit(c, SolverControl{}).summary);
  }
}

TEST(Pipeline, ReportsAreDeterministic) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::logit, 2, 2, 150, {4, 5}), dir.path(), true);
  EXPECT_EQ(run_monolithic(cfg).report.dump(), run_monolithic(cfg).report.dump());
}

TEST(Pipeline, SingleSourceReportMatchesWorkerEstimate) {
  for (LinkKind link : {LinkKind::identity, LinkKind::logit}) {
    ScratchDir dir;
    const JobConfig cfg = simulated_job(design(link, 1, 1, 200, {5}), dir.path(), false);
    const WorkerRound1 r1 = worker_round1(cfg, 1, cfg.output_dir);
    const json report = coordinate(cfg, {r1.summary}).report;
    const Vec theta = detail::json_vector(report.at("analyses").at(0).at("theta"));
    EXPECT_LT((theta - r1.summary.fits.front().theta_hat).cwiseAbs().maxCoeff(), 1e-12);
    const Vec source = detail::json_vector(report.at("sources").at(0).at("theta_hat"));
    EXPECT_TRUE(same_values(source, r1.summary.fits.front().theta_hat));
  }
}

TEST(Pipeline, TwoPartitionsAreRankedByBic) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::logit, 2, 2, 200, {4, 6}), dir.path(), true);
  const json report = run_monolithic(cfg).report;
  ASSERT_TRUE(report.contains("bic_ranking"));
  const auto& ranking = report.at("bic_ranking");
  ASSERT_EQ(ranking.size(), 2u);
  EXPECT_LE(ranking[0].at("bic").get<double>(), ranking[1].at("bic").get<double>());
  std::set<std::string> labels{ranking[0].at("label"), ranking[1].at("label")};
  EXPECT_EQ(labels, (std::set<std::string>{"pooled", "blocks"}));
  for (const auto& a : report.at("analyses")) {
    for (const auto& r : ranking) {
      if (r.at("label") == a.at("label")) {
        EXPECT_EQ(r.at("bic").get<double>(), a.at("statistic").at("bic").get<double>());
      }
    }
  }
}

TEST(Pipeline, FirstRoundOnlyLeavesStatisticsEmpty) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::identity, 2, 2, 100, {3, 4}), dir.path(), false);
  const json report = run_monolithic(cfg).report;
  for (const auto& a : report.at("analyses")) EXPECT_TRUE(a.at("statistic").is_null());
  EXPECT_FALSE(report.contains("bic_ranking"));
  EXPECT_FALSE(report.at("second_round").at("complete").get<bool>());
}

TEST(Pipeline, MissingSummariesNameTheExpectedCohorts) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::identity, 2, 1, 80, {3}), dir.path(), false);
  try {
    (void)coordinate(cfg, {});
    FAIL() << "no summaries accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("expected cohorts 1, 2"), std::string::npos) << e.what();
  }
  const WorkerRound1 r1 = worker_round1(cfg, 2, cfg.output_dir);
  try {
    (void)coordinate(cfg, {r1.summary});
    FAIL() << "one of two summaries accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)coordinate(cfg, {r1.summary, r1.summary}), ConfigError);
}

TEST(Pipeline, IncompleteOrForeignScoresAreRejected) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::identity, 2, 2, 100, {3, 4}), dir.path(), true);
  std::vector<CohortSummary> summaries;
  for (const auto& c : cfg.cohorts) summaries.push_back(worker_round1(cfg, c.id, cfg.output_dir).summary);
  const json report = coordinate(cfg, summaries).report;
  const WorkerRound2 r2 = worker_round2(cfg, 1, report, cfg.output_dir);
  EXPECT_THROW((void)coordinate(cfg, summaries, r2.messages), ConfigError);

  json altered = report;
  altered["analyses"][1]["groups"] = partition_json(Partition::singletons(2, 2));
  EXPECT_THROW((void)worker_round2(cfg, 1, altered, cfg.output_dir), ConfigError);
  altered = report;
  altered["analyses"].erase(0);
  EXPECT_THROW((void)worker_round2(cfg, 1, altered, cfg.output_dir), ConfigError);
}

std::set<std::string> keys_of(const json& j) {
  std::set<std::string> out;
  for (const auto& [k, v] : j.items()) out.insert(k);
  return out;
}

TEST(Report, SchemaMatchesGolden) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::logit, 2, 2, 120, {4, 5}), dir.path(), true);
  const json report = run_monolithic(cfg).report;
  const json golden = read_json_file(golden_dir() / "report_schema.json");
  EXPECT_EQ(report.at("format_version").get<int>(), golden.at("format_version").get<int>());
  EXPECT_EQ(keys_of(report), golden.at("report").get<std::set<std::string>>());
  const json& a = report.at("analyses").at(0);
  EXPECT_EQ(keys_of(a), golden.at("analysis").get<std::set<std::string>>());
  EXPECT_EQ(keys_of(a.at("coefficients").at(0)), golden.at("coefficient").get<std::set<std::string>>());
  EXPECT_EQ(keys_of(a.at("statistic")), golden.at("statistic").get<std::set<std::string>>());
  EXPECT_EQ(keys_of(a.at("diagnostics")), golden.at("diagnostics").get<std::set<std::string>>());
  EXPECT_EQ(keys_of(report.at("sources").at(0)), golden.at("source").get<std::set<std::string>>());
}

TEST(Report, CoefficientRowsAreConsistent) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::logit, 2, 2, 150, {4, 5}), dir.path(), false);
  const json report = run_monolithic(cfg).report;
  const json& a = report.at("analyses").at(1);
  const Vec theta = detail::json_vector(a.at("theta"));
  const Mat cov = detail::json_matrix(a.at("covariance"), theta.size());
  ASSERT_EQ(a.at("coefficients").size(), static_cast<std::size_t>(theta.size()));
  for (std::size_t i = 0; i < a.at("coefficients").size(); ++i) {
    const auto& c = a.at("coefficients")[i];
    const auto at = static_cast<Index>(i);
    const double se = std::sqrt(cov(at, at));
    EXPECT_EQ(c.at("estimate").get<double>(), theta(at));
    EXPECT_NEAR(c.at("std_error").get<double>(), se, 1e-15 * se);
    EXPECT_NEAR(c.at("z").get<double>(), theta(at) / se, 1e-12 * std::abs(theta(at) / se));
    EXPECT_NEAR(c.at("p_value").get<double>(), std::erfc(std::abs(theta(at) / se) / std::sqrt(2.0)),
                1e-15);
  }
  EXPECT_EQ(a.at("coefficients")[3].at("group").get<int>(), 2);
  EXPECT_EQ(a.at("coefficients")[4].at("name").get<std::string>(), "x1");
}

TEST(Report, ForestCsvHasOneRowPerCoefficient) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::identity, 2, 2, 100, {3, 4}), dir.path(), false);
  const json report = run_monolithic(cfg).report;
  write_forest_csv(dir.path() / "forest.csv", report);
  std::ifstream in(dir.path() / "forest.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "partition,group,coefficient,estimate,std_error,lower,upper");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3 + 6);
}

TEST(Report, NestedTestFromReports) {
  ScratchDir dir;
  const JobConfig cfg = simulated_job(design(LinkKind::logit, 2, 2, 200, {4, 6}), dir.path(), true);
  const json report = run_monolithic(cfg).report;
  const PartitionFit fine = partition_fit_from_report(report, "blocks");
  const PartitionFit coarse = partition_fit_from_report(report, "pooled");
  const NestedTestResult r = nested_test(fine, coarse);
  EXPECT_EQ(r.df, 3);
  EXPECT_GE(r.q, 0.0);
  EXPECT_THROW((void)partition_fit_from_report(report, ""), ConfigError);
  EXPECT_THROW((void)partition_fit_from_report(report, "nope"), ConfigError);
  std::vector<CohortSummary> summaries;
  for (const auto& c : cfg.cohorts) summaries.push_back(worker_round1(cfg, c.id, cfg.output_dir).summary);
  const json first = coordinate(cfg, summaries).report;
  EXPECT_THROW((void)partition_fit_from_report(first, "pooled"), ConfigError);
}

TEST(Study, ConfigParsesAndRejectsUnknownKeys) {
  const json j = {{"K", 2}, {"J", 2}, {"n", {50, 60}}, {"m", {3, 4}}, {"theta", {{0.1, 0.2, 0.3}}},
                  {"link", "identity"}, {"truth", "exchangeable"}, {"working", "exchangeable"},
                  {"replications", 5}, {"null_covariate", true}};
  const StudyConfig sc = parse_study_config(j);
  EXPECT_EQ(sc.replications, 5);
  EXPECT_EQ(sc.design.total_p(), 4);
  EXPECT_EQ(sc.design.rho.size(), 4u);
  json bad = j;
  bad["replicates"] = 3;
  EXPECT_THROW((void)parse_study_config(bad), ConfigError);
  bad = j;
  bad["theta"] = {{0.1, 0.2}};
  EXPECT_THROW((void)parse_study_config(bad), ConfigError);
}

}  // namespace
}  // namespace fedqif
