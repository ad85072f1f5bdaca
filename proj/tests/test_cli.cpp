#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "prefgrpo/iohub.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kSource = PREFGRPO_SOURCE_DIR;
const std::string kSmoke = kSource + "/configs/smoke.json";

struct Run {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / fmt::format("prefgrpo_cli_{}.log", ::getpid());
  const std::string cmd = fmt::format("'{}' {} > '{}' 2>&1", PREFGRPO_CLI, args, log.string());
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  fs::remove(log);
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / fmt::format("prefgrpo_cli_{}_{}", ::getpid(),
                                                   ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string wd(const fs::path& d) const { return fmt::format("--workdir '{}' --quiet", d.string()); }
  std::string wd() const { return wd(dir); }

  // Smoke-config checkpoint in `d`.
  void train(const fs::path& d, const std::string& extra = "") {
    const auto r = cli(fmt::format("train-fm {} --config '{}' {}", wd(d), kSmoke, extra));
    ASSERT_EQ(r.code, 0) << r.out;
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, TrainFmWritesCheckpoint) {
  train(dir);
  EXPECT_TRUE(fs::exists(dir / "fm_checkpoint.json"));
  EXPECT_TRUE(fs::exists(dir / "fm_metrics.csv"));
  EXPECT_NO_THROW(prefgrpo::load_checkpoint(dir / "fm_checkpoint.json"));
}

TEST_F(Cli, SeedOverrideChangesCheckpoint) {
  train(dir / "a");
  train(dir / "b");
  train(dir / "c", "--seed 99");
  EXPECT_EQ(slurp(dir / "a/fm_checkpoint.json"), slurp(dir / "b/fm_checkpoint.json"));
  EXPECT_NE(slurp(dir / "a/fm_checkpoint.json"), slurp(dir / "c/fm_checkpoint.json"));
}

TEST_F(Cli, BadConfigExitsTwo) {
  std::ofstream(dir / "bad.json") << R"({"schedule": {"noise_scale_a": -1}})";
  const auto r = cli(fmt::format("train-fm {} --config bad.json", wd()));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("ConfigError"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("schedule.noise_scale_a"), std::string::npos) << r.out;

  std::ofstream(dir / "broken.json") << "{\n  \"seed\": \n";
  EXPECT_EQ(cli(fmt::format("train-fm {} --config broken.json", wd())).code, 2);
  EXPECT_EQ(cli("train-fm --no-such-flag").code, 2);
}

TEST_F(Cli, GrpoWritesMetricsColumns) {
  train(dir);
  const auto r = cli(fmt::format("grpo {} --config '{}' --reward-mode pairwise_pref", wd(), kSmoke));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto t = prefgrpo::parse_csv(slurp(dir / "grpo_metrics.csv"));
  EXPECT_TRUE(t.column("sigma_r").has_value());
  EXPECT_TRUE(t.column("amplification").has_value());
  EXPECT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.rows[0][*t.column("reward_mode")], "pairwise_pref");
}

TEST_F(Cli, UnknownRewardModeListsValidModes) {
  train(dir);
  const auto r = cli(fmt::format("grpo {} --config '{}' --reward-mode best", wd(), kSmoke));
  EXPECT_EQ(r.code, 2);
  for (const char* m : {"pointwise", "score_winrate", "pairwise_pref", "pref_plus_score"})
    EXPECT_NE(r.out.find(m), std::string::npos) << r.out;
}

TEST_F(Cli, ZeroIterationsKeepsParameters) {
  train(dir);
  const auto r = cli(fmt::format("grpo {} --config '{}' --iterations 0 --out same.json", wd(), kSmoke));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto in = prefgrpo::load_checkpoint(dir / "fm_checkpoint.json");
  const auto out = prefgrpo::load_checkpoint(dir / "same.json");
  EXPECT_TRUE(in.field.params() == out.field.params());
}

TEST_F(Cli, HackCompareSingleSeedAndResume) {
  train(dir);
  const auto r = cli(fmt::format("hack-compare {} --config '{}' --seeds 1", wd(), kSmoke));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto report_text = slurp(dir / "hack/report.json");
  const auto report = nlohmann::json::parse(report_text);
  EXPECT_EQ(report["seeds"].size(), 1u);
  EXPECT_TRUE(report["delta_moments"]["pointwise.true_quality"]["std"].is_null());
  EXPECT_TRUE(report["seeds"][0]["arms"]["pairwise_pref"]["delta"].contains("true_quality"));
  for (const char* stem : {"reward", "true_quality", "amplification"})
    EXPECT_TRUE(fs::exists(dir / "hack/plots" / fmt::format("seed1_{}.svg", stem))) << stem;

  // Lose one arm and the report, as an interrupted run would.
  fs::remove(dir / "hack/seed1_pairwise_pref.json");
  fs::remove(dir / "hack/report.json");
  const auto again = cli(fmt::format("hack-compare --workdir '{}' --config '{}' --seeds 1 --resume", dir.string(), kSmoke));
  ASSERT_EQ(again.code, 0) << again.out;
  EXPECT_NE(again.out.find("resumed seed1_pointwise"), std::string::npos) << again.out;
  EXPECT_NE(again.out.find("running seed1_pairwise_pref"), std::string::npos) << again.out;
  EXPECT_EQ(slurp(dir / "hack/report.json"), report_text);
}

TEST_F(Cli, HackCompareNeedsCheckpoint) {
  const auto r = cli(fmt::format("hack-compare {} --config '{}' --seeds 1", wd(), kSmoke));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("ContractError"), std::string::npos) << r.out;
}

TEST_F(Cli, BenchEvalStubMatchesFixture) {
  const auto r = cli(fmt::format("bench-eval {} --judge stub --samples '{}/data/bench_fixture_jobs.jsonl' --rules "
                                 "'{}/data/bench_rules.json' --out stub.json --results-out judged.jsonl",
                                 wd(), kSource, kSource));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rep = nlohmann::json::parse(slurp(dir / "stub.json"));
  EXPECT_EQ(rep["sub_dimensions"]["Color"]["score"].get<double>(), 2.0 / 3.0);
  EXPECT_EQ(rep["sub_dimensions"]["Shape"]["score"].get<double>(), 3.0 / 5.0);
  EXPECT_EQ(rep["sub_dimensions"]["Negation"]["score"].get<double>(), 3.0 / 4.0);
  EXPECT_EQ(rep["primary_dimensions"]["Grammar"].get<double>(), 3.0 / 4.0);
  EXPECT_TRUE(rep["primary_dimensions"]["Style"].is_null());
  EXPECT_EQ(slurp(dir / "judged.jsonl"), slurp(kSource + "/data/bench_fixture_results.jsonl"));

  const auto from_results = cli(fmt::format("bench-eval {} --results '{}/data/bench_fixture_results.jsonl' --out "
                                            "packaged.json --taxonomy '{}/data/taxonomy.json'",
                                            wd(), kSource, kSource));
  ASSERT_EQ(from_results.code, 0) << from_results.out;
  EXPECT_EQ(slurp(dir / "packaged.json"), slurp(dir / "stub.json"));
}

TEST_F(Cli, BenchEvalUnreachableJudgeExitsThree) {
  std::ofstream(dir / "fast.json") << R"({"bench": {"judge": {"timeout_ms": 200, "max_retries": 1, "backoff_ms": 1}}})";
  const auto r = cli(fmt::format("bench-eval {} --config fast.json --judge http --url http://127.0.0.1:1 --samples "
                                 "'{}/data/bench_fixture_jobs.jsonl'",
                                 wd(), kSource));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("JudgeUnavailable"), std::string::npos) << r.out;
}

TEST_F(Cli, BenchGenIsDeterministic) {
  ASSERT_EQ(cli(fmt::format("bench-gen {} --count 12 --out a.jsonl", wd())).code, 0);
  ASSERT_EQ(cli(fmt::format("bench-gen {} --count 12 --out b.jsonl", wd())).code, 0);
  const auto a = slurp(dir / "a.jsonl");
  EXPECT_EQ(a, slurp(dir / "b.jsonl"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 12);
}

TEST_F(Cli, PlotFromGrpoMetrics) {
  train(dir);
  ASSERT_EQ(cli(fmt::format("grpo {} --config '{}'", wd(), kSmoke)).code, 0);
  const auto r = cli(fmt::format("plot {}", wd()));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* stem : {"reward", "true_quality", "amplification"})
    EXPECT_TRUE(fs::exists(dir / "plots" / fmt::format("{}.svg", stem)));
  std::ofstream(dir / "empty.csv") << "iteration,mean_reward\n";
  EXPECT_EQ(cli(fmt::format("plot {} --metrics empty.csv", wd())).code, 2);
}

TEST_F(Cli, SelftestPassesAndInjectionFails) {
  const auto ok = cli("selftest");
  EXPECT_EQ(ok.code, 0) << ok.out;
  for (const char* check : {"grad_fm", "grad_grpo", "ode_sde", "winrate_spectrum", "advantage_norm"}) {
    EXPECT_NE(ok.out.find(check), std::string::npos) << check;
  }
  EXPECT_NE(ok.out.find("tolerance"), std::string::npos);
  const auto bad = cli("selftest --inject winrate_spectrum");
  EXPECT_EQ(bad.code, 1) << bad.out;
  EXPECT_NE(bad.out.find("FAIL winrate_spectrum"), std::string::npos) << bad.out;
  EXPECT_EQ(cli("selftest --inject nothing").code, 2);
}

TEST_F(Cli, HelpDocumentsExitCodes) {
  for (const char* sub : {"train-fm", "grpo", "hack-compare", "bench-gen", "bench-eval", "plot", "selftest"}) {
    const auto r = cli(fmt::format("{} --help", sub));
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Exit codes"), std::string::npos) << sub;
  }
}

TEST_F(Cli, ArtifactsIndependentOfJobs) {
  for (const char* jobs : {"1", "3"}) {
    const fs::path d = dir / jobs;
    train(d, fmt::format("--jobs {}", jobs));
    ASSERT_EQ(cli(fmt::format("grpo {} --config '{}' --jobs {}", wd(d), kSmoke, jobs)).code, 0);
    ASSERT_EQ(cli(fmt::format("plot {} --jobs {}", wd(d), jobs)).code, 0);
  }
  for (const char* f : {"fm_checkpoint.json", "fm_metrics.csv", "grpo_checkpoint.json", "grpo_metrics.csv",
                        "plots/reward.svg", "plots/true_quality.svg", "plots/amplification.svg"})
    EXPECT_EQ(slurp(dir / "1" / f), slurp(dir / "3" / f)) << f;
}
