#include <gtest/gtest.h>

#include <regex>

#include "prefgrpo/iohub.hpp"

using namespace prefgrpo;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / fmt::format("prefgrpo_iohub_{}", ::testing::UnitTest::GetInstance()->random_seed());
    path /= ::testing::UnitTest::GetInstance()->current_test_info()->name();
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

GrpoIterationMetrics row(std::size_t i, double reward) {
  GrpoIterationMetrics m;
  m.iteration = i;
  m.reward_mode = RewardMode::pointwise;
  m.mean_reward = reward;
  m.amplification = 2.0 * i + 1;
  m.true_quality = -static_cast<double>(i);
  return m;
}

}  // namespace

TEST(Config, DefaultsApplied) {
  const auto c = parse_config(R"({"name": "x", "grpo": {"iterations": 5}})");
  EXPECT_EQ(c.grpo.beta, 1e-3);
  EXPECT_EQ(c.grpo.epsilon, 0.2);
  EXPECT_EQ(c.grpo.iterations, 5u);
  EXPECT_EQ(c.schedule.noise_scale_a, 0.7);
  EXPECT_EQ(c.grpo.group_size, 8u);
}

TEST(Config, ValidationNamesKeyPath) {
  EXPECT_EQ(config_error(R"({"schedule": {"noise_scale_a": -1}})"), "schedule.noise_scale_a must be ≥ 0");
  EXPECT_EQ(config_error(R"({"grpo": {"betta": 0.1}})"), "unknown key grpo.betta");
  EXPECT_EQ(config_error(R"({"colour": 1})"), "unknown key colour");
  EXPECT_NE(config_error(R"({"grpo": {"iterations": "many"}})").find("grpo.iterations"), std::string::npos);
  EXPECT_NE(config_error(R"({"oracle": {"kind": "magic"}})").find("oracle.kind"), std::string::npos);
}

TEST(Config, ParseErrorHasLineAndColumn) {
  const auto msg = config_error("{\n  \"name\": \"x\",\n  \"seed\": ,\n}");
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column"), std::string::npos) << msg;
}

TEST(Config, RoundTrip) {
  TempDir tmp;
  for (const char* name : {"fixture.json", "smoke.json"}) {
    const auto c = load_config(fs::path(PREFGRPO_SOURCE_DIR) / "configs" / name);
    save_config(c, tmp.path / name);
    const auto back = load_config(tmp.path / name);
    EXPECT_TRUE(back == c) << name;
    EXPECT_EQ(config_hash(back), config_hash(c));
  }
  auto c = parse_config("{}");
  const auto h = config_hash(c);
  c.grpo.lr *= 2;
  EXPECT_NE(config_hash(c), h);
  EXPECT_THROW(load_config(tmp.path / "missing.json"), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir tmp;
  FieldSpec spec;
  spec.hidden = {16, 16};
  FmConfig fm;
  fm.steps = 40;
  fm.batch_size = 32;
  fm.log_every = 10;
  const auto trained = train_fm(SyntheticDataset::two_mode_fixture(), VelocityField::create(spec, 3), fm).field;
  save_checkpoint(trained, tmp.path / "ck.json", "abc");
  const auto back = load_checkpoint(tmp.path / "ck.json", std::string("abc"));
  EXPECT_TRUE(back.field.params() == trained.params());
  EXPECT_TRUE(back.field.spec() == trained.spec());
  EXPECT_TRUE(back.warnings.empty());
  EXPECT_EQ(ode_sample(back.field, 1, 25, 4), ode_sample(trained, 1, 25, 4));

  const auto other = load_checkpoint(tmp.path / "ck.json", std::string("def"));
  ASSERT_EQ(other.warnings.size(), 1u);
  EXPECT_NE(other.warnings[0].find("abc"), std::string::npos);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  TempDir tmp;
  FieldSpec spec;
  spec.hidden = {8};
  save_checkpoint(VelocityField::create(spec, 1), tmp.path / "ck.json");
  const auto text = read_text_file(tmp.path / "ck.json");
  write_text_file(tmp.path / "cut.json", text.substr(0, text.size() / 2));
  EXPECT_THROW(load_checkpoint(tmp.path / "cut.json"), CheckpointError);
  write_text_file(tmp.path / "other.json", R"({"format": "something-else", "field": {}})");
  EXPECT_THROW(load_checkpoint(tmp.path / "other.json"), CheckpointError);
  EXPECT_THROW(load_checkpoint(tmp.path / "absent.json"), CheckpointError);
}

TEST(Csv, NanSentinelAndValidity) {
  auto m = row(0, 0.5);
  m.amplification.reset();
  const auto line = metrics_row(m);
  const auto t = parse_csv(metrics_header() + "\n" + line + "\n");
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0][*t.column("amplification")], "nan");
  EXPECT_EQ(t.rows[0][*t.column("valid")], "0");
  EXPECT_EQ(line.find("NaN"), std::string::npos);
  m.kl = std::numeric_limits<double>::infinity();
  EXPECT_EQ(parse_csv(metrics_header() + "\n" + metrics_row(m)).rows[0][*t.column("kl")], "nan");
  EXPECT_EQ(parse_csv(metrics_header() + "\n" + metrics_row(row(1, 0.5))).rows[0].back(), "1");
}

TEST(Csv, EscapesDelimiters) {
  CsvRow r;
  r.text("a,b").text("say \"hi\"").text("two\nlines").num(1.5);
  const auto t = parse_csv("h1,h2,h3,h4\n" + r.line(false) + "\n");
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0], (std::vector<std::string>{"a,b", "say \"hi\"", "two\nlines", "1.5"}));
}

TEST(Csv, ColumnsAndRoundTripNumbers) {
  const auto cols = metrics_columns();
  const std::vector<std::string> required = {"iteration",    "reward_mode",       "mean_reward", "sigma_r",
                                             "max_abs_adv",  "amplification",     "true_quality",
                                             "bias_feature_mean", "kl", "objective"};
  for (std::size_t i = 0; i < required.size(); ++i) EXPECT_EQ(cols[i], required[i]);
  auto m = row(3, 0.1 + 0.2);
  const auto t = parse_csv(metrics_csv(std::vector<GrpoIterationMetrics>{m}));
  EXPECT_EQ(std::stod(t.rows[0][*t.column("mean_reward")]), 0.1 + 0.2);
}

TEST(Plots, ThreeRowsGiveThreePoints) {
  TempDir tmp;
  const std::vector<GrpoIterationMetrics> rows = {row(0, 0.1), row(1, 0.2), row(2, 0.15)};
  const auto paths = emit_plots(metrics_csv(rows), tmp.path);
  ASSERT_EQ(paths.size(), 3u);
  for (const auto& p : paths) {
    const auto svg = read_text_file(p);
    std::smatch m;
    ASSERT_TRUE(std::regex_search(svg, m, std::regex("points=\"([^\"]*)\"")));
    const std::string pts = m[1];
    EXPECT_EQ(std::count(pts.begin(), pts.end(), ','), 3) << p;
  }
}

TEST(Plots, ErrorsAndDeterminism) {
  TempDir tmp;
  try {
    emit_plots(metrics_header() + "\n", tmp.path);
    FAIL() << "expected PlotError";
  } catch (const PlotError& e) {
    EXPECT_STREQ(e.what(), "no data rows");
  }
  EXPECT_THROW(emit_plots("", tmp.path), PlotError);
  EXPECT_THROW(emit_plots("iteration,mystery\n0,1\n", tmp.path), PlotError);

  const std::vector<GrpoIterationMetrics> rows = {row(0, 0.1), row(1, 0.2), row(2, 0.15)};
  const auto a = emit_plots(metrics_csv(rows), tmp.path / "a");
  const auto b = emit_plots(metrics_csv(rows), tmp.path / "b");
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(read_text_file(a[i]), read_text_file(b[i]));
}

TEST(Records, ArmRecordRoundTrip) {
  FieldSpec spec;
  spec.hidden = {8};
  ArmRecord r;
  r.seed = 4;
  r.arm.mode = RewardMode::pairwise_pref;
  r.arm.start = {0.5, -1.25, 2.0};
  r.arm.end = {0.6, -1.5, 2.5};
  r.arm.series = {row(0, 0.1), row(1, 0.2)};
  r.arm.field = VelocityField::create(spec, 2);
  r.amp_over_100 = 0.75;
  const auto back = arm_record_from_json(nlohmann::json::parse(arm_record_to_json(r).dump()));
  EXPECT_EQ(arm_record_to_json(back), arm_record_to_json(r));
  EXPECT_THROW(arm_record_from_json(nlohmann::json::parse(R"({"seed": 1})")), CheckpointError);
}

TEST(Records, SingleSeedReportHasNullSpread) {
  FieldSpec spec;
  spec.hidden = {8};
  ArmRecord a, b;
  a.seed = b.seed = 1;
  a.arm.mode = RewardMode::pointwise;
  b.arm.mode = RewardMode::pairwise_pref;
  a.arm.start = b.arm.start = {0.5, -1.0, 2.0};
  a.arm.end = {0.6, -2.0, 2.5};
  b.arm.end = {0.55, -1.5, 2.2};
  a.arm.field = b.arm.field = VelocityField::create(spec, 1);
  const auto rep = experiment_report(parse_config("{}"), std::vector<ArmRecord>{a}, std::vector<ArmRecord>{b}, {});
  EXPECT_TRUE(rep["delta_moments"]["pointwise.true_quality"]["std"].is_null());
  EXPECT_EQ(rep["delta_moments"]["pointwise.true_quality"]["mean"], -1.0);
  EXPECT_EQ(rep["seeds"][0]["arm_a_hacked"], true);
  EXPECT_EQ(rep["seeds"][0]["quality_margin_b_minus_a"], 0.5);
}
