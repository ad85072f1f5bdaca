#pragma once

// Run configuration, checkpoints, metrics CSV, SVG plots and experiment
// reports.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "prefgrpo/bench.hpp"
#include "prefgrpo/errors.hpp"
#include "prefgrpo/flowmatch.hpp"
#include "prefgrpo/grpo.hpp"
#include "prefgrpo/rewards.hpp"
#include "prefgrpo/sdepolicy.hpp"

namespace prefgrpo {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

struct HackingSettings {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t eval_samples = 256;
  std::uint64_t eval_seed = 0xe7a1ULL;

  bool operator==(const HackingSettings&) const = default;
};

struct JudgeSettings {
  std::string url;  // empty: fall back to the environment
  std::size_t timeout_ms = 10000;
  std::size_t max_retries = 3;
  std::size_t backoff_ms = 200;
  std::size_t max_in_flight = 8;

  bool operator==(const JudgeSettings&) const = default;
};

struct BenchSettings {
  std::size_t num_prompts = 20;
  std::size_t samples_per_prompt = 4;
  JudgeSettings judge;

  bool operator==(const BenchSettings&) const = default;
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 1;
  SyntheticDataset dataset = SyntheticDataset::two_mode_fixture();
  FieldSpec field;  // dim and num_conditions follow the dataset
  FmConfig fm;      // fm.seed follows `seed`
  TimestepSchedule schedule;
  OracleConfig oracle;
  GrpoConfig grpo;  // grpo.seed follows `seed`; jobs is a runtime flag
  HackingSettings hacking;
  BenchSettings bench;

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.name == b.name && a.seed == b.seed && dataset_to_json(a.dataset) == dataset_to_json(b.dataset) &&
           a.field == b.field && a.fm.steps == b.fm.steps && a.fm.batch_size == b.fm.batch_size &&
           a.fm.lr == b.fm.lr && a.fm.log_every == b.fm.log_every && a.schedule.n_steps == b.schedule.n_steps &&
           a.schedule.noise_scale_a == b.schedule.noise_scale_a && a.oracle == b.oracle && a.grpo == b.grpo &&
           a.hacking == b.hacking && a.bench == b.bench;
  }
};

namespace detail {

/// Reads one JSON object, remembering which keys were consumed so the rest
/// can be reported as unknown. Errors name the full key path.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{} must be an object", display()));
  }

  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError(fmt::format("{} must be a number", key_path(key)));
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError(fmt::format("{} must be a non-negative integer", key_path(key)));
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(fmt::format("{} must be a string", key_path(key)));
      }
      out = v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(fmt::format("{} has the wrong type", key_path(key)));
    }
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(fmt::format("unknown key {}", key_path(key)));
  }

 private:
  std::string display() const { return path_.empty() ? std::string("config") : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, std::string_view message) {
  if (!ok) throw ConfigError(std::string(message));
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json seeds = c.hacking.seeds;
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"dataset", dataset_to_json(c.dataset)},
      {"field",
       {{"hidden", c.field.hidden},
        {"activation", activation_name(c.field.activation)},
        {"time_pairs", c.field.time_pairs},
        {"cond_dim", c.field.cond_dim}}},
      {"fm", {{"steps", c.fm.steps}, {"batch_size", c.fm.batch_size}, {"lr", c.fm.lr}, {"log_every", c.fm.log_every}}},
      {"schedule", {{"n_steps", c.schedule.n_steps}, {"noise_scale_a", c.schedule.noise_scale_a}}},
      {"oracle", oracle_to_json(c.oracle)},
      {"grpo",
       {{"iterations", c.grpo.iterations},
        {"group_size", c.grpo.group_size},
        {"prompts_per_iter", c.grpo.prompts_per_iter},
        {"epsilon", c.grpo.epsilon},
        {"beta", c.grpo.beta},
        {"lr", c.grpo.lr},
        {"tau_std", c.grpo.tau_std},
        {"lambda", c.grpo.lambda},
        {"reward_mode", to_string(c.grpo.reward_mode)}}},
      {"hacking", {{"seeds", seeds}, {"eval_samples", c.hacking.eval_samples}, {"eval_seed", c.hacking.eval_seed}}},
      {"bench",
       {{"num_prompts", c.bench.num_prompts},
        {"samples_per_prompt", c.bench.samples_per_prompt},
        {"judge",
         {{"url", c.bench.judge.url},
          {"timeout_ms", c.bench.judge.timeout_ms},
          {"max_retries", c.bench.judge.max_retries},
          {"backoff_ms", c.bench.judge.backoff_ms},
          {"max_in_flight", c.bench.judge.max_in_flight}}}}},
  };
}

/// Validates and applies defaults. Every error names its key path.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::ObjectReader;
  using detail::require;
  RunConfig c;
  ObjectReader root(j, "");
  root.read("name", c.name);
  root.read("seed", c.seed);

  if (root.has("dataset")) {
    try {
      c.dataset = dataset_from_json(root.raw("dataset"));
    } catch (const Error& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    }
  }

  if (root.has("field")) {
    ObjectReader r(root.raw("field"), "field");
    r.read("hidden", c.field.hidden);
    std::string act(activation_name(c.field.activation));
    r.read("activation", act);
    require(act == "tanh" || act == "silu", "field.activation must be tanh or silu");
    c.field.activation = parse_activation(act);
    r.read("time_pairs", c.field.time_pairs);
    r.read("cond_dim", c.field.cond_dim);
    r.finish();
  }
  require(!c.field.hidden.empty(), "field.hidden must list at least one layer width");
  for (auto h : c.field.hidden) require(h > 0, "field.hidden widths must be > 0");
  require(c.field.time_pairs >= 2, "field.time_pairs must be ≥ 2");
  require(c.field.cond_dim >= 1, "field.cond_dim must be ≥ 1");
  c.field.dim = c.dataset.dims();
  c.field.num_conditions = c.dataset.num_conditions();

  if (root.has("fm")) {
    ObjectReader r(root.raw("fm"), "fm");
    r.read("steps", c.fm.steps);
    r.read("batch_size", c.fm.batch_size);
    r.read("lr", c.fm.lr);
    r.read("log_every", c.fm.log_every);
    r.finish();
  }
  require(c.fm.steps >= 1, "fm.steps must be ≥ 1");
  require(c.fm.batch_size >= 1, "fm.batch_size must be ≥ 1");
  require(c.fm.lr > 0.0, "fm.lr must be > 0");
  require(c.fm.log_every >= 1, "fm.log_every must be ≥ 1");
  c.fm.seed = c.seed;

  if (root.has("schedule")) {
    ObjectReader r(root.raw("schedule"), "schedule");
    r.read("n_steps", c.schedule.n_steps);
    r.read("noise_scale_a", c.schedule.noise_scale_a);
    r.finish();
  }
  require(c.schedule.n_steps >= 1, "schedule.n_steps must be ≥ 1");
  require(c.schedule.noise_scale_a >= 0.0, "schedule.noise_scale_a must be ≥ 0");

  if (root.has("oracle")) {
    ObjectReader r(root.raw("oracle"), "oracle");
    std::string kind(to_string(c.oracle.kind)), feat(to_string(c.oracle.bias_feature)),
        order(to_string(c.oracle.order_mode));
    r.read("kind", kind);
    r.read("lambda_bias", c.oracle.lambda_bias);
    r.read("bias_feature", feat);
    r.read("compression_slope", c.oracle.compression_slope);
    r.read("tie_threshold", c.oracle.tie_threshold);
    r.read("flip_noise", c.oracle.flip_noise);
    r.read("order_mode", order);
    r.finish();
    c.oracle.kind = parse_oracle_kind(kind);
    c.oracle.bias_feature = parse_bias_feature(feat);
    c.oracle.order_mode = parse_order_mode(order);
  }
  require(std::isfinite(c.oracle.lambda_bias), "oracle.lambda_bias must be finite");
  require(c.oracle.compression_slope > 0.0, "oracle.compression_slope must be > 0");
  require(c.oracle.tie_threshold >= 0.0, "oracle.tie_threshold must be ≥ 0");
  require(c.oracle.flip_noise >= 0.0 && c.oracle.flip_noise < 0.5, "oracle.flip_noise must lie in [0, 0.5)");

  if (root.has("grpo")) {
    ObjectReader r(root.raw("grpo"), "grpo");
    r.read("iterations", c.grpo.iterations);
    r.read("group_size", c.grpo.group_size);
    r.read("prompts_per_iter", c.grpo.prompts_per_iter);
    r.read("epsilon", c.grpo.epsilon);
    r.read("beta", c.grpo.beta);
    r.read("lr", c.grpo.lr);
    r.read("tau_std", c.grpo.tau_std);
    r.read("lambda", c.grpo.lambda);
    std::string mode(to_string(c.grpo.reward_mode));
    r.read("reward_mode", mode);
    r.finish();
    const auto m = parse_reward_mode(mode);
    if (!m) throw ConfigError(fmt::format("grpo.reward_mode must be one of {}", fmt::join(kRewardModeNames, ", ")));
    c.grpo.reward_mode = *m;
  }
  require(c.grpo.group_size >= 2, "grpo.group_size must be ≥ 2");
  require(c.grpo.prompts_per_iter >= 1, "grpo.prompts_per_iter must be ≥ 1");
  require(c.grpo.epsilon > 0.0, "grpo.epsilon must be > 0");
  require(c.grpo.beta >= 0.0, "grpo.beta must be ≥ 0");
  require(c.grpo.lr > 0.0, "grpo.lr must be > 0");
  require(c.grpo.tau_std >= 0.0, "grpo.tau_std must be ≥ 0");
  require(c.grpo.lambda >= 0.0, "grpo.lambda must be ≥ 0");
  c.grpo.seed = c.seed;

  if (root.has("hacking")) {
    ObjectReader r(root.raw("hacking"), "hacking");
    r.read("seeds", c.hacking.seeds);
    r.read("eval_samples", c.hacking.eval_samples);
    r.read("eval_seed", c.hacking.eval_seed);
    r.finish();
  }
  require(!c.hacking.seeds.empty(), "hacking.seeds must not be empty");
  require(c.hacking.eval_samples >= 1, "hacking.eval_samples must be ≥ 1");

  if (root.has("bench")) {
    ObjectReader r(root.raw("bench"), "bench");
    r.read("num_prompts", c.bench.num_prompts);
    r.read("samples_per_prompt", c.bench.samples_per_prompt);
    if (r.has("judge")) {
      ObjectReader jr(r.raw("judge"), "bench.judge");
      jr.read("url", c.bench.judge.url);
      jr.read("timeout_ms", c.bench.judge.timeout_ms);
      jr.read("max_retries", c.bench.judge.max_retries);
      jr.read("backoff_ms", c.bench.judge.backoff_ms);
      jr.read("max_in_flight", c.bench.judge.max_in_flight);
      jr.finish();
    }
    r.finish();
  }
  require(c.bench.num_prompts >= 1, "bench.num_prompts must be ≥ 1");
  require(c.bench.samples_per_prompt >= 1, "bench.samples_per_prompt must be ≥ 1");
  require(c.bench.judge.max_in_flight >= 1, "bench.judge.max_in_flight must be ≥ 1");
  root.finish();
  return c;
}

/// 1-based line and column of a byte offset.
inline std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

inline nlohmann::json parse_json_text(const std::string& text, std::string_view what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = line_column(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(fmt::format("{}: JSON parse error at line {}, column {}", what, line, col));
  }
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
  out << text;
  if (!out) throw ConfigError(fmt::format("short write to {}", path.string()));
}

inline RunConfig parse_config(const std::string& text, std::string_view source = "config") {
  return config_from_json(parse_json_text(text, source));
}

inline RunConfig load_config(const fs::path& path) { return parse_config(read_text_file(path), path.string()); }

inline void save_config(const RunConfig& c, const fs::path& path) {
  write_text_file(path, config_to_json(c).dump(2) + "\n");
}

/// FNV-1a over the canonical config text, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

inline HackingConfig hacking_config(const RunConfig& c, std::size_t jobs) {
  HackingConfig h;
  h.schedule = c.schedule;
  h.oracle = c.oracle;
  h.grpo = c.grpo;
  h.grpo.jobs = jobs;
  h.seeds = c.hacking.seeds;
  h.eval_samples = c.hacking.eval_samples;
  h.eval_seed = c.hacking.eval_seed;
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::string_view kCheckpointFormat = "prefgrpo-checkpoint/1";

inline nlohmann::json field_spec_to_json(const FieldSpec& s) {
  return {{"dim", s.dim},
          {"num_conditions", s.num_conditions},
          {"hidden", s.hidden},
          {"activation", activation_name(s.activation)},
          {"time_pairs", s.time_pairs},
          {"cond_dim", s.cond_dim}};
}

inline FieldSpec field_spec_from_json(const nlohmann::json& j) {
  FieldSpec s;
  s.dim = j.at("dim").get<std::size_t>();
  s.num_conditions = j.at("num_conditions").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.activation = parse_activation(j.at("activation").get<std::string>());
  s.time_pairs = j.at("time_pairs").get<std::size_t>();
  s.cond_dim = j.at("cond_dim").get<std::size_t>();
  return s;
}

inline nlohmann::json field_to_json(const VelocityField& f) {
  return {{"spec", field_spec_to_json(f.spec())}, {"params", params_to_json(f.params())}};
}

inline VelocityField field_from_json(const nlohmann::json& j) {
  try {
    return VelocityField(field_spec_from_json(j.at("spec")), params_from_json(j.at("params")));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed field: ") + e.what());
  }
}

inline void save_checkpoint(const VelocityField& f, const fs::path& path, const std::string& cfg_hash = "") {
  const nlohmann::json j = {{"format", kCheckpointFormat}, {"config_hash", cfg_hash}, {"field", field_to_json(f)}};
  write_text_file(path, j.dump() + "\n");
}

struct LoadedCheckpoint {
  VelocityField field;
  std::string config_hash;
  std::vector<std::string> warnings;  // e.g. a config-hash mismatch
};

/// Corrupt or truncated files raise CheckpointError. A config-hash mismatch
/// only produces a warning.
inline LoadedCheckpoint load_checkpoint(const fs::path& path, std::optional<std::string> expected_hash = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("cannot open checkpoint {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(fmt::format("checkpoint {} is corrupt: {}", path.string(), e.what()));
  }
  if (!j.is_object() || j.value("format", std::string{}) != kCheckpointFormat || !j.contains("field"))
    throw CheckpointError(fmt::format("{} is not a checkpoint", path.string()));
  LoadedCheckpoint out;
  out.field = field_from_json(j.at("field"));
  out.config_hash = j.value("config_hash", std::string{});
  if (expected_hash && *expected_hash != out.config_hash)
    out.warnings.push_back(fmt::format("checkpoint {} was written under config {} but the current config is {}",
                                       path.filename().string(), out.config_hash.empty() ? "?" : out.config_hash,
                                       *expected_hash));
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string csv_escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Numbers in shortest round-trip form; non-finite or missing values become
/// the "nan" sentinel and clear the row's validity flag.
class CsvRow {
 public:
  CsvRow& text(std::string_view s) {
    cells_.push_back(detail::csv_escape(s));
    return *this;
  }
  CsvRow& num(double v) {
    if (std::isfinite(v)) {
      cells_.push_back(fmt::format("{}", v));
    } else {
      cells_.push_back("nan");
      valid_ = false;
    }
    return *this;
  }
  CsvRow& num(std::optional<double> v) { return v ? num(*v) : num(std::nan("")); }
  CsvRow& count(std::size_t v) {
    cells_.push_back(fmt::format("{}", v));
    return *this;
  }
  bool valid() const noexcept { return valid_; }
  std::string line(bool with_valid) const {
    std::string s = fmt::format("{}", fmt::join(cells_, ","));
    if (with_valid) s += valid_ ? ",1" : ",0";
    return s;
  }

 private:
  std::vector<std::string> cells_;
  bool valid_ = true;
};

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "iteration", "reward_mode", "mean_reward", "sigma_r",      "max_abs_adv", "amplification", "true_quality",
      "bias_feature_mean", "kl",  "objective",   "oracle_score", "comparisons", "valid"};
  return cols;
}

inline std::string metrics_header() { return fmt::format("{}", fmt::join(metrics_columns(), ",")); }

inline std::string metrics_row(const GrpoIterationMetrics& m) {
  CsvRow r;
  r.count(m.iteration)
      .text(to_string(m.reward_mode))
      .num(m.mean_reward)
      .num(m.sigma_r)
      .num(m.max_abs_adv)
      .num(m.amplification)
      .num(m.true_quality)
      .num(m.bias_feature_mean)
      .num(m.kl)
      .num(m.objective)
      .num(m.oracle_score)
      .count(m.comparisons);
  return r.line(true);
}

inline std::string metrics_csv(std::span<const GrpoIterationMetrics> rows) {
  std::string out = metrics_header() + "\n";
  for (const auto& m : rows) out += metrics_row(m) + "\n";
  return out;
}

/// Appends rows to a metrics file as training progresses; one owner per file.
class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw ConfigError(fmt::format("cannot write {}", path.string()));
    out_ << metrics_header() << '\n';
  }
  void write(const GrpoIterationMetrics& m) { out_ << metrics_row(m) << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

inline CsvTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string cell;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      rec.push_back(std::move(cell));
      cell.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !cell.empty()) {
        rec.push_back(std::move(cell));
        records.push_back(std::move(rec));
      }
      rec.clear();
      cell.clear();
      any = false;
    } else {
      cell += c;
      any = true;
    }
  }
  if (any || !cell.empty()) {
    rec.push_back(std::move(cell));
    records.push_back(std::move(rec));
  }
  CsvTable t;
  if (records.empty()) return t;
  t.header = std::move(records.front());
  t.rows.assign(std::make_move_iterator(records.begin() + 1), std::make_move_iterator(records.end()));
  return t;
}

// ---------------------------------------------------------------------------
// SVG plots

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;  // non-finite points are skipped
};

inline std::string render_svg(std::string_view title, std::string_view x_label, std::string_view y_label,
                              std::span<const PlotSeries> series) {
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  static constexpr const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n", W, H);
  s += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  s += fmt::format("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n", W / 2, title);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T, H - B);
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n", (L + W - R) / 2,
                   H - 12, x_label);
  s += fmt::format(
      "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
      (T + H - B) / 2, y_label);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\">{:.4g}</text>\n", 4, py(y1) + 4, y1);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\">{:.4g}</text>\n", 4, py(y0) + 4, y0);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.4g}</text>\n", px(x0),
                   H - B + 14, x0);
  s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.4g}</text>\n", px(x1),
                   H - B + 14, x1);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = colors[i % std::size(colors)];
    std::vector<std::string> pts;
    for (const auto& [x, y] : series[i].points)
      if (std::isfinite(x) && std::isfinite(y)) pts.push_back(fmt::format("{:.2f},{:.2f}", px(x), py(y)));
    s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", color,
                     fmt::join(pts, " "));
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{}\">{}</text>\n", W - R - 150, T + 14 * (i + 1),
                     color, series[i].name);
  }
  return s + "</svg>\n";
}

/// The three plotted series: y column, file stem and title.
struct PlotTarget {
  const char* column;
  const char* stem;
  const char* title;
};

inline constexpr PlotTarget kPlotTargets[] = {
    {"mean_reward", "reward", "reward vs iteration"},
    {"true_quality", "true_quality", "true quality vs iteration"},
    {"amplification", "amplification", "amplification vs iteration"},
};

inline std::vector<std::pair<double, double>> csv_series(const CsvTable& t, std::string_view ycol) {
  const auto xi = t.column("iteration");
  const auto yi = t.column(ycol);
  if (!xi) throw PlotError("unknown column 'iteration'");
  if (!yi) throw PlotError(fmt::format("unknown column '{}'", ycol));
  std::vector<std::pair<double, double>> pts;
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size()) throw PlotError("ragged CSV row");
    auto number = [](const std::string& cell) {
      if (cell == "nan") return std::nan("");
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw PlotError(fmt::format("non-numeric cell '{}'", cell));
        return v;
      } catch (const std::logic_error&) {
        throw PlotError(fmt::format("non-numeric cell '{}'", cell));
      }
    };
    pts.emplace_back(number(row[*xi]), number(row[*yi]));
  }
  return pts;
}

/// Checks a metrics table before plotting: known columns only, some data.
inline void check_metrics_table(const CsvTable& t) {
  if (t.header.empty()) throw PlotError("no data rows");
  const auto& known = metrics_columns();
  for (const auto& h : t.header)
    if (std::find(known.begin(), known.end(), h) == known.end()) throw PlotError(fmt::format("unknown column '{}'", h));
  if (t.rows.empty()) throw PlotError("no data rows");
}

/// One SVG per plotted series; returns the written paths.
inline std::vector<fs::path> emit_plots(std::string_view csv_text, const fs::path& out_dir,
                                        std::string_view prefix = "") {
  const auto t = parse_csv(csv_text);
  check_metrics_table(t);
  std::vector<fs::path> written;
  for (const auto& target : kPlotTargets) {
    const PlotSeries s{target.column, csv_series(t, target.column)};
    const auto path = out_dir / fmt::format("{}{}.svg", prefix, target.stem);
    write_text_file(path, render_svg(target.title, "iteration", target.column, std::span(&s, 1)));
    written.push_back(path);
  }
  return written;
}

inline std::vector<fs::path> emit_plots_file(const fs::path& csv_path, const fs::path& out_dir) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw PlotError(fmt::format("cannot open {}", csv_path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return emit_plots(ss.str(), out_dir);
}

// ---------------------------------------------------------------------------
// Reward-hacking experiment records

inline nlohmann::json policy_eval_to_json(const PolicyEval& e) {
  return {{"oracle_score", e.oracle_score}, {"true_quality", e.true_quality}, {"bias_feature_mean", e.bias_feature_mean}};
}

inline PolicyEval policy_eval_from_json(const nlohmann::json& j) {
  return {j.at("oracle_score").get<double>(), j.at("true_quality").get<double>(),
          j.at("bias_feature_mean").get<double>()};
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

/// Iteration metrics without the per-group diagnostics.
inline nlohmann::json metrics_to_json(const GrpoIterationMetrics& m) {
  return {{"iteration", m.iteration},
          {"reward_mode", to_string(m.reward_mode)},
          {"mean_reward", m.mean_reward},
          {"sigma_r", m.sigma_r},
          {"max_abs_adv", m.max_abs_adv},
          {"amplification", detail::opt_json(m.amplification)},
          {"true_quality", m.true_quality},
          {"bias_feature_mean", m.bias_feature_mean},
          {"kl", m.kl},
          {"objective", m.objective},
          {"oracle_score", m.oracle_score},
          {"comparisons", m.comparisons}};
}

inline GrpoIterationMetrics metrics_from_json(const nlohmann::json& j) {
  GrpoIterationMetrics m;
  m.iteration = j.at("iteration").get<std::size_t>();
  m.reward_mode = parse_reward_mode(j.at("reward_mode").get<std::string>()).value();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.sigma_r = j.at("sigma_r").get<double>();
  m.max_abs_adv = j.at("max_abs_adv").get<double>();
  if (!j.at("amplification").is_null()) m.amplification = j.at("amplification").get<double>();
  m.true_quality = j.at("true_quality").get<double>();
  m.bias_feature_mean = j.at("bias_feature_mean").get<double>();
  m.kl = j.at("kl").get<double>();
  m.objective = j.at("objective").get<double>();
  m.oracle_score = j.at("oracle_score").get<double>();
  m.comparisons = j.at("comparisons").get<std::size_t>();
  return m;
}

/// Fraction of groups whose amplification exceeds `threshold`.
inline double amplification_fraction(std::span<const GrpoIterationMetrics> series, double threshold) {
  std::size_t n = 0, hit = 0;
  for (const auto& m : series)
    for (const auto& g : m.groups) {
      ++n;
      if (g.amplification && *g.amplification > threshold) ++hit;
    }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

/// Everything needed to resume a comparison without rerunning an arm.
struct ArmRecord {
  std::uint64_t seed = 0;
  ArmOutcome arm;
  double amp_over_100 = 0.0;
};

inline nlohmann::json arm_record_to_json(const ArmRecord& r) {
  nlohmann::json series = nlohmann::json::array();
  for (const auto& m : r.arm.series) series.push_back(metrics_to_json(m));
  return {{"seed", r.seed},
          {"mode", to_string(r.arm.mode)},
          {"start", policy_eval_to_json(r.arm.start)},
          {"end", policy_eval_to_json(r.arm.end)},
          {"amplification_over_100_fraction", r.amp_over_100},
          {"series", series},
          {"field", field_to_json(r.arm.field)}};
}

inline ArmRecord arm_record_from_json(const nlohmann::json& j) {
  try {
    ArmRecord r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.arm.mode = parse_reward_mode(j.at("mode").get<std::string>()).value();
    r.arm.start = policy_eval_from_json(j.at("start"));
    r.arm.end = policy_eval_from_json(j.at("end"));
    r.amp_over_100 = j.at("amplification_over_100_fraction").get<double>();
    for (const auto& m : j.at("series")) r.arm.series.push_back(metrics_from_json(m));
    r.arm.field = field_from_json(j.at("field"));
    return r;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed arm record: ") + e.what());
  }
}

namespace detail {

struct Moments {
  double mean = 0.0;
  std::optional<double> std;  // sample std; undefined for a single value
};

inline Moments moments(std::span<const double> v) {
  Moments m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

}  // namespace detail

/// Per-seed deltas, across-seed moments and the pass/fail verdict.
inline nlohmann::json experiment_report(const RunConfig& cfg, std::span<const ArmRecord> arm_a,
                                        std::span<const ArmRecord> arm_b, const std::vector<std::string>& warnings) {
  if (arm_a.size() != arm_b.size()) throw ContractError("arm record counts differ");
  std::vector<SeedOutcome> outcomes;
  nlohmann::json seeds = nlohmann::json::array();
  std::map<std::string, std::vector<double>> deltas;
  for (std::size_t i = 0; i < arm_a.size(); ++i) {
    SeedOutcome o;
    o.seed = arm_a[i].seed;
    o.score_max = arm_a[i].arm;
    o.preference = arm_b[i].arm;
    nlohmann::json arms = nlohmann::json::object();
    for (const auto* r : {&arm_a[i], &arm_b[i]}) {
      const auto& a = r->arm;
      const std::string key(to_string(a.mode));
      const double dq = a.end.true_quality - a.start.true_quality;
      const double ds = a.end.oracle_score - a.start.oracle_score;
      const double db = a.end.bias_feature_mean - a.start.bias_feature_mean;
      deltas[key + ".true_quality"].push_back(dq);
      deltas[key + ".oracle_score"].push_back(ds);
      deltas[key + ".bias_feature_mean"].push_back(db);
      arms[key] = {{"start", policy_eval_to_json(a.start)},
                   {"end", policy_eval_to_json(a.end)},
                   {"delta", {{"true_quality", dq}, {"oracle_score", ds}, {"bias_feature_mean", db}}},
                   {"amplification_over_100_fraction", r->amp_over_100}};
    }
    seeds.push_back({{"seed", o.seed},
                     {"arms", arms},
                     {"arm_a_hacked", shows_hacking(o.score_max)},
                     {"quality_margin_b_minus_a", o.preference.end.true_quality - o.score_max.end.true_quality}});
    outcomes.push_back(std::move(o));
  }
  nlohmann::json across = nlohmann::json::object();
  for (const auto& [key, v] : deltas) {
    const auto m = detail::moments(v);
    across[key] = {{"mean", m.mean}, {"std", detail::opt_json(m.std)}};
  }
  const auto s = summarize(outcomes);
  return {{"experiment", cfg.name},
          {"config_hash", config_hash(cfg)},
          {"config", config_to_json(cfg)},
          {"seeds", seeds},
          {"delta_moments", across},
          {"summary",
           {{"seeds", s.seeds},
            {"arm_a_hacked", s.arm_a_hacked},
            {"arm_b_quality_at_least_a", s.arm_b_quality_at_least},
            {"passes", s.passes()}}},
          {"warnings", warnings}};
}

}  // namespace prefgrpo
