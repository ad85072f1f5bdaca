// prefgrpo: command-line front end for the flow-matching / GRPO lab and the
// benchmark harness.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "prefgrpo/bench.hpp"
#include "prefgrpo/flowmatch.hpp"
#include "prefgrpo/grpo.hpp"
#include "prefgrpo/http_judge.hpp"
#include "prefgrpo/iohub.hpp"
#include "prefgrpo/parallel.hpp"
#include "prefgrpo/selftest.hpp"

namespace fs = std::filesystem;
using namespace prefgrpo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheck = 1;
constexpr int kExitUsage = 2;
constexpr int kExitService = 3;

constexpr const char* kExitFooter =
    "Exit codes: 0 ok, 1 check or runtime failure, 2 configuration or usage error, "
    "3 external service unavailable or misbehaving.";

struct Common {
  std::string workdir = ".";
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = default_jobs();
  bool quiet = false;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path in_workdir(const Common& c, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : fs::path(c.workdir) / path;
}

RunConfig load_run_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_config(in_workdir(c, c.config));
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.fm.seed = *c.seed;
    cfg.grpo.seed = *c.seed;
  }
  return cfg;
}

void note(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << msg << '\n';
}

// ---------------------------------------------------------------------------

int cmd_train_fm(const Common& c, const std::string& out) {
  const auto cfg = load_run_config(c);
  const auto& ds = cfg.dataset;
  std::string csv = "step,loss,smoothed_loss,valid\n";
  const auto res = train_fm(ds, VelocityField::create(cfg.field, cfg.seed), cfg.fm,
                            [&](std::size_t step, double loss, double smoothed) {
                              CsvRow r;
                              r.count(step).num(loss).num(smoothed);
                              csv += r.line(true) + "\n";
                              if (step % (cfg.fm.log_every * 10) == 0)
                                note(c, fmt::format("step {} loss {:.4f} smoothed {:.4f}", step, loss, smoothed));
                            });
  const auto ckpt = in_workdir(c, out);
  save_checkpoint(res.field, ckpt, config_hash(cfg));
  write_text_file(in_workdir(c, "fm_metrics.csv"), csv);
  fmt::print("checkpoint {}\nsmoothed loss {:.6f} -> {:.6f}\n", ckpt.string(), res.initial_smoothed_loss,
             res.final_smoothed_loss);
  return kExitOk;
}

int cmd_grpo(const Common& c, const std::string& checkpoint, const std::string& out,
             const std::optional<std::string>& mode, const std::optional<std::size_t>& iterations) {
  auto cfg = load_run_config(c);
  if (mode) {
    const auto m = parse_reward_mode(*mode);
    if (!m) throw UsageError(fmt::format("unknown reward mode '{}'; valid modes: {}", *mode, fmt::join(kRewardModeNames, ", ")));
    cfg.grpo.reward_mode = *m;
  }
  if (iterations) cfg.grpo.iterations = *iterations;
  cfg.grpo.jobs = c.jobs;
  auto loaded = load_checkpoint(in_workdir(c, checkpoint));
  for (const auto& w : loaded.warnings) note(c, "warning: " + w);
  const auto& ds = cfg.dataset;
  MetricsWriter metrics(in_workdir(c, "grpo_metrics.csv"));
  const auto res = train_grpo(loaded.field, cfg.schedule, ds, cfg.oracle, cfg.grpo, [&](const GrpoIterationMetrics& m) {
    metrics.write(m);
    if (m.iteration % 25 == 0)
      note(c, fmt::format("iter {} reward {:.6f} sigma_r {:.3g} true_quality {:.4f}", m.iteration, m.mean_reward,
                          m.sigma_r, m.true_quality));
  });
  const auto ckpt = in_workdir(c, out);
  save_checkpoint(res.field, ckpt, loaded.config_hash);
  fmt::print("checkpoint {}\niterations {}\n", ckpt.string(), res.metrics.size());
  return kExitOk;
}

int cmd_hack_compare(const Common& c, const std::string& checkpoint, std::optional<std::size_t> n_seeds, bool resume) {
  auto cfg = load_run_config(c);
  if (n_seeds) {
    if (*n_seeds == 0) throw UsageError("--seeds must be at least 1");
    cfg.hacking.seeds.clear();
    for (std::uint64_t s = 1; s <= *n_seeds; ++s) cfg.hacking.seeds.push_back(s);
  }
  const auto ckpt_path = in_workdir(c, checkpoint);
  if (!fs::exists(ckpt_path))
    throw ContractError(fmt::format("hack-compare needs a trained checkpoint; {} does not exist", ckpt_path.string()));
  auto loaded = load_checkpoint(ckpt_path, config_hash(cfg));
  std::vector<std::string> warnings = loaded.warnings;
  for (const auto& w : warnings) note(c, "warning: " + w);

  const auto& ds = cfg.dataset;
  const auto hc = hacking_config(cfg, c.jobs);
  const fs::path dir = in_workdir(c, "hack");
  fs::create_directories(dir / "plots");

  auto run_or_resume = [&](std::uint64_t seed, RewardMode mode) {
    const auto stem = fmt::format("seed{}_{}", seed, to_string(mode));
    const auto record_path = dir / (stem + ".json");
    ArmRecord rec;
    if (resume && fs::exists(record_path)) {
      std::ifstream in(record_path, std::ios::binary);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(fmt::format("cannot resume from {}: {}", record_path.string(), e.what()));
      }
      rec = arm_record_from_json(j);
      note(c, fmt::format("resumed {}", stem));
    } else {
      note(c, fmt::format("running {}", stem));
      rec.seed = seed;
      rec.arm = run_arm(loaded.field, ds, hc, mode, seed);
      rec.amp_over_100 = amplification_fraction(rec.arm.series, 100.0);
      // Written last so an interrupted arm is simply rerun.
      const auto tmp = dir / (stem + ".json.tmp");
      write_text_file(tmp, arm_record_to_json(rec).dump() + "\n");
      fs::rename(tmp, record_path);
    }
    write_text_file(dir / (stem + ".csv"), metrics_csv(rec.arm.series));
    return rec;
  };

  std::vector<ArmRecord> arm_a, arm_b;
  for (const auto seed : cfg.hacking.seeds) {
    arm_a.push_back(run_or_resume(seed, RewardMode::pointwise));
    arm_b.push_back(run_or_resume(seed, RewardMode::pairwise_pref));
    for (const auto& target : kPlotTargets) {
      std::vector<PlotSeries> series;
      for (const auto* r : {&arm_a.back(), &arm_b.back()}) {
        PlotSeries s{std::string(to_string(r->arm.mode)), {}};
        for (const auto& m : r->arm.series) {
          const std::string col = target.column;
          const double y = col == "mean_reward"    ? m.mean_reward
                           : col == "true_quality" ? m.true_quality
                                                   : m.amplification.value_or(std::nan(""));
          s.points.emplace_back(static_cast<double>(m.iteration), y);
        }
        series.push_back(std::move(s));
      }
      write_text_file(dir / "plots" / fmt::format("seed{}_{}.svg", seed, target.stem),
                      render_svg(fmt::format("seed {}: {}", seed, target.title), "iteration", target.column, series));
    }
  }
  const auto report = experiment_report(cfg, arm_a, arm_b, warnings);
  write_text_file(dir / "report.json", report.dump(2) + "\n");
  const auto& s = report.at("summary");
  fmt::print("report {}\narm A hacked in {}/{} seeds; arm B quality >= arm A in {}/{} seeds\n",
             (dir / "report.json").string(), s.at("arm_a_hacked").get<std::size_t>(), s.at("seeds").get<std::size_t>(),
             s.at("arm_b_quality_at_least_a").get<std::size_t>(), s.at("seeds").get<std::size_t>());
  return kExitOk;
}

Taxonomy load_taxonomy(const Common& c, const std::string& path) {
  if (path.empty()) return default_taxonomy();
  return taxonomy_from_json(parse_json_text(read_text_file(in_workdir(c, path)), path));
}

JudgeEndpoint endpoint_for(const RunConfig& cfg, const std::string& url) {
  JudgeEndpoint ep;
  ep.url = url.empty() ? cfg.bench.judge.url : url;
  ep.timeout = std::chrono::milliseconds(cfg.bench.judge.timeout_ms);
  ep.max_retries = cfg.bench.judge.max_retries;
  ep.backoff = std::chrono::milliseconds(cfg.bench.judge.backoff_ms);
  ep.max_in_flight = cfg.bench.judge.max_in_flight;
  return endpoint_from_env(ep);
}

int cmd_bench_gen(const Common& c, const std::string& taxonomy, std::optional<std::size_t> count,
                  const std::string& generator, const std::string& url, const std::string& out) {
  const auto cfg = load_run_config(c);
  const auto tax = load_taxonomy(c, taxonomy);
  const std::size_t n = count.value_or(cfg.bench.num_prompts);
  std::vector<PromptSpec> specs;
  for (std::size_t i = 0; i < n; ++i) specs.push_back(sample_prompt_spec(tax, cfg.seed, i));
  if (generator == "http") {
    const auto ep = endpoint_for(cfg, url);
    const auto send = httplib_transport(ep);
    parallel_for(specs.size(), ep.max_in_flight, [&](std::size_t i) { specs[i] = http_generate(ep, specs[i], send); });
  }
  std::string text;
  for (const auto& s : specs) text += prompt_spec_to_json(s).dump() + "\n";
  const auto path = in_workdir(c, out);
  write_text_file(path, text);
  fmt::print("{} prompt specs -> {}\n", specs.size(), path.string());
  return kExitOk;
}

int cmd_bench_eval(const Common& c, const std::string& taxonomy, const std::string& judge, const std::string& results,
                   const std::string& samples, const std::string& rules, const std::string& url,
                   const std::string& out, const std::string& results_out) {
  const auto cfg = load_run_config(c);
  const auto tax = load_taxonomy(c, taxonomy);
  if (results.empty() == samples.empty()) throw UsageError("pass exactly one of --results or --samples");
  std::vector<TestpointResult> judged;
  if (!results.empty()) {
    std::ifstream in(in_workdir(c, results), std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot open {}", results));
    judged = read_results_jsonl(in);
  } else {
    std::ifstream in(in_workdir(c, samples), std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot open {}", samples));
    const auto jobs = read_jobs_jsonl(in);
    if (judge == "stub") {
      if (rules.empty()) throw UsageError("--judge stub needs --rules");
      const auto table = rule_table_from_json(parse_json_text(read_text_file(in_workdir(c, rules)), rules));
      for (const auto& job : jobs) {
        auto r = stub_judge(job.spec, job.payload, table);
        judged.insert(judged.end(), r.begin(), r.end());
      }
    } else {
      const auto ep = endpoint_for(cfg, url);
      judged = http_judge_all(ep, jobs, httplib_transport(ep));
    }
    if (!results_out.empty()) {
      std::ostringstream ss;
      write_results_jsonl(ss, judged);
      write_text_file(in_workdir(c, results_out), ss.str());
    }
  }
  const auto report = report_to_json(aggregate(judged, tax));
  const auto path = in_workdir(c, out);
  write_text_file(path, report.dump(2) + "\n");
  fmt::print("{} testpoint results -> {}\noverall {}\n", judged.size(), path.string(), report.at("overall").dump());
  return kExitOk;
}

int cmd_plot(const Common& c, const std::string& metrics, const std::string& out) {
  const auto paths = emit_plots_file(in_workdir(c, metrics), in_workdir(c, out));
  for (const auto& p : paths) fmt::print("{}\n", p.string());
  return kExitOk;
}

int cmd_selftest(const std::optional<std::string>& inject) {
  if (inject) {
    bool known = false;
    for (auto n : kSelftestChecks) known = known || n == *inject;
    if (!known) throw UsageError(fmt::format("unknown check '{}'; checks: {}", *inject, fmt::join(kSelftestChecks, ", ")));
  }
  const auto results = run_selftest(inject ? std::optional<std::string_view>(*inject) : std::nullopt);
  bool ok = true;
  for (const auto& r : results) {
    fmt::print("{} {:<18} measured {:.3e}  tolerance {:.1e}\n", r.passed ? "PASS" : "FAIL", r.name, r.measured,
               r.tolerance);
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitCheck;
}

int exit_code_for(const Error& e) {
  const auto& cat = e.category();
  if (cat == "ConfigError" || cat == "CheckpointError" || cat == "PlotError") return kExitUsage;
  if (cat == "JudgeUnavailable" || cat == "ProtocolError") return kExitService;
  return kExitCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pairwise-preference GRPO lab for toy flow-matching models, plus a benchmark harness."};
  app.footer(kExitFooter);
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--workdir", common.workdir, "Directory that every relative path flag resolves against");
    sub->add_option("--config", common.config, "Run configuration JSON (defaults apply when omitted)");
    sub->add_option("--seed", common.seed, "Override the configured seed");
    sub->add_option("--jobs", common.jobs, "Worker threads; results do not depend on it")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", common.quiet, "Suppress progress output");
    sub->footer(kExitFooter);
  };

  std::string fm_out = "fm_checkpoint.json";
  auto* train_fm = app.add_subcommand("train-fm", "Train the velocity field with flow matching");
  add_common(train_fm);
  train_fm->add_option("--out", fm_out, "Checkpoint path")->capture_default_str();

  std::string grpo_ckpt = "fm_checkpoint.json", grpo_out = "grpo_checkpoint.json";
  std::optional<std::string> reward_mode;
  std::optional<std::size_t> iterations;
  auto* grpo = app.add_subcommand("grpo", "Fine-tune a checkpoint with GRPO; writes grpo_metrics.csv");
  add_common(grpo);
  grpo->add_option("--checkpoint", grpo_ckpt, "Input checkpoint")->capture_default_str();
  grpo->add_option("--out", grpo_out, "Output checkpoint")->capture_default_str();
  grpo->add_option("--reward-mode", reward_mode,
                   fmt::format("One of: {}", fmt::join(kRewardModeNames, ", ")));
  grpo->add_option("--iterations", iterations, "Override grpo.iterations");

  std::string hack_ckpt = "fm_checkpoint.json";
  std::optional<std::size_t> n_seeds;
  bool resume = false;
  auto* hack = app.add_subcommand("hack-compare",
                                  "Pointwise score maximization vs pairwise preference on the same biased utility");
  add_common(hack);
  hack->add_option("--checkpoint", hack_ckpt, "Trained flow-matching checkpoint")->capture_default_str();
  hack->add_option("--seeds", n_seeds, "Run seeds 1..N instead of the configured list");
  hack->add_flag("--resume", resume, "Reuse arms already recorded under <workdir>/hack");

  std::string taxonomy, generator = "none", gen_url, gen_out = "prompt_specs.jsonl";
  std::optional<std::size_t> gen_count;
  auto* bench_gen = app.add_subcommand("bench-gen", "Sample benchmark prompt specs");
  add_common(bench_gen);
  bench_gen->add_option("--taxonomy", taxonomy, "Taxonomy JSON (built-in default when omitted)");
  bench_gen->add_option("--count", gen_count, "Number of specs (default bench.num_prompts)");
  bench_gen->add_option("--generator", generator, "none or http (fills prompt text and descriptions)")
      ->check(CLI::IsMember({"none", "http"}))
      ->capture_default_str();
  bench_gen->add_option("--url", gen_url, "Service base URL (else PREFGRPO_JUDGE_URL)");
  bench_gen->add_option("--out", gen_out, "Output JSONL")->capture_default_str();

  std::string judge = "stub", results, samples, rules, judge_url, report_out = "report.json", results_out;
  auto* bench_eval = app.add_subcommand("bench-eval", "Judge samples and aggregate pass rates into a report");
  add_common(bench_eval);
  bench_eval->add_option("--taxonomy", taxonomy, "Taxonomy JSON (built-in default when omitted)");
  bench_eval->add_option("--judge", judge, "stub or http")->check(CLI::IsMember({"stub", "http"}))->capture_default_str();
  bench_eval->add_option("--results", results, "Already judged results JSONL (aggregated as is)");
  bench_eval->add_option("--samples", samples, "Judge jobs JSONL: prompt spec plus payload / sample_ref");
  bench_eval->add_option("--rules", rules, "Rule table JSON for the stub judge");
  bench_eval->add_option("--url", judge_url, "Judge base URL (else PREFGRPO_JUDGE_URL)");
  bench_eval->add_option("--out", report_out, "Report JSON")->capture_default_str();
  bench_eval->add_option("--results-out", results_out, "Also write the judged results JSONL");

  std::string plot_metrics = "grpo_metrics.csv", plot_out = "plots";
  auto* plot = app.add_subcommand("plot", "Render SVG curves from a metrics CSV");
  add_common(plot);
  plot->add_option("--metrics", plot_metrics, "Metrics CSV")->capture_default_str();
  plot->add_option("--out", plot_out, "Output directory")->capture_default_str();

  std::optional<std::string> inject;
  auto* selftest = app.add_subcommand("selftest", "Run the built-in invariant checks");
  selftest->footer(kExitFooter);
  selftest->add_option("--inject", inject,
                       fmt::format("Deliberately break one check: {}", fmt::join(kSelftestChecks, ", ")));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_fm) return cmd_train_fm(common, fm_out);
    if (*grpo) return cmd_grpo(common, grpo_ckpt, grpo_out, reward_mode, iterations);
    if (*hack) return cmd_hack_compare(common, hack_ckpt, n_seeds, resume);
    if (*bench_gen) return cmd_bench_gen(common, taxonomy, gen_count, generator, gen_url, gen_out);
    if (*bench_eval)
      return cmd_bench_eval(common, taxonomy, judge, results, samples, rules, judge_url, report_out, results_out);
    if (*plot) return cmd_plot(common, plot_metrics, plot_out);
    if (*selftest) return cmd_selftest(inject);
  } catch (const UsageError& e) {
    std::cerr << "error: UsageError: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheck;
  }
  return kExitUsage;
}
