#pragma once

// Group-relative advantages, the clipped KL-regularized objective, the
// training loop for the score-maximization and preference regimes, and the
// illusory-advantage diagnostics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prefgrpo/diffcore.hpp"
#include "prefgrpo/errors.hpp"
#include "prefgrpo/flowmatch.hpp"
#include "prefgrpo/parallel.hpp"
#include "prefgrpo/rewards.hpp"
#include "prefgrpo/rng.hpp"
#include "prefgrpo/sdepolicy.hpp"

namespace prefgrpo {

enum class RewardMode { pointwise, score_winrate, pairwise_pref, pref_plus_score };

inline constexpr std::string_view kRewardModeNames[] = {"pointwise", "score_winrate", "pairwise_pref",
                                                        "pref_plus_score"};

inline std::string_view to_string(RewardMode m) { return kRewardModeNames[static_cast<int>(m)]; }

inline std::optional<RewardMode> parse_reward_mode(std::string_view s) {
  for (int i = 0; i < 4; ++i)
    if (kRewardModeNames[i] == s) return static_cast<RewardMode>(i);
  return std::nullopt;
}

inline double population_mean(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

inline double population_std(std::span<const double> r) {
  const double mu = population_mean(r);
  double s = 0.0;
  for (double v : r) s += (v - mu) * (v - mu);
  return std::sqrt(s / static_cast<double>(r.size()));
}

struct AdvantageVector {
  std::vector<double> values;
  bool degenerate = false;
};

/// (r_i - mean) / popstd. Groups whose std falls below tau_std get all-zero
/// advantages and the degenerate flag.
inline AdvantageVector group_advantages(std::span<const double> rewards, double tau_std) {
  if (rewards.size() < 2) throw ContractError("group advantages need at least 2 rewards");
  if (tau_std < 0.0) throw ContractError("tau_std must be >= 0");
  const double mu = population_mean(rewards);
  const double sd = population_std(rewards);
  AdvantageVector adv;
  adv.values.assign(rewards.size(), 0.0);
  if (sd < tau_std || sd == 0.0) {
    adv.degenerate = true;
    return adv;
  }
  for (std::size_t i = 0; i < rewards.size(); ++i) adv.values[i] = (rewards[i] - mu) / sd;
  return adv;
}

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
inline double clipped_term(double ratio, double advantage, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("clip epsilon must lie in (0, 1)");
  if (!(ratio > 0.0)) throw DomainError("likelihood ratio must be positive");
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

struct IllusoryDiagnostics {
  double sigma_r = 0.0;
  double max_abs_adv = 0.0;
  double max_reward_gap = 0.0;           // max |r_i - mean|
  std::optional<double> amplification;  // max_abs_adv / max_reward_gap
  double true_quality = 0.0;
  double bias_feature_mean = 0.0;
};

inline IllusoryDiagnostics diagnose(std::span<const double> rewards, const AdvantageVector& adv) {
  IllusoryDiagnostics d;
  d.sigma_r = population_std(rewards);
  const double mu = population_mean(rewards);
  for (double a : adv.values) d.max_abs_adv = std::max(d.max_abs_adv, std::abs(a));
  for (double r : rewards) d.max_reward_gap = std::max(d.max_reward_gap, std::abs(r - mu));
  if (d.max_reward_gap > 0.0) d.amplification = d.max_abs_adv / d.max_reward_gap;
  return d;
}

/// G trajectories for one condition sharing the initial noise draw.
struct RolloutGroup {
  std::size_t condition = 0;
  std::vector<Trajectory> members;
  std::vector<double> rewards;
  std::vector<double> oracle_scores;
  AdvantageVector advantages;
  IllusoryDiagnostics diagnostics;
};

struct ObjectiveValue {
  Tensor objective;           // surrogate - beta * kl, attached when params are
  double surrogate = 0.0;
  double kl = 0.0;            // mean per-step KL to the reference policy
  double clip_fraction = 0.0; // share of steps where the clip branch was taken
};

/// (1/|groups|) sum_g (1/G) sum_i (1/T_i) sum_t min(r A, clip(r) A) - beta * KL
/// over the stochastic steps of every member. `params` are the current
/// policy parameters (bind them to a tape to differentiate); the recorded
/// step log-probs act as the old policy and `ref` as the reference policy.
inline ObjectiveValue grpo_objective(std::span<const RolloutGroup> groups, const VelocityField& field,
                                     const TensorMap& params, const VelocityField& ref, double noise_scale_a,
                                     double epsilon, double beta) {
  if (groups.empty()) throw ContractError("objective needs at least one group");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("clip epsilon must lie in (0, 1)");
  const std::size_t d = field.dim();

  std::vector<double> xs, xn, omt, kk, dts, inv2var, norm_const, logp_old, adv, weight, ts;
  std::vector<std::size_t> cs;
  for (const auto& g : groups) {
    if (g.members.empty()) throw ContractError("empty rollout group");
    if (g.advantages.values.size() != g.members.size())
      throw ContractError("rollout group is missing advantages");
    const double group_w = 1.0 / (static_cast<double>(groups.size()) * static_cast<double>(g.members.size()));
    for (std::size_t i = 0; i < g.members.size(); ++i) {
      const auto& traj = g.members[i];
      const std::size_t n_stoch = traj.stochastic_steps();
      if (n_stoch == 0) continue;
      for (const auto& st : traj.steps) {
        if (!st.stochastic) continue;
        xs.insert(xs.end(), st.x_t.begin(), st.x_t.end());
        xn.insert(xn.end(), st.x_next.begin(), st.x_next.end());
        const double s = sigma_t(noise_scale_a, st.t);
        const double k = s * s / (2.0 * st.t);
        for (std::size_t j = 0; j < d; ++j) {
          omt.push_back(1.0 - st.t);
          kk.push_back(k);
          dts.push_back(st.dt);
        }
        ts.push_back(st.t);
        cs.push_back(traj.condition);
        inv2var.push_back(1.0 / (2.0 * st.std * st.std));
        norm_const.push_back(detail::log_norm_const(d, st.std));
        logp_old.push_back(st.log_prob);
        adv.push_back(g.advantages.values[i]);
        weight.push_back(group_w / static_cast<double>(n_stoch));
      }
    }
  }
  const std::size_t n = ts.size();
  ObjectiveValue out;
  if (n == 0) {
    out.objective = Tensor::scalar(0.0);
    return out;
  }

  const Tensor x = Tensor::matrix(n, d, xs);
  const Tensor v = field.predict(params, x, ts, cs);
  // mean = x + (v + k * (x + (1 - t) v)) * dt, same operation order as sde_step.
  const Tensor inner = add(x, mul(Tensor::matrix(n, d, omt), v));
  const Tensor dr = add(v, mul(Tensor::matrix(n, d, kk), inner));
  const Tensor mean = add(x, mul(dr, Tensor::matrix(n, d, dts)));

  const Tensor ones = Tensor::matrix(d, 1, std::vector<double>(d, 1.0));
  const Tensor inv = Tensor::matrix(n, 1, inv2var);
  const Tensor sq = matmul(square(sub(Tensor::matrix(n, d, xn), mean)), ones);
  const Tensor logp = sub(Tensor::matrix(n, 1, norm_const), mul(sq, inv));
  const Tensor ratio = exp(sub(logp, Tensor::matrix(n, 1, logp_old)));

  // min(rA, clip(r)A): where the unclipped branch is the min the term is
  // r*A (gradient flows), otherwise it is the constant clip(r)*A.
  std::vector<double> slope(n), offset(n);
  std::size_t clipped_steps = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double rv = ratio[r];
    const double unclipped = rv * adv[r];
    const double clipped = std::clamp(rv, 1.0 - epsilon, 1.0 + epsilon) * adv[r];
    if (unclipped <= clipped) {
      slope[r] = adv[r] * weight[r];
      offset[r] = 0.0;
    } else {
      slope[r] = 0.0;
      offset[r] = clipped * weight[r];
      ++clipped_steps;
    }
  }
  const Tensor surrogate =
      add(sum(mul(ratio, Tensor::matrix(n, 1, slope))), Tensor::scalar(std::accumulate(offset.begin(), offset.end(), 0.0)));

  // Reference means, evaluated without the tape.
  const Tensor v_ref = ref.predict(x, ts, cs);
  std::vector<double> mean_ref(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t idx = r * d + j;
      const double in_ref = xs[idx] + omt[idx] * v_ref[idx];
      const double dr_ref = v_ref[idx] + kk[idx] * in_ref;
      mean_ref[idx] = xs[idx] + dr_ref * dts[idx];
    }
  const Tensor kl_rows = mul(matmul(square(sub(mean, Tensor::matrix(n, d, std::move(mean_ref)))), ones), inv);
  const Tensor kl = sum(mul(kl_rows, Tensor::matrix(n, 1, weight)));

  out.objective = sub(surrogate, scalar_mul(kl, beta));
  out.surrogate = surrogate.item();
  out.kl = kl.item();
  out.clip_fraction = static_cast<double>(clipped_steps) / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct GrpoConfig {
  std::size_t iterations = 300;
  std::size_t group_size = 8;
  std::size_t prompts_per_iter = 2;
  double epsilon = 0.2;
  double beta = 1e-3;
  double lr = 1e-3;
  double tau_std = 1e-8;
  std::uint64_t seed = 1;
  double lambda = 0.5;
  RewardMode reward_mode = RewardMode::pairwise_pref;
  std::size_t jobs = 1;

  bool operator==(const GrpoConfig&) const = default;
};

/// One row of the metrics log; per-group diagnostics are averaged.
struct GrpoIterationMetrics {
  std::size_t iteration = 0;
  RewardMode reward_mode = RewardMode::pairwise_pref;
  double mean_reward = 0.0;
  double sigma_r = 0.0;
  double max_abs_adv = 0.0;
  std::optional<double> amplification;
  double true_quality = 0.0;
  double bias_feature_mean = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  double oracle_score = 0.0;
  std::size_t comparisons = 0;
  std::vector<IllusoryDiagnostics> groups;
};

struct GrpoResult {
  VelocityField field;
  std::vector<GrpoIterationMetrics> metrics;
};

using GrpoLogger = std::function<void(const GrpoIterationMetrics&)>;

inline std::vector<double> rewards_for(RewardMode mode, const RolloutGroup& g, const PairwiseComparator& cmp,
                                       double lambda, Engine& eng, std::size_t& comparisons) {
  std::vector<std::vector<double>> finals;
  for (const auto& t : g.members) finals.push_back(t.x_final);
  const std::size_t pairs = g.members.size() * (g.members.size() - 1) / 2;
  const std::size_t per_pair = cmp.config().order_mode == OrderMode::both_orders ? 2 : 1;
  switch (mode) {
    case RewardMode::pointwise: return g.oracle_scores;
    case RewardMode::score_winrate: return score_to_winrates(g.oracle_scores);
    case RewardMode::pairwise_pref:
      comparisons += pairs * per_pair;
      return win_rates(cmp, finals, g.condition, eng);
    case RewardMode::pref_plus_score: {
      comparisons += pairs * per_pair;
      const auto w = win_rates(cmp, finals, g.condition, eng);
      return combined_reward(w, g.oracle_scores, lambda);
    }
  }
  return {};
}

/// Rolls out `prompts_per_iter` groups for iteration `iter`. Conditions are
/// drawn from (seed, iter); group p uses prompt id iter * P + p, member i
/// its own step-noise stream, all members the prompt's initial noise.
inline std::vector<RolloutGroup> rollout_groups(const VelocityField& field, const TimestepSchedule& schedule,
                                                const SyntheticDataset& ds, const GrpoConfig& cfg,
                                                std::size_t iter) {
  const auto ids = ds.condition_ids();
  Engine cond_eng = make_engine({cfg.seed, iter, 0xc0dULL});
  std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
  std::vector<RolloutGroup> groups(cfg.prompts_per_iter);
  for (std::size_t p = 0; p < groups.size(); ++p) {
    groups[p].condition = ids[pick(cond_eng)];
    groups[p].members.resize(cfg.group_size);
  }
  const std::size_t total = cfg.prompts_per_iter * cfg.group_size;
  parallel_for(total, cfg.jobs, [&](std::size_t idx) {
    const std::size_t p = idx / cfg.group_size;
    const std::size_t i = idx % cfg.group_size;
    const std::uint64_t prompt = iter * cfg.prompts_per_iter + p;
    auto x_init = initial_noise(cfg.seed, field.dim(), prompt);
    groups[p].members[i] =
        rollout(field, schedule, groups[p].condition, std::move(x_init), StreamKey{cfg.seed, prompt, i + 1});
  });
  return groups;
}

inline GrpoResult train_grpo(VelocityField field, const TimestepSchedule& schedule, const SyntheticDataset& ds,
                             const OracleConfig& oracle_cfg, const GrpoConfig& cfg, const GrpoLogger& log = {}) {
  if (cfg.group_size < 2) throw ContractError("GRPO needs a group size of at least 2");
  if (cfg.prompts_per_iter < 1) throw ContractError("GRPO needs at least one prompt per iteration");
  if (!(cfg.lr > 0.0)) throw ContractError("GRPO learning rate must be > 0");
  const PointwiseOracle oracle(ds, oracle_cfg);
  const PairwiseComparator cmp(ds, oracle_cfg);
  const VelocityField ref = field;

  GrpoResult res;
  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    auto groups = rollout_groups(field, schedule, ds, cfg, iter);
    GrpoIterationMetrics m;
    m.iteration = iter;
    m.reward_mode = cfg.reward_mode;
    double amp_sum = 0.0;
    std::size_t amp_n = 0;
    for (std::size_t p = 0; p < groups.size(); ++p) {
      auto& g = groups[p];
      std::vector<std::vector<double>> finals;
      for (const auto& t : g.members) {
        finals.push_back(t.x_final);
        g.oracle_scores.push_back(oracle.score(t.x_final, g.condition));
      }
      Engine cmp_eng = make_engine({cfg.seed, iter * cfg.prompts_per_iter + p, 0xc0ffeeULL});
      g.rewards = rewards_for(cfg.reward_mode, g, cmp, cfg.lambda, cmp_eng, m.comparisons);
      g.advantages = group_advantages(g.rewards, cfg.tau_std);
      g.diagnostics = diagnose(g.rewards, g.advantages);
      g.diagnostics.true_quality = true_quality_metric(ds, finals, g.condition);
      double bias = 0.0;
      for (const auto& x : finals) bias += bias_feature(oracle_cfg.bias_feature, x);
      g.diagnostics.bias_feature_mean = bias / static_cast<double>(finals.size());

      m.mean_reward += population_mean(g.rewards);
      m.sigma_r += g.diagnostics.sigma_r;
      m.max_abs_adv += g.diagnostics.max_abs_adv;
      m.true_quality += g.diagnostics.true_quality;
      m.bias_feature_mean += g.diagnostics.bias_feature_mean;
      m.oracle_score += population_mean(g.oracle_scores);
      if (g.diagnostics.amplification) {
        amp_sum += *g.diagnostics.amplification;
        ++amp_n;
      }
      m.groups.push_back(g.diagnostics);
    }
    const double np = static_cast<double>(groups.size());
    m.mean_reward /= np;
    m.sigma_r /= np;
    m.max_abs_adv /= np;
    m.true_quality /= np;
    m.bias_feature_mean /= np;
    m.oracle_score /= np;
    if (amp_n) m.amplification = amp_sum / static_cast<double>(amp_n);

    Tape tape;
    const TensorMap bound = field.params().bind(tape);
    TensorMap grads;
    try {
      const auto obj = grpo_objective(groups, field, bound, ref, schedule.noise_scale_a, cfg.epsilon, cfg.beta);
      m.objective = obj.objective.item();
      m.kl = obj.kl;
      if (obj.objective.attached())
        grads = collect_grads(bound, tape.backward(scalar_mul(obj.objective, -1.0)));
    } catch (const NumericsError& e) {
      throw TrainingDiverged(iter, std::string("GRPO objective is not finite: ") + e.what());
    }
    // A schedule without stochastic steps leaves nothing to optimize.
    if (!grads.empty()) adam_step(field.params(), grads, AdamConfig{cfg.lr});
    if (log) log(m);
    res.metrics.push_back(std::move(m));
  }
  res.field = std::move(field);
  return res;
}

// ---------------------------------------------------------------------------
// Policy evaluation and the reward-hacking comparison

struct PolicyEval {
  double oracle_score = 0.0;
  double true_quality = 0.0;
  double bias_feature_mean = 0.0;
};

/// SDE samples from every condition with a fixed evaluation stream.
inline PolicyEval evaluate_policy(const VelocityField& field, const TimestepSchedule& schedule,
                                  const SyntheticDataset& ds, const OracleConfig& oracle_cfg,
                                  std::size_t samples_per_condition, std::uint64_t eval_seed, std::size_t jobs = 1) {
  const PointwiseOracle oracle(ds, oracle_cfg);
  const auto ids = ds.condition_ids();
  const std::size_t n = ids.size() * samples_per_condition;
  std::vector<std::vector<double>> finals(n);
  parallel_for(n, jobs, [&](std::size_t idx) {
    const std::size_t c = ids[idx / samples_per_condition];
    const StreamKey key{eval_seed, idx, 0};
    finals[idx] = rollout(field, schedule, c, normal_vector(key, kInitialNoiseStep, field.dim()), key).x_final;
  });
  PolicyEval e;
  for (std::size_t idx = 0; idx < n; ++idx) {
    const std::size_t c = ids[idx / samples_per_condition];
    e.oracle_score += oracle.score(finals[idx], c);
    e.true_quality += ds.log_density(finals[idx], c);
    e.bias_feature_mean += bias_feature(oracle_cfg.bias_feature, finals[idx]);
  }
  e.oracle_score /= static_cast<double>(n);
  e.true_quality /= static_cast<double>(n);
  e.bias_feature_mean /= static_cast<double>(n);
  return e;
}

struct ArmOutcome {
  RewardMode mode = RewardMode::pointwise;
  PolicyEval start;
  PolicyEval end;
  std::vector<GrpoIterationMetrics> series;
  VelocityField field;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  ArmOutcome score_max;   // arm A: pointwise biased-compressed scores
  ArmOutcome preference;  // arm B: pairwise preference on the same utility
};

struct HackingConfig {
  TimestepSchedule schedule;
  OracleConfig oracle;
  GrpoConfig grpo;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t eval_samples = 256;
  std::uint64_t eval_seed = 0xe7a1ULL;
};

inline ArmOutcome run_arm(const VelocityField& init, const SyntheticDataset& ds, const HackingConfig& cfg,
                          RewardMode mode, std::uint64_t seed, const GrpoLogger& log = {}) {
  GrpoConfig g = cfg.grpo;
  g.reward_mode = mode;
  g.seed = seed;
  ArmOutcome arm;
  arm.mode = mode;
  arm.start = evaluate_policy(init, cfg.schedule, ds, cfg.oracle, cfg.eval_samples, cfg.eval_seed, g.jobs);
  auto res = train_grpo(init, cfg.schedule, ds, cfg.oracle, g, log);
  arm.end = evaluate_policy(res.field, cfg.schedule, ds, cfg.oracle, cfg.eval_samples, cfg.eval_seed, g.jobs);
  arm.series = std::move(res.metrics);
  arm.field = std::move(res.field);
  return arm;
}

/// Both arms from the same checkpoint and seed.
inline SeedOutcome hacking_seed(const VelocityField& init, const SyntheticDataset& ds, const HackingConfig& cfg,
                                std::uint64_t seed) {
  SeedOutcome out;
  out.seed = seed;
  out.score_max = run_arm(init, ds, cfg, RewardMode::pointwise, seed);
  out.preference = run_arm(init, ds, cfg, RewardMode::pairwise_pref, seed);
  return out;
}

/// Arm A shows the hacking signature: oracle score up, true quality down.
inline bool shows_hacking(const ArmOutcome& a) {
  return a.end.oracle_score > a.start.oracle_score && a.end.true_quality < a.start.true_quality;
}

struct HackingSummary {
  std::size_t seeds = 0;
  std::size_t arm_a_hacked = 0;           // seeds where arm A shows the signature
  std::size_t arm_b_quality_at_least = 0;  // seeds where B's final quality >= A's
  bool passes() const { return seeds > 0 && arm_a_hacked == seeds && arm_b_quality_at_least * 5 >= seeds * 4; }
};

inline HackingSummary summarize(std::span<const SeedOutcome> outcomes) {
  HackingSummary s;
  s.seeds = outcomes.size();
  for (const auto& o : outcomes) {
    if (shows_hacking(o.score_max)) ++s.arm_a_hacked;
    if (o.preference.end.true_quality >= o.score_max.end.true_quality) ++s.arm_b_quality_at_least;
  }
  return s;
}

}  // namespace prefgrpo
