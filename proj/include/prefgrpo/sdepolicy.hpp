#pragma once

// Euler-Maruyama sampler for the SDE that shares marginals with the flow
// ODE, and the Gaussian per-step policy it induces.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefgrpo/errors.hpp"
#include "prefgrpo/flowmatch.hpp"
#include "prefgrpo/rng.hpp"

namespace prefgrpo {

/// T denoising steps on knots t_k = (T - k) / (T + 1), k = 0..T. Every step
/// but the last starts strictly inside (0, 1); the last one lands on t = 0
/// and is taken deterministically.
struct TimestepSchedule {
  std::size_t n_steps = 25;
  double noise_scale_a = 0.7;

  std::vector<double> knots() const {
    if (n_steps < 1) throw ContractError("schedule needs at least one step");
    if (!(noise_scale_a >= 0.0)) throw DomainError("noise scale a must be >= 0");
    std::vector<double> k(n_steps + 1);
    const double denom = static_cast<double>(n_steps + 1);
    for (std::size_t i = 0; i <= n_steps; ++i)
      k[i] = static_cast<double>(n_steps - i) / denom;
    return k;
  }
};

/// sigma_t = a * sqrt(t / (1 - t)).
inline double sigma_t(double a, double t) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("sigma_t needs t in (0, 1)");
  if (!(a >= 0.0)) throw DomainError("sigma_t needs a >= 0");
  return a * std::sqrt(t / (1.0 - t));
}

namespace detail {

// drift = v + sigma^2/(2t) * (x + (1 - t) v); written so the batched tape
// version in grpo.hpp performs the same floating-point operations.
inline std::vector<double> drift_from_velocity(std::span<const double> x, std::span<const double> v,
                                               double t, double a) {
  const double s = sigma_t(a, t);
  const double k = s * s / (2.0 * t);
  const double omt = 1.0 - t;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = v[i] + k * (x[i] + omt * v[i]);
  return out;
}

inline double log_norm_const(std::size_t d, double std) {
  return -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
         static_cast<double>(d) * std::log(std);
}

}  // namespace detail

template <VelocityModel F>
std::vector<double> drift(const F& field, std::span<const double> x, double t, std::size_t c, double a) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("drift needs t in (0, 1)");
  const auto v = velocity_at(field, x, t, c);
  return detail::drift_from_velocity(x, v, t, a);
}

struct StepResult {
  std::vector<double> x_next;
  std::vector<double> mean;
  double std = 0.0;
};

/// One Euler-Maruyama step with negative dt:
///   mean = x + drift * dt,  std = sigma_t * sqrt(|dt|),  x' = mean + std * noise.
/// The step that lands on t = 0 is a plain Euler ODE step with std = 0.
template <VelocityModel F>
StepResult sde_step(const F& field, std::span<const double> x, double t, double dt, std::size_t c,
                    std::span<const double> noise, double a) {
  if (!(dt < 0.0)) throw DomainError("sde_step needs dt < 0");
  if (!(t > 0.0 && t < 1.0)) throw DomainError("sde_step needs t in (0, 1)");
  if (t + dt < -1e-12) throw DomainError("sde_step would step past t = 0");
  if (noise.size() != x.size()) throw ShapeError("noise dimension mismatch");
  if (!(a >= 0.0)) throw DomainError("noise scale a must be >= 0");
  const auto v = velocity_at(field, x, t, c);
  StepResult r;
  r.mean.resize(x.size());
  r.x_next.resize(x.size());
  const bool final_step = t + dt <= 1e-12;
  if (final_step) {
    for (std::size_t i = 0; i < x.size(); ++i) r.mean[i] = x[i] + v[i] * dt;
    r.std = 0.0;
  } else {
    const auto dr = detail::drift_from_velocity(x, v, t, a);
    for (std::size_t i = 0; i < x.size(); ++i) r.mean[i] = x[i] + dr[i] * dt;
    r.std = sigma_t(a, t) * std::sqrt(-dt);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.x_next[i] = r.mean[i] + r.std * noise[i];
    if (!std::isfinite(r.x_next[i])) throw NumericsError("SDE state became non-finite");
  }
  return r;
}

/// Isotropic Gaussian log-density of x under N(mean, std^2 I).
inline double step_log_prob(std::span<const double> mean, double std, std::span<const double> x) {
  if (!(std > 0.0)) throw DomainError("step_log_prob needs std > 0");
  if (mean.size() != x.size()) throw ShapeError("step_log_prob dimension mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - mean[i];
    sq += diff * diff;
  }
  const double inv = 1.0 / (2.0 * std * std);
  return detail::log_norm_const(x.size(), std) - sq * inv;
}

/// p_theta / p_old from log-probabilities.
inline double step_ratio(double theta_logprob, double old_logprob) {
  if (!std::isfinite(theta_logprob) || !std::isfinite(old_logprob))
    throw NumericsError("step_ratio needs finite log-probabilities");
  const double diff = theta_logprob - old_logprob;
  if (diff > 700.0) throw NumericsError("likelihood ratio overflows");
  return std::exp(diff);
}

/// KL between N(mean_theta, std^2 I) and N(mean_ref, std^2 I).
inline double step_kl(std::span<const double> mean_theta, std::span<const double> mean_ref, double std) {
  if (!(std > 0.0)) throw DomainError("step_kl needs std > 0");
  if (mean_theta.size() != mean_ref.size()) throw ShapeError("step_kl dimension mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < mean_theta.size(); ++i) {
    const double diff = mean_theta[i] - mean_ref[i];
    sq += diff * diff;
  }
  return sq / (2.0 * std * std);
}

struct TrajectoryStep {
  double t = 0.0;
  double dt = 0.0;
  std::vector<double> x_t;
  std::vector<double> mean;
  double std = 0.0;
  std::vector<double> x_next;
  std::vector<double> noise;
  double log_prob = 0.0;  // meaningful only when stochastic
  bool stochastic = false;
};

struct Trajectory {
  std::size_t condition = 0;
  std::vector<double> x_init;
  std::vector<TrajectoryStep> steps;
  std::vector<double> x_final;

  std::size_t stochastic_steps() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.stochastic ? 1 : 0;
    return n;
  }
};

/// Rolls the policy out from a given initial state. Step k draws its noise
/// from the stream (key, k).
template <VelocityModel F>
Trajectory rollout(const F& field, const TimestepSchedule& schedule, std::size_t c,
                   std::vector<double> x_init, const StreamKey& key) {
  const auto knots = schedule.knots();
  Trajectory traj;
  traj.condition = c;
  traj.x_init = x_init;
  std::vector<double> x = std::move(x_init);
  traj.steps.reserve(schedule.n_steps);
  for (std::size_t k = 0; k < schedule.n_steps; ++k) {
    TrajectoryStep st;
    st.t = knots[k];
    st.dt = knots[k + 1] - knots[k];
    st.x_t = x;
    const bool last = k + 1 == schedule.n_steps;
    st.noise = last ? std::vector<double>(x.size(), 0.0) : normal_vector(key, k, x.size());
    auto r = sde_step(field, x, st.t, st.dt, c, st.noise, schedule.noise_scale_a);
    st.mean = std::move(r.mean);
    st.std = r.std;
    st.x_next = std::move(r.x_next);
    st.stochastic = st.std > 0.0;
    if (st.stochastic) st.log_prob = step_log_prob(st.mean, st.std, st.x_next);
    x = st.x_next;
    traj.steps.push_back(std::move(st));
  }
  traj.x_final = x;
  return traj;
}

/// x_T ~ N(0, I) from the seed stream, then the SDE rollout.
template <VelocityModel F>
Trajectory sample_trajectory(const F& field, const TimestepSchedule& schedule, std::size_t c,
                             std::uint64_t seed) {
  return rollout(field, schedule, c, initial_noise(seed, field.dim()), StreamKey{seed, 0, 0});
}

/// One JSON object per step: {t, x_t, mean, std, noise, log_prob}; log_prob
/// is null for the deterministic final step.
inline void write_trajectory_jsonl(std::ostream& os, const Trajectory& traj) {
  for (const auto& s : traj.steps) {
    nlohmann::json j = {{"t", s.t}, {"x_t", s.x_t}, {"mean", s.mean}, {"std", s.std}, {"noise", s.noise}};
    j["log_prob"] = s.stochastic ? nlohmann::json(s.log_prob) : nlohmann::json(nullptr);
    os << j.dump() << '\n';
  }
}

}  // namespace prefgrpo
