#pragma once

// Built-in invariant checks run by `prefgrpo selftest`. Each check can be
// deliberately broken by name to confirm that it is able to fail.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "prefgrpo/diffcore.hpp"
#include "prefgrpo/flowmatch.hpp"
#include "prefgrpo/grpo.hpp"
#include "prefgrpo/rewards.hpp"
#include "prefgrpo/sdepolicy.hpp"

namespace prefgrpo {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

inline constexpr std::string_view kSelftestChecks[] = {"grad_fm", "grad_grpo", "ode_sde", "winrate_spectrum",
                                                       "advantage_norm"};

namespace detail {

/// Worst relative error between tape gradients and central differences over
/// `probes` randomly chosen parameter entries. `loss` maps a parameter map
/// to a scalar tensor.
template <class LossFn>
double gradient_probe_error(const ParamStore& store, LossFn&& loss, std::size_t probes, std::uint64_t seed,
                            double analytic_scale = 1.0) {
  Tape tape;
  const TensorMap bound = store.bind(tape);
  const auto grads = collect_grads(bound, tape.backward(loss(bound)));
  std::vector<std::pair<std::string, std::size_t>> entries;
  for (const auto& [name, t] : store.values())
    for (std::size_t i = 0; i < t.data().size(); ++i) entries.emplace_back(name, i);
  Engine eng = make_engine({seed, 0x9ad});
  std::uniform_int_distribution<std::size_t> pick(0, entries.size() - 1);
  double worst = 0.0;
  constexpr double h = 1e-6;
  for (std::size_t p = 0; p < probes; ++p) {
    const auto& [name, i] = entries[pick(eng)];
    auto eval = [&](double delta) {
      TensorMap m = store.values();
      auto data = m.at(name).values();
      data[i] += delta;
      m.at(name) = Tensor(m.at(name).shape(), std::move(data));
      return loss(m).item();
    };
    const double fd = (eval(h) - eval(-h)) / (2.0 * h);
    const double an = grads.at(name).data()[i] * analytic_scale;
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

inline FieldSpec small_field_spec() {
  FieldSpec s;
  s.hidden = {16, 16};
  s.time_pairs = 2;
  s.cond_dim = 2;
  return s;
}

}  // namespace detail

inline CheckResult check_grad_fm(bool inject) {
  const auto ds = SyntheticDataset::two_mode_fixture();
  const auto field = VelocityField::create(detail::small_field_spec(), 7);
  Engine eng = make_engine({7, 0xba7c});
  const auto batch = draw_fm_batch(ds, 16, eng);
  const double err = detail::gradient_probe_error(
      field.params(), [&](const TensorMap& p) { return fm_loss(field, p, batch); }, 50, 7, inject ? 1.001 : 1.0);
  return {"grad_fm", err, 1e-4, err <= 1e-4};
}

inline CheckResult check_grad_grpo(bool inject) {
  const auto ds = SyntheticDataset::two_mode_fixture();
  const auto old = VelocityField::create(detail::small_field_spec(), 11);
  const TimestepSchedule schedule{6, 0.7};
  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.prompts_per_iter = 2;
  cfg.seed = 11;
  auto groups = rollout_groups(old, schedule, ds, cfg, 0);
  for (auto& g : groups) {
    std::vector<double> r;
    for (const auto& m : g.members) r.push_back(m.x_final[0] + 0.5 * m.x_final[1]);
    g.rewards = r;
    g.advantages = group_advantages(r, 1e-8);
  }
  // Differentiate away from theta_old so the ratio and KL terms are active.
  VelocityField current = old;
  Engine eng = make_engine({11, 0x5e7});
  std::normal_distribution<double> n(0.0, 1e-3);
  for (const auto& [name, t] : old.params().values()) {
    auto d = t.values();
    for (auto& v : d) v += n(eng);
    current.params().set(name, Tensor(t.shape(), std::move(d)));
  }
  const double err = detail::gradient_probe_error(
      current.params(),
      [&](const TensorMap& p) { return grpo_objective(groups, current, p, old, schedule.noise_scale_a, 0.2, 0.05).objective; },
      50, 11, inject ? 1.001 : 1.0);
  return {"grad_grpo", err, 1e-4, err <= 1e-4};
}

inline CheckResult check_ode_sde(bool inject) {
  const auto field = VelocityField::create(detail::small_field_spec(), 3);
  const TimestepSchedule schedule{25, inject ? 1e-3 : 0.0};
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const std::size_t c = s % 2;
    const auto x0 = initial_noise(s, field.dim());
    const auto traj = rollout(field, schedule, c, x0, StreamKey{s, 0, 0});
    const auto path = ode_path(field, schedule.knots(), c, x0);
    for (std::size_t k = 0; k < traj.steps.size(); ++k)
      for (std::size_t i = 0; i < x0.size(); ++i)
        worst = std::max(worst, std::abs(traj.steps[k].x_next[i] - path[k + 1][i]));
  }
  return {"ode_sde", worst, 1e-12, worst <= 1e-12};
}

inline CheckResult check_winrate_spectrum(bool inject) {
  std::vector<Verdict> verdicts;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j) verdicts.push_back(Verdict::i_wins);
  if (inject) verdicts.front() = Verdict::tie;
  const auto w = win_rates_from_verdicts(8, verdicts);
  const double err = std::abs(population_std(w) - 0.3273268353539886);
  return {"winrate_spectrum", err, 1e-9, err <= 1e-9};
}

inline CheckResult check_advantage_norm(bool inject) {
  Engine eng = make_engine({0xad7});
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_int_distribution<std::size_t> gsize(2, 16);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(gsize(eng));
    for (auto& v : r) v = u(eng);
    auto a = group_advantages(r, 1e-8).values;
    if (inject) {
      // Sample instead of population std.
      const double k = std::sqrt(static_cast<double>(r.size() - 1) / static_cast<double>(r.size()));
      for (auto& v : a) v *= k;
    }
    worst = std::max({worst, std::abs(population_mean(a)), std::abs(population_std(a) - 1.0)});
  }
  return {"advantage_norm", worst, 1e-9, worst <= 1e-9};
}

/// Runs every check; `inject` names one check to perturb.
inline std::vector<CheckResult> run_selftest(std::optional<std::string_view> inject = {}) {
  auto hit = [&](std::string_view name) { return inject && *inject == name; };
  return {check_grad_fm(hit("grad_fm")), check_grad_grpo(hit("grad_grpo")), check_ode_sde(hit("ode_sde")),
          check_winrate_spectrum(hit("winrate_spectrum")), check_advantage_norm(hit("advantage_norm"))};
}

}  // namespace prefgrpo
