#pragma once

// Rectified-flow interpolation, the flow-matching loss, training, and Euler
// ODE sampling for a condition-aware velocity field.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefgrpo/diffcore.hpp"
#include "prefgrpo/errors.hpp"
#include "prefgrpo/rng.hpp"

namespace prefgrpo {

// ---------------------------------------------------------------------------
// Synthetic target distribution

struct MixtureComponent {
  std::vector<double> mean;
  double std = 1.0;
  double weight = 1.0;
};

inline double isotropic_log_density(std::span<const double> x,
                                    std::span<const double> mean, double std) {
  const double d = static_cast<double>(x.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - mean[i]) * (x[i] - mean[i]);
  return -0.5 * d * std::log(2.0 * std::numbers::pi * std * std) - sq / (2.0 * std * std);
}

/// Gaussian mixture with a condition map: each condition id selects the
/// subset of components it may generate from.
class SyntheticDataset {
 public:
  SyntheticDataset() = default;
  SyntheticDataset(std::size_t dims, std::vector<MixtureComponent> components,
                   std::map<std::size_t, std::vector<std::size_t>> conditions)
      : dims_(dims), components_(std::move(components)), conditions_(std::move(conditions)) {
    validate();
  }

  /// Two 2-D modes at (-2, 0) and (2, 0), std 0.3, condition i -> mode i.
  static SyntheticDataset two_mode_fixture() {
    return SyntheticDataset(2,
                            {{{-2.0, 0.0}, 0.3, 0.5}, {{2.0, 0.0}, 0.3, 0.5}},
                            {{0, {0}}, {1, {1}}});
  }

  std::size_t dims() const noexcept { return dims_; }
  const std::vector<MixtureComponent>& components() const noexcept { return components_; }
  const std::map<std::size_t, std::vector<std::size_t>>& conditions() const noexcept {
    return conditions_;
  }
  std::size_t num_conditions() const noexcept { return conditions_.size(); }
  std::vector<std::size_t> condition_ids() const {
    std::vector<std::size_t> ids;
    for (const auto& [id, _] : conditions_) ids.push_back(id);
    return ids;
  }

  const std::vector<std::size_t>& allowed(std::size_t c) const {
    auto it = conditions_.find(c);
    if (it == conditions_.end()) throw ContractError("unknown condition " + std::to_string(c));
    return it->second;
  }

  /// Exact log-density of the mixture restricted to the components allowed
  /// for `c`, with their weights renormalized.
  double log_density(std::span<const double> x, std::size_t c) const {
    if (x.size() != dims_) throw ShapeError("sample dimension mismatch");
    const auto& idx = allowed(c);
    double wsum = 0.0;
    for (auto k : idx) wsum += components_[k].weight;
    std::vector<double> terms;
    for (auto k : idx) {
      const auto& comp = components_[k];
      if (comp.weight <= 0.0) continue;
      terms.push_back(std::log(comp.weight / wsum) + isotropic_log_density(x, comp.mean, comp.std));
    }
    if (terms.empty()) return -std::numeric_limits<double>::infinity();
    const double mx = *std::max_element(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - mx);
    return mx + std::log(acc);
  }

  std::size_t pick_component(std::size_t c, Engine& eng) const {
    const auto& idx = allowed(c);
    std::vector<double> w;
    for (auto k : idx) w.push_back(components_[k].weight);
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    return idx[dist(eng)];
  }

  std::vector<double> sample(std::size_t c, Engine& eng) const {
    const auto& comp = components_[pick_component(c, eng)];
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> x(dims_);
    for (std::size_t i = 0; i < dims_; ++i) x[i] = comp.mean[i] + comp.std * n(eng);
    return x;
  }

 private:
  void validate() const {
    if (dims_ == 0) throw ContractError("dataset dims must be positive");
    if (components_.empty()) throw ContractError("dataset needs at least one component");
    double total = 0.0;
    for (const auto& c : components_) {
      if (c.mean.size() != dims_) throw ContractError("component mean has wrong dimension");
      if (!(c.std > 0.0)) throw ContractError("component std must be positive");
      if (c.weight < 0.0) throw ContractError("component weights must be nonnegative");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw ContractError("component weights must sum to 1");
    if (conditions_.empty()) throw ContractError("dataset needs at least one condition");
    for (const auto& [id, idx] : conditions_) {
      if (idx.empty()) throw ContractError("condition " + std::to_string(id) + " has no components");
      double w = 0.0;
      for (auto k : idx) {
        if (k >= components_.size())
          throw ContractError("condition " + std::to_string(id) + " references missing component");
        w += components_[k].weight;
      }
      if (!(w > 0.0)) throw ContractError("condition " + std::to_string(id) + " has zero total weight");
    }
  }

  std::size_t dims_ = 0;
  std::vector<MixtureComponent> components_;
  std::map<std::size_t, std::vector<std::size_t>> conditions_;
};

inline nlohmann::json dataset_to_json(const SyntheticDataset& ds) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : ds.components())
    comps.push_back({{"mean", c.mean}, {"std", c.std}, {"weight", c.weight}});
  nlohmann::json conds = nlohmann::json::object();
  for (const auto& [id, idx] : ds.conditions()) conds[std::to_string(id)] = idx;
  return {{"dims", ds.dims()}, {"components", comps}, {"conditions", conds}};
}

inline SyntheticDataset dataset_from_json(const nlohmann::json& j) {
  std::vector<MixtureComponent> comps;
  for (const auto& c : j.at("components"))
    comps.push_back({c.at("mean").get<std::vector<double>>(), c.at("std").get<double>(),
                     c.at("weight").get<double>()});
  std::map<std::size_t, std::vector<std::size_t>> conds;
  for (const auto& [key, idx] : j.at("conditions").items())
    conds[std::stoul(key)] = idx.get<std::vector<std::size_t>>();
  return SyntheticDataset(j.at("dims").get<std::size_t>(), std::move(comps), std::move(conds));
}

// ---------------------------------------------------------------------------
// Velocity field

struct FieldSpec {
  std::size_t dim = 2;
  std::size_t num_conditions = 2;
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::silu;
  std::size_t time_pairs = 8;
  std::size_t cond_dim = 8;

  std::size_t input_dim() const { return dim + 2 * time_pairs + cond_dim; }
  bool operator==(const FieldSpec&) const = default;
};

/// Sinusoidal time features: sin/cos pairs with frequencies spaced
/// geometrically from 1 to 64 rad.
inline std::vector<double> time_features(double t, std::size_t pairs) {
  std::vector<double> f(2 * pairs);
  for (std::size_t k = 0; k < pairs; ++k) {
    const double ratio = pairs > 1 ? static_cast<double>(k) / static_cast<double>(pairs - 1) : 0.0;
    const double w = std::pow(64.0, ratio);
    f[2 * k] = std::sin(w * t);
    f[2 * k + 1] = std::cos(w * t);
  }
  return f;
}

/// Anything that maps (x_t [B,d], t [B], c [B]) to a velocity [B,d], both
/// with its own parameters and with an explicit (possibly tape-bound) set.
template <class F>
concept VelocityModel = requires(const F& f, const Tensor& x, std::span<const double> t,
                                 std::span<const std::size_t> c, const TensorMap& p) {
  { f.dim() } -> std::convertible_to<std::size_t>;
  { f.predict(x, t, c) } -> std::same_as<Tensor>;
  { f.predict(p, x, t, c) } -> std::same_as<Tensor>;
};

/// v_theta(x_t, t, c): an MLP over concat(x_t, time features, condition
/// embedding). The embedding is a learned table looked up with a one-hot
/// matmul so it stays differentiable.
class VelocityField {
 public:
  VelocityField() = default;
  VelocityField(FieldSpec spec, ParamStore params) : spec_(std::move(spec)), params_(std::move(params)) {
    for (const char* name : {"cond_embed"})
      if (!params_.contains(name)) throw CheckpointError(std::string("missing parameter ") + name);
    for (std::size_t l = 0; l < mlp_spec().layers(); ++l)
      if (!params_.contains(mlp_spec().weight(l)) || !params_.contains(mlp_spec().bias(l)))
        throw CheckpointError("field parameters do not match the layer spec");
  }

  static VelocityField create(const FieldSpec& spec, std::uint64_t seed) {
    Engine eng = make_engine({seed, 0xf1e1dULL});
    ParamStore store;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> emb(spec.num_conditions * spec.cond_dim);
    for (auto& v : emb) v = u(eng);
    store.add("cond_embed", Tensor::matrix(spec.num_conditions, spec.cond_dim, std::move(emb)));
    init_mlp(store, mlp_spec_for(spec), eng);
    return VelocityField(spec, std::move(store));
  }

  std::size_t dim() const noexcept { return spec_.dim; }
  const FieldSpec& spec() const noexcept { return spec_; }
  const ParamStore& params() const noexcept { return params_; }
  ParamStore& params() noexcept { return params_; }

  MlpSpec mlp_spec() const { return mlp_spec_for(spec_); }

  Tensor predict(const Tensor& x, std::span<const double> t, std::span<const std::size_t> c) const {
    return predict(params_.values(), x, t, c);
  }

  Tensor predict(const TensorMap& p, const Tensor& x, std::span<const double> t,
                 std::span<const std::size_t> c) const {
    const std::size_t batch = x.rows();
    if (x.rank() != 2 || x.cols() != spec_.dim)
      throw ShapeError("field input must be [batch, " + std::to_string(spec_.dim) + "]");
    if (t.size() != batch || c.size() != batch)
      throw ShapeError("time/condition batch size mismatch");
    const std::size_t tf = 2 * spec_.time_pairs;
    std::vector<double> feats(batch * tf);
    std::vector<double> onehot(batch * spec_.num_conditions, 0.0);
    for (std::size_t r = 0; r < batch; ++r) {
      auto f = time_features(t[r], spec_.time_pairs);
      std::copy(f.begin(), f.end(), feats.begin() + r * tf);
      if (c[r] >= spec_.num_conditions)
        throw ContractError("condition " + std::to_string(c[r]) + " outside embedding table");
      onehot[r * spec_.num_conditions + c[r]] = 1.0;
    }
    const Tensor emb = matmul(Tensor::matrix(batch, spec_.num_conditions, std::move(onehot)),
                              p.at("cond_embed"));
    const Tensor parts[] = {x, Tensor::matrix(batch, tf, std::move(feats)), emb};
    return mlp_forward(p, mlp_spec(), concat(parts));
  }

 private:
  static MlpSpec mlp_spec_for(const FieldSpec& s) {
    return MlpSpec{s.input_dim(), s.hidden, s.dim, s.activation, "mlp"};
  }

  FieldSpec spec_;
  ParamStore params_;
};

/// Velocity at a single point.
template <VelocityModel F>
std::vector<double> velocity_at(const F& field, std::span<const double> x, double t, std::size_t c) {
  const double ts[] = {t};
  const std::size_t cs[] = {c};
  const Tensor v = field.predict(Tensor::matrix(1, x.size(), {x.begin(), x.end()}), ts, cs);
  return v.values();
}

// ---------------------------------------------------------------------------
// Interpolation and loss

inline std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolation time must lie in [0, 1]");
  if (x0.size() != x1.size()) throw ShapeError("interpolate: endpoint dimension mismatch");
  std::vector<double> out(x0.size());
  // Endpoints are returned exactly.
  if (t == 0.0) return {x0.begin(), x0.end()};
  if (t == 1.0) return {x1.begin(), x1.end()};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

struct FmExample {
  std::vector<double> x0;
  std::vector<double> x1;
  double t = 0.0;
  std::size_t c = 0;
};

/// Mean over the batch of ||(x1 - x0) - v(x_t, t, c)||^2.
template <VelocityModel F>
Tensor fm_loss(const F& field, const TensorMap& params, std::span<const FmExample> batch) {
  if (batch.empty()) throw ContractError("fm_loss needs a nonempty batch");
  const std::size_t d = field.dim();
  const std::size_t n = batch.size();
  std::vector<double> xt(n * d), target(n * d), ts(n);
  std::vector<std::size_t> cs(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& ex = batch[r];
    if (ex.x0.size() != d || ex.x1.size() != d) throw ShapeError("fm_loss: sample dimension mismatch");
    const auto mid = interpolate(ex.x0, ex.x1, ex.t);
    for (std::size_t i = 0; i < d; ++i) {
      xt[r * d + i] = mid[i];
      target[r * d + i] = ex.x1[i] - ex.x0[i];
    }
    ts[r] = ex.t;
    cs[r] = ex.c;
  }
  const Tensor v = field.predict(params, Tensor::matrix(n, d, std::move(xt)), ts, cs);
  const Tensor err = square(sub(Tensor::matrix(n, d, std::move(target)), v));
  return scalar_mul(sum(err), 1.0 / static_cast<double>(n));
}

template <VelocityModel F>
Tensor fm_loss(const F& field, std::span<const FmExample> batch) {
  if constexpr (requires { field.params().values(); }) {
    return fm_loss(field, field.params().values(), batch);
  } else {
    return fm_loss(field, TensorMap{}, batch);
  }
}

struct FmConfig {
  std::size_t steps = 5000;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
};

struct FmTrainResult {
  VelocityField field;
  double initial_smoothed_loss = 0.0;  // mean loss over the first window
  double final_smoothed_loss = 0.0;    // mean loss over the last window
};

/// Called every `log_every` steps with (step, loss, running mean of the
/// last `log_every` losses).
using FmLogger = std::function<void(std::size_t, double, double)>;

inline std::vector<FmExample> draw_fm_batch(const SyntheticDataset& ds, std::size_t n, Engine& eng) {
  const auto ids = ds.condition_ids();
  std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<FmExample> batch(n);
  for (auto& ex : batch) {
    ex.c = ids[pick(eng)];
    ex.x0 = ds.sample(ex.c, eng);
    ex.x1.resize(ds.dims());
    for (auto& v : ex.x1) v = normal(eng);
    ex.t = unif(eng);
  }
  return batch;
}

inline FmTrainResult train_fm(const SyntheticDataset& ds, VelocityField field, const FmConfig& cfg,
                              const FmLogger& log = {}) {
  if (cfg.batch_size == 0 || !(cfg.lr > 0) || cfg.log_every == 0)
    throw ContractError("train_fm config values must be positive");
  FmTrainResult res;
  const std::size_t window = std::max<std::size_t>(1, std::min(cfg.log_every, cfg.steps));
  std::vector<double> recent;
  double first_sum = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Engine eng = make_engine({cfg.seed, step, 0xfa11ULL});
    const auto batch = draw_fm_batch(ds, cfg.batch_size, eng);
    Tape tape;
    const TensorMap bound = field.params().bind(tape);
    double loss_value = 0.0;
    TensorMap grads;
    try {
      const Tensor loss = fm_loss(field, bound, std::span<const FmExample>(batch));
      loss_value = loss.item();
      grads = collect_grads(bound, tape.backward(loss));
    } catch (const NumericsError& e) {
      throw TrainingDiverged(step, std::string("flow-matching loss is not finite: ") + e.what());
    }
    adam_step(field.params(), grads, AdamConfig{cfg.lr});
    if (step < window) first_sum += loss_value;
    recent.push_back(loss_value);
    if (recent.size() > window) recent.erase(recent.begin());
    if (log && (step + 1) % cfg.log_every == 0) {
      double s = 0.0;
      for (double v : recent) s += v;
      log(step + 1, loss_value, s / static_cast<double>(recent.size()));
    }
  }
  if (cfg.steps > 0) {
    res.initial_smoothed_loss = first_sum / static_cast<double>(window);
    double s = 0.0;
    for (double v : recent) s += v;
    res.final_smoothed_loss = s / static_cast<double>(recent.size());
  }
  res.field = std::move(field);
  return res;
}

// ---------------------------------------------------------------------------
// Deterministic sampling

inline std::vector<double> initial_noise(std::uint64_t seed, std::size_t dim, std::uint64_t prompt = 0) {
  return normal_vector(StreamKey{seed, prompt, 0}, kInitialNoiseStep, dim);
}

/// Euler integration of dx = v dt along a decreasing knot grid.
template <VelocityModel F>
std::vector<std::vector<double>> ode_path(const F& field, std::span<const double> knots, std::size_t c,
                                          std::vector<double> x) {
  std::vector<std::vector<double>> path{x};
  for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
    const double dt = knots[k + 1] - knots[k];
    const auto v = velocity_at(field, x, knots[k], c);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = x[i] + v[i] * dt;
      if (!std::isfinite(x[i])) throw NumericsError("ODE state became non-finite");
    }
    path.push_back(x);
  }
  return path;
}

inline std::vector<double> uniform_knots(std::size_t n_steps) {
  std::vector<double> knots(n_steps + 1);
  for (std::size_t k = 0; k <= n_steps; ++k)
    knots[k] = 1.0 - static_cast<double>(k) / static_cast<double>(n_steps);
  return knots;
}

/// Draws x ~ N(0, I) at t = 1 and integrates to t = 0 in `n_steps` Euler steps.
template <VelocityModel F>
std::vector<double> ode_sample(const F& field, std::size_t c, std::size_t n_steps, std::uint64_t seed) {
  if (n_steps < 1) throw DomainError("ode_sample needs n_steps >= 1");
  const auto knots = uniform_knots(n_steps);
  return ode_path(field, knots, c, initial_noise(seed, field.dim())).back();
}

}  // namespace prefgrpo
