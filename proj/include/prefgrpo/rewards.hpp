#pragma once

// Synthetic reward oracles: pointwise scorers, a pairwise preference judge,
// win rates, score-derived win rates and the joint reward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefgrpo/errors.hpp"
#include "prefgrpo/flowmatch.hpp"
#include "prefgrpo/rng.hpp"

namespace prefgrpo {

enum class OracleKind { true_quality, biased_compressed };
enum class BiasFeature { norm, first_coordinate };
enum class OrderMode { single_randomized, both_orders };

inline OracleKind parse_oracle_kind(std::string_view s) {
  if (s == "true_quality") return OracleKind::true_quality;
  if (s == "biased_compressed") return OracleKind::biased_compressed;
  throw ConfigError("oracle.kind must be true_quality or biased_compressed");
}
inline std::string_view to_string(OracleKind k) {
  return k == OracleKind::true_quality ? "true_quality" : "biased_compressed";
}
inline BiasFeature parse_bias_feature(std::string_view s) {
  if (s == "norm") return BiasFeature::norm;
  if (s == "first_coordinate") return BiasFeature::first_coordinate;
  throw ConfigError("oracle.bias_feature must be norm or first_coordinate");
}
inline std::string_view to_string(BiasFeature f) {
  return f == BiasFeature::norm ? "norm" : "first_coordinate";
}
inline OrderMode parse_order_mode(std::string_view s) {
  if (s == "single_randomized") return OrderMode::single_randomized;
  if (s == "both_orders") return OrderMode::both_orders;
  throw ConfigError("oracle.order_mode must be single_randomized or both_orders");
}
inline std::string_view to_string(OrderMode m) {
  return m == OrderMode::single_randomized ? "single_randomized" : "both_orders";
}

/// Shared knobs of the pointwise oracle and the pairwise comparator.
struct OracleConfig {
  OracleKind kind = OracleKind::biased_compressed;
  double lambda_bias = 0.0;
  BiasFeature bias_feature = BiasFeature::norm;
  double compression_slope = 1.0;
  double tie_threshold = 0.0;
  double flip_noise = 0.0;
  OrderMode order_mode = OrderMode::single_randomized;

  bool operator==(const OracleConfig&) const = default;
};

inline double bias_feature(BiasFeature f, std::span<const double> x) {
  if (f == BiasFeature::first_coordinate) return x.empty() ? 0.0 : x[0];
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Stand-in for a pointwise reward model.
class PointwiseOracle {
 public:
  PointwiseOracle(const SyntheticDataset& target, OracleConfig cfg) : target_(&target), cfg_(cfg) {
    if (cfg_.kind == OracleKind::biased_compressed && !(cfg_.compression_slope > 0.0))
      throw ContractError("compression slope must be > 0");
  }

  /// Log-density plus the spurious bias term.
  double raw(std::span<const double> x, std::size_t c) const {
    return target_->log_density(x, c) + cfg_.lambda_bias * bias_feature(cfg_.bias_feature, x);
  }

  double score(std::span<const double> x, std::size_t c) const {
    if (cfg_.kind == OracleKind::true_quality) return target_->log_density(x, c);
    return stable_sigmoid(cfg_.compression_slope * raw(x, c));
  }

  const OracleConfig& config() const noexcept { return cfg_; }

 private:
  const SyntheticDataset* target_;
  OracleConfig cfg_;
};

inline double pointwise_score(const PointwiseOracle& oracle, std::span<const double> x, std::size_t c) {
  return oracle.score(x, c);
}

enum class Verdict { i_wins, j_wins, tie };

/// Stand-in for a pairwise preference reward model. The latent utility is
/// the true log-density plus the configured bias term.
class PairwiseComparator {
 public:
  PairwiseComparator(const SyntheticDataset& target, OracleConfig cfg) : target_(&target), cfg_(cfg) {
    if (cfg_.tie_threshold < 0.0) throw ContractError("tie threshold must be >= 0");
    if (cfg_.flip_noise < 0.0 || cfg_.flip_noise >= 0.5)
      throw ContractError("flip noise must lie in [0, 0.5)");
  }

  double utility(std::span<const double> x, std::size_t c) const {
    return target_->log_density(x, c) + cfg_.lambda_bias * bias_feature(cfg_.bias_feature, x);
  }

  /// Judgment of "first vs second" from utilities as presented.
  Verdict judge(double u_first, double u_second, Engine& eng) const {
    const double delta = u_first - u_second;
    if (std::abs(delta) <= cfg_.tie_threshold) return Verdict::tie;
    bool first = delta > 0.0;
    if (cfg_.flip_noise > 0.0 && uniform01(eng) < cfg_.flip_noise) first = !first;
    return first ? Verdict::i_wins : Verdict::j_wins;
  }

  Verdict compare_utilities(double ui, double uj, Engine& eng) const {
    if (cfg_.order_mode == OrderMode::both_orders) {
      const Verdict forward = judge(ui, uj, eng);
      const Verdict reversed = judge(uj, ui, eng);
      const Verdict back = reversed == Verdict::i_wins  ? Verdict::j_wins
                           : reversed == Verdict::j_wins ? Verdict::i_wins
                                                         : Verdict::tie;
      return forward == back ? forward : Verdict::tie;
    }
    // Random presentation order; with a symmetric utility only the noise
    // draw depends on it.
    const bool swap = uniform01(eng) < 0.5;
    if (!swap) return judge(ui, uj, eng);
    const Verdict v = judge(uj, ui, eng);
    return v == Verdict::i_wins ? Verdict::j_wins : v == Verdict::j_wins ? Verdict::i_wins : Verdict::tie;
  }

  Verdict compare(std::span<const double> xi, std::span<const double> xj, std::size_t c, Engine& eng) const {
    return compare_utilities(utility(xi, c), utility(xj, c), eng);
  }

  const OracleConfig& config() const noexcept { return cfg_; }

 private:
  const SyntheticDataset* target_;
  OracleConfig cfg_;
};

inline Verdict pairwise_compare(const PairwiseComparator& cmp, std::span<const double> xi,
                                std::span<const double> xj, std::size_t c, Engine& eng) {
  return cmp.compare(xi, xj, c, eng);
}

/// w_i = (wins_i + 0.5 * ties_i) / (G - 1) from a full verdict table over
/// unordered pairs (i < j), listed in lexicographic order.
inline std::vector<double> win_rates_from_verdicts(std::size_t g, std::span<const Verdict> verdicts) {
  if (g < 2) throw ContractError("win rates need a group of at least 2");
  if (verdicts.size() != g * (g - 1) / 2) throw ContractError("verdict table has the wrong size");
  std::vector<double> credit(g, 0.0);
  std::size_t p = 0;
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = i + 1; j < g; ++j, ++p) {
      switch (verdicts[p]) {
        case Verdict::i_wins: credit[i] += 1.0; break;
        case Verdict::j_wins: credit[j] += 1.0; break;
        case Verdict::tie:
          credit[i] += 0.5;
          credit[j] += 0.5;
          break;
      }
    }
  for (auto& w : credit) w /= static_cast<double>(g - 1);
  return credit;
}

/// Every unordered pair is judged exactly once.
inline std::vector<double> win_rates(const PairwiseComparator& cmp, std::span<const std::vector<double>> group,
                                     std::size_t c, Engine& eng) {
  const std::size_t g = group.size();
  if (g < 2) throw ContractError("win rates need a group of at least 2");
  std::vector<double> u(g);
  for (std::size_t i = 0; i < g; ++i) u[i] = cmp.utility(group[i], c);
  std::vector<Verdict> verdicts;
  verdicts.reserve(g * (g - 1) / 2);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = i + 1; j < g; ++j) verdicts.push_back(cmp.compare_utilities(u[i], u[j], eng));
  return win_rates_from_verdicts(g, verdicts);
}

/// Win rates from pointwise scores: higher score wins, equal scores tie.
inline std::vector<double> score_to_winrates(std::span<const double> scores) {
  const std::size_t g = scores.size();
  if (g < 2) throw ContractError("score_to_winrates needs at least 2 scores");
  std::vector<Verdict> verdicts;
  verdicts.reserve(g * (g - 1) / 2);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = i + 1; j < g; ++j)
      verdicts.push_back(scores[i] > scores[j]   ? Verdict::i_wins
                         : scores[i] < scores[j] ? Verdict::j_wins
                                                 : Verdict::tie);
  return win_rates_from_verdicts(g, verdicts);
}

/// w_i + lambda * z_i, z the in-group min-max normalization of the scores
/// (0.5 for a constant group).
inline std::vector<double> combined_reward(std::span<const double> w, std::span<const double> scores,
                                           double lambda) {
  if (w.size() != scores.size()) throw ContractError("combined_reward: length mismatch");
  if (lambda < 0.0) throw ContractError("combined_reward: lambda must be >= 0");
  if (w.empty()) return {};
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double z = *hi > *lo ? (scores[i] - *lo) / (*hi - *lo) : 0.5;
    out[i] = w[i] + lambda * z;
  }
  return out;
}

/// Mean exact log-density of samples under the condition's mixture.
inline double true_quality_metric(const SyntheticDataset& ds, std::span<const std::vector<double>> samples,
                                  std::size_t c) {
  if (samples.empty()) throw ContractError("true_quality_metric needs samples");
  double s = 0.0;
  for (const auto& x : samples) s += ds.log_density(x, c);
  return s / static_cast<double>(samples.size());
}

inline nlohmann::json oracle_to_json(const OracleConfig& o) {
  return {{"kind", to_string(o.kind)},
          {"lambda_bias", o.lambda_bias},
          {"bias_feature", to_string(o.bias_feature)},
          {"compression_slope", o.compression_slope},
          {"tie_threshold", o.tie_threshold},
          {"flip_noise", o.flip_noise},
          {"order_mode", to_string(o.order_mode)}};
}

}  // namespace prefgrpo
