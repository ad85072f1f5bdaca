#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace prefgrpo {

using Engine = std::mt19937_64;

/// Identifies an independent random stream. Every draw that must be
/// reproducible regardless of scheduling is keyed by the run seed plus the
/// logical coordinates of the draw (prompt, group member, step).
struct StreamKey {
  std::uint64_t seed = 0;
  std::uint64_t prompt = 0;
  std::uint64_t member = 0;
};

/// Step index reserved for the initial-noise draw of a trajectory.
inline constexpr std::uint64_t kInitialNoiseStep = ~std::uint64_t{0};

/// Engine seeded from an arbitrary tuple of words.
inline Engine make_engine(std::initializer_list<std::uint64_t> words) {
  std::vector<std::uint32_t> seq;
  seq.reserve(words.size() * 2 + 1);
  seq.push_back(0x9e3779b9u);
  for (std::uint64_t w : words) {
    seq.push_back(static_cast<std::uint32_t>(w));
    seq.push_back(static_cast<std::uint32_t>(w >> 32));
  }
  std::seed_seq ss(seq.begin(), seq.end());
  return Engine(ss);
}

inline Engine make_engine(const StreamKey& key, std::uint64_t step) {
  return make_engine({key.seed, key.prompt, key.member, step});
}

inline std::vector<double> normal_vector(Engine& eng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(eng);
  return out;
}

/// Standard-normal vector drawn from the stream (key, step).
inline std::vector<double> normal_vector(const StreamKey& key,
                                         std::uint64_t step, std::size_t n) {
  Engine eng = make_engine(key, step);
  return normal_vector(eng, n);
}

inline double uniform01(Engine& eng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(eng);
}

}  // namespace prefgrpo
