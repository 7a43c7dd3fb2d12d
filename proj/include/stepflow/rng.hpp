#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace stepflow {

// Thin wrapper over std::mt19937_64 with deterministic stream derivation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream keyed by (seed, ids...); used for per-sequence,
  // per-position and per-teacher substreams.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
    std::vector<std::uint32_t> words;
    words.reserve(2 * (ids.size() + 1));
    auto push = [&words](std::uint64_t v) {
      words.push_back(static_cast<std::uint32_t>(v));
      words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto id : ids) push(id);
    std::seed_seq seq(words.begin(), words.end());
    Rng rng;
    rng.engine_.seed(seq);
    return rng;
  }

  // Uniform on [0, 1).
  double uniform() { return std::generate_canonical<double, 53>(engine_); }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n must be positive.
  std::size_t below(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// One RNG stream per sequence position, so that position updates inside a
// step are reproducible regardless of evaluation order.
class PositionStreams {
 public:
  PositionStreams() = default;
  PositionStreams(std::uint64_t seed, std::uint64_t trajectory, std::size_t length) {
    streams_.reserve(length);
    for (std::size_t i = 0; i < length; ++i) {
      streams_.push_back(Rng::stream(seed, {trajectory, i}));
    }
  }

  std::size_t size() const { return streams_.size(); }
  Rng& operator[](std::size_t i) { return streams_[i]; }

 private:
  std::vector<Rng> streams_;
};

}  // namespace stepflow
