#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (key, counter), so replicas can be generated in any order on any number of
// workers and still agree bit for bit.

#include <array>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>

namespace mvflow {

/// Philox4x32-10 block function.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// Deterministic stream id from a seed and a hierarchy of labels
/// (experiment / replica / inner ...). Label order is significant.
std::uint64_t derive_stream(std::uint64_t seed, std::span<const std::uint64_t> labels);
inline std::uint64_t derive_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> labels) {
  return derive_stream(seed, std::span<const std::uint64_t>(labels.begin(), labels.size()));
}

/// Uniform in (0, 1] built from 64 random bits (53 significant bits).
inline double bits_to_open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 1.0) * (1.0 / 9007199254740992.0);
}

/// Standard normal addressed by (stream, i, j): one Philox block per value.
double gaussian_at(std::uint64_t stream, std::uint64_t i, std::uint64_t j);

/// Sequential view of a counter-based stream. Satisfies
/// UniformRandomBitGenerator so it can feed <random> distributions.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t stream) : stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()();
  double uniform() { return bits_to_open_unit((*this)()) - 0x1p-53; }  // [0, 1)
  double normal();

  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int available_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mvflow
