#include "mvflow/random.hpp"

#include <cmath>
#include <numbers>

namespace mvflow {

namespace {

constexpr std::uint32_t kMulA = 0xD2511F53u;
constexpr std::uint32_t kMulB = 0xCD9E8D57u;
constexpr std::uint32_t kWeylA = 0x9E3779B9u;
constexpr std::uint32_t kWeylB = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline std::array<std::uint32_t, 2> split(std::uint64_t v) {
  return {static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(v >> 32)};
}

inline std::uint64_t join(std::uint32_t lo, std::uint32_t hi) {
  return static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> c,
                                        std::array<std::uint32_t, 2> k) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMulA, c[0], hi0, lo0);
    mulhilo(kMulB, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    k[0] += kWeylA;
    k[1] += kWeylB;
  }
  return c;
}

std::uint64_t derive_stream(std::uint64_t seed, std::span<const std::uint64_t> labels) {
  // Each level keys Philox with the parent id; the counter carries the label
  // and its depth, so permuted or truncated label lists land elsewhere.
  std::uint64_t id = seed;
  std::uint32_t depth = 0;
  {
    const auto s = split(seed);
    const auto out = philox4x32({s[0], s[1], 0x5eedu, 0xffffffffu}, {0x243F6A88u, 0x85A308D3u});
    id = join(out[0], out[1]);
  }
  for (const std::uint64_t label : labels) {
    ++depth;
    const auto l = split(label);
    const auto out = philox4x32({l[0], l[1], depth, 0x1abe1u}, split(id));
    id = join(out[0], out[1]) ^ join(out[2], out[3]) * 0x9E3779B97F4A7C15ull;
  }
  return id;
}

double gaussian_at(std::uint64_t stream, std::uint64_t i, std::uint64_t j) {
  const auto jj = split(j);
  const auto out = philox4x32({jj[0], jj[1], static_cast<std::uint32_t>(i),
                               static_cast<std::uint32_t>(i >> 32)},
                              split(stream));
  const double u1 = bits_to_open_unit(join(out[0], out[1]));
  const double u2 = bits_to_open_unit(join(out[2], out[3]));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

CounterRng::result_type CounterRng::operator()() {
  if (available_ < 2) {
    const auto c = split(counter_++);
    buffer_ = philox4x32({c[0], c[1], 0x0u, 0xc0ffeeu}, split(stream_));
    available_ = 4;
  }
  const int at = 4 - available_;
  available_ -= 2;
  return join(buffer_[at], buffer_[at + 1]);
}

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = bits_to_open_unit((*this)());
  const double u2 = bits_to_open_unit((*this)());
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

}  // namespace mvflow
