#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace asp::tensor {

/// Counter-based random stream.
///
/// Every draw is a pure function of (key, counter), so a stream can be saved
/// as two integers and resumed bit-exactly. `split` derives a statistically
/// independent child stream from a tag without advancing the parent.
class RngStream {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
    bool operator==(const State&) const = default;
  };

  RngStream() = default;
  explicit RngStream(std::uint64_t seed) : state_{mix(seed ^ 0x243F6A8885A308D3ull), 0} {}
  explicit RngStream(State state) : state_(state) {}

  RngStream split(std::uint64_t tag) const {
    return RngStream(State{mix(state_.key ^ mix(tag + 0x9E3779B97F4A7C15ull)), 0});
  }

  std::uint64_t next_u64() { return mix(state_.key + 0x9E3779B97F4A7C15ull * ++state_.counter); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes exactly two counter steps.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  State state() const { return state_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  State state_{};
};

}  // namespace asp::tensor
