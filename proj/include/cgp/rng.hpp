#pragma once

#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

namespace cgp {

/// SplitMix64 step; used to expand a 64-bit seed into generator state.
constexpr std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// xoshiro256** (Blackman & Vigna). Every derived quantity below (uniform
/// integers, doubles, normals, shuffles) is implemented here rather than
/// through <random> distributions, whose algorithms differ between standard
/// libraries; sampled episodes must be reproducible in other languages.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next(); }

  std::uint64_t next();
  /// Unbiased integer in [0, bound). bound must be > 0.
  std::uint64_t uniform_below(std::uint64_t bound);
  /// Double in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  /// In-place Fisher-Yates shuffle (Durstenfeld, from the back).
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derives an independent stream from (seed, label), e.g. (global seed,
  /// disease name). The label is folded into the seed with FNV-1a after the
  /// eight little-endian seed bytes.
  static Rng derive(std::uint64_t seed, std::string_view label);

 private:
  std::uint64_t s_[4];
};

}  // namespace cgp
