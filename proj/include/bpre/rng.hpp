#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string_view>

namespace bpre::rng {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer; bijective with full avalanche.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

constexpr std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ull;
  }
  return h;
}

// Counter-based stream: draw i of stream `key` is mix64(key + i*golden).
// Streams are cheap values; lane streams derived from the same master are
// statistically independent and replayable from (key, counter).
class Stream {
 public:
  Stream() = default;
  explicit Stream(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), ctr_(counter) {}

  static Stream from_seed(std::uint64_t seed) { return Stream(mix64(seed ^ kGolden)); }

  [[nodiscard]] Stream derived(std::uint64_t tag) const {
    return Stream(mix64(mix64(key_ ^ 0xD1B54A32D192ED03ull) + tag));
  }
  [[nodiscard]] Stream derived(std::string_view tag) const { return derived(hash_str(tag)); }

  std::uint64_t next_u64() { return mix64(key_ + (ctr_++) * kGolden); }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // strictly inside (0,1); safe under log()
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double exponential() { return -std::log(uniform_open()); }

  // UniformRandomBitGenerator
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~0ull; }
  result_type operator()() { return next_u64(); }

  [[nodiscard]] std::uint64_t key() const { return key_; }
  [[nodiscard]] std::uint64_t counter() const { return ctr_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t ctr_ = 0;
};

// Count of failures k with P(k) = (1-q) q^k, k >= 0.
inline std::uint64_t geometric_count(Stream& s, double q) {
  if (q <= 0.0) return 0;
  const double u = s.uniform_open();
  const double v = std::log(u) / std::log(q);
  if (v >= 9.0e18) throw std::overflow_error("geometric_count overflow");
  return static_cast<std::uint64_t>(v);
}

// Marsaglia-Tsang; any shape > 0, unit scale.
inline double gamma_variate(Stream& s, double shape) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be > 0");
  double boost = 1.0;
  if (shape < 1.0) {
    boost = std::pow(s.uniform_open(), 1.0 / shape);
    shape += 1.0;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = s.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = s.uniform_open();
    if (u < 1.0 - 0.0331 * x * x * x * x) return boost * d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return boost * d * v;
  }
}

namespace detail {
// Hoermann's PTRD transformed-rejection sampler, mean >= 10.
inline std::uint64_t poisson_ptrd(Stream& s, double mu) {
  const double smu = std::sqrt(mu);
  const double b = 0.931 + 2.53 * smu;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    double u = s.uniform() - 0.5;
    double v = s.uniform_open();
    double us = 0.5 - std::abs(u);
    double k = std::floor((2.0 * a / us + b) * u + mu + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    const double log_mu = std::log(mu);
    if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
        k * log_mu - mu - std::lgamma(k + 1.0)) {
      return static_cast<std::uint64_t>(k);
    }
  }
}
}  // namespace detail

inline std::uint64_t poisson_variate(Stream& s, double mu) {
  if (!(mu >= 0.0)) throw std::invalid_argument("poisson mean must be >= 0");
  if (mu == 0.0) return 0;
  if (mu < 10.0) {
    const double limit = std::exp(-mu);
    double prod = s.uniform_open();
    std::uint64_t k = 0;
    while (prod > limit) {
      prod *= s.uniform_open();
      ++k;
    }
    return k;
  }
  return detail::poisson_ptrd(s, mu);
}

// Failures j with pmf C(r+j-1, j) p^r q^j; r need not be integral.
inline std::uint64_t negative_binomial(Stream& s, double r, double p) {
  const double q = 1.0 - p;
  if (q <= 0.0) return 0;
  if (r <= 32.0 && r == std::floor(r)) {
    std::uint64_t total = 0;
    for (std::uint64_t i = 0; i < static_cast<std::uint64_t>(r); ++i)
      total += geometric_count(s, q);
    return total;
  }
  const double lambda = gamma_variate(s, r) * (q / p);
  return poisson_variate(s, lambda);
}

}  // namespace bpre::rng
