#pragma once

#include <cmath>
#include <cstdint>

namespace bpre {

// Monte Carlo scalar with its standard error.
struct Estimate {
  double value = 0.0;
  double se = 0.0;
  std::uint64_t samples = 0;
  double hits = 0.0;        // raw count of nonzero contributions
  bool degenerate = false;  // zero hits: SE is not meaningful

  static Estimate from_sums(double sum, double sumsq, std::uint64_t n, double hits = -1.0) {
    Estimate e;
    e.samples = n;
    if (n == 0) {
      e.degenerate = true;
      return e;
    }
    const double m = sum / static_cast<double>(n);
    const double var = std::fmax(sumsq / static_cast<double>(n) - m * m, 0.0);
    e.value = m;
    e.se = std::sqrt(var / static_cast<double>(n));
    e.hits = hits >= 0.0 ? hits : static_cast<double>(n);
    e.degenerate = (hits == 0.0);
    return e;
  }
};

// Running moments for a scalar stream; merges are associative so lanes can
// accumulate independently and combine in lane order.
struct Moments {
  double sum = 0.0;
  double sumsq = 0.0;
  std::uint64_t n = 0;
  double hits = 0.0;

  void add(double x) {
    sum += x;
    sumsq += x * x;
    ++n;
    if (x != 0.0) hits += 1.0;
  }
  void merge(const Moments& o) {
    sum += o.sum;
    sumsq += o.sumsq;
    n += o.n;
    hits += o.hits;
  }
  [[nodiscard]] Estimate estimate() const { return Estimate::from_sums(sum, sumsq, n, hits); }
  [[nodiscard]] double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

// Paired moments for ratio estimators (shared-sample numerator/denominator).
struct RatioMoments {
  double sa = 0.0, saa = 0.0;
  double sb = 0.0, sbb = 0.0;
  double sab = 0.0;
  std::uint64_t n = 0;

  void add(double a, double b) {
    sa += a;
    saa += a * a;
    sb += b;
    sbb += b * b;
    sab += a * b;
    ++n;
  }
  void merge(const RatioMoments& o) {
    sa += o.sa;
    saa += o.saa;
    sb += o.sb;
    sbb += o.sbb;
    sab += o.sab;
    n += o.n;
  }

  // a/b with delta-method SE honoring the covariance.
  [[nodiscard]] Estimate ratio() const {
    Estimate e;
    e.samples = n;
    if (n == 0 || sb == 0.0) {
      e.degenerate = true;
      return e;
    }
    const double nn = static_cast<double>(n);
    const double ma = sa / nn, mb = sb / nn;
    const double va = std::fmax(saa / nn - ma * ma, 0.0);
    const double vb = std::fmax(sbb / nn - mb * mb, 0.0);
    const double cab = sab / nn - ma * mb;
    e.value = ma / mb;
    const double rel2 = va / (ma * ma) + vb / (mb * mb) - 2.0 * cab / (ma * mb);
    e.se = (ma != 0.0) ? std::abs(e.value) * std::sqrt(std::fmax(rel2, 0.0) / nn) : 0.0;
    e.hits = nn;
    return e;
  }
};

inline double combined_se(double se1, double se2) { return std::sqrt(se1 * se1 + se2 * se2); }
inline double combined_se(double se1, double se2, double se3) {
  return std::sqrt(se1 * se1 + se2 * se2 + se3 * se3);
}

}  // namespace bpre
