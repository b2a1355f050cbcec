#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "bpre/envmodel.hpp"
#include "bpre/estimate.hpp"

namespace bpre::gfengine {

// Moebius coefficient record: F(z) = (m(0,0) z + m(0,1)) / (m(1,0) z + m(1,1)).
// e0 = m(1,1) - m(0,1) is carried multiplicatively (it is prod q_k up to the
// shared renormalization), so the z -> 1 tail never cancels.
struct Mobius {
  Eigen::Matrix2d m;
  double e0 = 1.0;

  static Mobius identity() {
    Mobius r;
    r.m << 1.0, 0.0, 0.0, 1.0;
    r.e0 = 1.0;
    return r;
  }
  // single linear-fractional pgf with p = 1/(1+e^x)
  static Mobius step(double p) {
    Mobius r;
    r.m << 0.0, p, -(1.0 - p), 1.0;
    r.e0 = 1.0 - p;
    return r;
  }
  // composition this(inner(z))
  [[nodiscard]] Mobius after(const Mobius& inner) const {
    Mobius r;
    r.m = m * inner.m;
    r.e0 = e0 * inner.e0;
    return r;
  }
  void renormalize() {
    const double s = m.cwiseAbs().maxCoeff();
    if (s > 0.0) {
      m /= s;
      e0 /= s;
    }
  }
  [[nodiscard]] double apply(double z) const {
    return (m(0, 0) * z + m(0, 1)) / (m(1, 0) * z + m(1, 1));
  }
  [[nodiscard]] double one_minus_apply(double z) const {
    return e0 * (1.0 - z) / (m(1, 0) * z + m(1, 1));
  }
};

// Scalar state of a linear-fractional chain F_{0,k}, extended on the inside
// one environment member at a time. Exactly equivalent to the Moebius product
// but unconditionally stable for long chains:
//   t0 = 1 - F_{0,k}(0)   (survival from one ancestor),
//   sigma = t0 e^{-S_k},   1 - F_{0,k}(z) = t0 (1-z)/(sigma + (1-sigma)(1-z)).
struct LfChainState {
  double log_t0 = 0.0;
  double s = 0.0;

  void update(double x) {
    const double sigma = this->sigma();
    log_t0 -= std::log1p(sigma * std::exp(-x));
    s += x;
  }
  [[nodiscard]] double sigma() const { return std::exp(std::fmin(log_t0 - s, 0.0)); }
  [[nodiscard]] double survival() const { return std::exp(log_t0); }
  [[nodiscard]] double one_minus_F(double z) const {
    const double om = 1.0 - z;
    if (om <= 0.0) return 0.0;
    const double sg = sigma();
    const double den = sg + (1.0 - sg) * om;
    return den > 0.0 ? survival() * om / den : 0.0;
  }
  // Z_n | environment for Z_0 = 1: extinct with prob 1 - t0, else 1 + Geom(r)
  [[nodiscard]] std::uint64_t sample_Z(rng::Stream& stream) const {
    if (stream.uniform() >= survival()) return 0;
    const double r = 1.0 - sigma();
    return 1 + rng::geometric_count(stream, r);
  }
};

// Iterated generating-function evaluator for one environment at a fixed
// horizon. Linear-fractional environments get O(1) suffix queries after an
// O(n) build; other families fall back to the backward recursion.
class GenFunChain {
 public:
  GenFunChain(const envmodel::EnvRealization& env, std::uint64_t horizon);

  [[nodiscard]] std::uint64_t horizon() const { return horizon_; }
  [[nodiscard]] const envmodel::EnvRealization& env() const { return *env_; }

  // F_{k,n}(z); O(1) when n == horizon and the family is linear-fractional
  [[nodiscard]] double iterate(std::uint64_t k, std::uint64_t n, double z) const;
  [[nodiscard]] double one_minus_iterate(std::uint64_t k, std::uint64_t n, double z) const;
  // s_m = F_{m,horizon}(0)
  [[nodiscard]] double suffix_extinction(std::uint64_t m) const;

 private:
  const envmodel::EnvRealization* env_;
  std::uint64_t horizon_;
  std::vector<Mobius> suffix_;  // LF only: suffix_[k] composes members (k, horizon]
};

// P(Z_n > 0 | env) = 1 - F_{0,n}(0), clamped to [0,1]
double survival_prob(const envmodel::EnvRealization& env, std::uint64_t n);

// E[z^{Z_n} I{Z_n>0} | env, Z_0=q] = F_{0,n}(z)^q - F_{0,n}(0)^q
double conditional_pgf(const envmodel::EnvRealization& env, std::uint64_t n, double z,
                       std::uint64_t q);

// O_j(z,w) = E[1-F_{0,j}(z); S_j <= w, tau_j = j] / E[e^{S_j}; tau_j = j]
Estimate O_functional(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                      std::uint64_t j, double z, double w, std::uint64_t samples,
                      rng::Stream stream, const LanePlan& plan = {});

struct HBoundCell {
  std::uint64_t j = 0;
  double z = 0.0, w = 0.0;
  Estimate lhs;   // E[1-F_{0,j}(z); S_j <= w, tau_j = j]
  double ratio = 0.0;  // lhs / ((1-z) b_j e^{w/2}); 0 on the z=1 row
};

struct HBoundReport {
  std::vector<HBoundCell> cells;
  double max_ratio = 0.0;
  double trend_ratio = 0.0;  // ratio(j_last)/ratio(j_first) at (z_min, w_max)
};

// prefix-paired across j: one environment sample of length max(j_list)
HBoundReport check_hbound(const stable::IncrementModel& model,
                          const envmodel::OffspringFamily& family,
                          const std::vector<std::uint64_t>& j_list,
                          const std::vector<double>& z_grid, const std::vector<double>& w_grid,
                          std::uint64_t samples, rng::Stream stream, const LanePlan& plan = {});

}  // namespace bpre::gfengine
