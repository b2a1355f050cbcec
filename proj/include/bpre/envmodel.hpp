#pragma once

#include <complex>
#include <cstdint>
#include <string>

#include "bpre/estimate.hpp"
#include "bpre/parallel.hpp"
#include "bpre/stable.hpp"
#include "bpre/walks.hpp"

namespace bpre::envmodel {

enum class OffspringKind { LinearFractional, Poisson };

// Offspring law keyed to the walk increment X; mean is e^X for every family.
// Linear-fractional: P(xi = k) = p (1-p)^k with p = 1/(1+e^X).
struct OffspringFamily {
  OffspringKind kind = OffspringKind::LinearFractional;

  [[nodiscard]] std::string label() const {
    return kind == OffspringKind::LinearFractional ? "linear-fractional-geometric" : "poisson";
  }
  [[nodiscard]] std::uint64_t hash() const { return rng::hash_str(label()); }
};

inline double lf_p(double x) { return 1.0 / (1.0 + std::exp(x)); }

std::complex<double> pgf_eval(const OffspringFamily& family, double x, std::complex<double> z);
double pgf_eval(const OffspringFamily& family, double x, double z);

// gamma(b) = sum_{k>=b} k^2 F({k}) / (sum_i i F({i}))^2, closed form per family
double gamma_b(const OffspringFamily& family, double x, std::uint64_t b);

struct B2Report {
  Estimate moment;           // E[(log+ gamma(b))^{alpha+eps}]
  Estimate half_sample;      // same on the first half, stability probe
  double hill_tail_index;    // Hill xi-hat of the summand's upper tail
  bool finite_verdict;       // stable under halving and light-tailed enough
  bool divergence_warning;
};

B2Report check_B2(const stable::IncrementModel& model, const OffspringFamily& family,
                  std::uint64_t b, double epsilon, std::uint64_t samples, rng::Stream stream);

// Environment sequence sharing its increments with the walk.
struct EnvRealization {
  walks::WalkPath walk;
  OffspringFamily family;
  std::uint64_t n = 0;
};

EnvRealization sample_environment(const stable::IncrementModel& model,
                                  const OffspringFamily& family, std::uint64_t n,
                                  rng::Stream& stream);

// one draw of xi_1 + ... + xi_k under the law at parameter x
std::uint64_t sample_offspring_sum(const OffspringFamily& family, double x, std::uint64_t k,
                                   rng::Stream& stream);

// log pmf of the k-parent offspring sum at j (exact closed forms)
double log_sum_pmf(const OffspringFamily& family, double x, std::uint64_t k, std::uint64_t j);

}  // namespace bpre::envmodel
