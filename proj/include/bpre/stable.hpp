#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "bpre/rng.hpp"

namespace bpre::stable {

struct QuadratureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Parameters of the strictly stable target law with characteristic function
// exp{-c|w|^alpha (1 - i beta sgn(w) tan(pi alpha/2))}.
struct StableParams {
  double alpha = 2.0;
  double beta = 0.0;
  double c = 0.5;

  // admissible set: alpha in (0,2)\{1} with |beta|<1, or (1,0), or (2,0)
  [[nodiscard]] bool admissible() const;
  void validate() const;
};

enum class IncrementFamily { ExactStable, Gaussian, TwoSidedPareto };

// Increment distribution of the associated walk, with its declared slowly
// varying factor (a constant per family, see norming()).
struct IncrementModel {
  IncrementFamily family = IncrementFamily::Gaussian;
  StableParams target;  // stable law of S_n/a_n
  double sigma = 1.0;   // Gaussian
  double pareto_alpha = 1.5, pareto_balance = 0.0, pareto_scale = 1.0;
  double pareto_center = 0.0;  // exact mean subtraction, alpha > 1
  double ell = 1.0;            // a_n = n^{1/alpha} * ell

  static IncrementModel exact_stable(StableParams p);
  static IncrementModel gaussian(double sigma);
  // ell is calibrated once per parameter set by matching the 75% quantile of
  // S_n/a_n at a pilot n against the target stable law (deterministic seed).
  static IncrementModel two_sided_pareto(double alpha, double balance, double scale);

  [[nodiscard]] std::string label() const;
  [[nodiscard]] std::uint64_t hash() const;
};

struct Norming {
  std::uint64_t n = 1;
  double a_n = 1.0;
  double b_n = 1.0;
};

double sample_increment(const IncrementModel& model, rng::Stream& stream);

// One draw of the target stable law itself (CMS construction).
double sample_stable(const StableParams& p, rng::Stream& stream);

// g_{alpha,beta}(0) by adaptive quadrature of the characteristic function,
// relative tolerance 1e-8, truncation tail bound < 1e-12.
double density_at_zero(const StableParams& p);

// rho = P(Y_1 > 0) = 1/2 + arctan(beta tan(pi alpha/2)) / (pi alpha)
double positivity_rho(const StableParams& p);

Norming norming(const IncrementModel& model, std::uint64_t n);

}  // namespace bpre::stable
