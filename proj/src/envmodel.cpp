#include "bpre/envmodel.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace bpre::envmodel {

std::complex<double> pgf_eval(const OffspringFamily& family, double x, std::complex<double> z) {
  if (std::abs(z) > 1.0 + 1e-12) throw std::domain_error("pgf_eval: |z| must be <= 1");
  if (family.kind == OffspringKind::LinearFractional) {
    const double p = lf_p(x);
    return p / (1.0 - (1.0 - p) * z);
  }
  const double lambda = std::exp(x);
  return std::exp(lambda * (z - 1.0));
}

double pgf_eval(const OffspringFamily& family, double x, double z) {
  return pgf_eval(family, x, std::complex<double>(z, 0.0)).real();
}

namespace {

double poisson_tail_geq(double lambda, std::int64_t m) {
  // P(xi >= m)
  if (m <= 0) return 1.0;
  double below = 0.0;  // P(xi <= m-1)
  const double ll = std::log(lambda);
  for (std::int64_t k = 0; k < m; ++k)
    below += std::exp(-lambda + static_cast<double>(k) * ll - std::lgamma(static_cast<double>(k) + 1.0));
  return std::fmax(1.0 - below, 0.0);
}

}  // namespace

double gamma_b(const OffspringFamily& family, double x, std::uint64_t b) {
  const auto bd = static_cast<double>(b);
  if (family.kind == OffspringKind::LinearFractional) {
    const double p = lf_p(x);
    const double q = 1.0 - p;
    if (q == 0.0) return 0.0;
    // sum_{k>=b} k^2 q^k = q^b [ q(1+q)/(1-q)^3 + 2b q/(1-q)^2 + b^2/(1-q) ]
    const double qb = std::pow(q, bd);
    const double t2 = qb * (q * (1.0 + q) / (p * p * p) + 2.0 * bd * q / (p * p) + bd * bd / p);
    return p * t2 / ((q / p) * (q / p));
  }
  const double lambda = std::exp(x);
  // sum_{k>=b} k^2 pmf = lambda^2 P(xi >= b-2) + lambda P(xi >= b-1)
  const double tail2 = poisson_tail_geq(lambda, static_cast<std::int64_t>(b) - 2);
  const double tail1 = poisson_tail_geq(lambda, static_cast<std::int64_t>(b) - 1);
  return tail2 + tail1 / lambda;
}

B2Report check_B2(const stable::IncrementModel& model, const OffspringFamily& family,
                  std::uint64_t b, double epsilon, std::uint64_t samples, rng::Stream stream) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("check_B2: epsilon must be > 0");
  if (samples < 100) throw std::invalid_argument("check_B2: need at least 100 samples");
  const double expo = model.target.alpha + epsilon;
  auto rs = stream.derived("b2");
  std::vector<double> vals(samples);
  Moments full, half;
  for (std::uint64_t i = 0; i < samples; ++i) {
    const double x = stable::sample_increment(model, rs);
    const double g = gamma_b(family, x, b);
    const double s = std::pow(std::log(std::fmax(g, 1.0)), expo);
    vals[i] = s;
    full.add(s);
    if (i < samples / 2) half.add(s);
  }
  B2Report rep;
  rep.moment = full.estimate();
  rep.half_sample = half.estimate();
  std::sort(vals.begin(), vals.end(), std::greater<>());
  const std::size_t k = std::max<std::size_t>(50, samples / 20);
  double hill = 0.0;
  const double xk = std::fmax(vals[k], 1e-300);
  for (std::size_t i = 0; i < k; ++i) hill += std::log(std::fmax(vals[i], xk) / xk);
  rep.hill_tail_index = hill / static_cast<double>(k);
  const double drift = std::abs(rep.moment.value - rep.half_sample.value);
  const bool stable_mean = drift < 3.0 * combined_se(rep.moment.se, rep.half_sample.se);
  rep.finite_verdict = stable_mean && rep.hill_tail_index < 0.8;
  rep.divergence_warning = !rep.finite_verdict;
  return rep;
}

EnvRealization sample_environment(const stable::IncrementModel& model,
                                  const OffspringFamily& family, std::uint64_t n,
                                  rng::Stream& stream) {
  EnvRealization env;
  env.walk = walks::simulate_path(model, n, stream);
  env.family = family;
  env.n = n;
  return env;
}

std::uint64_t sample_offspring_sum(const OffspringFamily& family, double x, std::uint64_t k,
                                   rng::Stream& stream) {
  if (k == 0) return 0;
  if (family.kind == OffspringKind::LinearFractional)
    return rng::negative_binomial(stream, static_cast<double>(k), lf_p(x));
  return rng::poisson_variate(stream, static_cast<double>(k) * std::exp(x));
}

double log_sum_pmf(const OffspringFamily& family, double x, std::uint64_t k, std::uint64_t j) {
  const auto kd = static_cast<double>(k);
  const auto jd = static_cast<double>(j);
  if (k == 0) return j == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (family.kind == OffspringKind::LinearFractional) {
    const double p = lf_p(x);
    return std::lgamma(kd + jd) - std::lgamma(kd) - std::lgamma(jd + 1.0) + kd * std::log(p) +
           jd * std::log1p(-p);
  }
  const double mu = kd * std::exp(x);
  return -mu + jd * std::log(mu) - std::lgamma(jd + 1.0);
}

}  // namespace bpre::envmodel
