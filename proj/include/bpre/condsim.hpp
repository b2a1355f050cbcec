#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "bpre/envmodel.hpp"
#include "bpre/estimate.hpp"
#include "bpre/gfengine.hpp"
#include "bpre/renewal.hpp"

namespace bpre::condsim {

struct WeightedEstimate {
  double value = 0.0;
  double std_error = 0.0;
  double effective_sample_size = 0.0;
  std::uint64_t samples = 0;
  std::uint64_t horizon = 0;
  bool low_ess = false;              // ESS < 30
  double extrap_weight_frac = 0.0;   // weight mass using the table's linear extension
};

struct PopulationPath {
  std::vector<std::uint64_t> z;  // length n+1, z[0] = q
  bool used_fallback = false;
};

// One scanned path at a fixed horizon, reusable across walk starts x:
//   plus side:  weight U(x + s_n) I{min_s >= -x} / U(x)
//   minus side: weight V(x + s_n) I{max_s < -x} / V(x), V(0) := 1
// s_n, min_s, max_s refer to the increment sums (start 0). For the
// linear-fractional family, (log_surv, s_n) is the full chain state.
struct PathRecord {
  double s_n = 0.0;
  double min_s = 0.0;
  double max_s = 0.0;
  double log_surv = 0.0;  // log(1 - F_{0,n}(0))

  [[nodiscard]] double survival() const { return std::exp(log_surv); }
  [[nodiscard]] double sigma() const { return std::exp(std::fmin(log_surv - s_n, 0.0)); }
  [[nodiscard]] double one_minus_F(double z) const {
    const double om = 1.0 - z;
    if (om <= 0.0) return 0.0;
    const double sg = sigma();
    const double den = sg + (1.0 - sg) * om;
    return den > 0.0 ? survival() * om / den : 0.0;
  }
  // q-ancestor survival 1 - F_{0,n}(0)^q
  [[nodiscard]] double survival_q(std::uint64_t q) const {
    return -std::expm1(static_cast<double>(q) * std::log1p(-std::fmin(survival(), 1.0)));
  }
};

// Functional arguments: the scan record, the walk start x, and a per-path
// auxiliary stream (for drawing Z offspring representatives).
struct PathContext {
  const PathRecord& rec;
  double x;
  std::uint64_t n;
  rng::Stream aux;

  [[nodiscard]] double walk_end() const { return x + rec.s_n; }
  [[nodiscard]] std::uint64_t sample_Z(std::uint64_t q) {
    std::uint64_t total = 0;
    for (std::uint64_t i = 0; i < q; ++i) {
      if (aux.uniform() >= rec.survival()) continue;
      total += 1 + rng::geometric_count(aux, 1.0 - rec.sigma());
    }
    return total;
  }
};

using Functional = std::function<double(PathContext&)>;

// Weighted environment sample from one scan; reusable across x and functionals.
class EnvSample {
 public:
  EnvSample(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
            std::uint64_t n, std::uint64_t samples, rng::Stream stream,
            const LanePlan& plan = {});

  [[nodiscard]] const std::vector<PathRecord>& records() const { return records_; }
  [[nodiscard]] std::uint64_t horizon() const { return n_; }

  [[nodiscard]] WeightedEstimate plus(const Functional& g, double x,
                                      const renewal::RenewalTable& u_table) const;
  [[nodiscard]] WeightedEstimate minus(const Functional& g, double x,
                                       const renewal::RenewalTable& v_table) const;

 private:
  std::vector<PathRecord> records_;
  std::uint64_t n_ = 0;
  rng::Stream aux_base_;
};

WeightedEstimate plus_expectation(const stable::IncrementModel& model,
                                  const envmodel::OffspringFamily& family, std::uint64_t n,
                                  const Functional& g, double x,
                                  const renewal::RenewalTable& u_table, std::uint64_t samples,
                                  rng::Stream stream, const LanePlan& plan = {});

WeightedEstimate minus_expectation(const stable::IncrementModel& model,
                                   const envmodel::OffspringFamily& family, std::uint64_t n,
                                   const Functional& g, double x,
                                   const renewal::RenewalTable& v_table, std::uint64_t samples,
                                   rng::Stream stream, const LanePlan& plan = {});

// Weighted law of e^{-S_n} Z_n under P+ with Z_0 = q.
struct WplusSummary {
  WeightedEstimate mean;
  double atom_at_zero = 0.0;   // weighted mass of extinction (exact per environment)
  double positive_mass = 0.0;
  std::vector<std::pair<double, double>> points;  // (value, normalized weight), sorted

  [[nodiscard]] double kolmogorov(const WplusSummary& other) const;
};

WplusSummary estimate_Wplus(const stable::IncrementModel& model,
                            const envmodel::OffspringFamily& family, std::uint64_t q,
                            std::uint64_t n, const renewal::RenewalTable& u_table,
                            std::uint64_t samples, rng::Stream stream,
                            const LanePlan& plan = {});

// Exact sequential h-transform sampler of L(Z | Z_n > 0, env) with Z_0 = q.
PopulationPath conditioned_trajectory(const envmodel::EnvRealization& env, std::uint64_t n,
                                      std::uint64_t q, rng::Stream& stream);

// suffix extinction probabilities s_m = F_{m,n}(0), m = 0..n
std::vector<double> suffix_extinction_all(const envmodel::EnvRealization& env, std::uint64_t n);

// log of the one-step conditioned transition P-hat(Z_{m+1} = j | Z_m = k)
// support and weights, exposed for the enumeration oracle
struct StepLaw {
  std::uint64_t j_lo = 0;
  std::vector<double> pmf;  // normalized over the retained support
  double deficit = 0.0;     // missing conditioned mass before normalization
};
StepLaw one_step_conditioned(const envmodel::OffspringFamily& family, double x, std::uint64_t k,
                             double s_next, double mass_tol = 1e-8);

struct HKernel {
  double u = 0.0, w = 0.0;
  double value = 0.0;
  double std_error = 0.0;
  std::uint64_t horizon_w = 0, horizon_b = 0;
  double y_cell = 0.0;
};

struct HGridParams {
  std::uint64_t horizon_w = 256;
  std::uint64_t horizon_b = 256;
  std::uint64_t samples_w = 200000;
  std::uint64_t samples_b = 200000;
  std::size_t b_atoms = 192;
  double y_cell = 0.25;
  double w_min = -14.0;
};

class HGrid {
 public:
  Eigen::ArrayXd u_nodes;  // ascending, last node is the exact anchor u=1 (h=0)
  Eigen::ArrayXd w_nodes;  // ascending, w_nodes.tail = 0
  Eigen::ArrayXXd value;   // (u, w)
  Eigen::ArrayXXd se;
  HGridParams params;

  // bilinear on h/(1-u); w clamped to [w_min, 0]; throws ExtendGridError below range
  [[nodiscard]] double at(double u, double w) const;
  [[nodiscard]] double se_at(double u, double w) const;
  [[nodiscard]] bool covers(double u, double w) const;
};

class HKernelEstimator {
 public:
  HKernelEstimator(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                   const renewal::RenewalTable& u_table, const renewal::RenewalTable& v_table,
                   HGridParams params, rng::Stream stream, const LanePlan& plan = {});

  [[nodiscard]] HGrid grid(const Eigen::ArrayXd& u_nodes, const Eigen::ArrayXd& w_nodes) const;
  [[nodiscard]] HKernel at(double u, double w) const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

// spec-shaped convenience: one (u,w) point with fresh samples
HKernel estimate_h(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                   double u, double w, const renewal::RenewalTable& u_table,
                   const renewal::RenewalTable& v_table, const HGridParams& params,
                   rng::Stream stream, const LanePlan& plan = {});

}  // namespace bpre::condsim
