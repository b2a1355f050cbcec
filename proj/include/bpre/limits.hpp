#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "bpre/condsim.hpp"
#include "bpre/envmodel.hpp"
#include "bpre/estimate.hpp"
#include "bpre/renewal.hpp"

namespace bpre::limits {

// ---------------------------------------------------------------------------
// survival scaling: P(Z_n > 0, S_n <= K) / b_n
// ---------------------------------------------------------------------------
struct SurvivalScalingReport {
  double K = 0.0;
  std::vector<std::uint64_t> n_list;
  std::vector<Estimate> ratios;
  bool stabilized = false;   // last two within 3 combined SE
  double last_gap_se = 0.0;  // |r_last - r_prev| / combined SE
};

SurvivalScalingReport survival_scaling(const stable::IncrementModel& model,
                                       const envmodel::OffspringFamily& family, double K,
                                       const std::vector<std::uint64_t>& n_list,
                                       std::uint64_t samples, rng::Stream stream,
                                       const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// Lemma 1 ratios: P(S_n <= y, L_n >= 0) / (g(0) b_n int_0^y V(-u) du)
// ---------------------------------------------------------------------------
struct AsymStayLowReport {
  double y = 1.0;
  double quad_int = 0.0;  // int_0^y V(-u) du
  std::vector<std::uint64_t> n_list;
  std::vector<Estimate> ratios;
  double empirical_C = 0.0;  // max ratio over n (EstimS_tay constant)
  bool stabilized = false;
  double last_gap_se = 0.0;
};

AsymStayLowReport asym_stay_low(const stable::IncrementModel& model,
                                const std::vector<std::uint64_t>& n_list, double y,
                                const renewal::RenewalTable& v_table, std::uint64_t samples,
                                rng::Stream stream, const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// (AsymExponent) ratios: E[e^{S_n}; tau_n = n] / (g(0) b_n int e^{-y} U(y) dy)
// ---------------------------------------------------------------------------
struct AsymExpMinReport {
  double int_exp_u = 0.0;
  std::vector<std::uint64_t> n_list;
  std::vector<Estimate> raw;     // E[e^{S_n}; tau_n = n] (dual M_n < 0 form)
  std::vector<Estimate> ratios;  // normalized
  std::vector<double> b_ratio_gap_se;  // consecutive raw ratios vs b_n/b_{n'}
  bool stabilized = false;
  double last_gap_se = 0.0;
};

AsymExpMinReport asym_exp_min(const stable::IncrementModel& model,
                              const std::vector<std::uint64_t>& n_list,
                              const renewal::RenewalTable& u_table, std::uint64_t samples,
                              rng::Stream stream, const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// survive-forever probabilities under P+ (and their z-resolved extension)
// ---------------------------------------------------------------------------
struct PiTable {
  std::uint64_t m_max = 0;
  std::uint64_t q_max = 0;
  Eigen::ArrayXd pi;       // pi[q-1] = P+(Z_m > 0 | Z_0 = q) at m = m_max
  Eigen::ArrayXd pi_se;
  Eigen::ArrayXd pi_half;  // horizon m_max/2 (doubling diagnostic)
  double ess = 0.0;
  Eigen::ArrayXd z_nodes;  // optional: E+(z, q) = E+[z^{Z_m} I{Z_m>0} | Z_0=q]
  Eigen::ArrayXXd ezq;     // (z_nodes, q)

  [[nodiscard]] double doubling_gap() const {
    return (pi - pi_half).abs().maxCoeff();
  }
};

PiTable estimate_pi(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                    std::uint64_t m_max, std::uint64_t q_max,
                    const renewal::RenewalTable& u_table, std::uint64_t samples,
                    rng::Stream stream, const LanePlan& plan = {},
                    const Eigen::ArrayXd* z_nodes = nullptr);

// ---------------------------------------------------------------------------
// G_left(K)
// ---------------------------------------------------------------------------
struct GleftReport {
  double K = 0.0;
  std::uint64_t J = 0;
  std::vector<double> terms;  // g(0)-scaled term per j = 0..J
  Estimate value;             // g(0) * sum of terms, SE from per-path totals
  double tail_extrap = 0.0;   // power-law extrapolation beyond J
  double excluded_n_mass = 0.0;  // S_j < -N_cut exclusions (IV-weighted bound)
  double excluded_q_mass = 0.0;  // Z_j > Q_cut exclusions
  double pi_doubling_gap = 0.0;
};

GleftReport constant_Gleft(const stable::IncrementModel& model,
                           const envmodel::OffspringFamily& family, double K, std::uint64_t J,
                           double N_cut, std::uint64_t Q_cut,
                           const renewal::RenewalTable& v_table, const PiTable& pi,
                           std::uint64_t samples, rng::Stream stream, const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// G_right(K)
// ---------------------------------------------------------------------------
struct GrightReport {
  double K = 0.0;
  std::uint64_t J = 0;
  double prefactor = 0.0;  // g(0) int e^{-y} U(y) dy
  std::vector<double> terms;
  Estimate value;
  double tail_extrap = 0.0;
  double clamped_h_mass = 0.0;  // envelope bound on contributions below the grid w-range
};

GrightReport constant_Gright(const stable::IncrementModel& model,
                             const envmodel::OffspringFamily& family, double K, std::uint64_t J,
                             const condsim::HGrid& h_grid, const renewal::RenewalTable& u_table,
                             std::uint64_t samples, rng::Stream stream,
                             const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// Theorem 1: conditional law curves and the assembled limit law
// ---------------------------------------------------------------------------
struct LawCurve {
  std::uint64_t n = 0;  // 0 for the assembled limit curve
  Eigen::ArrayXd z_grid;
  Eigen::ArrayXd values;
  Eigen::ArrayXd se;
};

struct Theorem1Report {
  double K = 0.0;
  std::vector<LawCurve> curves;
  std::vector<double> sup_distance;  // between consecutive n curves
  LawCurve limit_curve;
  double properness_at_z = 0.0;  // limit curve evaluated at z_properness
  double z_properness = 0.999;
  double g_total = 0.0;  // G_left + G_right used in the normalization
};

Theorem1Report theorem1_law(const stable::IncrementModel& model,
                            const envmodel::OffspringFamily& family, double K,
                            const std::vector<std::uint64_t>& n_list,
                            const Eigen::ArrayXd& z_grid, std::uint64_t samples,
                            const PiTable& pi, const condsim::HGrid& h_grid,
                            const renewal::RenewalTable& v_table,
                            const renewal::RenewalTable& u_table, double g_left, double g_right,
                            std::uint64_t assembly_samples, rng::Stream stream,
                            const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// Theorem 2: rescaled-path constancy
// ---------------------------------------------------------------------------
struct PathConstancyReport {
  std::uint64_t n = 0;
  double theta_frac = 0.25;
  std::uint64_t trajectories = 0;
  double ess = 0.0;  // of the environment weights before resampling
  Eigen::ArrayXd d_quantiles;   // sup_t |Y(t)-Y(0)|/Y(0) at {.25,.5,.75,.9}
  double median_D = 0.0;
  Eigen::ArrayXd y0_quantiles;  // Y(0) at {.5,.9,.99,.999}
  double mass_y0_zero = 0.0;
  double cutoff = 0.0;  // 10 x the 99.9% Y(0) quantile of the reference n
  double mass_above_cutoff = 0.0;
};

std::vector<PathConstancyReport> theorem2_constancy(
    const stable::IncrementModel& model, const envmodel::OffspringFamily& family, double K,
    double theta_frac, const std::vector<std::uint64_t>& n_list, std::uint64_t samples,
    std::uint64_t trajectories, rng::Stream stream, const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// meander proportionality: x -> P(S_n <= x a_n | Z_n > 0)
// ---------------------------------------------------------------------------
struct MeanderReport {
  Eigen::ArrayXd x_grid;
  std::vector<std::uint64_t> n_list;
  std::vector<Eigen::ArrayXd> curves;
  std::vector<double> sup_distance;  // consecutive n
};

MeanderReport meander_proportionality(const stable::IncrementModel& model,
                                      const envmodel::OffspringFamily& family,
                                      const Eigen::ArrayXd& x_grid,
                                      const std::vector<std::uint64_t>& n_list,
                                      std::uint64_t samples, rng::Stream stream,
                                      const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// P(Z_n > 0) / P(L_n >= 0)
// ---------------------------------------------------------------------------
struct ThetaRatioReport {
  std::vector<std::uint64_t> n_list;
  std::vector<Estimate> ratios;
  bool stabilized = false;
  double last_gap_se = 0.0;
};

ThetaRatioReport survival_ratio_theta(const stable::IncrementModel& model,
                                      const envmodel::OffspringFamily& family,
                                      const std::vector<std::uint64_t>& n_list,
                                      std::uint64_t samples, rng::Stream stream,
                                      const LanePlan& plan = {});

// ---------------------------------------------------------------------------
// D constant of (Lim_surv0) for phi(n) = a_n/log n and a_n n^{-0.1}
// ---------------------------------------------------------------------------
struct DConstantRow {
  std::uint64_t n = 0;
  double phi1 = 0.0, phi2 = 0.0;
  Estimate d1, d2;          // P(Z_n>0, S_n<=phi)/(g0 b_n IV(phi))
  double diff_se = 0.0;     // |d1-d2| / SE(d1-d2), shared-sample pairing
  Estimate d_cond;          // P(Z_n>0, S_n<=phi1)/P(S_n<=phi1, L_n>=0)
};

struct DConstantReport {
  std::vector<DConstantRow> rows;
};

DConstantReport D_constant(const stable::IncrementModel& model,
                           const envmodel::OffspringFamily& family,
                           const std::vector<std::uint64_t>& n_list,
                           const renewal::RenewalTable& v_table, std::uint64_t samples,
                           rng::Stream stream, const LanePlan& plan = {});

// three-way tau decomposition identity on shared samples (split completeness)
struct DecompositionCheck {
  double undecomposed = 0.0;
  double sum_of_parts = 0.0;
  double middle_over_bn = 0.0;  // tau_n in (J, n-J] contribution / b_n
};
DecompositionCheck tau_decomposition(const stable::IncrementModel& model,
                                     const envmodel::OffspringFamily& family, double K, double z,
                                     std::uint64_t n, std::uint64_t J, std::uint64_t samples,
                                     rng::Stream stream, const LanePlan& plan = {});

}  // namespace bpre::limits
