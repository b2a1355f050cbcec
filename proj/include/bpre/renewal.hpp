#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>

#include "bpre/estimate.hpp"
#include "bpre/parallel.hpp"
#include "bpre/stable.hpp"

namespace bpre::renewal {

struct ExtendGridError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RenewalKind { U, V };
enum class Side { Plus, Minus };

// Truncated-series estimate of a renewal function on a uniform grid.
//
// U-tables live on x >= 0. V-tables are stored against u = -x >= 0, i.e.
// grid[i] holds V(-grid[i]). `values` are the literal partial sums
// (indicator + sum of the first n_used terms); `tail` is a Richardson-style
// extrapolation of the remainder from the decay rate b_n of the last terms.
//
// The literal V(0) is 0 while the left limit V(0-) is 1; value_at() uses the
// left limit for interpolation strictly inside (-h, 0) and the literal value
// exactly at 0.
struct RenewalTable {
  RenewalKind kind = RenewalKind::U;
  Eigen::ArrayXd grid;
  Eigen::ArrayXd values;
  Eigen::ArrayXd se;
  Eigen::ArrayXd tail;
  std::uint64_t n_max = 0;
  std::uint64_t n_used = 0;
  std::uint64_t samples = 0;
  double last_term_rel = 0.0;  // last-term magnitude / partial sum at the far grid end
  bool truncation_warning = false;
  std::uint64_t stream_key = 0;

  [[nodiscard]] double corrected(Eigen::Index i) const { return values[i] + tail[i]; }
  // tail-corrected value with linear interpolation and linear extrapolation
  [[nodiscard]] double value_at(double x) const;
  // interpolated statistical SE combined with half the tail term as a
  // systematic-allowance
  [[nodiscard]] double se_at(double x) const;
};

Eigen::ArrayXd uniform_grid(double xmax, double h);

RenewalTable estimate_U(const stable::IncrementModel& model, const Eigen::ArrayXd& x_grid,
                        std::uint64_t n_max, std::uint64_t samples, rng::Stream stream,
                        const LanePlan& plan = {});

RenewalTable estimate_V(const stable::IncrementModel& model, const Eigen::ArrayXd& u_grid,
                        std::uint64_t n_max, std::uint64_t samples, rng::Stream stream,
                        const LanePlan& plan = {});

struct HarmonicityResidual {
  double residual = 0.0;     // |E[table(x+X); constraint] - table(x)| / table(x)
  double combined_se = 0.0;  // MC + table noise, relative
  double estimate = 0.0;
  bool flagged = false;  // table(x) == 0
};

HarmonicityResidual check_harmonicity(const stable::IncrementModel& model,
                                      const RenewalTable& table, Side side, double x,
                                      std::uint64_t samples, rng::Stream stream);

struct QuadratureValue {
  double value = 0.0;
  double error = 0.0;  // grid-refinement estimate
};

// int_0^y V(-u) du on the table grid (trapezoid, tail-corrected values).
QuadratureValue integral_V(const RenewalTable& table, double y);

// Precomputed cumulative of integral_V for per-sample evaluation.
class VIntegral {
 public:
  explicit VIntegral(const RenewalTable& v_table);
  [[nodiscard]] double at(double y) const;  // int_0^y V(-u) du
  [[nodiscard]] double ymax() const { return grid_[grid_.size() - 1]; }

 private:
  Eigen::ArrayXd grid_;
  Eigen::ArrayXd cum_;
  double slope_end_ = 0.0;  // V(-ymax) for linear continuation of the integrand
};

// mu_eta(dy) = e^{-eta y} U(y) dy / Z restricted to the table grid; cell
// masses come from a cumulative trapezoid so cells can be split exactly.
class MuMeasure {
 public:
  MuMeasure(const RenewalTable& u_table, double eta);
  [[nodiscard]] double mass(double ylo, double yhi) const;  // normalized
  [[nodiscard]] double mean() const;
  [[nodiscard]] double total_weight() const { return 1.0; }
  [[nodiscard]] double grid_mass_unnormalized() const { return z_; }
  [[nodiscard]] double tail_fraction() const { return tail_frac_; }
  [[nodiscard]] double ymax() const { return grid_[grid_.size() - 1]; }
  [[nodiscard]] const Eigen::ArrayXd& grid() const { return grid_; }

 private:
  [[nodiscard]] double cum_at(double y) const;
  Eigen::ArrayXd grid_;
  Eigen::ArrayXd cum_;
  double z_ = 0.0;
  double tail_frac_ = 0.0;
  double eta_ = 1.0;
};

// int_0^inf e^{-eta y} U(y) dy with the linear continuation of U past the grid.
double exp_integral_U(const RenewalTable& u_table, double eta);

// sum_{n > N} b_n for the model (used by the tail extrapolation).
double b_series_tail(const stable::IncrementModel& model, std::uint64_t N);

}  // namespace bpre::renewal
