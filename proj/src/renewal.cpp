#include "bpre/renewal.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace bpre::renewal {

namespace {

double lerp_on(const Eigen::ArrayXd& g, const Eigen::ArrayXd& v, double x) {
  const Eigen::Index n = g.size();
  if (x <= g[0]) return v[0];
  if (x >= g[n - 1]) {
    const double slope = (v[n - 1] - v[n - 2]) / (g[n - 1] - g[n - 2]);
    return v[n - 1] + (x - g[n - 1]) * slope;
  }
  const double* beg = g.data();
  const Eigen::Index i = std::upper_bound(beg, beg + n, x) - beg - 1;
  const double w = (x - g[i]) / (g[i + 1] - g[i]);
  return v[i] * (1.0 - w) + v[i + 1] * w;
}

struct SeriesAcc {
  Eigen::ArrayXd sum, sumsq;        // per-cell per-path totals
  Eigen::ArrayXd window;            // per-cell counts over the tail-fit window
  std::vector<double> anchor_term;  // per-n term counts at the far grid end
  std::uint64_t paths = 0;

  void init(Eigen::Index cells, std::uint64_t n_used) {
    sum = Eigen::ArrayXd::Zero(cells);
    sumsq = Eigen::ArrayXd::Zero(cells);
    window = Eigen::ArrayXd::Zero(cells);
    anchor_term.assign(n_used + 1, 0.0);
  }
  void merge(const SeriesAcc& o) {
    if (sum.size() == 0) {
      *this = o;
      return;
    }
    sum += o.sum;
    sumsq += o.sumsq;
    window += o.window;
    for (std::size_t i = 0; i < anchor_term.size(); ++i) anchor_term[i] += o.anchor_term[i];
    paths += o.paths;
  }
};

// Shared walker for both series. `stay_negative`: alive while S < 0 (U table,
// M_n < 0); otherwise alive while S >= 0 (V table, L_n >= 0). `cell_of` maps
// the current S to the first grid cell its indicator covers.
template <class CellOf>
SeriesAcc scan_series(const stable::IncrementModel& model, const Eigen::ArrayXd& grid,
                      std::uint64_t n_used, std::uint64_t window_lo, bool stay_negative,
                      std::uint64_t cnt, rng::Stream rs, CellOf cell_of) {
  const Eigen::Index cells = grid.size();
  SeriesAcc acc;
  acc.init(cells, n_used);
  std::vector<double> delta(static_cast<std::size_t>(cells));
  for (std::uint64_t i = 0; i < cnt; ++i) {
    std::fill(delta.begin(), delta.end(), 0.0);
    double s = 0.0;
    Eigen::Index lo_touched = cells;
    for (std::uint64_t n = 1; n <= n_used; ++n) {
      s += stable::sample_increment(model, rs);
      if (stay_negative ? (s >= 0.0) : (s < 0.0)) break;
      const Eigen::Index c = cell_of(s);
      if (c < cells) {
        delta[static_cast<std::size_t>(c)] += 1.0;
        lo_touched = std::min(lo_touched, c);
        acc.anchor_term[n] += 1.0;  // series at the far grid end
        if (n > window_lo) acc.window[c] += 1.0;
      }
    }
    double run = 0.0;
    for (Eigen::Index c = lo_touched; c < cells; ++c) {
      run += delta[static_cast<std::size_t>(c)];
      acc.sum[c] += run;
      acc.sumsq[c] += run * run;
    }
    ++acc.paths;
  }
  return acc;
}

// first N with three consecutive terms below rel_tol * running sum, from the
// anchor-cell series; n_max if the rule never fires
std::uint64_t stop_rule(const std::vector<double>& terms, double base, double rel_tol,
                        std::uint64_t n_max) {
  int consec = 0;
  double run = base;
  for (std::size_t n = 1; n < terms.size(); ++n) {
    run += terms[n];
    consec = (run > 0.0 && terms[n] < rel_tol * run) ? consec + 1 : 0;
    if (consec >= 3) return static_cast<std::uint64_t>(n);
  }
  return n_max;
}

}  // namespace

Eigen::ArrayXd uniform_grid(double xmax, double h) {
  const auto cells = static_cast<Eigen::Index>(std::llround(xmax / h)) + 1;
  Eigen::ArrayXd g(cells);
  for (Eigen::Index i = 0; i < cells; ++i) g[i] = static_cast<double>(i) * h;
  return g;
}

double b_series_tail(const stable::IncrementModel& model, std::uint64_t N) {
  const double s = 1.0 + 1.0 / model.target.alpha;
  double acc = 0.0;
  std::uint64_t n = N + 1;
  const std::uint64_t direct_until = N + 20000;
  for (; n <= direct_until; ++n) acc += std::pow(static_cast<double>(n), -s);
  const double M = static_cast<double>(direct_until);
  acc += std::pow(M, 1.0 - s) / (s - 1.0) - 0.5 * std::pow(M, -s);
  return acc / model.ell;
}

namespace {

RenewalTable build_table(const stable::IncrementModel& model, const Eigen::ArrayXd& grid,
                         std::uint64_t n_max, std::uint64_t samples, rng::Stream stream,
                         const LanePlan& plan, RenewalKind kind) {
  if (n_max < 1) throw std::invalid_argument("renewal: n_max must be >= 1");
  if (grid.size() < 2 || grid[0] != 0.0)
    throw std::invalid_argument("renewal: grid must start at 0 with >= 2 points");
  const bool is_u = kind == RenewalKind::U;
  const Eigen::Index cells = grid.size();

  // U: indicator S_n >= -x covers x >= -S, cell = first grid >= -s.
  // V (stored against u=-x): S_n < -x = u covers u > S, cell = first grid > s.
  auto cell_of_u = [&](double s) {
    const double* beg = grid.data();
    return static_cast<Eigen::Index>(std::lower_bound(beg, beg + cells, -s) - beg);
  };
  auto cell_of_v = [&](double s) {
    const double* beg = grid.data();
    return static_cast<Eigen::Index>(std::upper_bound(beg, beg + cells, s) - beg);
  };

  // deterministic pilot fixes the horizon for all lanes
  const std::uint64_t pilot = std::max<std::uint64_t>(samples / 64, 2000);
  SeriesAcc pacc;
  {
    auto ps = stream.derived("pilot");
    if (is_u)
      pacc = scan_series(model, grid, n_max, n_max, true, pilot, ps, cell_of_u);
    else
      pacc = scan_series(model, grid, n_max, n_max, false, pilot, ps, cell_of_v);
  }
  std::vector<double> pilot_terms(pacc.anchor_term.size());
  for (std::size_t i = 0; i < pilot_terms.size(); ++i)
    pilot_terms[i] = pacc.anchor_term[i] / static_cast<double>(pacc.paths);
  const std::uint64_t n_used = stop_rule(pilot_terms, 1.0, 1e-3, n_max);
  const std::uint64_t window_lo = n_used - std::min<std::uint64_t>(n_used / 4, 200);

  auto lanes = run_lanes<SeriesAcc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("series").derived(static_cast<std::uint64_t>(lane));
    return is_u ? scan_series(model, grid, n_used, window_lo, true, cnt, rs, cell_of_u)
                : scan_series(model, grid, n_used, window_lo, false, cnt, rs, cell_of_v);
  });
  SeriesAcc acc;
  for (const auto& a : lanes) acc.merge(a);
  const auto N = static_cast<double>(acc.paths);

  RenewalTable t;
  t.kind = kind;
  t.grid = grid;
  t.n_max = n_max;
  t.n_used = n_used;
  t.samples = acc.paths;
  t.stream_key = stream.key();
  t.values.resize(cells);
  t.se.resize(cells);
  t.tail.resize(cells);
  const std::uint64_t window_n = n_used - window_lo;
  const double tail_sum = b_series_tail(model, n_used);
  double window_b = 0.0;
  for (std::uint64_t n = window_lo + 1; n <= n_used; ++n)
    window_b += stable::norming(model, n).b_n;
  // suffix sums turn per-cell window counts into per-cell window term totals
  Eigen::ArrayXd wsuffix = Eigen::ArrayXd::Zero(cells);
  {
    double run = 0.0;
    for (Eigen::Index c = 0; c < cells; ++c) {
      run += acc.window[c];
      wsuffix[c] = run;
    }
  }
  for (Eigen::Index c = 0; c < cells; ++c) {
    const double mean = acc.sum[c] / N;
    const double var = std::fmax(acc.sumsq[c] / N - mean * mean, 0.0);
    const double indicator = is_u ? 1.0 : (grid[c] > 0.0 ? 1.0 : 0.0);
    t.values[c] = indicator + mean;
    t.se[c] = std::sqrt(var / N);
    const double cx = window_n > 0 ? (wsuffix[c] / N) / window_b : 0.0;
    t.tail[c] = cx * tail_sum;
  }
  // truncation diagnostics at the far end
  double last_term = 0.0;
  {
    std::uint64_t lastn = n_used;
    last_term = acc.anchor_term[lastn] / N;
  }
  const double far_value = t.values[cells - 1];
  t.last_term_rel = far_value > 0.0 ? last_term / far_value : 0.0;
  std::vector<double> main_terms(acc.anchor_term.size());
  for (std::size_t i = 0; i < main_terms.size(); ++i) main_terms[i] = acc.anchor_term[i] / N;
  t.truncation_warning = stop_rule(main_terms, 1.0, 1e-3, n_max) >= n_max;
  return t;
}

}  // namespace

RenewalTable estimate_U(const stable::IncrementModel& model, const Eigen::ArrayXd& x_grid,
                        std::uint64_t n_max, std::uint64_t samples, rng::Stream stream,
                        const LanePlan& plan) {
  return build_table(model, x_grid, n_max, samples, stream.derived("U"), plan, RenewalKind::U);
}

RenewalTable estimate_V(const stable::IncrementModel& model, const Eigen::ArrayXd& u_grid,
                        std::uint64_t n_max, std::uint64_t samples, rng::Stream stream,
                        const LanePlan& plan) {
  return build_table(model, u_grid, n_max, samples, stream.derived("V"), plan, RenewalKind::V);
}

double RenewalTable::value_at(double x) const {
  const Eigen::Index n = grid.size();
  auto corr_lerp = [&](double u) {
    if (u >= grid[n - 1]) {
      const double v1 = corrected(n - 1), v0 = corrected(n - 2);
      return v1 + (u - grid[n - 1]) * (v1 - v0) / (grid[n - 1] - grid[n - 2]);
    }
    const double* beg = grid.data();
    const Eigen::Index i = std::upper_bound(beg, beg + n, u) - beg - 1;
    const double w = (u - grid[i]) / (grid[i + 1] - grid[i]);
    return corrected(i) * (1.0 - w) + corrected(i + 1) * w;
  };
  if (kind == RenewalKind::U) {
    if (x < 0.0) return 0.0;
    return corr_lerp(x);
  }
  // V table: argument is x <= 0, stored against u = -x
  if (x > 0.0) return 0.0;
  if (x == 0.0) return values[0];  // literal V(0) = 0
  const double u = -x;
  if (u < grid[1]) {
    // left limit V(0-) = 1: interpolate from the virtual node (0, 1 + tail)
    const double v0 = 1.0 + tail[0];
    const double w = u / grid[1];
    return v0 * (1.0 - w) + corrected(1) * w;
  }
  return corr_lerp(u);
}

double RenewalTable::se_at(double x) const {
  const double u = kind == RenewalKind::U ? x : -x;
  if (u < 0.0) return 0.0;
  const double s = lerp_on(grid, se, u);
  const double tl = lerp_on(grid, tail, u);
  return std::sqrt(s * s + 0.25 * tl * tl);
}

HarmonicityResidual check_harmonicity(const stable::IncrementModel& model,
                                      const RenewalTable& table, Side side, double x,
                                      std::uint64_t samples, rng::Stream stream) {
  if (side == Side::Plus && x < 0.0)
    throw std::domain_error("check_harmonicity: plus side needs x >= 0");
  if (side == Side::Minus && x >= 0.0)
    throw std::domain_error("check_harmonicity: minus side needs x < 0");
  HarmonicityResidual out;
  const double base = table.value_at(x);
  if (base == 0.0) {
    out.flagged = true;
    return out;
  }
  Moments mom;
  double se_tab_w = 0.0;
  auto rs = stream.derived("harmonicity");
  for (std::uint64_t i = 0; i < samples; ++i) {
    const double xx = x + stable::sample_increment(model, rs);
    const bool keep = side == Side::Plus ? xx >= 0.0 : xx < 0.0;
    const double v = keep ? table.value_at(xx) : 0.0;
    mom.add(v);
    if (keep) se_tab_w += table.se_at(xx);
  }
  const auto est = mom.estimate();
  const double se_tab = se_tab_w / static_cast<double>(samples);
  out.estimate = est.value;
  out.residual = std::abs(est.value - base) / base;
  out.combined_se = combined_se(est.se, se_tab, table.se_at(x)) / base;
  return out;
}

QuadratureValue integral_V(const RenewalTable& table, double y) {
  if (table.kind != RenewalKind::V) throw std::invalid_argument("integral_V: V table required");
  if (y < 0.0) throw std::invalid_argument("integral_V: y must be >= 0");
  if (y > table.grid[table.grid.size() - 1] + 1e-12)
    throw ExtendGridError("integral_V: grid does not cover [0, y]");
  auto integrand = [&](double u) { return table.value_at(u == 0.0 ? -1e-300 : -u); };
  auto trapz = [&](Eigen::Index step) {
    double acc = 0.0;
    double prev_u = 0.0, prev_f = integrand(0.0);
    for (Eigen::Index i = step; i < table.grid.size(); i += step) {
      double u = table.grid[i];
      bool last = false;
      if (u >= y) {
        u = y;
        last = true;
      }
      const double f = integrand(u);
      acc += 0.5 * (prev_f + f) * (u - prev_u);
      if (last) return acc;
      prev_u = u;
      prev_f = f;
    }
    return acc + (y > prev_u ? (y - prev_u) * prev_f : 0.0);
  };
  QuadratureValue q;
  q.value = trapz(1);
  q.error = std::abs(q.value - trapz(2)) / 3.0;
  return q;
}

VIntegral::VIntegral(const RenewalTable& v_table) {
  if (v_table.kind != RenewalKind::V) throw std::invalid_argument("VIntegral: V table required");
  grid_ = v_table.grid;
  cum_.resize(grid_.size());
  cum_[0] = 0.0;
  double prev_f = 1.0 + v_table.tail[0];  // V(0-)
  for (Eigen::Index i = 1; i < grid_.size(); ++i) {
    const double f = v_table.corrected(i);
    cum_[i] = cum_[i - 1] + 0.5 * (prev_f + f) * (grid_[i] - grid_[i - 1]);
    prev_f = f;
  }
  slope_end_ = v_table.corrected(grid_.size() - 1);
}

double VIntegral::at(double y) const {
  if (y <= 0.0) return 0.0;
  const Eigen::Index n = grid_.size();
  if (y >= grid_[n - 1]) return cum_[n - 1] + (y - grid_[n - 1]) * slope_end_;
  return lerp_on(grid_, cum_, y);
}

MuMeasure::MuMeasure(const RenewalTable& u_table, double eta) : eta_(eta) {
  if (u_table.kind != RenewalKind::U) throw std::invalid_argument("MuMeasure: U table required");
  if (!(eta > 0.0)) throw std::invalid_argument("MuMeasure: eta must be > 0");
  grid_ = u_table.grid;
  const Eigen::Index n = grid_.size();
  Eigen::ArrayXd f(n);
  for (Eigen::Index i = 0; i < n; ++i) f[i] = std::exp(-eta * grid_[i]) * u_table.corrected(i);
  const double peak = f.maxCoeff();
  if (f[n - 1] >= 1e-10 * peak)
    throw ExtendGridError("mu_eta: grid tail not covered (e^{-eta y} U(y) too large at ymax)");
  cum_.resize(n);
  cum_[0] = 0.0;
  for (Eigen::Index i = 1; i < n; ++i)
    cum_[i] = cum_[i - 1] + 0.5 * (f[i - 1] + f[i]) * (grid_[i] - grid_[i - 1]);
  z_ = cum_[n - 1];
  // analytic continuation of the excluded tail, linear U
  const double uend = u_table.corrected(n - 1);
  const double slope = (u_table.corrected(n - 1) - u_table.corrected(n - 2)) /
                       (grid_[n - 1] - grid_[n - 2]);
  const double y0 = grid_[n - 1];
  const double tail =
      std::exp(-eta * y0) * (uend / eta + slope / (eta * eta));
  tail_frac_ = tail / (z_ + tail);
}

double MuMeasure::cum_at(double y) const {
  if (y <= 0.0) return 0.0;
  const Eigen::Index n = grid_.size();
  if (y >= grid_[n - 1]) return cum_[n - 1];
  return lerp_on(grid_, cum_, y);
}

double MuMeasure::mass(double ylo, double yhi) const {
  return (cum_at(yhi) - cum_at(ylo)) / z_;
}

double MuMeasure::mean() const {
  const Eigen::Index n = grid_.size();
  double acc = 0.0;
  for (Eigen::Index i = 1; i < n; ++i) {
    const double mid = 0.5 * (grid_[i - 1] + grid_[i]);
    acc += mid * (cum_[i] - cum_[i - 1]);
  }
  return acc / z_;
}

double exp_integral_U(const RenewalTable& u_table, double eta) {
  MuMeasure mu(u_table, eta);
  return mu.grid_mass_unnormalized();
}

}  // namespace bpre::renewal
