#include "bpre/condsim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

namespace bpre::condsim {

namespace {

struct ScanAcc {
  std::vector<PathRecord> recs;
};

std::vector<PathRecord> scan_paths(const stable::IncrementModel& model,
                                   const envmodel::OffspringFamily& family, std::uint64_t n,
                                   std::uint64_t samples, rng::Stream stream,
                                   const LanePlan& plan) {
  const bool lf = family.kind == envmodel::OffspringKind::LinearFractional;
  auto lanes = run_lanes<ScanAcc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("env_scan").derived(static_cast<std::uint64_t>(lane));
    ScanAcc acc;
    acc.recs.reserve(cnt);
    Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < cnt; ++i) {
      PathRecord r;
      if (n == 0) {
        acc.recs.push_back(r);
        continue;
      }
      gfengine::LfChainState st;
      double s = 0.0, mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (std::uint64_t k = 0; k < n; ++k) {
        const double x = stable::sample_increment(model, rs);
        s += x;
        mn = std::fmin(mn, s);
        mx = std::fmax(mx, s);
        if (lf)
          st.update(x);
        else
          inc[static_cast<Eigen::Index>(k)] = x;
      }
      r.s_n = s;
      r.min_s = mn;
      r.max_s = mx;
      if (lf) {
        r.log_surv = st.log_t0;
      } else {
        double t = 1.0;  // 1 - F_{m,n}(0), backward
        for (Eigen::Index m = inc.size(); m-- > 0;) {
          const double lambda = std::exp(inc[m]);
          t = -std::expm1(-lambda * t);
        }
        r.log_surv = std::log(std::fmax(t, 1e-300));
      }
      acc.recs.push_back(r);
    }
    return acc;
  });
  std::vector<PathRecord> all;
  for (auto& a : lanes) all.insert(all.end(), a.recs.begin(), a.recs.end());
  return all;
}

}  // namespace

EnvSample::EnvSample(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                     std::uint64_t n, std::uint64_t samples, rng::Stream stream,
                     const LanePlan& plan)
    : records_(scan_paths(model, family, n, samples, stream, plan)),
      n_(n),
      aux_base_(stream.derived("aux")) {}

namespace {

WeightedEstimate weighted_pass(const std::vector<PathRecord>& recs, std::uint64_t n,
                               const Functional& g, double x, const renewal::RenewalTable& table,
                               bool plus_side, rng::Stream aux_base) {
  const double norm = plus_side ? table.value_at(x) : (x == 0.0 ? 1.0 : table.value_at(x));
  if (!(norm > 0.0)) throw std::domain_error("weighted expectation: zero normalizer");
  const double grid_hi = table.grid[table.grid.size() - 1];
  double sw = 0.0, sw2 = 0.0, st = 0.0, st2 = 0.0, extrap = 0.0;
  std::uint64_t idx = 0;
  for (const auto& r : recs) {
    double w = 0.0;
    const double end = x + r.s_n;
    const bool keep = n == 0 ? true : (plus_side ? r.min_s >= -x : r.max_s < -x);
    if (keep) {
      w = table.value_at(end) / norm;
      if (std::abs(plus_side ? end : -end) > grid_hi) extrap += w;
    }
    double t = 0.0;
    if (w != 0.0) {
      PathContext ctx{r, x, n, aux_base.derived(idx)};
      t = w * g(ctx);
    }
    sw += w;
    sw2 += w * w;
    st += t;
    st2 += t * t;
    ++idx;
  }
  const auto N = static_cast<double>(recs.size());
  WeightedEstimate out;
  out.samples = recs.size();
  out.horizon = n;
  out.value = st / N;
  const double var = std::fmax(st2 / N - out.value * out.value, 0.0);
  const double table_rel = table.se_at(x) / norm;
  out.std_error = std::sqrt(var / N + table_rel * table_rel * out.value * out.value);
  out.effective_sample_size = sw2 > 0.0 ? sw * sw / sw2 : 0.0;
  out.low_ess = out.effective_sample_size < 30.0;
  out.extrap_weight_frac = sw > 0.0 ? extrap / sw : 0.0;
  return out;
}

}  // namespace

WeightedEstimate EnvSample::plus(const Functional& g, double x,
                                 const renewal::RenewalTable& u_table) const {
  if (x < 0.0) throw std::domain_error("plus expectation needs x >= 0");
  return weighted_pass(records_, n_, g, x, u_table, true, aux_base_);
}

WeightedEstimate EnvSample::minus(const Functional& g, double x,
                                  const renewal::RenewalTable& v_table) const {
  if (x > 0.0) throw std::domain_error("minus expectation needs x <= 0");
  return weighted_pass(records_, n_, g, x, v_table, false, aux_base_);
}

WeightedEstimate plus_expectation(const stable::IncrementModel& model,
                                  const envmodel::OffspringFamily& family, std::uint64_t n,
                                  const Functional& g, double x,
                                  const renewal::RenewalTable& u_table, std::uint64_t samples,
                                  rng::Stream stream, const LanePlan& plan) {
  EnvSample sample(model, family, n, samples, stream, plan);
  return sample.plus(g, x, u_table);
}

WeightedEstimate minus_expectation(const stable::IncrementModel& model,
                                   const envmodel::OffspringFamily& family, std::uint64_t n,
                                   const Functional& g, double x,
                                   const renewal::RenewalTable& v_table, std::uint64_t samples,
                                   rng::Stream stream, const LanePlan& plan) {
  if (x >= 0.0) throw std::domain_error("minus_expectation: x must be < 0");
  EnvSample sample(model, family, n, samples, stream, plan);
  return sample.minus(g, x, v_table);
}

double WplusSummary::kolmogorov(const WplusSummary& other) const {
  double cdf_a = 0.0, cdf_b = 0.0, sup = 0.0;
  std::size_t i = 0, j = 0;
  while (i < points.size() || j < other.points.size()) {
    const double xa = i < points.size() ? points[i].first : std::numeric_limits<double>::infinity();
    const double xb =
        j < other.points.size() ? other.points[j].first : std::numeric_limits<double>::infinity();
    if (xa <= xb) cdf_a += points[i++].second;
    if (xb <= xa) cdf_b += other.points[j++].second;
    sup = std::fmax(sup, std::abs(cdf_a - cdf_b));
  }
  return sup;
}

WplusSummary estimate_Wplus(const stable::IncrementModel& model,
                            const envmodel::OffspringFamily& family, std::uint64_t q,
                            std::uint64_t n, const renewal::RenewalTable& u_table,
                            std::uint64_t samples, rng::Stream stream, const LanePlan& plan) {
  if (q < 1) throw std::invalid_argument("estimate_Wplus: q must be >= 1");
  const bool lf = family.kind == envmodel::OffspringKind::LinearFractional;
  struct Acc {
    std::vector<std::pair<double, double>> pts;
    double sw = 0.0, sw2 = 0.0, sv = 0.0, sv2 = 0.0, zero_w = 0.0;
    std::uint64_t n_total = 0;
  };
  // one scan; the particle chain (general family) or the exact conditional
  // geometric draw (linear-fractional) rides along with the walk
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("wplus").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    for (std::uint64_t i = 0; i < cnt; ++i) {
      ++acc.n_total;
      gfengine::LfChainState st;
      std::uint64_t zp = q;  // particle count (general family)
      double s = 0.0;
      bool alive = true;
      for (std::uint64_t k = 0; k < n; ++k) {
        const double x = stable::sample_increment(model, rs);
        if (lf)
          st.update(x);
        else if (zp > 0)
          zp = envmodel::sample_offspring_sum(family, x, zp, rs);
        s += x;
        if (s < 0.0) {
          alive = false;
          break;
        }
      }
      if (!alive) continue;  // L_n >= 0 fails: weight 0
      const double w = u_table.value_at(s) / u_table.value_at(0.0);
      std::uint64_t z;
      if (n == 0) {
        z = q;
      } else if (lf) {
        PathRecord r;
        r.s_n = s;
        r.log_surv = st.log_t0;
        auto aux = rs;  // continue the lane stream for the Z draw
        PathContext ctx{r, 0.0, n, aux};
        z = ctx.sample_Z(q);
        rs = ctx.aux;
      } else {
        z = zp;
      }
      const double w1 = std::exp(-s) * static_cast<double>(z);
      acc.pts.emplace_back(w1, w);
      acc.sw += w;
      acc.sw2 += w * w;
      acc.sv += w * w1;
      acc.sv2 += w * w1 * w * w1;
      if (z == 0) acc.zero_w += w;
    }
    return acc;
  });
  WplusSummary out;
  double sw = 0.0, sw2 = 0.0, sv = 0.0, sv2 = 0.0, zero_w = 0.0;
  std::uint64_t n_total = 0;
  for (auto& a : lanes) {
    out.points.insert(out.points.end(), a.pts.begin(), a.pts.end());
    sw += a.sw;
    sw2 += a.sw2;
    sv += a.sv;
    sv2 += a.sv2;
    zero_w += a.zero_w;
    n_total += a.n_total;
  }
  const auto N = static_cast<double>(n_total);
  out.mean.samples = n_total;
  out.mean.horizon = n;
  out.mean.value = sv / N;
  const double var = std::fmax(sv2 / N - out.mean.value * out.mean.value, 0.0);
  out.mean.std_error = std::sqrt(var / N);
  out.mean.effective_sample_size = sw2 > 0.0 ? sw * sw / sw2 : 0.0;
  out.mean.low_ess = out.mean.effective_sample_size < 30.0;
  out.atom_at_zero = sw > 0.0 ? zero_w / sw : 0.0;
  out.positive_mass = 1.0 - out.atom_at_zero;
  std::sort(out.points.begin(), out.points.end());
  if (sw > 0.0)
    for (auto& p : out.points) p.second /= sw;
  return out;
}

std::vector<double> suffix_extinction_all(const envmodel::EnvRealization& env, std::uint64_t n) {
  if (n > env.n) throw std::invalid_argument("suffix_extinction_all: n exceeds environment");
  std::vector<double> s(n + 1);
  s[n] = 0.0;
  for (std::uint64_t m = n; m-- > 0;) {
    const double x = env.walk.increments[static_cast<Eigen::Index>(m)];
    if (env.family.kind == envmodel::OffspringKind::LinearFractional) {
      const double p = envmodel::lf_p(x);
      s[m] = p / (1.0 - (1.0 - p) * s[m + 1]);
    } else {
      s[m] = std::exp(std::exp(x) * (s[m + 1] - 1.0));
    }
  }
  return s;
}

StepLaw one_step_conditioned(const envmodel::OffspringFamily& family, double x, std::uint64_t k,
                             double s_next, double mass_tol) {
  if (k < 1) throw std::invalid_argument("one_step_conditioned: k must be >= 1");
  StepLaw law;
  const double mean = static_cast<double>(k) * std::exp(x);
  double varper;
  if (family.kind == envmodel::OffspringKind::LinearFractional) {
    const double p = envmodel::lf_p(x);
    varper = (1.0 - p) / (p * p);
  } else {
    varper = std::exp(x);
  }
  const double sd = std::sqrt(static_cast<double>(k) * varper);
  // survival-conditioned normalizer 1 - f(s_next)^k is exact
  double log_f;
  if (family.kind == envmodel::OffspringKind::LinearFractional) {
    const double p = envmodel::lf_p(x);
    log_f = std::log(p) - std::log1p(-(1.0 - p) * s_next);
  } else {
    log_f = std::exp(x) * (s_next - 1.0);
  }
  const double z_exact = -std::expm1(static_cast<double>(k) * log_f);
  if (!(z_exact > 0.0)) throw std::domain_error("one_step_conditioned: zero conditioned mass");
  const double log_s = s_next > 0.0 ? std::log(s_next) : -std::numeric_limits<double>::infinity();

  double width = 12.0 * sd + 32.0;
  for (int attempt = 0; attempt < 9; ++attempt) {
    const auto j_lo = static_cast<std::uint64_t>(std::fmax(std::floor(mean - width), 0.0));
    const auto j_hi = static_cast<std::uint64_t>(std::ceil(mean + width));
    law.j_lo = j_lo;
    law.pmf.assign(j_hi - j_lo + 1, 0.0);
    double total = 0.0;
    for (std::uint64_t j = j_lo; j <= j_hi; ++j) {
      if (j == 0) continue;  // conditioned weight vanishes
      const double lp = envmodel::log_sum_pmf(family, x, k, j);
      const double cond = -std::expm1(static_cast<double>(j) * log_s);
      const double wgt = std::exp(lp) * cond;
      law.pmf[j - j_lo] = wgt;
      total += wgt;
    }
    law.deficit = std::fmax(z_exact - total, 0.0) / z_exact;
    if (law.deficit <= mass_tol) {
      for (auto& p : law.pmf) p /= total;
      return law;
    }
    width *= 2.0;
  }
  throw std::runtime_error("one_step_conditioned: support widening failed");
}

PopulationPath conditioned_trajectory(const envmodel::EnvRealization& env, std::uint64_t n,
                                      std::uint64_t q, rng::Stream& stream) {
  if (q < 1) throw std::invalid_argument("conditioned_trajectory: q must be >= 1");
  const auto s = suffix_extinction_all(env, n);
  if (!(1.0 - std::pow(s[0], static_cast<double>(q)) > 0.0))
    throw std::domain_error("conditioned_trajectory: survival probability is zero");
  PopulationPath path;
  path.z.assign(n + 1, 0);
  path.z[0] = q;
  for (std::uint64_t m = 0; m < n; ++m) {
    const double x = env.walk.increments[static_cast<Eigen::Index>(m)];
    const auto law = one_step_conditioned(env.family, x, path.z[m], s[m + 1]);
    const double u = stream.uniform();
    double cum = 0.0;
    std::uint64_t pick = law.j_lo + law.pmf.size() - 1;
    for (std::size_t i = 0; i < law.pmf.size(); ++i) {
      cum += law.pmf[i];
      if (u < cum) {
        pick = law.j_lo + i;
        break;
      }
    }
    path.z[m + 1] = pick;
  }
  return path;
}

// ---------------------------------------------------------------------------
// h kernel
// ---------------------------------------------------------------------------

namespace {

struct BSample {
  std::vector<double> log_b;  // resampled atoms, equal mass
};

// B_infinity(u) under P^-: reversed composition with the survival-complement
// recurrence t <- q t / (p + q t); b = comp^{exp(-S)}, log b = e^{-S} log1p(-t).
BSample b_atoms_for(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                    const renewal::RenewalTable& v_table, double u, std::uint64_t horizon,
                    std::uint64_t samples, std::size_t natoms, rng::Stream stream,
                    const LanePlan& plan) {
  if (family.kind != envmodel::OffspringKind::LinearFractional)
    throw std::invalid_argument("h kernel: linear-fractional offspring required");
  struct Acc {
    std::vector<std::pair<double, double>> kept;  // (log_b, weight)
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("b_sample").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    for (std::uint64_t i = 0; i < cnt; ++i) {
      double t = 1.0 - u, srev = 0.0, mx = -std::numeric_limits<double>::infinity();
      for (std::uint64_t k = 0; k < horizon; ++k) {
        const double x = stable::sample_increment(model, rs);
        srev += x;
        mx = std::fmax(mx, srev);
        const double p = envmodel::lf_p(x);
        const double qq = 1.0 - p;
        t = qq * t / (p + qq * t);
      }
      if (mx < 0.0) {
        const double logb = std::exp(-srev) * std::log1p(-std::fmin(t, 1.0 - 1e-17));
        acc.kept.emplace_back(logb, v_table.value_at(srev));
      }
    }
    return acc;
  });
  std::vector<std::pair<double, double>> kept;
  for (auto& a : lanes) kept.insert(kept.end(), a.kept.begin(), a.kept.end());
  if (kept.empty()) throw std::runtime_error("h kernel: empty minus-side sample");
  double wsum = 0.0;
  for (auto& kv : kept) wsum += kv.second;
  BSample out;
  out.log_b.reserve(natoms);
  // systematic resampling to equal-mass atoms
  double cum = 0.0;
  std::size_t pos = 0;
  for (std::size_t a = 0; a < natoms; ++a) {
    const double target = (static_cast<double>(a) + 0.5) / static_cast<double>(natoms) * wsum;
    while (pos + 1 < kept.size() && cum + kept[pos].second < target) cum += kept[pos++].second;
    out.log_b.push_back(kept[pos].first);
  }
  return out;
}

}  // namespace

struct HKernelEstimator::Impl {
  stable::IncrementModel model;
  envmodel::OffspringFamily family;
  const renewal::RenewalTable* u_table;
  const renewal::RenewalTable* v_table;
  HGridParams params;
  rng::Stream stream;
  LanePlan plan;

  // W sample sorted by min_s descending
  std::vector<PathRecord> wsample;
  double z_norm = 0.0;  // int_0^inf e^{-y} U(y) dy

  // cells [c*d, (c+1)*d)
  double d = 0.25;
  std::size_t ncells = 0;
  std::vector<double> cell_u_int;  // int_cell U(y) dy
  std::vector<double> cell_u_mid;  // U(midpoint)

  [[nodiscard]] double cum_u(double y) const {
    // trapezoid of the corrected U on its grid, linear inside cells
    const auto& g = u_table->grid;
    const Eigen::Index n = g.size();
    if (y <= 0.0) return 0.0;
    double acc = 0.0;
    for (Eigen::Index i = 1; i < n; ++i) {
      const double lo = g[i - 1], hi = g[i];
      const double a = u_table->corrected(i - 1), b = u_table->corrected(i);
      if (y >= hi) {
        acc += 0.5 * (a + b) * (hi - lo);
      } else {
        const double f = (y - lo) / (hi - lo);
        const double by = a + (b - a) * f;
        acc += 0.5 * (a + by) * (y - lo);
        return acc;
      }
    }
    return acc;
  }

  void build() {
    wsample = scan_paths(model, family, params.horizon_w, params.samples_w,
                         stream.derived("w_sample"), plan);
    std::sort(wsample.begin(), wsample.end(),
              [](const PathRecord& a, const PathRecord& b) { return a.min_s > b.min_s; });
    z_norm = renewal::exp_integral_U(*u_table, 1.0);
    d = params.y_cell;
    const double ymax = u_table->grid[u_table->grid.size() - 1];
    ncells = static_cast<std::size_t>(std::floor(ymax / d + 1e-9));
    cell_u_int.resize(ncells);
    cell_u_mid.resize(ncells);
    for (std::size_t c = 0; c < ncells; ++c) {
      const double lo = static_cast<double>(c) * d;
      cell_u_int[c] = cum_u(lo + d) - cum_u(lo);
      cell_u_mid[c] = u_table->value_at(lo + 0.5 * d);
    }
  }

  // per-u evaluation of all cells; returns per-path-per-cell loop products
  // aggregated into (w-resolved sums, sumsq, per-atom columns)
  struct UEval {
    std::vector<double> sum;     // per w-node, sum over paths of T_i(w)
    std::vector<double> sumsq;   // per w-node
    std::vector<double> atom_h;  // per atom, h at w = 0
  };

  UEval eval_u(double u, const std::vector<double>& wnodes) const {
    const auto bs = b_atoms_for(model, family, *v_table, u, params.horizon_b, params.samples_b,
                                params.b_atoms, stream.derived("b").derived(rng::hash_str("u") ^
                                                                            std::bit_cast<std::uint64_t>(u)),
                                plan);
    const std::size_t K = bs.log_b.size();
    const auto N = static_cast<double>(wsample.size());
    UEval ev;
    ev.sum.assign(wnodes.size(), 0.0);
    ev.sumsq.assign(wnodes.size(), 0.0);
    ev.atom_h.assign(K, 0.0);
    // cell start index per w-node: cells with lo >= -w
    std::vector<std::size_t> cstart(wnodes.size());
    for (std::size_t wi = 0; wi < wnodes.size(); ++wi) {
      const double wv = std::fmin(wnodes[wi], 0.0);
      cstart[wi] = static_cast<std::size_t>(std::llround(std::fmax(-wv, 0.0) / d));
    }
    std::vector<double> suffix(ncells + 1);
    std::vector<double> colsum(ncells * K, 0.0);
    for (const auto& r : wsample) {
      // active for cells with yc >= -min_s
      std::size_t c0 = 0;
      if (r.min_s < 0.0) {
        const double need = -r.min_s;
        c0 = static_cast<std::size_t>(std::ceil(need / d - 0.5 - 1e-12));
        if (c0 >= ncells) continue;
      }
      const double t0 = r.survival(), sg = r.sigma();
      suffix[ncells] = 0.0;
      for (std::size_t c = ncells; c-- > c0;) {
        const double yc = (static_cast<double>(c) + 0.5) * d;
        const double uw = u_table->value_at(yc + r.s_n);
        double contrib = 0.0;
        if (uw > 0.0) {
          const double texp = std::exp(-r.s_n - yc);
          double mi = 0.0;
          double* col = colsum.data() + c * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double om = -std::expm1(texp * bs.log_b[k]);
            double omf = 0.0;
            const double den = sg + (1.0 - sg) * om;
            if (den > 0.0) omf = t0 * om / den;
            mi += omf;
            col[k] += uw * omf;
          }
          mi /= static_cast<double>(K);
          contrib = cell_u_int[c] * uw * mi / cell_u_mid[c];
        }
        suffix[c] = suffix[c + 1] + contrib;
      }
      for (std::size_t w2 = 0; w2 < wnodes.size(); ++w2) {
        const std::size_t cfrom = std::max(cstart[w2], c0);
        const double v = (cfrom < ncells ? suffix[cfrom] : 0.0) / (z_norm * N);
        ev.sum[w2] += v;
        ev.sumsq[w2] += v * v;
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      double hk = 0.0;
      for (std::size_t c = 0; c < ncells; ++c)
        hk += cell_u_int[c] * colsum[c * K + k] / cell_u_mid[c];
      ev.atom_h[k] = hk / (z_norm * N);
    }
    return ev;
  }
};

HKernelEstimator::HKernelEstimator(const stable::IncrementModel& model,
                                   const envmodel::OffspringFamily& family,
                                   const renewal::RenewalTable& u_table,
                                   const renewal::RenewalTable& v_table, HGridParams params,
                                   rng::Stream stream, const LanePlan& plan)
    : impl_(std::make_shared<Impl>()) {
  impl_->model = model;
  impl_->family = family;
  impl_->u_table = &u_table;
  impl_->v_table = &v_table;
  impl_->params = params;
  impl_->stream = stream;
  impl_->plan = plan;
  impl_->build();
}

HGrid HKernelEstimator::grid(const Eigen::ArrayXd& u_nodes, const Eigen::ArrayXd& w_nodes) const {
  HGrid g;
  g.params = impl_->params;
  // append the exact anchor u=1 if missing
  const bool has_anchor = u_nodes[u_nodes.size() - 1] >= 1.0;
  g.u_nodes.resize(u_nodes.size() + (has_anchor ? 0 : 1));
  g.u_nodes.head(u_nodes.size()) = u_nodes;
  if (!has_anchor) g.u_nodes[g.u_nodes.size() - 1] = 1.0;
  g.w_nodes = w_nodes;
  std::vector<double> wv(w_nodes.data(), w_nodes.data() + w_nodes.size());
  for (double& w : wv) {
    const double snapped = std::round(std::fmin(w, 0.0) / impl_->d) * impl_->d;
    if (std::abs(snapped - std::fmin(w, 0.0)) > 1e-9)
      throw std::invalid_argument("HKernelEstimator::grid: w nodes must align to y_cell");
    w = snapped;
  }
  g.value.setZero(g.u_nodes.size(), g.w_nodes.size());
  g.se.setZero(g.u_nodes.size(), g.w_nodes.size());
  const auto N = static_cast<double>(impl_->wsample.size());
  for (Eigen::Index ui = 0; ui < g.u_nodes.size(); ++ui) {
    const double u = g.u_nodes[ui];
    if (u >= 1.0) break;  // anchor row stays exactly zero
    const auto ev = impl_->eval_u(u, wv);
    for (Eigen::Index wi = 0; wi < g.w_nodes.size(); ++wi) {
      const double mean = ev.sum[static_cast<std::size_t>(wi)];
      g.value(ui, wi) = mean;
      const double m1 = mean / N;
      const double var =
          std::fmax(ev.sumsq[static_cast<std::size_t>(wi)] / N - m1 * m1, 0.0);
      const double se_w = std::sqrt(var * N);
      // atom spread at w=0 scaled to this w
      double amean = 0.0, avar = 0.0;
      for (double hk : ev.atom_h) amean += hk;
      amean /= static_cast<double>(ev.atom_h.size());
      for (double hk : ev.atom_h) avar += (hk - amean) * (hk - amean);
      avar /= static_cast<double>(ev.atom_h.size());
      double se_b = std::sqrt(avar / static_cast<double>(ev.atom_h.size()));
      if (amean > 0.0) se_b *= mean / amean;
      g.se(ui, wi) = combined_se(se_w, se_b);
    }
  }
  return g;
}

HKernel HKernelEstimator::at(double u, double w) const {
  HKernel out;
  out.u = u;
  out.w = w;
  out.horizon_w = impl_->params.horizon_w;
  out.horizon_b = impl_->params.horizon_b;
  out.y_cell = impl_->d;
  if (u >= 1.0) return out;  // h(1, .) = 0
  const double wc = std::fmin(w, 0.0);
  const double snapped = std::round(wc / impl_->d) * impl_->d;
  std::vector<double> wv{snapped};
  const auto ev = impl_->eval_u(u, wv);
  const auto N = static_cast<double>(impl_->wsample.size());
  out.value = ev.sum[0];
  const double m1 = ev.sum[0] / N;
  const double var = std::fmax(ev.sumsq[0] / N - m1 * m1, 0.0);
  const double se_w = std::sqrt(var * N);
  double amean = 0.0, avar = 0.0;
  for (double hk : ev.atom_h) amean += hk;
  amean /= static_cast<double>(ev.atom_h.size());
  for (double hk : ev.atom_h) avar += (hk - amean) * (hk - amean);
  avar /= static_cast<double>(ev.atom_h.size());
  double se_b = std::sqrt(avar / static_cast<double>(ev.atom_h.size()));
  if (amean > 0.0) se_b *= out.value / amean;
  out.std_error = combined_se(se_w, se_b);
  return out;
}

HKernel estimate_h(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                   double u, double w, const renewal::RenewalTable& u_table,
                   const renewal::RenewalTable& v_table, const HGridParams& params,
                   rng::Stream stream, const LanePlan& plan) {
  HKernelEstimator est(model, family, u_table, v_table, params, stream, plan);
  return est.at(u, w);
}

double HGrid::at(double u, double w) const {
  if (!covers(u, w)) throw renewal::ExtendGridError("HGrid: (u,w) outside the grid");
  const double wc = std::fmin(w, 0.0);
  u = std::fmin(std::fmax(u, 0.0), 1.0);
  // u bracket on phi = h/(1-u); anchor row uses the last real phi
  const Eigen::Index nu = u_nodes.size();
  Eigen::Index iu = 0;
  while (iu + 1 < nu && u_nodes[iu + 1] <= u) ++iu;
  if (iu == nu - 1) iu = nu - 2;
  auto phi_at = [&](Eigen::Index i, Eigen::Index wi) {
    const double un = u_nodes[i];
    if (un >= 1.0) {
      const double prev = u_nodes[i - 1];
      return value(i - 1, wi) / (1.0 - prev);
    }
    return value(i, wi) / (1.0 - un);
  };
  const Eigen::Index nw = w_nodes.size();
  Eigen::Index iw = 0;
  while (iw + 1 < nw && w_nodes[iw + 1] <= wc) ++iw;
  if (iw == nw - 1) iw = nw - 2;
  const double tw = (wc - w_nodes[iw]) / (w_nodes[iw + 1] - w_nodes[iw]);
  const double tu = (u - u_nodes[iu]) / (u_nodes[iu + 1] - u_nodes[iu]);
  const double phi0 = phi_at(iu, iw) * (1.0 - tw) + phi_at(iu, iw + 1) * tw;
  const double phi1 = phi_at(iu + 1, iw) * (1.0 - tw) + phi_at(iu + 1, iw + 1) * tw;
  const double phi = phi0 * (1.0 - tu) + phi1 * tu;
  return phi * (1.0 - u);
}

double HGrid::se_at(double u, double w) const {
  if (!covers(u, w)) return 0.0;
  const double wc = std::fmin(w, 0.0);
  const Eigen::Index nu = u_nodes.size(), nw = w_nodes.size();
  Eigen::Index iu = 0, iw = 0;
  while (iu + 1 < nu && u_nodes[iu + 1] <= u) ++iu;
  if (iu == nu - 1) iu = nu - 2;
  while (iw + 1 < nw && w_nodes[iw + 1] <= wc) ++iw;
  if (iw == nw - 1) iw = nw - 2;
  double m = 0.0;
  m = std::fmax(m, se(iu, iw));
  m = std::fmax(m, se(iu, iw + 1));
  m = std::fmax(m, se(iu + 1, iw));
  m = std::fmax(m, se(iu + 1, iw + 1));
  return m;
}

bool HGrid::covers(double u, double w) const {
  if (u < 0.0 || u > 1.0) return false;
  const double wc = std::fmin(w, 0.0);
  return wc >= w_nodes[0] - 1e-9 && u >= u_nodes[0] - 1e-12;
}

}  // namespace bpre::condsim
