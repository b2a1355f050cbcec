#include "bpre/limits.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bpre/walks.hpp"

namespace bpre::limits {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool is_lf(const envmodel::OffspringFamily& f) {
  return f.kind == envmodel::OffspringKind::LinearFractional;
}

// survival of one ancestor at horizon n for a stored increment block
double survival_backward(const envmodel::OffspringFamily& family, const Eigen::ArrayXd& inc) {
  double t = 1.0;
  for (Eigen::Index m = inc.size(); m-- > 0;) {
    if (family.kind == envmodel::OffspringKind::LinearFractional) {
      const double q = 1.0 - envmodel::lf_p(inc[m]);
      t = q * t / ((1.0 - q) + q * t);
    } else {
      t = -std::expm1(-std::exp(inc[m]) * t);
    }
  }
  return t;
}

bool stabilized_tail(const std::vector<Estimate>& v, double* gap_se) {
  if (v.size() < 2) return false;
  const auto& a = v[v.size() - 2];
  const auto& b = v[v.size() - 1];
  const double se = combined_se(a.se, b.se);
  *gap_se = se > 0.0 ? std::abs(a.value - b.value) / se : kInf;
  return *gap_se < 3.0;
}

// least-squares power fit of the last half of a positive term sequence,
// extrapolated past J; crude by construction, reported as a diagnostic
double power_tail(const std::vector<double>& terms, std::uint64_t J) {
  std::vector<std::pair<double, double>> pts;
  for (std::size_t j = std::max<std::size_t>(2, terms.size() / 2); j < terms.size(); ++j)
    if (terms[j] > 0.0) pts.emplace_back(std::log(static_cast<double>(j)), std::log(terms[j]));
  if (pts.size() < 3) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (auto [x, y] : pts) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(pts.size());
  double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  double s = -slope;
  if (!(s > 1.1)) s = 1.1;  // keep the extrapolation summable
  const double c = std::exp((sy - slope * sx) / n);
  double tail = 0.0;
  const auto Jd = static_cast<double>(J);
  for (std::uint64_t j = J + 1; j <= J + 20000; ++j) tail += c * std::pow(static_cast<double>(j), -s);
  tail += c * std::pow(Jd + 20000.0, 1.0 - s) / (s - 1.0);
  return tail;
}

}  // namespace

// ---------------------------------------------------------------------------

SurvivalScalingReport survival_scaling(const stable::IncrementModel& model,
                                       const envmodel::OffspringFamily& family, double K,
                                       const std::vector<std::uint64_t>& n_list,
                                       std::uint64_t samples, rng::Stream stream,
                                       const LanePlan& plan) {
  SurvivalScalingReport rep;
  rep.K = K;
  rep.n_list = n_list;
  const bool lf = is_lf(family);
  for (std::uint64_t n : n_list) {
    auto lanes = run_lanes<Moments>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto rs = stream.derived("survival").derived(n).derived(static_cast<std::uint64_t>(lane));
      Moments mom;
      Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(n));
      for (std::uint64_t i = 0; i < cnt; ++i) {
        gfengine::LfChainState st;
        double s = 0.0;
        for (std::uint64_t k = 0; k < n; ++k) {
          const double x = stable::sample_increment(model, rs);
          s += x;
          if (lf)
            st.update(x);
          else
            inc[static_cast<Eigen::Index>(k)] = x;
        }
        double w = 0.0;
        if (s <= K) w = lf ? st.survival() : survival_backward(family, inc);
        mom.add(w);
      }
      return mom;
    });
    Moments total;
    for (auto& m : lanes) total.merge(m);
    auto est = total.estimate();
    const double bn = stable::norming(model, n).b_n;
    est.value /= bn;
    est.se /= bn;
    rep.ratios.push_back(est);
  }
  rep.stabilized = stabilized_tail(rep.ratios, &rep.last_gap_se);
  return rep;
}

// ---------------------------------------------------------------------------

AsymStayLowReport asym_stay_low(const stable::IncrementModel& model,
                                const std::vector<std::uint64_t>& n_list, double y,
                                const renewal::RenewalTable& v_table, std::uint64_t samples,
                                rng::Stream stream, const LanePlan& plan) {
  AsymStayLowReport rep;
  rep.y = y;
  rep.n_list = n_list;
  const auto quad = renewal::integral_V(v_table, y);
  rep.quad_int = quad.value;
  const double g0 = stable::density_at_zero(model.target);
  for (std::uint64_t n : n_list) {
    auto est = walks::estimate_stay_low(model, n, y, samples,
                                        stream.derived("asl").derived(n), plan);
    const double denom = g0 * stable::norming(model, n).b_n * quad.value;
    Estimate ratio = est;
    ratio.value = est.value / denom;
    const double rel_mc = est.value > 0.0 ? est.se / est.value : 0.0;
    const double rel_q = quad.error / quad.value;
    ratio.se = ratio.value * combined_se(rel_mc, rel_q);
    rep.ratios.push_back(ratio);
    rep.empirical_C = std::fmax(rep.empirical_C, ratio.value);
  }
  rep.stabilized = stabilized_tail(rep.ratios, &rep.last_gap_se);
  return rep;
}

// ---------------------------------------------------------------------------

AsymExpMinReport asym_exp_min(const stable::IncrementModel& model,
                              const std::vector<std::uint64_t>& n_list,
                              const renewal::RenewalTable& u_table, std::uint64_t samples,
                              rng::Stream stream, const LanePlan& plan) {
  AsymExpMinReport rep;
  rep.n_list = n_list;
  rep.int_exp_u = renewal::exp_integral_U(u_table, 1.0);
  const double g0 = stable::density_at_zero(model.target);
  for (std::uint64_t n : n_list) {
    // dual form E[e^{S_n}; M_n < 0]: prune once the running maximum reaches 0
    auto lanes = run_lanes<Moments>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto rs = stream.derived("aem").derived(n).derived(static_cast<std::uint64_t>(lane));
      Moments mom;
      for (std::uint64_t i = 0; i < cnt; ++i) {
        double s = 0.0;
        bool below = true;
        for (std::uint64_t k = 0; k < n; ++k) {
          s += stable::sample_increment(model, rs);
          if (s >= 0.0) {
            below = false;
            break;
          }
        }
        mom.add(below ? std::exp(s) : 0.0);
      }
      return mom;
    });
    Moments total;
    for (auto& m : lanes) total.merge(m);
    rep.raw.push_back(total.estimate());
    Estimate ratio = rep.raw.back();
    const double denom = g0 * stable::norming(model, n).b_n * rep.int_exp_u;
    ratio.value /= denom;
    ratio.se /= denom;
    rep.ratios.push_back(ratio);
  }
  for (std::size_t i = 0; i + 1 < n_list.size(); ++i) {
    const auto &a = rep.raw[i], &b = rep.raw[i + 1];
    const double target = stable::norming(model, n_list[i]).b_n /
                          stable::norming(model, n_list[i + 1]).b_n;
    const double r = a.value / b.value;
    const double se = r * combined_se(a.se / a.value, b.se / b.value);
    rep.b_ratio_gap_se.push_back(std::abs(r - target) / se);
  }
  rep.stabilized = stabilized_tail(rep.ratios, &rep.last_gap_se);
  return rep;
}

// ---------------------------------------------------------------------------

PiTable estimate_pi(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                    std::uint64_t m_max, std::uint64_t q_max,
                    const renewal::RenewalTable& u_table, std::uint64_t samples,
                    rng::Stream stream, const LanePlan& plan, const Eigen::ArrayXd* z_nodes) {
  if (!is_lf(family)) throw std::invalid_argument("estimate_pi: linear-fractional only");
  const std::uint64_t m_half = m_max / 2;
  const Eigen::Index nz = z_nodes ? z_nodes->size() : 0;
  struct Acc {
    Eigen::ArrayXd pi, pi_half;
    Eigen::ArrayXXd ezq;
    double sw = 0.0, sw2 = 0.0;
    Eigen::ArrayXd pi2;  // sum of squares for SE
    std::uint64_t n = 0;
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("pi").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    acc.pi = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(q_max));
    acc.pi2 = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(q_max));
    acc.pi_half = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(q_max));
    if (nz) acc.ezq = Eigen::ArrayXXd::Zero(nz, static_cast<Eigen::Index>(q_max));
    for (std::uint64_t i = 0; i < cnt; ++i) {
      ++acc.n;
      gfengine::LfChainState st;
      double s = 0.0, mn = kInf;
      double w_half = 0.0, surv_half = 0.0;
      for (std::uint64_t k = 0; k < m_max; ++k) {
        const double x = stable::sample_increment(model, rs);
        st.update(x);
        s += x;
        mn = std::fmin(mn, s);
        if (k + 1 == m_half && mn >= 0.0) {
          w_half = u_table.value_at(s);
          surv_half = st.survival();
        }
      }
      if (w_half > 0.0) {
        const double le = std::log1p(-std::fmin(surv_half, 1.0));
        for (std::uint64_t q = 1; q <= q_max; ++q)
          acc.pi_half[static_cast<Eigen::Index>(q - 1)] +=
              w_half * -std::expm1(static_cast<double>(q) * le);
      }
      if (mn < 0.0) continue;
      const double w = u_table.value_at(s);
      acc.sw += w;
      acc.sw2 += w * w;
      const double surv = st.survival();
      const double le = std::log1p(-std::fmin(surv, 1.0));
      for (std::uint64_t q = 1; q <= q_max; ++q) {
        const double v = w * -std::expm1(static_cast<double>(q) * le);
        acc.pi[static_cast<Eigen::Index>(q - 1)] += v;
        acc.pi2[static_cast<Eigen::Index>(q - 1)] += v * v;
      }
      if (nz) {
        for (Eigen::Index zi = 0; zi < nz; ++zi) {
          const double fz = 1.0 - st.one_minus_F((*z_nodes)[zi]);
          const double f0 = 1.0 - surv;
          double fzq = 1.0, f0q = 1.0;
          for (std::uint64_t q = 1; q <= q_max; ++q) {
            fzq *= fz;
            f0q *= f0;
            acc.ezq(zi, static_cast<Eigen::Index>(q - 1)) += w * (fzq - f0q);
          }
        }
      }
    }
    return acc;
  });
  Acc total;
  total.pi = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(q_max));
  total.pi2 = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(q_max));
  total.pi_half = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(q_max));
  if (nz) total.ezq = Eigen::ArrayXXd::Zero(nz, static_cast<Eigen::Index>(q_max));
  for (auto& a : lanes) {
    total.pi += a.pi;
    total.pi2 += a.pi2;
    total.pi_half += a.pi_half;
    total.sw += a.sw;
    total.sw2 += a.sw2;
    total.n += a.n;
    if (nz) total.ezq += a.ezq;
  }
  const auto N = static_cast<double>(total.n);
  const double u0 = u_table.value_at(0.0);
  PiTable out;
  out.m_max = m_max;
  out.q_max = q_max;
  out.pi = total.pi / (N * u0);
  out.pi_half = total.pi_half / (N * u0);
  out.pi_se.resize(static_cast<Eigen::Index>(q_max));
  for (Eigen::Index q = 0; q < out.pi_se.size(); ++q) {
    const double m1 = total.pi[q] / N;
    const double var = std::fmax(total.pi2[q] / N - m1 * m1, 0.0);
    out.pi_se[q] = std::sqrt(var / N) / u0;
  }
  out.ess = total.sw2 > 0.0 ? total.sw * total.sw / total.sw2 : 0.0;
  if (nz) {
    out.z_nodes = *z_nodes;
    out.ezq = total.ezq / (N * u0);
  }
  return out;
}

// ---------------------------------------------------------------------------

GleftReport constant_Gleft(const stable::IncrementModel& model,
                           const envmodel::OffspringFamily& family, double K, std::uint64_t J,
                           double N_cut, std::uint64_t Q_cut,
                           const renewal::RenewalTable& v_table, const PiTable& pi,
                           std::uint64_t samples, rng::Stream stream, const LanePlan& plan) {
  if (Q_cut > pi.q_max) throw std::invalid_argument("constant_Gleft: Q_cut exceeds pi table");
  const bool lf = is_lf(family);
  const renewal::VIntegral iv(v_table);
  const double g0 = stable::density_at_zero(model.target);
  const double Kc = std::fmin(K, 0.0);
  struct Acc {
    std::vector<double> terms;  // j = 0..J
    double tot = 0.0, tot2 = 0.0;
    double exn = 0.0, exq = 0.0;
    std::uint64_t n = 0;
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("gleft").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    acc.terms.assign(J + 1, 0.0);
    for (std::uint64_t i = 0; i < cnt; ++i) {
      ++acc.n;
      double path_total = 0.0;
      // j = 0 epoch: tau_0 = 0, S_0 = 0, Z_0 = 1
      if (0.0 <= Kc) {
        const double c = pi.pi[0] * iv.at(K);
        acc.terms[0] += c;
        path_total += c;
      }
      gfengine::LfChainState st;
      std::uint64_t zp = 1;  // particle count for the general family
      double s = 0.0, runmin = 0.0;
      for (std::uint64_t j = 1; j <= J; ++j) {
        const double x = stable::sample_increment(model, rs);
        const double s_prev = s;
        s += x;
        if (j > 1) runmin = std::fmin(runmin, s_prev);
        if (lf)
          st.update(x);
        else if (zp > 0)
          zp = envmodel::sample_offspring_sum(family, x, zp, rs);
        const bool tau_j = s < runmin && s < 0.0;
        if (!tau_j || s > Kc) continue;
        const double ivk = iv.at(K - s);
        if (s < -N_cut) {
          acc.exn += ivk;
          continue;
        }
        double c = 0.0;
        if (lf) {
          // Rao-Blackwell over the conditional geometric law of Z_j
          const double t0 = st.survival();
          const double r = 1.0 - st.sigma();
          double geom = t0 * (1.0 - r);
          for (std::uint64_t q = 1; q <= Q_cut; ++q) {
            c += pi.pi[static_cast<Eigen::Index>(q - 1)] * geom;
            geom *= r;
          }
          acc.exq += ivk * t0 * std::pow(r, static_cast<double>(Q_cut));
          c *= ivk;
        } else {
          if (zp >= 1 && zp <= Q_cut)
            c = pi.pi[static_cast<Eigen::Index>(zp - 1)] * ivk;
          else if (zp > Q_cut)
            acc.exq += ivk;
        }
        acc.terms[j] += c;
        path_total += c;
      }
      acc.tot += path_total;
      acc.tot2 += path_total * path_total;
    }
    return acc;
  });
  Acc total;
  total.terms.assign(J + 1, 0.0);
  for (auto& a : lanes) {
    for (std::size_t j = 0; j <= J; ++j) total.terms[j] += a.terms[j];
    total.tot += a.tot;
    total.tot2 += a.tot2;
    total.exn += a.exn;
    total.exq += a.exq;
    total.n += a.n;
  }
  const auto N = static_cast<double>(total.n);
  GleftReport rep;
  rep.K = K;
  rep.J = J;
  rep.terms.resize(J + 1);
  for (std::size_t j = 0; j <= J; ++j) rep.terms[j] = g0 * total.terms[j] / N;
  const double mean = total.tot / N;
  const double var = std::fmax(total.tot2 / N - mean * mean, 0.0);
  rep.value.value = g0 * mean;
  rep.value.se = g0 * std::sqrt(var / N);
  rep.value.samples = total.n;
  rep.tail_extrap = power_tail(rep.terms, J);
  rep.excluded_n_mass = g0 * total.exn / N;
  rep.excluded_q_mass = g0 * total.exq / N;
  rep.pi_doubling_gap = pi.doubling_gap();
  return rep;
}

// ---------------------------------------------------------------------------

GrightReport constant_Gright(const stable::IncrementModel& model,
                             const envmodel::OffspringFamily& family, double K, std::uint64_t J,
                             const condsim::HGrid& h_grid, const renewal::RenewalTable& u_table,
                             std::uint64_t samples, rng::Stream stream, const LanePlan& plan) {
  if (!is_lf(family)) throw std::invalid_argument("constant_Gright: linear-fractional only");
  const double g0 = stable::density_at_zero(model.target);
  const double pref = g0 * renewal::exp_integral_U(u_table, 1.0);
  const double w_lo = h_grid.w_nodes[0];
  // envelope constant for clamped contributions below the grid w-range
  double c_env = 0.0;
  for (Eigen::Index ui = 0; ui + 1 < h_grid.u_nodes.size(); ++ui)
    for (Eigen::Index wi = 0; wi < h_grid.w_nodes.size(); ++wi) {
      const double env = (1.0 - h_grid.u_nodes[ui]) * std::exp(h_grid.w_nodes[wi] / 2.0);
      if (env > 0.0) c_env = std::fmax(c_env, h_grid.value(ui, wi) / env);
    }
  struct Acc {
    std::vector<double> terms;
    double tot = 0.0, tot2 = 0.0, sehsum = 0.0, clamped = 0.0;
    std::uint64_t n = 0;
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("gright").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    acc.terms.assign(J + 1, 0.0);
    for (std::uint64_t i = 0; i < cnt; ++i) {
      ++acc.n;
      gfengine::LfChainState st;
      double s = 0.0, path_total = 0.0, path_se = 0.0;
      // v = 0: u = 0, w = K
      {
        const double c = h_grid.at(0.0, std::fmin(K, 0.0));
        acc.terms[0] += c;
        path_total += c;
        path_se += h_grid.se_at(0.0, std::fmin(K, 0.0));
      }
      for (std::uint64_t v = 1; v <= J; ++v) {
        const double x = stable::sample_increment(model, rs);
        s += x;
        if (s < 0.0) break;  // L_v >= 0 fails from here on
        st.update(x);
        const double u = 1.0 - st.survival();
        const double w = K - s;
        if (w < w_lo) {
          acc.clamped += c_env * (1.0 - u) * std::exp(w / 2.0);
          continue;
        }
        const double c = h_grid.at(u, w);
        acc.terms[v] += c;
        path_total += c;
        path_se += h_grid.se_at(u, w);
      }
      acc.tot += path_total;
      acc.tot2 += path_total * path_total;
      acc.sehsum += path_se;
    }
    return acc;
  });
  Acc total;
  total.terms.assign(J + 1, 0.0);
  for (auto& a : lanes) {
    for (std::size_t v = 0; v <= J; ++v) total.terms[v] += a.terms[v];
    total.tot += a.tot;
    total.tot2 += a.tot2;
    total.sehsum += a.sehsum;
    total.clamped += a.clamped;
    total.n += a.n;
  }
  const auto N = static_cast<double>(total.n);
  GrightReport rep;
  rep.K = K;
  rep.J = J;
  rep.prefactor = pref;
  rep.terms.resize(J + 1);
  for (std::size_t v = 0; v <= J; ++v) rep.terms[v] = pref * total.terms[v] / N;
  const double mean = total.tot / N;
  const double var = std::fmax(total.tot2 / N - mean * mean, 0.0);
  const double se_mc = std::sqrt(var / N);
  const double se_h = total.sehsum / N;  // correlated grid noise, counted in full
  rep.value.value = pref * mean;
  rep.value.se = pref * combined_se(se_mc, se_h);
  rep.value.samples = total.n;
  rep.tail_extrap = power_tail(rep.terms, J);
  rep.clamped_h_mass = pref * total.clamped / N;
  return rep;
}

// ---------------------------------------------------------------------------

Theorem1Report theorem1_law(const stable::IncrementModel& model,
                            const envmodel::OffspringFamily& family, double K,
                            const std::vector<std::uint64_t>& n_list,
                            const Eigen::ArrayXd& z_grid, std::uint64_t samples,
                            const PiTable& pi, const condsim::HGrid& h_grid,
                            const renewal::RenewalTable& v_table,
                            const renewal::RenewalTable& u_table, double g_left, double g_right,
                            std::uint64_t assembly_samples, rng::Stream stream,
                            const LanePlan& plan) {
  if (!is_lf(family)) throw std::invalid_argument("theorem1_law: linear-fractional only");
  if (pi.z_nodes.size() != z_grid.size())
    throw std::invalid_argument("theorem1_law: pi table lacks the z grid");
  Theorem1Report rep;
  rep.K = K;
  const Eigen::Index nz = z_grid.size();

  // exact-conditional curves per n
  for (std::uint64_t n : n_list) {
    struct Acc {
      std::vector<RatioMoments> rm;
    };
    auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto rs = stream.derived("t1curve").derived(n).derived(static_cast<std::uint64_t>(lane));
      Acc acc;
      acc.rm.resize(static_cast<std::size_t>(nz));
      for (std::uint64_t i = 0; i < cnt; ++i) {
        gfengine::LfChainState st;
        double s = 0.0;
        for (std::uint64_t k = 0; k < n; ++k) {
          const double x = stable::sample_increment(model, rs);
          s += x;
          st.update(x);
        }
        const bool keep = s <= K;
        const double surv = keep ? st.survival() : 0.0;
        for (Eigen::Index zi = 0; zi < nz; ++zi) {
          const double num = keep ? surv - st.one_minus_F(z_grid[zi]) : 0.0;
          acc.rm[static_cast<std::size_t>(zi)].add(num, surv);
        }
      }
      return acc;
    });
    LawCurve curve;
    curve.n = n;
    curve.z_grid = z_grid;
    curve.values.resize(nz);
    curve.se.resize(nz);
    for (Eigen::Index zi = 0; zi < nz; ++zi) {
      RatioMoments total;
      for (auto& a : lanes) total.merge(a.rm[static_cast<std::size_t>(zi)]);
      const auto est = total.ratio();
      curve.values[zi] = est.value;
      curve.se[zi] = est.se;
    }
    rep.curves.push_back(std::move(curve));
  }
  for (std::size_t i = 0; i + 1 < rep.curves.size(); ++i)
    rep.sup_distance.push_back(
        (rep.curves[i].values - rep.curves[i + 1].values).abs().maxCoeff());

  // assembled limit curve
  const double g0 = stable::density_at_zero(model.target);
  const renewal::VIntegral iv(v_table);
  const double Kc = std::fmin(K, 0.0);
  const std::uint64_t J = 48;
  const double w_lo = h_grid.w_nodes[0];
  struct AsmAcc {
    Eigen::ArrayXd gl, gr;
    std::uint64_t n = 0;
  };
  auto lanes = run_lanes<AsmAcc>(plan, assembly_samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("t1asm").derived(static_cast<std::uint64_t>(lane));
    AsmAcc acc;
    acc.gl = Eigen::ArrayXd::Zero(nz);
    acc.gr = Eigen::ArrayXd::Zero(nz);
    Eigen::ArrayXd geomw(static_cast<Eigen::Index>(pi.q_max));
    for (std::uint64_t i = 0; i < cnt; ++i) {
      ++acc.n;
      // left piece: prefix min-epochs
      gfengine::LfChainState st;
      double s = 0.0, runmin = 0.0;
      if (0.0 <= Kc) acc.gl += pi.ezq.col(0) * iv.at(K);
      for (std::uint64_t j = 1; j <= J; ++j) {
        const double x = stable::sample_increment(model, rs);
        const double s_prev = s;
        s += x;
        if (j > 1) runmin = std::fmin(runmin, s_prev);
        st.update(x);
        if (!(s < runmin && s < 0.0) || s > Kc) continue;
        const double ivk = iv.at(K - s);
        const double t0 = st.survival();
        const double r = 1.0 - st.sigma();
        double g = t0 * (1.0 - r);
        for (std::uint64_t q = 1; q <= pi.q_max; ++q) {
          geomw[static_cast<Eigen::Index>(q - 1)] = g;
          g *= r;
        }
        acc.gl += (pi.ezq.matrix() * geomw.matrix()).array() * ivk;
      }
      // right piece: L_v >= 0 prefixes
      gfengine::LfChainState str;
      double sr = 0.0;
      {
        const double h0 = h_grid.at(0.0, std::fmin(K, 0.0));
        for (Eigen::Index zi = 0; zi < nz; ++zi) {
          const double hz = h_grid.at(z_grid[zi], std::fmin(K, 0.0));
          acc.gr[zi] += h0 - hz;
        }
      }
      for (std::uint64_t v = 1; v <= J; ++v) {
        const double x = stable::sample_increment(model, rs);
        sr += x;
        if (sr < 0.0) break;
        str.update(x);
        const double w = K - sr;
        if (w < w_lo) continue;  // both terms are envelope-small
        const double u0v = 1.0 - str.survival();
        const double h0 = h_grid.at(u0v, w);
        for (Eigen::Index zi = 0; zi < nz; ++zi) {
          const double uzv = 1.0 - str.one_minus_F(z_grid[zi]);
          acc.gr[zi] += h0 - h_grid.at(uzv, w);
        }
      }
    }
    return acc;
  });
  Eigen::ArrayXd gl = Eigen::ArrayXd::Zero(nz), gr = Eigen::ArrayXd::Zero(nz);
  std::uint64_t n_asm = 0;
  for (auto& a : lanes) {
    gl += a.gl;
    gr += a.gr;
    n_asm += a.n;
  }
  const double pref = g0 * renewal::exp_integral_U(u_table, 1.0);
  gl = gl * g0 / static_cast<double>(n_asm);
  gr = gr * pref / static_cast<double>(n_asm);
  rep.g_total = g_left + g_right;
  rep.limit_curve.n = 0;
  rep.limit_curve.z_grid = z_grid;
  rep.limit_curve.values = (gl + gr) / rep.g_total;
  rep.limit_curve.se = Eigen::ArrayXd::Zero(nz);
  // properness probe
  {
    rep.z_properness = 0.999;
    // interpolate the limit curve linearly at z = 0.999 if not a node
    double best = kInf;
    for (Eigen::Index zi = 0; zi < nz; ++zi)
      if (std::abs(z_grid[zi] - rep.z_properness) < best) {
        best = std::abs(z_grid[zi] - rep.z_properness);
        rep.properness_at_z = rep.limit_curve.values[zi];
      }
  }
  return rep;
}

// ---------------------------------------------------------------------------

std::vector<PathConstancyReport> theorem2_constancy(
    const stable::IncrementModel& model, const envmodel::OffspringFamily& family, double K,
    double theta_frac, const std::vector<std::uint64_t>& n_list, std::uint64_t samples,
    std::uint64_t trajectories, rng::Stream stream, const LanePlan& plan) {
  if (!(theta_frac > 0.0 && theta_frac < 0.5))
    throw std::invalid_argument("theorem2_constancy: theta_frac must lie in (0, 1/2)");
  const bool lf = is_lf(family);
  std::vector<PathConstancyReport> reports;
  double cutoff = 0.0;
  for (std::uint64_t n : n_list) {
    const auto k0 = static_cast<std::uint64_t>(theta_frac * static_cast<double>(n));
    const std::uint64_t span = n - 2 * k0;
    auto nstream = stream.derived("t2").derived(n);
    // phase A: weights w = P(Z_n>0 | env) I{S_n <= K}, one derived stream per env
    struct Acc {
      std::vector<double> w;
    };
    auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto lane_stream = nstream.derived(static_cast<std::uint64_t>(lane));
      Acc acc;
      acc.w.reserve(cnt);
      Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(n));
      for (std::uint64_t i = 0; i < cnt; ++i) {
        auto es = lane_stream.derived(i);
        gfengine::LfChainState st;
        double s = 0.0;
        for (std::uint64_t k = 0; k < n; ++k) {
          const double x = stable::sample_increment(model, es);
          s += x;
          if (lf)
            st.update(x);
          else
            inc[static_cast<Eigen::Index>(k)] = x;
        }
        double w = 0.0;
        if (s <= K) w = lf ? st.survival() : survival_backward(family, inc);
        acc.w.push_back(w);
      }
      return acc;
    });
    std::vector<double> weights;
    std::vector<std::pair<int, std::uint64_t>> coords;  // (lane, index)
    for (int lane = 0; lane < plan.lanes; ++lane) {
      const auto& w = lanes[static_cast<std::size_t>(lane)].w;
      for (std::uint64_t i = 0; i < w.size(); ++i) {
        weights.push_back(w[i]);
        coords.emplace_back(lane, i);
      }
    }
    double sw = 0.0, sw2 = 0.0;
    for (double w : weights) {
      sw += w;
      sw2 += w * w;
    }
    PathConstancyReport rep;
    rep.n = n;
    rep.theta_frac = theta_frac;
    rep.ess = sw2 > 0.0 ? sw * sw / sw2 : 0.0;
    if (sw <= 0.0) {
      reports.push_back(rep);
      continue;
    }
    // phase B: systematic resampling, replay, conditioned trajectory
    std::vector<double> dvals, y0vals;
    dvals.reserve(trajectories);
    y0vals.reserve(trajectories);
    std::size_t pos = 0;
    double cum = weights[0];
    std::uint64_t y0_zero = 0;
    for (std::uint64_t t = 0; t < trajectories; ++t) {
      const double target =
          (static_cast<double>(t) + 0.5) / static_cast<double>(trajectories) * sw;
      while (cum < target && pos + 1 < weights.size()) cum += weights[++pos];
      const auto [lane, idx] = coords[pos];
      auto es = nstream.derived(static_cast<std::uint64_t>(lane)).derived(idx);
      auto env = envmodel::sample_environment(model, family, n, es);
      auto traj_stream = es.derived("traj").derived(t);
      const auto path = condsim::conditioned_trajectory(env, n, 1, traj_stream);
      // Y(t) on the 17-point grid
      double y0 = 0.0, dmax = 0.0;
      for (int g = 0; g <= 16; ++g) {
        const std::uint64_t kk =
            k0 + (span * static_cast<std::uint64_t>(g)) / 16;
        const double sv =
            kk == 0 ? 0.0 : env.walk.partial_sums[static_cast<Eigen::Index>(kk - 1)];
        const double y = std::exp(-sv) * static_cast<double>(path.z[kk]);
        if (g == 0) {
          y0 = y;
        } else if (y0 > 0.0) {
          dmax = std::fmax(dmax, std::abs(y - y0) / y0);
        }
      }
      if (y0 == 0.0) ++y0_zero;
      dvals.push_back(dmax);
      y0vals.push_back(y0);
    }
    rep.trajectories = trajectories;
    auto quant = [](std::vector<double> v, double q) {
      const auto k = static_cast<std::ptrdiff_t>(q * static_cast<double>(v.size() - 1));
      std::nth_element(v.begin(), v.begin() + k, v.end());
      return v[static_cast<std::size_t>(k)];
    };
    rep.d_quantiles.resize(4);
    rep.d_quantiles << quant(dvals, 0.25), quant(dvals, 0.5), quant(dvals, 0.75),
        quant(dvals, 0.9);
    rep.median_D = rep.d_quantiles[1];
    rep.y0_quantiles.resize(4);
    rep.y0_quantiles << quant(y0vals, 0.5), quant(y0vals, 0.9), quant(y0vals, 0.99),
        quant(y0vals, 0.999);
    rep.mass_y0_zero =
        static_cast<double>(y0_zero) / static_cast<double>(trajectories);
    if (cutoff == 0.0) cutoff = 10.0 * rep.y0_quantiles[3];
    rep.cutoff = cutoff;
    std::uint64_t above = 0;
    for (double y : y0vals)
      if (y > cutoff) ++above;
    rep.mass_above_cutoff = static_cast<double>(above) / static_cast<double>(trajectories);
    reports.push_back(std::move(rep));
  }
  return reports;
}

// ---------------------------------------------------------------------------

MeanderReport meander_proportionality(const stable::IncrementModel& model,
                                      const envmodel::OffspringFamily& family,
                                      const Eigen::ArrayXd& x_grid,
                                      const std::vector<std::uint64_t>& n_list,
                                      std::uint64_t samples, rng::Stream stream,
                                      const LanePlan& plan) {
  MeanderReport rep;
  rep.x_grid = x_grid;
  rep.n_list = n_list;
  const bool lf = is_lf(family);
  for (std::uint64_t n : n_list) {
    const double an = stable::norming(model, n).a_n;
    struct Acc {
      Eigen::ArrayXd num;
      double den = 0.0;
    };
    auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto rs = stream.derived("meander").derived(n).derived(static_cast<std::uint64_t>(lane));
      Acc acc;
      acc.num = Eigen::ArrayXd::Zero(x_grid.size());
      Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(n));
      for (std::uint64_t i = 0; i < cnt; ++i) {
        gfengine::LfChainState st;
        double s = 0.0;
        for (std::uint64_t k = 0; k < n; ++k) {
          const double x = stable::sample_increment(model, rs);
          s += x;
          if (lf)
            st.update(x);
          else
            inc[static_cast<Eigen::Index>(k)] = x;
        }
        const double surv = lf ? st.survival() : survival_backward(family, inc);
        acc.den += surv;
        for (Eigen::Index xi = 0; xi < x_grid.size(); ++xi)
          if (s <= x_grid[xi] * an) acc.num[xi] += surv;
      }
      return acc;
    });
    Eigen::ArrayXd num = Eigen::ArrayXd::Zero(x_grid.size());
    double den = 0.0;
    for (auto& a : lanes) {
      num += a.num;
      den += a.den;
    }
    rep.curves.push_back(num / den);
  }
  for (std::size_t i = 0; i + 1 < rep.curves.size(); ++i)
    rep.sup_distance.push_back((rep.curves[i] - rep.curves[i + 1]).abs().maxCoeff());
  return rep;
}

// ---------------------------------------------------------------------------

ThetaRatioReport survival_ratio_theta(const stable::IncrementModel& model,
                                      const envmodel::OffspringFamily& family,
                                      const std::vector<std::uint64_t>& n_list,
                                      std::uint64_t samples, rng::Stream stream,
                                      const LanePlan& plan) {
  ThetaRatioReport rep;
  rep.n_list = n_list;
  const bool lf = is_lf(family);
  for (std::uint64_t n : n_list) {
    auto lanes = run_lanes<RatioMoments>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto rs = stream.derived("theta").derived(n).derived(static_cast<std::uint64_t>(lane));
      RatioMoments rm;
      Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(n));
      for (std::uint64_t i = 0; i < cnt; ++i) {
        gfengine::LfChainState st;
        double s = 0.0, mn = kInf;
        for (std::uint64_t k = 0; k < n; ++k) {
          const double x = stable::sample_increment(model, rs);
          s += x;
          mn = std::fmin(mn, s);
          if (lf)
            st.update(x);
          else
            inc[static_cast<Eigen::Index>(k)] = x;
        }
        const double surv = lf ? st.survival() : survival_backward(family, inc);
        rm.add(surv, mn >= 0.0 ? 1.0 : 0.0);
      }
      return rm;
    });
    RatioMoments total;
    for (auto& a : lanes) total.merge(a);
    rep.ratios.push_back(total.ratio());
  }
  rep.stabilized = stabilized_tail(rep.ratios, &rep.last_gap_se);
  return rep;
}

// ---------------------------------------------------------------------------

DConstantReport D_constant(const stable::IncrementModel& model,
                           const envmodel::OffspringFamily& family,
                           const std::vector<std::uint64_t>& n_list,
                           const renewal::RenewalTable& v_table, std::uint64_t samples,
                           rng::Stream stream, const LanePlan& plan) {
  DConstantReport rep;
  const bool lf = is_lf(family);
  const double g0 = stable::density_at_zero(model.target);
  const renewal::VIntegral iv(v_table);
  for (std::uint64_t n : n_list) {
    const auto norm = stable::norming(model, n);
    DConstantRow row;
    row.n = n;
    row.phi1 = norm.a_n / std::log(static_cast<double>(n));
    row.phi2 = norm.a_n * std::pow(static_cast<double>(n), -0.1);
    const double c1 = g0 * norm.b_n * iv.at(row.phi1);
    const double c2 = g0 * norm.b_n * iv.at(row.phi2);
    struct Acc {
      Moments d1, d2, diff;
      RatioMoments cond;
    };
    auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
      auto rs = stream.derived("dconst").derived(n).derived(static_cast<std::uint64_t>(lane));
      Acc acc;
      Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(n));
      for (std::uint64_t i = 0; i < cnt; ++i) {
        gfengine::LfChainState st;
        double s = 0.0, mn = kInf;
        for (std::uint64_t k = 0; k < n; ++k) {
          const double x = stable::sample_increment(model, rs);
          s += x;
          mn = std::fmin(mn, s);
          if (lf)
            st.update(x);
          else
            inc[static_cast<Eigen::Index>(k)] = x;
        }
        const double surv = lf ? st.survival() : survival_backward(family, inc);
        const double a1 = (s <= row.phi1 ? surv : 0.0) / c1;
        const double a2 = (s <= row.phi2 ? surv : 0.0) / c2;
        acc.d1.add(a1);
        acc.d2.add(a2);
        acc.diff.add(a1 - a2);
        acc.cond.add(s <= row.phi1 ? surv : 0.0,
                     (s <= row.phi1 && mn >= 0.0) ? 1.0 : 0.0);
      }
      return acc;
    });
    Acc total;
    for (auto& a : lanes) {
      total.d1.merge(a.d1);
      total.d2.merge(a.d2);
      total.diff.merge(a.diff);
      total.cond.merge(a.cond);
    }
    row.d1 = total.d1.estimate();
    row.d2 = total.d2.estimate();
    const auto dd = total.diff.estimate();
    row.diff_se = dd.se > 0.0 ? std::abs(dd.value) / dd.se : kInf;
    row.d_cond = total.cond.ratio();
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------

DecompositionCheck tau_decomposition(const stable::IncrementModel& model,
                                     const envmodel::OffspringFamily& family, double K, double z,
                                     std::uint64_t n, std::uint64_t J, std::uint64_t samples,
                                     rng::Stream stream, const LanePlan& plan) {
  if (!is_lf(family)) throw std::invalid_argument("tau_decomposition: linear-fractional only");
  struct Acc {
    double total = 0.0, left = 0.0, middle = 0.0, right = 0.0;
    std::uint64_t n = 0;
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("taudec").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    for (std::uint64_t i = 0; i < cnt; ++i) {
      ++acc.n;
      gfengine::LfChainState st;
      double s = 0.0, minval = 0.0;
      std::uint64_t tau = 0;
      for (std::uint64_t k = 1; k <= n; ++k) {
        const double x = stable::sample_increment(model, rs);
        s += x;
        st.update(x);
        if (s < minval) {
          minval = s;
          tau = k;
        }
      }
      if (s > K) continue;
      const double c = st.survival() - st.one_minus_F(z);  // E[z^{Z_n}; Z_n>0 | env]
      acc.total += c;
      if (tau <= J)
        acc.left += c;
      else if (tau <= n - J)
        acc.middle += c;
      else
        acc.right += c;
    }
    return acc;
  });
  Acc total;
  for (auto& a : lanes) {
    total.total += a.total;
    total.left += a.left;
    total.middle += a.middle;
    total.right += a.right;
    total.n += a.n;
  }
  const auto N = static_cast<double>(total.n);
  DecompositionCheck out;
  out.undecomposed = total.total / N;
  out.sum_of_parts = (total.left + total.middle + total.right) / N;
  out.middle_over_bn = (total.middle / N) / stable::norming(model, n).b_n;
  return out;
}

}  // namespace bpre::limits
