#include "bpre/gfengine.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bpre::gfengine {

GenFunChain::GenFunChain(const envmodel::EnvRealization& env, std::uint64_t horizon)
    : env_(&env), horizon_(horizon) {
  if (horizon > env.n) throw std::invalid_argument("GenFunChain: horizon exceeds environment");
  if (env.family.kind == envmodel::OffspringKind::LinearFractional) {
    suffix_.resize(horizon + 1);
    suffix_[horizon] = Mobius::identity();
    for (std::uint64_t k = horizon; k-- > 0;) {
      const double p = envmodel::lf_p(env.walk.increments[static_cast<Eigen::Index>(k)]);
      suffix_[k] = Mobius::step(p).after(suffix_[k + 1]);
      if ((horizon - k) % 16 == 0) suffix_[k].renormalize();
    }
  }
}

double GenFunChain::iterate(std::uint64_t k, std::uint64_t n, double z) const {
  if (k > n || n > horizon_) throw std::invalid_argument("iterate: need 0 <= k <= n <= horizon");
  if (std::abs(z) > 1.0 + 1e-12) throw std::domain_error("iterate: |z| must be <= 1");
  if (k == n) return z;
  if (n == horizon_ && !suffix_.empty()) {
    const double v = suffix_[k].apply(z);
    return std::fmin(std::fmax(v, 0.0), 1.0);
  }
  double r = z;
  for (std::uint64_t m = n; m-- > k;)
    r = envmodel::pgf_eval(env_->family, env_->walk.increments[static_cast<Eigen::Index>(m)], r);
  return std::fmin(std::fmax(r, 0.0), 1.0);
}

double GenFunChain::one_minus_iterate(std::uint64_t k, std::uint64_t n, double z) const {
  if (n == horizon_ && !suffix_.empty() && k <= n) {
    const double v = suffix_[k].one_minus_apply(z);
    return std::fmin(std::fmax(v, 0.0), 1.0);
  }
  return 1.0 - iterate(k, n, z);
}

double GenFunChain::suffix_extinction(std::uint64_t m) const { return iterate(m, horizon_, 0.0); }

double survival_prob(const envmodel::EnvRealization& env, std::uint64_t n) {
  if (n == 0) return 1.0;
  GenFunChain chain(env, n);
  return chain.one_minus_iterate(0, n, 0.0);
}

double conditional_pgf(const envmodel::EnvRealization& env, std::uint64_t n, double z,
                       std::uint64_t q) {
  if (q < 1) throw std::invalid_argument("conditional_pgf: q must be >= 1");
  if (z < 0.0 || z > 1.0) throw std::domain_error("conditional_pgf: z must lie in [0,1]");
  GenFunChain chain(env, n);
  const double fz = chain.iterate(0, n, z);
  const double f0 = chain.iterate(0, n, 0.0);
  const auto qd = static_cast<double>(q);
  return std::pow(fz, qd) - std::pow(f0, qd);
}

namespace {

// one scan record shared by O_functional and check_hbound
struct TauScan {
  double s = 0.0;
  double runmin_prev = 0.0;  // min(S_0..S_{k-1})
  bool tau_at_end = false;
};

}  // namespace

Estimate O_functional(const stable::IncrementModel& model, const envmodel::OffspringFamily& family,
                      std::uint64_t j, double z, double w, std::uint64_t samples,
                      rng::Stream stream, const LanePlan& plan) {
  if (j < 1) throw std::invalid_argument("O_functional: j must be >= 1");
  const bool lf = family.kind == envmodel::OffspringKind::LinearFractional;
  auto lanes = run_lanes<RatioMoments>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("O_j").derived(static_cast<std::uint64_t>(lane));
    RatioMoments rm;
    Eigen::ArrayXd inc(lf ? 0 : static_cast<Eigen::Index>(j));
    for (std::uint64_t i = 0; i < cnt; ++i) {
      LfChainState st;
      double s = 0.0, runmin = 0.0;
      for (std::uint64_t k = 0; k < j; ++k) {
        const double x = stable::sample_increment(model, rs);
        if (k > 0) runmin = std::fmin(runmin, s);
        s += x;
        if (lf)
          st.update(x);
        else
          inc[static_cast<Eigen::Index>(k)] = x;
      }
      const bool tau = s < runmin;
      double num = 0.0;
      if (tau && s <= w) {
        if (lf) {
          num = st.one_minus_F(z);
        } else {
          double r = z;
          for (Eigen::Index m = inc.size(); m-- > 0;) r = envmodel::pgf_eval(family, inc[m], r);
          num = 1.0 - r;
        }
      }
      rm.add(num, tau ? std::exp(s) : 0.0);
    }
    return rm;
  });
  RatioMoments total;
  for (const auto& r : lanes) total.merge(r);
  auto est = total.ratio();
  if (total.sb <= 0.0) est.degenerate = true;
  return est;
}

HBoundReport check_hbound(const stable::IncrementModel& model,
                          const envmodel::OffspringFamily& family,
                          const std::vector<std::uint64_t>& j_list,
                          const std::vector<double>& z_grid, const std::vector<double>& w_grid,
                          std::uint64_t samples, rng::Stream stream, const LanePlan& plan) {
  if (j_list.empty() || z_grid.empty() || w_grid.empty())
    throw std::invalid_argument("check_hbound: empty grid");
  std::vector<std::uint64_t> js = j_list;  // cell layout follows increasing j
  std::sort(js.begin(), js.end());
  js.erase(std::unique(js.begin(), js.end()), js.end());
  const std::uint64_t jmax = js.back();
  const bool lf = family.kind == envmodel::OffspringKind::LinearFractional;
  const std::size_t ncell = js.size() * z_grid.size() * w_grid.size();

  struct Acc {
    std::vector<Moments> cell;
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("hbound").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    acc.cell.resize(ncell);
    Eigen::ArrayXd inc(static_cast<Eigen::Index>(jmax));
    for (std::uint64_t i = 0; i < cnt; ++i) {
      LfChainState st;
      double s = 0.0, runmin = 0.0;
      std::size_t cell = 0;
      for (std::uint64_t k = 1; k <= jmax; ++k) {
        const double x = stable::sample_increment(model, rs);
        if (k > 1) runmin = std::fmin(runmin, s);
        s += x;
        if (lf)
          st.update(x);
        else
          inc[static_cast<Eigen::Index>(k - 1)] = x;
        if (!std::binary_search(js.begin(), js.end(), k)) continue;
        const bool tau = s < runmin;
        for (double z : z_grid) {
          double omf = 0.0;
          if (tau) {
            if (lf) {
              omf = st.one_minus_F(z);
            } else {
              double r = z;
              for (std::uint64_t m = k; m-- > 0;)
                r = envmodel::pgf_eval(family, inc[static_cast<Eigen::Index>(m)], r);
              omf = 1.0 - r;
            }
          }
          for (double w : w_grid) {
            acc.cell[cell++].add(tau && s <= w ? omf : 0.0);
          }
        }
      }
      // keep the cell layout fixed even if a path never hits a j in the list
      (void)cell;
    }
    return acc;
  });

  std::vector<Moments> total(ncell);
  for (const auto& a : lanes)
    for (std::size_t c = 0; c < ncell; ++c) total[c].merge(a.cell[c]);

  HBoundReport rep;
  std::size_t c = 0;
  const double z_min = *std::min_element(z_grid.begin(), z_grid.end());
  const double w_max = *std::max_element(w_grid.begin(), w_grid.end());
  double first_ref = 0.0, last_ref = 0.0;
  for (std::uint64_t j : js) {
    const double bj = stable::norming(model, j).b_n;
    for (double z : z_grid)
      for (double w : w_grid) {
        HBoundCell cellrec;
        cellrec.j = j;
        cellrec.z = z;
        cellrec.w = w;
        cellrec.lhs = total[c++].estimate();
        const double env = (1.0 - z) * bj * std::exp(w / 2.0);
        cellrec.ratio = env > 0.0 ? cellrec.lhs.value / env : 0.0;
        rep.max_ratio = std::fmax(rep.max_ratio, cellrec.ratio);
        if (z == z_min && w == w_max) {
          if (j == js.front()) first_ref = cellrec.ratio;
          if (j == js.back()) last_ref = cellrec.ratio;
        }
        rep.cells.push_back(cellrec);
      }
  }
  rep.trend_ratio = first_ref > 0.0 ? last_ref / first_ref : 0.0;
  return rep;
}

}  // namespace bpre::gfengine
