#include "bpre/walks.hpp"

#include <cmath>
#include <stdexcept>

namespace bpre::walks {

WalkPath simulate_path(const stable::IncrementModel& model, std::uint64_t n,
                       rng::Stream& stream) {
  if (n < 1) throw std::invalid_argument("simulate_path: n must be >= 1");
  WalkPath p;
  p.increments.resize(static_cast<Eigen::Index>(n));
  p.partial_sums.resize(static_cast<Eigen::Index>(n));
  double s = 0.0;
  for (Eigen::Index k = 0; k < p.increments.size(); ++k) {
    const double x = stable::sample_increment(model, stream);
    p.increments[k] = x;
    s += x;
    p.partial_sums[k] = s;
  }
  return p;
}

PathStats path_stats(const WalkPath& path) {
  if (path.length() == 0) throw std::invalid_argument("path_stats: empty path");
  PathStats st;
  st.L = path.partial_sums.minCoeff();
  st.M = path.partial_sums.maxCoeff();
  const double target = std::min(0.0, st.L);
  if (target == 0.0) {
    st.tau = 0;  // S_0 = 0 attains min(0, L)
    return st;
  }
  for (Eigen::Index k = 0; k < path.length(); ++k) {
    if (path.partial_sums[k] == target) {
      st.tau = k + 1;
      break;
    }
  }
  return st;
}

WalkPath reverse_path(const WalkPath& path) {
  if (path.length() == 0) throw std::invalid_argument("reverse_path: empty path");
  WalkPath r;
  r.increments = path.increments.reverse();
  r.partial_sums.resize(path.length());
  double s = 0.0;
  for (Eigen::Index k = 0; k < r.increments.size(); ++k) {
    s += r.increments[k];
    r.partial_sums[k] = s;
  }
  return r;
}

Estimate estimate_stay_low(const stable::IncrementModel& model, std::uint64_t n, double y,
                           std::uint64_t samples, rng::Stream stream, const LanePlan& plan) {
  if (!(y > 0.0)) throw std::invalid_argument("estimate_stay_low: y must be > 0");
  if (samples < 1) throw std::invalid_argument("estimate_stay_low: samples must be >= 1");
  auto lanes = run_lanes<Moments>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("stay_low").derived(static_cast<std::uint64_t>(lane));
    Moments mom;
    for (std::uint64_t i = 0; i < cnt; ++i) {
      double s = 0.0;
      bool alive = true;
      for (std::uint64_t k = 0; k < n; ++k) {
        s += stable::sample_increment(model, rs);
        if (s < 0.0) {  // L_n >= 0 already violated
          alive = false;
          // consume the remaining draws? not needed: each path owns its stream draws
          break;
        }
      }
      mom.add(alive && s <= y ? 1.0 : 0.0);
    }
    return mom;
  });
  Moments total;
  for (const auto& m : lanes) total.merge(m);
  return total.estimate();
}

ExpMinEstimate estimate_exp_at_min_epoch(const stable::IncrementModel& model, std::uint64_t n,
                                         std::uint64_t samples, rng::Stream stream,
                                         const LanePlan& plan) {
  if (samples < 1) throw std::invalid_argument("estimate_exp_at_min_epoch: samples >= 1");
  struct Acc {
    Moments primal, dual;
  };
  auto lanes = run_lanes<Acc>(plan, samples, [&](int lane, std::uint64_t cnt) {
    auto rs = stream.derived("exp_min").derived(static_cast<std::uint64_t>(lane));
    Acc acc;
    Eigen::ArrayXd inc(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < cnt; ++i) {
      double s = 0.0, runmin = 0.0;  // min over S_0..S_{k-1}
      bool strict_min_at_end = true;
      for (std::uint64_t k = 0; k < n; ++k) {
        const double x = stable::sample_increment(model, rs);
        inc[static_cast<Eigen::Index>(k)] = x;
        if (k > 0) runmin = std::min(runmin, s);
        s += x;
      }
      strict_min_at_end = s < runmin;  // tau_n = n
      acc.primal.add(strict_min_at_end ? std::exp(s) : 0.0);
      // reversed path: M_n < 0 iff every reversed partial sum < 0
      double rs2 = 0.0;
      bool below = true;
      for (std::uint64_t k = n; k-- > 0;) {
        rs2 += inc[static_cast<Eigen::Index>(k)];
        if (rs2 >= 0.0) {
          below = false;
          break;
        }
      }
      acc.dual.add(below ? std::exp(s) : 0.0);
    }
    return acc;
  });
  Moments p, d;
  for (const auto& a : lanes) {
    p.merge(a.primal);
    d.merge(a.dual);
  }
  return ExpMinEstimate{p.estimate(), d.estimate()};
}

}  // namespace bpre::walks
