#pragma once

#include <Eigen/Core>
#include <cstdint>

#include "bpre/estimate.hpp"
#include "bpre/parallel.hpp"
#include "bpre/stable.hpp"

namespace bpre::walks {

// Increments X_1..X_n and partial sums S_k = X_1+...+X_k (S_0 = 0 implicit).
struct WalkPath {
  Eigen::ArrayXd increments;
  Eigen::ArrayXd partial_sums;

  [[nodiscard]] Eigen::Index length() const { return increments.size(); }
};

struct PathStats {
  double L = 0.0;       // min(S_1..S_n)
  double M = 0.0;       // max(S_1..S_n)
  Eigen::Index tau = 0; // smallest k with S_k = min(0, L)
};

WalkPath simulate_path(const stable::IncrementModel& model, std::uint64_t n,
                       rng::Stream& stream);

PathStats path_stats(const WalkPath& path);

// Time reversal; maps {tau_j = j} events to {M_j < 0} events path-by-path.
WalkPath reverse_path(const WalkPath& path);

// P(S_n <= y, L_n >= 0) by indicator mean.
Estimate estimate_stay_low(const stable::IncrementModel& model, std::uint64_t n, double y,
                           std::uint64_t samples, rng::Stream stream,
                           const LanePlan& plan = {});

struct ExpMinEstimate {
  Estimate primal;  // E[e^{S_n} ; tau_n = n]
  Estimate dual;    // same sample, reversed paths: E[e^{S_n} ; M_n < 0]
};

ExpMinEstimate estimate_exp_at_min_epoch(const stable::IncrementModel& model, std::uint64_t n,
                                         std::uint64_t samples, rng::Stream stream,
                                         const LanePlan& plan = {});

}  // namespace bpre::walks
