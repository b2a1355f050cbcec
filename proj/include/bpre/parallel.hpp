#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace bpre {

// Fan-out plan. Lane count is part of the run configuration (not hardware)
// so that results are identical on any machine; threads only schedule lanes.
struct LanePlan {
  int lanes = 16;
  int threads = 0;  // 0: hardware concurrency

  [[nodiscard]] int effective_threads() const {
    int t = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    if (t < 1) t = 1;
    return t < lanes ? t : lanes;
  }
};

inline std::uint64_t lane_share(std::uint64_t total, int lanes, int lane) {
  const std::uint64_t base = total / static_cast<std::uint64_t>(lanes);
  const std::uint64_t rem = total % static_cast<std::uint64_t>(lanes);
  return base + (static_cast<std::uint64_t>(lane) < rem ? 1 : 0);
}

// Runs `work(lane, samples_for_lane)` over all lanes and returns the per-lane
// accumulators in lane order. Merge order is therefore scheduling-independent.
template <class Acc, class Work>
std::vector<Acc> run_lanes(const LanePlan& plan, std::uint64_t total_samples, Work&& work) {
  std::vector<Acc> out(static_cast<std::size_t>(plan.lanes));
  const int nthreads = plan.effective_threads();
  if (nthreads <= 1) {
    for (int lane = 0; lane < plan.lanes; ++lane)
      out[static_cast<std::size_t>(lane)] = work(lane, lane_share(total_samples, plan.lanes, lane));
    return out;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const int lane = next.fetch_add(1);
        if (lane >= plan.lanes) return;
        out[static_cast<std::size_t>(lane)] =
            work(lane, lane_share(total_samples, plan.lanes, lane));
      }
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

}  // namespace bpre
