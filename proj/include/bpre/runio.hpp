#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bpre/condsim.hpp"
#include "bpre/envmodel.hpp"
#include "bpre/limits.hpp"
#include "bpre/renewal.hpp"

namespace bpre::runio {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One run = one experiment + full parameter set + mandatory seed.
struct RunConfig {
  std::string experiment;

  // increment model
  std::string model = "gaussian";  // gaussian | exact-stable | two-sided-pareto
  double sigma = 1.0;
  double alpha = 1.5, beta = 0.0, c = 1.0;
  double pareto_balance = 0.0, pareto_scale = 1.0;

  std::string family = "linear-fractional";  // linear-fractional | poisson

  double K = 0.0;
  std::vector<std::uint64_t> n_list{128, 256, 512};
  std::uint64_t samples = 1000000;

  // truncation / table parameters
  std::uint64_t J = 48;
  std::uint64_t n_max = 20000;
  double N_cut = 25.0;
  std::uint64_t Q_cut = 64;
  std::uint64_t m_max = 256;
  std::uint64_t table_samples = 1000000;
  double grid_h = 0.05;
  double grid_xmax = 30.0;

  // h-kernel parameters
  std::uint64_t h_horizon = 256;
  std::uint64_t h_samples_w = 100000;
  std::uint64_t h_samples_b = 200000;

  // check-b2
  std::uint64_t b2_b = 3;
  double b2_eps = 0.1;

  // theorem2
  double theta_frac = 0.25;
  std::uint64_t trajectories = 100000;

  std::optional<std::uint64_t> seed;  // mandatory, no wall-clock fallback
  std::string out_dir = "out";
  int lanes = 16;
  int threads = 0;

  void validate() const;
  [[nodiscard]] std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  [[nodiscard]] std::uint64_t hash() const;

  [[nodiscard]] stable::IncrementModel make_model() const;
  [[nodiscard]] envmodel::OffspringFamily make_family() const;
  [[nodiscard]] LanePlan plan() const { return LanePlan{lanes, threads}; }
  [[nodiscard]] rng::Stream root_stream() const;
  [[nodiscard]] std::filesystem::path resolved_out_dir() const;  // BPRE_OUT_DIR overrides
};

struct RunManifest {
  std::uint64_t config_hash = 0;
  std::string code_version;
  std::vector<std::uint64_t> lane_keys;
  double wall_time_s = 0.0;
  std::vector<std::string> cache_keys;
  std::vector<std::string> outputs;
};

inline constexpr const char* kCodeVersion = "bpre 1.0.0";

// dispatch; emits CSV tables, verdict JSON, manifest; returns exit status
int run(const RunConfig& cfg);

// --- persistence -----------------------------------------------------------

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

std::string cache_key_renewal(const stable::IncrementModel& model, renewal::RenewalKind kind,
                              double grid_h, double grid_xmax, std::uint64_t n_max,
                              std::uint64_t samples, std::uint64_t seed);
std::string cache_key_hgrid(const stable::IncrementModel& model,
                            const envmodel::OffspringFamily& family,
                            const condsim::HGridParams& params, std::uint64_t samples_w,
                            std::uint64_t seed);

void cache_store(const std::filesystem::path& dir, const std::string& key,
                 const renewal::RenewalTable& table);
std::optional<renewal::RenewalTable> cache_load_renewal(const std::filesystem::path& dir,
                                                        const std::string& key);
void cache_store(const std::filesystem::path& dir, const std::string& key,
                 const condsim::HGrid& grid);
std::optional<condsim::HGrid> cache_load_hgrid(const std::filesystem::path& dir,
                                               const std::string& key);

// tables used by several experiments, cached under out/cache
struct TableSet {
  renewal::RenewalTable u_table;
  renewal::RenewalTable v_table;
  std::vector<std::string> keys;
};
TableSet ensure_tables(const RunConfig& cfg);

condsim::HGrid ensure_hgrid(const RunConfig& cfg, const TableSet& tables,
                            std::vector<std::string>* keys);

}  // namespace bpre::runio
