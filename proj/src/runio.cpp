#include "bpre/runio.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bpre::runio {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config ------------------------------------------------------------

void RunConfig::validate() const {
  if (!seed.has_value()) throw ConfigError("config: seed is mandatory");
  if (samples < 1 || table_samples < 1) throw ConfigError("config: budgets must be positive");
  if (n_list.empty()) throw ConfigError("config: n_list must be nonempty");
  if (lanes < 1) throw ConfigError("config: lanes must be >= 1");
  if (grid_h <= 0.0 || grid_xmax <= grid_h) throw ConfigError("config: bad grid");
  if (model != "gaussian" && model != "exact-stable" && model != "two-sided-pareto")
    throw ConfigError("config: unknown model " + model);
  if (family != "linear-fractional" && family != "poisson")
    throw ConfigError("config: unknown family " + family);
  make_model();  // parameter admissibility
}

stable::IncrementModel RunConfig::make_model() const {
  if (model == "gaussian") return stable::IncrementModel::gaussian(sigma);
  if (model == "exact-stable")
    return stable::IncrementModel::exact_stable(stable::StableParams{alpha, beta, c});
  return stable::IncrementModel::two_sided_pareto(alpha, pareto_balance, pareto_scale);
}

envmodel::OffspringFamily RunConfig::make_family() const {
  envmodel::OffspringFamily f;
  f.kind = family == "poisson" ? envmodel::OffspringKind::Poisson
                               : envmodel::OffspringKind::LinearFractional;
  return f;
}

rng::Stream RunConfig::root_stream() const {
  return rng::Stream::from_seed(*seed).derived(experiment);
}

fs::path RunConfig::resolved_out_dir() const {
  if (const char* env = std::getenv("BPRE_OUT_DIR"); env && *env) return fs::path(env);
  return fs::path(out_dir);
}

std::string RunConfig::to_json() const {
  json j;
  j["experiment"] = experiment;
  j["model"] = model;
  j["sigma"] = sigma;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["c"] = c;
  j["pareto_balance"] = pareto_balance;
  j["pareto_scale"] = pareto_scale;
  j["family"] = family;
  j["K"] = K;
  j["n_list"] = n_list;
  j["samples"] = samples;
  j["J"] = J;
  j["n_max"] = n_max;
  j["N_cut"] = N_cut;
  j["Q_cut"] = Q_cut;
  j["m_max"] = m_max;
  j["table_samples"] = table_samples;
  j["grid_h"] = grid_h;
  j["grid_xmax"] = grid_xmax;
  j["h_horizon"] = h_horizon;
  j["h_samples_w"] = h_samples_w;
  j["h_samples_b"] = h_samples_b;
  j["b2_b"] = b2_b;
  j["b2_eps"] = b2_eps;
  j["theta_frac"] = theta_frac;
  j["trajectories"] = trajectories;
  if (seed) j["seed"] = *seed;
  j["out_dir"] = out_dir;
  j["lanes"] = lanes;
  j["threads"] = threads;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  RunConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j[k].template get<std::decay_t<decltype(field)>>();
  };
  get("experiment", c.experiment);
  get("model", c.model);
  get("sigma", c.sigma);
  get("alpha", c.alpha);
  get("beta", c.beta);
  get("c", c.c);
  get("pareto_balance", c.pareto_balance);
  get("pareto_scale", c.pareto_scale);
  get("family", c.family);
  get("K", c.K);
  get("n_list", c.n_list);
  get("samples", c.samples);
  get("J", c.J);
  get("n_max", c.n_max);
  get("N_cut", c.N_cut);
  get("Q_cut", c.Q_cut);
  get("m_max", c.m_max);
  get("table_samples", c.table_samples);
  get("grid_h", c.grid_h);
  get("grid_xmax", c.grid_xmax);
  get("h_horizon", c.h_horizon);
  get("h_samples_w", c.h_samples_w);
  get("h_samples_b", c.h_samples_b);
  get("b2_b", c.b2_b);
  get("b2_eps", c.b2_eps);
  get("theta_frac", c.theta_frac);
  get("trajectories", c.trajectories);
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  get("out_dir", c.out_dir);
  get("lanes", c.lanes);
  get("threads", c.threads);
  return c;
}

std::uint64_t RunConfig::hash() const { return rng::hash_str(to_json()); }

// --- csv / cache ---------------------------------------------------------

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t payload_hash(const std::string& s) { return rng::hash_str(s); }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::optional<std::string> read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ostringstream ss;
  for (std::size_t i = 0; i < header.size(); ++i) ss << (i ? "," : "") << header[i];
  ss << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) ss << (i ? "," : "") << fmt17(row[i]);
    ss << "\n";
  }
  write_text(path, ss.str());
}

std::string cache_key_renewal(const stable::IncrementModel& model, renewal::RenewalKind kind,
                              double grid_h, double grid_xmax, std::uint64_t n_max,
                              std::uint64_t samples, std::uint64_t seed) {
  std::ostringstream ss;
  ss << "renewal|" << (kind == renewal::RenewalKind::U ? "U" : "V") << "|" << model.label() << "|"
     << fmt17(grid_h) << "|" << fmt17(grid_xmax) << "|" << n_max << "|" << samples << "|" << seed;
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(payload_hash(ss.str())));
  return std::string(kind == renewal::RenewalKind::U ? "U-" : "V-") + buf;
}

std::string cache_key_hgrid(const stable::IncrementModel& model,
                            const envmodel::OffspringFamily& family,
                            const condsim::HGridParams& params, std::uint64_t samples_w,
                            std::uint64_t seed) {
  std::ostringstream ss;
  ss << "hgrid|" << model.label() << "|" << family.label() << "|" << params.horizon_w << "|"
     << params.horizon_b << "|" << samples_w << "|" << params.samples_b << "|" << params.b_atoms
     << "|" << fmt17(params.y_cell) << "|" << fmt17(params.w_min) << "|" << seed;
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(payload_hash(ss.str())));
  return std::string("H-") + buf;
}

void cache_store(const fs::path& dir, const std::string& key,
                 const renewal::RenewalTable& table) {
  std::ostringstream ss;
  ss << "# bpre-renewal kind=" << (table.kind == renewal::RenewalKind::U ? "U" : "V")
     << " n_max=" << table.n_max << " n_used=" << table.n_used << " samples=" << table.samples
     << " last_term_rel=" << fmt17(table.last_term_rel)
     << " warn=" << (table.truncation_warning ? 1 : 0) << " stream_key=" << table.stream_key
     << "\n";
  ss << "x,value,se,tail,n_max\n";
  for (Eigen::Index i = 0; i < table.grid.size(); ++i)
    ss << fmt17(table.grid[i]) << "," << fmt17(table.values[i]) << "," << fmt17(table.se[i]) << ","
       << fmt17(table.tail[i]) << "," << table.n_max << "\n";
  std::string payload = ss.str();
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(payload_hash(payload)));
  write_text(dir / (key + ".csv"), payload + "# fnv=" + buf + "\n");
}

std::optional<renewal::RenewalTable> cache_load_renewal(const fs::path& dir,
                                                        const std::string& key) {
  auto text = read_text(dir / (key + ".csv"));
  if (!text) return std::nullopt;
  const auto tail_pos = text->rfind("# fnv=");
  if (tail_pos == std::string::npos) throw std::runtime_error("cache: missing checksum " + key);
  const std::string payload = text->substr(0, tail_pos);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(payload_hash(payload)));
  if (text->substr(tail_pos + 6, 16) != buf)
    throw std::runtime_error("cache: checksum failure for " + key);
  renewal::RenewalTable t;
  std::istringstream in(payload);
  std::string line;
  std::getline(in, line);
  {
    std::istringstream hs(line);
    std::string tok;
    while (hs >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      if (k == "kind") t.kind = v == "U" ? renewal::RenewalKind::U : renewal::RenewalKind::V;
      if (k == "n_max") t.n_max = std::stoull(v);
      if (k == "n_used") t.n_used = std::stoull(v);
      if (k == "samples") t.samples = std::stoull(v);
      if (k == "last_term_rel") t.last_term_rel = std::stod(v);
      if (k == "warn") t.truncation_warning = v == "1";
      if (k == "stream_key") t.stream_key = std::stoull(v);
    }
  }
  std::getline(in, line);  // column header
  std::vector<double> xs, vs, ses, tails;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    double x, v, s, tl;
    unsigned long long nm;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%llu", &x, &v, &s, &tl, &nm) != 5)
      throw std::runtime_error("cache: bad row in " + key);
    xs.push_back(x);
    vs.push_back(v);
    ses.push_back(s);
    tails.push_back(tl);
  }
  const auto n = static_cast<Eigen::Index>(xs.size());
  t.grid.resize(n);
  t.values.resize(n);
  t.se.resize(n);
  t.tail.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    t.grid[i] = xs[static_cast<std::size_t>(i)];
    t.values[i] = vs[static_cast<std::size_t>(i)];
    t.se[i] = ses[static_cast<std::size_t>(i)];
    t.tail[i] = tails[static_cast<std::size_t>(i)];
  }
  return t;
}

void cache_store(const fs::path& dir, const std::string& key, const condsim::HGrid& grid) {
  std::ostringstream ss;
  ss << "# bpre-hgrid horizon_w=" << grid.params.horizon_w << " horizon_b=" << grid.params.horizon_b
     << " b_atoms=" << grid.params.b_atoms << " y_cell=" << fmt17(grid.params.y_cell)
     << " w_min=" << fmt17(grid.params.w_min) << "\n";
  ss << "u,w,value,se\n";
  for (Eigen::Index ui = 0; ui < grid.u_nodes.size(); ++ui)
    for (Eigen::Index wi = 0; wi < grid.w_nodes.size(); ++wi)
      ss << fmt17(grid.u_nodes[ui]) << "," << fmt17(grid.w_nodes[wi]) << ","
         << fmt17(grid.value(ui, wi)) << "," << fmt17(grid.se(ui, wi)) << "\n";
  std::string payload = ss.str();
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(payload_hash(payload)));
  write_text(dir / (key + ".csv"), payload + "# fnv=" + buf + "\n");
}

std::optional<condsim::HGrid> cache_load_hgrid(const fs::path& dir, const std::string& key) {
  auto text = read_text(dir / (key + ".csv"));
  if (!text) return std::nullopt;
  const auto tail_pos = text->rfind("# fnv=");
  if (tail_pos == std::string::npos) throw std::runtime_error("cache: missing checksum " + key);
  const std::string payload = text->substr(0, tail_pos);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(payload_hash(payload)));
  if (text->substr(tail_pos + 6, 16) != buf)
    throw std::runtime_error("cache: checksum failure for " + key);
  condsim::HGrid g;
  std::istringstream in(payload);
  std::string line;
  std::getline(in, line);
  {
    std::istringstream hs(line);
    std::string tok;
    while (hs >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      if (k == "horizon_w") g.params.horizon_w = std::stoull(v);
      if (k == "horizon_b") g.params.horizon_b = std::stoull(v);
      if (k == "b_atoms") g.params.b_atoms = std::stoull(v);
      if (k == "y_cell") g.params.y_cell = std::stod(v);
      if (k == "w_min") g.params.w_min = std::stod(v);
    }
  }
  std::getline(in, line);
  std::vector<double> us, ws, vals, ses;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    double u, w, v, s;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &u, &w, &v, &s) != 4)
      throw std::runtime_error("cache: bad row in " + key);
    us.push_back(u);
    ws.push_back(w);
    vals.push_back(v);
    ses.push_back(s);
  }
  std::vector<double> uu = us, wwv = ws;
  std::sort(uu.begin(), uu.end());
  uu.erase(std::unique(uu.begin(), uu.end()), uu.end());
  std::sort(wwv.begin(), wwv.end());
  wwv.erase(std::unique(wwv.begin(), wwv.end()), wwv.end());
  g.u_nodes = Eigen::Map<Eigen::ArrayXd>(uu.data(), static_cast<Eigen::Index>(uu.size()));
  g.w_nodes = Eigen::Map<Eigen::ArrayXd>(wwv.data(), static_cast<Eigen::Index>(wwv.size()));
  g.value.setZero(g.u_nodes.size(), g.w_nodes.size());
  g.se.setZero(g.u_nodes.size(), g.w_nodes.size());
  for (std::size_t r = 0; r < us.size(); ++r) {
    const auto ui = std::lower_bound(uu.begin(), uu.end(), us[r]) - uu.begin();
    const auto wi = std::lower_bound(wwv.begin(), wwv.end(), ws[r]) - wwv.begin();
    g.value(ui, wi) = vals[r];
    g.se(ui, wi) = ses[r];
  }
  return g;
}

// --- shared build steps ----------------------------------------------------

TableSet ensure_tables(const RunConfig& cfg) {
  const auto model = cfg.make_model();
  const auto dir = cfg.resolved_out_dir() / "cache";
  TableSet out;
  auto table_stream = rng::Stream::from_seed(*cfg.seed).derived("tables");
  const auto grid = renewal::uniform_grid(cfg.grid_xmax, cfg.grid_h);
  const auto ku = cache_key_renewal(model, renewal::RenewalKind::U, cfg.grid_h, cfg.grid_xmax,
                                    cfg.n_max, cfg.table_samples, *cfg.seed);
  const auto kv = cache_key_renewal(model, renewal::RenewalKind::V, cfg.grid_h, cfg.grid_xmax,
                                    cfg.n_max, cfg.table_samples, *cfg.seed);
  if (auto u = cache_load_renewal(dir, ku)) {
    out.u_table = *u;
  } else {
    out.u_table =
        renewal::estimate_U(model, grid, cfg.n_max, cfg.table_samples, table_stream, cfg.plan());
    cache_store(dir, ku, out.u_table);
  }
  if (auto v = cache_load_renewal(dir, kv)) {
    out.v_table = *v;
  } else {
    out.v_table =
        renewal::estimate_V(model, grid, cfg.n_max, cfg.table_samples, table_stream, cfg.plan());
    cache_store(dir, kv, out.v_table);
  }
  out.keys = {ku, kv};
  return out;
}

condsim::HGrid ensure_hgrid(const RunConfig& cfg, const TableSet& tables,
                            std::vector<std::string>* keys) {
  condsim::HGridParams hp;
  hp.horizon_w = cfg.h_horizon;
  hp.horizon_b = cfg.h_horizon;
  hp.samples_w = cfg.h_samples_w;
  hp.samples_b = cfg.h_samples_b;
  hp.b_atoms = 128;
  hp.y_cell = 0.5;
  hp.w_min = -14.0;
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  const auto dir = cfg.resolved_out_dir() / "cache";
  const auto key = cache_key_hgrid(model, family, hp, cfg.h_samples_w, *cfg.seed);
  if (keys) keys->push_back(key);
  if (auto g = cache_load_hgrid(dir, key)) return *g;
  Eigen::ArrayXd u_nodes(13);
  u_nodes << 0.0, 0.15, 0.3, 0.45, 0.6, 0.72, 0.82, 0.9, 0.95, 0.975, 0.99, 0.997, 1.0;
  Eigen::ArrayXd wn(14);
  wn << -14.0, -12.0, -10.0, -8.0, -6.0, -5.0, -4.0, -3.0, -2.5, -2.0, -1.5, -1.0, -0.5, 0.0;
  condsim::HKernelEstimator est(model, family, tables.u_table, tables.v_table, hp,
                                rng::Stream::from_seed(*cfg.seed).derived("hgrid"), cfg.plan());
  auto grid = est.grid(u_nodes, wn);
  cache_store(dir, key, grid);
  return grid;
}

// --- experiment drivers ------------------------------------------------

namespace {

struct RunContext {
  fs::path out;
  json verdict;
  std::vector<std::string> outputs;
  std::vector<std::string> cache_keys;
};

void emit_manifest(const RunConfig& cfg, RunContext& ctx, double wall_s) {
  json m;
  m["config"] = json::parse(cfg.to_json());
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(cfg.hash()));
  m["config_hash"] = buf;
  m["code_version"] = kCodeVersion;
  std::vector<std::uint64_t> lane_keys;
  for (int lane = 0; lane < cfg.lanes; ++lane)
    lane_keys.push_back(cfg.root_stream().derived(static_cast<std::uint64_t>(lane)).key());
  m["lane_keys"] = lane_keys;
  m["wall_time_s"] = wall_s;
  m["cache_keys"] = ctx.cache_keys;
  m["outputs"] = ctx.outputs;
  write_text(ctx.out / (cfg.experiment + "_manifest.json"), m.dump(2) + "\n");
}

void emit_verdict(const RunConfig& cfg, RunContext& ctx) {
  write_text(ctx.out / (cfg.experiment + "_verdict.json"), ctx.verdict.dump(2) + "\n");
  ctx.outputs.push_back(cfg.experiment + "_verdict.json");
}

void run_renewal(const RunConfig& cfg, RunContext& ctx) {
  auto tables = ensure_tables(cfg);
  ctx.cache_keys = tables.keys;
  const auto model = cfg.make_model();
  // serialize tables next to the verdict as well
  std::vector<std::vector<double>> urows, vrows;
  for (Eigen::Index i = 0; i < tables.u_table.grid.size(); ++i)
    urows.push_back({tables.u_table.grid[i], tables.u_table.values[i], tables.u_table.se[i],
                     tables.u_table.tail[i], static_cast<double>(tables.u_table.n_max)});
  for (Eigen::Index i = 0; i < tables.v_table.grid.size(); ++i)
    vrows.push_back({tables.v_table.grid[i], tables.v_table.values[i], tables.v_table.se[i],
                     tables.v_table.tail[i], static_cast<double>(tables.v_table.n_max)});
  write_csv(ctx.out / "renewal_U.csv", {"x", "value", "se", "tail", "n_max"}, urows);
  write_csv(ctx.out / "renewal_V.csv", {"x", "value", "se", "tail", "n_max"}, vrows);
  ctx.outputs.push_back("renewal_U.csv");
  ctx.outputs.push_back("renewal_V.csv");
  // one-step harmonicity residuals on 10-point grids per side
  auto hs = rng::Stream::from_seed(*cfg.seed).derived("harmonicity");
  json plus = json::array(), minus = json::array();
  bool ok = true;
  std::vector<std::vector<double>> hrows;
  for (int i = 0; i < 10; ++i) {
    const double xp = 0.3 * i;
    auto r = renewal::check_harmonicity(model, tables.u_table, renewal::Side::Plus, xp,
                                        cfg.samples, hs.derived(static_cast<std::uint64_t>(i)));
    plus.push_back({{"x", xp}, {"residual", r.residual}, {"combined_se", r.combined_se}});
    hrows.push_back({xp, r.residual, r.combined_se, 1.0});
    ok = ok && r.residual < 3.0 * r.combined_se;
    const double xm = -0.25 * (i + 1);
    auto rm = renewal::check_harmonicity(model, tables.v_table, renewal::Side::Minus, xm,
                                         cfg.samples,
                                         hs.derived(static_cast<std::uint64_t>(100 + i)));
    minus.push_back({{"x", xm}, {"residual", rm.residual}, {"combined_se", rm.combined_se}});
    hrows.push_back({xm, rm.residual, rm.combined_se, -1.0});
    ok = ok && rm.residual < 3.0 * rm.combined_se;
  }
  write_csv(ctx.out / "renewal_harmonicity.csv", {"x", "residual", "combined_se", "side"}, hrows);
  ctx.outputs.push_back("renewal_harmonicity.csv");
  ctx.verdict["plus"] = plus;
  ctx.verdict["minus"] = minus;
  ctx.verdict["pass"] = ok;
  ctx.verdict["u_truncation_warning"] = tables.u_table.truncation_warning;
  ctx.verdict["v_truncation_warning"] = tables.v_table.truncation_warning;
}

void run_survival(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  auto rep = limits::survival_scaling(model, family, cfg.K, cfg.n_list, cfg.samples,
                                      cfg.root_stream(), cfg.plan());
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < rep.n_list.size(); ++i)
    rows.push_back({static_cast<double>(rep.n_list[i]), rep.ratios[i].value, rep.ratios[i].se});
  write_csv(ctx.out / "survival_scaling.csv", {"n", "ratio", "se"}, rows);
  ctx.outputs.push_back("survival_scaling.csv");
  ctx.verdict["stabilized"] = rep.stabilized;
  ctx.verdict["last_gap_se"] = rep.last_gap_se;
  ctx.verdict["pass"] = rep.stabilized;
}

void run_constants(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  auto tables = ensure_tables(cfg);
  ctx.cache_keys = tables.keys;
  auto hgrid = ensure_hgrid(cfg, tables, &ctx.cache_keys);
  auto root = cfg.root_stream();
  auto pi = limits::estimate_pi(model, family, cfg.m_max, cfg.Q_cut, tables.u_table,
                                cfg.table_samples, root.derived("pi"), cfg.plan());
  auto gl = limits::constant_Gleft(model, family, cfg.K, cfg.J, cfg.N_cut, cfg.Q_cut,
                                   tables.v_table, pi, cfg.samples, root.derived("gleft"),
                                   cfg.plan());
  auto gr = limits::constant_Gright(model, family, cfg.K, cfg.J, hgrid, tables.u_table,
                                    cfg.samples, root.derived("gright"), cfg.plan());
  auto sc = limits::survival_scaling(model, family, cfg.K, cfg.n_list, cfg.samples,
                                     root.derived("scaling"), cfg.plan());
  std::vector<std::vector<double>> rows;
  for (std::size_t j = 0; j < gl.terms.size(); ++j)
    rows.push_back({static_cast<double>(j), gl.terms[j],
                    j < gr.terms.size() ? gr.terms[j] : 0.0});
  write_csv(ctx.out / "constants_terms.csv", {"j", "gleft_term", "gright_term"}, rows);
  ctx.outputs.push_back("constants_terms.csv");
  const double g_total = gl.value.value + gl.tail_extrap + gr.value.value + gr.tail_extrap;
  const double g_se = combined_se(gl.value.se, gr.value.se,
                                  0.5 * (gl.tail_extrap + gr.tail_extrap));
  ctx.verdict["G_left"] = gl.value.value;
  ctx.verdict["G_left_se"] = gl.value.se;
  ctx.verdict["G_left_tail"] = gl.tail_extrap;
  ctx.verdict["G_right"] = gr.value.value;
  ctx.verdict["G_right_se"] = gr.value.se;
  ctx.verdict["G_right_tail"] = gr.tail_extrap;
  ctx.verdict["G_total"] = g_total;
  ctx.verdict["G_total_se"] = g_se;
  ctx.verdict["excluded_n_mass"] = gl.excluded_n_mass;
  ctx.verdict["excluded_q_mass"] = gl.excluded_q_mass;
  ctx.verdict["clamped_h_mass"] = gr.clamped_h_mass;
  ctx.verdict["pi_doubling_gap"] = gl.pi_doubling_gap;
  json sj = json::array();
  for (std::size_t i = 0; i < sc.n_list.size(); ++i)
    sj.push_back({{"n", sc.n_list[i]}, {"ratio", sc.ratios[i].value}, {"se", sc.ratios[i].se}});
  ctx.verdict["survival_ratios"] = sj;
  const auto& last = sc.ratios.back();
  const double gap = std::abs(last.value - g_total);
  const double comb = combined_se(last.se, g_se);
  ctx.verdict["cross_gap_se"] = gap / comb;
  ctx.verdict["stabilized"] = sc.stabilized;
  ctx.verdict["pass"] = sc.stabilized && gap < 3.0 * comb;
}

void run_theorem1(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  auto tables = ensure_tables(cfg);
  ctx.cache_keys = tables.keys;
  auto hgrid = ensure_hgrid(cfg, tables, &ctx.cache_keys);
  auto root = cfg.root_stream();
  Eigen::ArrayXd z_grid(21);
  for (int i = 0; i < 20; ++i) z_grid[i] = i / 20.0;
  z_grid[20] = 0.999;
  auto pi = limits::estimate_pi(model, family, cfg.m_max, cfg.Q_cut, tables.u_table,
                                cfg.table_samples, root.derived("pi"), cfg.plan(), &z_grid);
  auto gl = limits::constant_Gleft(model, family, cfg.K, cfg.J, cfg.N_cut, cfg.Q_cut,
                                   tables.v_table, pi, cfg.samples, root.derived("gleft"),
                                   cfg.plan());
  auto gr = limits::constant_Gright(model, family, cfg.K, cfg.J, hgrid, tables.u_table,
                                    cfg.samples, root.derived("gright"), cfg.plan());
  auto rep = limits::theorem1_law(model, family, cfg.K, cfg.n_list, z_grid, cfg.samples, pi,
                                  hgrid, tables.v_table, tables.u_table,
                                  gl.value.value + gl.tail_extrap, gr.value.value + gr.tail_extrap,
                                  cfg.samples, root.derived("t1"), cfg.plan());
  std::vector<std::vector<double>> rows;
  for (Eigen::Index zi = 0; zi < z_grid.size(); ++zi) {
    std::vector<double> row{z_grid[zi]};
    for (const auto& c : rep.curves) {
      row.push_back(c.values[zi]);
      row.push_back(c.se[zi]);
    }
    row.push_back(rep.limit_curve.values[zi]);
    rows.push_back(row);
  }
  std::vector<std::string> header{"z"};
  for (const auto& c : rep.curves) {
    header.push_back("curve_n" + std::to_string(c.n));
    header.push_back("se_n" + std::to_string(c.n));
  }
  header.push_back("limit_curve");
  write_csv(ctx.out / "theorem1_curves.csv", header, rows);
  ctx.outputs.push_back("theorem1_curves.csv");
  json sd = json::array();
  for (double d : rep.sup_distance) sd.push_back(d);
  ctx.verdict["sup_distance"] = sd;
  ctx.verdict["properness_at_0999"] = rep.properness_at_z;
  ctx.verdict["g_total"] = rep.g_total;
  const bool pass = (rep.sup_distance.empty() || rep.sup_distance.back() < 0.02) &&
                    std::abs(rep.properness_at_z - 1.0) < 0.02;
  ctx.verdict["pass"] = pass;
}

void run_theorem2(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  auto reps = limits::theorem2_constancy(model, family, cfg.K, cfg.theta_frac, cfg.n_list,
                                         cfg.samples, cfg.trajectories, cfg.root_stream(),
                                         cfg.plan());
  std::vector<std::vector<double>> rows;
  for (const auto& r : reps)
    rows.push_back({static_cast<double>(r.n), r.median_D, r.d_quantiles[0], r.d_quantiles[2],
                    r.d_quantiles[3], r.y0_quantiles[0], r.y0_quantiles[3], r.mass_y0_zero,
                    r.mass_above_cutoff, r.ess});
  write_csv(ctx.out / "theorem2_constancy.csv",
            {"n", "median_D", "d_q25", "d_q75", "d_q90", "y0_median", "y0_q999", "mass_y0_zero",
             "mass_above_cutoff", "ess"},
            rows);
  ctx.outputs.push_back("theorem2_constancy.csv");
  bool dec = true;
  for (std::size_t i = 0; i + 1 < reps.size(); ++i)
    dec = dec && reps[i + 1].median_D < reps[i].median_D;
  bool mass_ok = true;
  for (const auto& r : reps)
    mass_ok = mass_ok && r.mass_y0_zero < 1e-3 && r.mass_above_cutoff < 2e-3;
  ctx.verdict["median_decreasing"] = dec;
  ctx.verdict["mass_ok"] = mass_ok;
  ctx.verdict["pass"] = dec && mass_ok;
}

void run_asymptotics(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  auto tables = ensure_tables(cfg);
  ctx.cache_keys = tables.keys;
  auto root = cfg.root_stream();
  auto sl = limits::asym_stay_low(model, cfg.n_list, 1.0, tables.v_table, cfg.samples,
                                  root.derived("staylow"), cfg.plan());
  auto em = limits::asym_exp_min(model, cfg.n_list, tables.u_table, cfg.samples,
                                 root.derived("expmin"), cfg.plan());
  auto dc = limits::D_constant(model, family, cfg.n_list, tables.v_table, cfg.samples,
                               root.derived("dconst"), cfg.plan());
  auto th = limits::survival_ratio_theta(model, family, cfg.n_list, cfg.samples,
                                         root.derived("theta"), cfg.plan());
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < cfg.n_list.size(); ++i)
    rows.push_back({static_cast<double>(cfg.n_list[i]), sl.ratios[i].value, sl.ratios[i].se,
                    em.ratios[i].value, em.ratios[i].se, dc.rows[i].d1.value, dc.rows[i].d2.value,
                    th.ratios[i].value, th.ratios[i].se});
  write_csv(ctx.out / "asymptotics.csv",
            {"n", "staylow_ratio", "staylow_se", "expmin_ratio", "expmin_se", "D_phi1", "D_phi2",
             "theta_ratio", "theta_se"},
            rows);
  ctx.outputs.push_back("asymptotics.csv");
  ctx.verdict["staylow_stabilized"] = sl.stabilized;
  ctx.verdict["staylow_empirical_C"] = sl.empirical_C;
  ctx.verdict["expmin_stabilized"] = em.stabilized;
  json bj = json::array();
  for (double g : em.b_ratio_gap_se) bj.push_back(g);
  ctx.verdict["expmin_b_ratio_gap_se"] = bj;
  ctx.verdict["dconst_diff_se"] = dc.rows.back().diff_se;
  ctx.verdict["theta_stabilized"] = th.stabilized;
  ctx.verdict["pass"] = sl.stabilized && em.stabilized && dc.rows.back().diff_se < 3.0;
}

void run_meander(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  Eigen::ArrayXd x_grid(8);
  x_grid << 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0;
  auto rep = limits::meander_proportionality(model, family, x_grid, cfg.n_list, cfg.samples,
                                             cfg.root_stream(), cfg.plan());
  std::vector<std::vector<double>> rows;
  for (Eigen::Index xi = 0; xi < x_grid.size(); ++xi) {
    std::vector<double> row{x_grid[xi]};
    for (const auto& c : rep.curves) row.push_back(c[xi]);
    rows.push_back(row);
  }
  std::vector<std::string> header{"x"};
  for (auto n : rep.n_list) header.push_back("curve_n" + std::to_string(n));
  write_csv(ctx.out / "meander_curves.csv", header, rows);
  ctx.outputs.push_back("meander_curves.csv");
  json sd = json::array();
  for (double d : rep.sup_distance) sd.push_back(d);
  ctx.verdict["sup_distance"] = sd;
  ctx.verdict["pass"] = rep.sup_distance.empty() || rep.sup_distance.back() < 0.03;
}

void run_check_b2(const RunConfig& cfg, RunContext& ctx) {
  const auto model = cfg.make_model();
  const auto family = cfg.make_family();
  auto rep = envmodel::check_B2(model, family, cfg.b2_b, cfg.b2_eps, cfg.samples,
                                cfg.root_stream());
  ctx.verdict["moment"] = rep.moment.value;
  ctx.verdict["moment_se"] = rep.moment.se;
  ctx.verdict["half_sample"] = rep.half_sample.value;
  ctx.verdict["hill_tail_index"] = rep.hill_tail_index;
  ctx.verdict["finite_verdict"] = rep.finite_verdict;
  ctx.verdict["divergence_warning"] = rep.divergence_warning;
  ctx.verdict["pass"] = rep.finite_verdict;
  std::vector<std::vector<double>> rows{{static_cast<double>(cfg.b2_b), cfg.b2_eps,
                                         rep.moment.value, rep.moment.se, rep.hill_tail_index,
                                         rep.finite_verdict ? 1.0 : 0.0}};
  write_csv(ctx.out / "check_b2.csv", {"b", "eps", "moment", "se", "hill", "finite"}, rows);
  ctx.outputs.push_back("check_b2.csv");
}

}  // namespace

int run(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunContext ctx;
  ctx.out = cfg.resolved_out_dir();
  fs::create_directories(ctx.out);
  if (cfg.experiment == "renewal")
    run_renewal(cfg, ctx);
  else if (cfg.experiment == "survival")
    run_survival(cfg, ctx);
  else if (cfg.experiment == "constants")
    run_constants(cfg, ctx);
  else if (cfg.experiment == "theorem1")
    run_theorem1(cfg, ctx);
  else if (cfg.experiment == "theorem2")
    run_theorem2(cfg, ctx);
  else if (cfg.experiment == "asymptotics")
    run_asymptotics(cfg, ctx);
  else if (cfg.experiment == "meander")
    run_meander(cfg, ctx);
  else if (cfg.experiment == "check-b2")
    run_check_b2(cfg, ctx);
  else
    throw ConfigError("unknown experiment: " + cfg.experiment);
  emit_verdict(cfg, ctx);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_manifest(cfg, ctx, wall);
  return ctx.verdict.value("pass", false) ? 0 : 2;
}

}  // namespace bpre::runio
