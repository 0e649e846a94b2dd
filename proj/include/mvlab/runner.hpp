#pragma once

// Requires nlohmann/json (json.hpp) on the include path.
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvlab/chaos.hpp"
#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/drifts.hpp"
#include "mvlab/fbm.hpp"
#include "mvlab/metrics.hpp"
#include "mvlab/sde.hpp"
#include "mvlab/spde.hpp"
#include "mvlab/verify.hpp"

#ifndef MVLAB_VERSION
#define MVLAB_VERSION "0.1.0"
#endif

namespace mvlab::runner {

using json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

// ---------------------------------------------------------------------------
// Config reading with consumed-key tracking

/// One JSON object of the config. Every key read is marked; finish() rejects
/// the first key (in document order) nobody asked for.
class Section {
 public:
  Section(const json* j, std::string path) : j_(j), path_(std::move(path)) {
    if (j_ && !j_->is_object()) throw ConfigError(path_, "expected an object");
  }

  bool present() const noexcept { return j_ != nullptr; }
  const std::string& path() const noexcept { return path_; }

  std::string key_path(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  bool has(const std::string& k) const { return j_ && j_->contains(k); }

  const json* raw(const std::string& k) const {
    if (!has(k)) return nullptr;
    used_.insert(k);
    return &(*j_)[k];
  }

  template <class T>
  T get(const std::string& k) const {
    const json* v = raw(k);
    if (!v) throw ConfigError(key_path(k), "missing required key");
    return convert<T>(*v, key_path(k));
  }

  template <class T>
  T get_or(const std::string& k, T fallback) const {
    const json* v = raw(k);
    return v ? convert<T>(*v, key_path(k)) : fallback;
  }

  Section sub(const std::string& k) const { return Section(raw(k), key_path(k)); }

  std::vector<Section> list(const std::string& k) const {
    const json* v = raw(k);
    if (!v) throw ConfigError(key_path(k), "missing required key");
    if (!v->is_array()) throw ConfigError(key_path(k), "expected an array");
    std::vector<Section> out;
    for (std::size_t i = 0; i < v->size(); ++i) out.emplace_back(&(*v)[i], key_path(k) + "[" + std::to_string(i) + "]");
    return out;
  }

  void finish() const {
    if (!j_) return;
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown config key");
    }
  }

 private:
  template <class T>
  static T convert(const json& v, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(where, "expected an integer");
        if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw ConfigError(where, "expected a nonnegative integer");
        return v.get<T>();
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError(where, "expected a number");
        return v.get<double>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(where, "expected true or false");
        return v.get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(where, "expected a string");
        return v.get<std::string>();
      } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        if (v.is_number()) return {v.get<double>()};
        if (!v.is_array()) throw ConfigError(where, "expected a number or an array of numbers");
        std::vector<double> out;
        for (const auto& e : v) {
          if (!e.is_number()) throw ConfigError(where, "expected an array of numbers");
          out.push_back(e.get<double>());
        }
        return out;
      } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
        if (!v.is_array()) throw ConfigError(where, "expected an array of integers");
        std::vector<std::size_t> out;
        for (const auto& e : v) {
          if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0)) {
            throw ConfigError(where, "expected an array of nonnegative integers");
          }
          out.push_back(e.get<std::size_t>());
        }
        return out;
      } else {
        static_assert(sizeof(T) == 0, "unsupported config type");
      }
    } catch (const json::exception& e) {
      throw ConfigError(where, std::string("bad value (") + e.what() + ")");
    }
  }

  const json* j_;
  std::string path_;
  mutable std::set<std::string> used_;
};

/// Runs `f`, turning domain errors from library constructors into config errors at `key`.
template <class F>
auto at_key(const std::string& key, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const DomainError& e) {
    throw ConfigError(key, e.what());
  }
}

// ---------------------------------------------------------------------------
// Parsed configuration

struct SpdeSettings {
  SpdeConfig cfg;
  std::string drift_kind = "zero";
  double drift_value = 0.0;
  std::size_t drift_mode = 0;
  std::size_t dump_replicas = 2;
  std::vector<double> snapshot_times;
};

struct ChaosSettings {
  ChaosOptions opt;
  std::size_t mean_field_paths = 10000;
  std::string system = "sde";
};

struct VerifySettings {
  std::string check = "both";
  std::optional<LpLqFunction> fn;
  std::vector<double> t_values{0.01, 0.02, 0.05, 0.1, 0.2};
  double lambda = 0.1;
  MonteCarlo mc;
  MonteCarlo khas_mc;
};

struct FbmOpsSettings {
  double hurst = 0.5;
  double alpha = 0.5;
  std::size_t n = 256;
  double beta = 1.0;
  std::size_t paths = 1000;
};

struct RunConfig {
  json echo;
  std::string experiment;
  SolverConfig solver;
  std::optional<DriftSpec> drift;
  std::string drift_kind;
  PicardOptions picard;
  std::vector<double> ladder_levels;
  std::size_t particles_N = 2;
  std::size_t replicas = 1;
  SpdeSettings spde;
  ChaosSettings chaos;
  VerifySettings verify;
  FbmOpsSettings fbm_ops;
  double se_multiplier = 3.0;
  std::string output = "out";
};

inline const std::vector<std::string>& experiments() {
  static const std::vector<std::string> kinds{"simulate", "picard",    "ladder", "particles", "spde-heat",
                                              "spde-wave", "chaos",    "verify", "fbm-ops"};
  return kinds;
}

namespace detail {

inline Interaction bounded_interaction(const std::string& kind, std::size_t dim, double& bound) {
  if (kind == "sine") {
    bound = 1.0;
    return kernels::sine(dim);
  }
  if (kind == "tanh_target") {
    bound = 1.0;
    return kernels::tanh_target(dim);
  }
  if (kind == "tanh_source") {
    bound = 1.0;
    return kernels::tanh_source(dim);
  }
  if (kind == "arctan_attraction") {
    bound = std::acos(0.0);
    return kernels::arctan_attraction(dim);
  }
  throw DomainError("not a bounded kernel: " + kind);
}

inline DriftSpec parse_drift(const Section& s, std::size_t dim) {
  const std::string kind = s.get<std::string>("kind");
  const Section params = s.sub("params");
  const std::string pk = params.path();
  DriftSpec spec;
  if (kind == "zero") {
    spec = bounded_kernel(dim, Interaction{}, 1.0);
  } else if (kind == "sine" || kind == "tanh_target" || kind == "tanh_source" || kind == "arctan_attraction") {
    double bound = 1.0;
    Interaction b = bounded_interaction(kind, dim, bound);
    spec = bounded_kernel(dim, std::move(b), bound);
  } else if (kind == "mean_field" || kind == "linear_attraction") {
    const double K = params.get_or<double>("K", 1.0);
    Interaction b = kind == "mean_field" ? kernels::mean_field(dim) : kernels::linear_attraction(dim);
    spec = at_key(pk, [&] { return linear_growth(dim, {}, std::move(b), K); });
  } else if (kind == "singular_power") {
    const double a = params.get_or<double>("a", 0.4);
    const double p = params.get_or<double>("p", 2.0);
    const double q = params.get_or<double>("q", 8.0);
    const double radius = params.get_or<double>("radius", 1.0);
    const double clamp = params.get_or<double>("clamp_radius", 1e-6);
    spec = at_key(pk, [&] { return singular_kernel(dim, kernels::singular_power(a, radius), p, q, clamp); });
  } else if (kind == "positive_mass") {
    const double L = params.get_or<double>("L", 1.0);
    spec = nonlinear_tv(dim, nonlinear::positive_mass(L), L);
  } else if (kind == "mixed") {
    std::vector<DriftSpec> parts;
    for (const Section& part : s.list("parts")) {
      parts.push_back(parse_drift(part, dim));
      part.finish();
    }
    spec = at_key(s.key_path("parts"), [&] { return mixed(std::move(parts)); });
  } else {
    throw ConfigError(s.key_path("kind"), "unknown drift kind '" + kind + "'");
  }
  params.finish();

  const Section base = s.sub("base");
  if (base.present()) {
    const std::string bk = base.get<std::string>("kind");
    const Section bp = base.sub("params");
    std::optional<DriftSpec> base_spec;
    if (bk == "zero") {
    } else if (bk == "ou") {
      const double theta = bp.get_or<double>("theta", 1.0);
      base_spec = at_key(bp.path(), [&] { return linear_growth(dim, bases::ou(theta), {}, std::max(std::abs(theta), 1e-12)); });
    } else if (bk == "constant") {
      const auto c = bp.get<std::vector<double>>("c");
      if (c.size() != dim) throw ConfigError(bp.key_path("c"), "expected " + std::to_string(dim) + " values");
      double norm = 0.0;
      for (double v : c) norm += v * v;
      base_spec = linear_growth(dim, bases::constant(c), {}, std::max(std::sqrt(norm), 1e-12));
    } else if (bk == "sublinear") {
      const double K = bp.get_or<double>("K", 1.0);
      const double beta = bp.get_or<double>("beta", 0.5);
      base_spec = at_key(bp.path(), [&] { return sublinear_state(dim, bases::sublinear_power(K, beta), K, beta); });
    } else if (bk == "running_max") {
      const double K = bp.get_or<double>("K", 1.0);
      base_spec = at_key(bp.path(), [&] { return linear_growth(dim, bases::running_max(K), {}, K); });
    } else {
      throw ConfigError(base.key_path("kind"), "unknown base drift kind '" + bk + "'");
    }
    bp.finish();
    base.finish();
    if (base_spec) spec = mixed({spec, *base_spec});
  }
  if (s.has("truncate")) {
    const double n = s.get<double>("truncate");
    spec = at_key(s.key_path("truncate"), [&] { return truncate(spec, n); });
  }
  return spec;
}

inline InitialLaw parse_initial(const Section& s, std::size_t dim) {
  if (!s.present()) return PointMass{std::vector<double>(dim, 0.0)};
  const std::string kind = s.get_or<std::string>("kind", "point");
  auto fill = [&](std::vector<double> v, const std::string& key) {
    if (v.size() == 1 && dim > 1) v.assign(dim, v[0]);
    if (v.size() != dim) throw ConfigError(s.key_path(key), "expected " + std::to_string(dim) + " values");
    return v;
  };
  if (kind == "point") {
    return PointMass{fill(s.get_or<std::vector<double>>("x0", {0.0}), "x0")};
  }
  if (kind == "gaussian") {
    GaussianLaw g;
    g.mean = fill(s.get_or<std::vector<double>>("mean", {0.0}), "mean");
    auto cov = s.get_or<std::vector<double>>("cov", {1.0});
    if (cov.size() == 1) {
      g.cov.assign(dim * dim, 0.0);
      for (std::size_t i = 0; i < dim; ++i) g.cov[i * dim + i] = cov[0];
    } else if (cov.size() == dim) {
      g.cov.assign(dim * dim, 0.0);
      for (std::size_t i = 0; i < dim; ++i) g.cov[i * dim + i] = cov[i];
    } else if (cov.size() == dim * dim) {
      g.cov = cov;
    } else {
      throw ConfigError(s.key_path("cov"), "expected 1, d or d*d values");
    }
    return g;
  }
  if (kind == "samples") {
    SampleLaw law;
    law.c0 = s.get_or<double>("c0", 0.0);
    if (s.has("values")) {
      law.samples = s.get<std::vector<double>>("values");
    } else {
      const std::string file = s.get<std::string>("file");
      std::ifstream in(file);
      if (!in) throw ConfigError(s.key_path("file"), "cannot open sample file '" + file + "'");
      std::string line;
      std::getline(in, line);
      std::size_t line_no = 1;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = csv::split(line);
        if (cells.size() != dim) throw ConfigError(s.key_path("file"), "line " + std::to_string(line_no) + ": expected " + std::to_string(dim) + " columns");
        for (const auto& c : cells) law.samples.push_back(at_key(s.key_path("file"), [&] { return csv::parse_double(c, line_no); }));
      }
    }
    if (law.samples.empty() || law.samples.size() % dim != 0) throw ConfigError(s.path(), "sample count must be a multiple of dim");
    return law;
  }
  throw ConfigError(s.key_path("kind"), "unknown initial law '" + kind + "'");
}

inline LpLqFunction parse_function(const Section& s, std::size_t dim, double T) {
  const std::string kind = s.get<std::string>("kind");
  LpLqFunction fn;
  if (kind == "singular_power") {
    const double a = s.get_or<double>("a", 0.4);
    const double p = s.get_or<double>("p", 2.0);
    const double q = s.get_or<double>("q", 8.0);
    const double R = s.get_or<double>("R", 1.0);
    fn = at_key(s.path(), [&] { return lplq::singular_power(dim, a, p, q, T, R); });
  } else if (kind == "indicator_box") {
    const double R = s.get_or<double>("R", 1.0);
    const double p = s.get_or<double>("p", 4.0);
    const double q = s.get_or<double>("q", 8.0);
    fn = lplq::indicator_box(dim, R, p, q, T);
  } else if (kind == "constant") {
    fn = lplq::constant(dim, s.get_or<double>("c", 1.0));
  } else {
    throw ConfigError(s.key_path("kind"), "unknown test function '" + kind + "'");
  }
  s.finish();
  return fn;
}

}  // namespace detail

/// Parses and validates a config document. Unknown keys anywhere are errors.
inline RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("", "config must be a JSON object");
  static const std::set<std::string> kSections{"experiment", "grid",   "paths",  "dim",       "initial",
                                               "noise",      "drift",  "picard", "ladder",    "particles",
                                               "spde",       "chaos",  "verify", "fbm_ops",   "tolerances",
                                               "output"};
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!kSections.count(it.key())) throw ConfigError(it.key(), "unknown config key");
  }
  const Section root(&doc, "");
  RunConfig rc;
  rc.echo = doc;
  rc.experiment = root.get<std::string>("experiment");
  if (std::find(experiments().begin(), experiments().end(), rc.experiment) == experiments().end()) {
    throw ConfigError("experiment", "unknown experiment '" + rc.experiment + "'");
  }

  const Section grid = root.sub("grid");
  if (!grid.present()) throw ConfigError("grid", "missing required key");
  const double T = grid.get<double>("T");
  const std::size_t n_steps = grid.get<std::size_t>("n_steps");
  grid.finish();
  rc.solver.grid = at_key("grid", [&] { return TimeGrid(T, n_steps); });
  rc.solver.n_paths = root.get_or<std::size_t>("paths", 1000);
  rc.solver.dim = root.get_or<std::size_t>("dim", 1);
  if (rc.solver.dim == 0) throw ConfigError("dim", "must be >= 1");

  const Section noise = root.sub("noise");
  if (!noise.present()) throw ConfigError("noise.seed", "missing required key");
  const std::string nk = noise.get_or<std::string>("kind", "bm");
  if (nk == "bm") {
    rc.solver.noise = BrownianNoise{};
    if (noise.has("hurst") && noise.get<double>("hurst") != 0.5) {
      throw ConfigError("noise.hurst", "Brownian noise has hurst 0.5");
    }
  } else if (nk == "fbm") {
    const double H = noise.get<double>("hurst");
    at_key("noise.hurst", [&] { check_hurst(H); return 0; });
    rc.solver.noise = FbmNoise{H};
  } else {
    throw ConfigError("noise.kind", "expected 'bm' or 'fbm'");
  }
  rc.solver.seed = noise.get<std::uint64_t>("seed");
  noise.finish();

  const Section initial = root.sub("initial");
  rc.solver.initial = detail::parse_initial(initial, rc.solver.dim);
  initial.finish();
  at_key("initial", [&] { validate(rc.solver); return 0; });

  const Section drift = root.sub("drift");
  if (drift.present()) {
    rc.drift_kind = drift.get<std::string>("kind");
    rc.drift = detail::parse_drift(drift, rc.solver.dim);
    drift.finish();
  }

  const Section tol = root.sub("tolerances");
  const double entropy_tol = tol.get_or<double>("entropy_tol", 1e-3);
  rc.se_multiplier = tol.get_or<double>("se_multiplier", 3.0);
  tol.finish();

  const Section picard = root.sub("picard");
  rc.picard.tol = picard.get_or<double>("tol", entropy_tol);
  rc.picard.max_iter = picard.get_or<std::size_t>("max_iter", 20);
  picard.finish();
  if (!(rc.picard.tol > 0.0)) throw ConfigError("picard.tol", "must be positive");
  if (rc.picard.max_iter == 0) throw ConfigError("picard.max_iter", "must be >= 1");

  const Section ladder = root.sub("ladder");
  if (ladder.present()) rc.ladder_levels = ladder.get<std::vector<double>>("levels");
  ladder.finish();
  for (std::size_t i = 1; i < rc.ladder_levels.size(); ++i) {
    if (!(rc.ladder_levels[i] > rc.ladder_levels[i - 1])) throw ConfigError("ladder.levels", "must be strictly increasing");
  }

  const Section particles = root.sub("particles");
  rc.particles_N = particles.get_or<std::size_t>("N", 2);
  rc.replicas = particles.get_or<std::size_t>("replicas", 1);
  particles.finish();
  if (rc.particles_N == 0) throw ConfigError("particles.N", "must be >= 1");

  const Section spde = root.sub("spde");
  SpdeConfig& sc = rc.spde.cfg;
  sc.equation = rc.experiment == "spde-wave" ? Equation::wave : Equation::heat;
  sc.grid = rc.solver.grid;
  sc.n_replicas = rc.solver.n_paths;
  sc.seed = rc.solver.seed;
  sc.modes = spde.get_or<std::size_t>("modes", 64);
  sc.quad_points = spde.get_or<std::size_t>("quad_points", 256);
  sc.noise_scale = spde.get_or<double>("noise_scale", 1.0);
  sc.initial_std = spde.get_or<double>("initial_std", 0.0);
  sc.initial = spde.get_or<std::vector<double>>("initial", {});
  rc.spde.dump_replicas = spde.get_or<std::size_t>("dump_replicas", 2);
  rc.spde.snapshot_times = spde.get_or<std::vector<double>>("snapshot_times", {});
  const Section sd = spde.sub("drift");
  if (sd.present()) {
    rc.spde.drift_kind = sd.get<std::string>("kind");
    rc.spde.drift_value = sd.get_or<double>("value", 0.0);
    rc.spde.drift_mode = sd.get_or<std::size_t>("mode", 0);
    static const std::set<std::string> kinds{"zero", "constant", "saturated_mean_attraction", "tanh_target"};
    if (!kinds.count(rc.spde.drift_kind)) throw ConfigError("spde.drift.kind", "unknown SPDE drift '" + rc.spde.drift_kind + "'");
    sd.finish();
  }
  spde.finish();
  at_key("spde", [&] { validate(sc); (void)sc.basis(); return 0; });
  for (double t : rc.spde.snapshot_times) at_key("spde.snapshot_times", [&] { return sc.grid.node_of(t); });

  const Section chaos = root.sub("chaos");
  rc.chaos.opt.N_values = chaos.get_or<std::vector<std::size_t>>("N_values", rc.chaos.opt.N_values);
  rc.chaos.opt.repetitions = chaos.get_or<std::size_t>("repetitions", 200);
  rc.chaos.opt.system = chaos.get_or<bool>("system_entropy", true);
  rc.chaos.opt.gap_time = chaos.get_or<double>("gap_time", -1.0);
  rc.chaos.mean_field_paths = chaos.get_or<std::size_t>("mean_field_paths", 10000);
  rc.chaos.system = chaos.get_or<std::string>("system", "sde");
  chaos.finish();
  if (rc.chaos.system != "sde" && rc.chaos.system != "spde") throw ConfigError("chaos.system", "expected 'sde' or 'spde'");
  for (std::size_t N : rc.chaos.opt.N_values)
    if (N < 2) throw ConfigError("chaos.N_values", "every N must be >= 2");

  const Section verify = root.sub("verify");
  if (verify.present()) {
    rc.verify.check = verify.get_or<std::string>("check", "both");
    if (rc.verify.check != "krylov" && rc.verify.check != "khasminskii" && rc.verify.check != "both") {
      throw ConfigError("verify.check", "expected 'krylov', 'khasminskii' or 'both'");
    }
    const Section fn = verify.sub("function");
    if (!fn.present()) throw ConfigError("verify.function", "missing required key");
    rc.verify.fn = detail::parse_function(fn, rc.solver.dim, T);
    rc.verify.t_values = verify.get_or<std::vector<double>>("t_values", rc.verify.t_values);
    rc.verify.lambda = verify.get_or<double>("lambda", 0.1);
    rc.verify.mc.samples = verify.get_or<std::size_t>("samples", 100000);
    rc.verify.mc.clamp = verify.get_or<double>("clamp", 1e-8);
    const std::string quad = verify.get_or<std::string>("quadrature", "right_point");
    if (quad != "right_point" && quad != "bridge") {
      throw ConfigError("verify.quadrature", "expected 'right_point' or 'bridge'");
    }
    rc.verify.mc.bridge = quad == "bridge";
    rc.verify.mc.start = verify.get_or<std::vector<double>>("start", {});
    rc.verify.mc.grid = rc.solver.grid;
    rc.verify.mc.seed = rc.solver.seed;
    const Section kh = verify.sub("khasminskii");
    rc.verify.khas_mc = rc.verify.mc;
    rc.verify.khas_mc.samples = kh.get_or<std::size_t>("samples", rc.verify.mc.samples);
    const double kT = kh.get_or<double>("T", T);
    const std::size_t kn = kh.get_or<std::size_t>("n_steps", n_steps);
    rc.verify.khas_mc.grid = at_key("verify.khasminskii", [&] { return TimeGrid(kT, kn); });
    kh.finish();
    verify.finish();
    for (double t : rc.verify.t_values) at_key("verify.t_values", [&] { return rc.solver.grid.node_of(t); });
    if (!rc.verify.fn->admissible()) throw ConfigError("verify.function", "(p, q) violates d/p + 2/q < 1");
    if (rc.verify.mc.bridge && !rc.verify.fn->bridge) {
      throw ConfigError("verify.quadrature", "no bridge rule for this function (constant, or 1-d singular_power with 2a < 1)");
    }
  }

  const Section fo = root.sub("fbm_ops");
  rc.fbm_ops.hurst = fo.get_or<double>("hurst", 0.5);
  rc.fbm_ops.alpha = fo.get_or<double>("alpha", 0.5);
  rc.fbm_ops.n = fo.get_or<std::size_t>("n", 256);
  rc.fbm_ops.beta = fo.get_or<double>("beta", 1.0);
  rc.fbm_ops.paths = fo.get_or<std::size_t>("paths", 1000);
  fo.finish();
  at_key("fbm_ops.hurst", [&] { check_hurst(rc.fbm_ops.hurst); return 0; });
  if (!(rc.fbm_ops.alpha > 0.0 && rc.fbm_ops.alpha < 1.0)) throw ConfigError("fbm_ops.alpha", "must lie in (0, 1)");

  rc.output = root.get_or<std::string>("output", "out");
  root.finish();

  const std::string& e = rc.experiment;
  const bool needs_drift = e == "simulate" || e == "picard" || e == "ladder" || e == "particles" ||
                           (e == "chaos" && rc.chaos.system == "sde");
  if (needs_drift && !rc.drift) throw ConfigError("drift", "missing required key");
  if (e == "ladder" && rc.ladder_levels.empty()) throw ConfigError("ladder.levels", "missing required key");
  if (e == "verify" && !rc.verify.fn) throw ConfigError("verify", "missing required key");
  if (e == "fbm-ops" && !fo.present()) throw ConfigError("fbm_ops", "missing required key");
  return rc;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Experiments

struct RunOutput {
  std::vector<std::string> files;
  json diagnostics = json::object();
};

namespace detail {

class OutputDir {
 public:
  OutputDir(std::filesystem::path dir, RunOutput& out) : dir_(std::move(dir)), out_(out) {
    std::filesystem::create_directories(dir_);
  }

  template <class Writer>
  void write(const std::string& name, Writer&& w) {
    std::ofstream os(dir_ / name, std::ios::binary);
    if (!os) throw Error("cannot write '" + (dir_ / name).string() + "'");
    w(os);
    if (!os) throw Error("write failed for '" + (dir_ / name).string() + "'");
    out_.files.push_back(name);
  }

 private:
  std::filesystem::path dir_;
  RunOutput& out_;
};

inline void log_line(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

inline PicardOptions with_progress(PicardOptions opt, std::ostream* log) {
  opt.on_iteration = [log](const PicardRecord& r) {
    std::ostringstream os;
    os << "picard iter " << r.iter << " gap " << r.entropy_gap << " +- " << r.std_error;
    log_line(log, os.str());
  };
  return opt;
}

inline json picard_json(const PicardState& st) {
  json j;
  j["iterations"] = st.iteration;
  j["converged"] = st.converged;
  j["non_contraction"] = st.non_contraction;
  j["entropy_gap"] = st.entropy_gap;
  j["stderr"] = st.std_error;
  j["tv_bound"] = st.tv_bound;
  if (std::isfinite(st.c0)) {
    j["c0"] = st.c0;
  } else {
    j["c0"] = "inf";
  }
  j["clamped"] = st.clamps.clamped;
  j["clamp_evaluations"] = st.clamps.evaluations;
  return j;
}

inline SpdeDriftSpec spde_drift(const SpdeSettings& s) {
  const SpectralBasis basis = s.cfg.basis();
  if (s.drift_kind == "zero") return spde_drifts::zero();
  if (s.drift_kind == "constant") {
    if (s.drift_mode >= basis.modes()) throw ConfigError("spde.drift.mode", "mode index out of range");
    const double v = s.drift_value;
    const std::size_t k = s.drift_mode;
    return spde_drifts::constant_field(basis, [v, k, &basis](double sigma) { return v * basis.eval(k, sigma); });
  }
  if (s.drift_kind == "saturated_mean_attraction") return spde_drifts::saturated_mean_attraction(basis.quad_points());
  return mean_field_of(spde_kernels::tanh_target(), basis.quad_points());
}

inline void mode_stats(std::ostream& os, const Ensemble& e) {
  os << "k,t,mean,var\n";
  const std::size_t last = e.grid().n_steps();
  const double t = e.grid().time(last);
  for (std::size_t k = 0; k < e.dim(); ++k) {
    double m = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) m += e.weight(i) * e.path(i).at(last)[k];
    double v = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
      const double d = e.path(i).at(last)[k] - m;
      v += e.weight(i) * d * d;
    }
    os << k << ',' << csv::num(t) << ',' << csv::num(m) << ',' << csv::num(v) << '\n';
  }
}

}  // namespace detail

inline RunOutput run_experiment(const RunConfig& rc, const std::filesystem::path& dir, std::ostream* log = nullptr) {
  RunOutput out;
  detail::OutputDir od(dir, out);
  const std::string& e = rc.experiment;
  const SolverConfig& cfg = rc.solver;
  const double T = cfg.grid.t_end();

  if (e == "simulate") {
    const auto mu0 = std::make_shared<const Ensemble>(driver_law(cfg));
    const FrozenDrift b = freeze(*rc.drift, mu0);
    const Ensemble x = euler_maruyama(b, cfg, 1);
    const EntropyReport h = driver_entropy(cfg, b, ZeroDrift{}, x, T);
    od.write("ensemble.csv", [&](std::ostream& os) { csv::write_ensemble(os, x); });
    od.write("entropy.csv", [&](std::ostream& os) { h.write_csv(os); });
    out.diagnostics["entropy_vs_driver"] = h.final_value();
    out.diagnostics["entropy_stderr"] = h.final_stderr();
  } else if (e == "picard") {
    const PicardState st = picard_solve(*rc.drift, cfg, detail::with_progress(rc.picard, log));
    od.write("picard_log.csv", [&](std::ostream& os) { st.write_log(os); });
    od.write("ensemble.csv", [&](std::ostream& os) { csv::write_ensemble(os, *st.ensemble); });
    out.diagnostics["picard"] = detail::picard_json(st);
  } else if (e == "ladder") {
    const LadderResult lr = truncation_ladder(*rc.drift, rc.ladder_levels, cfg, detail::with_progress(rc.picard, log));
    od.write("ladder_log.csv", [&](std::ostream& os) {
      os << "level,converged,iterations,entropy_gap,cross_entropy,cross_stderr\n";
      for (const auto& lv : lr.levels) {
        os << csv::num(lv.level) << ',' << (lv.state.converged ? 1 : 0) << ',' << lv.state.iteration << ','
           << csv::num(lv.state.entropy_gap) << ',' << csv::num(lv.cross_entropy) << ','
           << csv::num(lv.cross_stderr) << '\n';
      }
    });
    od.write("picard_log.csv", [&](std::ostream& os) { lr.levels.back().state.write_log(os); });
    out.diagnostics["failed"] = lr.failed;
    if (lr.failed) out.diagnostics["failed_level"] = lr.failed_level;
  } else if (e == "particles") {
    od.write("ensemble.csv", [&](std::ostream& os) {
      for (std::size_t r = 0; r < rc.replicas; ++r) {
        const Ensemble p = particle_system(*rc.drift, rc.particles_N, cfg, r);
        std::ostringstream block;
        csv::write_ensemble(block, p, r * rc.particles_N);
        const std::string text = block.str();
        os << (r == 0 ? text : text.substr(text.find('\n') + 1));
      }
    });
  } else if (e == "spde-heat" || e == "spde-wave") {
    const SpdeSettings& s = rc.spde;
    const SpdeDriftSpec g = detail::spde_drift(s);
    const PicardState st = spde_mf_solve(g, s.cfg, detail::with_progress(rc.picard, log));
    od.write("picard_log.csv", [&](std::ostream& os) { st.write_log(os); });
    od.write("field_dump.csv", [&](std::ostream& os) { write_field_dump(os, *st.ensemble, s.dump_replicas); });
    od.write("mode_stats.csv", [&](std::ostream& os) { detail::mode_stats(os, *st.ensemble); });
    if (!s.snapshot_times.empty()) {
      const SpectralBasis basis = s.cfg.basis();
      od.write("snapshots.csv",
               [&](std::ostream& os) { write_snapshots(os, *st.ensemble, basis, s.snapshot_times, s.dump_replicas); });
    }
    out.diagnostics["picard"] = detail::picard_json(st);
  } else if (e == "chaos") {
    ChaosRun run;
    PicardState st;
    if (rc.chaos.system == "sde") {
      SolverConfig mf_cfg = cfg;
      mf_cfg.n_paths = rc.chaos.mean_field_paths;
      st = picard_solve(*rc.drift, mf_cfg, detail::with_progress(rc.picard, log));
      run = run_chaos(*rc.drift, cfg, *st.ensemble, rc.chaos.opt);
    } else {
      SpdeConfig sc = rc.spde.cfg;
      sc.equation = Equation::heat;
      sc.n_replicas = rc.chaos.mean_field_paths;
      const SpdeKernel F = spde_kernels::tanh_target();
      st = spde_mf_solve(mean_field_of(F, sc.quad_points), sc, detail::with_progress(rc.picard, log));
      run = run_spde_chaos(F, sc, *st.ensemble, rc.chaos.opt);
    }
    od.write("picard_log.csv", [&](std::ostream& os) { st.write_log(os); });
    od.write("chaos_log.csv", [&](std::ostream& os) { run.write_log(os); });
    od.write("rate_fit.csv", [&](std::ostream& os) { run.write_fit(os); });
    out.diagnostics["picard"] = detail::picard_json(st);
    out.diagnostics["gap_slope"] = run.gap_fit.slope;
    out.diagnostics["scaled_gap_constant"] = run.scaled_gap_constant(rc.se_multiplier);
  } else if (e == "verify") {
    const VerifySettings& v = rc.verify;
    od.write("verify_log.csv", [&](std::ostream& os) {
      write_verify_header(os);
      if (v.check != "khasminskii") {
        const KrylovReport kr = krylov_check(*v.fn, v.t_values, v.mc);
        write_verify_rows(os, *v.fn, kr);
        out.diagnostics["krylov_exponent"] = kr.fit.slope;
        out.diagnostics["krylov_clamp_hits"] = kr.clamp_hits;
      }
      if (v.check != "krylov") {
        const KhasminskiiReport kh = khasminskii_check(*v.fn, v.lambda, v.khas_mc);
        write_verify_rows(os, *v.fn, kh, v.khas_mc.grid.t_end());
        out.diagnostics["khasminskii_estimate"] = kh.diverged ? json("inf") : json(kh.estimate);
        out.diagnostics["khasminskii_relative_change"] = kh.relative_change;
      }
    });
  } else if (e == "fbm-ops") {
    const FbmOpsSettings& f = rc.fbm_ops;
    const TimeGrid g(T, f.n);
    std::vector<double> h(g.nodes());
    for (std::size_t k = 0; k < g.nodes(); ++k) h[k] = std::pow(g.time(k), f.beta);
    const auto I = frac_integral(h, f.alpha, g.dt());
    const auto D = frac_derivative(h, f.alpha, g.dt());
    const auto K = kh_inverse(h, f.hurst, g.dt());
    od.write("fbm_ops.csv", [&](std::ostream& os) {
      os << "t,f,frac_integral,frac_derivative,kh_inverse\n";
      for (std::size_t k = 0; k < g.nodes(); ++k)
        os << csv::num(g.time(k)) << ',' << csv::num(h[k]) << ',' << csv::num(I[k]) << ',' << csv::num(D[k]) << ','
           << csv::num(K[k]) << '\n';
    });
    const TimeGrid cg = cfg.grid;
    const auto sampler = fbm_sampler(f.hurst, cg, 1);
    const Ensemble paths = sample_fbm_ensemble(*sampler, f.paths, cfg.seed);
    od.write("fbm_cov.csv", [&](std::ostream& os) {
      os << "i,j,sample_cov,exact\n";
      const std::size_t nodes = cg.nodes();
      for (std::size_t i = 0; i < nodes; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t m = 0; m < paths.size(); ++m) s += paths.path(m).at(i)[0] * paths.path(m).at(j)[0];
          s /= static_cast<double>(paths.size());
          os << i << ',' << j << ',' << csv::num(s) << ',' << csv::num(rh_cov(cg.time(i), cg.time(j), f.hurst)) << '\n';
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Top level: manifest and error records

struct Invocation {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
};

inline json error_record(const std::string& kind, const std::string& message, const std::string& key = {}) {
  json j;
  j["error"] = kind;
  j["message"] = message;
  if (!key.empty()) j["key"] = key;
  return j;
}

inline void emit_error(const json& rec, const std::optional<std::filesystem::path>& dir, std::ostream& err) {
  err << rec.dump() << std::endl;
  if (!dir) return;
  std::error_code ec;
  std::filesystem::create_directories(*dir, ec);
  std::ofstream os(*dir / "error.json");
  if (os) os << rec.dump(2) << '\n';
}

/// `mvlab validate`: parse only. Returns the exit code.
inline int validate_main(const std::filesystem::path& config, std::ostream& out, std::ostream& err) {
  try {
    const RunConfig rc = load_config(config);
    out << "ok: " << rc.experiment << '\n';
    return kExitOk;
  } catch (const ConfigError& e) {
    emit_error(error_record("config", e.what(), e.key()), std::nullopt, err);
    return kExitConfig;
  }
}

/// `mvlab run`: executes the experiment, writes CSVs plus manifest.json (or error.json).
inline int run_main(const Invocation& inv, std::ostream& log, std::ostream& err) {
  std::optional<std::filesystem::path> dir = inv.out_dir;
  try {
    json doc = read_json_file(inv.config);
    if (inv.seed && doc.is_object()) {
      if (!doc.contains("noise") || !doc["noise"].is_object()) doc["noise"] = json::object();
      doc["noise"]["seed"] = *inv.seed;
    }
    if (!dir && doc.is_object() && doc.contains("output") && doc["output"].is_string()) {
      dir = doc["output"].get<std::string>();
    }
    const RunConfig rc = parse_config(doc);
    if (!dir) dir = rc.output;
    if (inv.threads) set_threads(*inv.threads);
    const auto start = std::chrono::steady_clock::now();
    const RunOutput out = run_experiment(rc, *dir, &log);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json manifest;
    manifest["version"] = MVLAB_VERSION;
    manifest["experiment"] = rc.experiment;
    manifest["seed"] = rc.solver.seed;
    manifest["threads"] = threads();
    manifest["wall_time_s"] = wall;
    manifest["outputs"] = out.files;
    manifest["diagnostics"] = out.diagnostics;
    manifest["config"] = rc.echo;
    std::ofstream os(*dir / "manifest.json");
    os << manifest.dump(2) << '\n';
    if (!os) throw Error("cannot write manifest.json");
    return kExitOk;
  } catch (const ConfigError& e) {
    emit_error(error_record("config", e.what(), e.key()), dir, err);
    return kExitConfig;
  } catch (const SingularDriftError& e) {
    json rec = error_record("numeric", e.what());
    rec["path"] = e.path_id();
    rec["node"] = e.node();
    emit_error(rec, dir, err);
    return kExitNumeric;
  } catch (const NumericError& e) {
    emit_error(error_record("numeric", e.what()), dir, err);
    return kExitNumeric;
  } catch (const DomainError& e) {
    emit_error(error_record("domain", e.what()), dir, err);
    return kExitConfig;
  } catch (const std::exception& e) {
    emit_error(error_record("failure", e.what()), dir, err);
    return kExitFailure;
  }
}

}  // namespace mvlab::runner
