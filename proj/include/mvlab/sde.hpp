#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"
#include "mvlab/drifts.hpp"
#include "mvlab/fbm.hpp"
#include "mvlab/metrics.hpp"

namespace mvlab {

// ---------------------------------------------------------------------------
// Configuration

struct PointMass {
  std::vector<double> x0;
};
struct GaussianLaw {
  std::vector<double> mean;
  std::vector<double> cov;  // d x d, row-major
};
/// Resampling with replacement from a finite sample (n * d values).
struct SampleLaw {
  std::vector<double> samples;
  double c0 = 0.0;
};
using InitialLaw = std::variant<PointMass, GaussianLaw, SampleLaw>;

struct BrownianNoise {};
struct FbmNoise {
  double hurst = 0.5;
};
using NoiseSpec = std::variant<BrownianNoise, FbmNoise>;

struct SolverConfig {
  TimeGrid grid{1.0, 256};
  std::size_t n_paths = 1000;
  std::size_t dim = 1;
  InitialLaw initial = PointMass{{0.0}};
  std::uint64_t seed = 0;
  NoiseSpec noise = BrownianNoise{};

  bool brownian() const noexcept { return std::holds_alternative<BrownianNoise>(noise); }
  double hurst() const noexcept { return brownian() ? 0.5 : std::get<FbmNoise>(noise).hurst; }
};

/// Draws from the initial law; also reports its sub-Gaussian parameter c0
/// (some c > 0 with E exp(c |X_0|^2) < inf; +inf for a point mass).
class InitialSampler {
 public:
  InitialSampler(const InitialLaw& law, std::size_t dim) : law_(law), dim_(dim) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, PointMass>) {
            if (l.x0.size() != dim) throw DomainError("initial point has wrong dimension");
            for (double v : l.x0)
              if (!std::isfinite(v)) throw DomainError("initial point is not finite");
            c0_ = kInf;
          } else if constexpr (std::is_same_v<L, GaussianLaw>) {
            if (l.mean.size() != dim || l.cov.size() != dim * dim) throw DomainError("Gaussian law has wrong shape");
            Eigen::MatrixXd cov(dim, dim);
            for (std::size_t i = 0; i < dim; ++i)
              for (std::size_t j = 0; j < dim; ++j) cov(i, j) = l.cov[i * dim + j];
            if (!cov.isApprox(cov.transpose())) throw DomainError("Gaussian covariance is not symmetric");
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
            const double lmin = eig.eigenvalues().minCoeff();
            const double lmax = eig.eigenvalues().maxCoeff();
            if (lmin < -1e-12 * std::max(1.0, lmax)) throw DomainError("Gaussian covariance is not PSD");
            // E exp(c|X|^2) < inf iff c < 1/(2 lmax); record half of that threshold
            c0_ = lmax > 0.0 ? 1.0 / (4.0 * lmax) : kInf;
            Eigen::MatrixXd root = eig.eigenvectors() *
                                   eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                                   eig.eigenvectors().transpose();
            root_.assign(dim * dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i)
              for (std::size_t j = 0; j < dim; ++j) root_[i * dim + j] = root(i, j);
          } else {
            if (l.samples.empty() || l.samples.size() % dim != 0) throw DomainError("initial sample has wrong shape");
            for (double v : l.samples)
              if (!std::isfinite(v)) throw DomainError("initial sample is not finite");
            c0_ = l.c0;
          }
        },
        law_);
  }

  double c0() const noexcept { return c0_; }

  void draw(NormalSource& normal, std::span<double> x) const {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, PointMass>) {
            std::copy(l.x0.begin(), l.x0.end(), x.begin());
          } else if constexpr (std::is_same_v<L, GaussianLaw>) {
            std::vector<double> z(dim_);
            for (double& v : z) v = normal();
            for (std::size_t i = 0; i < dim_; ++i) {
              double s = l.mean[i];
              for (std::size_t j = 0; j < dim_; ++j) s += root_[i * dim_ + j] * z[j];
              x[i] = s;
            }
          } else {
            const std::size_t count = l.samples.size() / dim_;
            std::uniform_int_distribution<std::size_t> pick(0, count - 1);
            const std::size_t r = pick(normal.engine());
            std::copy_n(l.samples.begin() + static_cast<std::ptrdiff_t>(r * dim_), dim_, x.begin());
          }
        },
        law_);
  }

 private:
  InitialLaw law_;
  std::size_t dim_;
  std::vector<double> root_;
  double c0_ = 0.0;
};

inline void validate(const SolverConfig& cfg) {
  if (cfg.n_paths < 2) throw DomainError("SolverConfig: n_paths must be >= 2");
  if (cfg.dim == 0) throw DomainError("SolverConfig: dim must be >= 1");
  if (const auto* f = std::get_if<FbmNoise>(&cfg.noise)) check_hurst(f->hurst);
  InitialSampler(cfg.initial, cfg.dim);
}

/// Driver increments for one path: dW (or dB^H) at steps 0..n-1, written as inc[k * d + c].
class DriverNoise {
 public:
  explicit DriverNoise(const SolverConfig& cfg) : grid_(cfg.grid), dim_(cfg.dim) {
    if (const auto* f = std::get_if<FbmNoise>(&cfg.noise)) {
      if (f->hurst != 0.5) fbm_ = fbm_sampler(f->hurst, cfg.grid, cfg.dim);
    }
  }

  void draw(NormalSource& normal, std::span<double> inc) const {
    const std::size_t n = grid_.n_steps();
    if (!fbm_) {
      const double sq = std::sqrt(grid_.dt());
      for (std::size_t i = 0; i < n * dim_; ++i) inc[i] = sq * normal();
      return;
    }
    std::vector<double> path(grid_.nodes() * dim_);
    fbm_->sample_into(normal, path);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < dim_; ++c) inc[k * dim_ + c] = path[(k + 1) * dim_ + c] - path[k * dim_ + c];
  }

 private:
  TimeGrid grid_;
  std::size_t dim_;
  std::shared_ptr<const FbmSampler> fbm_;
};

// ---------------------------------------------------------------------------
// Euler-Maruyama

namespace detail {

template <class Drift>
void check_drift_grid(const Drift& drift, const TimeGrid& grid) {
  if constexpr (requires { drift.compatible(grid); }) {
    if (!drift.compatible(grid)) throw DomainError("euler_maruyama: frozen measure grid does not refine the solver grid");
  }
}

inline Ensemble assemble(const SolverConfig& cfg, std::vector<std::vector<double>>& values) {
  std::vector<Path> paths;
  paths.reserve(values.size());
  for (auto& v : values) paths.emplace_back(cfg.grid, cfg.dim, std::move(v));
  return Ensemble(std::move(paths));
}

}  // namespace detail

/// M paths of X_{k+1} = X_k + b(t_k, X|[0,t_k]) dt + dW_k. Path i uses stream
/// (seed, "sde", i, round): the initial draw first, then the driver increments.
/// The drift is a callable (double t, const PathView&, std::span<double> out).
template <class Drift>
Ensemble euler_maruyama(const Drift& drift, const SolverConfig& cfg, std::uint64_t round = 0) {
  validate(cfg);
  detail::check_drift_grid(drift, cfg.grid);
  const InitialSampler init(cfg.initial, cfg.dim);
  const DriverNoise noise(cfg);
  const std::size_t n = cfg.grid.n_steps();
  const std::size_t d = cfg.dim;
  const double dt = cfg.grid.dt();
  std::vector<std::vector<double>> values(cfg.n_paths);
  parallel_for(cfg.n_paths, [&](std::size_t i) {
    NormalSource normal(make_stream(cfg.seed, "sde", i, round));
    std::vector<double>& x = values[i];
    x.assign(cfg.grid.nodes() * d, 0.0);
    init.draw(normal, std::span<double>(x).first(d));
    std::vector<double> inc(n * d), b(d);
    noise.draw(normal, inc);
    for (std::size_t k = 0; k < n; ++k) {
      drift(cfg.grid.time(k), PathView{x.data(), d, k, dt}, std::span<double>(b));
      for (std::size_t c = 0; c < d; ++c) {
        if (!std::isfinite(b[c])) throw SingularDriftError(i, k, "drift is not finite");
        x[(k + 1) * d + c] = x[k * d + c] + b[c] * dt + inc[k * d + c];
      }
    }
  });
  return detail::assemble(cfg, values);
}

/// Girsanov entropy between the laws driven by b1 and b2, along `e` (sampled under b1),
/// for the configured driver (Brownian or fractional).
template <class Drift1, class Drift2>
EntropyReport driver_entropy(const SolverConfig& cfg, const Drift1& b1, const Drift2& b2, const Ensemble& e,
                             double up_to) {
  if (cfg.brownian() || cfg.hurst() == 0.5) return girsanov_entropy(b1, b2, e, up_to);
  return fbm_girsanov_entropy(b1, b2, e, cfg.hurst(), up_to);
}

// ---------------------------------------------------------------------------
// Measure-Picard iteration

struct PicardRecord {
  std::size_t iter = 0;
  double entropy_gap = 0.0;
  double std_error = 0.0;
  double tv_bound = 0.0;
};

struct PicardState {
  std::size_t iteration = 0;
  std::shared_ptr<const Ensemble> ensemble;
  double entropy_gap = kInf;
  double std_error = 0.0;
  double tv_bound = kInf;
  std::vector<PicardRecord> history;
  bool converged = false;
  bool non_contraction = false;
  double c0 = 0.0;
  ClampStats clamps;

  void write_log(std::ostream& os) const {
    os << "iter,entropy_gap,stderr,tv_bound\n";
    for (const auto& r : history) {
      os << r.iter << ',' << csv::num(r.entropy_gap) << ',' << csv::num(r.std_error) << ',' << csv::num(r.tv_bound)
         << '\n';
    }
  }
};

struct PicardOptions {
  double tol = 1e-3;
  std::size_t max_iter = 20;
  FreezePolicy freeze{};
  /// Called after every iteration (progress reporting).
  std::function<void(const PicardRecord&)> on_iteration;
};

/// Generic fixed-point loop shared by the SDE and SPDE solvers.
///   make(mu)              -> drift frozen at mu
///   simulate(drift, k)    -> ensemble for iteration k (fresh noise keyed by k)
///   gap(cur, prev, e)     -> EntropyReport between cur and prev (prev == nullptr: zero drift)
///   retire(drift)         -> bookkeeping once a drift is no longer needed
template <class Make, class Simulate, class Gap, class Retire>
PicardState picard_loop(std::shared_ptr<const Ensemble> mu0, Make&& make, Simulate&& simulate, Gap&& gap,
                        Retire&& retire, const PicardOptions& opt) {
  if (!(opt.tol > 0.0)) throw DomainError("picard: tol must be positive");
  if (opt.max_iter == 0) throw DomainError("picard: max_iter must be >= 1");
  using D = std::decay_t<decltype(make(mu0))>;
  PicardState st;
  st.ensemble = std::move(mu0);
  std::optional<D> prev;
  std::size_t rising = 0;
  for (std::size_t k = 1; k <= opt.max_iter; ++k) {
    D cur = make(st.ensemble);
    auto next = std::make_shared<const Ensemble>(simulate(cur, static_cast<std::uint64_t>(k)));
    const EntropyReport rep = gap(cur, prev ? &*prev : nullptr, *next);
    PicardRecord rec{k, std::max(0.0, rep.final_value()), rep.final_stderr(), 0.0};
    rec.tv_bound = std::sqrt(2.0 * rec.entropy_gap);
    if (!st.history.empty()) {
      rising = rec.entropy_gap >= st.history.back().entropy_gap ? rising + 1 : 0;
      if (rising >= 3) st.non_contraction = true;
    }
    st.history.push_back(rec);
    st.iteration = k;
    st.ensemble = next;
    st.entropy_gap = rec.entropy_gap;
    st.std_error = rec.std_error;
    st.tv_bound = rec.tv_bound;
    if (opt.on_iteration) opt.on_iteration(rec);
    if (prev) retire(*prev);
    prev.emplace(std::move(cur));
    if (rec.entropy_gap < opt.tol) {
      st.converged = true;
      break;
    }
  }
  if (prev) retire(*prev);
  return st;
}

/// mu^0: the driver law started from the initial law (zero drift), round 0.
inline Ensemble driver_law(const SolverConfig& cfg) { return euler_maruyama(ZeroDrift{}, cfg, 0); }

/// Fixed point of mu -> law of the SDE with drift b0 + <mu, b>, from mu^0 = driver law.
/// Iteration k uses fresh noise (round k). The gap at iteration k is the Girsanov
/// entropy between drifts frozen at mu^{k-1} and mu^{k-2} along mu^k.
inline PicardState picard_solve(const DriftSpec& spec, const SolverConfig& cfg, const PicardOptions& opt) {
  if (spec.dim != cfg.dim) throw DomainError("picard_solve: drift and config disagree on dimension");
  validate(cfg);
  const double T = cfg.grid.t_end();
  ClampStats clamps;
  auto make = [&](const std::shared_ptr<const Ensemble>& mu) { return freeze(spec, mu, opt.freeze); };
  auto simulate = [&](const FrozenDrift& b, std::uint64_t round) { return euler_maruyama(b, cfg, round); };
  auto gap = [&](const FrozenDrift& cur, const FrozenDrift* prev, const Ensemble& e) {
    if (prev) return driver_entropy(cfg, cur, *prev, e, T);
    return driver_entropy(cfg, cur, ZeroDrift{}, e, T);
  };
  auto retire = [&](const FrozenDrift& b) {
    const ClampStats s = b.clamp_stats();
    clamps.clamped += s.clamped;
    clamps.evaluations += s.evaluations;
  };
  PicardState st = picard_loop(std::make_shared<const Ensemble>(driver_law(cfg)), make, simulate, gap, retire, opt);
  st.c0 = InitialSampler(cfg.initial, cfg.dim).c0();
  st.clamps = clamps;
  return st;
}

inline PicardState picard_solve(const DriftSpec& spec, const SolverConfig& cfg, double tol, std::size_t max_iter) {
  PicardOptions opt;
  opt.tol = tol;
  opt.max_iter = max_iter;
  return picard_solve(spec, cfg, opt);
}

// ---------------------------------------------------------------------------
// Truncation ladder

struct LadderLevel {
  double level = 0.0;
  PicardState state;
  /// One more Phi step from the converged iterate, on noise shared by all levels.
  std::shared_ptr<const Ensemble> fixed_point;
  /// Girsanov entropy against the previous level (NaN for the first level).
  double cross_entropy = std::numeric_limits<double>::quiet_NaN();
  double cross_stderr = std::numeric_limits<double>::quiet_NaN();
};

struct LadderResult {
  std::vector<LadderLevel> levels;
  bool failed = false;
  double failed_level = std::numeric_limits<double>::quiet_NaN();
};

/// Picard fixed points of truncate(spec, n) for increasing n. Every level's
/// reported fixed point is drawn on the same noise (common random numbers), so
/// cross-level entropies measure the truncation effect rather than sampling noise.
inline LadderResult truncation_ladder(const DriftSpec& spec, const std::vector<double>& levels,
                                      const SolverConfig& cfg, const PicardOptions& opt) {
  if (levels.empty()) throw DomainError("truncation_ladder: no levels");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) throw DomainError("truncation_ladder: levels must be strictly increasing");
  }
  constexpr std::uint64_t kSharedRound = 0xC0FFEEull << 20;
  const double T = cfg.grid.t_end();
  LadderResult out;
  std::optional<DriftSpec> prev_spec;
  for (double n : levels) {
    const DriftSpec sn = truncate(spec, n);
    LadderLevel lv;
    lv.level = n;
    lv.state = picard_solve(sn, cfg, opt);
    lv.fixed_point = std::make_shared<const Ensemble>(euler_maruyama(freeze(sn, lv.state.ensemble), cfg, kSharedRound));
    if (prev_spec) {
      const LadderLevel& before = out.levels.back();
      const FrozenDrift fine = freeze(sn, lv.fixed_point);
      const FrozenDrift coarse = freeze(*prev_spec, before.fixed_point);
      const EntropyReport rep = driver_entropy(cfg, fine, coarse, *lv.fixed_point, T);
      lv.cross_entropy = rep.final_value();
      lv.cross_stderr = rep.final_stderr();
    }
    const bool ok = lv.state.converged;
    out.levels.push_back(std::move(lv));
    if (!ok) {
      out.failed = true;
      out.failed_level = n;
      break;
    }
    prev_spec = sn;
  }
  return out;
}

// ---------------------------------------------------------------------------
// N-particle system

/// N coupled paths with drift b0(X^i) + (1/(N-1)) sum_{j != i} b(t, X^i, X^j)
/// (+ B(t, X^i, empirical law of the others)). N = 1 has no interaction.
/// Particle i draws from stream (seed, "particles", replica, stream_order[i]).
inline Ensemble particle_system(const DriftSpec& spec, std::size_t N, const SolverConfig& cfg,
                                std::uint64_t replica = 0, std::span<const std::size_t> stream_order = {}) {
  if (N == 0) throw DomainError("particle_system: N must be >= 1");
  if (spec.dim != cfg.dim) throw DomainError("particle_system: drift and config disagree on dimension");
  if (!stream_order.empty() && stream_order.size() != N) throw DomainError("particle_system: stream order size");
  const CompiledDrift cd = compile(spec);
  const InitialSampler init(cfg.initial, cfg.dim);
  const DriverNoise noise(cfg);
  const std::size_t n = cfg.grid.n_steps();
  const std::size_t d = cfg.dim;
  const double dt = cfg.grid.dt();

  std::vector<std::vector<double>> x(N, std::vector<double>(cfg.grid.nodes() * d, 0.0));
  std::vector<std::vector<double>> inc(N, std::vector<double>(n * d));
  for (std::size_t i = 0; i < N; ++i) {
    NormalSource normal(make_stream(cfg.seed, "particles", replica, stream_order.empty() ? i : stream_order[i]));
    init.draw(normal, std::span<double>(x[i]).first(d));
    noise.draw(normal, inc[i]);
  }
  std::vector<const double*> ptrs(N);
  for (std::size_t i = 0; i < N; ++i) ptrs[i] = x[i].data();
  const std::vector<double> weights(N, N > 1 ? 1.0 / static_cast<double>(N - 1) : 0.0);
  std::vector<double> b(d), buf(d), inter(N * d);

  for (std::size_t k = 0; k < n; ++k) {
    const double t = cfg.grid.time(k);
    const MeasureSlice all{ptrs, weights, d, k, dt};
    leave_one_out_interaction(cd, t, all, inter);
    for (std::size_t i = 0; i < N; ++i) {
      const PathView xi{x[i].data(), d, k, dt};
      std::copy_n(inter.begin() + static_cast<std::ptrdiff_t>(i * d), d, b.begin());
      for (const auto& b0 : cd.bases) {
        b0(t, xi, buf);
        for (std::size_t c = 0; c < d; ++c) b[c] += buf[c];
      }
      if (N > 1 && !cd.nonlinear.empty()) {
        const PointCloud cloud = detail::slice_cloud({ptrs, weights, d, k, dt, i});
        for (const auto& B : cd.nonlinear) {
          B(t, xi.current(), cloud, buf);
          for (std::size_t c = 0; c < d; ++c) b[c] += buf[c];
        }
      }
      for (std::size_t c = 0; c < d; ++c) {
        if (!std::isfinite(b[c])) throw SingularDriftError(i, k, "particle drift is not finite");
      }
      std::copy(b.begin(), b.end(), inter.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t c = 0; c < d; ++c)
        x[i][(k + 1) * d + c] = x[i][k * d + c] + inter[i * d + c] * dt + inc[i][k * d + c];
    }
  }
  return detail::assemble(cfg, x);
}

}  // namespace mvlab
