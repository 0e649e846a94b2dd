#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <ostream>
#include <span>
#include <vector>

#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"
#include "mvlab/drifts.hpp"
#include "mvlab/metrics.hpp"
#include "mvlab/sde.hpp"

namespace mvlab {

enum class Equation { heat, wave };

/// Orthonormal modes on [0, 1] sampled at Q midpoints sigma_q = (q + 1/2) / Q.
/// Heat: Neumann cosines e_0 = 1, e_k = sqrt2 cos(k pi s), lambda_k = (k pi)^2, k = 0..K-1.
/// Wave: Dirichlet sines e_k = sqrt2 sin((k+1) pi s), lambda_k = ((k+1) pi)^2, k = 0..K-1.
/// The midpoint rule integrates products of modes exactly while both indices stay below Q.
class SpectralBasis {
 public:
  SpectralBasis(Equation eq, std::size_t modes, std::size_t quad_points = 256)
      : eq_(eq), modes_(modes), quad_(quad_points) {
    if (modes == 0) throw DomainError("SpectralBasis: need at least one mode");
    if (quad_points <= modes) throw DomainError("SpectralBasis: need more quadrature points than modes");
    sigma_.resize(quad_);
    for (std::size_t q = 0; q < quad_; ++q) sigma_[q] = (static_cast<double>(q) + 0.5) / static_cast<double>(quad_);
    table_.resize(modes_ * quad_);
    for (std::size_t k = 0; k < modes_; ++k)
      for (std::size_t q = 0; q < quad_; ++q) table_[k * quad_ + q] = eval(k, sigma_[q]);
  }

  Equation equation() const noexcept { return eq_; }
  std::size_t modes() const noexcept { return modes_; }
  std::size_t quad_points() const noexcept { return quad_; }
  std::span<const double> sigma() const noexcept { return sigma_; }

  double frequency(std::size_t k) const noexcept {
    return std::numbers::pi * static_cast<double>(eq_ == Equation::heat ? k : k + 1);
  }
  double lambda(std::size_t k) const noexcept { return frequency(k) * frequency(k); }

  double eval(std::size_t k, double s) const noexcept {
    if (eq_ == Equation::heat) return k == 0 ? 1.0 : std::numbers::sqrt2 * std::cos(frequency(k) * s);
    return std::numbers::sqrt2 * std::sin(frequency(k) * s);
  }

  void reconstruct(std::span<const double> coeffs, std::span<double> field) const noexcept {
    std::fill(field.begin(), field.end(), 0.0);
    for (std::size_t k = 0; k < modes_; ++k) {
      const double c = coeffs[k];
      if (c == 0.0) continue;
      const double* row = table_.data() + k * quad_;
      for (std::size_t q = 0; q < quad_; ++q) field[q] += c * row[q];
    }
  }

  void project(std::span<const double> field, std::span<double> coeffs) const noexcept {
    const double w = 1.0 / static_cast<double>(quad_);
    for (std::size_t k = 0; k < modes_; ++k) {
      const double* row = table_.data() + k * quad_;
      double s = 0.0;
      for (std::size_t q = 0; q < quad_; ++q) s += field[q] * row[q];
      coeffs[k] = w * s;
    }
  }

  /// Discrete L2 norm^2 of a field on the quadrature points.
  double l2_sq(std::span<const double> field) const noexcept {
    double s = 0.0;
    for (double v : field) s += v * v;
    return s / static_cast<double>(quad_);
  }

 private:
  Equation eq_;
  std::size_t modes_;
  std::size_t quad_;
  std::vector<double> sigma_;
  std::vector<double> table_;
};

/// Field replicas are stored as paths in R^K (heat) or R^{2K} (wave: positions then velocities).
struct SpdeConfig {
  Equation equation = Equation::heat;
  TimeGrid grid{1.0, 100};
  std::size_t n_replicas = 1000;
  std::size_t modes = 64;
  std::size_t quad_points = 256;
  std::uint64_t seed = 0;
  double noise_scale = 1.0;
  /// Deterministic initial coefficients (K or 2K values); empty means zero.
  std::vector<double> initial;
  /// i.i.d. N(0, initial_std^2) added to every position mode at t = 0.
  double initial_std = 0.0;

  std::size_t state_dim() const noexcept { return equation == Equation::heat ? modes : 2 * modes; }
  SpectralBasis basis() const { return SpectralBasis(equation, modes, quad_points); }
};

inline void validate(const SpdeConfig& cfg) {
  if (cfg.n_replicas < 1) throw DomainError("SpdeConfig: need at least one replica");
  if (!cfg.initial.empty() && cfg.initial.size() != cfg.state_dim()) {
    throw DomainError("SpdeConfig: initial coefficients must have " + std::to_string(cfg.state_dim()) + " entries");
  }
  if (!(cfg.noise_scale >= 0.0)) throw DomainError("SpdeConfig: noise_scale must be nonnegative");
  if (!(cfg.initial_std >= 0.0)) throw DomainError("SpdeConfig: initial_std must be nonnegative");
}

// ---------------------------------------------------------------------------
// Drift G(t, X, mu) in feature form:
//   G(t, x, mu)(sigma) = drift(t, x, v, <mu_t, feature(t, y, w)>)(sigma)
// where feature maps a (position, velocity) field to R values, averaged over the
// measure. features == 0 means G ignores the measure.

struct SpdeDriftSpec {
  std::size_t features = 0;
  std::function<void(double t, std::span<const double> pos, std::span<const double> vel, std::span<double> feat)>
      feature;
  std::function<void(double t, std::span<const double> pos, std::span<const double> vel,
                     std::span<const double> mean_feature, std::span<double> out)>
      drift;
  /// Declared bound on ||G||_{L2}, also its TV-Lipschitz constant.
  double bound = kInf;

  bool measure_independent() const noexcept { return features == 0; }
};

namespace spde_drifts {

inline SpdeDriftSpec zero() {
  SpdeDriftSpec s;
  s.drift = [](double, std::span<const double>, std::span<const double>, std::span<const double>,
               std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
  s.bound = 0.0;
  return s;
}

/// G(sigma) = g(sigma), measure- and state-independent.
inline SpdeDriftSpec constant_field(const SpectralBasis& basis, std::function<double(double)> g) {
  std::vector<double> values(basis.quad_points());
  for (std::size_t q = 0; q < values.size(); ++q) values[q] = g(basis.sigma()[q]);
  SpdeDriftSpec s;
  s.bound = std::sqrt(basis.l2_sq(values));
  s.drift = [values](double, std::span<const double>, std::span<const double>, std::span<const double>,
                     std::span<double> out) { std::copy(values.begin(), values.end(), out.begin()); };
  return s;
}

/// G(x, mu)(sigma) = tanh(<mu, tanh y(sigma)> - x(sigma)): saturated pull towards the
/// population's (saturated) mean field. |G| <= 1 pointwise, so ||G||_{L2} <= 1.
inline SpdeDriftSpec saturated_mean_attraction(std::size_t quad_points) {
  SpdeDriftSpec s;
  s.features = quad_points;
  s.feature = [](double, std::span<const double> y, std::span<const double>, std::span<double> f) {
    for (std::size_t q = 0; q < y.size(); ++q) f[q] = std::tanh(y[q]);
  };
  s.drift = [](double, std::span<const double> x, std::span<const double>, std::span<const double> m,
               std::span<double> out) {
    for (std::size_t q = 0; q < x.size(); ++q) out[q] = std::tanh(m[q] - x[q]);
  };
  s.bound = 1.0;
  return s;
}

}  // namespace spde_drifts

/// Frozen-measure SPDE drift as a callable on coefficient paths; returns the
/// projected modes of G (heat: K values; wave: K zeros then K velocity modes).
class SpdeFrozenDrift {
 public:
  SpdeFrozenDrift(SpdeDriftSpec spec, std::shared_ptr<const SpectralBasis> basis,
                  std::shared_ptr<const Ensemble> mu)
      : spec_(std::move(spec)), basis_(std::move(basis)), mu_(std::move(mu)) {
    if (!spec_.drift) throw DomainError("SpdeDriftSpec: missing drift");
    if (spec_.measure_independent()) return;
    if (!mu_) throw DomainError("SpdeFrozenDrift: measure-dependent drift needs a measure");
    const std::size_t K = basis_->modes();
    const std::size_t Q = basis_->quad_points();
    const bool wave = basis_->equation() == Equation::wave;
    if (mu_->dim() != (wave ? 2 * K : K)) throw DomainError("SpdeFrozenDrift: measure has the wrong mode count");
    const TimeGrid& g = mu_->grid();
    const std::size_t R = spec_.features;
    means_.assign(g.nodes() * R, 0.0);
    parallel_for(g.nodes(), [&](std::size_t k) {
      std::vector<double> pos(Q), vel(wave ? Q : 0), feat(R);
      double* acc = means_.data() + k * R;
      for (std::size_t i = 0; i < mu_->size(); ++i) {
        const auto c = mu_->path(i).at(k);
        basis_->reconstruct(c.first(K), pos);
        if (wave) basis_->reconstruct(c.subspan(K, K), vel);
        spec_.feature(g.time(k), pos, vel, feat);
        const double w = mu_->weight(i);
        for (std::size_t r = 0; r < R; ++r) acc[r] += w * feat[r];
      }
    });
  }

  const SpectralBasis& basis() const noexcept { return *basis_; }

  bool compatible(const TimeGrid& solver_grid) const noexcept { return !mu_ || mu_->grid().refines(solver_grid); }

  void operator()(double t, const PathView& x, std::span<double> out) const {
    const std::size_t K = basis_->modes();
    const std::size_t Q = basis_->quad_points();
    const bool wave = basis_->equation() == Equation::wave;
    std::vector<double> pos(Q), vel(wave ? Q : 0), field(Q);
    const auto c = x.current();
    basis_->reconstruct(c.first(K), pos);
    if (wave) basis_->reconstruct(c.subspan(K, K), vel);
    std::span<const double> mean;
    if (!spec_.measure_independent()) {
      const std::size_t node = mu_->grid().node_of(t);
      mean = std::span<const double>(means_).subspan(node * spec_.features, spec_.features);
    }
    spec_.drift(t, pos, vel, mean, field);
    if (wave) {
      std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(K), 0.0);
      basis_->project(field, out.subspan(K, K));
    } else {
      basis_->project(field, out.first(K));
    }
  }

 private:
  SpdeDriftSpec spec_;
  std::shared_ptr<const SpectralBasis> basis_;
  std::shared_ptr<const Ensemble> mu_;
  std::vector<double> means_;
};

// ---------------------------------------------------------------------------
// Time stepping

namespace detail {

/// One exact step of the per-mode linear dynamics with frozen forcing G.
struct ModeStepper {
  Equation eq;
  double dt;
  double noise;
  std::size_t K;
  // heat
  std::vector<double> decay, forcing, sd;
  // wave
  std::vector<double> cs, sn, om, chol_yy, chol_zy, chol_zz;

  ModeStepper(const SpectralBasis& b, double dt_, double noise_scale)
      : eq(b.equation()), dt(dt_), noise(noise_scale), K(b.modes()) {
    if (eq == Equation::heat) {
      for (std::size_t k = 0; k < K; ++k) {
        const double l = b.lambda(k);
        if (l == 0.0) {
          decay.push_back(1.0);
          forcing.push_back(dt);
          sd.push_back(std::sqrt(dt));
        } else {
          decay.push_back(std::exp(-l * dt));
          forcing.push_back(-std::expm1(-l * dt) / l);
          sd.push_back(std::sqrt(-std::expm1(-2.0 * l * dt) / (2.0 * l)));
        }
      }
    } else {
      for (std::size_t k = 0; k < K; ++k) {
        const double w = b.frequency(k);
        const double s2 = std::sin(2.0 * w * dt);
        const double vy = (0.5 * dt - s2 / (4.0 * w)) / (w * w);
        const double vz = 0.5 * dt + s2 / (4.0 * w);
        const double sw = std::sin(w * dt);
        const double cov = sw * sw / (2.0 * w * w);
        const double lyy = std::sqrt(std::max(vy, 0.0));
        const double lzy = lyy > 0.0 ? cov / lyy : 0.0;
        cs.push_back(std::cos(w * dt));
        sn.push_back(sw);
        om.push_back(w);
        chol_yy.push_back(lyy);
        chol_zy.push_back(lzy);
        chol_zz.push_back(std::sqrt(std::max(vz - lzy * lzy, 0.0)));
      }
    }
  }

  /// from -> to, G holds the drift modes (wave: velocity modes in G[K..2K)).
  void step(std::span<const double> from, std::span<const double> G, NormalSource& normal,
            std::span<double> to) const {
    if (eq == Equation::heat) {
      for (std::size_t k = 0; k < K; ++k) {
        const double xi = noise > 0.0 ? normal() : 0.0;
        to[k] = decay[k] * from[k] + forcing[k] * G[k] + noise * sd[k] * xi;
      }
      return;
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double y = from[k];
      const double z = from[K + k];
      const double g = G[K + k];
      const double w = om[k];
      double ny = cs[k] * y + sn[k] / w * z + g * (1.0 - cs[k]) / (w * w);
      double nz = -w * sn[k] * y + cs[k] * z + g * sn[k] / w;
      if (noise > 0.0) {
        const double a = normal();
        const double c = normal();
        ny += noise * chol_yy[k] * a;
        nz += noise * (chol_zy[k] * a + chol_zz[k] * c);
      }
      to[k] = ny;
      to[K + k] = nz;
    }
  }
};

inline void draw_initial_field(const SpdeConfig& cfg, NormalSource& normal, std::span<double> x0) {
  const std::size_t D = cfg.state_dim();
  for (std::size_t k = 0; k < D; ++k) x0[k] = cfg.initial.empty() ? 0.0 : cfg.initial[k];
  if (cfg.initial_std > 0.0)
    for (std::size_t k = 0; k < cfg.modes; ++k) x0[k] += cfg.initial_std * normal();
}

}  // namespace detail

/// Replica i uses stream (seed, "spde", i, round). The drift callable returns
/// mode values of G (see SpdeFrozenDrift).
template <class Drift>
Ensemble spde_simulate(const Drift& drift, const SpdeConfig& cfg, std::uint64_t round = 0) {
  validate(cfg);
  if constexpr (requires { drift.compatible(cfg.grid); }) {
    if (!drift.compatible(cfg.grid)) throw DomainError("spde_simulate: frozen measure grid does not refine the solver grid");
  }
  const SpectralBasis basis = cfg.basis();
  const detail::ModeStepper stepper(basis, cfg.grid.dt(), cfg.noise_scale);
  const std::size_t D = cfg.state_dim();
  const std::size_t n = cfg.grid.n_steps();
  std::vector<std::vector<double>> values(cfg.n_replicas);
  parallel_for(cfg.n_replicas, [&](std::size_t i) {
    NormalSource normal(make_stream(cfg.seed, "spde", i, round));
    std::vector<double>& x = values[i];
    x.assign(cfg.grid.nodes() * D, 0.0);
    detail::draw_initial_field(cfg, normal, std::span<double>(x).first(D));
    std::vector<double> G(D);
    for (std::size_t k = 0; k < n; ++k) {
      drift(cfg.grid.time(k), PathView{x.data(), D, k, cfg.grid.dt()}, std::span<double>(G));
      for (double v : G)
        if (!std::isfinite(v)) throw SingularDriftError(i, k, "SPDE drift is not finite");
      stepper.step(std::span<const double>(x).subspan(k * D, D), G, normal,
                   std::span<double>(x).subspan((k + 1) * D, D));
    }
  });
  std::vector<Path> paths;
  paths.reserve(values.size());
  for (auto& v : values) paths.emplace_back(cfg.grid, D, std::move(v));
  return Ensemble(std::move(paths));
}

/// 1/2 E int ||G1 - G2||^2_{L2} ds / noise_scale^2 along `e` (sampled under G1).
/// Parseval turns the L2 norm into the Euclidean norm of projected modes.
template <class Drift1, class Drift2>
EntropyReport spde_entropy(const SpdeConfig& cfg, const Drift1& g1, const Drift2& g2, const Ensemble& e,
                           double up_to) {
  if (!(cfg.noise_scale > 0.0)) throw DomainError("spde_entropy: undefined without noise");
  EntropyReport r = girsanov_entropy(g1, g2, e, up_to);
  const double s = 1.0 / (cfg.noise_scale * cfg.noise_scale);
  for (double& v : r.values) v *= s;
  for (double& v : r.std_error) v *= s;
  return r;
}

/// Measure-Picard iteration for the mean-field heat or wave equation (cfg.equation).
inline PicardState spde_mf_solve(const SpdeDriftSpec& spec, const SpdeConfig& cfg, const PicardOptions& opt) {
  validate(cfg);
  if (!(cfg.noise_scale > 0.0) && !spec.measure_independent()) {
    throw DomainError("spde_mf_solve: Girsanov gaps need a positive noise scale");
  }
  const auto basis = std::make_shared<const SpectralBasis>(cfg.basis());
  const double T = cfg.grid.t_end();
  auto make = [&](const std::shared_ptr<const Ensemble>& mu) { return SpdeFrozenDrift(spec, basis, mu); };
  auto simulate = [&](const SpdeFrozenDrift& g, std::uint64_t round) { return spde_simulate(g, cfg, round); };
  auto gap = [&](const SpdeFrozenDrift& cur, const SpdeFrozenDrift* prev, const Ensemble& e) {
    if (!(cfg.noise_scale > 0.0)) {
      return EntropyReport{e.grid(), std::vector<double>(e.grid().nodes(), 0.0),
                           std::vector<double>(e.grid().nodes(), 0.0)};
    }
    if (prev) return spde_entropy(cfg, cur, *prev, e, T);
    return spde_entropy(cfg, cur, ZeroDrift{}, e, T);
  };
  auto retire = [](const SpdeFrozenDrift&) {};
  auto mu0 = std::make_shared<const Ensemble>(spde_simulate(ZeroDrift{}, cfg, 0));
  return picard_loop(std::move(mu0), make, simulate, gap, retire, opt);
}

inline PicardState heat_mf_solve(const SpdeDriftSpec& spec, SpdeConfig cfg, const PicardOptions& opt) {
  cfg.equation = Equation::heat;
  return spde_mf_solve(spec, cfg, opt);
}

inline PicardState wave_mf_solve(const SpdeDriftSpec& spec, SpdeConfig cfg, const PicardOptions& opt) {
  cfg.equation = Equation::wave;
  return spde_mf_solve(spec, cfg, opt);
}

// ---------------------------------------------------------------------------
// SPDE particle systems (heat equation)

/// Field interaction F(t, x, y) on quadrature-point fields. When `target` is set,
/// F(t, x, y) = target(t, y) and the pair sum is computed in O(N) per step.
struct SpdeKernel {
  std::function<void(double t, std::span<const double> y, std::span<double> out)> target;
  std::function<void(double t, std::span<const double> x, std::span<const double> y, std::span<double> out)> pair;
  double bound = kInf;

  void operator()(double t, std::span<const double> x, std::span<const double> y, std::span<double> out) const {
    if (target) {
      target(t, y, out);
    } else {
      pair(t, x, y, out);
    }
  }
};

namespace spde_kernels {

inline SpdeKernel zero() {
  SpdeKernel k;
  k.target = [](double, std::span<const double>, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
  k.bound = 0.0;
  return k;
}

/// F(x, y)(sigma) = tanh(y(sigma)).
inline SpdeKernel tanh_target() {
  SpdeKernel k;
  k.target = [](double, std::span<const double> y, std::span<double> out) {
    for (std::size_t q = 0; q < y.size(); ++q) out[q] = std::tanh(y[q]);
  };
  k.bound = 1.0;
  return k;
}

/// F(x, y)(sigma) = tanh(y(sigma) - x(sigma)).
inline SpdeKernel tanh_difference() {
  SpdeKernel k;
  k.pair = [](double, std::span<const double> x, std::span<const double> y, std::span<double> out) {
    for (std::size_t q = 0; q < y.size(); ++q) out[q] = std::tanh(y[q] - x[q]);
  };
  k.bound = 1.0;
  return k;
}

}  // namespace spde_kernels

/// G(t, x, mu) = <mu, F(t, x, .)> in feature form; requires a target-only kernel.
inline SpdeDriftSpec mean_field_of(const SpdeKernel& F, std::size_t quad_points) {
  if (!F.target) throw DomainError("mean_field_of: only target-only kernels have a feature form");
  SpdeDriftSpec s;
  s.features = quad_points;
  s.feature = [g = F.target](double t, std::span<const double> y, std::span<const double>, std::span<double> f) {
    g(t, y, f);
  };
  s.drift = [](double, std::span<const double>, std::span<const double>, std::span<const double> m,
               std::span<double> out) { std::copy(m.begin(), m.end(), out.begin()); };
  s.bound = F.bound;
  return s;
}

/// N coupled heat equations with drift (1/(N-1)) sum_{j != i} F(t, X^i, X^j).
/// Particle i uses stream (seed, "spde-particles", replica, i).
inline Ensemble spde_particles(const SpdeKernel& F, std::size_t N, const SpdeConfig& cfg, std::uint64_t replica = 0) {
  validate(cfg);
  if (N == 0) throw DomainError("spde_particles: N must be >= 1");
  if (cfg.equation != Equation::heat) throw DomainError("spde_particles: only the heat equation is supported");
  const SpectralBasis basis = cfg.basis();
  const detail::ModeStepper stepper(basis, cfg.grid.dt(), cfg.noise_scale);
  const std::size_t K = cfg.modes;
  const std::size_t Q = cfg.quad_points;
  const std::size_t n = cfg.grid.n_steps();
  std::vector<std::vector<double>> x(N, std::vector<double>(cfg.grid.nodes() * K, 0.0));
  std::vector<NormalSource> normals;
  normals.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    normals.emplace_back(make_stream(cfg.seed, "spde-particles", replica, i));
    detail::draw_initial_field(cfg, normals.back(), std::span<double>(x[i]).first(K));
  }
  std::vector<std::vector<double>> fields(N, std::vector<double>(Q));
  std::vector<double> total(Q), own(Q), acc(Q), buf(Q), G(K);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = cfg.grid.time(k);
    for (std::size_t i = 0; i < N; ++i) basis.reconstruct(std::span<const double>(x[i]).subspan(k * K, K), fields[i]);
    if (F.target && N > 1) {
      std::fill(total.begin(), total.end(), 0.0);
      for (std::size_t j = 0; j < N; ++j) {
        F.target(t, fields[j], buf);
        for (std::size_t q = 0; q < Q; ++q) total[q] += buf[q];
      }
    }
    for (std::size_t i = 0; i < N; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      if (N > 1) {
        const double inv = 1.0 / static_cast<double>(N - 1);
        if (F.target) {
          F.target(t, fields[i], own);
          for (std::size_t q = 0; q < Q; ++q) acc[q] = (total[q] - own[q]) * inv;
        } else {
          for (std::size_t j = 0; j < N; ++j) {
            if (j == i) continue;
            F.pair(t, fields[i], fields[j], buf);
            for (std::size_t q = 0; q < Q; ++q) acc[q] += buf[q] * inv;
          }
        }
      }
      basis.project(acc, G);
      for (double v : G)
        if (!std::isfinite(v)) throw SingularDriftError(i, k, "SPDE particle drift is not finite");
      stepper.step(std::span<const double>(x[i]).subspan(k * K, K), G, normals[i],
                   std::span<double>(x[i]).subspan((k + 1) * K, K));
    }
  }
  std::vector<Path> paths;
  paths.reserve(N);
  for (auto& v : x) paths.emplace_back(cfg.grid, K, std::move(v));
  return Ensemble(std::move(paths));
}

// ---------------------------------------------------------------------------
// Output

/// `replica,t,k,coeff` for the first `replicas` members.
inline void write_field_dump(std::ostream& os, const Ensemble& e, std::size_t replicas) {
  os << "replica,t,k,coeff\n";
  const TimeGrid& g = e.grid();
  for (std::size_t i = 0; i < std::min(replicas, e.size()); ++i)
    for (std::size_t node = 0; node < g.nodes(); ++node) {
      const auto c = e.path(i).at(node);
      for (std::size_t k = 0; k < c.size(); ++k)
        os << i << ',' << csv::num(g.time(node)) << ',' << k << ',' << csv::num(c[k]) << '\n';
    }
}

/// `replica,t,sigma,value`: position field on the quadrature points at the given times.
inline void write_snapshots(std::ostream& os, const Ensemble& e, const SpectralBasis& basis,
                            const std::vector<double>& times, std::size_t replicas) {
  os << "replica,t,sigma,value\n";
  std::vector<double> field(basis.quad_points());
  for (std::size_t i = 0; i < std::min(replicas, e.size()); ++i)
    for (double t : times) {
      const std::size_t node = e.grid().node_of(t);
      basis.reconstruct(e.path(i).at(node).first(basis.modes()), field);
      for (std::size_t q = 0; q < field.size(); ++q)
        os << i << ',' << csv::num(e.grid().time(node)) << ',' << csv::num(basis.sigma()[q]) << ','
           << csv::num(field[q]) << '\n';
    }
}

}  // namespace mvlab
