#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/drifts.hpp"
#include "mvlab/sde.hpp"
#include "mvlab/spde.hpp"

namespace mvlab {

/// Mean and standard error over repetitions.
struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

inline Estimate mean_and_stderr(const std::vector<double>& xs) {
  if (xs.empty()) throw DomainError("mean_and_stderr: no samples");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n - 1.0;
  return {mean, std::sqrt(var / n)};
}

// ---------------------------------------------------------------------------
// SDE particle statistics

namespace detail {

inline void require_interaction_only(const CompiledDrift& cd) {
  if (!cd.nonlinear.empty()) throw DomainError("chaos statistics need a pairwise interaction kernel");
}

inline void require_same_grid(const Ensemble& particles, const Ensemble& meanfield) {
  if (!(particles.grid() == meanfield.grid()) || particles.dim() != meanfield.dim()) {
    throw DomainError("particles and mean-field ensemble must share grid and dimension");
  }
}

/// Per particle i at node k: |(1/(N-1)) sum_{j != i} b(X^i, X^j) - <mu, b(X^i, .)>|^2,
/// written into sq[i]. The mean-field summary is passed in when available.
inline void pair_discrepancy(const CompiledDrift& cd, std::size_t node, const Ensemble& particles,
                             const MeasureSlice& mf, const NodeSummary* mf_summary, std::vector<double>& sq) {
  const std::size_t N = particles.size();
  const std::size_t d = cd.dim;
  const TimeGrid& g = particles.grid();
  const double t = g.time(node);
  const auto ptrs = path_pointers(particles);
  const MeasureSlice all{ptrs, particles.weights(), d, node, g.dt()};
  std::vector<double> emp(N * d), ref(d);
  leave_one_out_interaction(cd, t, all, emp);
  sq.assign(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    average_interaction(cd, t, all.prefix(i), mf, mf_summary, ref, nullptr);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = emp[i * d + c] - ref[c];
      s += diff * diff;
    }
    sq[i] = s;
  }
}

/// The measure-side helper: slice, pointers and (if summarizable) per-node summaries.
struct MeanFieldView {
  std::vector<const double*> ptrs;
  std::vector<NodeSummary> summaries;
  const Ensemble* mu = nullptr;

  MeanFieldView(const CompiledDrift& cd, const Ensemble& e, std::size_t first, std::size_t last)
      : ptrs(path_pointers(e)), mu(&e) {
    if (summarizable(cd) && !cd.terms.empty()) {
      summaries.resize(last + 1);
      for (std::size_t k = first; k <= last; ++k) summaries[k] = summarize(cd, e.grid().time(k), slice(k));
    }
  }

  MeasureSlice slice(std::size_t k) const { return {ptrs, mu->weights(), mu->dim(), k, mu->grid().dt()}; }
  const NodeSummary* summary(std::size_t k) const { return summaries.empty() ? nullptr : &summaries[k]; }
};

}  // namespace detail

/// E|(1/(N-1)) sum_{j != i} b(t, X^i, X^j) - <mu_t, b(t, X^i, .)>|^2, with the
/// expectation averaged over all particles i of each repetition (exchangeable,
/// so this is the particle-1 quantity with less variance) and the standard error
/// taken across repetitions.
inline Estimate drift_gap(const std::vector<Ensemble>& repetitions, const Ensemble& meanfield,
                          const DriftSpec& kernel, double t) {
  if (repetitions.empty()) throw DomainError("drift_gap: no repetitions");
  const CompiledDrift cd = compile(kernel);
  detail::require_interaction_only(cd);
  if (repetitions.front().size() < 2) throw DomainError("drift_gap: need N >= 2 particles");
  const std::size_t node = meanfield.grid().node_of(t);
  const detail::MeanFieldView mf(cd, meanfield, node, node);
  std::vector<double> per_rep(repetitions.size());
  parallel_for(repetitions.size(), [&](std::size_t r) {
    const Ensemble& p = repetitions[r];
    detail::require_same_grid(p, meanfield);
    if (p.size() < 2) throw DomainError("drift_gap: need N >= 2 particles");
    std::vector<double> sq;
    detail::pair_discrepancy(cd, node, p, mf.slice(node), mf.summary(node), sq);
    double s = 0.0;
    for (double v : sq) s += v;
    per_rep[r] = s / static_cast<double>(sq.size());
  });
  return mean_and_stderr(per_rep);
}

/// H(P^N | mu^{x N}) on [0, up_to] for one particle system:
/// 1/2 sum_i int |(1/(N-1)) sum_{j != i} b(X^i, X^j) - <mu, b(X^i, .)>|^2 ds (left Riemann).
inline double system_entropy(const Ensemble& particles, const Ensemble& meanfield, const DriftSpec& kernel,
                             double up_to) {
  const CompiledDrift cd = compile(kernel);
  detail::require_interaction_only(cd);
  detail::require_same_grid(particles, meanfield);
  if (particles.size() < 2) throw DomainError("system_entropy: need N >= 2 particles");
  const std::size_t last = meanfield.grid().node_of(up_to);
  const detail::MeanFieldView mf(cd, meanfield, 0, last);
  std::vector<double> sq;
  double h = 0.0;
  for (std::size_t k = 0; k < last; ++k) {
    detail::pair_discrepancy(cd, k, particles, mf.slice(k), mf.summary(k), sq);
    for (double v : sq) h += v;
  }
  return 0.5 * h * meanfield.grid().dt();
}

inline Estimate system_entropy(const std::vector<Ensemble>& repetitions, const Ensemble& meanfield,
                               const DriftSpec& kernel, double up_to) {
  std::vector<double> per_rep(repetitions.size());
  parallel_for(repetitions.size(),
               [&](std::size_t r) { per_rep[r] = system_entropy(repetitions[r], meanfield, kernel, up_to); });
  return mean_and_stderr(per_rep);
}

// ---------------------------------------------------------------------------
// Rate fitting

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  /// Half-width of the 95% confidence interval for the slope.
  double half_width = 0.0;
};

/// OLS of log y on log x.
inline RateFit rate_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DomainError("rate_fit: size mismatch");
  if (x.size() < 4) throw DomainError("rate_fit: need at least 4 points");
  const std::size_t n = x.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0.0)) throw DomainError("rate_fit: x must be positive");
    if (!(y[i] > 0.0)) throw DomainError("rate_fit: y must be positive");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw DomainError("rate_fit: x values must not all coincide");
  RateFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - fit.intercept - fit.slope * lx[i];
    rss += r * r;
  }
  const double dof = static_cast<double>(n - 2);
  const double se = std::sqrt(rss / dof / sxx);
  const boost::math::students_t dist(dof);
  fit.half_width = boost::math::quantile(boost::math::complement(dist, 0.025)) * se;
  return fit;
}

// ---------------------------------------------------------------------------
// Sweeps

struct ChaosPoint {
  std::size_t N = 0;
  Estimate drift_gap;
  Estimate scaled_gap;  // drift_gap * (N - 1)
  Estimate system_entropy;
  Estimate per_particle_entropy;  // system_entropy / N
};

struct ChaosRun {
  std::vector<ChaosPoint> points;
  RateFit gap_fit;
  RateFit entropy_fit;  // per-particle entropy vs N
  bool has_entropy = false;
  double gap_time = 0.0;
  std::size_t repetitions = 0;

  /// True when drift_gap * (N - 1) agrees across the sweep: every point lies within
  /// multiplier standard errors of the inverse-variance weighted mean.
  bool scaled_gap_constant(double multiplier = 3.0) const {
    double num = 0.0, den = 0.0;
    for (const auto& p : points) {
      const double w = 1.0 / (p.scaled_gap.std_error * p.scaled_gap.std_error);
      num += w * p.scaled_gap.value;
      den += w;
    }
    const double mean = num / den;
    for (const auto& p : points) {
      if (std::abs(p.scaled_gap.value - mean) > multiplier * p.scaled_gap.std_error) return false;
    }
    return true;
  }

  void write_log(std::ostream& os) const {
    os << "N,stat,value,stderr\n";
    for (const auto& p : points) {
      auto row = [&](const char* stat, const Estimate& e) {
        os << p.N << ',' << stat << ',' << csv::num(e.value) << ',' << csv::num(e.std_error) << '\n';
      };
      row("drift_gap", p.drift_gap);
      row("drift_gap_scaled", p.scaled_gap);
      if (has_entropy) {
        row("system_entropy", p.system_entropy);
        row("system_entropy_per_particle", p.per_particle_entropy);
      }
    }
  }

  void write_fit(std::ostream& os) const {
    os << "stat,slope,half_width\n";
    os << "drift_gap," << csv::num(gap_fit.slope) << ',' << csv::num(gap_fit.half_width) << '\n';
    if (has_entropy) {
      os << "system_entropy_per_particle," << csv::num(entropy_fit.slope) << ',' << csv::num(entropy_fit.half_width)
         << '\n';
    }
  }
};

struct ChaosOptions {
  std::vector<std::size_t> N_values{8, 16, 32, 64, 128, 256};
  std::size_t repetitions = 200;
  /// Time of the drift-gap statistic; negative means the horizon T.
  double gap_time = -1.0;
  bool system = true;
};

namespace detail {

inline void finish_fits(ChaosRun& run) {
  std::vector<double> ns, gaps, ent;
  for (const auto& p : run.points) {
    ns.push_back(static_cast<double>(p.N));
    gaps.push_back(p.drift_gap.value);
    ent.push_back(p.per_particle_entropy.value);
  }
  if (ns.size() >= 4) {
    run.gap_fit = rate_fit(ns, gaps);
    if (run.has_entropy) run.entropy_fit = rate_fit(ns, ent);
  }
}

}  // namespace detail

/// SDE chaos sweep against a given mean-field reference ensemble. Repetition r of
/// size N draws its particles from stream (seed, "particles", r).
inline ChaosRun run_chaos(const DriftSpec& spec, const SolverConfig& cfg, const Ensemble& meanfield,
                          const ChaosOptions& opt) {
  ChaosRun run;
  run.repetitions = opt.repetitions;
  run.gap_time = opt.gap_time < 0.0 ? cfg.grid.t_end() : opt.gap_time;
  run.has_entropy = opt.system;
  if (opt.repetitions < 2) throw DomainError("run_chaos: need at least 2 repetitions");
  const CompiledDrift cd = compile(spec);
  detail::require_interaction_only(cd);
  const std::size_t gap_node = meanfield.grid().node_of(run.gap_time);
  const std::size_t last = meanfield.grid().n_steps();
  const detail::MeanFieldView mf(cd, meanfield, 0, last);
  for (std::size_t N : opt.N_values) {
    if (N < 2) throw DomainError("run_chaos: N values must be >= 2");
    std::vector<double> gaps(opt.repetitions), ents(opt.repetitions, 0.0);
    parallel_for(opt.repetitions, [&](std::size_t r) {
      const Ensemble p = particle_system(spec, N, cfg, r);
      std::vector<double> sq;
      detail::pair_discrepancy(cd, gap_node, p, mf.slice(gap_node), mf.summary(gap_node), sq);
      double s = 0.0;
      for (double v : sq) s += v;
      gaps[r] = s / static_cast<double>(N);
      if (opt.system) {
        double h = 0.0;
        for (std::size_t k = 0; k < last; ++k) {
          detail::pair_discrepancy(cd, k, p, mf.slice(k), mf.summary(k), sq);
          for (double v : sq) h += v;
        }
        ents[r] = 0.5 * h * cfg.grid.dt();
      }
    });
    ChaosPoint pt;
    pt.N = N;
    pt.drift_gap = mean_and_stderr(gaps);
    const double scale = static_cast<double>(N - 1);
    pt.scaled_gap = {pt.drift_gap.value * scale, pt.drift_gap.std_error * scale};
    if (opt.system) {
      pt.system_entropy = mean_and_stderr(ents);
      const double inv = 1.0 / static_cast<double>(N);
      pt.per_particle_entropy = {pt.system_entropy.value * inv, pt.system_entropy.std_error * inv};
    }
    run.points.push_back(pt);
  }
  detail::finish_fits(run);
  return run;
}

// ---------------------------------------------------------------------------
// SPDE variant: F(x, y) = g(y) on fields, L2 discrepancy through the projected modes

namespace detail {

/// Projected modes of <mu_t, g> at every node.
inline std::vector<double> spde_mean_modes(const SpdeKernel& F, const SpectralBasis& basis, const Ensemble& mf) {
  const std::size_t K = basis.modes();
  const std::size_t Q = basis.quad_points();
  const TimeGrid& g = mf.grid();
  std::vector<double> out(g.nodes() * K, 0.0);
  parallel_for(g.nodes(), [&](std::size_t k) {
    std::vector<double> field(Q), acc(Q, 0.0), x(Q), y(Q);
    for (std::size_t i = 0; i < mf.size(); ++i) {
      basis.reconstruct(mf.path(i).at(k).first(K), y);
      F(g.time(k), x, y, field);
      for (std::size_t q = 0; q < Q; ++q) acc[q] += mf.weight(i) * field[q];
    }
    basis.project(acc, std::span<double>(out).subspan(k * K, K));
  });
  return out;
}

/// Mean over particles of ||(1/(N-1)) sum_{j != i} F(X^i, X^j) - <mu, F(X^i, .)>||^2 at a node.
inline double spde_node_discrepancy(const SpdeKernel& F, const SpectralBasis& basis, const Ensemble& p,
                                    std::size_t node, std::span<const double> mean_modes) {
  if (!F.target) throw DomainError("SPDE chaos statistics need a target-only kernel");
  const std::size_t K = basis.modes();
  const std::size_t Q = basis.quad_points();
  const std::size_t N = p.size();
  const double t = p.grid().time(node);
  std::vector<std::vector<double>> g(N, std::vector<double>(Q));
  std::vector<double> y(Q), total(Q, 0.0), avg(Q), modes(K);
  for (std::size_t j = 0; j < N; ++j) {
    basis.reconstruct(p.path(j).at(node).first(K), y);
    F.target(t, y, g[j]);
    for (std::size_t q = 0; q < Q; ++q) total[q] += g[j][q];
  }
  const double inv = 1.0 / static_cast<double>(N - 1);
  double s = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t q = 0; q < Q; ++q) avg[q] = (total[q] - g[i][q]) * inv;
    basis.project(avg, modes);
    for (std::size_t k = 0; k < K; ++k) s += (modes[k] - mean_modes[k]) * (modes[k] - mean_modes[k]);
  }
  return s / static_cast<double>(N);
}

}  // namespace detail

/// SPDE chaos sweep for a target-only field kernel; noise is scaled by cfg.noise_scale,
/// so the system entropy divides by noise_scale^2.
inline ChaosRun run_spde_chaos(const SpdeKernel& F, const SpdeConfig& cfg, const Ensemble& meanfield,
                               const ChaosOptions& opt) {
  if (!F.target) throw DomainError("run_spde_chaos: need a target-only kernel");
  if (opt.repetitions < 2) throw DomainError("run_spde_chaos: need at least 2 repetitions");
  ChaosRun run;
  run.repetitions = opt.repetitions;
  run.gap_time = opt.gap_time < 0.0 ? cfg.grid.t_end() : opt.gap_time;
  run.has_entropy = opt.system;
  const SpectralBasis basis = cfg.basis();
  const auto means = detail::spde_mean_modes(F, basis, meanfield);
  const std::size_t K = basis.modes();
  const std::size_t gap_node = meanfield.grid().node_of(run.gap_time);
  const std::size_t last = meanfield.grid().n_steps();
  const double inv_noise = cfg.noise_scale > 0.0 ? 1.0 / (cfg.noise_scale * cfg.noise_scale) : 0.0;
  for (std::size_t N : opt.N_values) {
    if (N < 2) throw DomainError("run_spde_chaos: N values must be >= 2");
    std::vector<double> gaps(opt.repetitions), ents(opt.repetitions, 0.0);
    parallel_for(opt.repetitions, [&](std::size_t r) {
      const Ensemble p = spde_particles(F, N, cfg, r);
      const std::span<const double> all(means);
      gaps[r] = detail::spde_node_discrepancy(F, basis, p, gap_node, all.subspan(gap_node * K, K));
      if (opt.system) {
        double h = 0.0;
        for (std::size_t k = 0; k < last; ++k)
          h += detail::spde_node_discrepancy(F, basis, p, k, all.subspan(k * K, K)) * static_cast<double>(N);
        ents[r] = 0.5 * h * cfg.grid.dt() * inv_noise;
      }
    });
    ChaosPoint pt;
    pt.N = N;
    pt.drift_gap = mean_and_stderr(gaps);
    const double scale = static_cast<double>(N - 1);
    pt.scaled_gap = {pt.drift_gap.value * scale, pt.drift_gap.std_error * scale};
    if (opt.system) {
      pt.system_entropy = mean_and_stderr(ents);
      const double inv = 1.0 / static_cast<double>(N);
      pt.per_particle_entropy = {pt.system_entropy.value * inv, pt.system_entropy.std_error * inv};
    }
    run.points.push_back(pt);
  }
  detail::finish_fits(run);
  return run;
}

}  // namespace mvlab
