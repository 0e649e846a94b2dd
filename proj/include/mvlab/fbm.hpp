#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <tuple>
#include <vector>

#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"
#include "mvlab/metrics.hpp"

namespace mvlab {

inline void check_hurst(double H) {
  if (!(H > 0.0 && H < 1.0)) throw DomainError("Hurst index must lie in (0, 1), got " + std::to_string(H));
}

/// R_H(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2.
inline double rh_cov(double s, double t, double H) {
  check_hurst(H);
  if (s < 0.0 || t < 0.0) throw DomainError("rh_cov: times must be nonnegative");
  const double h2 = 2.0 * H;
  return 0.5 * (std::pow(s, h2) + std::pow(t, h2) - std::pow(std::abs(t - s), h2));
}

// ---------------------------------------------------------------------------
// fBM sampling by Cholesky factorization of the node covariance

class FbmSampler {
 public:
  FbmSampler(double hurst, TimeGrid grid, std::size_t dim) : hurst_(hurst), grid_(grid), dim_(dim) {
    check_hurst(hurst);
    if (dim == 0) throw DomainError("FbmSampler: dim must be >= 1");
    const std::size_t n = grid.n_steps();
    Eigen::MatrixXd cov(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        const double c = rh_cov(grid.time(i + 1), grid.time(j + 1), hurst);
        cov(i, j) = c;
        cov(j, i) = c;
      }
    }
    const double scale = std::pow(grid.t_end(), 2.0 * hurst);
    const double max_jitter = 1e-10 * scale;
    for (double jitter = 0.0;;) {
      Eigen::LLT<Eigen::MatrixXd> llt(cov + jitter * Eigen::MatrixXd::Identity(n, n));
      if (llt.info() == Eigen::Success) {
        factor_ = llt.matrixL();
        jitter_ = jitter;
        break;
      }
      if (jitter >= max_jitter) throw NumericError("FbmSampler: covariance factorization failed after jitter");
      jitter = jitter == 0.0 ? 1e-16 * scale : std::min(jitter * 10.0, max_jitter);
    }
  }

  double hurst() const noexcept { return hurst_; }
  const TimeGrid& grid() const noexcept { return grid_; }
  std::size_t dim() const noexcept { return dim_; }
  /// Lower-triangular factor L with L L^T = [R_H(t_i, t_j)] over nodes 1..n (+ jitter).
  const Eigen::MatrixXd& cov_factor() const noexcept { return factor_; }
  double jitter() const noexcept { return jitter_; }

  /// Writes a path into out[k * dim + c], k = 0..n; node 0 is exactly zero.
  void sample_into(NormalSource& normal, std::span<double> out) const {
    const std::size_t n = grid_.n_steps();
    Eigen::VectorXd z(n);
    for (std::size_t c = 0; c < dim_; ++c) {
      for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal();
      const Eigen::VectorXd x = factor_.triangularView<Eigen::Lower>() * z;
      out[c] = 0.0;
      for (std::size_t i = 0; i < n; ++i) out[(i + 1) * dim_ + c] = x[static_cast<Eigen::Index>(i)];
    }
  }

  Path sample(NormalSource& normal) const {
    std::vector<double> v(grid_.nodes() * dim_);
    sample_into(normal, v);
    return Path(grid_, dim_, std::move(v));
  }

 private:
  double hurst_;
  TimeGrid grid_;
  std::size_t dim_;
  Eigen::MatrixXd factor_;
  double jitter_ = 0.0;
};

/// Shared sampler per (H, T, n, d); factorizations are reused across calls.
inline std::shared_ptr<const FbmSampler> fbm_sampler(double hurst, const TimeGrid& grid, std::size_t dim) {
  using Key = std::tuple<double, double, std::size_t, std::size_t>;
  static std::mutex mutex;
  static std::map<Key, std::shared_ptr<const FbmSampler>> cache;
  const Key key{hurst, grid.t_end(), grid.n_steps(), dim};
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto s = std::make_shared<const FbmSampler>(hurst, grid, dim);
  cache.emplace(key, s);
  return s;
}

/// M independent fBM paths; path i draws from stream (seed, "fbm", i).
inline Ensemble sample_fbm_ensemble(const FbmSampler& sampler, std::size_t m, std::uint64_t seed) {
  std::vector<std::vector<double>> values(m);
  parallel_for(m, [&](std::size_t i) {
    NormalSource normal(make_stream(seed, "fbm", i));
    values[i].resize(sampler.grid().nodes() * sampler.dim());
    sampler.sample_into(normal, values[i]);
  });
  std::vector<Path> paths;
  paths.reserve(m);
  for (auto& v : values) paths.emplace_back(sampler.grid(), sampler.dim(), std::move(v));
  return Ensemble(std::move(paths));
}

// ---------------------------------------------------------------------------
// Riemann-Liouville operators by product-rectangle quadrature

namespace detail {

/// w_m = dt^a / Gamma(a + 1) * (m^a - (m - 1)^a), m = 1..n: the exact integral
/// of the kernel (x - y)^{a-1} / Gamma(a) over a cell at lag m.
inline std::vector<double> rl_weights(std::size_t n, double alpha, double dt) {
  std::vector<double> w(n + 1, 0.0);
  const double c = std::pow(dt, alpha) / std::tgamma(alpha + 1.0);
  for (std::size_t m = 1; m <= n; ++m) {
    w[m] = c * (std::pow(static_cast<double>(m), alpha) - std::pow(static_cast<double>(m - 1), alpha));
  }
  return w;
}

/// Node values of I^alpha for a piecewise-constant function with cell values
/// cells[j] on [t_j, t_{j+1}), j = 0..n-1. Output has n + 1 entries.
inline std::vector<double> rl_integral_cells(std::span<const double> cells, double alpha, double dt) {
  const std::size_t n = cells.size();
  const auto w = rl_weights(n, alpha, dt);
  std::vector<double> out(n + 1, 0.0);
  for (std::size_t i = 1; i <= n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < i; ++j) s += cells[j] * w[i - j];
    out[i] = s;
  }
  return out;
}

/// Centered difference in the interior, one-sided at both ends.
inline std::vector<double> grid_derivative(std::span<const double> f, double dt) {
  const std::size_t m = f.size();
  std::vector<double> d(m, 0.0);
  if (m < 2) return d;
  d[0] = (f[1] - f[0]) / dt;
  d[m - 1] = (f[m - 1] - f[m - 2]) / dt;
  for (std::size_t i = 1; i + 1 < m; ++i) d[i] = (f[i + 1] - f[i - 1]) / (2.0 * dt);
  return d;
}

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("fractional order must lie in (0, 1)");
}

inline std::vector<double> node_to_cells(std::span<const double> f) {
  std::vector<double> c(f.size() - 1);
  for (std::size_t j = 0; j + 1 < f.size(); ++j) c[j] = 0.5 * (f[j] + f[j + 1]);
  return c;
}

}  // namespace detail

/// I^alpha f at the nodes of a uniform grid with spacing dt; f is given at the
/// nodes and taken as the cell average of neighbouring node values inside each cell.
/// Exact on constants; second order for smooth f.
inline std::vector<double> frac_integral(std::span<const double> f, double alpha, double dt) {
  detail::check_alpha(alpha);
  if (f.size() < 2) throw DomainError("frac_integral: need at least two nodes");
  const auto cells = detail::node_to_cells(f);
  return detail::rl_integral_cells(cells, alpha, dt);
}

/// D^alpha f = d/dx I^{1-alpha} f. Requires f(0) = 0.
inline std::vector<double> frac_derivative(std::span<const double> f, double alpha, double dt) {
  detail::check_alpha(alpha);
  if (f.size() < 2) throw DomainError("frac_derivative: need at least two nodes");
  double scale = 0.0;
  for (double v : f) scale = std::max(scale, std::abs(v));
  if (std::abs(f[0]) > 1e-9 * std::max(scale, 1.0)) {
    throw DomainError("frac_derivative: f(0) must vanish");
  }
  const auto j = frac_integral(f, 1.0 - alpha, dt);
  return detail::grid_derivative(j, dt);
}

// ---------------------------------------------------------------------------
// Inverse Volterra operator K_H^{-1}

inline constexpr std::size_t kMinKhSteps = 64;

/// K_H^{-1} h at the nodes of a uniform grid (spacing dt), h(0) = 0.
/// h' is the forward difference on each cell (backward at the last node).
/// H = 1/2 returns h' itself. Otherwise the cell values h'_j * avg_j(s^{1/2-H})
/// feed the Riemann-Liouville quadrature:
///   H < 1/2:  s^{H-1/2} I^{1/2-H}[...]
///   H > 1/2:  s^{H-1/2} D^{H-1/2}[...]
/// Node 0 is 0 for H < 1/2; for H > 1/2 (where the operator blows up at s = 0)
/// it holds the cell-midpoint extrapolation v_1 * 2^{H-1/2}.
inline std::vector<double> kh_inverse(std::span<const double> h, double H, double dt) {
  check_hurst(H);
  if (h.size() < kMinKhSteps + 1) {
    throw ResolutionError("kh_inverse: need at least " + std::to_string(kMinKhSteps) + " steps, got " +
                          std::to_string(h.empty() ? 0 : h.size() - 1));
  }
  const std::size_t n = h.size() - 1;
  std::vector<double> hp(n + 1);
  for (std::size_t j = 0; j < n; ++j) hp[j] = (h[j + 1] - h[j]) / dt;
  hp[n] = (h[n] - h[n - 1]) / dt;
  if (H == 0.5) return hp;

  const double a = 0.5 - H;
  std::vector<double> cells(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double lo = static_cast<double>(j) * dt;
    const double hi = static_cast<double>(j + 1) * dt;
    const double avg = (std::pow(hi, a + 1.0) - std::pow(lo, a + 1.0)) / ((a + 1.0) * dt);
    cells[j] = hp[j] * avg;
  }
  std::vector<double> v;
  if (H < 0.5) {
    v = detail::rl_integral_cells(cells, a, dt);
  } else {
    const auto j = detail::rl_integral_cells(cells, 1.0 - (H - 0.5), dt);
    v = detail::grid_derivative(j, dt);
  }
  for (std::size_t i = 1; i <= n; ++i) v[i] *= std::pow(static_cast<double>(i) * dt, -a);
  v[0] = H < 0.5 ? 0.0 : v[1] * std::pow(0.5, a);
  return v;
}

/// int_0^T |K_H^{-1}(int u)(s)|^2 ds for one scalar coordinate, u given at nodes
/// 0..n-1 (left-point values). U is the left-Riemann integral of u, so at H = 1/2
/// this is exactly sum u_j^2 dt. Returns the cumulative integral at nodes 0..n.
inline std::vector<double> kh_energy(std::span<const double> u, double H, double dt) {
  const std::size_t n = u.size();
  std::vector<double> U(n + 1, 0.0);
  for (std::size_t j = 0; j < n; ++j) U[j + 1] = U[j] + u[j] * dt;
  const auto v = kh_inverse(U, H, dt);
  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t j = 0; j < n; ++j) cum[j + 1] = cum[j] + v[j] * v[j] * dt;
  return cum;
}

/// fBM Girsanov entropy 1/2 E int |K_H^{-1}(int u)|^2 along the paths of `e`,
/// where u(t, x) is a callable (double t, const PathView&, std::span<double> out)
/// giving the drift difference. Cumulative values are reported per node.
template <class U>
EntropyReport fbm_path_entropy(const U& u, const Ensemble& e, double H, double up_to) {
  check_hurst(H);
  const TimeGrid& grid = e.grid();
  const std::size_t last = grid.node_of(up_to);
  if (last < kMinKhSteps) throw ResolutionError("fbm_path_entropy: horizon spans fewer than 64 steps");
  const std::size_t nodes = last + 1;
  const std::size_t m = e.size();
  const std::size_t d = e.dim();
  const double dt = grid.dt();
  std::vector<double> cumulative(m * nodes, 0.0);
  parallel_for(m, [&](std::size_t i) {
    const Path& p = e.path(i);
    std::vector<double> out(d);
    std::vector<std::vector<double>> per_coord(d, std::vector<double>(last));
    for (std::size_t k = 0; k < last; ++k) {
      u(grid.time(k), p.view(k), std::span<double>(out));
      for (std::size_t c = 0; c < d; ++c) {
        if (!std::isfinite(out[c])) throw SingularDriftError(i, k, "drift difference is not finite");
        per_coord[c][k] = out[c];
      }
    }
    double* row = cumulative.data() + i * nodes;
    for (std::size_t c = 0; c < d; ++c) {
      const auto cum = kh_energy(per_coord[c], H, dt);
      for (std::size_t k = 0; k < nodes; ++k) row[k] += cum[k];
    }
  });
  const TimeGrid report_grid = last == grid.n_steps() ? grid : grid.prefix(last);
  return detail::summarize_cumulative(report_grid, e.weights(), cumulative, nodes, 0.5);
}

/// fbm_path_entropy of the difference b1 - b2.
template <class Drift1, class Drift2>
EntropyReport fbm_girsanov_entropy(const Drift1& b1, const Drift2& b2, const Ensemble& e, double H, double up_to) {
  auto diff = [&](double t, const PathView& x, std::span<double> out) {
    std::vector<double> tmp(out.size());
    b1(t, x, out);
    b2(t, x, std::span<double>(tmp));
    for (std::size_t c = 0; c < out.size(); ++c) out[c] -= tmp[c];
  };
  return fbm_path_entropy(diff, e, H, up_to);
}

/// Ratio |K_H^{-1}(int u)(s)| / (s^{1/2-H} ||u||_{inf;[0,s]} + s^eps ||u||_{gamma;[0,s]})
/// at nodes 1..n with gamma = H - 1/2 + eps (H > 1/2). The bound holds with
/// constant C_H iff every ratio is <= C_H. Entry 0 is 0.
inline std::vector<double> kh_inverse_bound_ratio(std::span<const double> u, double H, double eps, double dt) {
  if (!(H > 0.5 && H < 1.0)) throw DomainError("kh_inverse_bound_ratio: requires H in (1/2, 1)");
  const double gamma = H - 0.5 + eps;
  if (!(eps > 0.0 && gamma <= 1.0)) throw DomainError("kh_inverse_bound_ratio: need eps > 0, H - 1/2 + eps <= 1");
  const std::size_t n = u.size() - 1;
  std::vector<double> U(n + 1, 0.0);
  for (std::size_t j = 0; j < n; ++j) U[j + 1] = U[j] + u[j] * dt;
  const auto v = kh_inverse(U, H, dt);
  std::vector<double> ratio(n + 1, 0.0);
  double sup = std::abs(u[0]);
  double hol = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    sup = std::max(sup, std::abs(u[i]));
    for (std::size_t j = 0; j < i; ++j) {
      hol = std::max(hol, std::abs(u[i] - u[j]) / std::pow(static_cast<double>(i - j) * dt, gamma));
    }
    const double s = static_cast<double>(i) * dt;
    const double rhs = std::pow(s, 0.5 - H) * sup + std::pow(s, eps) * hol;
    ratio[i] = rhs > 0.0 ? std::abs(v[i]) / rhs : 0.0;
  }
  return ratio;
}

}  // namespace mvlab
