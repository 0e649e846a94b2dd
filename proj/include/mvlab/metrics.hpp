#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <vector>

#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"

namespace mvlab {

/// H(t) per grid node with path-wise Monte-Carlo standard errors.
struct EntropyReport {
  TimeGrid grid;
  std::vector<double> values;
  std::vector<double> std_error;

  double final_value() const { return values.back(); }
  double final_stderr() const { return std_error.back(); }

  void write_csv(std::ostream& os) const {
    os << "t,H,stderr\n";
    for (std::size_t k = 0; k < values.size(); ++k) {
      os << csv::num(grid.time(k)) << ',' << csv::num(values[k]) << ',' << csv::num(std_error[k]) << '\n';
    }
  }
};

namespace detail {

/// Weighted mean and standard error of per-path cumulative integrals.
/// `cumulative[i * nodes + k]` holds path i's integral up to node k.
inline EntropyReport summarize_cumulative(const TimeGrid& grid, std::span<const double> weights,
                                          const std::vector<double>& cumulative, std::size_t nodes, double scale) {
  EntropyReport r{grid, std::vector<double>(nodes, 0.0), std::vector<double>(nodes, 0.0)};
  const std::size_t m = weights.size();
  const double bessel = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 0.0;
  for (std::size_t k = 0; k < nodes; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += weights[i] * cumulative[i * nodes + k];
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double dev = cumulative[i * nodes + k] - mean;
      var += weights[i] * weights[i] * dev * dev;
    }
    r.values[k] = scale * mean;
    r.std_error[k] = scale * std::sqrt(var * bessel);
  }
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Discrete laws (exact formulas on mass vectors)

/// H(p | q) = sum p_i log(p_i / q_i); +inf when p is not absolutely continuous w.r.t. q.
inline double relative_entropy(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DomainError("relative_entropy: size mismatch");
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    h += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(h, 0.0);
}

inline double tv_masses(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DomainError("tv_masses: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

// ---------------------------------------------------------------------------
// Total variation on a fixed histogram

/// Axis-aligned histogram; points outside [lo, hi] fall into the boundary cell.
struct HistogramPartition {
  std::vector<double> lo;
  std::vector<double> hi;
  std::size_t bins = 32;

  std::size_t cell(std::span<const double> x) const {
    std::size_t index = 0;
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double u = (x[c] - lo[c]) / (hi[c] - lo[c]);
      const double b = std::floor(u * static_cast<double>(bins));
      const std::size_t ib = static_cast<std::size_t>(std::clamp(b, 0.0, static_cast<double>(bins - 1)));
      index = index * bins + ib;
    }
    return index;
  }
};

/// Default partition: `bins` per axis over the joint 1st-99th percentile range.
inline HistogramPartition default_partition(const PointCloud& mu, const PointCloud& nu, std::size_t bins = 32) {
  if (mu.size() == 0 || nu.size() == 0) throw DomainError("default_partition: empty measure");
  if (mu.dim != nu.dim) throw DomainError("default_partition: dimension mismatch");
  HistogramPartition part;
  part.bins = bins;
  for (std::size_t c = 0; c < mu.dim; ++c) {
    std::vector<double> v;
    v.reserve(mu.size() + nu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) v.push_back(mu.point(i)[c]);
    for (std::size_t i = 0; i < nu.size(); ++i) v.push_back(nu.point(i)[c]);
    std::sort(v.begin(), v.end());
    const auto pick = [&](double q) { return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1))]; };
    double lo = pick(0.01);
    double hi = pick(0.99);
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
    part.lo.push_back(lo);
    part.hi.push_back(hi);
  }
  return part;
}

/// Half the L1 distance between cell-mass vectors. This underestimates the
/// true total variation (it is the TV of the two pushforwards to cells).
inline double tv_distance(const PointCloud& mu, const PointCloud& nu, const HistogramPartition& part) {
  if (mu.size() == 0 || nu.size() == 0) throw DomainError("tv_distance: empty measure");
  if (mu.dim != nu.dim || part.lo.size() != mu.dim || part.hi.size() != mu.dim) {
    throw DomainError("tv_distance: dimension mismatch");
  }
  std::map<std::size_t, double> diff;
  for (std::size_t i = 0; i < mu.size(); ++i) diff[part.cell(mu.point(i))] += mu.weights[i];
  for (std::size_t i = 0; i < nu.size(); ++i) diff[part.cell(nu.point(i))] -= nu.weights[i];
  double s = 0.0;
  for (const auto& [cell, m] : diff) s += std::abs(m);
  return std::min(1.0, 0.5 * s);
}

inline double tv_distance(const PointCloud& mu, const PointCloud& nu) {
  return tv_distance(mu, nu, default_partition(mu, nu));
}

// ---------------------------------------------------------------------------
// Wasserstein-1

namespace detail {

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method,
/// O(n^3) with potentials). Returns the assignment row -> column.
inline std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double euclid(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}

}  // namespace detail

inline constexpr std::size_t kMaxAssignmentSize = 512;

/// Optimal transport cost with Euclidean ground metric. d = 1 integrates
/// |F_mu - F_nu| exactly (any weights); d > 1 solves the assignment problem
/// for equal-size uniform clouds of at most 512 points.
inline double wasserstein1(const PointCloud& mu, const PointCloud& nu) {
  if (mu.size() == 0 || nu.size() == 0) throw DomainError("wasserstein1: empty measure");
  if (mu.dim != nu.dim) throw DomainError("wasserstein1: dimension mismatch");
  if (mu.dim == 1) {
    struct Atom {
      double x;
      double w;
    };
    std::vector<Atom> atoms;
    atoms.reserve(mu.size() + nu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) atoms.push_back({mu.points[i], mu.weights[i]});
    for (std::size_t i = 0; i < nu.size(); ++i) atoms.push_back({nu.points[i], -nu.weights[i]});
    std::sort(atoms.begin(), atoms.end(), [](const Atom& a, const Atom& b) { return a.x < b.x; });
    double cdf_gap = 0.0, total = 0.0;
    for (std::size_t i = 0; i + 1 < atoms.size(); ++i) {
      cdf_gap += atoms[i].w;
      total += std::abs(cdf_gap) * (atoms[i + 1].x - atoms[i].x);
    }
    return total;
  }
  if (mu.size() != nu.size()) throw DomainError("wasserstein1: d > 1 requires equal sample counts");
  const std::size_t n = mu.size();
  if (n > kMaxAssignmentSize) {
    throw UnsupportedSizeError("wasserstein1: exact assignment limited to " + std::to_string(kMaxAssignmentSize) +
                               " points in d > 1");
  }
  const auto uniform = [n](const std::vector<double>& w) {
    return std::all_of(w.begin(), w.end(), [n](double x) { return std::abs(x - 1.0 / static_cast<double>(n)) < 1e-12; });
  };
  if (!uniform(mu.weights) || !uniform(nu.weights)) throw DomainError("wasserstein1: d > 1 requires uniform weights");
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = detail::euclid(mu.point(i), nu.point(j));
  const auto match = detail::hungarian(cost, n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + match[i]];
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Girsanov path entropy

/// H(P1[t] | P2[t]) = 1/2 E int_0^t |b1 - b2|^2 ds along paths sampled under b1,
/// as a left-Riemann sum per path. Both laws must share their initial law.
/// Drifts are callables (double t, const PathView& prefix, std::span<double> out).
template <class Drift1, class Drift2>
EntropyReport girsanov_entropy(const Drift1& b1, const Drift2& b2, const Ensemble& sample_law, double up_to) {
  const TimeGrid& grid = sample_law.grid();
  const std::size_t last = grid.node_of(up_to);
  const std::size_t nodes = last + 1;
  const std::size_t m = sample_law.size();
  const std::size_t d = sample_law.dim();
  const double dt = grid.dt();
  std::vector<double> cumulative(m * nodes, 0.0);
  parallel_for(m, [&](std::size_t i) {
    const Path& p = sample_law.path(i);
    std::vector<double> v1(d), v2(d);
    double acc = 0.0;
    double* row = cumulative.data() + i * nodes;
    row[0] = 0.0;
    for (std::size_t k = 0; k < last; ++k) {
      const PathView x = p.view(k);
      const double t = grid.time(k);
      b1(t, x, std::span<double>(v1));
      b2(t, x, std::span<double>(v2));
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = v1[c] - v2[c];
        s += diff * diff;
      }
      if (!std::isfinite(s)) throw SingularDriftError(i, k, "drift difference is not finite");
      acc += s * dt;
      row[k + 1] = acc;
    }
  });
  const TimeGrid report_grid = last == grid.n_steps() ? grid : grid.prefix(std::max<std::size_t>(last, 1));
  return detail::summarize_cumulative(report_grid, sample_law.weights(), cumulative, nodes, 0.5);
}

// ---------------------------------------------------------------------------
// Pinsker-type bounds

/// 2 (1 + log <nu, exp(|f|^2)>) H: the weighted Pinsker bound on |<nu - nu', f>|^2.
/// `f_sq` holds |f|^2 at each atom of nu.
inline double weighted_pinsker_bound(std::span<const double> f_sq, std::span<const double> weights, double entropy) {
  if (f_sq.size() != weights.size() || f_sq.empty()) throw DomainError("weighted_pinsker_bound: bad sample");
  if (!(entropy >= 0.0)) throw DomainError("weighted_pinsker_bound: H must be nonnegative");
  double moment = 0.0;
  for (std::size_t i = 0; i < f_sq.size(); ++i) {
    const double e = std::exp(f_sq[i]);
    if (!std::isfinite(e)) throw DivergentWeightError("weighted_pinsker_bound: exp(|f|^2) overflow");
    moment += weights[i] * e;
  }
  if (!std::isfinite(moment)) throw DivergentWeightError("weighted_pinsker_bound: exponential moment overflow");
  return 2.0 * (1.0 + std::log(moment)) * entropy;
}

/// Same bound with f evaluated on the atoms of a point cloud; f returns a scalar |f(x)|.
template <class F>
double weighted_pinsker_bound(F&& f, const PointCloud& nu, double entropy) {
  if (nu.size() == 0) throw DomainError("weighted_pinsker_bound: empty measure");
  std::vector<double> f_sq(nu.size());
  for (std::size_t i = 0; i < nu.size(); ++i) {
    const double v = f(nu.point(i));
    f_sq[i] = v * v;
  }
  return weighted_pinsker_bound(f_sq, nu.weights, entropy);
}

/// R_eps(mu, nu) = max_t log sum_ij w_i w_j exp(eps |b(t, x_i, y_j)|^2).
/// Returns +inf if any exponential overflows. The kernel is a callable
/// (double t, const PathView& x, const PathView& y, std::span<double> out).
template <class Kernel>
double exp_moment_R(const Ensemble& mu, const Ensemble& nu, Kernel&& b, double eps) {
  if (!(eps > 0.0)) throw DomainError("exp_moment_R: eps must be positive");
  if (!(mu.grid() == nu.grid()) || mu.dim() != nu.dim()) throw DomainError("exp_moment_R: mismatched ensembles");
  const TimeGrid& grid = mu.grid();
  const std::size_t d = mu.dim();
  std::vector<double> per_node(grid.nodes(), 0.0);
  parallel_for(grid.nodes(), [&](std::size_t k) {
    std::vector<double> out(d);
    const double t = grid.time(k);
    double total = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const PathView x = mu.path(i).view(k);
      double row = 0.0;
      for (std::size_t j = 0; j < nu.size(); ++j) {
        b(t, x, nu.path(j).view(k), std::span<double>(out));
        double s = 0.0;
        for (double v : out) s += v * v;
        row += nu.weight(j) * std::exp(eps * s);
      }
      total += mu.weight(i) * row;
    }
    per_node[k] = std::isfinite(total) ? std::log(total) : std::numeric_limits<double>::infinity();
  });
  return *std::max_element(per_node.begin(), per_node.end());
}

}  // namespace mvlab
