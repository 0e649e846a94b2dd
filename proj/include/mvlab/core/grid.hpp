#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/core/errors.hpp"

namespace mvlab {

/// Uniform grid on [0, T]; node k sits at k * T / n_steps.
class TimeGrid {
 public:
  TimeGrid(double t_end, std::size_t n_steps) : t_end_(t_end), n_steps_(n_steps) {
    if (n_steps == 0) throw DomainError("TimeGrid: n_steps must be >= 1");
    if (!(t_end > 0.0) || !std::isfinite(t_end)) throw DomainError("TimeGrid: T must be positive and finite");
    dt_ = t_end / static_cast<double>(n_steps);
  }

  double t_end() const noexcept { return t_end_; }
  std::size_t n_steps() const noexcept { return n_steps_; }
  std::size_t nodes() const noexcept { return n_steps_ + 1; }
  double dt() const noexcept { return dt_; }
  double time(std::size_t k) const noexcept { return static_cast<double>(k) * dt_; }

  /// Nearest node to t; t must lie in [0, T].
  std::size_t snap(double t) const {
    const double slack = 1e-12 * t_end_;
    if (!(t >= -slack && t <= t_end_ + slack)) {
      throw DomainError("time " + std::to_string(t) + " outside [0, " + std::to_string(t_end_) + "]");
    }
    const double k = std::round(t / dt_);
    return std::min(static_cast<std::size_t>(std::max(k, 0.0)), n_steps_);
  }

  /// Index of the node at exactly t (up to rounding); no interpolation.
  std::size_t node_of(double t) const {
    const std::size_t k = snap(t);
    if (std::abs(time(k) - t) > 1e-9 * dt_) {
      throw DomainError("time " + std::to_string(t) + " is not a grid node");
    }
    return k;
  }

  /// The grid restricted to [0, time(node)].
  TimeGrid prefix(std::size_t node) const {
    if (node == 0 || node > n_steps_) throw DomainError("TimeGrid::prefix: node out of range");
    TimeGrid g = *this;
    g.n_steps_ = node;
    g.t_end_ = time(node);
    return g;
  }

  /// True when every node of `coarse` is a node of this grid.
  bool refines(const TimeGrid& coarse) const noexcept {
    return n_steps_ % coarse.n_steps_ == 0 && std::abs(t_end_ - coarse.t_end_) <= 1e-12 * t_end_;
  }

  friend bool operator==(const TimeGrid& a, const TimeGrid& b) noexcept {
    return a.n_steps_ == b.n_steps_ && a.t_end_ == b.t_end_;
  }

 private:
  double t_end_;
  std::size_t n_steps_;
  double dt_ = 0.0;
};

/// Read-only window onto a path's nodes 0..last (a non-anticipating prefix).
struct PathView {
  const double* data = nullptr;
  std::size_t dim = 0;
  std::size_t last = 0;
  double dt = 0.0;

  std::span<const double> at(std::size_t k) const noexcept { return {data + k * dim, dim}; }
  std::span<const double> current() const noexcept { return at(last); }
  double time(std::size_t k) const noexcept { return static_cast<double>(k) * dt; }
  double now() const noexcept { return time(last); }
};

class Path {
 public:
  Path(TimeGrid grid, std::size_t dim, std::vector<double> values)
      : grid_(grid), dim_(dim), values_(std::move(values)) {
    if (dim_ == 0) throw DomainError("Path: dim must be >= 1");
    if (values_.size() != grid_.nodes() * dim_) {
      throw DomainError("Path: expected " + std::to_string(grid_.nodes() * dim_) + " values, got " +
                        std::to_string(values_.size()));
    }
    for (double v : values_) {
      if (!std::isfinite(v)) throw NumericError("Path: non-finite value");
    }
  }

  const TimeGrid& grid() const noexcept { return grid_; }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const double> at(std::size_t node) const noexcept { return {values_.data() + node * dim_, dim_}; }
  std::span<const double> values() const noexcept { return values_; }

  PathView view(std::size_t last) const noexcept { return {values_.data(), dim_, last, grid_.dt()}; }
  PathView view() const noexcept { return view(grid_.n_steps()); }

  Path prefix(std::size_t node) const {
    std::vector<double> v(values_.begin(), values_.begin() + static_cast<std::ptrdiff_t>((node + 1) * dim_));
    return Path(grid_.prefix(node), dim_, std::move(v));
  }

 private:
  TimeGrid grid_;
  std::size_t dim_;
  std::vector<double> values_;
};

/// Weighted point cloud in R^d; the time-t marginal of an ensemble.
struct PointCloud {
  std::size_t dim = 0;
  std::vector<double> points;  // n * dim, row-major
  std::vector<double> weights;

  std::size_t size() const noexcept { return weights.size(); }
  std::span<const double> point(std::size_t i) const noexcept { return {points.data() + i * dim, dim}; }
};

/// M paths on one grid with nonnegative weights summing to one.
class Ensemble {
 public:
  explicit Ensemble(std::vector<Path> paths) : Ensemble(std::move(paths), {}) {}

  Ensemble(std::vector<Path> paths, std::vector<double> weights)
      : paths_(std::move(paths)), weights_(std::move(weights)) {
    if (paths_.empty()) throw DomainError("Ensemble: no paths");
    const TimeGrid& g = paths_.front().grid();
    const std::size_t d = paths_.front().dim();
    for (const Path& p : paths_) {
      if (!(p.grid() == g) || p.dim() != d) throw DomainError("Ensemble: paths must share grid and dimension");
    }
    if (weights_.empty()) {
      weights_.assign(paths_.size(), 1.0 / static_cast<double>(paths_.size()));
    } else {
      if (weights_.size() != paths_.size()) throw DomainError("Ensemble: weight count mismatch");
      double s = 0.0;
      for (double w : weights_) {
        if (!(w >= 0.0)) throw DomainError("Ensemble: negative weight");
        s += w;
      }
      if (std::abs(s - 1.0) > 1e-12) throw DomainError("Ensemble: weights must sum to 1");
    }
  }

  std::size_t size() const noexcept { return paths_.size(); }
  std::size_t dim() const noexcept { return paths_.front().dim(); }
  const TimeGrid& grid() const noexcept { return paths_.front().grid(); }
  const Path& path(std::size_t i) const noexcept { return paths_[i]; }
  const std::vector<Path>& paths() const noexcept { return paths_; }
  double weight(std::size_t i) const noexcept { return weights_[i]; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  bool uniform_weights() const noexcept {
    const double w0 = weights_.front();
    return std::all_of(weights_.begin(), weights_.end(), [w0](double w) { return w == w0; });
  }

 private:
  std::vector<Path> paths_;
  std::vector<double> weights_;
};

/// max_{s <= t} |x_s| over grid nodes; t snaps to the nearest node.
inline double sup_norm(const Path& path, double t) {
  const std::size_t last = path.grid().snap(t);
  double best = 0.0;
  for (std::size_t k = 0; k <= last; ++k) {
    const auto x = path.at(k);
    double s = 0.0;
    for (double v : x) s += v * v;
    best = std::max(best, std::sqrt(s));
  }
  return best;
}

inline double sup_norm(const PathView& x) {
  double best = 0.0;
  for (std::size_t k = 0; k <= x.last; ++k) {
    double s = 0.0;
    for (double v : x.at(k)) s += v * v;
    best = std::max(best, s);
  }
  return std::sqrt(best);
}

/// max over node pairs s < t in [a, b] of |x_t - x_s| / (t - s)^gamma.
inline double holder_norm(const Path& path, double gamma, double a, double b) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw DomainError("holder_norm: gamma must lie in (0, 1]");
  const TimeGrid& g = path.grid();
  const std::size_t ia = g.node_of(a);
  const std::size_t ib = g.node_of(b);
  if (ia >= ib) throw DomainError("holder_norm: empty interval");
  double best = 0.0;
  for (std::size_t i = ia; i <= ib; ++i) {
    const auto xi = path.at(i);
    for (std::size_t j = ia; j < i; ++j) {
      const auto xj = path.at(j);
      double s = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) s += (xi[c] - xj[c]) * (xi[c] - xj[c]);
      best = std::max(best, std::sqrt(s) / std::pow(g.time(i) - g.time(j), gamma));
    }
  }
  return best;
}

inline PointCloud marginal(const Ensemble& e, double t) {
  const std::size_t k = e.grid().node_of(t);
  PointCloud cloud;
  cloud.dim = e.dim();
  cloud.points.reserve(e.size() * e.dim());
  for (const Path& p : e.paths()) {
    const auto x = p.at(k);
    cloud.points.insert(cloud.points.end(), x.begin(), x.end());
  }
  cloud.weights = e.weights();
  return cloud;
}

/// Every path truncated at node t; weights preserved.
inline Ensemble project(const Ensemble& e, double t) {
  const std::size_t k = e.grid().node_of(t);
  if (k == e.grid().n_steps()) return e;
  if (k == 0) throw DomainError("project: t = 0 leaves a degenerate grid");
  std::vector<Path> out;
  out.reserve(e.size());
  for (const Path& p : e.paths()) out.push_back(p.prefix(k));
  return Ensemble(std::move(out), e.weights());
}

}  // namespace mvlab
