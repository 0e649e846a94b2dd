#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mvlab/core/grid.hpp"

namespace mvlab::testing {

/// Scalar path with x_k = f(t_k).
inline Path path_of(const TimeGrid& g, const std::function<double(double)>& f) {
  std::vector<double> v(g.nodes());
  for (std::size_t k = 0; k < g.nodes(); ++k) v[k] = f(g.time(k));
  return Path(g, 1, std::move(v));
}

/// Ensemble of constant scalar paths, one per value.
inline Ensemble constant_paths(const TimeGrid& g, const std::vector<double>& values,
                               std::vector<double> weights = {}) {
  std::vector<Path> paths;
  for (double v : values) paths.push_back(path_of(g, [v](double) { return v; }));
  return Ensemble(std::move(paths), std::move(weights));
}

inline double sample_mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double sample_var(const std::vector<double>& x) {
  const double m = sample_mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Values of coordinate c at node k across the ensemble.
inline std::vector<double> node_values(const Ensemble& e, std::size_t k, std::size_t c = 0) {
  std::vector<double> out(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) out[i] = e.path(i).at(k)[c];
  return out;
}

}  // namespace mvlab::testing
