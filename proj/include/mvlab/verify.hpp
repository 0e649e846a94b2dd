#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "mvlab/chaos.hpp"
#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"
#include "mvlab/drifts.hpp"

namespace mvlab {

/// Closed-form test function f(t, x) with its L^q_t L^p_x norm on [0, T] x R^d.
struct LpLqFunction {
  std::string name;
  std::string params;  // JSON object text describing the parameters
  std::size_t dim = 1;
  double p = kInf;
  double q = kInf;
  double norm = 0.0;
  /// Spatially constant functions are not in L^p(R^d); their norm is not used.
  bool norm_waived = false;
  std::function<double(double t, std::span<const double> x)> f;
  /// E[int_{t0}^{t0+dt} |f|^2 ds | W_{t0} = x0, W_{t0+dt} = x1]; empty when no closed form is known.
  std::function<double(double t0, double dt, std::span<const double> x0, std::span<const double> x1)> bridge;

  bool admissible() const { return krylov_admissible(dim, p, q); }
};

namespace detail {

/// e^{u^2} erfc(u) for u >= 0.
inline double scaled_erfc(double u) {
  if (u < 25.0) return std::exp(u * u) * std::erfc(u);
  const double r = 1.0 / (u * u);
  return (1.0 - 0.5 * r + 0.75 * r * r) / (u * std::sqrt(std::numbers::pi));
}

/// Bridge-conditioned int over one step of g(y) = |y|^{-2a} 1_{|y| <= R} in d = 1.
/// The expected occupation density of a Brownian bridge from x0 to x1 over time dt is
/// sqrt(pi dt / 2) e^{u0^2} erfc(u(y)), u(y) = (|y - x0| + |y - x1|) / sqrt(2 dt), u0 = |x1 - x0| / sqrt(2 dt):
/// flat between the endpoints, erfc tails outside. Near the origin the flat part integrates in closed
/// form and the tails go through w = sign(y)|y|^{1-2a}, which turns g(y) dy into dw / (1 - 2a).
/// Away from it g is smooth: trapezoid plus the bridge variance term, minus the part beyond R.
inline double bridge_power_1d(double a, double R, double dt, double x0, double x1) {
  using boost::math::quadrature::gauss;
  const double s = std::sqrt(dt);
  const double reach = 4.5 * s;  // tail density below e^{-40} of the flat part
  const double lo = std::min(x0, x1), hi = std::max(x0, x1);
  if (lo - reach > R || hi + reach < -R) return 0.0;
  const double b = 1.0 - 2.0 * a;
  const double u0 = (hi - lo) / (std::numbers::sqrt2 * s);
  const double k = std::sqrt(0.5 * std::numbers::pi) * s;
  const bool moderate = u0 < 25.0;
  const double lift = moderate ? k * std::exp(u0 * u0) : 0.0;
  const auto density = [&](double y) {
    const double u = (std::abs(y - x0) + std::abs(y - x1)) / (std::numbers::sqrt2 * s);
    return moderate ? lift * std::erfc(u) : k * scaled_erfc(u) * std::exp((u0 - u) * (u0 + u));
  };
  const auto g = [&](double y) { return std::pow(std::abs(y), -2.0 * a); };

  if (lo > 3.0 * s || hi < -3.0 * s) {
    const double m = 0.5 * (x0 + x1), d = x1 - x0;
    const double g2 = 2.0 * a * (2.0 * a + 1.0) * std::pow(std::abs(m), -2.0 * a - 2.0);
    double v = 0.5 * dt * (g(x0) + g(x1)) + g2 * dt * (dt - d * d) / 12.0;
    const double edge = lo > 0.0 ? std::abs(R - x0) + std::abs(R - x1) : std::abs(R + x0) + std::abs(R + x1);
    if (edge < 6.0 * std::numbers::sqrt2 * s) {  // beyond that erfc < 3e-17
      const double ya = lo > 0.0 ? R : lo - reach, yb = lo > 0.0 ? hi + reach : -R;
      double cuts[4] = {ya, std::clamp(lo, ya, yb), std::clamp(hi, ya, yb), yb};
      const auto h = [&](double y) { return g(y) * density(y); };
      for (int i = 0; i < 3; ++i) {
        if (cuts[i + 1] > cuts[i]) v -= gauss<double, 20>::integrate(h, cuts[i], cuts[i + 1]);
      }
    }
    return std::max(v, 0.0);
  }

  const auto w_of = [&](double y) {
    y = std::clamp(y, -R, R);
    return std::copysign(std::pow(std::abs(y), b), y);
  };
  const auto piece = [&](double ya, double yb) {
    const double wa = w_of(ya), wb = w_of(yb);
    if (!(wb > wa)) return 0.0;
    const auto h = [&](double w) { return density(std::copysign(std::pow(std::abs(w), 1.0 / b), w)); };
    return gauss<double, 20>::integrate(h, wa, wb) / b;
  };
  const auto tail = [&](double ya, double yb) {
    ya = std::max(ya, -R);
    yb = std::min(yb, R);
    if (!(yb > ya)) return 0.0;
    if (ya < 0.0 && yb > 0.0) return piece(ya, 0.0) + piece(0.0, yb);
    return piece(ya, yb);
  };
  return k * scaled_erfc(u0) * (w_of(hi) - w_of(lo)) / b + tail(lo - reach, lo) + tail(hi, hi + reach);
}

}  // namespace detail

namespace lplq {

/// Surface area of the unit sphere in R^d.
inline double sphere_area(std::size_t d) {
  const double h = 0.5 * static_cast<double>(d);
  return 2.0 * std::pow(std::numbers::pi, h) / std::tgamma(h);
}

/// |x|^{-a} 1_{|x| <= R}, in L^p iff a p < d; norm T^{1/q} (S_{d-1} R^{d-ap} / (d - ap))^{1/p}.
inline LpLqFunction singular_power(std::size_t d, double a, double p, double q, double T, double R = 1.0) {
  if (!(a * p < static_cast<double>(d))) throw DomainError("singular_power: need a p < d for integrability");
  LpLqFunction fn;
  fn.name = "singular_power";
  std::ostringstream os;
  os << "{\"d\":" << d << ",\"a\":" << csv::num(a) << ",\"p\":" << csv::num(p) << ",\"q\":" << csv::num(q)
     << ",\"R\":" << csv::num(R) << "}";
  fn.params = os.str();
  fn.dim = d;
  fn.p = p;
  fn.q = q;
  const double dd = static_cast<double>(d);
  fn.norm = std::pow(T, 1.0 / q) * std::pow(sphere_area(d) * std::pow(R, dd - a * p) / (dd - a * p), 1.0 / p);
  fn.f = [a, R](double, std::span<const double> x) {
    double n2 = 0.0;
    for (double v : x) n2 += v * v;
    const double n = std::sqrt(n2);
    return n <= R ? std::pow(n, -a) : 0.0;
  };
  if (d == 1 && 2.0 * a < 1.0) {
    fn.bridge = [a, R](double, double dt, std::span<const double> x0, std::span<const double> x1) {
      return detail::bridge_power_1d(a, R, dt, x0[0], x1[0]);
    };
  }
  return fn;
}

/// 1_{[-R, R]^d}; norm T^{1/q} (2R)^{d/p}.
inline LpLqFunction indicator_box(std::size_t d, double R, double p, double q, double T) {
  LpLqFunction fn;
  fn.name = "indicator_box";
  std::ostringstream os;
  os << "{\"d\":" << d << ",\"R\":" << csv::num(R) << ",\"p\":" << csv::num(p) << ",\"q\":" << csv::num(q) << "}";
  fn.params = os.str();
  fn.dim = d;
  fn.p = p;
  fn.q = q;
  fn.norm = std::pow(T, 1.0 / q) * std::pow(2.0 * R, static_cast<double>(d) / p);
  fn.f = [R](double, std::span<const double> x) {
    for (double v : x)
      if (std::abs(v) > R) return 0.0;
    return 1.0;
  };
  return fn;
}

/// f = c everywhere (norm waived).
inline LpLqFunction constant(std::size_t d, double c) {
  LpLqFunction fn;
  fn.name = "constant";
  fn.params = "{\"d\":" + std::to_string(d) + ",\"c\":" + csv::num(c) + "}";
  fn.dim = d;
  fn.norm = kInf;
  fn.norm_waived = true;
  fn.f = [c](double, std::span<const double>) { return c; };
  fn.bridge = [c](double, double dt, std::span<const double>, std::span<const double>) { return c * c * dt; };
  return fn;
}

}  // namespace lplq

// ---------------------------------------------------------------------------
// Krylov estimate

struct KrylovRow {
  double t = 0.0;
  double estimate = 0.0;
  double std_error = 0.0;
  bool within_bound = true;
};

struct KrylovReport {
  std::vector<KrylovRow> rows;
  RateFit fit;  // log lhs vs log t (needs >= 4 positive rows)
  bool fitted = false;
  /// 1 - 2/q - d/p: the t-exponent of the bound on the squared integrand.
  double exponent_bound = 0.0;
  double c_fit = 0.0;
  std::uint64_t clamp_hits = 0;
  std::uint64_t evaluations = 0;
};

struct MonteCarlo {
  std::size_t samples = 100000;
  TimeGrid grid{1.0, 1000};
  std::uint64_t seed = 0;
  /// |x| below this radius is moved out to it before evaluating f.
  double clamp = 1e-8;
  /// Integrate each step against the Brownian-bridge occupation density (f.bridge)
  /// instead of the right-point rule; no clamping is needed then.
  bool bridge = false;
  std::vector<double> start;  // empty: origin
};

namespace detail {

/// sum_{k=1}^{K} |f(t_k, x0 + W_{t_k})|^2 dt for one Brownian path, recorded at
/// every node (right-point rule, s = 0 skipped; or the bridge rule when mc.bridge).
inline void squared_integral(const LpLqFunction& fn, const MonteCarlo& mc, std::size_t path,
                             std::vector<double>& cum, std::uint64_t& hits, const std::string& module) {
  const std::size_t d = fn.dim;
  const std::size_t n = mc.grid.n_steps();
  const double dt = mc.grid.dt();
  const double sq = std::sqrt(dt);
  NormalSource normal(make_stream(mc.seed, module, path));
  std::vector<double> w(d, 0.0), x(d), prev(d);
  for (std::size_t c = 0; c < d; ++c) x[c] = mc.start.empty() ? 0.0 : mc.start[c];
  cum.assign(n + 1, 0.0);
  for (std::size_t k = 1; k <= n; ++k) {
    prev = x;
    double n2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      w[c] += sq * normal();
      x[c] = (mc.start.empty() ? 0.0 : mc.start[c]) + w[c];
      n2 += x[c] * x[c];
    }
    if (mc.bridge) {
      cum[k] = cum[k - 1] + fn.bridge(mc.grid.time(k - 1), dt, prev, x);
      continue;
    }
    if (n2 < mc.clamp * mc.clamp) {
      ++hits;
      const double nn = std::sqrt(n2);
      if (nn > 0.0) {
        for (double& v : x) v *= mc.clamp / nn;
      } else {
        std::fill(x.begin(), x.end(), 0.0);
        x[0] = mc.clamp;
      }
    }
    const double v = fn.f(mc.grid.time(k), x);
    cum[k] = cum[k - 1] + v * v * dt;
  }
}

inline void check_start(const LpLqFunction& fn, const MonteCarlo& mc) {
  if (!mc.start.empty() && mc.start.size() != fn.dim) throw DomainError("start point has the wrong dimension");
  if (mc.samples < 2) throw DomainError("need at least 2 Monte-Carlo samples");
  if (mc.bridge && !fn.bridge) throw DomainError(fn.name + " has no bridge quadrature");
}

}  // namespace detail

/// E int_0^t |f(s, x0 + W_s)|^2 ds for each t in t_values (grid nodes), the OLS
/// exponent in t, and a flag per t for lhs <= C_fit t^{1-2/q-d/p} ||f||^2 with
/// C_fit calibrated at the largest t.
inline KrylovReport krylov_check(const LpLqFunction& fn, const std::vector<double>& t_values, const MonteCarlo& mc) {
  if (!fn.admissible()) throw DomainError("krylov_check: (p, q) violates d/p + 2/q < 1");
  detail::check_start(fn, mc);
  if (t_values.empty()) throw DomainError("krylov_check: no times");
  std::vector<std::size_t> nodes;
  for (double t : t_values) nodes.push_back(mc.grid.node_of(t));
  const std::size_t m = mc.samples;
  std::vector<double> at_t(m * nodes.size());
  std::vector<std::uint64_t> hits(m, 0);
  parallel_for(m, [&](std::size_t i) {
    std::vector<double> cum;
    detail::squared_integral(fn, mc, i, cum, hits[i], "krylov");
    for (std::size_t j = 0; j < nodes.size(); ++j) at_t[i * nodes.size() + j] = cum[nodes[j]];
  });
  KrylovReport rep;
  rep.exponent_bound = 1.0 - 2.0 / fn.q - static_cast<double>(fn.dim) / fn.p;
  for (auto h : hits) rep.clamp_hits += h;
  rep.evaluations = static_cast<std::uint64_t>(m) * mc.grid.n_steps();
  std::vector<double> col(m);
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    for (std::size_t i = 0; i < m; ++i) col[i] = at_t[i * nodes.size() + j];
    const Estimate e = mean_and_stderr(col);
    rep.rows.push_back({mc.grid.time(nodes[j]), e.value, e.std_error, true});
  }
  std::vector<double> xs, ys;
  for (const auto& r : rep.rows) {
    if (r.estimate > 0.0 && r.t > 0.0) {
      xs.push_back(r.t);
      ys.push_back(r.estimate);
    }
  }
  if (xs.size() >= 4) {
    rep.fit = rate_fit(xs, ys);
    rep.fitted = true;
  }
  std::size_t largest = 0;
  for (std::size_t j = 1; j < rep.rows.size(); ++j)
    if (rep.rows[j].t > rep.rows[largest].t) largest = j;
  const double norm_sq = fn.norm_waived ? 1.0 : fn.norm * fn.norm;
  const KrylovRow& ref = rep.rows[largest];
  if (ref.t > 0.0 && norm_sq > 0.0) {
    rep.c_fit = ref.estimate / (std::pow(ref.t, rep.exponent_bound) * norm_sq);
    for (auto& r : rep.rows) {
      const double bound = rep.c_fit * std::pow(r.t, rep.exponent_bound) * norm_sq;
      r.within_bound = r.estimate <= bound * (1.0 + 1e-12) + 3.0 * r.std_error;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Khasminskii estimate

struct KhasminskiiReport {
  double lambda = 0.0;
  double estimate = 0.0;        // at 2M samples
  double std_error = 0.0;
  double estimate_half = 0.0;   // at M samples
  double relative_change = 0.0;
  bool diverged = false;
  std::uint64_t clamp_hits = 0;
};

/// E exp(lambda int_0^T |f(s, x0 + W_s)|^2 ds) from mc.samples and 2 mc.samples paths
/// (the larger run extends the smaller one).
inline KhasminskiiReport khasminskii_check(const LpLqFunction& fn, double lambda, const MonteCarlo& mc) {
  if (!fn.admissible()) throw DomainError("khasminskii_check: (p, q) violates d/p + 2/q < 1");
  if (!(lambda > 0.0)) throw DomainError("khasminskii_check: lambda must be positive");
  detail::check_start(fn, mc);
  const std::size_t m2 = 2 * mc.samples;
  std::vector<double> vals(m2);
  std::vector<std::uint64_t> hits(m2, 0);
  parallel_for(m2, [&](std::size_t i) {
    std::vector<double> cum;
    detail::squared_integral(fn, mc, i, cum, hits[i], "khasminskii");
    vals[i] = std::exp(lambda * cum.back());
  });
  KhasminskiiReport rep;
  rep.lambda = lambda;
  for (auto h : hits) rep.clamp_hits += h;
  for (double v : vals) {
    if (!std::isfinite(v)) {
      rep.diverged = true;
      rep.estimate = rep.estimate_half = std::numeric_limits<double>::infinity();
      rep.relative_change = std::numeric_limits<double>::infinity();
      rep.std_error = std::numeric_limits<double>::infinity();
      return rep;
    }
  }
  const Estimate full = mean_and_stderr(vals);
  const Estimate half = mean_and_stderr(std::vector<double>(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(mc.samples)));
  rep.estimate = full.value;
  rep.std_error = full.std_error;
  rep.estimate_half = half.value;
  rep.relative_change = std::abs(full.value - half.value) / half.value;
  if (!std::isfinite(rep.estimate)) rep.diverged = true;
  return rep;
}

/// `check,param_json,t,estimate,stderr,flag` rows.
inline void write_verify_header(std::ostream& os) { os << "check,param_json,t,estimate,stderr,flag\n"; }

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_verify_rows(std::ostream& os, const LpLqFunction& fn, const KrylovReport& rep) {
  for (const auto& r : rep.rows) {
    os << "krylov," << csv_quote(fn.params) << ',' << csv::num(r.t) << ',' << csv::num(r.estimate) << ','
       << csv::num(r.std_error) << ',' << (r.within_bound ? "ok" : "bound_violated") << '\n';
  }
  if (rep.fitted) {
    os << "krylov_exponent," << csv_quote(fn.params) << ",," << csv::num(rep.fit.slope) << ','
       << csv::num(rep.fit.half_width) << ",fit\n";
  }
}

inline void write_verify_rows(std::ostream& os, const LpLqFunction& fn, const KhasminskiiReport& rep,
                              double T) {
  os << "khasminskii," << csv_quote(fn.params) << ',' << csv::num(T) << ',' << csv::num(rep.estimate) << ','
     << csv::num(rep.std_error) << ',' << (rep.diverged ? "diverged" : "finite") << '\n';
  os << "khasminskii_stability," << csv_quote(fn.params) << ',' << csv::num(T) << ','
     << csv::num(rep.relative_change) << ",," << (rep.relative_change < 0.1 ? "stable" : "unstable") << '\n';
}

}  // namespace mvlab
