#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"

namespace mvlab {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// f(t, x) for a state x in R^d, written into `out`.
using StateFn = std::function<void(double t, std::span<const double> x, std::span<double> out)>;
/// b0(t, x) reading the path prefix x|[0,t].
using BaseDriftFn = std::function<void(double t, const PathView& x, std::span<double> out)>;
/// B(t, x_t, mu_t) for interactions that are nonlinear in the measure.
using MeasureDriftFn =
    std::function<void(double t, std::span<const double> x, const PointCloud& mu_t, std::span<double> out)>;

// ---------------------------------------------------------------------------
// Interaction kernels b(t, x, y), stored by structural form

namespace term {

/// b(t, x, y) = g(t, y_t).
struct Target {
  StateFn g;
};
/// b(t, x, y) = f(t, x_t).
struct Source {
  StateFn f;
};
/// b_i(t, x, y) = sum_r phi_{r,i}(t, x_t) psi_r(t, y_t); phi writes rank*d values (row r = phi_r).
struct Separable {
  std::size_t rank = 0;
  std::function<void(double t, std::span<const double> x, std::span<double> phi)> phi;
  StateFn psi;
};
struct StatePair {
  std::function<void(double t, std::span<const double> x, std::span<const double> y, std::span<double> out)> k;
};
/// b(t, x, y) = h(t, x_t - y_t) with |x_t - y_t| clamped from below at clamp_radius.
struct Difference {
  StateFn h;
  double clamp_radius = 1e-6;
};
struct PathPair {
  std::function<void(double t, const PathView& x, const PathView& y, std::span<double> out)> k;
};

}  // namespace term

using InteractionTerm =
    std::variant<term::Target, term::Source, term::Separable, term::StatePair, term::Difference, term::PathPair>;

/// Sum of kernel terms with a declared componentwise sup bound (inf if unbounded).
struct Interaction {
  std::vector<InteractionTerm> terms;
  double bound = kInf;

  bool empty() const noexcept { return terms.empty(); }
};

inline Interaction operator+(Interaction a, const Interaction& b) {
  a.terms.insert(a.terms.end(), b.terms.begin(), b.terms.end());
  a.bound = a.bound + b.bound;
  return a;
}

// ---------------------------------------------------------------------------
// DriftSpec: tagged description of (b0, b)

struct DriftSpec;

struct BoundedKernel {
  Interaction b;
  double bound = 1.0;
};
struct LinearGrowthPath {
  BaseDriftFn b0;
  Interaction b;
  double K = 1.0;
};
struct SublinearState {
  StateFn b0;
  double K = 1.0;
  double beta = 0.5;
};
struct SingularKernel {
  StateFn h;
  double p = 2.0;
  double q = 8.0;
  double clamp_radius = 1e-6;
};
struct Mixed {
  std::vector<DriftSpec> parts;
};
struct NonlinearTV {
  MeasureDriftFn B;
  double lipschitz = 1.0;
};

using DriftKind = std::variant<BoundedKernel, LinearGrowthPath, SublinearState, SingularKernel, Mixed, NonlinearTV>;

struct DriftSpec {
  std::size_t dim = 1;
  DriftKind kind;
  /// Interaction truncation level set by truncate(); 0 removes the interaction.
  std::optional<double> truncation;
};

/// (p, q) in the Krylov class: d/p + 2/q < 1 with p, q > 1.
inline bool krylov_admissible(std::size_t d, double p, double q) {
  return p > 1.0 && q > 1.0 && static_cast<double>(d) / p + 2.0 / q < 1.0;
}

inline DriftSpec bounded_kernel(std::size_t dim, Interaction b, double bound) {
  if (!(bound > 0.0)) throw DomainError("bounded_kernel: bound must be positive");
  b.bound = bound;
  return {dim, BoundedKernel{std::move(b), bound}, std::nullopt};
}

inline DriftSpec linear_growth(std::size_t dim, BaseDriftFn b0, Interaction b, double K) {
  if (!(K > 0.0)) throw DomainError("linear_growth: K must be positive");
  return {dim, LinearGrowthPath{std::move(b0), std::move(b), K}, std::nullopt};
}

inline DriftSpec sublinear_state(std::size_t dim, StateFn b0, double K, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw DomainError("sublinear_state: beta must lie in [0, 1)");
  return {dim, SublinearState{std::move(b0), K, beta}, std::nullopt};
}

inline DriftSpec singular_kernel(std::size_t dim, StateFn h, double p, double q, double clamp_radius = 1e-6) {
  if (!krylov_admissible(dim, p, q)) {
    throw DomainError("singular_kernel: (p, q) = (" + std::to_string(p) + ", " + std::to_string(q) +
                      ") violates d/p + 2/q < 1");
  }
  if (!(clamp_radius > 0.0)) throw DomainError("singular_kernel: clamp radius must be positive");
  return {dim, SingularKernel{std::move(h), p, q, clamp_radius}, std::nullopt};
}

inline DriftSpec mixed(std::vector<DriftSpec> parts) {
  if (parts.empty()) throw DomainError("mixed: no parts");
  const std::size_t d = parts.front().dim;
  for (const auto& p : parts) {
    if (p.dim != d) throw DomainError("mixed: parts disagree on dimension");
    if (p.truncation) throw DomainError("mixed: truncate the whole spec, not its parts");
  }
  return {d, Mixed{std::move(parts)}, std::nullopt};
}

inline DriftSpec nonlinear_tv(std::size_t dim, MeasureDriftFn B, double lipschitz) {
  return {dim, NonlinearTV{std::move(B), lipschitz}, std::nullopt};
}

/// Clips each output coordinate of the interaction to [-n, n]; b0 is left alone.
/// n = 0 yields the zero interaction.
inline DriftSpec truncate(DriftSpec spec, double n) {
  if (!(n >= 0.0)) throw DomainError("truncate: level must be nonnegative");
  spec.truncation = spec.truncation ? std::min(*spec.truncation, n) : n;
  return spec;
}

// ---------------------------------------------------------------------------
// Compiled form: flattened base drifts, interaction terms and nonlinear parts

struct CompiledDrift {
  std::size_t dim = 1;
  std::vector<BaseDriftFn> bases;
  std::vector<InteractionTerm> terms;
  double bound = 0.0;
  std::optional<double> clip;
  std::vector<MeasureDriftFn> nonlinear;

  bool clip_active() const noexcept { return clip.has_value() && *clip < bound; }

  bool all_terms_are(std::size_t index) const noexcept {
    return std::all_of(terms.begin(), terms.end(), [index](const InteractionTerm& t) { return t.index() == index; });
  }
};

namespace detail {

inline void add_spec(CompiledDrift& cd, const DriftSpec& spec) {
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, BoundedKernel>) {
          cd.terms.insert(cd.terms.end(), k.b.terms.begin(), k.b.terms.end());
          cd.bound += k.bound;
        } else if constexpr (std::is_same_v<K, LinearGrowthPath>) {
          if (k.b0) cd.bases.push_back(k.b0);
          cd.terms.insert(cd.terms.end(), k.b.terms.begin(), k.b.terms.end());
          cd.bound += k.b.bound;
        } else if constexpr (std::is_same_v<K, SublinearState>) {
          if (k.b0) {
            cd.bases.push_back([f = k.b0](double t, const PathView& x, std::span<double> out) { f(t, x.current(), out); });
          }
        } else if constexpr (std::is_same_v<K, SingularKernel>) {
          cd.terms.push_back(term::Difference{k.h, k.clamp_radius});
          cd.bound = kInf;
        } else if constexpr (std::is_same_v<K, Mixed>) {
          for (const auto& part : k.parts) add_spec(cd, part);
        } else if constexpr (std::is_same_v<K, NonlinearTV>) {
          cd.nonlinear.push_back(k.B);
        }
      },
      spec.kind);
}

}  // namespace detail

inline CompiledDrift compile(const DriftSpec& spec) {
  CompiledDrift cd;
  cd.dim = spec.dim;
  detail::add_spec(cd, spec);
  if (spec.truncation) {
    if (*spec.truncation == 0.0) {
      cd.terms.clear();
      cd.bound = 0.0;
    } else {
      cd.clip = spec.truncation;
    }
  }
  return cd;
}

// ---------------------------------------------------------------------------
// Evaluation against a measure

/// Clamp bookkeeping shared by all copies of a frozen drift.
struct ClampCounters {
  std::atomic<std::uint64_t> clamped{0};
  std::atomic<std::uint64_t> evaluations{0};
};

struct ClampStats {
  std::uint64_t clamped = 0;
  std::uint64_t evaluations = 0;

  double fraction() const noexcept {
    return evaluations == 0 ? 0.0 : static_cast<double>(clamped) / static_cast<double>(evaluations);
  }
};

/// The time-`node` slice of a family of paths with weights; `skip` excludes one member.
struct MeasureSlice {
  std::span<const double* const> paths;
  std::span<const double> weights;
  std::size_t dim = 1;
  std::size_t node = 0;
  double dt = 0.0;
  std::size_t skip = static_cast<std::size_t>(-1);

  std::span<const double> at(std::size_t j) const noexcept { return {paths[j] + node * dim, dim}; }
  PathView prefix(std::size_t j) const noexcept { return {paths[j], dim, node, dt}; }
};

/// Averages of the fast terms (targets and separable features) over a slice.
struct NodeSummary {
  std::vector<double> target;             // d: sum over Target terms (clipped sum when all-target clipping)
  std::vector<std::vector<double>> psi;   // per Separable term: rank values
};

namespace detail {

/// Work array kept inline for small sizes (avoids heap traffic in drift hot paths).
class Scratch {
 public:
  explicit Scratch(std::size_t n) : n_(n) {
    if (n > kInline) heap_.resize(n);
  }
  double* data() noexcept { return n_ > kInline ? heap_.data() : inline_.data(); }
  std::span<double> span() noexcept { return {data(), n_}; }
  operator std::span<double>() noexcept { return span(); }
  double& operator[](std::size_t i) noexcept { return data()[i]; }
  void zero() noexcept { std::fill(data(), data() + n_, 0.0); }

 private:
  static constexpr std::size_t kInline = 32;
  std::size_t n_;
  std::array<double, kInline> inline_;
  std::vector<double> heap_;
};

inline void clip_span(std::span<double> v, double n) {
  for (double& x : v) x = std::clamp(x, -n, n);
}

/// Writes one term's pair value b(t, x, y) into out.
inline void pair_value(const InteractionTerm& tm, double t, const PathView& x, const PathView& y,
                       std::span<double> out, std::span<double> scratch, std::uint64_t& clamped) {
  const std::size_t d = out.size();
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, term::Target>) {
          k.g(t, y.current(), out);
        } else if constexpr (std::is_same_v<K, term::Source>) {
          k.f(t, x.current(), out);
        } else if constexpr (std::is_same_v<K, term::Separable>) {
          Scratch phi(k.rank * d), psi(k.rank);
          k.phi(t, x.current(), phi);
          k.psi(t, y.current(), psi);
          for (std::size_t c = 0; c < d; ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < k.rank; ++r) s += phi[r * d + c] * psi[r];
            out[c] = s;
          }
        } else if constexpr (std::is_same_v<K, term::StatePair>) {
          k.k(t, x.current(), y.current(), out);
        } else if constexpr (std::is_same_v<K, term::Difference>) {
          const auto xs = x.current();
          const auto ys = y.current();
          double norm2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            scratch[c] = xs[c] - ys[c];
            norm2 += scratch[c] * scratch[c];
          }
          const double r = k.clamp_radius;
          if (norm2 < r * r) {
            ++clamped;
            const double norm = std::sqrt(norm2);
            if (norm > 0.0) {
              for (std::size_t c = 0; c < d; ++c) scratch[c] *= r / norm;
            } else {
              std::fill(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(d), 0.0);
              scratch[0] = r;
            }
          }
          k.h(t, scratch.first(d), out);
        } else {
          k.k(t, x, y, out);
        }
      },
      tm);
}

inline bool is_fast(const InteractionTerm& tm) noexcept {
  return std::holds_alternative<term::Target>(tm) || std::holds_alternative<term::Separable>(tm) ||
         std::holds_alternative<term::Source>(tm);
}

}  // namespace detail

/// True when averages can be served from a NodeSummary plus the x-only parts.
inline bool summarizable(const CompiledDrift& cd) {
  if (cd.clip_active()) return cd.all_terms_are(0) || cd.all_terms_are(1);
  return std::all_of(cd.terms.begin(), cd.terms.end(), detail::is_fast);
}

inline void init_summary(const CompiledDrift& cd, NodeSummary& acc) {
  if (acc.target.empty()) acc.target.assign(cd.dim, 0.0);
  if (acc.psi.empty()) {
    for (const auto& tm : cd.terms) {
      const auto* s = std::get_if<term::Separable>(&tm);
      acc.psi.emplace_back(s ? s->rank : 0, 0.0);
    }
  }
}

/// Adds w * (fast-term features of the point y) to `acc`.
inline void accumulate_summary(const CompiledDrift& cd, double t, std::span<const double> y, double w,
                               NodeSummary& acc, std::span<double> buf) {
  const std::size_t d = cd.dim;
  init_summary(cd, acc);
  if (cd.clip_active()) {
    if (!cd.all_terms_are(0)) return;
    std::vector<double> sum(d, 0.0);
    for (const auto& tm : cd.terms) {
      std::get<term::Target>(tm).g(t, y, buf.first(d));
      for (std::size_t c = 0; c < d; ++c) sum[c] += buf[c];
    }
    detail::clip_span(sum, *cd.clip);
    for (std::size_t c = 0; c < d; ++c) acc.target[c] += w * sum[c];
    return;
  }
  for (std::size_t i = 0; i < cd.terms.size(); ++i) {
    const auto& tm = cd.terms[i];
    if (const auto* g = std::get_if<term::Target>(&tm)) {
      g->g(t, y, buf.first(d));
      for (std::size_t c = 0; c < d; ++c) acc.target[c] += w * buf[c];
    } else if (const auto* s = std::get_if<term::Separable>(&tm)) {
      detail::Scratch psi(s->rank);
      s->psi(t, y, psi);
      for (std::size_t r = 0; r < s->rank; ++r) acc.psi[i][r] += w * psi[r];
    }
  }
}

inline NodeSummary summarize(const CompiledDrift& cd, double t, const MeasureSlice& mu) {
  NodeSummary acc;
  std::vector<double> buf(cd.dim);
  for (std::size_t j = 0; j < mu.paths.size(); ++j) {
    if (j == mu.skip) continue;
    accumulate_summary(cd, t, mu.at(j), mu.weights[j], acc, buf);
  }
  init_summary(cd, acc);
  return acc;
}

/// <mu, b(t, x, .)>: weighted average of the interaction over the slice.
/// With a summary, fast terms are read from it and the slice is only touched
/// by the remaining (pairwise) terms.
inline void average_interaction(const CompiledDrift& cd, double t, const PathView& x, const MeasureSlice& mu,
                                const NodeSummary* summary, std::span<double> out, ClampCounters* counters) {
  const std::size_t d = cd.dim;
  std::fill(out.begin(), out.end(), 0.0);
  if (cd.terms.empty()) return;
  detail::Scratch buf(d), scratch(d), pair(d);
  std::uint64_t clamped = 0;
  std::uint64_t evaluations = 0;

  if (cd.clip_active()) {
    const double n = *cd.clip;
    if (cd.all_terms_are(1)) {  // source-only: the average is the value itself
      for (const auto& tm : cd.terms) {
        std::get<term::Source>(tm).f(t, x.current(), buf);
        for (std::size_t c = 0; c < d; ++c) out[c] += buf[c];
      }
      detail::clip_span(out, n);
      return;
    }
    if (summary && cd.all_terms_are(0)) {
      std::copy(summary->target.begin(), summary->target.end(), out.begin());
      return;
    }
    for (std::size_t j = 0; j < mu.paths.size(); ++j) {
      if (j == mu.skip) continue;
      const PathView y = mu.prefix(j);
      pair.zero();
      for (const auto& tm : cd.terms) {
        detail::pair_value(tm, t, x, y, buf, scratch, clamped);
        for (std::size_t c = 0; c < d; ++c) pair[c] += buf[c];
      }
      ++evaluations;
      detail::clip_span(pair.span(), n);
      for (std::size_t c = 0; c < d; ++c) out[c] += mu.weights[j] * pair[c];
    }
  } else {
    bool summary_target_used = false;
    for (std::size_t i = 0; i < cd.terms.size(); ++i) {
      const auto& tm = cd.terms[i];
      if (std::holds_alternative<term::Source>(tm)) {
        std::get<term::Source>(tm).f(t, x.current(), buf);
        for (std::size_t c = 0; c < d; ++c) out[c] += buf[c];
        continue;
      }
      if (summary && std::holds_alternative<term::Target>(tm)) {
        if (!summary_target_used) {
          for (std::size_t c = 0; c < d; ++c) out[c] += summary->target[c];
          summary_target_used = true;
        }
        continue;
      }
      if (summary && std::holds_alternative<term::Separable>(tm)) {
        const auto& s = std::get<term::Separable>(tm);
        detail::Scratch phi(s.rank * d);
        s.phi(t, x.current(), phi);
        for (std::size_t c = 0; c < d; ++c) {
          double v = 0.0;
          for (std::size_t r = 0; r < s.rank; ++r) v += phi[r * d + c] * summary->psi[i][r];
          out[c] += v;
        }
        continue;
      }
      for (std::size_t j = 0; j < mu.paths.size(); ++j) {
        if (j == mu.skip) continue;
        detail::pair_value(tm, t, x, mu.prefix(j), buf, scratch, clamped);
        for (std::size_t c = 0; c < d; ++c) out[c] += mu.weights[j] * buf[c];
      }
      if (std::holds_alternative<term::Difference>(tm)) evaluations += mu.paths.size() - (mu.skip < mu.paths.size());
    }
  }
  if (counters && (clamped || evaluations)) {
    counters->clamped.fetch_add(clamped, std::memory_order_relaxed);
    counters->evaluations.fetch_add(evaluations, std::memory_order_relaxed);
  }
}

/// For every member i of `all` (weights ignored), writes
///   (1/(N-1)) sum_{j != i} b(t, x^i, x^j)
/// into out[i * d .. (i + 1) * d). N = 1 gives zero. Fast terms use the
/// total-minus-own identity, so the cost is O(N) when the drift is summarizable.
inline void leave_one_out_interaction(const CompiledDrift& cd, double t, const MeasureSlice& all,
                                      std::span<double> out, ClampCounters* counters = nullptr) {
  const std::size_t N = all.paths.size();
  const std::size_t d = cd.dim;
  std::fill(out.begin(), out.end(), 0.0);
  if (N < 2 || cd.terms.empty()) return;
  const double inv = 1.0 / static_cast<double>(N - 1);
  const std::vector<double> w(N, inv);
  MeasureSlice others = all;
  others.weights = w;
  detail::Scratch buf(d);
  if (summarizable(cd)) {
    NodeSummary total;
    init_summary(cd, total);
    for (std::size_t j = 0; j < N; ++j) accumulate_summary(cd, t, all.at(j), 1.0, total, buf);
    for (std::size_t i = 0; i < N; ++i) {
      NodeSummary own;
      accumulate_summary(cd, t, all.at(i), 1.0, own, buf);
      NodeSummary avg = total;
      for (std::size_t c = 0; c < d; ++c) avg.target[c] = (total.target[c] - own.target[c]) * inv;
      for (std::size_t q = 0; q < avg.psi.size(); ++q)
        for (std::size_t r = 0; r < avg.psi[q].size(); ++r) avg.psi[q][r] = (total.psi[q][r] - own.psi[q][r]) * inv;
      others.skip = i;
      average_interaction(cd, t, all.prefix(i), others, &avg, out.subspan(i * d, d), counters);
    }
  } else {
    for (std::size_t i = 0; i < N; ++i) {
      others.skip = i;
      average_interaction(cd, t, all.prefix(i), others, nullptr, out.subspan(i * d, d), counters);
    }
  }
}

namespace detail {

inline std::vector<const double*> path_pointers(const Ensemble& e) {
  std::vector<const double*> ptrs;
  ptrs.reserve(e.size());
  for (const Path& p : e.paths()) ptrs.push_back(p.values().data());
  return ptrs;
}

inline PointCloud slice_cloud(const MeasureSlice& mu) {
  PointCloud cloud;
  cloud.dim = mu.dim;
  double total = 0.0;
  for (std::size_t j = 0; j < mu.paths.size(); ++j) {
    if (j == mu.skip) continue;
    const auto y = mu.at(j);
    cloud.points.insert(cloud.points.end(), y.begin(), y.end());
    cloud.weights.push_back(mu.weights[j]);
    total += mu.weights[j];
  }
  if (total > 0.0)
    for (double& w : cloud.weights) w /= total;
  return cloud;
}

}  // namespace detail

/// <mu_t, b(t, x, .)> plus any measure-nonlinear part B(t, x_t, mu_t); b0 is excluded.
/// `x` is a path prefix ending at time t; t must be a node of mu's grid.
inline std::vector<double> eval_interaction(const DriftSpec& spec, double t, const PathView& x, const Ensemble& mu) {
  if (mu.dim() != spec.dim || x.dim != spec.dim) throw DomainError("eval_interaction: dimension mismatch");
  const CompiledDrift cd = compile(spec);
  const std::size_t node = mu.grid().node_of(t);
  const auto ptrs = detail::path_pointers(mu);
  const MeasureSlice slice{ptrs, mu.weights(), mu.dim(), node, mu.grid().dt()};
  std::vector<double> out(spec.dim), buf(spec.dim);
  average_interaction(cd, t, x, slice, nullptr, out, nullptr);
  if (!cd.nonlinear.empty()) {
    const PointCloud cloud = detail::slice_cloud(slice);
    for (const auto& B : cd.nonlinear) {
      B(t, x.current(), cloud, buf);
      for (std::size_t c = 0; c < spec.dim; ++c) out[c] += buf[c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frozen-measure drift b_mu(t, x) = b0(t, x) + <mu_t, b(t, x, .)>

struct FreezePolicy {
  /// 0 averages over the full ensemble; otherwise a fixed random subsample of this size.
  std::size_t subsample = 0;
  std::uint64_t seed = 0;
};

class FrozenDrift {
 public:
  FrozenDrift(const DriftSpec& spec, std::shared_ptr<const Ensemble> mu, FreezePolicy policy = {})
      : cd_(compile(spec)), mu_(std::move(mu)), counters_(std::make_shared<ClampCounters>()) {
    if (!mu_) throw DomainError("freeze: null measure");
    if (mu_->dim() != spec.dim) throw DomainError("freeze: dimension mismatch between drift and measure");
    if (policy.subsample > 0 && policy.subsample < mu_->size()) {
      std::vector<std::size_t> all(mu_->size()), pick;
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      Engine eng = make_stream(policy.seed, "freeze-subsample", 0);
      std::sample(all.begin(), all.end(), std::back_inserter(pick), policy.subsample, eng);
      double total = 0.0;
      for (std::size_t i : pick) {
        ptrs_.push_back(mu_->path(i).values().data());
        weights_.push_back(mu_->weight(i));
        total += mu_->weight(i);
      }
      for (double& w : weights_) w /= total;
    } else {
      ptrs_ = detail::path_pointers(*mu_);
      weights_ = mu_->weights();
    }
    const TimeGrid& g = mu_->grid();
    if (summarizable(cd_) && !cd_.terms.empty()) {
      summaries_.resize(g.nodes());
      parallel_for(g.nodes(), [&](std::size_t k) { summaries_[k] = summarize(cd_, g.time(k), slice(k)); });
    }
    if (!cd_.nonlinear.empty()) {
      clouds_.resize(g.nodes());
      parallel_for(g.nodes(), [&](std::size_t k) { clouds_[k] = detail::slice_cloud(slice(k)); });
    }
  }

  std::size_t dim() const noexcept { return cd_.dim; }
  const TimeGrid& grid() const noexcept { return mu_->grid(); }
  const Ensemble& measure() const noexcept { return *mu_; }
  std::shared_ptr<const Ensemble> measure_ptr() const noexcept { return mu_; }

  /// True when a solver on `solver_grid` only ever asks for nodes of the frozen grid.
  bool compatible(const TimeGrid& solver_grid) const noexcept { return mu_->grid().refines(solver_grid); }

  ClampStats clamp_stats() const noexcept { return {counters_->clamped.load(), counters_->evaluations.load()}; }

  void operator()(double t, const PathView& x, std::span<double> out) const {
    const std::size_t node = mu_->grid().node_of(t);
    detail::Scratch buf(cd_.dim);
    std::fill(out.begin(), out.end(), 0.0);
    for (const auto& b0 : cd_.bases) {
      b0(t, x, buf);
      for (std::size_t c = 0; c < cd_.dim; ++c) out[c] += buf[c];
    }
    if (!cd_.terms.empty()) {
      average_interaction(cd_, t, x, slice(node), summaries_.empty() ? nullptr : &summaries_[node], buf,
                          counters_.get());
      for (std::size_t c = 0; c < cd_.dim; ++c) out[c] += buf[c];
    }
    for (const auto& B : cd_.nonlinear) {
      B(t, x.current(), clouds_[node], buf);
      for (std::size_t c = 0; c < cd_.dim; ++c) out[c] += buf[c];
    }
  }

 private:
  MeasureSlice slice(std::size_t node) const {
    return {ptrs_, weights_, mu_->dim(), node, mu_->grid().dt()};
  }

  CompiledDrift cd_;
  std::shared_ptr<const Ensemble> mu_;
  std::vector<const double*> ptrs_;
  std::vector<double> weights_;
  std::vector<NodeSummary> summaries_;
  std::vector<PointCloud> clouds_;
  std::shared_ptr<ClampCounters> counters_;
};

inline FrozenDrift freeze(const DriftSpec& spec, std::shared_ptr<const Ensemble> mu, FreezePolicy policy = {}) {
  return FrozenDrift(spec, std::move(mu), policy);
}

inline FrozenDrift freeze(const DriftSpec& spec, const Ensemble& mu, FreezePolicy policy = {}) {
  return FrozenDrift(spec, std::make_shared<const Ensemble>(mu), policy);
}

/// Drift that only evaluates b0 (the measure plays no role).
class BaseOnlyDrift {
 public:
  explicit BaseOnlyDrift(const DriftSpec& spec) : cd_(compile(spec)) {}

  void operator()(double t, const PathView& x, std::span<double> out) const {
    detail::Scratch buf(cd_.dim);
    std::fill(out.begin(), out.end(), 0.0);
    for (const auto& b0 : cd_.bases) {
      b0(t, x, buf);
      for (std::size_t c = 0; c < cd_.dim; ++c) out[c] += buf[c];
    }
  }

 private:
  CompiledDrift cd_;
};

struct ZeroDrift {
  void operator()(double, const PathView&, std::span<double> out) const { std::fill(out.begin(), out.end(), 0.0); }
};

// ---------------------------------------------------------------------------
// Probe checks for the growth invariants

/// Largest ratio (|b0(t,x)| + |b(t,x,y)|) / (K (1 + ||x||_t + ||y||_t)) over all probe
/// pairs and nodes; a LinearGrowthPath spec satisfies its bound iff this is <= 1.
inline double linear_growth_ratio(const DriftSpec& spec, const Ensemble& probes) {
  const auto* lg = std::get_if<LinearGrowthPath>(&spec.kind);
  if (!lg) throw DomainError("linear_growth_ratio: spec is not LinearGrowthPath");
  const CompiledDrift cd = compile(spec);
  const std::size_t d = spec.dim;
  std::vector<double> b0v(d), bv(d), scratch(d), buf(d);
  double worst = 0.0;
  std::uint64_t clamped = 0;
  const TimeGrid& g = probes.grid();
  for (std::size_t k = 0; k < g.nodes(); ++k) {
    const double t = g.time(k);
    for (const Path& px : probes.paths()) {
      const PathView x = px.view(k);
      std::fill(b0v.begin(), b0v.end(), 0.0);
      for (const auto& b0 : cd.bases) {
        b0(t, x, buf);
        for (std::size_t c = 0; c < d; ++c) b0v[c] += buf[c];
      }
      double n0 = 0.0;
      for (double v : b0v) n0 += v * v;
      for (const Path& py : probes.paths()) {
        const PathView y = py.view(k);
        std::fill(bv.begin(), bv.end(), 0.0);
        for (const auto& tm : cd.terms) {
          detail::pair_value(tm, t, x, y, buf, scratch, clamped);
          for (std::size_t c = 0; c < d; ++c) bv[c] += buf[c];
        }
        if (cd.clip_active()) detail::clip_span(bv, *cd.clip);
        double nb = 0.0;
        for (double v : bv) nb += v * v;
        const double rhs = lg->K * (1.0 + sup_norm(x) + sup_norm(y));
        worst = std::max(worst, (std::sqrt(n0) + std::sqrt(nb)) / rhs);
      }
    }
  }
  return worst;
}

/// Largest |b_i(t, x, y)| over probe pairs and nodes (compare with a declared bound).
inline double interaction_sup(const DriftSpec& spec, const Ensemble& probes) {
  const CompiledDrift cd = compile(spec);
  const std::size_t d = spec.dim;
  std::vector<double> bv(d), scratch(d), buf(d);
  std::uint64_t clamped = 0;
  double worst = 0.0;
  const TimeGrid& g = probes.grid();
  for (std::size_t k = 0; k < g.nodes(); ++k) {
    for (const Path& px : probes.paths()) {
      for (const Path& py : probes.paths()) {
        std::fill(bv.begin(), bv.end(), 0.0);
        for (const auto& tm : cd.terms) {
          detail::pair_value(tm, g.time(k), px.view(k), py.view(k), buf, scratch, clamped);
          for (std::size_t c = 0; c < d; ++c) bv[c] += buf[c];
        }
        if (cd.clip_active()) detail::clip_span(bv, *cd.clip);
        for (double v : bv) worst = std::max(worst, std::abs(v));
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Built-in kernels

namespace kernels {

/// sin(x_i - y_i) per coordinate, as sin x cos y - cos x sin y. Bounded by 1.
inline Interaction sine(std::size_t d) {
  term::Separable s;
  s.rank = 2 * d;
  s.phi = [d](double, std::span<const double> x, std::span<double> phi) {
    std::fill(phi.begin(), phi.end(), 0.0);
    for (std::size_t c = 0; c < d; ++c) {
      phi[(2 * c) * d + c] = std::sin(x[c]);
      phi[(2 * c + 1) * d + c] = -std::cos(x[c]);
    }
  };
  s.psi = [d](double, std::span<const double> y, std::span<double> psi) {
    for (std::size_t c = 0; c < d; ++c) {
      psi[2 * c] = std::cos(y[c]);
      psi[2 * c + 1] = std::sin(y[c]);
    }
  };
  return {{s}, 1.0};
}

/// y_t: the mean-field mean.
inline Interaction mean_field(std::size_t) {
  return {{term::Target{[](double, std::span<const double> y, std::span<double> out) {
            std::copy(y.begin(), y.end(), out.begin());
          }}},
          kInf};
}

/// -(x - y) = -x + y: linear attraction towards the population.
inline Interaction linear_attraction(std::size_t d) {
  Interaction b = mean_field(d);
  b.terms.push_back(term::Source{[](double, std::span<const double> x, std::span<double> out) {
    for (std::size_t c = 0; c < x.size(); ++c) out[c] = -x[c];
  }});
  return b;
}

/// -arctan(x_i - y_i): saturated attraction, bounded by pi/2.
inline Interaction arctan_attraction(std::size_t) {
  return {{term::StatePair{[](double, std::span<const double> x, std::span<const double> y, std::span<double> out) {
            for (std::size_t c = 0; c < x.size(); ++c) out[c] = -std::atan(x[c] - y[c]);
          }}},
          std::acos(0.0)};
}

/// tanh(y_i): depends on the other particle only. Bounded by 1.
inline Interaction tanh_target(std::size_t) {
  return {{term::Target{[](double, std::span<const double> y, std::span<double> out) {
            for (std::size_t c = 0; c < y.size(); ++c) out[c] = std::tanh(y[c]);
          }}},
          1.0};
}

/// tanh(x_i): depends on the particle itself only. Bounded by 1.
inline Interaction tanh_source(std::size_t) {
  return {{term::Source{[](double, std::span<const double> x, std::span<double> out) {
            for (std::size_t c = 0; c < x.size(); ++c) out[c] = std::tanh(x[c]);
          }}},
          1.0};
}

/// h(z) = |z|^{-a} 1_{|z| <= radius} in every coordinate (Krylov-class singularity).
inline StateFn singular_power(double a, double radius = 1.0) {
  return [a, radius](double, std::span<const double> z, std::span<double> out) {
    double n2 = 0.0;
    for (double v : z) n2 += v * v;
    const double n = std::sqrt(n2);
    const double v = n <= radius ? std::pow(n, -a) : 0.0;
    std::fill(out.begin(), out.end(), v);
  };
}

}  // namespace kernels

namespace bases {

inline BaseDriftFn zero() { return {}; }

/// -theta x_t (Ornstein-Uhlenbeck restoring force).
inline BaseDriftFn ou(double theta) {
  return [theta](double, const PathView& x, std::span<double> out) {
    const auto v = x.current();
    for (std::size_t c = 0; c < v.size(); ++c) out[c] = -theta * v[c];
  };
}

inline BaseDriftFn constant(std::vector<double> c) {
  return [c = std::move(c)](double, const PathView&, std::span<double> out) {
    std::copy(c.begin(), c.end(), out.begin());
  };
}

/// K sign(x_i) |x_i|^beta with beta in [0, 1).
inline StateFn sublinear_power(double K, double beta) {
  return [K, beta](double, std::span<const double> x, std::span<double> out) {
    for (std::size_t c = 0; c < x.size(); ++c) out[c] = K * std::copysign(std::pow(std::abs(x[c]), beta), x[c]);
  };
}

/// K * running maximum of |x|: a path-dependent linear-growth drift.
inline BaseDriftFn running_max(double K) {
  return [K](double, const PathView& x, std::span<double> out) { std::fill(out.begin(), out.end(), K * sup_norm(x)); };
}

}  // namespace bases

namespace nonlinear {

/// B(t, x, mu) = L tanh(mu({y_1 > 0})) in every coordinate; TV-Lipschitz with constant L.
inline MeasureDriftFn positive_mass(double L) {
  return [L](double, std::span<const double>, const PointCloud& mu, std::span<double> out) {
    double mass = 0.0;
    for (std::size_t j = 0; j < mu.size(); ++j)
      if (mu.point(j)[0] > 0.0) mass += mu.weights[j];
    std::fill(out.begin(), out.end(), L * std::tanh(mass));
  };
}

}  // namespace nonlinear

}  // namespace mvlab
