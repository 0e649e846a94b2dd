#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "mvlab/core/rng.hpp"
#include "mvlab/metrics.hpp"

using namespace mvlab;
using mvlab::testing::constant_paths;

namespace {

PointCloud cloud_1d(std::vector<double> x, std::vector<double> w = {}) {
  PointCloud c;
  c.dim = 1;
  if (w.empty()) w.assign(x.size(), 1.0 / static_cast<double>(x.size()));
  c.points = std::move(x);
  c.weights = std::move(w);
  return c;
}

PointCloud cloud_nd(std::size_t d, std::vector<double> pts) {
  PointCloud c;
  c.dim = d;
  const std::size_t n = pts.size() / d;
  c.points = std::move(pts);
  c.weights.assign(n, 1.0 / static_cast<double>(n));
  return c;
}

/// Brute-force W1 over all permutations for tiny uniform clouds.
double brute_w1(const PointCloud& a, const PointCloud& b) {
  std::vector<std::size_t> perm(a.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < a.dim; ++c) d2 += std::pow(a.point(i)[c] - b.point(perm[i])[c], 2);
      s += std::sqrt(d2);
    }
    best = std::min(best, s / static_cast<double>(a.size()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Standard Brownian paths from 0.
Ensemble brownian(const TimeGrid& g, std::size_t m, std::uint64_t seed) {
  std::vector<Path> paths;
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> n;
  const double s = std::sqrt(g.dt());
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> v(g.nodes(), 0.0);
    for (std::size_t k = 1; k < g.nodes(); ++k) v[k] = v[k - 1] + s * n(eng);
    paths.emplace_back(g, 1, std::move(v));
  }
  return Ensemble(std::move(paths));
}

std::vector<double> random_simplex(std::mt19937_64& eng, std::size_t n) {
  std::exponential_distribution<double> e;
  std::vector<double> p(n);
  for (double& v : p) v = e(eng);
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

TEST(TvDistance, Examples) {
  const PointCloud a = cloud_1d({0.1, 0.5, 0.9});
  HistogramPartition part{{0.0}, {1.0}, 4};
  EXPECT_EQ(tv_distance(a, a, part), 0.0);
  EXPECT_DOUBLE_EQ(tv_distance(cloud_1d({0.1}), cloud_1d({0.9}), part), 1.0);
  HistogramPartition two{{0.0}, {2.0}, 2};
  EXPECT_NEAR(tv_distance(cloud_1d({0.5, 1.5}, {0.3, 0.7}), cloud_1d({0.5, 1.5}, {0.7, 0.3}), two), 0.4, 1e-15);
  EXPECT_THROW(tv_distance(PointCloud{1, {}, {}}, a, part), DomainError);
}

TEST(TvDistance, MetricPropertiesOnFixedPartition) {
  std::mt19937_64 eng(5);
  std::normal_distribution<double> n;
  HistogramPartition part{{-2.0}, {2.0}, 8};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PointCloud> c;
    for (int j = 0; j < 3; ++j) {
      std::vector<double> x(20);
      for (double& v : x) v = n(eng) + 0.3 * j;
      c.push_back(cloud_1d(x));
    }
    const double ab = tv_distance(c[0], c[1], part);
    EXPECT_DOUBLE_EQ(ab, tv_distance(c[1], c[0], part));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_LE(tv_distance(c[0], c[2], part), ab + tv_distance(c[1], c[2], part) + 1e-15);
  }
}

TEST(Wasserstein1, Examples) {
  EXPECT_DOUBLE_EQ(wasserstein1(cloud_1d({1.5}), cloud_1d({-2.0})), 3.5);
  EXPECT_EQ(wasserstein1(cloud_1d({0.3, 0.1, 2.0}), cloud_1d({2.0, 0.3, 0.1})), 0.0);
  EXPECT_DOUBLE_EQ(wasserstein1(cloud_1d({0.0, 1.0}), cloud_1d({0.0, 2.0})), 0.5);
  EXPECT_DOUBLE_EQ(wasserstein1(cloud_nd(2, {0, 0}), cloud_nd(2, {3, 4})), 5.0);
}

TEST(Wasserstein1, UnsupportedSizeInHigherDimension) {
  std::vector<double> pts(2 * (kMaxAssignmentSize + 1), 0.0);
  EXPECT_THROW(wasserstein1(cloud_nd(2, pts), cloud_nd(2, pts)), UnsupportedSizeError);
}

TEST(Wasserstein1, MatchesBruteForceAndMetricAxioms) {
  std::mt19937_64 eng(9);
  std::normal_distribution<double> n;
  for (std::size_t d : {1u, 2u, 3u}) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t m = 2 + trial % 6;
      std::vector<PointCloud> c;
      for (int j = 0; j < 3; ++j) {
        std::vector<double> x(m * d);
        for (double& v : x) v = n(eng);
        c.push_back(cloud_nd(d, x));
      }
      const double ab = wasserstein1(c[0], c[1]);
      EXPECT_NEAR(ab, brute_w1(c[0], c[1]), 1e-12);
      EXPECT_NEAR(ab, wasserstein1(c[1], c[0]), 1e-12);
      EXPECT_NEAR(wasserstein1(c[0], c[0]), 0.0, 1e-15);
      EXPECT_LE(wasserstein1(c[0], c[2]), ab + wasserstein1(c[1], c[2]) + 1e-12);
    }
  }
}

TEST(Pinsker, RandomDiscreteLaws) {
  std::mt19937_64 eng(2024);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + trial % 2;
    const auto p = random_simplex(eng, n);
    const auto q = random_simplex(eng, n);
    const double h = relative_entropy(p, q);
    const double tv = tv_masses(p, q);
    if (tv > std::sqrt(2.0 * h)) ++violations;
    // sharp constant for the half-L1 normalization
    if (tv > std::sqrt(0.5 * h) + 1e-15) ++violations;
  }
  EXPECT_EQ(violations, 0u);
}

TEST(WeightedPinsker, RandomDiscreteLaws) {
  std::mt19937_64 eng(77);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + trial % 2;
    const auto p = random_simplex(eng, n);
    const auto q = random_simplex(eng, n);
    std::vector<double> f(n), f_sq(n);
    double lhs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      f[i] = u(eng);
      f_sq[i] = f[i] * f[i];
      lhs += (p[i] - q[i]) * f[i];
    }
    if (lhs * lhs > weighted_pinsker_bound(f_sq, q, relative_entropy(p, q)) + 1e-14) ++violations;
  }
  EXPECT_EQ(violations, 0u);
}

TEST(WeightedPinsker, Examples) {
  const std::vector<double> w{0.5, 0.5};
  EXPECT_DOUBLE_EQ(weighted_pinsker_bound(std::vector<double>{0.0, 0.0}, w, 0.3), 0.6);
  EXPECT_EQ(weighted_pinsker_bound(std::vector<double>{1.0, 4.0}, w, 0.0), 0.0);
  EXPECT_THROW(weighted_pinsker_bound(std::vector<double>{1e6, 0.0}, w, 0.1), DivergentWeightError);

  std::mt19937_64 eng(31);
  std::normal_distribution<double> n(0.0, std::sqrt(0.5));
  std::vector<double> x(1000000);
  for (double& v : x) v = n(eng);
  const double bound = weighted_pinsker_bound([](std::span<const double> y) { return y[0] * std::sqrt(0.5); },
                                              cloud_1d(x), 1.0);
  EXPECT_NEAR(bound, 2.0 * (1.0 + std::log(std::sqrt(2.0))), 0.02 * bound);
}

TEST(ExpMomentR, Examples) {
  const TimeGrid g(1.0, 1);
  const Ensemble e = constant_paths(g, {0.0, 1.0, 2.0});
  auto zero = [](double, const PathView&, const PathView&, std::span<double> out) { out[0] = 0.0; };
  auto one = [](double, const PathView&, const PathView&, std::span<double> out) { out[0] = 1.0; };
  EXPECT_DOUBLE_EQ(exp_moment_R(e, e, zero, 0.3), 0.0);
  EXPECT_NEAR(exp_moment_R(e, e, one, 0.5), 0.5, 1e-15);
  auto huge = [](double, const PathView&, const PathView&, std::span<double> out) { out[0] = 1e10; };
  EXPECT_TRUE(std::isinf(exp_moment_R(e, e, huge, 1.0)));

  std::mt19937_64 eng(3);
  std::normal_distribution<double> n;
  std::vector<double> x(3000);
  for (double& v : x) v = n(eng);
  const Ensemble gauss = constant_paths(g, x);
  auto state = [](double, const PathView& a, const PathView&, std::span<double> out) { out[0] = a.current()[0]; };
  EXPECT_NEAR(exp_moment_R(gauss, gauss, state, 0.1), -0.5 * std::log(0.8), 0.01);
}

TEST(GirsanovEntropy, IdenticalDriftsGiveZero) {
  const TimeGrid g(1.0, 64);
  const Ensemble e = brownian(g, 200, 1);
  auto b = [](double t, const PathView& x, std::span<double> out) { out[0] = std::sin(x.current()[0]) + t; };
  const EntropyReport r = girsanov_entropy(b, b, e, 1.0);
  for (double v : r.values) EXPECT_EQ(v, 0.0);
}

TEST(GirsanovEntropy, ConstantShift) {
  const TimeGrid g(1.0, 512);
  const Ensemble e = brownian(g, 100, 2);
  auto c = [](double, const PathView&, std::span<double> out) { out[0] = 1.0; };
  auto z = [](double, const PathView&, std::span<double> out) { out[0] = 0.0; };
  const EntropyReport r = girsanov_entropy(c, z, e, 1.0);
  EXPECT_NEAR(r.final_value(), 0.5, 1e-12);
  EXPECT_NEAR(r.values[256], 0.25, 1e-12);
}

TEST(GirsanovEntropy, StateDependentMatchesBrownianSecondMoment) {
  const TimeGrid g(1.0, 512);
  const Ensemble e = brownian(g, 10000, 3);
  auto x = [](double, const PathView& p, std::span<double> out) { out[0] = p.current()[0]; };
  auto z = [](double, const PathView&, std::span<double> out) { out[0] = 0.0; };
  const EntropyReport r = girsanov_entropy(x, z, e, 1.0);
  // left Riemann sum of s over the grid, times 1/2
  const double exact = 0.5 * 0.5 * (1.0 - g.dt());
  EXPECT_NEAR(r.final_value(), exact, 3.0 * r.final_stderr());
  EXPECT_NEAR(r.final_value(), 0.25, 0.02);
  // nonnegative and nondecreasing within 3 standard errors
  for (std::size_t k = 0; k < r.values.size(); ++k) {
    EXPECT_GE(r.values[k], -3.0 * r.std_error[k]);
    if (k > 0) {
      EXPECT_GE(r.values[k], r.values[k - 1] - 3.0 * r.std_error[k]);
    }
  }
}

TEST(GirsanovEntropy, NonFiniteDriftNamesPathAndNode) {
  const TimeGrid g(1.0, 8);
  const Ensemble e = constant_paths(g, {0.0, 1.0, 2.0});
  auto bad = [](double t, const PathView& x, std::span<double> out) {
    out[0] = (x.current()[0] == 1.0 && t >= 0.5) ? NAN : 0.0;
  };
  auto z = [](double, const PathView&, std::span<double> out) { out[0] = 0.0; };
  try {
    girsanov_entropy(bad, z, e, 1.0);
    FAIL() << "no exception";
  } catch (const SingularDriftError& err) {
    EXPECT_EQ(err.path_id(), 1u);
    EXPECT_EQ(err.node(), 4u);
  }
}
