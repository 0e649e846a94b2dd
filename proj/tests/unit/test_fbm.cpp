#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "mvlab/fbm.hpp"

using namespace mvlab;

namespace {

std::vector<double> on_grid(std::size_t n, double T, const std::function<double(double)>& f) {
  std::vector<double> v(n + 1);
  for (std::size_t k = 0; k <= n; ++k) v[k] = f(T * static_cast<double>(k) / static_cast<double>(n));
  return v;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST(RhCov, Examples) {
  EXPECT_DOUBLE_EQ(rh_cov(1.0, 1.0, 0.75), 1.0);
  EXPECT_NEAR(rh_cov(0.3, 0.7, 0.5), 0.3, 1e-15);
  for (double H : {0.1, 0.5, 0.9}) EXPECT_EQ(rh_cov(0.0, 0.6, H), 0.0);
  EXPECT_THROW(rh_cov(0.1, 0.2, 1.0), DomainError);
  EXPECT_THROW(rh_cov(0.1, 0.2, 0.0), DomainError);
}

TEST(FbmSampler, BrownianFactorIsCumulativeSum) {
  const TimeGrid g(2.0, 16);
  const FbmSampler s(0.5, g, 1);
  const auto& L = s.cov_factor();
  for (Eigen::Index i = 0; i < L.rows(); ++i)
    for (Eigen::Index j = 0; j <= i; ++j) EXPECT_NEAR(L(i, j), std::sqrt(g.dt()), 1e-12);
  EXPECT_EQ(s.jitter(), 0.0);
}

TEST(FbmSampler, NodeZeroIsExactlyZero) {
  const FbmSampler s(0.3, TimeGrid(1.0, 32), 3);
  NormalSource n(make_stream(1, "test", 0));
  for (int r = 0; r < 20; ++r) {
    const Path p = s.sample(n);
    for (double v : p.at(0)) EXPECT_EQ(v, 0.0);
  }
}

TEST(FbmSampler, JitterBoundedAndFactorReproducesCovariance) {
  for (double H : {0.05, 0.25, 0.75, 0.95}) {
    const TimeGrid g(1.5, 128);
    const FbmSampler s(H, g, 1);
    EXPECT_LE(s.jitter(), 1e-10 * std::pow(g.t_end(), 2.0 * H));
    const Eigen::MatrixXd C = s.cov_factor() * s.cov_factor().transpose();
    for (Eigen::Index i = 0; i < C.rows(); i += 7)
      for (Eigen::Index j = 0; j <= i; j += 5)
        EXPECT_NEAR(C(i, j), rh_cov(g.time(i + 1), g.time(j + 1), H), 1e-9);
  }
}

TEST(FbmSampler, TerminalVarianceAndCovariance) {
  const TimeGrid g(1.0, 16);
  const std::size_t m = 10000;
  for (double H : {0.25, 0.5, 0.75}) {
    const Ensemble e = sample_fbm_ensemble(*fbm_sampler(H, g, 1), m, 42);
    const auto xT = mvlab::testing::node_values(e, g.n_steps());
    EXPECT_NEAR(mvlab::testing::sample_var(xT), 1.0, 0.05) << "H=" << H;
    std::size_t beyond3 = 0, total = 0;
    double worst = 0.0;
    for (std::size_t i = 1; i < g.nodes(); ++i) {
      const auto xi = mvlab::testing::node_values(e, i);
      for (std::size_t j = 1; j <= i; ++j) {
        const auto xj = mvlab::testing::node_values(e, j);
        std::vector<double> prod(m);
        for (std::size_t r = 0; r < m; ++r) prod[r] = xi[r] * xj[r];
        const double se = std::sqrt(mvlab::testing::sample_var(prod) / static_cast<double>(m));
        const double z = std::abs(mvlab::testing::sample_mean(prod) - rh_cov(g.time(i), g.time(j), H)) / se;
        worst = std::max(worst, z);
        beyond3 += z > 3.0;
        ++total;
      }
    }
    EXPECT_LT(worst, 4.5) << "H=" << H;
    EXPECT_LE(static_cast<double>(beyond3), 0.03 * static_cast<double>(total)) << "H=" << H;
  }
}

TEST(FbmSampler, BrownianIncrementsUncorrelated) {
  const TimeGrid g(1.0, 32);
  const Ensemble e = sample_fbm_ensemble(*fbm_sampler(0.5, g, 1), 10000, 7);
  double sxy = 0.0, sxx = 0.0;
  for (const Path& p : e.paths()) {
    for (std::size_t k = 1; k + 1 < g.nodes(); ++k) {
      const double a = p.at(k)[0] - p.at(k - 1)[0];
      const double b = p.at(k + 1)[0] - p.at(k)[0];
      sxy += a * b;
      sxx += a * a;
    }
  }
  EXPECT_LT(std::abs(sxy / sxx), 0.05);
}

TEST(FbmSampler, CacheReturnsSharedFactor) {
  const TimeGrid g(1.0, 24);
  EXPECT_EQ(fbm_sampler(0.3, g, 1).get(), fbm_sampler(0.3, g, 1).get());
  EXPECT_NE(fbm_sampler(0.3, g, 1).get(), fbm_sampler(0.31, g, 1).get());
}

TEST(FracIntegral, PowerRule) {
  const std::size_t n = 2048;
  const double dt = 1.0 / n;
  const auto zero = frac_integral(std::vector<double>(n + 1, 0.0), 0.4, dt);
  for (double v : zero) EXPECT_EQ(v, 0.0);
  const auto one = frac_integral(std::vector<double>(n + 1, 1.0), 0.5, dt);
  EXPECT_LT(rel_err(one[n], 1.0 / std::tgamma(1.5)), 0.01);
  EXPECT_NEAR(1.0 / std::tgamma(1.5), 1.1284, 1e-4);
  for (double alpha : {0.25, 0.3, 0.5}) {
    const auto f = on_grid(n, 1.0, [](double t) { return t; });
    const auto I = frac_integral(f, alpha, dt);
    for (std::size_t k = n / 8; k <= n; k += 97) {
      const double t = k * dt;
      EXPECT_LT(rel_err(I[k], std::tgamma(2.0) / std::tgamma(2.0 + alpha) * std::pow(t, 1.0 + alpha)), 0.01);
    }
  }
}

TEST(FracDerivative, PowerRuleAndInversion) {
  const std::size_t n = 2048;
  const double dt = 1.0 / n;
  const auto zero = frac_derivative(std::vector<double>(n + 1, 0.0), 0.3, dt);
  for (double v : zero) EXPECT_EQ(v, 0.0);
  const auto f = on_grid(n, 1.0, [](double t) { return t; });
  for (double alpha : {0.25, 0.3, 0.5}) {
    const auto D = frac_derivative(f, alpha, dt);
    for (std::size_t k = n / 10; k <= n; k += 101) {
      const double t = k * dt;
      EXPECT_LT(rel_err(D[k], std::pow(t, 1.0 - alpha) / std::tgamma(2.0 - alpha)), 0.01) << "alpha=" << alpha;
    }
  }
  const auto I = frac_integral(f, 0.3, dt);
  const auto back = frac_derivative(I, 0.3, dt);
  double worst = 0.0;
  for (std::size_t k = n / 4; k <= 3 * n / 4; ++k) worst = std::max(worst, rel_err(back[k], f[k]));
  EXPECT_LT(worst, 0.01);
  EXPECT_THROW(frac_derivative(on_grid(n, 1.0, [](double t) { return 1.0 + t; }), 0.3, dt), DomainError);
  EXPECT_THROW(frac_integral(f, 1.0, dt), DomainError);
}

TEST(KhInverse, BrownianCaseIsForwardDifference) {
  const std::size_t n = 128;
  const double dt = 1.0 / n;
  const auto lin = kh_inverse(on_grid(n, 1.0, [](double s) { return s; }), 0.5, dt);
  for (double v : lin) EXPECT_NEAR(v, 1.0, 1e-9);
  const auto h = on_grid(n, 1.0, [](double s) { return std::sin(5.0 * s) + s * s; });
  const auto k = kh_inverse(h, 0.5, dt);
  for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(k[j], (h[j + 1] - h[j]) / dt);
  EXPECT_EQ(k[n], (h[n] - h[n - 1]) / dt);
}

TEST(KhInverse, ZeroAndResolution) {
  for (double H : {0.2, 0.5, 0.8}) {
    for (double v : kh_inverse(std::vector<double>(65, 0.0), H, 1.0 / 64)) EXPECT_EQ(v, 0.0);
  }
  EXPECT_THROW(kh_inverse(std::vector<double>(64, 0.0), 0.3, 1.0 / 63), ResolutionError);
}

TEST(KhInverse, LinearFunctionClosedForm) {
  const std::size_t n = 2048;
  const double dt = 1.0 / n;
  const double c = 1.7;
  const auto h = on_grid(n, 1.0, [c](double s) { return c * s; });
  const auto rough = kh_inverse(h, 0.25, dt);
  const double k_rough = std::tgamma(1.25) / std::tgamma(1.5);
  EXPECT_NEAR(k_rough, 1.0228, 1e-4);
  const auto smooth = kh_inverse(h, 0.75, dt);
  const double k_smooth = std::tgamma(0.75) / std::tgamma(0.5);
  for (std::size_t j = n / 10; j <= n - n / 10; j += 37) {
    const double s = j * dt;
    EXPECT_LT(rel_err(rough[j], c * k_rough * std::pow(s, 0.25)), 0.02);
    EXPECT_LT(rel_err(smooth[j], c * k_smooth * std::pow(s, -0.25)), 0.02);
  }
}

TEST(KhInverse, Linear) {
  const std::size_t n = 256;
  const double dt = 2.0 / n;
  const auto h1 = on_grid(n, 2.0, [](double s) { return std::sin(3.0 * s); });
  const auto h2 = on_grid(n, 2.0, [](double s) { return s * s - 0.5 * s; });
  std::vector<double> mix(n + 1);
  for (std::size_t k = 0; k <= n; ++k) mix[k] = 2.5 * h1[k] - 0.75 * h2[k];
  for (double H : {0.2, 0.5, 0.7}) {
    const auto a = kh_inverse(h1, H, dt);
    const auto b = kh_inverse(h2, H, dt);
    const auto m = kh_inverse(mix, H, dt);
    for (std::size_t k = 0; k <= n; ++k) {
      const double expected = 2.5 * a[k] - 0.75 * b[k];
      EXPECT_NEAR(m[k], expected, 1e-11 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(KhInverse, HolderBoundWithCalibratedConstant) {
  const std::size_t n = 256;
  const double dt = 1.0 / n;
  const double H = 0.7;
  const double eps = 0.1;
  std::mt19937_64 eng(17);
  std::normal_distribution<double> coef;
  auto random_poly = [&] {
    const double a0 = coef(eng), a1 = coef(eng), a2 = coef(eng), a3 = coef(eng);
    return on_grid(n, 1.0, [=](double s) { return a0 + a1 * s + a2 * s * s + a3 * s * s * s; });
  };
  double c_fit = 0.0;
  for (int i = 0; i < 40; ++i) {
    const auto r = kh_inverse_bound_ratio(random_poly(), H, eps, dt);
    c_fit = std::max(c_fit, *std::max_element(r.begin(), r.end()));
  }
  ASSERT_GT(c_fit, 0.0);
  for (int i = 0; i < 40; ++i) {
    const auto r = kh_inverse_bound_ratio(random_poly(), H, eps, dt);
    EXPECT_LE(*std::max_element(r.begin(), r.end()), 1.25 * c_fit);
  }
  EXPECT_THROW(kh_inverse_bound_ratio(std::vector<double>(n + 1, 1.0), 0.4, eps, dt), DomainError);
}

TEST(FbmPathEntropy, ConstantDriftDifference) {
  const std::size_t n = 2048;
  const TimeGrid g(1.0, n);
  const Ensemble e(std::vector<Path>(2, Path(g, 1, std::vector<double>(n + 1, 0.0))));
  auto zero = [](double, const PathView&, std::span<double> out) { out[0] = 0.0; };
  auto unit = [](double, const PathView&, std::span<double> out) { out[0] = 1.0; };
  auto c = [](double, const PathView&, std::span<double> out) { out[0] = 0.6; };
  EXPECT_EQ(fbm_path_entropy(zero, e, 0.3, 1.0).final_value(), 0.0);
  EXPECT_NEAR(fbm_path_entropy(c, e, 0.5, 1.0).final_value(), 0.18, 1e-12);
  const double oracle = 0.5 * std::pow(std::tgamma(1.25) / std::tgamma(1.5), 2) / 1.5;
  EXPECT_NEAR(oracle, 0.3487, 1e-4);
  EXPECT_LT(rel_err(fbm_path_entropy(unit, e, 0.25, 1.0).final_value(), oracle), 0.03);
  const Ensemble coarse(std::vector<Path>(2, Path(TimeGrid(1.0, 32), 1, std::vector<double>(33, 0.0))));
  EXPECT_THROW(fbm_path_entropy(unit, coarse, 0.25, 1.0), ResolutionError);
}
