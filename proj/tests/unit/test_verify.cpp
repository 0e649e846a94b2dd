#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mvlab/verify.hpp"

using namespace mvlab;

namespace {

MonteCarlo mc_of(std::size_t samples, double T, std::size_t n, std::uint64_t seed = 1) {
  MonteCarlo mc;
  mc.samples = samples;
  mc.grid = TimeGrid(T, n);
  mc.seed = seed;
  return mc;
}

/// Midpoint-rule integral of |x|^{-ap} over the ball of radius R in R^d, radially.
double radial_integral(std::size_t d, double ap, double R) {
  const std::size_t n = 200000;
  const double area = d == 1 ? 2.0 : d == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (i + 0.5) * R / n;
    s += std::pow(r, static_cast<double>(d) - 1.0 - ap);
  }
  return area * s * R / n;
}

}  // namespace

TEST(LpLq, NormsMatchQuadrature) {
  for (std::size_t d : {1u, 2u, 3u}) {
    const double a = 0.1, p = 4.0 * d, q = 8.0, T = 2.0, R = 1.5;
    const LpLqFunction fn = lplq::singular_power(d, a, p, q, T, R);
    const double numeric = std::pow(T, 1.0 / q) * std::pow(radial_integral(d, a * p, R), 1.0 / p);
    EXPECT_NEAR(fn.norm / numeric, 1.0, 1e-4) << "d=" << d;
    EXPECT_TRUE(fn.admissible());
  }
  const LpLqFunction box = lplq::indicator_box(2, 0.5, 8.0, 4.0, 3.0);
  EXPECT_NEAR(box.norm, std::pow(3.0, 0.25), 1e-14);
  const double x[2] = {0.4, -0.5};
  const double y[2] = {0.4, -0.51};
  EXPECT_EQ(box.f(0.0, x), 1.0);
  EXPECT_EQ(box.f(0.0, y), 0.0);
  EXPECT_THROW(lplq::singular_power(1, 0.5, 2.0, 4.0, 1.0), DomainError);
  EXPECT_FALSE(lplq::indicator_box(1, 1.0, 2.0, 2.0, 1.0).admissible());
  EXPECT_TRUE(lplq::constant(3, 1.0).admissible());
}

TEST(Krylov, ConstantFunctionIsExact) {
  const LpLqFunction fn = lplq::constant(2, 1.5);
  const KrylovReport rep = krylov_check(fn, {0.1, 0.2, 0.5, 1.0}, mc_of(10, 1.0, 100));
  ASSERT_EQ(rep.rows.size(), 4u);
  for (const auto& r : rep.rows) {
    EXPECT_NEAR(r.estimate, 2.25 * r.t, 1e-12);
    EXPECT_NEAR(r.std_error, 0.0, 1e-12);
    EXPECT_TRUE(r.within_bound);
  }
  ASSERT_TRUE(rep.fitted);
  EXPECT_NEAR(rep.fit.slope, 1.0, 1e-10);
  EXPECT_EQ(rep.exponent_bound, 1.0);
  EXPECT_EQ(rep.clamp_hits, 0u);
  EXPECT_EQ(rep.evaluations, 1000u);
}

TEST(Krylov, SingularPowerMatchesGaussianMoment) {
  // E|W_s|^{-2a} = s^{-a} 2^{-a} Gamma(1/2 - a) / Gamma(1/2); the estimator is a right-point sum
  const double a = 0.2;
  const LpLqFunction fn = lplq::singular_power(1, a, 4.0, 8.0, 1.0, 1e6);
  const MonteCarlo mc = mc_of(20000, 1.0, 200, 3);
  const KrylovReport rep = krylov_check(fn, {0.05, 0.1, 0.2, 0.5, 1.0}, mc);
  const double C = std::pow(2.0, -a) * std::tgamma(0.5 - a) / std::sqrt(std::numbers::pi);
  for (const auto& r : rep.rows) {
    double exact = 0.0;
    for (std::size_t k = 1; k <= mc.grid.node_of(r.t); ++k) exact += C * std::pow(mc.grid.time(k), -a) * mc.grid.dt();
    EXPECT_NEAR(r.estimate, exact, 4.0 * r.std_error) << "t=" << r.t;
    EXPECT_TRUE(r.within_bound);
  }
  EXPECT_NEAR(rep.exponent_bound, 0.5, 1e-15);
  EXPECT_GE(rep.fit.slope + rep.fit.half_width, rep.exponent_bound);
  EXPECT_NEAR(rep.fit.slope, 1.0 - a, 0.05);
}

TEST(Krylov, IndicatorOccupationTime) {
  const double R = 0.3;
  const LpLqFunction fn = lplq::indicator_box(1, R, 4.0, 4.0, 1.0);
  const MonteCarlo mc = mc_of(20000, 1.0, 100, 4);
  const KrylovReport rep = krylov_check(fn, {0.1, 0.5, 1.0}, mc);
  for (const auto& r : rep.rows) {
    double exact = 0.0;
    for (std::size_t k = 1; k <= mc.grid.node_of(r.t); ++k) exact += std::erf(R / std::sqrt(2.0 * mc.grid.time(k))) * mc.grid.dt();
    EXPECT_NEAR(r.estimate, exact, 4.0 * r.std_error);
  }
  EXPECT_FALSE(rep.fitted);
}

TEST(Krylov, ClampCountsNearOriginVisits) {
  const LpLqFunction fn = lplq::singular_power(1, 0.2, 4.0, 8.0, 1.0);
  MonteCarlo mc = mc_of(100, 1.0, 10);
  mc.clamp = 10.0;
  const KrylovReport rep = krylov_check(fn, {1.0}, mc);
  EXPECT_EQ(rep.clamp_hits, rep.evaluations);
  // every point is pushed out to radius 10, where f vanishes
  EXPECT_EQ(rep.rows[0].estimate, 0.0);
}

TEST(Krylov, Validation) {
  const MonteCarlo mc = mc_of(10, 1.0, 10);
  EXPECT_THROW(krylov_check(lplq::indicator_box(1, 1.0, 2.0, 2.0, 1.0), {1.0}, mc), DomainError);
  EXPECT_THROW(krylov_check(lplq::constant(1, 1.0), {0.15}, mc), DomainError);
  EXPECT_THROW(krylov_check(lplq::constant(1, 1.0), {}, mc), DomainError);
  MonteCarlo bad = mc;
  bad.start = {0.0, 0.0};
  EXPECT_THROW(krylov_check(lplq::constant(1, 1.0), {1.0}, bad), DomainError);
  bad = mc_of(1, 1.0, 10);
  EXPECT_THROW(krylov_check(lplq::constant(1, 1.0), {1.0}, bad), DomainError);
}

TEST(Khasminskii, ConstantFunctionIsExact) {
  const KhasminskiiReport rep = khasminskii_check(lplq::constant(1, 2.0), 0.1, mc_of(50, 1.5, 30));
  EXPECT_NEAR(rep.estimate, std::exp(0.1 * 4.0 * 1.5), 1e-12);
  EXPECT_NEAR(rep.relative_change, 0.0, 1e-14);
  EXPECT_FALSE(rep.diverged);
}

TEST(Khasminskii, IndicatorIsFiniteAndStable) {
  const LpLqFunction fn = lplq::indicator_box(1, 0.5, 4.0, 4.0, 1.0);
  const KhasminskiiReport rep = khasminskii_check(fn, 0.5, mc_of(5000, 1.0, 100, 9));
  EXPECT_FALSE(rep.diverged);
  EXPECT_GE(rep.estimate, 1.0);
  EXPECT_LE(rep.estimate, std::exp(0.5));
  EXPECT_LT(rep.relative_change, 0.1);
}

TEST(Khasminskii, OverflowIsReportedAsDivergence) {
  const KhasminskiiReport rep = khasminskii_check(lplq::constant(1, 1e3), 1.0, mc_of(4, 1.0, 4));
  EXPECT_TRUE(rep.diverged);
  EXPECT_TRUE(std::isinf(rep.estimate));
  EXPECT_THROW(khasminskii_check(lplq::constant(1, 1.0), 0.0, mc_of(4, 1.0, 4)), DomainError);
}

TEST(Bridge, OccupationDensityHasTotalMassDt) {
  // a = 0 with a huge radius makes g = 1, so every step integrates to dt
  const double dt = 1e-3;
  for (double x0 : {0.0, 1e-9, -0.004, 0.03, 0.5, -2.0}) {
    for (double dx : {0.0, 1e-7, 0.01, -0.05, 0.2}) {
      EXPECT_NEAR(detail::bridge_power_1d(0.0, 1e6, dt, x0, x0 + dx) / dt, 1.0, 1e-10) << x0 << ' ' << dx;
    }
  }
}

TEST(Bridge, PinnedAtOriginMatchesBetaIntegral) {
  // bridge 0 -> 0 has variance s(dt - s)/dt, so the step integral is C dt^{1-a} B(1-a, 1-a)
  const double dt = 1e-3;
  for (double a : {0.1, 0.2, 0.4}) {
    const double C = std::pow(2.0, -a) * std::tgamma(0.5 - a) / std::sqrt(std::numbers::pi);
    const double beta = std::tgamma(1.0 - a) * std::tgamma(1.0 - a) / std::tgamma(2.0 - 2.0 * a);
    const double exact = C * std::pow(dt, 1.0 - a) * beta;
    EXPECT_NEAR(detail::bridge_power_1d(a, 10.0, dt, 0.0, 0.0) / exact, 1.0, 1e-5) << "a=" << a;
  }
}

TEST(Bridge, StepIntegralIsContinuousAcrossTheFastPath) {
  const double dt = 1e-3, s = std::sqrt(dt);
  for (double eps : {-1e-9, 1e-9}) {
    const double x = 3.0 * s + eps;
    const double v = detail::bridge_power_1d(0.3, 5.0, dt, x, x + 0.01);
    const double ref = detail::bridge_power_1d(0.3, 5.0, dt, 3.0 * s, 3.0 * s + 0.01);
    EXPECT_NEAR(v / ref, 1.0, 2e-3);
  }
}

TEST(Bridge, TruncationEdgeSplitsTheMassInHalf) {
  // with a = 0 the step integral is the bridge time spent in [-R, R]; symmetric about R it is dt / 2
  const double dt = 1e-3, R = 1.0;
  for (double d : {0.0, 0.01, 0.05}) {
    EXPECT_NEAR(detail::bridge_power_1d(0.0, R, dt, R - d, R + d) / dt, 0.5, 1e-8) << d;
    EXPECT_NEAR(detail::bridge_power_1d(0.0, R, dt, -R + d, -R - d) / dt, 0.5, 1e-8) << d;
  }
  EXPECT_EQ(detail::bridge_power_1d(0.4, R, dt, 2.0, 2.1), 0.0);
}

TEST(Krylov, BridgeRuleMatchesContinuousGaussianMoment) {
  // E int_0^t |W_s|^{-2a} ds = C t^{1-a} / (1-a) with no discretization bias
  const double a = 0.4;
  const LpLqFunction fn = lplq::singular_power(1, a, 2.0, 8.0, 1.0, 1e6);
  MonteCarlo mc = mc_of(20000, 1.0, 100, 5);
  mc.bridge = true;
  const KrylovReport rep = krylov_check(fn, {0.05, 0.1, 0.2, 0.5, 1.0}, mc);
  const double C = std::pow(2.0, -a) * std::tgamma(0.5 - a) / std::sqrt(std::numbers::pi);
  for (const auto& r : rep.rows) {
    EXPECT_NEAR(r.estimate, C * std::pow(r.t, 1.0 - a) / (1.0 - a), 4.0 * r.std_error) << "t=" << r.t;
  }
  EXPECT_EQ(rep.clamp_hits, 0u);
  EXPECT_NEAR(rep.fit.slope, 1.0 - a, 0.03);
}

TEST(Khasminskii, BridgeRuleIsStableForSingularPower) {
  const LpLqFunction fn = lplq::singular_power(1, 0.4, 2.0, 8.0, 1.0, 1.0);
  MonteCarlo mc = mc_of(20000, 1.0, 200, 6);
  mc.bridge = true;
  const KhasminskiiReport rep = khasminskii_check(fn, 0.1, mc);
  EXPECT_FALSE(rep.diverged);
  EXPECT_GE(rep.estimate, 1.0);
  EXPECT_LT(rep.relative_change, 0.01);
  EXPECT_LT(rep.std_error, 0.01 * rep.estimate);
}

TEST(Bridge, RejectedWithoutAClosedForm) {
  MonteCarlo mc = mc_of(10, 1.0, 10);
  mc.bridge = true;
  EXPECT_THROW(krylov_check(lplq::indicator_box(1, 1.0, 8.0, 8.0, 1.0), {1.0}, mc), DomainError);
  EXPECT_THROW(khasminskii_check(lplq::singular_power(2, 0.4, 4.0, 8.0, 1.0), 0.1, mc), DomainError);
  EXPECT_NO_THROW(krylov_check(lplq::constant(1, 2.0), {1.0}, mc));
}

TEST(VerifyOutput, RowsAndQuoting) {
  EXPECT_EQ(csv_quote("{\"d\":1}"), "\"{\"\"d\"\":1}\"");
  const LpLqFunction fn = lplq::constant(1, 1.0);
  const KrylovReport kr = krylov_check(fn, {0.25, 0.5, 0.75, 1.0}, mc_of(4, 1.0, 4));
  const KhasminskiiReport kh = khasminskii_check(fn, 0.1, mc_of(4, 1.0, 4));
  std::ostringstream os;
  write_verify_header(os);
  write_verify_rows(os, fn, kr);
  write_verify_rows(os, fn, kh, 1.0);
  std::istringstream in(os.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 1u + 4 + 1 + 2);
  EXPECT_EQ(lines[0], "check,param_json,t,estimate,stderr,flag");
  EXPECT_EQ(lines[1].substr(0, 7), "krylov,");
  EXPECT_EQ(lines[5].substr(0, 16), "krylov_exponent,");
  EXPECT_EQ(lines[6].substr(lines[6].size() - 6), "finite");
  EXPECT_EQ(lines[7].substr(lines[7].size() - 6), "stable");
}
