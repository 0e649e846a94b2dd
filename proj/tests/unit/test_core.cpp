#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "mvlab/core/csv.hpp"
#include "mvlab/core/errors.hpp"
#include "mvlab/core/grid.hpp"
#include "mvlab/core/parallel.hpp"
#include "mvlab/core/rng.hpp"

using namespace mvlab;
using mvlab::testing::constant_paths;
using mvlab::testing::path_of;

TEST(TimeGrid, NodesAreExactMultiplesOfStep) {
  const TimeGrid g(1.0, 8);
  EXPECT_EQ(g.nodes(), 9u);
  EXPECT_DOUBLE_EQ(g.dt(), 0.125);
  for (std::size_t k = 0; k < g.nodes(); ++k) EXPECT_EQ(g.time(k), static_cast<double>(k) * 0.125);
  EXPECT_THROW(TimeGrid(1.0, 0), DomainError);
  EXPECT_THROW(TimeGrid(-1.0, 4), DomainError);
}

TEST(TimeGrid, NodeLookup) {
  const TimeGrid g(1.0, 10);
  EXPECT_EQ(g.node_of(0.3), 3u);
  EXPECT_EQ(g.snap(0.31), 3u);
  EXPECT_THROW(g.node_of(0.31), DomainError);
  EXPECT_THROW(g.snap(1.5), DomainError);
  EXPECT_TRUE(TimeGrid(1.0, 20).refines(g));
  EXPECT_FALSE(TimeGrid(1.0, 15).refines(g));
}

TEST(Path, RejectsNonFiniteAndWrongLength) {
  const TimeGrid g(1.0, 2);
  EXPECT_THROW(Path(g, 1, {0.0, 1.0}), DomainError);
  EXPECT_THROW(Path(g, 1, {0.0, NAN, 1.0}), NumericError);
}

TEST(Ensemble, WeightsMustSumToOne) {
  const TimeGrid g(1.0, 2);
  EXPECT_NO_THROW(constant_paths(g, {1.0, 2.0}, {0.25, 0.75}));
  EXPECT_THROW(constant_paths(g, {1.0, 2.0}, {0.25, 0.7}), DomainError);
  EXPECT_THROW(constant_paths(g, {1.0, 2.0}, {-0.5, 1.5}), DomainError);
  const Ensemble e = constant_paths(g, {1.0, 2.0, 3.0, 4.0});
  for (double w : e.weights()) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(Ensemble, RejectsMixedGrids) {
  std::vector<Path> paths{path_of(TimeGrid(1.0, 2), [](double) { return 0.0; }),
                          path_of(TimeGrid(1.0, 4), [](double) { return 0.0; })};
  EXPECT_THROW(Ensemble(std::move(paths)), DomainError);
}

TEST(SupNorm, Examples) {
  const TimeGrid g(1.0, 100);
  EXPECT_DOUBLE_EQ(sup_norm(path_of(g, [](double) { return 3.0; }), 1.0), 3.0);
  EXPECT_NEAR(sup_norm(path_of(g, [](double s) { return s; }), 0.5), 0.5, 1e-15);
  EXPECT_EQ(sup_norm(path_of(g, [](double) { return 0.0; }), 0.7), 0.0);
  EXPECT_THROW(sup_norm(path_of(g, [](double) { return 0.0; }), 1.5), DomainError);
}

TEST(SupNorm, NondecreasingInTime) {
  const TimeGrid g(1.0, 64);
  const Path p = path_of(g, [](double s) { return std::sin(9.0 * s) * std::exp(s); });
  double prev = 0.0;
  for (std::size_t k = 0; k < g.nodes(); ++k) {
    const double v = sup_norm(p, g.time(k));
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(HolderNorm, Examples) {
  const TimeGrid g(1.0, 64);
  for (double gamma : {0.2, 0.5, 1.0}) {
    EXPECT_NEAR(holder_norm(path_of(g, [](double s) { return -2.5 * s; }), gamma, 0.0, 1.0), 2.5, 1e-12);
  }
  EXPECT_EQ(holder_norm(path_of(g, [](double) { return 4.0; }), 0.5, 0.0, 1.0), 0.0);
  EXPECT_NEAR(holder_norm(path_of(g, [](double s) { return std::sqrt(s); }), 0.5, 0.0, 1.0), 1.0, 1e-12);
  EXPECT_THROW(holder_norm(path_of(g, [](double s) { return s; }), 0.5, 0.5, 0.5), DomainError);
  EXPECT_THROW(holder_norm(path_of(g, [](double s) { return s; }), 1.5, 0.0, 1.0), DomainError);
}

TEST(HolderNorm, LipschitzIsMaxSlopeAndOrderedInGamma) {
  const TimeGrid g(1.0, 40);
  const Path p = path_of(g, [](double s) { return std::sin(7.0 * s) + s * s; });
  double slope = 0.0;
  for (std::size_t i = 0; i < g.nodes(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      slope = std::max(slope, std::abs(p.at(i)[0] - p.at(j)[0]) / (g.time(i) - g.time(j)));
  EXPECT_DOUBLE_EQ(holder_norm(p, 1.0, 0.0, 1.0), slope);
  double prev = 0.0;
  for (double gamma : {0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
    const double v = holder_norm(p, gamma, 0.0, 1.0);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Marginal, Examples) {
  const TimeGrid g(1.0, 4);
  const Ensemble one(std::vector<Path>{path_of(g, [](double s) { return 2.0 * s; })});
  const PointCloud m = marginal(one, 0.5);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_DOUBLE_EQ(m.point(0)[0], 1.0);
  EXPECT_DOUBLE_EQ(m.weights[0], 1.0);
  const Ensemble e = constant_paths(g, {1.0, -2.0}, {0.3, 0.7});
  const PointCloud m0 = marginal(e, 0.0);
  EXPECT_DOUBLE_EQ(m0.point(1)[0], -2.0);
  EXPECT_DOUBLE_EQ(m0.weights[1], 0.7);
  EXPECT_THROW(marginal(e, 0.3), DomainError);
}

TEST(Project, IdentityAtHorizonAndIdempotent) {
  const TimeGrid g(1.0, 8);
  std::vector<Path> paths;
  for (int i = 0; i < 3; ++i) paths.push_back(path_of(g, [i](double s) { return i * s - s * s; }));
  const Ensemble e(std::move(paths), {0.2, 0.3, 0.5});
  const Ensemble full = project(e, 1.0);
  EXPECT_EQ(full.grid(), e.grid());
  const Ensemble a = project(project(e, 0.75), 0.25);
  const Ensemble b = project(e, 0.25);
  ASSERT_EQ(a.grid(), b.grid());
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(a.weight(i), e.weight(i));
    for (std::size_t k = 0; k < b.grid().nodes(); ++k) EXPECT_EQ(a.path(i).at(k)[0], b.path(i).at(k)[0]);
  }
  EXPECT_THROW(project(e, 0.0), DomainError);
}

TEST(Rng, StreamsAreKeyedAndDistinct) {
  EXPECT_EQ(stream_key(7, "sde", 3, 1), stream_key(7, "sde", 3, 1));
  EXPECT_NE(stream_key(7, "sde", 3, 1), stream_key(7, "sde", 3, 2));
  EXPECT_NE(stream_key(7, "sde", 3, 1), stream_key(7, "fbm", 3, 1));
  EXPECT_NE(stream_key(7, "sde", 3, 1), stream_key(8, "sde", 3, 1));
  NormalSource a(make_stream(1, "x", 0));
  NormalSource b(make_stream(1, "x", 0));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a(), b());
}

TEST(Parallel, ResultsIndependentOfThreadCount) {
  auto run = [](std::size_t workers) {
    set_threads(workers);
    std::vector<double> out(1000);
    parallel_for(out.size(), [&](std::size_t i) {
      NormalSource n(make_stream(11, "test", i));
      out[i] = n();
    });
    return out;
  };
  const auto one = run(1);
  const auto four = run(4);
  set_threads(1);
  EXPECT_EQ(one, four);
}

TEST(Parallel, LowestFailingIndexIsReported) {
  set_threads(4);
  try {
    parallel_for(100, [](std::size_t i) {
      if (i == 30 || i == 80) throw DomainError("fail " + std::to_string(i));
    });
    FAIL() << "no exception";
  } catch (const DomainError& e) {
    EXPECT_STREQ(e.what(), "fail 30");
  }
  set_threads(1);
}

TEST(Csv, EnsembleRoundTripIsExact) {
  const TimeGrid g(0.7, 5);
  std::vector<Path> paths;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> v(g.nodes() * 2);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::sin(0.1 * k + i) / 3.0;
    paths.emplace_back(g, 2, std::move(v));
  }
  const Ensemble e(std::move(paths));
  std::stringstream ss;
  csv::write_ensemble(ss, e);
  const Ensemble back = csv::read_ensemble(ss);
  ASSERT_EQ(back.size(), e.size());
  ASSERT_EQ(back.dim(), 2u);
  EXPECT_EQ(back.grid().n_steps(), g.n_steps());
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t k = 0; k < g.nodes(); ++k)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(back.path(i).at(k)[c], e.path(i).at(k)[c]);
}

TEST(Csv, MalformedCellNamesLine) {
  std::stringstream ss("path_id,t,x1\n0,0,0\n0,0.5,abc\n");
  try {
    csv::read_ensemble(ss);
    FAIL() << "no exception";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}
