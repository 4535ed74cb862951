#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "obbstack/metalearner.hpp"
#include "oracles.hpp"

using namespace obbstack;

namespace {

MetaLearner learner(std::vector<double> w, double b) {
  MetaLearner l;
  l.models.resize(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) l.models[k] = "m" + std::to_string(k + 1);
  l.weights = std::move(w);
  l.intercept = b;
  return l;
}

std::vector<LabeledCluster> random_samples(std::mt19937_64& rng, std::size_t n, std::size_t m) {
  std::normal_distribution<double> z(0.0, 2.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LabeledCluster> out(n);
  for (auto& s : out) {
    s.features.resize(m);
    for (auto& v : s.features) v = u(rng) < 0.2 ? -8.0 : z(rng);
    s.label = u(rng) < 1.0 / (1.0 + std::exp(-0.5 * (s.features[0] + 0.3))) ? 1 : 0;
  }
  return out;
}

Cluster cluster_at(const OBB& b, std::vector<std::pair<int, double>> model_scores) {
  Cluster c{make_detection(b, model_scores[0].second, model_scores[0].first, "ship", "P1"), {}, "ship", "P1"};
  for (std::size_t i = 1; i < model_scores.size(); ++i)
    c.members.push_back(make_detection(b, model_scores[i].second, model_scores[i].first, "ship", "P1"));
  return c;
}

}  // namespace

TEST(SigmaWa, Examples) {
  const std::vector<double> zeros(3, 0.0);
  EXPECT_EQ(sigma_wa(zeros, learner({0.3, -2.0, 7.0}, 0.0)), 0.5);
  const std::vector<double> ln3{std::log(3.0)};
  EXPECT_NEAR(sigma_wa(ln3, learner({1.0}, 0.0)), 0.75, 1e-15);
  const std::vector<double> ones{1.0, 1.0};
  // e^0.91 = 2.48432, 2.48432 / 3.48432 = 0.713000
  EXPECT_NEAR(sigma_wa(ones, learner({0.57, 0.34}, 0.0)), 0.713000, 1e-6);
  EXPECT_THROW(sigma_wa(ones, learner({1.0}, 0.0)), ContractError);
}

TEST(SigmaWa, ExtremeLogitsStayFinite) {
  const auto l = learner({1.0}, 0.0);
  const std::vector<double> big{800.0}, small{-800.0};
  EXPECT_EQ(sigma_wa(big, l), 1.0);
  EXPECT_EQ(sigma_wa(small, l), 0.0);
}

TEST(SigmaWa, IncreasingInPositiveWeightedLogit) {
  const auto l = learner({0.5, 0.2, 0.9}, -0.4);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z(0.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> a{z(rng), z(rng), z(rng)};
    auto b = a;
    b[static_cast<std::size_t>(i % 3)] += 0.1;
    EXPECT_LT(sigma_wa(a, l), sigma_wa(b, l));
  }
}

TEST(LabelClusters, Examples) {
  GroundTruth gt;
  gt.images = {"P1"};
  gt.objects = {{{0, 0, 4, 2, 0}, "ship", false, "P1"}};
  // IoU of a 4x2 box shifted by s along x is (4 - s) / (4 + s); s = 4 * 0.51 / 1.49 gives 0.49.
  const double s49 = 4.0 * 0.51 / 1.49;
  const std::vector<Cluster> clusters{cluster_at({0, 0, 4, 2, 0}, {{1, 0.9}}), cluster_at({50, 50, 4, 2, 0}, {{1, 0.9}}),
                                      cluster_at({s49, 0, 4, 2, 0}, {{2, 0.6}})};
  ASSERT_NEAR(iou(clusters[2].center.obb, gt.objects[0].obb), 0.49, 1e-12);
  const auto labeled = label_clusters(clusters, gt, 0.5, 2, -8.0);
  ASSERT_EQ(labeled.size(), 3u);
  EXPECT_EQ(labeled[0].label, 1);
  EXPECT_EQ(labeled[1].label, 0);
  EXPECT_EQ(labeled[2].label, 0);
  EXPECT_EQ(labeled[2].features, (std::vector<double>{-8.0, score_to_logit(0.6)}));
  // Non-exclusive: two clusters on one object are both positive.
  const auto dup = label_clusters(std::vector{clusters[0], clusters[0]}, gt, 0.5, 2, -8.0);
  EXPECT_EQ(dup[0].label + dup[1].label, 2);
}

TEST(LabelClusters, CategoryAndImageMustMatch) {
  GroundTruth gt;
  gt.objects = {{{0, 0, 4, 2, 0}, "plane", false, "P1"}, {{0, 0, 4, 2, 0}, "ship", false, "P2"}};
  const auto labeled = label_clusters(std::vector{cluster_at({0, 0, 4, 2, 0}, {{1, 0.9}})}, gt, 0.5, 1, -8.0);
  EXPECT_EQ(labeled[0].label, 0);
}

TEST(Nll, Examples) {
  const std::vector<LabeledCluster> one{{{0.0}, 1, 1.0}};
  EXPECT_NEAR(nll(learner({3.7}, 0.0), one), std::log(2.0), 1e-15);

  const double z = std::log((1 - 1e-12) / 1e-12);
  const std::vector<LabeledCluster> sure{{{z}, 1, 1.0}};
  EXPECT_NEAR(nll(learner({1.0}, 0.0), sure), 1e-12, 1e-16);

  for (double a : {0.1, 1.0, 5.0, 40.0}) {
    const std::vector<LabeledCluster> sym{{{a}, 1, 1.0}, {{-a}, 0, 1.0}};
    EXPECT_NEAR(nll(learner({1.0}, 0.0), sym), 2 * std::log1p(std::exp(-a)), 1e-15) << a;
  }
  EXPECT_THROW(nll(learner({1.0}, 0.0), std::vector<LabeledCluster>{}), ContractError);
}

TEST(Nll, PenaltyExcludesIntercept) {
  const std::vector<LabeledCluster> one{{{0.0}, 1, 1.0}};
  EXPECT_NEAR(nll(learner({2.0}, 5.0), one, 0.5) - nll(learner({2.0}, 5.0), one, 0.0), 1.0, 1e-12);
}

TEST(Nll, MatchesScalarOracle) {
  const auto samples = oracle::tempered_samples(500, 2.0, 0.3, 4);
  std::vector<double> z;
  std::vector<int> y;
  for (const auto& s : samples) {
    z.push_back(s.features[0]);
    y.push_back(s.label);
  }
  EXPECT_NEAR(nll(learner({0.7}, -0.2), samples, 0.01), oracle::scalar_nll(z, y, 0.7, -0.2, 0.01), 1e-9);
}

TEST(Nll, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> p(0.0, 1.0);
  const auto samples = random_samples(rng, 300, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto l = learner({p(rng), p(rng), p(rng)}, p(rng));
    const auto g = nll_gradient(l, samples, 1e-3);
    for (std::size_t k = 0; k < 4; ++k) {
      auto up = l, down = l;
      const double h = 1e-5;
      if (k < 3) {
        up.weights[k] += h;
        down.weights[k] -= h;
      } else {
        up.intercept += h;
        down.intercept -= h;
      }
      const double fd = (nll(up, samples, 1e-3) - nll(down, samples, 1e-3)) / (2 * h);
      EXPECT_LE(std::abs(fd - g[k]), 1e-6 * std::max(1.0, std::abs(g[k]))) << "trial " << trial << " k " << k;
    }
  }
}

TEST(Nll, MidpointConvexity) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> p(0.0, 2.0);
  const auto samples = random_samples(rng, 200, 2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = learner({p(rng), p(rng)}, p(rng));
    const auto b = learner({p(rng), p(rng)}, p(rng));
    const auto mid = learner({(a.weights[0] + b.weights[0]) / 2, (a.weights[1] + b.weights[1]) / 2},
                             (a.intercept + b.intercept) / 2);
    EXPECT_LE(nll(mid, samples, 1e-6), (nll(a, samples, 1e-6) + nll(b, samples, 1e-6)) / 2 + 1e-9);
  }
}

TEST(Fit, RecoversTemperature) {
  const auto samples = oracle::tempered_samples(50000, 2.5, 0.0, 2024);
  const auto l = fit(samples, {"m"}, -8.0, {1e-6});
  EXPECT_NEAR(l.weights[0], 0.4, 0.4 * 0.02);
  EXPECT_LT(std::abs(l.intercept), 0.02);
  EXPECT_TRUE(l.training.converged);
  EXPECT_EQ(l.training.n_clusters, 50000u);
  EXPECT_LE(l.training.gradient_norm, 1e-8);
}

TEST(Fit, AgreesWithGridSearch) {
  const auto samples = oracle::tempered_samples(1000, 2.5, 0.0, 77);
  std::vector<double> z;
  std::vector<int> y;
  for (const auto& s : samples) {
    z.push_back(s.features[0]);
    y.push_back(s.label);
  }
  const auto l = fit(samples, {"m"}, -8.0, {1e-6});
  const int n = 400;
  const double w0 = 0.2, w1 = 0.6, b0 = -0.4, b1 = 0.4;
  const double dw = (w1 - w0) / (n - 1), db = (b1 - b0) / (n - 1);
  double best = INFINITY;
  int bi = 0, bj = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double v = oracle::scalar_nll(z, y, w0 + i * dw, b0 + j * db, 1e-6);
      if (v < best) {
        best = v;
        bi = i;
        bj = j;
      }
    }
  EXPECT_LE(std::abs(l.weights[0] - (w0 + bi * dw)), dw);
  EXPECT_LE(std::abs(l.intercept - (b0 + bj * db)), db);
}

TEST(Fit, SeparableDataStaysFinite) {
  std::vector<LabeledCluster> samples;
  for (int i = 1; i <= 50; ++i) {
    samples.push_back({{static_cast<double>(i)}, 1, 1.0});
    samples.push_back({{-static_cast<double>(i)}, 0, 1.0});
  }
  int warnings = 0;
  ScopedWarningSink sink([&](std::string_view) { ++warnings; });
  const auto l = fit(samples, {"m"}, -8.0, {1e-4});
  EXPECT_TRUE(std::isfinite(l.weights[0]));
  EXPECT_TRUE(std::isfinite(l.intercept));
  EXPECT_GT(l.weights[0], 0.0);
}

TEST(Fit, DuplicationInvariant) {
  std::mt19937_64 rng(5);
  const auto samples = random_samples(rng, 400, 3);
  auto doubled = samples;
  doubled.insert(doubled.end(), samples.begin(), samples.end());
  const auto a = fit(samples, {}, -8.0, {0.0});
  const auto b = fit(doubled, {}, -8.0, {0.0});
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a.weights[k], b.weights[k], 1e-8);
  EXPECT_NEAR(a.intercept, b.intercept, 1e-8);
}

TEST(Fit, RankingInvariance) {
  std::mt19937_64 rng(6);
  const auto samples = random_samples(rng, 2000, 2);
  auto scaled = samples;
  const double c = 3.0;
  for (auto& s : scaled) s.features[0] *= c;
  const auto a = fit(samples, {}, -8.0, {0.0});
  const auto b = fit(scaled, {}, -8.0, {0.0});
  EXPECT_NEAR(b.weights[0], a.weights[0] / c, 1e-8);
  for (std::size_t i = 0; i < samples.size(); i += 97)
    EXPECT_NEAR(sigma_wa(samples[i].features, a), sigma_wa(scaled[i].features, b), 1e-9);
}

TEST(Fit, Deterministic) {
  std::mt19937_64 rng(7);
  const auto samples = random_samples(rng, 500, 3);
  EXPECT_EQ(fit(samples, {}, -8.0), fit(samples, {}, -8.0));
}

TEST(Fit, Errors) {
  std::vector<LabeledCluster> pos{{{1.0}, 1, 1.0}, {{2.0}, 1, 1.0}};
  EXPECT_THROW(fit(pos, {"m"}, -8.0), DegenerateData);
  EXPECT_THROW(fit(std::vector<LabeledCluster>{}, {"m"}, -8.0), ContractError);
  std::vector<LabeledCluster> ok{{{1.0}, 1, 1.0}, {{2.0}, 0, 1.0}};
  EXPECT_THROW(fit(ok, {"a", "b"}, -8.0), ContractError);
}

TEST(Fit, NonConvergenceWarnsAndReturns) {
  const auto samples = oracle::tempered_samples(2000, 2.0, 0.0, 3);
  std::vector<std::string> seen;
  ScopedWarningSink sink([&](std::string_view w) { seen.emplace_back(w); });
  const auto l = fit(samples, {"m"}, -8.0, {1e-6, 1e-8, 1});
  EXPECT_FALSE(l.training.converged);
  EXPECT_EQ(l.training.iterations, 1);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_NE(seen[0].find("gradient norm"), std::string::npos);
}

TEST(FitTemperature, RecoversTemperature) {
  const auto t2 = fit_temperature(oracle::to_scalar(oracle::tempered_samples(50000, 2.0, 0.0, 11)));
  EXPECT_GE(t2.temperature, 1.9);
  EXPECT_LE(t2.temperature, 2.1);
  const auto t1 = fit_temperature(oracle::to_scalar(oracle::tempered_samples(50000, 1.0, 0.0, 12)));
  EXPECT_GE(t1.temperature, 0.95);
  EXPECT_LE(t1.temperature, 1.05);
}

TEST(FitTemperature, MatchesMetaLearnerAtOneModel) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto samples = oracle::tempered_samples(5000, 1.5 + seed, 0.2, seed);
    const auto l = fit(samples, {"m"}, -8.0);
    const auto c = fit_temperature(oracle::to_scalar(samples));
    EXPECT_NEAR(1.0 / c.temperature, l.weights[0], 1e-8);
    EXPECT_NEAR(c.shift, l.intercept, 1e-8);
  }
}

TEST(FitTemperature, AntiCorrelatedScoresFail) {
  auto samples = oracle::to_scalar(oracle::tempered_samples(2000, 1.0, 0.0, 5));
  for (auto& s : samples) s.logit = -s.logit;
  EXPECT_THROW(fit_temperature(samples), CalibrationFailure);
}

TEST(FitTemperature, WeightToTemperature) { EXPECT_NEAR(1.0 / 0.5690, 1.7575, 5e-5); }

TEST(DecomposeWeights, ReferenceRows) {
  const std::vector<double> w{0.1705, 0.2062, 0.1283, 0.1542};
  const std::vector<double> p{0.5028, 0.5690, 0.4406, 0.4504};
  const std::vector<double> r(4, 1.0);
  const std::vector<double> reference_g{0.3390, 0.3625, 0.2912, 0.3423};
  const auto g = decompose_weights(w, p, r);
  EXPECT_NEAR(g[0], 0.3391, 5e-5);
  EXPECT_NEAR(g[1], 0.3624, 5e-5);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(g[k], reference_g[k], 0.002);
}

TEST(DecomposeWeights, IdentityAndErrors) {
  const std::vector<double> w{0.57, 0.34, 0.24}, ones(3, 1.0), zero{1.0, 0.0, 1.0};
  EXPECT_EQ(decompose_weights(w, ones, ones), w);
  EXPECT_THROW(decompose_weights(w, zero, ones), ContractError);
  EXPECT_THROW(decompose_weights(w, ones, std::vector<double>{1.0}), ContractError);
}

TEST(ScoreCorrelation, CopyIsPerfectlyCorrelated) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::vector<Cluster> cs;
  for (int i = 0; i < 50; ++i) {
    const double s = u(rng);
    cs.push_back(cluster_at({double(i), 0, 4, 2, 0}, {{1, s}, {2, s}}));
  }
  const auto rho = score_correlation(cs, 2);
  EXPECT_NEAR(*rho[0][1], 1.0, 1e-12);
  EXPECT_EQ(*rho[0][0], 1.0);
  EXPECT_EQ(rho[0][1], rho[1][0]);
}

TEST(ScoreCorrelation, UndefinedEntries) {
  std::vector<Cluster> cs;
  for (int i = 0; i < 10; ++i) cs.push_back(cluster_at({double(i), 0, 4, 2, 0}, {{1, 0.1 * (i % 7) + 0.05}, {2, 0.5}}));
  cs.push_back(cluster_at({0, 0, 4, 2, 0}, {{1, 0.3}, {3, 0.4}}));
  cs.push_back(cluster_at({0, 0, 4, 2, 0}, {{1, 0.6}, {3, 0.2}}));
  const auto rho = score_correlation(cs, 3);
  EXPECT_FALSE(rho[0][1].has_value());  // constant scores
  EXPECT_FALSE(rho[0][2].has_value());  // two common clusters
  EXPECT_FALSE(rho[1][2].has_value());
  EXPECT_EQ(*rho[2][2], 1.0);
}

TEST(ScoreCorrelation, IndependentScoresNearZero) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Cluster> cs;
  for (int i = 0; i < 10000; ++i) cs.push_back(cluster_at({0, 0, 4, 2, 0}, {{1, u(rng)}, {2, u(rng)}}));
  EXPECT_LT(std::abs(*score_correlation(cs, 2)[0][1]), 0.05);
}

TEST(MetaJson, RoundTrip) {
  std::mt19937_64 rng(8);
  const auto samples = random_samples(rng, 300, 3);
  const auto l = fit(samples, {"a", "b", "c"}, -6.5, {1e-3});
  EXPECT_EQ(meta_from_json(meta_to_json(l)), l);
}

TEST(MetaJson, Errors) {
  EXPECT_THROW(meta_from_json("{}"), SchemaError);
  EXPECT_THROW(meta_from_json(R"({"schema": "obbstack-meta/1", "models": ["a"], "weights": [1, 2],
    "intercept": 0, "z_miss": -8, "lambda": 0})"),
               SchemaError);
  EXPECT_THROW(meta_from_json(R"({"schema": "obbstack-meta/1", "models": ["a"], "weights": [1]})"), SchemaError);
}
