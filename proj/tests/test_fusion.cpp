#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "obbstack/fusion.hpp"
#include "oracles.hpp"

using namespace obbstack;

namespace {

constexpr double kPiD = std::numbers::pi;

MetaLearner learner(std::vector<double> w, double b, double z_miss = -8.0) {
  MetaLearner l;
  for (std::size_t k = 0; k < w.size(); ++k) l.models.push_back("m" + std::to_string(k + 1));
  l.weights = std::move(w);
  l.intercept = b;
  l.z_miss = z_miss;
  return l;
}

Detection det(const OBB& b, double logit, int model) {
  Detection d = make_detection(b, sigmoid(logit), model, "ship", "P1");
  d.logit = logit;
  return d;
}

Cluster cluster_of(std::vector<Detection> dets) {
  Cluster c{dets.front(), {dets.begin() + 1, dets.end()}, dets.front().category, dets.front().image_id};
  return c;
}

// Andrew's monotone chain, counter-clockwise, collinear points dropped.
std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(), [](Point a, Point b) { return std::tie(a.x, a.y) < std::tie(b.x, b.y); });
  if (pts.size() < 3) return pts;
  std::vector<Point> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(h[k - 1] - h[k - 2], pts[i] - h[k - 2]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 1] - h[k - 2], pts[i] - h[k - 2]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

double angle_gap(double a, double b) { return std::abs(std::remainder(a - b, kPiD)); }

// A cluster of jittered copies of one box, one per model.
Cluster random_cluster(std::mt19937_64& rng, int models) {
  std::normal_distribution<double> z(1.0, 2.0);
  const OBB base = oracle::random_obb(rng, 100.0, 8.0, 40.0);
  std::vector<Detection> dets;
  for (int m = 1; m <= models; ++m) dets.push_back(det(oracle::nearby_obb(rng, base, 2.0), z(rng), m));
  return cluster_of(dets);
}

}  // namespace

TEST(CalibratedScore, Examples) {
  const auto l = learner({0.5, 1.0}, 0.0);
  EXPECT_EQ(calibrated_score(det({0, 0, 4, 2, 0}, 0.0, 1), l), 0.5);
  EXPECT_NEAR(calibrated_score(det({0, 0, 4, 2, 0}, 2.0, 1), l), 0.7310585786300049, 1e-15);
  EXPECT_NEAR(calibrated_score(det({0, 0, 4, 2, 0}, score_to_logit(0.9), 2), l), 0.9, 1e-12);
  EXPECT_THROW(calibrated_score(det({0, 0, 4, 2, 0}, 0.0, 3), l), ContractError);
}

TEST(FuseGeometry, Examples) {
  const auto l = learner({1.0, 1.0}, 0.0);
  const auto single = fuse_geometry(cluster_of({det({3, 4, 5, 2, 0.2}, 0.4, 1)}), l);
  EXPECT_EQ(single, (std::array<double, 4>{3, 4, 5, 2}));

  const auto mid = fuse_geometry(cluster_of({det({0, 0, 4, 2, 0}, 1.0, 1), det({2, 0, 4, 2, 0}, 1.0, 2)}), l);
  EXPECT_NEAR(mid[0], 1.0, 1e-15);
  EXPECT_NEAR(mid[1], 0.0, 1e-15);
  EXPECT_NEAR(mid[2], 4.0, 1e-15);
  EXPECT_NEAR(mid[3], 2.0, 1e-15);

  // s* = 0.8 and 0.4 through the identity learner.
  const auto skew = fuse_geometry(
      cluster_of({det({0, 0, 4, 2, 0}, score_to_logit(0.8), 1), det({3, 0, 4, 2, 0}, score_to_logit(0.4), 2)}), l);
  EXPECT_NEAR(skew[0], 1.0, 1e-12);
}

TEST(FuseOrientation, Examples) {
  const auto l = learner({1.0, 1.0, 1.0}, 0.0);
  EXPECT_EQ(fuse_orientation(cluster_of({det({0, 0, 4, 2, 0.3}, 0.5, 1)}), l), 0.3);
  const double wrap = fuse_orientation(
      cluster_of({det({0, 0, 4, 2, 0.05}, 1.0, 1), det({0, 0, 4, 2, kPiD - 0.05}, 1.0, 2)}), l);
  EXPECT_GE(wrap, 0.0);
  EXPECT_LT(wrap, kPiD);
  EXPECT_LT(angle_gap(wrap, 0.0), 1e-12);
  const double same = fuse_orientation(
      cluster_of({det({0, 0, 4, 2, 1.1}, 2.0, 1), det({1, 0, 5, 2, 1.1}, -1.0, 2), det({0, 1, 4, 3, 1.1}, 0.3, 3)}), l);
  EXPECT_NEAR(same, 1.1, 1e-15);
}

TEST(FuseOrientation, MajorTieGoesToLowerModel) {
  const auto l = learner({1.0, 1.0, 1.0}, 0.0);
  // Equal weights. Major 1.0: offsets (0, -1, 1), mean 0. Major 0: offsets
  // (0, 1, 2 - pi), mean (3 - pi) / 3.
  const auto mid_first = cluster_of({det({0, 0, 4, 2, 0.0}, 1.0, 2), det({0, 0, 4, 2, 1.0}, 1.0, 1),
                                     det({0, 0, 4, 2, 2.0}, 1.0, 3)});
  EXPECT_NEAR(fuse_orientation(mid_first, l), 1.0, 1e-15);
  const auto zero_first = cluster_of({det({0, 0, 4, 2, 0.0}, 1.0, 1), det({0, 0, 4, 2, 1.0}, 1.0, 2),
                                      det({0, 0, 4, 2, 2.0}, 1.0, 3)});
  EXPECT_NEAR(fuse_orientation(zero_first, l), kPiD + (3 - kPiD) / 3, 1e-15);
}

TEST(FuseCluster, FullAgreement) {
  const auto l = learner({0.57, 0.34, 0.24}, -0.3);
  const OBB box{10, 20, 8, 3, 0.7};
  const auto f = fuse_cluster(cluster_of({det(box, 1.5, 1), det(box, 1.5, 2), det(box, 1.5, 3)}), l);
  EXPECT_NEAR(f.obb.x, box.x, 1e-12);
  EXPECT_NEAR(f.obb.w, box.w, 1e-12);
  EXPECT_NEAR(f.obb.theta, box.theta, 1e-12);
  EXPECT_NEAR(f.score, sigmoid(1.5 * (0.57 + 0.34 + 0.24) - 0.3), 1e-15);
  EXPECT_EQ(f.provenance.size(), 3u);
}

TEST(FuseCluster, MissingModelsPenalized) {
  const auto l = learner({0.57, 0.34, 0.24}, -0.3);
  const OBB box{10, 20, 8, 3, 0.7};
  const auto one = fuse_cluster(cluster_of({det(box, 1.5, 2)}), l);
  EXPECT_NEAR(one.score, sigmoid(1.5 * 0.34 - 8.0 * (0.57 + 0.24) - 0.3), 1e-15);
  const auto all = fuse_cluster(cluster_of({det(box, 1.5, 1), det(box, 1.5, 2), det(box, 1.5, 3)}), l);
  EXPECT_LT(one.score, all.score);
}

TEST(FuseCluster, DominantWeightWins) {
  const auto l = learner({1.0, 1.0}, 0.0);
  const auto f = fuse_cluster(cluster_of({det({0, 0, 10, 4, 0.2}, 30.0, 1), det({3, 1, 6, 3, 0.5}, -30.0, 2)}), l);
  EXPECT_NEAR(f.obb.x, 0.0, 1e-9);
  EXPECT_NEAR(f.obb.w, 10.0, 1e-9);
  EXPECT_NEAR(f.obb.theta, 0.2, 1e-9);
}

TEST(FusionProperties, ScaleInvariantGeometry) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const Cluster c = random_cluster(rng, 3);
    const auto boxes = detail::weigh(c, [](const Detection& d) { return sigmoid(d.logit); });
    auto scaled = boxes;
    for (auto& b : scaled) b.weight *= 7.25;
    const OBB a = detail::weighted_box(boxes), b = detail::weighted_box(scaled);
    EXPECT_NEAR(a.x, b.x, 1e-9);
    EXPECT_NEAR(a.y, b.y, 1e-9);
    EXPECT_NEAR(a.w, b.w, 1e-9);
    EXPECT_NEAR(a.h, b.h, 1e-9);
    EXPECT_LT(angle_gap(a.theta, b.theta), 1e-9);
  }
}

TEST(FusionProperties, OrientationRepresentationInvariant) {
  std::mt19937_64 rng(2);
  const auto l = learner({0.8, 0.5, 1.2}, 0.1);
  for (int trial = 0; trial < 300; ++trial) {
    Cluster c = random_cluster(rng, 3);
    const double ref = fuse_orientation(c, l);
    Detection& m = c.members[static_cast<std::size_t>(trial % 2)];
    m.obb = canonicalize(m.obb.x, m.obb.y, m.obb.w, m.obb.h, m.obb.theta + (trial % 3 ? kPiD : -kPiD));
    EXPECT_LT(angle_gap(fuse_orientation(c, l), ref), 1e-9);
  }
}

TEST(FusionProperties, CenterInsideMemberHull) {
  std::mt19937_64 rng(3);
  const auto l = learner({0.8, 0.5, 1.2, 0.3}, 0.1);
  for (int trial = 0; trial < 300; ++trial) {
    const Cluster c = random_cluster(rng, 4);
    const auto g = fuse_geometry(c, l);
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const Detection* d : c.all()) {
      x0 = std::min(x0, d->obb.x);
      x1 = std::max(x1, d->obb.x);
      y0 = std::min(y0, d->obb.y);
      y1 = std::max(y1, d->obb.y);
    }
    EXPECT_GE(g[0], x0 - 1e-9);
    EXPECT_LE(g[0], x1 + 1e-9);
    EXPECT_GE(g[1], y0 - 1e-9);
    EXPECT_LE(g[1], y1 + 1e-9);
    std::vector<Point> centers;
    for (const Detection* d : c.all()) centers.push_back({d->obb.x, d->obb.y});
    const auto hull = convex_hull(centers);
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const Point a = hull[i], b = hull[(i + 1) % hull.size()];
      const double scale = std::max(1.0, norm(b - a));
      EXPECT_GE(cross(b - a, Point{g[0], g[1]} - a) / scale, -1e-9);
    }
  }
}

TEST(FusionProperties, AgreeingMemberRaisesScore) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z(0.0, 3.0);
  const auto l = learner({0.8, 0.5, 1.2}, -0.2);
  for (int trial = 0; trial < 300; ++trial) {
    const OBB box = oracle::random_obb(rng);
    std::vector<Detection> dets{det(box, z(rng), 1), det(box, z(rng), 2)};
    const double before = fuse_cluster(cluster_of(dets), l).score;
    dets.push_back(det(box, std::max(z(rng), l.z_miss), 3));
    EXPECT_GE(fuse_cluster(cluster_of(dets), l).score, before);
  }
}

TEST(Nms, Examples) {
  DetectionRun a{"a", 1, {det({10, 10, 8, 4, 0.3}, 2.0, 1), det({60, 60, 8, 4, 1.0}, 0.5, 1)}};
  const auto single = ensemble_nms({a});
  ASSERT_EQ(single.detections.size(), 2u);
  EXPECT_EQ(single.detections[0].obb, a.detections[0].obb);
  EXPECT_EQ(single.detections[0].score, a.detections[0].score);

  DetectionRun b = a;
  b.model_name = "b";
  b.model_index = 2;
  for (auto& d : b.detections) d.model_index = 2;
  EXPECT_EQ(ensemble_nms({a, b}).detections.size(), 2u);

  DetectionRun hi{"hi", 1, {make_detection({10, 10, 8, 4, 0.3}, 0.9, 1, "ship", "P1")}};
  DetectionRun lo{"lo", 2, {make_detection({10.2, 10, 8, 4, 0.3}, 0.8, 2, "ship", "P1")}};
  const auto out = ensemble_nms({hi, lo});
  ASSERT_EQ(out.detections.size(), 1u);
  EXPECT_EQ(out.detections[0].score, 0.9);
  EXPECT_EQ(out.detections[0].obb, hi.detections[0].obb);
}

TEST(Nms, Idempotent) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<DetectionRun> runs;
    for (int m = 1; m <= 3; ++m) {
      DetectionRun r{"m" + std::to_string(m), m, {}};
      for (int i = 0; i < 15; ++i)
        r.detections.push_back(make_detection(oracle::random_obb(rng, 60.0), u(rng), m, i % 2 ? "a" : "b", "P1"));
      runs.push_back(r);
    }
    const auto once = ensemble_nms(runs);
    const auto twice = ensemble_nms({once});
    EXPECT_EQ(twice.detections, once.detections);
  }
}

TEST(Wbf, Examples) {
  const auto single = wbf_cluster(cluster_of({make_detection({3, 4, 5, 2, 0.2}, 0.6, 1, "ship", "P1")}), 3);
  EXPECT_EQ(single.obb, (OBB{3, 4, 5, 2, 0.2}));
  EXPECT_NEAR(single.score, 0.2, 1e-15);

  const OBB box{3, 4, 5, 2, 0.2};
  const auto agree = wbf_cluster(cluster_of({make_detection(box, 0.8, 1, "ship", "P1"),
                                             make_detection(box, 0.6, 2, "ship", "P1")}),
                                 2);
  EXPECT_NEAR(agree.score, 0.7, 1e-15);

  const auto geom = wbf_cluster(cluster_of({make_detection({0, 0, 4, 2, 0}, 0.8, 1, "ship", "P1"),
                                            make_detection({3, 0, 4, 2, 0}, 0.4, 2, "ship", "P1")}),
                                2);
  EXPECT_NEAR(geom.obb.x, 1.0, 1e-12);
  EXPECT_NEAR(geom.score, 0.6, 1e-15);
}

TEST(Stacking, SingleRunIdentityLearner) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  DetectionRun run{"solo", 1, {}};
  for (int i = 0; i < 30; ++i) run.detections.push_back(make_detection(oracle::random_obb(rng), u(rng), 1, "ship", "P1"));
  const auto out = ensemble_stacking({run}, identity_learner({"solo"}));
  ASSERT_EQ(out.detections.size(), run.detections.size());
  auto in = run.detections;
  std::sort(in.begin(), in.end(), detail::cluster_order);
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_NEAR(out.detections[i].score, in[i].score, 1e-12);
    EXPECT_NEAR(iou(out.detections[i].obb, in[i].obb), 1.0, 1e-12);
    EXPECT_EQ(out.detections[i].model_index, 0);
  }
}

TEST(Stacking, IdenticalRunsMergeToOneBox) {
  std::vector<DetectionRun> runs;
  const OBB box{40, 40, 12, 5, 2.0};
  for (int m = 1; m <= 3; ++m) runs.push_back({"m" + std::to_string(m), m, {make_detection(box, 0.9, m, "ship", "P1")}});
  const auto out = ensemble_stacking(runs, identity_learner({"m1", "m2", "m3"}));
  ASSERT_EQ(out.detections.size(), 1u);
  EXPECT_NEAR(iou(out.detections[0].obb, box), 1.0, 1e-12);
}

TEST(Stacking, RegistryChecks) {
  DetectionRun a{"a", 1, {}}, b{"b", 2, {}};
  EXPECT_THROW(ensemble_stacking({a, b}, identity_learner({"a"})), ContractError);
  EXPECT_THROW(ensemble_stacking({a, b}, identity_learner({"a", "c"})), ContractError);
  b.model_index = 3;
  EXPECT_THROW(ensemble_stacking({a, b}, identity_learner({"a", "b"})), ContractError);
  EXPECT_THROW(ensemble_stacking({}, identity_learner({})), ContractError);
}

TEST(Stacking, SortedAndThreadInvariant) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::vector<DetectionRun> runs;
  for (int m = 1; m <= 3; ++m) {
    DetectionRun r{"m" + std::to_string(m), m, {}};
    for (int i = 0; i < 200; ++i)
      r.detections.push_back(make_detection(oracle::random_obb(rng, 80.0), u(rng), m, i % 3 ? "a" : "b",
                                            "P" + std::to_string(i % 7)));
    runs.push_back(r);
  }
  const auto l = learner({0.6, 0.3, 0.2}, -0.5);
  const auto one = ensemble_stacking(runs, l, {0.5, 0.0, 1});
  const auto four = ensemble_stacking(runs, l, {0.5, 0.0, 4});
  EXPECT_EQ(one.detections, four.detections);
  for (std::size_t i = 1; i < one.detections.size(); ++i)
    EXPECT_GE(one.detections[i - 1].score, one.detections[i].score);
  for (const auto& d : one.detections) EXPECT_TRUE(is_canonical(d.obb));
  const auto floor = ensemble_stacking(runs, l, {0.5, 0.3, 1});
  for (const auto& d : floor.detections) EXPECT_GE(d.score, 0.3);
  EXPECT_LT(floor.detections.size(), one.detections.size());
}
