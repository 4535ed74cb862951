#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "obbstack/clustering.hpp"
#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/geometry.hpp"
#include "obbstack/metalearner.hpp"
#include "obbstack/parallel.hpp"

namespace obbstack {

enum class EnsembleMethod { stacking, nms, wbf };

inline std::string to_string(EnsembleMethod m) {
  switch (m) {
    case EnsembleMethod::stacking: return "stacking";
    case EnsembleMethod::nms: return "nms";
    case EnsembleMethod::wbf: return "wbf";
  }
  return "?";
}

struct FusedDetection {
  OBB obb;
  double score = 0.0;
  double logit = 0.0;
  std::string category;
  std::string image_id;
  std::vector<std::pair<int, double>> provenance;  // (model_index, raw score)
};

/// Per-detection calibrated score s* = sigmoid(z * w_l + b).
inline double calibrated_score(const Detection& d, const MetaLearner& learner) {
  if (d.model_index < 1 || d.model_index > learner.num_models())
    throw ContractError("model index " + std::to_string(d.model_index) + " is not registered in the meta-learner");
  return sigmoid(d.logit * learner.weights[static_cast<std::size_t>(d.model_index - 1)] + learner.intercept);
}

namespace detail {

struct WeightedBox {
  const Detection* det;
  double weight;
};

inline std::vector<WeightedBox> weigh(const Cluster& c, const auto& weight_of) {
  std::vector<WeightedBox> out;
  for (const Detection* d : c.all()) out.push_back({d, weight_of(*d)});
  return out;
}

inline std::array<double, 4> weighted_geometry(std::span<const WeightedBox> boxes) {
  std::array<double, 4> acc{};
  double total = 0.0;
  for (const auto& b : boxes) {
    acc[0] += b.weight * b.det->obb.x;
    acc[1] += b.weight * b.det->obb.y;
    acc[2] += b.weight * b.det->obb.w;
    acc[3] += b.weight * b.det->obb.h;
    total += b.weight;
  }
  for (double& v : acc) v /= total;
  return acc;
}

// Major orientation: heaviest box, lower model index on ties.
inline double weighted_orientation(std::span<const WeightedBox> boxes) {
  const WeightedBox* major = &boxes.front();
  for (const auto& b : boxes)
    if (b.weight > major->weight || (b.weight == major->weight && b.det->model_index < major->det->model_index))
      major = &b;
  const double theta_mj = major->det->obb.theta;
  double acc = 0.0, total = 0.0;
  for (const auto& b : boxes) {
    acc += b.weight * relative_angle(b.det->obb.theta, theta_mj);
    total += b.weight;
  }
  return reduce_angle(theta_mj + acc / total, kPi);
}

inline OBB weighted_box(std::span<const WeightedBox> boxes) {
  const auto g = weighted_geometry(boxes);
  return canonicalize(g[0], g[1], g[2], g[3], weighted_orientation(boxes));
}

inline std::vector<std::pair<int, double>> provenance_of(const Cluster& c) {
  std::vector<std::pair<int, double>> p;
  for (const Detection* d : c.all()) p.emplace_back(d->model_index, d->score);
  return p;
}

}  // namespace detail

/// s*-weighted mean of (x, y, w, h) over the center and all members.
inline std::array<double, 4> fuse_geometry(const Cluster& c, const MetaLearner& learner) {
  const auto boxes = detail::weigh(c, [&](const Detection& d) { return calibrated_score(d, learner); });
  return detail::weighted_geometry(boxes);
}

/// Major orientation plus the s*-weighted mean of cyclic offsets to it.
inline double fuse_orientation(const Cluster& c, const MetaLearner& learner) {
  const auto boxes = detail::weigh(c, [&](const Detection& d) { return calibrated_score(d, learner); });
  return detail::weighted_orientation(boxes);
}

inline FusedDetection fuse_cluster(const Cluster& c, const MetaLearner& learner) {
  const auto boxes = detail::weigh(c, [&](const Detection& d) { return calibrated_score(d, learner); });
  const auto z = build_feature_vector(c, learner.num_models(), learner.z_miss);
  const double u = linear_predictor(z, learner.weights, learner.intercept);
  return {detail::weighted_box(boxes), sigmoid(u), u, c.category, c.image_id, detail::provenance_of(c)};
}

/// Non-maximum suppression: the cluster center survives unchanged.
inline FusedDetection nms_cluster(const Cluster& c) {
  return {c.center.obb, c.center.score, c.center.logit, c.category, c.image_id, detail::provenance_of(c)};
}

/// Weighted boxes fusion on raw scores; the mean score is scaled by
/// min(1, K / M) so boxes seen by few models are penalized.
inline FusedDetection wbf_cluster(const Cluster& c, int num_models) {
  const auto boxes = detail::weigh(c, [](const Detection& d) { return d.score; });
  double mean = 0.0;
  for (const auto& b : boxes) mean += b.weight;
  mean /= static_cast<double>(boxes.size());
  const double score = mean * std::min(1.0, static_cast<double>(boxes.size()) / num_models);
  return {detail::weighted_box(boxes), score, score_to_logit(score), c.category, c.image_id, detail::provenance_of(c)};
}

struct EnsembleOptions {
  double iou_thresh = kDefaultIouThresh;
  double min_score = 0.0;
  unsigned threads = 1;
};

/// Checks that runs are numbered 1..M in order, with names matching the
/// learner's registry when one is given.
inline void check_registry(const std::vector<DetectionRun>& runs, const MetaLearner* learner) {
  if (runs.empty()) throw ContractError("no detection runs");
  if (learner && static_cast<int>(runs.size()) != learner->num_models())
    throw ContractError("ensemble has " + std::to_string(runs.size()) + " runs but the meta-learner expects " +
                        std::to_string(learner->num_models()));
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].model_index != static_cast<int>(i + 1))
      throw ContractError("run '" + runs[i].model_name + "' has model index " + std::to_string(runs[i].model_index) +
                          ", expected " + std::to_string(i + 1));
    if (learner && runs[i].model_name != learner->models[i])
      throw ContractError("run '" + runs[i].model_name + "' does not match registered model '" + learner->models[i] +
                          "'");
  }
}

/// Orders ensemble output by score, then logit, then location, so equal-score
/// output is still deterministic.
inline void sort_fused(std::vector<FusedDetection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const FusedDetection& a, const FusedDetection& b) {
    return std::tie(b.score, b.logit, a.image_id, a.category, a.obb.x, a.obb.y) <
           std::tie(a.score, a.logit, b.image_id, b.category, b.obb.x, b.obb.y);
  });
}

/// Clusters the runs and fuses every cluster with `fuse`.
template <typename FuseFn>
std::vector<FusedDetection> fuse_runs(const std::vector<DetectionRun>& runs, const EnsembleOptions& opt,
                                      FuseFn&& fuse) {
  const auto groups = cluster_runs(runs, opt.iou_thresh, opt.threads);
  std::vector<std::vector<FusedDetection>> per_group(groups.size());
  parallel_for(groups.size(), opt.threads, [&](std::size_t i) {
    for (const auto& c : groups[i]) {
      FusedDetection f = fuse(c);
      if (f.score >= opt.min_score) per_group[i].push_back(std::move(f));
    }
  });
  std::vector<FusedDetection> out;
  for (auto& g : per_group)
    for (auto& f : g) out.push_back(std::move(f));
  sort_fused(out);
  return out;
}

/// Wraps fused output as a run (model index 0). Scores are clamped to the
/// detection range; logits keep the unclamped value.
inline DetectionRun to_run(const std::vector<FusedDetection>& fused, std::string name) {
  DetectionRun run{std::move(name), 0, {}};
  run.detections.reserve(fused.size());
  for (const auto& f : fused) run.detections.push_back({f.obb, clamp_score(f.score), f.logit, 0, f.category, f.image_id});
  return run;
}

inline std::vector<FusedDetection> ensemble_stacking_fused(const std::vector<DetectionRun>& runs,
                                                           const MetaLearner& learner, const EnsembleOptions& opt = {}) {
  check_registry(runs, &learner);
  return fuse_runs(runs, opt, [&](const Cluster& c) { return fuse_cluster(c, learner); });
}

inline DetectionRun ensemble_stacking(const std::vector<DetectionRun>& runs, const MetaLearner& learner,
                                      const EnsembleOptions& opt = {}) {
  return to_run(ensemble_stacking_fused(runs, learner, opt), "stacking");
}

inline DetectionRun ensemble_nms(const std::vector<DetectionRun>& runs, const EnsembleOptions& opt = {}) {
  return to_run(fuse_runs(runs, opt, nms_cluster), "nms");
}

inline DetectionRun ensemble_wbf(const std::vector<DetectionRun>& runs, const EnsembleOptions& opt = {}) {
  const int m = static_cast<int>(runs.size());
  return to_run(fuse_runs(runs, opt, [m](const Cluster& c) { return wbf_cluster(c, m); }), "wbf");
}

}  // namespace obbstack
