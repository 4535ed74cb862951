#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/geometry.hpp"
#include "obbstack/parallel.hpp"

namespace obbstack {

inline constexpr double kDefaultIouThresh = 0.5;
inline constexpr double kDefaultZMiss = -8.0;

/// A seed detection plus at most one overlapping detection from each other model.
struct Cluster {
  Detection center;
  std::vector<Detection> members;
  std::string category;
  std::string image_id;

  std::size_t size() const { return members.size() + 1; }

  /// Center followed by members.
  std::vector<const Detection*> all() const {
    std::vector<const Detection*> out{&center};
    for (const auto& m : members) out.push_back(&m);
    return out;
  }
};

namespace detail {

// Score descending, then model, x, y ascending; the trailing keys only make the
// order total so permuted inputs cluster identically.
inline auto cluster_key(const Detection& d) {
  return std::make_tuple(-d.score, d.model_index, d.obb.x, d.obb.y, d.obb.w, d.obb.h, d.obb.theta, -d.logit);
}

inline bool cluster_order(const Detection& a, const Detection& b) { return cluster_key(a) < cluster_key(b); }

inline void check_iou_thresh(double t) {
  if (!(t > 0.0 && t < 1.0)) throw ContractError("iou_thresh must lie in (0, 1)");
}

inline void check_single_group(std::span<const Detection> dets) {
  for (const auto& d : dets)
    if (d.image_id != dets.front().image_id || d.category != dets.front().category)
      throw ContractError("cluster_detections input mixes images or categories");
}

}  // namespace detail

/// Greedy score-ordered clustering of one (image, category) group: pop the
/// best remaining box as a center, pull in the first remaining box of every
/// other model whose IoU with the center exceeds iou_thresh, repeat.
inline std::vector<Cluster> cluster_detections(std::span<const Detection> dets, double iou_thresh) {
  detail::check_iou_thresh(iou_thresh);
  if (dets.empty()) return {};
  detail::check_single_group(dets);

  std::vector<Detection> pool(dets.begin(), dets.end());
  std::stable_sort(pool.begin(), pool.end(), detail::cluster_order);
  std::vector<bool> taken(pool.size(), false);

  std::vector<Cluster> clusters;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (taken[i]) continue;
    taken[i] = true;
    Cluster c{pool[i], {}, pool[i].category, pool[i].image_id};
    std::set<int> models{pool[i].model_index};
    for (std::size_t j = i + 1; j < pool.size(); ++j) {
      if (taken[j] || models.contains(pool[j].model_index)) continue;
      if (iou(pool[j].obb, c.center.obb) > iou_thresh) {
        taken[j] = true;
        models.insert(pool[j].model_index);
        c.members.push_back(pool[j]);
      }
    }
    clusters.push_back(std::move(c));
  }
  return clusters;
}

/// Keeps only cluster centers within each model: a per-model greedy NMS.
inline std::vector<Detection> per_model_nms(std::span<const Detection> dets, double iou_thresh) {
  detail::check_iou_thresh(iou_thresh);
  std::vector<Detection> sorted(dets.begin(), dets.end());
  std::stable_sort(sorted.begin(), sorted.end(), detail::cluster_order);
  std::vector<Detection> kept;
  for (const auto& d : sorted) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.model_index == d.model_index && k.image_id == d.image_id && k.category == d.category &&
             iou(k.obb, d.obb) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

inline DetectionRun per_model_nms(const DetectionRun& run, double iou_thresh) {
  DetectionRun out{run.model_name, run.model_index, {}};
  for (auto& [key, dets] : group_detections({run})) {
    auto kept = per_model_nms(dets, iou_thresh);
    out.detections.insert(out.detections.end(), kept.begin(), kept.end());
  }
  return out;
}

/// Clusters every (image, category) group of the given runs. Groups come back
/// in key order regardless of the thread count.
inline std::vector<std::vector<Cluster>> cluster_runs(const std::vector<DetectionRun>& runs, double iou_thresh,
                                                      unsigned threads = 1) {
  detail::check_iou_thresh(iou_thresh);
  const auto groups = group_detections(runs);
  std::vector<const std::vector<Detection>*> refs;
  for (const auto& [key, dets] : groups) refs.push_back(&dets);
  std::vector<std::vector<Cluster>> out(refs.size());
  parallel_for(refs.size(), threads, [&](std::size_t i) { out[i] = cluster_detections(*refs[i], iou_thresh); });
  return out;
}

inline std::vector<Cluster> flatten(std::vector<std::vector<Cluster>> nested) {
  std::vector<Cluster> flat;
  for (auto& g : nested)
    for (auto& c : g) flat.push_back(std::move(c));
  return flat;
}

/// Member logits laid out by model slot (1-based model_index -> position
/// index-1); absent models get z_miss.
inline std::vector<double> build_feature_vector(const Cluster& cluster, int num_models, double z_miss) {
  std::vector<double> z(static_cast<std::size_t>(num_models), z_miss);
  for (const Detection* d : cluster.all()) {
    if (d->model_index < 1 || d->model_index > num_models)
      throw ContractError("model index " + std::to_string(d->model_index) + " outside 1.." +
                          std::to_string(num_models));
    z[static_cast<std::size_t>(d->model_index - 1)] = d->logit;
  }
  return z;
}

}  // namespace obbstack
