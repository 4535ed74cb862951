#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "obbstack/geometry.hpp"

namespace obbstack {

inline constexpr double kScoreClamp = 1e-6;

inline double clamp_score(double s) { return std::clamp(s, kScoreClamp, 1.0 - kScoreClamp); }

/// Overflow-safe logistic function.
inline double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

/// log(s / (1 - s)) of the clamped score.
inline double score_to_logit(double s) {
  const double c = clamp_score(s);
  return std::log(c) - std::log1p(-c);
}

struct Detection {
  OBB obb;
  double score = 0.5;
  double logit = 0.0;
  int model_index = 0;  // 1..M for member runs, 0 for ensemble output
  std::string category;
  std::string image_id;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Builds a detection from a raw score: clamps it and derives the logit.
inline Detection make_detection(const OBB& obb, double score, int model_index, std::string category,
                                std::string image_id) {
  const double s = clamp_score(score);
  return Detection{obb, s, score_to_logit(s), model_index, std::move(category), std::move(image_id)};
}

struct DetectionRun {
  std::string model_name;
  int model_index = 0;
  std::vector<Detection> detections;

  friend bool operator==(const DetectionRun&, const DetectionRun&) = default;
};

struct GroundTruthObject {
  OBB obb;
  std::string category;
  bool difficult = false;
  std::string image_id;

  friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

/// Labeled reference objects plus the ordered list of images they cover
/// (images with no objects still count).
struct GroundTruth {
  std::vector<std::string> images;
  std::vector<GroundTruthObject> objects;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

using ImageCategory = std::pair<std::string, std::string>;

/// Detections grouped by (image, category); std::map keeps iteration order
/// deterministic.
inline std::map<ImageCategory, std::vector<Detection>> group_detections(
    const std::vector<DetectionRun>& runs) {
  std::map<ImageCategory, std::vector<Detection>> groups;
  for (const auto& run : runs)
    for (const auto& d : run.detections) groups[{d.image_id, d.category}].push_back(d);
  return groups;
}

inline std::map<ImageCategory, std::vector<GroundTruthObject>> group_ground_truth(const GroundTruth& gt) {
  std::map<ImageCategory, std::vector<GroundTruthObject>> groups;
  for (const auto& g : gt.objects) groups[{g.image_id, g.category}].push_back(g);
  return groups;
}

}  // namespace obbstack
