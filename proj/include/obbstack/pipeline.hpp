#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "obbstack/clustering.hpp"
#include "obbstack/error.hpp"
#include "obbstack/eval.hpp"
#include "obbstack/fusion.hpp"
#include "obbstack/metalearner.hpp"

namespace obbstack {

inline EnsembleMethod parse_method(const std::string& s) {
  if (s == "stacking") return EnsembleMethod::stacking;
  if (s == "nms") return EnsembleMethod::nms;
  if (s == "wbf") return EnsembleMethod::wbf;
  throw ConfigError("unknown ensemble method '" + s + "' (expected stacking, nms or wbf)");
}

/// Knobs shared by the training, fusion and evaluation stages.
struct PipelineConfig {
  EnsembleMethod method = EnsembleMethod::stacking;
  double iou_thresh = kDefaultIouThresh;
  double iou_label_thresh = kDefaultLabelIou;
  double z_miss = kDefaultZMiss;
  double lambda = kDefaultLambda;
  double min_score = kDefaultMinScore;
  ApMode ap_mode = ApMode::voc12;
  double match_iou = 0.5;
  bool per_model_nms = false;
  unsigned threads = 1;

  void validate() const {
    auto unit_open = [](double v) { return v > 0.0 && v < 1.0; };
    if (!unit_open(iou_thresh)) throw ConfigError("iou_thresh must lie in (0, 1)");
    if (!(iou_label_thresh > 0.0 && iou_label_thresh <= 1.0)) throw ConfigError("iou_label_thresh must lie in (0, 1]");
    if (!(match_iou > 0.0 && match_iou <= 1.0)) throw ConfigError("match_iou must lie in (0, 1]");
    if (!std::isfinite(z_miss)) throw ConfigError("z_miss must be finite");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a non-negative number");
    if (!(min_score >= 0.0 && min_score < 1.0)) throw ConfigError("min_score must lie in [0, 1)");
    if (threads == 0) throw ConfigError("threads must be at least 1");
  }

  EnsembleOptions ensemble_options() const { return {iou_thresh, min_score, threads}; }
  EvalConfig eval_config() const { return {match_iou, ap_mode, threads}; }

  /// Settings that affect results; thread count is deliberately absent.
  nlohmann::ordered_json to_json() const {
    return {{"method", to_string(method)},     {"iou_thresh", iou_thresh}, {"iou_label_thresh", iou_label_thresh},
            {"z_miss", z_miss},                {"lambda", lambda},         {"min_score", min_score},
            {"ap_mode", to_string(ap_mode)},   {"match_iou", match_iou},   {"per_model_nms", per_model_nms}};
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
      if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
      if (j.contains("iou_thresh")) c.iou_thresh = j["iou_thresh"].get<double>();
      if (j.contains("iou_label_thresh")) c.iou_label_thresh = j["iou_label_thresh"].get<double>();
      if (j.contains("z_miss")) c.z_miss = j["z_miss"].get<double>();
      if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
      if (j.contains("min_score")) c.min_score = j["min_score"].get<double>();
      if (j.contains("ap_mode")) c.ap_mode = parse_ap_mode(j["ap_mode"].get<std::string>());
      if (j.contains("match_iou")) c.match_iou = j["match_iou"].get<double>();
      if (j.contains("per_model_nms")) c.per_model_nms = j["per_model_nms"].get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("pipeline settings: ") + e.what());
    }
    c.validate();
    return c;
  }
};

inline std::vector<DetectionRun> prepare_runs(std::vector<DetectionRun> runs, const PipelineConfig& cfg) {
  if (cfg.per_model_nms)
    for (auto& r : runs) r = per_model_nms(r, cfg.iou_thresh);
  return runs;
}

inline std::vector<std::string> model_names(const std::vector<DetectionRun>& runs) {
  std::vector<std::string> names;
  for (const auto& r : runs) names.push_back(r.model_name);
  return names;
}

struct TrainingSet {
  std::vector<Cluster> clusters;
  std::vector<LabeledCluster> samples;
};

inline TrainingSet build_training_set(const std::vector<DetectionRun>& val_runs, const GroundTruth& val_gt,
                                      const PipelineConfig& cfg) {
  check_registry(val_runs, nullptr);
  TrainingSet ts;
  ts.clusters = flatten(cluster_runs(prepare_runs(val_runs, cfg), cfg.iou_thresh, cfg.threads));
  ts.samples = label_clusters(ts.clusters, val_gt, cfg.iou_label_thresh, static_cast<int>(val_runs.size()), cfg.z_miss);
  return ts;
}

/// Stage 1: cluster validation detections, label them against ground truth
/// and fit the meta-learner.
inline MetaLearner train_meta(const std::vector<DetectionRun>& val_runs, const GroundTruth& val_gt,
                              const PipelineConfig& cfg) {
  cfg.validate();
  const auto ts = build_training_set(val_runs, val_gt, cfg);
  if (ts.samples.empty()) throw DegenerateData("validation runs produced no clusters");
  FitConfig fc;
  fc.lambda = cfg.lambda;
  return fit(ts.samples, model_names(val_runs), cfg.z_miss, fc);
}

/// Stage 2: fuse test detections with the chosen ensemble method.
inline DetectionRun fuse(const std::vector<DetectionRun>& test_runs, const MetaLearner* learner,
                         const PipelineConfig& cfg) {
  cfg.validate();
  const auto runs = prepare_runs(test_runs, cfg);
  switch (cfg.method) {
    case EnsembleMethod::stacking:
      if (!learner) throw ConfigError("stacking needs a meta-learner");
      return ensemble_stacking(runs, *learner, cfg.ensemble_options());
    case EnsembleMethod::nms: return ensemble_nms(runs, cfg.ensemble_options());
    case EnsembleMethod::wbf: return ensemble_wbf(runs, cfg.ensemble_options());
  }
  throw ConfigError("unhandled ensemble method");
}

}  // namespace obbstack
