#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/geometry.hpp"
#include "obbstack/parallel.hpp"

namespace obbstack {

enum class ApMode { voc07, voc12 };

inline std::string to_string(ApMode m) { return m == ApMode::voc07 ? "voc07" : "voc12"; }

inline ApMode parse_ap_mode(const std::string& s) {
  if (s == "voc07") return ApMode::voc07;
  if (s == "voc12") return ApMode::voc12;
  throw ConfigError("unknown AP mode '" + s + "' (expected voc07 or voc12)");
}

enum class MatchFlag { tp, fp, ignored };

struct EvalConfig {
  double match_iou = 0.5;
  ApMode mode = ApMode::voc12;
  unsigned threads = 1;
};

struct PrPoint {
  double recall;
  double precision;
};

struct EvalResult {
  std::map<std::string, double> per_category_ap;
  double map = 0.0;
  std::map<std::string, std::vector<PrPoint>> pr_curves;
  double matching_iou = 0.5;
  ApMode mode = ApMode::voc12;
};

/// Greedy matching of detections (already in descending score order) against
/// the ground truth of one category. A detection takes the best-overlapping
/// unmatched, non-difficult box with IoU >= thresh; failing that, overlap with
/// a difficult box makes it ignored; otherwise it is a false positive.
inline std::vector<MatchFlag> match_detections(std::span<const Detection> dets,
                                               std::span<const GroundTruthObject> gts, double iou_match_thresh) {
  std::map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t i = 0; i < gts.size(); ++i) gt_by_image[gts[i].image_id].push_back(i);
  std::vector<bool> used(gts.size(), false);
  std::vector<MatchFlag> flags;
  flags.reserve(dets.size());
  for (const auto& d : dets) {
    MatchFlag flag = MatchFlag::fp;
    if (auto it = gt_by_image.find(d.image_id); it != gt_by_image.end()) {
      double best = -1.0;
      std::size_t best_idx = gts.size();
      bool hits_difficult = false;
      for (std::size_t gi : it->second) {
        if (gts[gi].category != d.category) continue;
        const double o = iou(d.obb, gts[gi].obb);
        if (o < iou_match_thresh) continue;
        if (gts[gi].difficult) {
          hits_difficult = true;
        } else if (!used[gi] && o > best) {
          best = o;
          best_idx = gi;
        }
      }
      if (best_idx < gts.size()) {
        used[best_idx] = true;
        flag = MatchFlag::tp;
      } else if (hits_difficult) {
        flag = MatchFlag::ignored;
      }
    }
    flags.push_back(flag);
  }
  return flags;
}

/// Precision/recall staircase after dropping ignored detections.
inline std::vector<PrPoint> pr_curve(std::span<const MatchFlag> flags, std::size_t n_positive) {
  std::vector<PrPoint> pts;
  double tp = 0, fp = 0;
  for (MatchFlag f : flags) {
    if (f == MatchFlag::ignored) continue;
    (f == MatchFlag::tp ? tp : fp) += 1.0;
    pts.push_back({n_positive ? tp / static_cast<double>(n_positive) : 0.0, tp / (tp + fp)});
  }
  return pts;
}

/// AP from flags in descending-score order. voc07 is 11-point interpolated
/// precision; voc12 integrates the monotone precision envelope.
inline double average_precision(std::span<const MatchFlag> flags, std::size_t n_positive, ApMode mode) {
  if (n_positive == 0) {
    warn("average_precision: no positives; AP defined as 0");
    return 0.0;
  }
  const auto pts = pr_curve(flags, n_positive);
  if (mode == ApMode::voc07) {
    double ap = 0.0;
    for (int i = 0; i <= 10; ++i) {
      const double t = i / 10.0;
      double p = 0.0;
      for (const auto& pt : pts)
        if (pt.recall >= t) p = std::max(p, pt.precision);
      ap += p / 11.0;
    }
    return ap;
  }
  std::vector<double> rec{0.0}, prec{0.0};
  for (const auto& pt : pts) {
    rec.push_back(pt.recall);
    prec.push_back(pt.precision);
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < rec.size(); ++i)
    if (rec[i] != rec[i - 1]) ap += (rec[i] - rec[i - 1]) * prec[i];
  return ap;
}

/// Per-category AP over every category that appears in the ground truth, and
/// their mean.
inline EvalResult evaluate(const DetectionRun& run, const GroundTruth& gt, const EvalConfig& cfg = {}) {
  std::map<std::string, std::vector<GroundTruthObject>> gt_by_cat;
  for (const auto& g : gt.objects) gt_by_cat[g.category].push_back(g);
  std::map<std::string, std::vector<Detection>> det_by_cat;
  for (const auto& d : run.detections)
    if (gt_by_cat.contains(d.category)) det_by_cat[d.category].push_back(d);

  std::vector<std::string> cats;
  for (const auto& [c, _] : gt_by_cat) cats.push_back(c);
  std::vector<double> aps(cats.size());
  std::vector<std::vector<PrPoint>> curves(cats.size());
  parallel_for(cats.size(), cfg.threads, [&](std::size_t i) {
    const auto& gts = gt_by_cat.at(cats[i]);
    std::vector<Detection> dets;
    if (auto it = det_by_cat.find(cats[i]); it != det_by_cat.end()) dets = it->second;
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    const std::size_t npos = static_cast<std::size_t>(
        std::count_if(gts.begin(), gts.end(), [](const GroundTruthObject& g) { return !g.difficult; }));
    const auto flags = match_detections(dets, gts, cfg.match_iou);
    aps[i] = average_precision(flags, npos, cfg.mode);
    curves[i] = pr_curve(flags, npos);
  });

  EvalResult res;
  res.matching_iou = cfg.match_iou;
  res.mode = cfg.mode;
  for (std::size_t i = 0; i < cats.size(); ++i) {
    res.per_category_ap[cats[i]] = aps[i];
    res.pr_curves[cats[i]] = std::move(curves[i]);
  }
  res.map = cats.empty() ? 0.0 : std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(cats.size());
  return res;
}

inline nlohmann::ordered_json eval_to_json(const EvalResult& r, const std::string& method) {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["ap_mode"] = to_string(r.mode);
  j["matching_iou"] = r.matching_iou;
  j["map"] = r.map;
  j["per_category_ap"] = nlohmann::ordered_json::object();
  for (const auto& [c, ap] : r.per_category_ap) j["per_category_ap"][c] = ap;
  j["pr_curves"] = nlohmann::ordered_json::object();
  for (const auto& [c, pts] : r.pr_curves) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : pts) arr.push_back({p.recall, p.precision});
    j["pr_curves"][c] = std::move(arr);
  }
  return j;
}

/// Aligned table: one row per method, one column per category, mAP last;
/// values in percent.
inline std::string format_ap_table(const std::vector<std::pair<std::string, EvalResult>>& rows) {
  std::set<std::string> cat_set;
  for (const auto& [_, r] : rows)
    for (const auto& [c, ap] : r.per_category_ap) cat_set.insert(c);
  std::vector<std::string> cats(cat_set.begin(), cat_set.end());

  std::size_t name_w = 6;
  for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
  std::vector<std::size_t> col_w;
  for (const auto& c : cats) col_w.push_back(std::max<std::size_t>(6, c.size()));

  auto pad = [](const std::string& s, std::size_t w, bool left) {
    const std::string fill(w > s.size() ? w - s.size() : 0, ' ');
    return left ? s + fill : fill + s;
  };
  std::string out = pad("Method", name_w, true) + " |";
  for (std::size_t i = 0; i < cats.size(); ++i) out += " " + pad(cats[i], col_w[i], false);
  out += " | " + pad("mAP", 6, false) + "\n";
  const std::size_t rule = out.size() - 1;
  out += std::string(rule, '-') + "\n";
  for (const auto& [name, r] : rows) {
    out += pad(name, name_w, true) + " |";
    for (std::size_t i = 0; i < cats.size(); ++i) {
      auto it = r.per_category_ap.find(cats[i]);
      out += " " + pad(it == r.per_category_ap.end() ? "-" : detail::fmt_double(100.0 * it->second, "%.2f"), col_w[i],
                       false);
    }
    out += " | " + pad(detail::fmt_double(100.0 * r.map, "%.2f"), 6, false) + "\n";
  }
  return out;
}

}  // namespace obbstack
