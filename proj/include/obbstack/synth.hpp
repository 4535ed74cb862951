#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/eval.hpp"
#include "obbstack/fusion.hpp"
#include "obbstack/geometry.hpp"
#include "obbstack/hash.hpp"
#include "obbstack/metalearner.hpp"
#include "obbstack/parallel.hpp"
#include "obbstack/pipeline.hpp"

namespace obbstack {

/// Generative description of one simulated detector.
///
/// Every ground-truth object has a hidden hardness a ~ N(0, 2^2) shared by all
/// detectors. A detector sees a through its own noise of std 4 / skill and
/// finds the object with probability `recall`, more often when its view says
/// the object is easy. It also draws a private localization term e ~ N(0, 1). Its box is correct when
/// 0.5 + a + e + xi > 0 with xi ~ N(0, 1) unseen, otherwise it is displaced
/// off the object. The detector's true logit is the exact posterior log-odds
/// of correctness given what it saw, so temperature 1 means calibrated scores;
/// reported logits are temperature * true logit (T > 1 is overconfident).
/// Background false positives arrive at `fp_rate` per image with strongly
/// negative logits.
///
/// A clone replays its parent's random draws, blending every latent normal
/// with an independent one by weight `clone_noise`: 0 gives an exact copy,
/// large values an independent detector with the same parameters.
struct DetectorProfile {
  std::string name;
  double recall = 0.9;
  double fp_rate = 2.0;
  double loc_sigma = 0.05;
  double angle_sigma = 0.03;
  double skill = 3.0;
  double temperature = 1.0;
  std::optional<std::string> clone_of;
  double clone_noise = 0.0;

  void validate() const {
    if (!(recall > 0.0 && recall <= 1.0)) throw ConfigError("profile '" + name + "': recall must lie in (0, 1]");
    if (!(fp_rate >= 0.0)) throw ConfigError("profile '" + name + "': fp_rate must be >= 0");
    if (!(loc_sigma >= 0.0) || !(angle_sigma >= 0.0) || !(clone_noise >= 0.0))
      throw ConfigError("profile '" + name + "': noise levels must be >= 0");
    if (!(skill > 0.0)) throw ConfigError("profile '" + name + "': skill must be > 0");
    if (!(temperature > 0.0)) throw ConfigError("profile '" + name + "': temperature must be > 0");
  }
};

struct SceneConfig {
  int n_images = 100;
  int min_objects = 3;
  int max_objects = 8;
  double field_size = 512.0;
  std::vector<std::string> categories{"plane", "ship", "vehicle"};
  std::uint64_t seed = 0;

  void validate() const {
    if (n_images < 0) throw ConfigError("n_images must be >= 0");
    if (min_objects < 0 || max_objects < min_objects) throw ConfigError("need 0 <= min_objects <= max_objects");
    if (!(field_size >= 256.0)) throw ConfigError("field_size must be at least 256 px");
    if (categories.empty()) throw ConfigError("at least one category is required");
  }
};

namespace detail {

inline constexpr double kMinSide = 8.0;
inline constexpr double kMaxSide = 120.0;
inline constexpr double kMaxAspect = 6.0;

// Independent stream per (seed, purpose, image): parallel generation cannot
// change the output.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t image) {
  return std::mt19937_64(mix_seed(mix_seed(seed, purpose), image));
}

enum : std::uint64_t { kStreamScene = 1, kStreamLatent = 2, kStreamJitter = 3, kStreamHardness = 4 };

inline constexpr double kHardnessSigma = 2.0;
inline constexpr double kViewScale = 4.0;
inline constexpr double kCorrectBias = 0.5;
inline constexpr double kDetectViewCorr = 0.7;

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gauss(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double normal_cdf(double g) { return 0.5 * std::erfc(-g / std::numbers::sqrt2); }

inline OBB random_box(std::mt19937_64& rng, double field) {
  const double w = uniform(rng, kMinSide, kMaxSide);
  const double aspect = uniform(rng, 1.0, kMaxAspect);
  const double h = std::max(w / aspect, 2.0);
  const double theta = uniform(rng, 0.0, kPi);
  const double margin = 0.5 * w;
  return canonicalize(uniform(rng, margin, field - margin), uniform(rng, margin, field - margin), w, h, theta);
}

inline std::string image_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img%05d", i);
  return buf;
}

// Hidden hardness of an object, a pure function of its identity.
inline double object_hardness(std::uint64_t scene_key, const std::string& image_id, std::size_t index) {
  auto rng = stream(scene_key, kStreamHardness, mix_seed(fnv1a(image_id), index));
  return kHardnessSigma * gauss(rng);
}

// Quantile of the standard normal by bisection; -inf at 0.
inline double inverse_normal_cdf(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200 && lo < hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// log(Phi(x) / Phi(-x)), with x kept where erfc stays accurate.
inline double probit_logit(double x) {
  x = std::clamp(x, -30.0, 30.0);
  return std::log(normal_cdf(x)) - std::log(normal_cdf(-x));
}

}  // namespace detail

/// Random non-overlapping canonical boxes, aspect ratios in [1, 6], long sides in [8, 120] px.
inline GroundTruth generate_scenes(const SceneConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<GroundTruthObject>> per_image(static_cast<std::size_t>(cfg.n_images));
  for (int i = 0; i < cfg.n_images; ++i) {
    auto rng = detail::stream(cfg.seed, detail::kStreamScene, static_cast<std::uint64_t>(i));
    const int n = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);
    auto& objs = per_image[static_cast<std::size_t>(i)];
    for (int k = 0; k < n; ++k) {
      OBB box;
      for (int attempt = 0;; ++attempt) {
        box = detail::random_box(rng, cfg.field_size);
        const bool clear = std::none_of(objs.begin(), objs.end(),
                                        [&](const GroundTruthObject& o) { return intersection_area(o.obb, box) > 0.0; });
        if (clear || attempt >= 200) break;
      }
      const auto cat = std::uniform_int_distribution<std::size_t>(0, cfg.categories.size() - 1)(rng);
      objs.push_back({box, cfg.categories[cat], false, detail::image_name(i)});
    }
  }
  GroundTruth gt;
  for (int i = 0; i < cfg.n_images; ++i) {
    gt.images.push_back(detail::image_name(i));
    for (auto& o : per_image[static_cast<std::size_t>(i)]) gt.objects.push_back(std::move(o));
  }
  return gt;
}

/// Streams for one simulated detector. Clones share `latent` with their parent
/// and differ only through `jitter`.
struct SimulationSeeds {
  std::uint64_t scene = 0;   // object hardness, shared by every detector
  std::uint64_t latent = 0;  // detection, logit and box draws
  std::uint64_t jitter = 0;  // clone perturbations
};

inline DetectionRun simulate_detector(const GroundTruth& gt, const DetectorProfile& profile, const SimulationSeeds& seeds,
                                      int model_index, unsigned threads = 1) {
  profile.validate();
  std::map<std::string, std::vector<const GroundTruthObject*>> by_image;
  for (const auto& img : gt.images) by_image[img];
  for (const auto& o : gt.objects) by_image[o.image_id].push_back(&o);
  std::vector<std::string> images;
  for (const auto& [img, _] : by_image) images.push_back(img);
  double field = 0.0;
  for (const auto& o : gt.objects) field = std::max({field, o.obb.x + 0.5 * o.obb.w, o.obb.y + 0.5 * o.obb.w});
  field = std::max(field, 256.0);

  std::vector<std::vector<Detection>> per_image(images.size());
  parallel_for(images.size(), threads, [&](std::size_t ii) {
    const std::string& img = images[ii];
    const auto& objs = by_image.at(img);
    const std::uint64_t img_key = fnv1a(img);
    auto rng = detail::stream(seeds.latent, detail::kStreamLatent, img_key);
    auto jit = detail::stream(seeds.jitter, detail::kStreamJitter, img_key);
    auto& out = per_image[ii];

    auto max_iou_with_gt = [&](const OBB& b) {
      double best = 0.0;
      for (const auto* o : objs) best = std::max(best, iou(b, o->obb));
      return best;
    };
    // Clones mix each shared latent normal with one of their own; the mix is
    // again standard normal, so marginals (and calibration) are unchanged.
    const double c = profile.clone_noise;
    const double mix = 1.0 / std::sqrt(1.0 + c * c);
    auto latent = [&] {
      const double g = detail::gauss(rng);
      const double h = detail::gauss(jit);
      return c > 0.0 ? (g + c * h) * mix : g;
    };
    auto emit = [&](OBB box, double true_logit, const std::string& category) {
      const double jx = detail::gauss(jit), jy = detail::gauss(jit), jt = detail::gauss(jit);
      if (c > 0.0) {
        const double s = 0.01 * std::min(c, 1.0);
        box = canonicalize(box.x + s * box.w * jx, box.y + s * box.w * jy, box.w, box.h, box.theta + 0.5 * s * jt);
      }
      const double logit = profile.temperature * true_logit;
      out.push_back({box, clamp_score(sigmoid(logit)), logit, model_index, category, img});
    };

    const double view_sigma = detail::kViewScale / profile.skill;
    const double shrink = detail::kHardnessSigma * detail::kHardnessSigma /
                          (detail::kHardnessSigma * detail::kHardnessSigma + view_sigma * view_sigma);
    const double post_sd =
        std::sqrt(detail::kHardnessSigma * detail::kHardnessSigma * (1.0 - shrink) + 1.0);

    const double detect_cut = detail::inverse_normal_cdf(1.0 - profile.recall);

    for (std::size_t k = 0; k < objs.size(); ++k) {
      const GroundTruthObject& g = *objs[k];
      // Fixed number of draws per object keeps streams aligned across profiles.
      const double u_detect = latent();
      const double view_noise = latent();
      const double e = latent();
      const double xi = latent();
      auto box_rng = std::mt19937_64(rng());
      const double a = detail::object_hardness(seeds.scene, img, k);
      const double view = a + view_sigma * view_noise;
      // Detection leans on the detector's own view, so a miss hints at a hard object.
      const double r = detail::kDetectViewCorr;
      const double d = r * view / std::hypot(detail::kHardnessSigma, view_sigma) + std::sqrt(1.0 - r * r) * u_detect;
      if (d < detect_cut) continue;
      const double x = (detail::kCorrectBias + shrink * view + e) / post_sd;
      const double true_logit = detail::probit_logit(x);
      const double p = detail::normal_cdf(x);
      const bool correct = detail::kCorrectBias + a + e + xi > 0.0;
      if (correct) {
        OBB box = g.obb;
        const double spread = profile.loc_sigma * (1.5 - p);
        for (int attempt = 0; attempt < 20; ++attempt) {
          const double cs = std::cos(g.obb.theta), sn = std::sin(g.obb.theta);
          const double du = spread * g.obb.w * detail::gauss(box_rng);
          const double dv = spread * g.obb.h * detail::gauss(box_rng);
          const OBB cand = canonicalize(g.obb.x + du * cs - dv * sn, g.obb.y + du * sn + dv * cs,
                                        g.obb.w * std::exp(spread * detail::gauss(box_rng)),
                                        g.obb.h * std::exp(spread * detail::gauss(box_rng)),
                                        g.obb.theta + profile.angle_sigma * detail::gauss(box_rng));
          if (iou(cand, g.obb) >= 0.6) {
            box = cand;
            break;
          }
        }
        emit(box, true_logit, g.category);
      } else {
        for (int attempt = 0; attempt < 20; ++attempt) {
          const double dir = detail::uniform(box_rng, 0.0, 2.0 * kPi);
          const double dist = detail::uniform(box_rng, 0.6, 1.2) * g.obb.w;
          const OBB cand = canonicalize(g.obb.x + dist * std::cos(dir), g.obb.y + dist * std::sin(dir), g.obb.w,
                                        g.obb.h, g.obb.theta + profile.angle_sigma * detail::gauss(box_rng));
          if (max_iou_with_gt(cand) < 0.3) {
            emit(cand, true_logit, g.category);
            break;
          }
        }
      }
    }

    const auto n_fp = std::poisson_distribution<int>(profile.fp_rate)(rng);
    std::vector<std::string> cats;
    for (const auto* o : objs) cats.push_back(o->category);
    if (cats.empty()) cats.push_back("background");
    for (int f = 0; f < n_fp; ++f) {
      const OBB box = detail::random_box(rng, field);
      const auto cat = std::uniform_int_distribution<std::size_t>(0, cats.size() - 1)(rng);
      const double true_logit = -profile.skill - 2.0 + latent();
      if (max_iou_with_gt(box) < 0.3) emit(box, true_logit, cats[cat]);
    }
  });

  DetectionRun run{profile.name, model_index, {}};
  for (auto& v : per_image)
    for (auto& d : v) run.detections.push_back(std::move(d));
  return run;
}

inline DetectionRun simulate_detector(const GroundTruth& gt, const DetectorProfile& profile, std::uint64_t seed,
                                      int model_index) {
  return simulate_detector(gt, profile, SimulationSeeds{seed, seed, seed}, model_index);
}

struct ScenarioConfig {
  SceneConfig scene;
  double val_fraction = 0.5;
  std::vector<DetectorProfile> profiles;
  PipelineConfig pipeline;

  void validate() const {
    scene.validate();
    pipeline.validate();
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
    if (profiles.empty()) throw ConfigError("scenario needs at least one detector profile");
    for (std::size_t i = 0; i < profiles.size(); ++i) {
      profiles[i].validate();
      for (std::size_t j = 0; j < i; ++j)
        if (profiles[j].name == profiles[i].name) throw ConfigError("duplicate profile name '" + profiles[i].name + "'");
      if (profiles[i].clone_of) {
        const auto& parent = *profiles[i].clone_of;
        const bool found = std::any_of(profiles.begin(), profiles.begin() + static_cast<long>(i),
                                       [&](const DetectorProfile& p) { return p.name == parent && !p.clone_of; });
        if (!found) throw ConfigError("profile '" + profiles[i].name + "' clones unknown or later profile '" + parent + "'");
      }
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["scene"] = {{"n_images", scene.n_images},     {"min_objects", scene.min_objects},
                  {"max_objects", scene.max_objects}, {"field_size", scene.field_size},
                  {"categories", scene.categories},   {"seed", scene.seed}};
    j["val_fraction"] = val_fraction;
    j["profiles"] = nlohmann::ordered_json::array();
    for (const auto& p : profiles) {
      nlohmann::ordered_json jp{{"name", p.name},         {"recall", p.recall},
                                {"fp_rate", p.fp_rate},   {"loc_sigma", p.loc_sigma},
                                {"angle_sigma", p.angle_sigma}, {"skill", p.skill},
                                {"temperature", p.temperature}};
      if (p.clone_of) {
        jp["clone_of"] = *p.clone_of;
        jp["clone_noise"] = p.clone_noise;
      }
      j["profiles"].push_back(std::move(jp));
    }
    j["pipeline"] = pipeline.to_json();
    return j;
  }

  static ScenarioConfig from_json(const nlohmann::json& j) {
    ScenarioConfig c;
    try {
      if (j.contains("scene")) {
        const auto& s = j["scene"];
        c.scene.n_images = s.value("n_images", c.scene.n_images);
        c.scene.min_objects = s.value("min_objects", c.scene.min_objects);
        c.scene.max_objects = s.value("max_objects", c.scene.max_objects);
        c.scene.field_size = s.value("field_size", c.scene.field_size);
        c.scene.categories = s.value("categories", c.scene.categories);
        c.scene.seed = s.value("seed", c.scene.seed);
      }
      c.val_fraction = j.value("val_fraction", c.val_fraction);
      for (const auto& jp : j.at("profiles")) {
        DetectorProfile p;
        p.name = jp.at("name").get<std::string>();
        const DetectorProfile* parent = nullptr;
        if (jp.contains("clone_of")) {
          const auto pname = jp["clone_of"].get<std::string>();
          for (const auto& q : c.profiles)
            if (q.name == pname) parent = &q;
          if (!parent) throw ConfigError("profile '" + p.name + "' clones unknown profile '" + pname + "'");
          p = *parent;  // clones inherit every generative parameter
          p.name = jp.at("name").get<std::string>();
          p.clone_of = pname;
          p.clone_noise = jp.value("clone_noise", 0.0);
        } else {
          p.recall = jp.value("recall", p.recall);
          p.fp_rate = jp.value("fp_rate", p.fp_rate);
          p.loc_sigma = jp.value("loc_sigma", p.loc_sigma);
          p.angle_sigma = jp.value("angle_sigma", p.angle_sigma);
          p.skill = jp.value("skill", p.skill);
          p.temperature = jp.value("temperature", p.temperature);
        }
        c.profiles.push_back(std::move(p));
      }
      if (j.contains("pipeline")) c.pipeline = PipelineConfig::from_json(j["pipeline"]);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("scenario config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

struct SyntheticScene {
  GroundTruth val_gt;
  GroundTruth test_gt;
  std::vector<DetectionRun> val_runs;
  std::vector<DetectionRun> test_runs;
  std::uint64_t seed = 0;
};

namespace detail {

inline GroundTruth subset(const GroundTruth& gt, std::size_t first, std::size_t last) {
  GroundTruth out;
  out.images.assign(gt.images.begin() + static_cast<long>(first), gt.images.begin() + static_cast<long>(last));
  for (const auto& o : gt.objects)
    if (std::binary_search(out.images.begin(), out.images.end(), o.image_id)) out.objects.push_back(o);
  return out;
}

inline DetectionRun drop_below(DetectionRun run, double min_score) {
  std::erase_if(run.detections, [&](const Detection& d) { return d.score < min_score; });
  return run;
}

}  // namespace detail

/// Generates a scene, splits its images into validation and test halves and
/// simulates every profile on both. Profile i (1-based) uses model index i.
inline SyntheticScene simulate_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  const GroundTruth all = generate_scenes(cfg.scene);
  const auto n_val = static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(all.images.size())));
  SyntheticScene scene;
  scene.seed = cfg.scene.seed;
  scene.val_gt = detail::subset(all, 0, n_val);
  scene.test_gt = detail::subset(all, n_val, all.images.size());

  auto profile_seed = [&](const std::string& name) { return mix_seed(cfg.scene.seed, fnv1a(name)); };
  for (std::size_t i = 0; i < cfg.profiles.size(); ++i) {
    const auto& p = cfg.profiles[i];
    SimulationSeeds seeds{cfg.scene.seed, profile_seed(p.clone_of.value_or(p.name)), profile_seed(p.name)};
    const int idx = static_cast<int>(i + 1);
    for (auto [gt, runs] : {std::pair{&scene.val_gt, &scene.val_runs}, std::pair{&scene.test_gt, &scene.test_runs}})
      runs->push_back(
          detail::drop_below(simulate_detector(*gt, p, seeds, idx, cfg.pipeline.threads), cfg.pipeline.min_score));
  }
  return scene;
}

struct BenchmarkReport {
  std::vector<std::pair<std::string, EvalResult>> rows;  // members, then nms, wbf, stacking
  MetaLearner learner;
  DetectionRun stacking_run;
  DetectionRun nms_run;
  DetectionRun wbf_run;

  double map_of(const std::string& name) const {
    for (const auto& [n, r] : rows)
      if (n == name) return r.map;
    throw ContractError("no benchmark row named '" + name + "'");
  }
  double best_member_map() const {
    double best = 0.0;
    for (std::size_t i = 0; i + 3 < rows.size(); ++i) best = std::max(best, rows[i].second.map);
    return best;
  }
};

/// Fits the meta-learner on the validation split, fuses the test split with
/// every method and evaluates all of them.
inline BenchmarkReport run_benchmark(const SyntheticScene& scene, const PipelineConfig& cfg) {
  BenchmarkReport rep;
  rep.learner = train_meta(scene.val_runs, scene.val_gt, cfg);
  const auto ecfg = cfg.eval_config();
  for (const auto& run : scene.test_runs) rep.rows.emplace_back(run.model_name, evaluate(run, scene.test_gt, ecfg));
  PipelineConfig c = cfg;
  c.method = EnsembleMethod::nms;
  rep.nms_run = fuse(scene.test_runs, nullptr, c);
  c.method = EnsembleMethod::wbf;
  rep.wbf_run = fuse(scene.test_runs, nullptr, c);
  c.method = EnsembleMethod::stacking;
  rep.stacking_run = fuse(scene.test_runs, &rep.learner, c);
  rep.rows.emplace_back("nms", evaluate(rep.nms_run, scene.test_gt, ecfg));
  rep.rows.emplace_back("wbf", evaluate(rep.wbf_run, scene.test_gt, ecfg));
  rep.rows.emplace_back("stacking", evaluate(rep.stacking_run, scene.test_gt, ecfg));
  return rep;
}

inline BenchmarkReport run_benchmark(const ScenarioConfig& cfg) { return run_benchmark(simulate_scenario(cfg), cfg.pipeline); }

}  // namespace obbstack
