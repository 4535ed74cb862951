#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "obbstack/clustering.hpp"
#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/geometry.hpp"

namespace obbstack {

inline constexpr std::string_view kMetaSchema = "obbstack-meta/1";
inline constexpr double kDefaultLambda = 1e-6;
inline constexpr double kDefaultLabelIou = 0.5;

struct TrainingMeta {
  std::size_t n_clusters = 0;
  double final_nll = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;

  friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

/// Logistic regression over member logits: p = sigmoid(z . w + b).
struct MetaLearner {
  std::vector<double> weights;
  double intercept = 0.0;
  std::vector<std::string> models;
  double z_miss = kDefaultZMiss;
  double lambda = kDefaultLambda;
  TrainingMeta training;

  int num_models() const { return static_cast<int>(weights.size()); }

  friend bool operator==(const MetaLearner&, const MetaLearner&) = default;
};

/// A learner with unit weights and zero intercept; fused scores then equal the
/// members' own probabilities.
inline MetaLearner identity_learner(std::vector<std::string> models, double z_miss = kDefaultZMiss) {
  MetaLearner m;
  m.weights.assign(models.size(), 1.0);
  m.models = std::move(models);
  m.z_miss = z_miss;
  return m;
}

struct LabeledCluster {
  std::vector<double> features;
  int label = 0;
  double weight = 1.0;
};

struct CalibrationParams {
  double temperature = 1.0;
  double shift = 0.0;
};

struct FitConfig {
  double lambda = kDefaultLambda;
  double grad_tol = 1e-8;
  int max_iter = 500;
};

inline double linear_predictor(std::span<const double> z, std::span<const double> w, double b) {
  double u = b;
  for (std::size_t k = 0; k < z.size(); ++k) u += z[k] * w[k];
  return u;
}

inline double sigma_wa(std::span<const double> z, const MetaLearner& learner) {
  if (z.size() != learner.weights.size())
    throw ContractError("feature length " + std::to_string(z.size()) + " != model count " +
                        std::to_string(learner.weights.size()));
  return sigmoid(linear_predictor(z, learner.weights, learner.intercept));
}

/// Marks each cluster positive when its center overlaps a same-category
/// ground-truth box in the same image with IoU >= iou_label_thresh.
inline std::vector<LabeledCluster> label_clusters(std::span<const Cluster> clusters, const GroundTruth& gt,
                                                  double iou_label_thresh, int num_models, double z_miss) {
  const auto gt_groups = group_ground_truth(gt);
  std::vector<LabeledCluster> out;
  out.reserve(clusters.size());
  for (const auto& c : clusters) {
    double best = 0.0;
    if (auto it = gt_groups.find({c.image_id, c.category}); it != gt_groups.end())
      for (const auto& g : it->second) best = std::max(best, iou(c.center.obb, g.obb));
    out.push_back({build_feature_vector(c, num_models, z_miss), best >= iou_label_thresh ? 1 : 0, 1.0});
  }
  return out;
}

namespace detail {

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v))
      comp_ += (sum_ - t) + v;
    else
      comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// -log(sigmoid(u)) without overflow.
inline double softplus_neg(double u) { return u >= 0.0 ? std::log1p(std::exp(-u)) : -u + std::log1p(std::exp(u)); }

inline void check_samples(std::span<const LabeledCluster> samples) {
  if (samples.empty()) throw ContractError("labeled sample set is empty");
  const std::size_t m = samples.front().features.size();
  for (const auto& s : samples) {
    if (s.features.size() != m) throw ContractError("inconsistent feature lengths");
    if (s.label != 0 && s.label != 1) throw ContractError("labels must be 0 or 1");
  }
}

struct Objective {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

// Parameters are packed as [w_1..w_M, b]; the intercept is not regularized.
inline Objective evaluate_objective(const Eigen::VectorXd& theta, std::span<const LabeledCluster> samples,
                                    double lambda, bool with_hessian) {
  const Eigen::Index m = theta.size() - 1;
  CompensatedSum value;
  std::vector<CompensatedSum> grad(static_cast<std::size_t>(m + 1));
  Objective obj;
  if (with_hessian) obj.hess = Eigen::MatrixXd::Zero(m + 1, m + 1);
  Eigen::VectorXd x(m + 1);
  for (const auto& s : samples) {
    for (Eigen::Index k = 0; k < m; ++k) x[k] = s.features[static_cast<std::size_t>(k)];
    x[m] = 1.0;
    const double u = x.dot(theta);
    value.add(s.weight * (s.label == 1 ? softplus_neg(u) : softplus_neg(-u)));
    const double p = sigmoid(u);
    const double r = s.weight * (p - s.label);
    for (Eigen::Index k = 0; k <= m; ++k) grad[static_cast<std::size_t>(k)].add(r * x[k]);
    if (with_hessian) obj.hess.selfadjointView<Eigen::Lower>().rankUpdate(x, s.weight * p * (1.0 - p));
  }
  const Eigen::VectorXd w = theta.head(m);
  obj.value = value.value() + 0.5 * lambda * w.squaredNorm();
  obj.grad.resize(m + 1);
  for (Eigen::Index k = 0; k <= m; ++k) obj.grad[k] = grad[static_cast<std::size_t>(k)].value();
  obj.grad.head(m) += lambda * w;
  if (with_hessian) {
    obj.hess = obj.hess.selfadjointView<Eigen::Lower>();
    obj.hess.diagonal().head(m).array() += lambda;
  }
  return obj;
}

inline Eigen::VectorXd pack(const MetaLearner& l) {
  Eigen::VectorXd theta(l.num_models() + 1);
  for (int k = 0; k < l.num_models(); ++k) theta[k] = l.weights[static_cast<std::size_t>(k)];
  theta[l.num_models()] = l.intercept;
  return theta;
}

}  // namespace detail

/// Negative log likelihood of the labeled clusters under the learner, plus
/// (lambda / 2) * |w|^2.
inline double nll(const MetaLearner& learner, std::span<const LabeledCluster> samples, double lambda = 0.0) {
  detail::check_samples(samples);
  if (samples.front().features.size() != learner.weights.size())
    throw ContractError("feature length does not match the learner");
  return detail::evaluate_objective(detail::pack(learner), samples, lambda, false).value;
}

/// Gradient of nll() in packed [w, b] order.
inline std::vector<double> nll_gradient(const MetaLearner& learner, std::span<const LabeledCluster> samples,
                                        double lambda = 0.0) {
  detail::check_samples(samples);
  const auto obj = detail::evaluate_objective(detail::pack(learner), samples, lambda, false);
  return {obj.grad.data(), obj.grad.data() + obj.grad.size()};
}

/// Minimizes the regularized NLL with damped Newton steps and a backtracking
/// line search, falling back to steepest descent when the Hessian is not
/// safely positive definite.
inline MetaLearner fit(std::span<const LabeledCluster> samples, std::vector<std::string> models, double z_miss,
                       const FitConfig& config = {}) {
  detail::check_samples(samples);
  const auto m = static_cast<Eigen::Index>(samples.front().features.size());
  if (!models.empty() && static_cast<Eigen::Index>(models.size()) != m)
    throw ContractError("model registry size does not match feature length");
  if (models.empty())
    for (Eigen::Index k = 0; k < m; ++k) models.push_back("model" + std::to_string(k + 1));
  std::size_t positives = 0;
  for (const auto& s : samples) positives += static_cast<std::size_t>(s.label);
  if (positives == 0 || positives == samples.size())
    throw DegenerateData("fitting needs both positive and negative clusters (" + std::to_string(positives) +
                         " of " + std::to_string(samples.size()) + " positive)");
  if (!(config.lambda >= 0.0)) throw ConfigError("lambda must be non-negative");

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(m + 1);
  auto obj = detail::evaluate_objective(theta, samples, config.lambda, true);
  int iter = 0;
  for (; iter < config.max_iter && obj.grad.norm() > config.grad_tol; ++iter) {
    Eigen::VectorXd dir;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(obj.hess);
    const auto d = ldlt.vectorD();
    const bool well_posed = ldlt.info() == Eigen::Success && ldlt.isPositive() && d.minCoeff() > 1e-12 * d.maxCoeff();
    if (well_posed) dir = -ldlt.solve(obj.grad);
    if (!well_posed || !dir.allFinite() || obj.grad.dot(dir) >= 0.0) dir = -obj.grad;

    const double slope = obj.grad.dot(dir);
    const double gnorm = obj.grad.norm();
    bool accepted = false;
    for (double t = 1.0; t > 1e-20; t *= 0.5) {
      const Eigen::VectorXd trial = theta + t * dir;
      auto next = detail::evaluate_objective(trial, samples, config.lambda, true);
      const bool armijo = next.value <= obj.value + 1e-4 * t * slope;
      // Near the optimum the value stops resolving; accept steps that shrink
      // the gradient without measurably raising the value.
      const bool flat = next.value <= obj.value + 1e-14 * std::abs(obj.value) && next.grad.norm() < gnorm;
      if (std::isfinite(next.value) && (armijo || flat)) {
        theta = trial;
        obj = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }

  MetaLearner out;
  out.weights.assign(theta.data(), theta.data() + m);
  out.intercept = theta[m];
  out.models = std::move(models);
  out.z_miss = z_miss;
  out.lambda = config.lambda;
  out.training = {samples.size(), obj.value, iter, obj.grad.norm(), obj.grad.norm() <= config.grad_tol};
  if (!out.training.converged)
    warn("meta-learner fit stopped after " + std::to_string(iter) + " iterations with gradient norm " +
         detail::fmt_double(out.training.gradient_norm, "%.3g"));
  return out;
}

struct ScalarSample {
  double logit = 0.0;
  int label = 0;
};

/// Temperature scaling: fits sigmoid(z / T + t) by NLL. Works directly in
/// (1/T, t) with a closed-form 2x2 Newton step; the (lambda / 2) / T^2
/// penalty mirrors the meta-learner's weight decay so both agree at M = 1.
inline CalibrationParams fit_temperature(std::span<const ScalarSample> samples, const FitConfig& config = {}) {
  if (samples.empty()) throw ContractError("no samples to calibrate");
  std::size_t positives = 0;
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) throw ContractError("labels must be 0 or 1");
    positives += static_cast<std::size_t>(s.label);
  }
  if (positives == 0 || positives == samples.size())
    throw DegenerateData("temperature fit needs both positive and negative samples");

  struct Eval {
    double f, ga, gt, haa, hat, htt;
  };
  auto eval = [&](double a, double t) {
    detail::CompensatedSum f, ga, gt;
    double haa = 0, hat = 0, htt = 0;
    for (const auto& s : samples) {
      const double u = a * s.logit + t;
      f.add(s.label == 1 ? detail::softplus_neg(u) : detail::softplus_neg(-u));
      const double p = sigmoid(u);
      ga.add((p - s.label) * s.logit);
      gt.add(p - s.label);
      const double q = p * (1.0 - p);
      haa += q * s.logit * s.logit;
      hat += q * s.logit;
      htt += q;
    }
    return Eval{f.value() + 0.5 * config.lambda * a * a, ga.value() + config.lambda * a, gt.value(),
                haa + config.lambda, hat, htt};
  };

  double a = 0.0, t = 0.0;
  Eval e = eval(a, t);
  auto gnorm = [](const Eval& v) { return std::hypot(v.ga, v.gt); };
  for (int iter = 0; iter < config.max_iter && gnorm(e) > config.grad_tol; ++iter) {
    const double det = e.haa * e.htt - e.hat * e.hat;
    double da = -e.ga, dt = -e.gt;
    if (det > 1e-12 * (e.haa * e.htt) && e.haa > 0.0) {
      da = -(e.htt * e.ga - e.hat * e.gt) / det;
      dt = -(e.haa * e.gt - e.hat * e.ga) / det;
    }
    double slope = e.ga * da + e.gt * dt;
    if (slope >= 0.0) {
      da = -e.ga;
      dt = -e.gt;
      slope = -(e.ga * e.ga + e.gt * e.gt);
    }
    bool accepted = false;
    for (double step = 1.0; step > 1e-20; step *= 0.5) {
      const Eval next = eval(a + step * da, t + step * dt);
      const bool armijo = next.f <= e.f + 1e-4 * step * slope;
      const bool flat = next.f <= e.f + 1e-14 * std::abs(e.f) && gnorm(next) < gnorm(e);
      if (std::isfinite(next.f) && (armijo || flat)) {
        a += step * da;
        t += step * dt;
        e = next;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  if (gnorm(e) > config.grad_tol)
    warn("temperature fit stopped with gradient norm " + detail::fmt_double(gnorm(e), "%.3g"));
  if (!(a > 0.0))
    throw CalibrationFailure("fitted inverse temperature " + detail::fmt_double(a, "%.6g") +
                             " is not positive (scores anti-correlated with correctness)");
  return {1.0 / a, t};
}

/// Performance-gap factor g = w / (p * r), elementwise.
inline std::vector<double> decompose_weights(std::span<const double> w, std::span<const double> p,
                                             std::span<const double> r) {
  if (w.size() != p.size() || w.size() != r.size()) throw ContractError("decompose_weights: length mismatch");
  std::vector<double> g(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (p[k] == 0.0 || r[k] == 0.0) throw ContractError("decompose_weights: zero divisor at model " + std::to_string(k + 1));
    g[k] = w[k] / (p[k] * r[k]);
  }
  return g;
}

/// Symmetric M x M matrix; nullopt marks undefined entries.
using CorrelationMatrix = std::vector<std::vector<std::optional<double>>>;

/// Pairwise-complete Pearson correlation of member scores over clusters in
/// which both models are present. Entries need at least 3 common clusters and
/// non-zero variance on both sides.
inline CorrelationMatrix score_correlation(std::span<const Cluster> clusters, int num_models) {
  const auto m = static_cast<std::size_t>(num_models);
  std::vector<std::vector<std::optional<double>>> scores;
  scores.reserve(clusters.size());
  for (const auto& c : clusters) {
    std::vector<std::optional<double>> row(m);
    for (const Detection* d : c.all()) {
      if (d->model_index < 1 || d->model_index > num_models) throw ContractError("model index out of range");
      row[static_cast<std::size_t>(d->model_index - 1)] = d->score;
    }
    scores.push_back(std::move(row));
  }

  CorrelationMatrix rho(m, std::vector<std::optional<double>>(m));
  for (std::size_t i = 0; i < m; ++i) {
    rho[i][i] = 1.0;
    for (std::size_t j = i + 1; j < m; ++j) {
      std::vector<double> a, b;
      for (const auto& row : scores)
        if (row[i] && row[j]) {
          a.push_back(*row[i]);
          b.push_back(*row[j]);
        }
      if (a.size() < 3) continue;
      const double n = static_cast<double>(a.size());
      double ma = 0, mb = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        ma += a[k];
        mb += b[k];
      }
      ma /= n;
      mb /= n;
      double sab = 0, saa = 0, sbb = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        sab += (a[k] - ma) * (b[k] - mb);
        saa += (a[k] - ma) * (a[k] - ma);
        sbb += (b[k] - mb) * (b[k] - mb);
      }
      if (saa <= 0.0 || sbb <= 0.0) continue;
      rho[i][j] = rho[j][i] = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
    }
  }
  return rho;
}

inline std::string meta_to_json(const MetaLearner& l) {
  nlohmann::ordered_json j;
  j["schema"] = kMetaSchema;
  j["models"] = l.models;
  j["weights"] = l.weights;
  j["intercept"] = l.intercept;
  j["z_miss"] = l.z_miss;
  j["lambda"] = l.lambda;
  j["training_meta"] = {{"n_clusters", l.training.n_clusters},
                        {"final_nll", l.training.final_nll},
                        {"iterations", l.training.iterations},
                        {"gradient_norm", l.training.gradient_norm},
                        {"converged", l.training.converged}};
  return j.dump(2) + "\n";
}

inline MetaLearner meta_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("schema") || !j["schema"].is_string() ||
      j["schema"].get<std::string>() != kMetaSchema)
    throw SchemaError("expected schema \"" + std::string(kMetaSchema) + "\"");
  try {
    MetaLearner l;
    l.models = j.at("models").get<std::vector<std::string>>();
    l.weights = j.at("weights").get<std::vector<double>>();
    l.intercept = j.at("intercept").get<double>();
    l.z_miss = j.at("z_miss").get<double>();
    l.lambda = j.at("lambda").get<double>();
    if (j.contains("training_meta")) {
      const auto& t = j["training_meta"];
      l.training = {t.at("n_clusters").get<std::size_t>(), t.at("final_nll").get<double>(),
                    t.at("iterations").get<int>(), t.at("gradient_norm").get<double>(),
                    t.at("converged").get<bool>()};
    }
    if (l.models.size() != l.weights.size()) throw SchemaError("models and weights differ in length");
    for (double w : l.weights)
      if (!std::isfinite(w)) throw SchemaError("non-finite weight");
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("meta-learner file: ") + e.what());
  }
}

}  // namespace obbstack
