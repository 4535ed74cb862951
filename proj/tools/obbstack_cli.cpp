// obbstack: command-line driver for OBB ensemble stacking.
//
//   obbstack train-meta --run A=dets/a --run B=dets/b --gt labels/val --out model/
//   obbstack fuse       --run A=test/a --run B=test/b --meta model/meta.json --out fused/
//   obbstack eval       --run fused=fused/fused.json --gt labels/test
//   obbstack analyze    --run A=test/a --run B=test/b --meta model/meta.json --fit-temperatures --gt labels/val
//   obbstack simulate   --config scenario.json --out synth/
//
// Exit codes: 0 success, 2 usage/config error, 3 data/contract error,
// 4 numerical failure.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "obbstack/obbstack.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace obbstack;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct RunSpec {
  std::string name;
  fs::path path;
};

RunSpec parse_run_spec(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) return {fs::path(s).stem().string(), s};
  if (eq == 0 || eq + 1 == s.size()) throw ConfigError("--run expects NAME=PATH, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

std::vector<DetectionRun> load_runs(const std::vector<std::string>& specs, double min_score) {
  std::vector<DetectionRun> runs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const RunSpec rs = parse_run_spec(specs[i]);
    for (const auto& r : runs)
      if (r.model_name == rs.name) throw ConfigError("duplicate run name '" + rs.name + "'");
    runs.push_back(load_run(rs.path, rs.name, static_cast<int>(i + 1), min_score));
  }
  return runs;
}

GroundTruth load_gt(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw ConfigError("ground-truth directory not found: " + dir.string());
  return parse_ground_truth(dir);
}

void hash_path(Fnv1a& h, const fs::path& p) {
  std::error_code ec;
  if (fs::is_directory(p, ec)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      h.update(fs::relative(f, p).generic_string());
      h.update(read_text(f));
    }
  } else if (fs::is_regular_file(p, ec)) {
    h.update(read_text(p));
  }
}

/// Records the result-affecting configuration and a content hash of every
/// input next to the outputs.
void write_provenance(const fs::path& out_dir, const std::string& command, const ordered_json& config,
                      const std::vector<fs::path>& inputs) {
  Fnv1a input_hash;
  for (const auto& p : inputs) hash_path(input_hash, p);
  const std::string cfg_text = config.dump();
  ordered_json j;
  j["command"] = command;
  j["config"] = config;
  j["config_hash"] = Fnv1a{}.update(cfg_text).hex();
  j["input_hash"] = input_hash.hex();
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "provenance.json", std::ios::binary) << j.dump(2) << '\n';
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

std::vector<fs::path> run_paths(const std::vector<std::string>& specs) {
  std::vector<fs::path> out;
  for (const auto& s : specs) out.push_back(parse_run_spec(s).path);
  return out;
}

ordered_json run_names_json(const std::vector<std::string>& specs) {
  ordered_json j = ordered_json::array();
  for (const auto& s : specs) j.push_back(parse_run_spec(s).name);
  return j;
}

void add_pipeline_options(CLI::App& app, PipelineConfig& cfg, std::string& ap_mode) {
  app.add_option("--iou-thresh", cfg.iou_thresh, "Clustering IoU threshold")->capture_default_str();
  app.add_option("--iou-label-thresh", cfg.iou_label_thresh, "IoU needed to label a cluster positive")
      ->capture_default_str();
  app.add_option("--z-miss", cfg.z_miss, "Logit used for models absent from a cluster")->capture_default_str();
  app.add_option("--lambda", cfg.lambda, "L2 penalty on meta-learner weights")->capture_default_str();
  app.add_option("--min-score", cfg.min_score, "Drop detections scoring below this")->capture_default_str();
  app.add_option("--ap-mode", ap_mode, "voc07 or voc12")->capture_default_str();
  app.add_option("--match-iou", cfg.match_iou, "IoU for matching detections in evaluation")->capture_default_str();
  app.add_flag("--per-model-nms", cfg.per_model_nms, "Run per-model NMS before clustering");
  app.add_option("--threads", cfg.threads, "Worker threads")->capture_default_str();
}

std::string format_matrix(const CorrelationMatrix& rho, const std::vector<std::string>& names) {
  std::size_t w = 6;
  for (const auto& n : names) w = std::max(w, n.size());
  auto pad = [&](const std::string& s, std::size_t width) {
    // The en dash is one column wide but three bytes long.
    const std::size_t cols = s == "–" ? 1 : s.size();
    return std::string(width > cols ? width - cols : 0, ' ') + s;
  };
  std::string out = std::string(w, ' ');
  for (const auto& n : names) out += " " + pad(n, w);
  out += "\n";
  for (std::size_t i = 0; i < rho.size(); ++i) {
    out += pad(names[i], w);
    for (const auto& v : rho[i]) out += " " + pad(v ? detail::fmt_double(*v, "%.3f") : "–", w);
    out += "\n";
  }
  return out;
}

std::string matrix_csv(const CorrelationMatrix& rho, const std::vector<std::string>& names) {
  std::string out = "model";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (std::size_t i = 0; i < rho.size(); ++i) {
    out += names[i];
    for (const auto& v : rho[i]) out += "," + (v ? detail::fmt_double(*v) : std::string());
    out += "\n";
  }
  return out;
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad number in ") + what + ": '" + tok + "'");
    }
  }
  return out;
}

/// Per-model temperature fit: each detection is labeled by its best IoU with
/// same-category ground truth.
CalibrationParams fit_run_temperature(const DetectionRun& run, const GroundTruth& gt, const PipelineConfig& cfg) {
  const auto gt_groups = group_ground_truth(gt);
  std::vector<ScalarSample> samples;
  for (const auto& d : run.detections) {
    double best = 0.0;
    if (auto it = gt_groups.find({d.image_id, d.category}); it != gt_groups.end())
      for (const auto& g : it->second) best = std::max(best, iou(d.obb, g.obb));
    samples.push_back({d.logit, best >= cfg.iou_label_thresh ? 1 : 0});
  }
  FitConfig fc;
  fc.lambda = cfg.lambda;
  return fit_temperature(samples, fc);
}

std::string decomposition_table(const std::vector<std::string>& names, const std::vector<double>& w,
                                const std::vector<double>& r, const std::vector<double>& p,
                                const std::vector<double>& g) {
  std::size_t cw = 8;
  for (const auto& n : names) cw = std::max(cw, n.size());
  auto pad = [&](const std::string& s) { return std::string(cw > s.size() ? cw - s.size() : 0, ' ') + s; };
  std::string out = "Models";
  for (const auto& n : names) out += " " + pad(n);
  out += "\n";
  auto row = [&](const char* label, const std::vector<double>& v) {
    std::string line = std::string(label) + std::string(6 - std::string(label).size(), ' ');
    for (double x : v) line += " " + pad(detail::fmt_double(x, "%.4f"));
    return line + "\n";
  };
  return out + row("w", w) + row("r", r) + row("p", p) + row("g", g);
}

ordered_json learner_summary(const MetaLearner& m) {
  ordered_json j;
  j["models"] = m.models;
  j["weights"] = m.weights;
  j["intercept"] = m.intercept;
  j["final_nll"] = m.training.final_nll;
  j["iterations"] = m.training.iterations;
  j["gradient_norm"] = m.training.gradient_norm;
  j["converged"] = m.training.converged;
  j["n_clusters"] = m.training.n_clusters;
  if (m.num_models() == 1 && m.weights[0] > 0.0) j["equivalent_temperature"] = 1.0 / m.weights[0];
  return j;
}

void write_fused(const DetectionRun& run, const fs::path& out, const std::string& format) {
  if (format == "dota" || format == "both") write_dota_detections(run, out / "dota");
  if (format == "json" || format == "both") write_run_json(run, out / "fused.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stacking ensemble for oriented bounding box detections"};
  app.require_subcommand(1);

  PipelineConfig cfg;
  std::string ap_mode = "voc12";
  std::vector<std::string> run_specs;
  fs::path gt_dir, out_dir, meta_path, config_path;
  std::string method = "stacking";
  std::string format = "both";
  std::string temperatures, weights_arg, redundancy;
  bool fit_temps = false;
  std::optional<std::uint64_t> seed;

  auto* train = app.add_subcommand("train-meta", "Fit the meta-learner on validation detections");
  train->add_option("--run", run_specs, "Member run as NAME=PATH (DOTA dir or run JSON), in model order")->required();
  train->add_option("--gt", gt_dir, "Validation ground-truth label directory")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  add_pipeline_options(*train, cfg, ap_mode);

  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse member detections into one run");
  fuse_cmd->add_option("--run", run_specs, "Member run as NAME=PATH, in model order")->required();
  fuse_cmd->add_option("--meta", meta_path, "Meta-learner JSON (stacking)");
  fuse_cmd->add_option("--method", method, "stacking, nms or wbf")->capture_default_str();
  fuse_cmd->add_option("--format", format, "dota, json or both")->capture_default_str();
  fuse_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_pipeline_options(*fuse_cmd, cfg, ap_mode);

  auto* eval_cmd = app.add_subcommand("eval", "Per-category AP and mAP");
  eval_cmd->add_option("--run", run_specs, "Run(s) to evaluate as NAME=PATH")->required();
  eval_cmd->add_option("--gt", gt_dir, "Ground-truth label directory")->required();
  eval_cmd->add_option("--out", out_dir, "Output directory for eval.json / eval.txt");
  add_pipeline_options(*eval_cmd, cfg, ap_mode);

  auto* analyze = app.add_subcommand("analyze", "Score correlation and weight decomposition");
  analyze->add_option("--run", run_specs, "Member run as NAME=PATH, in model order")->required();
  analyze->add_option("--meta", meta_path, "Meta-learner JSON supplying w");
  analyze->add_option("--weights", weights_arg, "Comma-separated w (overrides --meta)");
  analyze->add_option("--temperatures", temperatures, "Comma-separated per-model temperatures (p = 1/T)");
  analyze->add_flag("--fit-temperatures", fit_temps, "Fit per-model temperatures against --gt");
  analyze->add_option("--redundancy", redundancy, "Comma-separated r factors (default all 1)");
  analyze->add_option("--gt", gt_dir, "Ground truth for --fit-temperatures");
  analyze->add_option("--out", out_dir, "Output directory")->required();
  add_pipeline_options(*analyze, cfg, ap_mode);

  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic benchmark and run it");
  simulate->add_option("--config", config_path, "Scenario JSON")->required();
  simulate->add_option("--seed", seed, "Override the scenario seed");
  simulate->add_option("--out", out_dir, "Output directory")->required();
  simulate->add_option("--threads", cfg.threads, "Worker threads")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    cfg.ap_mode = parse_ap_mode(ap_mode);

    if (*train) {
      cfg.validate();
      const auto gt = load_gt(gt_dir);
      const auto runs = load_runs(run_specs, cfg.min_score);
      const auto ts = build_training_set(runs, gt, cfg);
      const MetaLearner learner = train_meta(runs, gt, cfg);
      write_text(out_dir / "meta.json", meta_to_json(learner));
      ordered_json report = learner_summary(learner);
      report["positives"] = std::count_if(ts.samples.begin(), ts.samples.end(),
                                          [](const LabeledCluster& s) { return s.label == 1; });
      write_text(out_dir / "training_report.json", report.dump(2) + "\n");
      ordered_json pc = cfg.to_json();
      pc["runs"] = run_names_json(run_specs);
      auto inputs = run_paths(run_specs);
      inputs.push_back(gt_dir);
      write_provenance(out_dir, "train-meta", pc, inputs);
      std::cout << "clusters: " << ts.samples.size() << " (" << report["positives"] << " positive)\n";
      for (std::size_t k = 0; k < learner.models.size(); ++k)
        std::cout << "  w[" << learner.models[k] << "] = " << detail::fmt_double(learner.weights[k], "%.4f") << "\n";
      std::cout << "  b = " << detail::fmt_double(learner.intercept, "%.4f")
                << "  NLL = " << detail::fmt_double(learner.training.final_nll, "%.4f")
                << "  iterations = " << learner.training.iterations << "\n";
      if (report.contains("equivalent_temperature"))
        std::cout << "  equivalent temperature T = "
                  << detail::fmt_double(report["equivalent_temperature"].get<double>(), "%.4f") << "\n";
      return 0;
    }

    if (*fuse_cmd) {
      cfg.method = parse_method(method);
      cfg.validate();
      if (format != "dota" && format != "json" && format != "both")
        throw ConfigError("--format must be dota, json or both");
      const auto runs = load_runs(run_specs, cfg.min_score);
      std::optional<MetaLearner> learner;
      if (cfg.method == EnsembleMethod::stacking) {
        if (meta_path.empty()) throw ConfigError("--meta is required for stacking");
        learner = meta_from_json(read_text(meta_path));
      } else if (!meta_path.empty()) {
        warn("--meta is ignored for method " + method);
      }
      const DetectionRun fused = fuse(runs, learner ? &*learner : nullptr, cfg);
      write_fused(fused, out_dir, format);
      ordered_json pc = cfg.to_json();
      pc["runs"] = run_names_json(run_specs);
      pc["format"] = format;
      auto inputs = run_paths(run_specs);
      if (learner) inputs.push_back(meta_path);
      write_provenance(out_dir, "fuse", pc, inputs);

      const auto clusters = flatten(cluster_runs(prepare_runs(runs, cfg), cfg.iou_thresh, cfg.threads));
      std::map<std::size_t, std::size_t> sizes;
      for (const auto& c : clusters) ++sizes[c.size()];
      std::size_t n_in = 0;
      for (const auto& r : runs) n_in += r.detections.size();
      std::cout << "input detections: " << n_in << "\nclusters: " << clusters.size() << "\n";
      for (const auto& [k, n] : sizes) std::cout << "  size " << k << ": " << n << "\n";
      std::cout << "fused detections written: " << fused.detections.size() << "\n";
      return 0;
    }

    if (*eval_cmd) {
      cfg.validate();
      const auto gt = load_gt(gt_dir);
      std::vector<std::pair<std::string, EvalResult>> rows;
      ordered_json results = ordered_json::array();
      for (const auto& spec : run_specs) {
        const RunSpec rs = parse_run_spec(spec);
        const auto run = load_run(rs.path, rs.name, 1, 0.0);
        rows.emplace_back(rs.name, evaluate(run, gt, cfg.eval_config()));
        results.push_back(eval_to_json(rows.back().second, rs.name));
      }
      const std::string table = format_ap_table(rows);
      std::cout << table;
      if (!out_dir.empty()) {
        write_text(out_dir / "eval.txt", table);
        write_text(out_dir / "eval.json", results.dump(2) + "\n");
        ordered_json pc = cfg.to_json();
        pc["runs"] = run_names_json(run_specs);
        auto inputs = run_paths(run_specs);
        inputs.push_back(gt_dir);
        write_provenance(out_dir, "eval", pc, inputs);
      }
      return 0;
    }

    if (*analyze) {
      cfg.validate();
      const auto runs = load_runs(run_specs, cfg.min_score);
      const auto names = model_names(runs);
      const int m = static_cast<int>(runs.size());
      const auto clusters = flatten(cluster_runs(prepare_runs(runs, cfg), cfg.iou_thresh, cfg.threads));
      const auto rho = score_correlation(clusters, m);
      write_text(out_dir / "correlation.csv", matrix_csv(rho, names));
      const std::string heat = format_matrix(rho, names);
      write_text(out_dir / "correlation.txt", heat);
      std::cout << "Pearson correlation of member scores over " << clusters.size() << " clusters\n" << heat;

      std::vector<double> w;
      if (!weights_arg.empty()) {
        w = parse_list(weights_arg, "--weights");
      } else if (!meta_path.empty()) {
        const auto learner = meta_from_json(read_text(meta_path));
        if (learner.models != names) throw ContractError("meta-learner models do not match --run names");
        w = learner.weights;
      }
      std::vector<double> temps;
      if (!temperatures.empty()) {
        temps = parse_list(temperatures, "--temperatures");
      } else if (fit_temps) {
        if (gt_dir.empty()) throw ConfigError("--fit-temperatures needs --gt");
        const auto gt = load_gt(gt_dir);
        for (const auto& r : runs) temps.push_back(fit_run_temperature(r, gt, cfg).temperature);
      }
      ordered_json pc = cfg.to_json();
      pc["runs"] = run_names_json(run_specs);
      pc["weights"] = weights_arg;
      pc["temperatures"] = temperatures;
      pc["fit_temperatures"] = fit_temps;
      pc["redundancy"] = redundancy;
      if (!w.empty() && !temps.empty()) {
        std::vector<double> r = redundancy.empty() ? std::vector<double>(w.size(), 1.0)
                                                   : parse_list(redundancy, "--redundancy");
        if (w.size() != names.size() || temps.size() != names.size() || r.size() != names.size())
          throw ConfigError("weights, temperatures and redundancy need one value per run");
        std::vector<double> p;
        for (double t : temps) {
          if (!(t > 0.0)) throw ConfigError("temperatures must be positive");
          p.push_back(1.0 / t);
        }
        const auto g = decompose_weights(w, p, r);
        const std::string table = decomposition_table(names, w, r, p, g);
        write_text(out_dir / "decomposition.txt", table);
        ordered_json dj;
        dj["models"] = names;
        dj["w"] = w;
        dj["r"] = r;
        dj["p"] = p;
        dj["temperature"] = temps;
        dj["g"] = g;
        write_text(out_dir / "decomposition.json", dj.dump(2) + "\n");
        std::cout << "\nWeight decomposition w = p * r * g\n" << table;
      }
      auto inputs = run_paths(run_specs);
      if (!meta_path.empty()) inputs.push_back(meta_path);
      if (!gt_dir.empty()) inputs.push_back(gt_dir);
      write_provenance(out_dir, "analyze", pc, inputs);
      return 0;
    }

    if (*simulate) {
      nlohmann::json jc;
      try {
        jc = nlohmann::json::parse(read_text(config_path));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("scenario file: ") + e.what());
      } catch (const IoError& e) {
        throw ConfigError(e.what());
      }
      ScenarioConfig sc = ScenarioConfig::from_json(jc);
      if (seed) sc.scene.seed = *seed;
      sc.pipeline.threads = cfg.threads;
      sc.validate();
      const SyntheticScene scene = simulate_scenario(sc);
      write_ground_truth(scene.val_gt, out_dir / "gt" / "val");
      write_ground_truth(scene.test_gt, out_dir / "gt" / "test");
      for (const auto& [split, runs] : {std::pair{"val", &scene.val_runs}, std::pair{"test", &scene.test_runs}})
        for (const auto& r : *runs) {
          write_run_json(r, out_dir / "runs" / split / (r.model_name + ".json"));
          write_dota_detections(r, out_dir / "runs" / split / r.model_name);
        }
      const BenchmarkReport rep = run_benchmark(scene, sc.pipeline);
      write_text(out_dir / "meta.json", meta_to_json(rep.learner));
      write_fused(rep.stacking_run, out_dir / "fused" / "stacking", "both");
      write_fused(rep.nms_run, out_dir / "fused" / "nms", "both");
      write_fused(rep.wbf_run, out_dir / "fused" / "wbf", "both");

      const std::string table = format_ap_table(rep.rows);
      ordered_json report;
      report["scenario"] = sc.to_json();
      report["map"] = ordered_json::object();
      for (const auto& [name, r] : rep.rows) report["map"][name] = r.map;
      report["best_member_map"] = rep.best_member_map();
      report["learner"] = learner_summary(rep.learner);
      report["results"] = ordered_json::array();
      for (const auto& [name, r] : rep.rows) report["results"].push_back(eval_to_json(r, name));
      write_text(out_dir / "report.json", report.dump(2) + "\n");
      write_text(out_dir / "report.txt", table);
      write_provenance(out_dir, "simulate", sc.to_json(), {config_path});
      std::cout << table << "\nmeta-learner weights:";
      for (std::size_t k = 0; k < rep.learner.models.size(); ++k)
        std::cout << " " << rep.learner.models[k] << "=" << detail::fmt_double(rep.learner.weights[k], "%.4f");
      std::cout << "  b=" << detail::fmt_double(rep.learner.intercept, "%.4f") << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::usage: return kExitUsage;
      case ErrorKind::data: return kExitData;
      case ErrorKind::numerical: return kExitNumerical;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
