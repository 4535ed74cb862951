#pragma once

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "obbstack/detection.hpp"
#include "obbstack/error.hpp"
#include "obbstack/geometry.hpp"

namespace obbstack {

namespace fs = std::filesystem;

inline constexpr std::string_view kRunSchema = "obbstack-run/1";
inline constexpr std::string_view kDotaPrefix = "Task1_";
inline constexpr double kDefaultMinScore = 0.001;

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream in(line);
  for (std::string t; in >> t;) tokens.push_back(std::move(t));
  return tokens;
}

inline double parse_number(const std::string& tok, const std::string& file, std::size_t line) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0' || errno == ERANGE || !std::isfinite(v))
    throw ParseError(file, line, "not a finite number: '" + tok + "'");
  return v;
}

inline CornerQuad parse_quad(const std::vector<std::string>& tok, std::size_t first, const std::string& file,
                             std::size_t line) {
  CornerQuad q;
  for (int i = 0; i < 4; ++i)
    q[i] = {parse_number(tok[first + 2 * i], file, line), parse_number(tok[first + 2 * i + 1], file, line)};
  return q;
}

inline OBB quad_to_obb_at(const CornerQuad& q, const std::string& file, std::size_t line) {
  try {
    return corners_to_obb(q);
  } catch (const InvalidGeometry& e) {
    throw ParseError(file, line, e.what());
  }
}

inline std::vector<fs::path> sorted_files(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  return files;
}

inline std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  return in;
}

inline std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline std::string quad_text(const OBB& obb) {
  std::string s;
  for (const Point& p : obb_to_corners(obb)) {
    s += ' ';
    s += fmt_double(p.x);
    s += ' ';
    s += fmt_double(p.y);
  }
  return s;
}

inline std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace detail

/// Reads a directory of DOTA Task1_<category>.txt submission files.
/// Detections scoring below min_score are dropped.
inline DetectionRun parse_dota_detections(const fs::path& dir, const std::string& model_name, int model_index,
                                          double min_score = kDefaultMinScore) {
  DetectionRun run{model_name, model_index, {}};
  std::size_t n_files = 0;
  for (const auto& path : detail::sorted_files(dir)) {
    const std::string name = path.filename().string();
    if (!name.starts_with(kDotaPrefix) || path.extension() != ".txt") continue;
    ++n_files;
    const std::string category = path.stem().string().substr(kDotaPrefix.size());
    auto in = detail::open_in(path);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      const auto tok = detail::split_ws(line);
      if (tok.empty()) continue;
      if (tok.size() != 10)
        throw ParseError(path.string(), line_no, "expected 10 tokens, got " + std::to_string(tok.size()));
      const double score = detail::parse_number(tok[1], path.string(), line_no);
      if (score < min_score) continue;
      const OBB obb = detail::quad_to_obb_at(detail::parse_quad(tok, 2, path.string(), line_no), path.string(),
                                             line_no);
      run.detections.push_back(make_detection(obb, score, model_index, category, tok[0]));
    }
  }
  if (n_files == 0) warn("no Task1_*.txt files in " + dir.string() + "; run '" + model_name + "' is empty");
  return run;
}

/// Writes one Task1_<category>.txt per category present in the run.
inline void write_dota_detections(const DetectionRun& run, const fs::path& dir) {
  fs::create_directories(dir);
  std::map<std::string, std::vector<const Detection*>> by_cat;
  for (const auto& d : run.detections) by_cat[d.category].push_back(&d);
  for (const auto& [cat, dets] : by_cat) {
    auto out = detail::open_out(dir / (std::string(kDotaPrefix) + cat + ".txt"));
    for (const Detection* d : dets)
      out << d->image_id << ' ' << detail::fmt_double(d->score) << detail::quad_text(d->obb) << '\n';
  }
}

/// Reads DOTA label files, one per image; the file stem is the image id.
inline GroundTruth parse_ground_truth(const fs::path& dir) {
  GroundTruth gt;
  for (const auto& path : detail::sorted_files(dir)) {
    if (path.extension() != ".txt") continue;
    const std::string image_id = path.stem().string();
    gt.images.push_back(image_id);
    auto in = detail::open_in(path);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      const auto tok = detail::split_ws(line);
      if (tok.empty()) continue;
      if (tok[0].starts_with("imagesource") || tok[0].starts_with("gsd")) continue;
      if (tok.size() != 10)
        throw ParseError(path.string(), line_no, "expected 10 tokens, got " + std::to_string(tok.size()));
      if (tok[9] != "0" && tok[9] != "1")
        throw ParseError(path.string(), line_no, "difficulty must be 0 or 1, got '" + tok[9] + "'");
      const OBB obb =
          detail::quad_to_obb_at(detail::parse_quad(tok, 0, path.string(), line_no), path.string(), line_no);
      gt.objects.push_back({obb, tok[8], tok[9] == "1", image_id});
    }
  }
  return gt;
}

inline void write_ground_truth(const GroundTruth& gt, const fs::path& dir) {
  fs::create_directories(dir);
  std::map<std::string, std::vector<const GroundTruthObject*>> by_image;
  for (const auto& img : gt.images) by_image[img];
  for (const auto& g : gt.objects) by_image[g.image_id].push_back(&g);
  for (const auto& [img, objs] : by_image) {
    auto out = detail::open_out(dir / (img + ".txt"));
    for (const auto* g : objs) {
      std::string q = detail::quad_text(g->obb);
      out << q.substr(1) << ' ' << g->category << ' ' << (g->difficult ? 1 : 0) << '\n';
    }
  }
}

/// Serializes a run with fixed field order and 17 significant digits.
inline std::string run_to_json(const DetectionRun& run) {
  using detail::fmt_double;
  std::string s;
  s += "{\n  \"schema\": " + detail::json_string(std::string(kRunSchema)) + ",\n";
  s += "  \"model_name\": " + detail::json_string(run.model_name) + ",\n";
  s += "  \"model_index\": " + std::to_string(run.model_index) + ",\n";
  s += "  \"detections\": [";
  for (std::size_t i = 0; i < run.detections.size(); ++i) {
    const Detection& d = run.detections[i];
    s += i == 0 ? "\n" : ",\n";
    s += "    {\"image\": " + detail::json_string(d.image_id) + ", \"category\": " + detail::json_string(d.category) +
         ", \"score\": " + fmt_double(d.score) + ", \"logit\": " + fmt_double(d.logit) +
         ", \"x\": " + fmt_double(d.obb.x) + ", \"y\": " + fmt_double(d.obb.y) + ", \"w\": " + fmt_double(d.obb.w) +
         ", \"h\": " + fmt_double(d.obb.h) + ", \"theta\": " + fmt_double(d.obb.theta) + "}";
  }
  s += run.detections.empty() ? "]\n}\n" : "\n  ]\n}\n";
  return s;
}

/// Parses the run format. A missing "logit" is derived from the score.
inline DetectionRun run_from_json(const std::string& text, double min_score = 0.0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("schema")) throw SchemaError("missing \"schema\" field");
  if (!j["schema"].is_string() || j["schema"].get<std::string>() != kRunSchema)
    throw SchemaError("unsupported run schema " + j["schema"].dump() + " (expected \"" + std::string(kRunSchema) +
                      "\")");
  try {
    DetectionRun run;
    run.model_name = j.at("model_name").get<std::string>();
    run.model_index = j.at("model_index").get<int>();
    for (const auto& jd : j.at("detections")) {
      const double score = jd.at("score").get<double>();
      if (score < min_score) continue;
      const OBB obb = canonicalize(jd.at("x").get<double>(), jd.at("y").get<double>(), jd.at("w").get<double>(),
                                   jd.at("h").get<double>(), jd.at("theta").get<double>());
      Detection d = make_detection(obb, score, run.model_index, jd.at("category").get<std::string>(),
                                   jd.at("image").get<std::string>());
      if (jd.contains("logit")) d.logit = jd["logit"].get<double>();
      run.detections.push_back(std::move(d));
    }
    return run;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("run file does not match ") + std::string(kRunSchema) + ": " + e.what());
  } catch (const InvalidGeometry& e) {
    throw SchemaError(std::string("run file holds an invalid box: ") + e.what());
  }
}

inline void write_run_json(const DetectionRun& run, const fs::path& path) {
  auto out = detail::open_out(path);
  out << run_to_json(run);
}

inline std::string read_text(const fs::path& path) {
  auto in = detail::open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline DetectionRun read_run_json(const fs::path& path, double min_score = 0.0) {
  return run_from_json(read_text(path), min_score);
}

/// Loads a run from a DOTA directory or a run JSON file, then assigns the
/// given name and index.
inline DetectionRun load_run(const fs::path& path, const std::string& model_name, int model_index,
                             double min_score = kDefaultMinScore) {
  std::error_code ec;
  DetectionRun run = fs::is_directory(path, ec) ? parse_dota_detections(path, model_name, model_index, min_score)
                                                : read_run_json(path, min_score);
  run.model_name = model_name;
  run.model_index = model_index;
  for (auto& d : run.detections) d.model_index = model_index;
  return run;
}

}  // namespace obbstack
