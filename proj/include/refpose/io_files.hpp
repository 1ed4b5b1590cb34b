/**
 * \file io_files.hpp
 * \brief Scene-directory ingestion (BOP-style JSON layout), mesh metadata,
 *        JSON-lines record round trips, logging and a deterministic
 *        parallel map.
 */
#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "refpose/camera.hpp"
#include "refpose/io_png.hpp"
#include "refpose/matching.hpp"
#include "refpose/mesh.hpp"
#include "refpose/pose_solver.hpp"
#include "refpose/transform.hpp"
#include "refpose/types.hpp"

namespace refpose::io {

// ---------------------------------------------------------------------------
// Logging. REFPOSE_LOG selects verbosity: quiet|0, warn (default), info|1,
// debug|2. Warnings print unless quiet.
// ---------------------------------------------------------------------------

enum class LogLevel { quiet = -1, warn = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("REFPOSE_LOG");
    if (env == nullptr) return LogLevel::warn;
    const std::string v(env);
    if (v == "quiet" || v == "0") return LogLevel::quiet;
    if (v == "info" || v == "1") return LogLevel::info;
    if (v == "debug" || v == "2") return LogLevel::debug;
    return LogLevel::warn;
  }();
  return level;
}

inline void log_warn(const std::string& msg) {
  if (log_level() >= LogLevel::warn) std::cerr << "refpose[warn]: " << msg << "\n";
}
inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::cerr << "refpose[info]: " << msg << "\n";
}
inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::cerr << "refpose[debug]: " << msg << "\n";
}

// ---------------------------------------------------------------------------
// Deterministic parallel map: fn(i) for i in [0, n), any thread count. Results
// must be written into index-addressed slots so output order never depends on
// scheduling.
// ---------------------------------------------------------------------------

template <typename Fn>
inline void parallel_for(int n, int jobs, Fn&& fn) {
  if (n <= 0) return;
  if (jobs <= 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next(0);
  std::exception_ptr error;
  std::mutex error_mutex;
  const int workers = std::min(jobs, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// JSON helpers.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("json: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("json: parse failure in " + path + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw FormatError("json: cannot open for write " + path);
  os << j.dump(2) << "\n";
  if (!os) throw FormatError("json: write failed for " + path);
}

inline nlohmann::json transform_to_json(const RigidTransform& t) {
  nlohmann::json j;
  auto& rj = j["R"] = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rj.push_back(t.R(r, c));
  auto& tj = j["t"] = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) tj.push_back(t.t(r));
  return j;
}

inline RigidTransform transform_from_json(const nlohmann::json& j, const char* who) {
  if (!j.contains("R") || !j.contains("t") || j["R"].size() != 9 || j["t"].size() != 3)
    throw FormatError(std::string(who) + ": malformed rigid transform record");
  RigidTransform t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.R(r, c) = j["R"][3 * r + c].get<double>();
  for (int r = 0; r < 3; ++r) t.t(r) = j["t"][r].get<double>();
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Mesh metadata: symmetries live in a sibling "<stem>.symmetries.json" file,
// either a bare list of 4x4 row-major matrices or an object
// { "tolerance": ..., "symmetries": [[16 numbers], ...] }.
// ---------------------------------------------------------------------------

inline std::string symmetry_sidecar_path(const std::string& mesh_path) {
  const std::filesystem::path p(mesh_path);
  std::filesystem::path side = p;
  side.replace_extension("");
  return side.string() + ".symmetries.json";
}

/// Parses one 4x4 row-major matrix into a rigid transform; \p scale applies
/// to the translation column (model units to meters).
inline RigidTransform symmetry_from_matrix(const nlohmann::json& m, double scale,
                                           const std::string& path) {
  if (!m.is_array() || m.size() != 16)
    throw FormatError("symmetries: expected 16-entry row-major 4x4 matrix in " + path);
  RigidTransform t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.R(r, c) = m[4 * r + c].get<double>();
    t.t(r) = m[4 * r + 3].get<double>() * scale;
  }
  if (!t.is_rotation(1e-6))
    throw FormatError("symmetries: matrix is not a rotation in " + path);
  return t;
}

/**
 * \brief Loads a PLY mesh (vertices scaled into meters) and its symmetry
 *        sidecar. A missing sidecar leaves S = {identity}; symmetries that
 *        fail to map the vertex set onto itself within the declared
 *        tolerance are kept but reported as warnings.
 */
inline mesh::MeshModel load_mesh_ply(const std::string& path, double scale = 1.0) {
  std::vector<RigidTransform> syms;
  double tolerance = -1.0;

  const std::string side = symmetry_sidecar_path(path);
  if (std::filesystem::exists(side)) {
    const nlohmann::json j = detail::parse_json_file(side);
    const nlohmann::json* list = &j;
    if (j.is_object()) {
      if (j.contains("tolerance")) tolerance = j["tolerance"].get<double>() * scale;
      if (!j.contains("symmetries"))
        throw FormatError("symmetries: object form needs a 'symmetries' list in " +
                          side);
      list = &j["symmetries"];
    }
    if (!list->is_array())
      throw FormatError("symmetries: expected a list of matrices in " + side);
    for (const auto& m : *list) syms.push_back(symmetry_from_matrix(m, scale, side));
  }

  mesh::MeshModel model = mesh::MeshModel::from_file(path, scale, std::move(syms));
  if (tolerance < 0.0) tolerance = 1e-3 * model.diameter;
  for (std::size_t i = 1; i < model.symmetries.size(); ++i) {
    const double err = mesh::symmetry_mapping_error(model, model.symmetries[i]);
    if (err > tolerance)
      log_warn("symmetry " + std::to_string(i) + " of " + path +
               " maps vertices with error " + std::to_string(err) +
               " above tolerance " + std::to_string(tolerance));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Scene records: BOP-style directory with scene_camera.json, scene_gt.json,
// rgb/, depth/, mask_visib/ and an optional synth_info.json.
// ---------------------------------------------------------------------------

/// \brief One object instance in an image: mesh id, ground-truth pose
///        (model to camera, meters) and its visibility mask path.
struct SceneObject {
  int obj_id = 0;
  RigidTransform pose_m2c;
  std::string mask_path;
};

/// \brief Everything needed to evaluate one image of a scene.
struct SceneRecord {
  int image_id = 0;
  std::string rgb_path;
  std::string depth_path;
  double depth_divisor = 1000.0;  ///< meters = stored / depth_divisor
  CameraIntrinsics k;
  std::vector<SceneObject> objects;
};

/// \brief Ground truth of a synthetic query/reference pair.
struct SynthInfo {
  int query_id = 0;
  int reference_id = 1;
  int target_obj = 1;
  double rotation_gap_deg = 0.0;
  RigidTransform relative;  ///< camera-frame map: query points to reference
};

inline std::string image_name(int image_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", image_id);
  return buf;
}

/// \brief Reads a BOP-style scene directory into per-image records sorted by
///        image id. Referenced image files must exist.
inline std::vector<SceneRecord> load_scene(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::exists(root / "scene_camera.json"))
    throw FormatError("scene: missing scene_camera.json under " + dir);
  const auto cams = detail::parse_json_file((root / "scene_camera.json").string());
  nlohmann::json gts;
  if (fs::exists(root / "scene_gt.json"))
    gts = detail::parse_json_file((root / "scene_gt.json").string());

  std::map<int, SceneRecord> records;
  for (const auto& [key, cam] : cams.items()) {
    SceneRecord rec;
    rec.image_id = std::stoi(key);
    if (!cam.contains("cam_K") || cam["cam_K"].size() != 9)
      throw FormatError("scene: image " + key + " lacks a 3x3 cam_K in " + dir);
    rec.k.fx = cam["cam_K"][0].get<double>();
    rec.k.cx = cam["cam_K"][2].get<double>();
    rec.k.fy = cam["cam_K"][4].get<double>();
    rec.k.cy = cam["cam_K"][5].get<double>();
    const double bop_scale =
        cam.contains("depth_scale") ? cam["depth_scale"].get<double>() : 1.0;
    if (!(bop_scale > 0.0))
      throw FormatError("scene: nonpositive depth_scale for image " + key);
    rec.depth_divisor = 1000.0 / bop_scale;

    rec.rgb_path = (root / "rgb" / (image_name(rec.image_id) + ".png")).string();
    rec.depth_path = (root / "depth" / (image_name(rec.image_id) + ".png")).string();
    for (const auto* p : {&rec.rgb_path, &rec.depth_path})
      if (!fs::exists(*p)) throw FormatError("scene: missing image file " + *p);

    if (gts.contains(key)) {
      int slot = 0;
      for (const auto& g : gts[key]) {
        SceneObject obj;
        if (!g.contains("obj_id") || !g.contains("cam_R_m2c") ||
            !g.contains("cam_t_m2c") || g["cam_R_m2c"].size() != 9 ||
            g["cam_t_m2c"].size() != 3)
          throw FormatError("scene: malformed ground-truth entry for image " + key);
        obj.obj_id = g["obj_id"].get<int>();
        for (int r = 0; r < 3; ++r) {
          for (int c = 0; c < 3; ++c)
            obj.pose_m2c.R(r, c) = g["cam_R_m2c"][3 * r + c].get<double>();
          obj.pose_m2c.t(r) = g["cam_t_m2c"][r].get<double>() / 1000.0;
        }
        char suffix[24];
        std::snprintf(suffix, sizeof(suffix), "%06d_%06d.png", rec.image_id, slot);
        const fs::path mask = root / "mask_visib" / suffix;
        if (fs::exists(mask)) obj.mask_path = mask.string();
        rec.objects.push_back(std::move(obj));
        ++slot;
      }
    }
    records.emplace(rec.image_id, std::move(rec));
  }

  std::vector<SceneRecord> out;
  out.reserve(records.size());
  for (auto& [id, rec] : records) out.push_back(std::move(rec));
  return out;
}

/// \brief Pixel data of one scene record: grayscale RGB in [0, 1] and metric
///        depth, with the clamp tally from the depth loader.
struct ImageBundle {
  Image<double> gray;
  DepthMap depth;
  long long depth_clamped = 0;
};

/// \brief Loads a record's images and fills in the intrinsics' resolution.
inline ImageBundle load_images(SceneRecord& rec, double depth_min = kDepthMin,
                               double depth_max = kDepthMax) {
  ImageBundle out;
  out.gray = rgb_to_gray(load_png_rgb8(rec.rgb_path));
  auto loaded = load_depth_png(rec.depth_path, rec.depth_divisor, depth_min, depth_max);
  out.depth = std::move(loaded.depth);
  out.depth_clamped = loaded.clamped;
  require_same_size(out.gray, out.depth.grid(), "load_images");
  rec.k.width = out.gray.width();
  rec.k.height = out.gray.height();
  if (!rec.k.plausible())
    throw FormatError("scene: implausible intrinsics for " + rec.rgb_path);
  return out;
}

/// \brief Loads an 8-bit mask; nonzero pixels are included.
inline Mask load_mask(const std::string& path) { return load_png_gray8(path); }

/// \brief Reads dir/synth_info.json written by the synthetic generator.
inline SynthInfo load_synth_info(const std::string& dir) {
  const auto path = (std::filesystem::path(dir) / "synth_info.json").string();
  const auto j = detail::parse_json_file(path);
  SynthInfo info;
  info.query_id = j.value("query_id", 0);
  info.reference_id = j.value("reference_id", 1);
  info.target_obj = j.value("target_obj", 1);
  info.rotation_gap_deg = j.value("rotation_gap_deg", 0.0);
  if (!j.contains("relative"))
    throw FormatError("synth_info: missing 'relative' transform in " + path);
  info.relative = detail::transform_from_json(j["relative"], "synth_info");
  return info;
}

inline void save_synth_info(const std::string& dir, const SynthInfo& info) {
  nlohmann::json j;
  j["query_id"] = info.query_id;
  j["reference_id"] = info.reference_id;
  j["target_obj"] = info.target_obj;
  j["rotation_gap_deg"] = info.rotation_gap_deg;
  j["relative"] = detail::transform_to_json(info.relative);
  detail::write_json_file((std::filesystem::path(dir) / "synth_info.json").string(),
                          j);
}

// ---------------------------------------------------------------------------
// Intrinsics cropping: a window starting at (x0, y0) keeps the same focal
// lengths and shifts the principal point, so lift/project stay consistent
// with cropped images.
// ---------------------------------------------------------------------------

inline CameraIntrinsics crop_camera(const CameraIntrinsics& k, int x0, int y0,
                                    int width, int height) {
  if (width <= 0 || height <= 0 || x0 < 0 || y0 < 0 || x0 + width > k.width ||
      y0 + height > k.height)
    throw InvalidInputError("crop_camera: window outside the image");
  CameraIntrinsics out = k;
  out.cx = k.cx - x0;
  out.cy = k.cy - y0;
  out.width = width;
  out.height = height;
  return out;
}

template <typename T>
inline Image<T> crop_image(const Image<T>& img, int x0, int y0, int width,
                           int height) {
  if (width <= 0 || height <= 0 || x0 < 0 || y0 < 0 || x0 + width > img.width() ||
      y0 + height > img.height())
    throw InvalidInputError("crop_image: window outside the image");
  Image<T> out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines records. Doubles round-trip losslessly through the serializer.
// ---------------------------------------------------------------------------

/// \brief One matching outcome, keyed by a pair id for order-stable output.
struct MatchRecord {
  std::string pair_id;
  matching::MatchSet matches;
};

/// \brief One registration outcome, keyed by a pair id.
struct PoseRecord {
  std::string pair_id;
  std::string solver = pose::kSolverName;
  pose::PoseEstimate estimate;
};

inline void write_match_records(const std::string& path,
                                const std::vector<MatchRecord>& records) {
  std::ofstream os(path);
  if (!os) throw FormatError("match records: cannot open for write " + path);
  for (const auto& rec : records) {
    nlohmann::json j;
    j["pair_id"] = rec.pair_id;
    j["tie_breaks"] = rec.matches.tie_breaks;
    j["dropped_out_of_bounds"] = rec.matches.dropped_out_of_bounds;
    auto& arr = j["matches"] = nlohmann::json::array();
    for (const auto& m : rec.matches.matches)
      arr.push_back({m.qi, m.ri, m.confidence, m.qx, m.qy, m.rx, m.ry});
    os << j.dump() << "\n";
  }
  if (!os) throw FormatError("match records: write failed for " + path);
}

inline std::vector<MatchRecord> read_match_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("match records: cannot open " + path);
  std::vector<MatchRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("match records: bad line in " + path + ": " + e.what());
    }
    MatchRecord rec;
    rec.pair_id = j.value("pair_id", "");
    rec.matches.tie_breaks = j.value("tie_breaks", 0);
    rec.matches.dropped_out_of_bounds = j.value("dropped_out_of_bounds", 0);
    for (const auto& m : j["matches"]) {
      if (m.size() != 7)
        throw FormatError("match records: malformed match row in " + path);
      matching::Match mm;
      mm.qi = m[0].get<int>();
      mm.ri = m[1].get<int>();
      mm.confidence = m[2].get<double>();
      mm.qx = m[3].get<double>();
      mm.qy = m[4].get<double>();
      mm.rx = m[5].get<double>();
      mm.ry = m[6].get<double>();
      rec.matches.matches.push_back(mm);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_pose_records(const std::string& path,
                               const std::vector<PoseRecord>& records) {
  std::ofstream os(path);
  if (!os) throw FormatError("pose records: cannot open for write " + path);
  for (const auto& rec : records) {
    nlohmann::json j;
    j["pair_id"] = rec.pair_id;
    j["solver"] = rec.solver;
    j["transform"] = detail::transform_to_json(rec.estimate.transform);
    j["inliers"] = rec.estimate.inliers;
    j["rms"] = rec.estimate.rms;
    j["iterations"] = rec.estimate.iterations;
    j["inlier_count"] = rec.estimate.inlier_count;
    os << j.dump() << "\n";
  }
  if (!os) throw FormatError("pose records: write failed for " + path);
}

inline std::vector<PoseRecord> read_pose_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("pose records: cannot open " + path);
  std::vector<PoseRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("pose records: bad line in " + path + ": " + e.what());
    }
    PoseRecord rec;
    rec.pair_id = j.value("pair_id", "");
    rec.solver = j.value("solver", pose::kSolverName);
    rec.estimate.transform = detail::transform_from_json(j["transform"], "pose records");
    rec.estimate.inliers = j.value("inliers", std::vector<std::uint8_t>{});
    rec.estimate.rms = j.value("rms", 0.0);
    rec.estimate.iterations = j.value("iterations", 0);
    rec.estimate.inlier_count = j.value("inlier_count", 0);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace refpose::io
