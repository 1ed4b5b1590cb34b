/**
 * \file synth.hpp
 * \brief Synthetic query/reference scene generator: procedurally textured
 *        meshes rendered to RGB, depth and masks with exact ground truth,
 *        written as a BOP-style scene directory. Byte-identical for a fixed
 *        seed.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "refpose/io_files.hpp"
#include "refpose/io_png.hpp"
#include "refpose/mesh.hpp"
#include "refpose/rasterizer.hpp"
#include "refpose/transform.hpp"
#include "refpose/types.hpp"

namespace refpose::synth {

/// \brief Generator knobs. The rotation gap is applied to the reference
///        camera as an orbit about the target center, per axis in degrees.
struct SynthConfig {
  int distractors = 3;
  double depth_min = kDepthMin;
  double depth_max = kDepthMax;
  int texture_octaves = 3;        ///< richness of the procedural texture
  double texture_contrast = 0.55;
  double texture_scale = 1.0;     ///< multiplier on all texture frequencies
  double outlier_fraction = 0.0;  ///< fraction of valid depth pixels junked
  double noise_std = 0.0;         ///< depth noise sigma in meters
  double rot_x_deg = 0.0;
  double rot_y_deg = 0.0;
  double rot_z_deg = 0.0;
  std::uint64_t seed = 0;
  int width = 256;
  int height = 256;
  double focal = 280.0;
  double camera_distance = 0.9;

  void validate() const {
    if (distractors < 0) throw InvalidInputError("synth: negative distractor count");
    if (!(depth_min > 0.0) || !(depth_max > depth_min))
      throw InvalidInputError("synth: bad depth range");
    if (texture_octaves < 1 || texture_octaves > 8)
      throw InvalidInputError("synth: texture_octaves out of range");
    if (!(texture_scale > 0.0))
      throw InvalidInputError("synth: texture_scale must be positive");
    if (outlier_fraction < 0.0 || outlier_fraction > 0.9)
      throw InvalidInputError("synth: outlier_fraction out of range");
    if (noise_std < 0.0) throw InvalidInputError("synth: negative noise_std");
    if (width < 64 || height < 64 || width % 8 != 0 || height % 8 != 0)
      throw InvalidInputError("synth: image dimensions must be multiples of 8, >= 64");
    if (!(focal > 0.0) || !(camera_distance > 0.0))
      throw InvalidInputError("synth: focal and camera distance must be positive");
  }
};

/// \brief Result handles of one generated scene directory.
struct SynthScene {
  std::string dir;
  io::SynthInfo info;
  std::vector<int> object_ids;  ///< target first, then per-image distractors
};

namespace detail {

/// Deterministic lattice hash in [0, 1), portable across platforms.
inline double lattice(std::uint64_t seed, std::int64_t x, std::int64_t y,
                      std::int64_t z) {
  std::uint64_t h = seed;
  h ^= static_cast<std::uint64_t>(x) * 0x9E3779B97F4A7C15ULL;
  h ^= static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4FULL;
  h ^= static_cast<std::uint64_t>(z) * 0x165667B19E3779F9ULL;
  h ^= h >> 30;
  h *= 0xBF58476D1CE4E5B9ULL;
  h ^= h >> 27;
  h *= 0x94D049BB133111EBULL;
  h ^= h >> 31;
  return static_cast<double>(h >> 11) / 9007199254740992.0;
}

/// Trilinear value noise over the unit lattice.
inline double value_noise(std::uint64_t seed, const Eigen::Vector3d& p) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx);
  const auto iy = static_cast<std::int64_t>(fy);
  const auto iz = static_cast<std::int64_t>(fz);
  const double tx = p.x() - fx, ty = p.y() - fy, tz = p.z() - fz;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) *
                         (dz ? tz : 1.0 - tz);
        acc += w * lattice(seed, ix + dx, iy + dy, iz + dz);
      }
  return acc;
}

/// Octave sum of model-space value noise, normalized to roughly [0, 1].
inline double solid_texture(std::uint64_t seed, const Eigen::Vector3d& model_p,
                            double base_freq, int octaves, double contrast) {
  double sum = 0.0, norm = 0.0, amp = 1.0, freq = base_freq;
  for (int o = 0; o < octaves; ++o) {
    sum += amp * value_noise(seed + static_cast<std::uint64_t>(o) * 1013ULL,
                             model_p * freq);
    norm += amp;
    amp *= 0.55;
    freq *= 2.0;
  }
  const double centered = sum / norm - 0.5;
  return std::clamp(0.5 + contrast * 2.0 * centered, 0.02, 0.98);
}

/// Axis-aligned box mesh centered at the origin.
inline mesh::MeshModel box_mesh(double ex, double ey, double ez) {
  std::vector<Eigen::Vector3d> v;
  for (int i = 0; i < 8; ++i)
    v.emplace_back((i & 1 ? ex : -ex) / 2.0, (i & 2 ? ey : -ey) / 2.0,
                   (i & 4 ? ez : -ez) / 2.0);
  const std::vector<std::array<int, 3>> t = {
      {0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}, {0, 1, 5}, {0, 5, 4},
      {2, 6, 7}, {2, 7, 3}, {0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}};
  return mesh::MeshModel::create(std::move(v), t);
}

/// Closed cylinder about the y axis, centered at the origin.
inline mesh::MeshModel cylinder_mesh(double radius_x, double radius_z, double height,
                                     int sides) {
  std::vector<Eigen::Vector3d> v;
  std::vector<std::array<int, 3>> t;
  for (int j = 0; j < sides; ++j) {
    const double th = 2.0 * std::numbers::pi * j / sides;
    const double x = radius_x * std::cos(th), z = radius_z * std::sin(th);
    v.emplace_back(x, -height / 2.0, z);
    v.emplace_back(x, height / 2.0, z);
  }
  const int bottom_center = static_cast<int>(v.size());
  v.emplace_back(0.0, -height / 2.0, 0.0);
  const int top_center = static_cast<int>(v.size());
  v.emplace_back(0.0, height / 2.0, 0.0);
  for (int j = 0; j < sides; ++j) {
    const int a = 2 * j, b = 2 * ((j + 1) % sides);
    t.push_back({a, b, a + 1});
    t.push_back({a + 1, b, b + 1});
    t.push_back({bottom_center, b, a});
    t.push_back({top_center, a + 1, b + 1});
  }
  return mesh::MeshModel::create(std::move(v), std::move(t));
}

struct PlacedObject {
  int obj_id = 0;               ///< 0 marks scenery without a ground-truth row
  const mesh::MeshModel* model = nullptr;
  RigidTransform m2w;
  std::uint64_t tex_seed = 0;
  double tex_freq = 45.0;
};

struct RenderedView {
  Image<double> gray;
  DepthMap depth;
  Image<int> winner;  ///< index into the placed-object list, -1 where empty
};

/// Renders all placed objects into one view with a global z-buffer.
inline RenderedView render_view(const std::vector<PlacedObject>& objects,
                                const RigidTransform& w2c, const CameraIntrinsics& k,
                                const SynthConfig& cfg) {
  RenderedView view;
  view.gray = Image<double>(k.width, k.height, 0.0);
  view.depth = DepthMap(k.width, k.height, 0.0);
  view.winner = Image<int>(k.width, k.height, -1);
  for (std::size_t oi = 0; oi < objects.size(); ++oi) {
    const auto& obj = objects[oi];
    const RigidTransform m2c = w2c * obj.m2w;
    const auto buf = rasterizer::render_geometry(*obj.model, m2c, k);
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x) {
        if (!buf.depth.valid(x, y)) continue;
        const double z = buf.depth.at(x, y);
        if (view.depth.valid(x, y) && view.depth.at(x, y) <= z) continue;
        view.depth.at(x, y) = z;
        view.winner.at(x, y) = static_cast<int>(oi);
        const Eigen::Vector3d mp(buf.model_x.at(x, y), buf.model_y.at(x, y),
                                 buf.model_z.at(x, y));
        view.gray.at(x, y) = solid_texture(obj.tex_seed, mp, obj.tex_freq,
                                           cfg.texture_octaves, cfg.texture_contrast);
      }
  }
  return view;
}

/// Applies depth noise and outlier corruption in place, deterministically.
inline void corrupt_depth(DepthMap& depth, const SynthConfig& cfg,
                          std::uint64_t stream) {
  if (cfg.noise_std <= 0.0 && cfg.outlier_fraction <= 0.0) return;
  std::mt19937_64 rng(stream);
  std::normal_distribution<double> gauss(0.0, cfg.noise_std > 0.0 ? cfg.noise_std : 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> junk(cfg.depth_min, cfg.depth_max);
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x) {
      if (!depth.valid(x, y)) continue;
      if (cfg.outlier_fraction > 0.0 && unit(rng) < cfg.outlier_fraction) {
        depth.at(x, y) = junk(rng);
        continue;
      }
      if (cfg.noise_std > 0.0)
        depth.at(x, y) = std::max(0.05, depth.at(x, y) + gauss(rng));
    }
}

inline io::Rgb8 gray_to_rgb8(const Image<double>& gray) {
  io::Rgb8 rgb{Image<std::uint8_t>(gray.width(), gray.height()),
               Image<std::uint8_t>(gray.width(), gray.height()),
               Image<std::uint8_t>(gray.width(), gray.height())};
  for (int y = 0; y < gray.height(); ++y)
    for (int x = 0; x < gray.width(); ++x) {
      const double v = std::clamp(gray.at(x, y), 0.0, 1.0) * 255.0;
      const auto b = static_cast<std::uint8_t>(std::lround(v));
      rgb.r.at(x, y) = b;
      rgb.g.at(x, y) = b;
      rgb.b.at(x, y) = b;
    }
  return rgb;
}

}  // namespace detail

/// \brief Stored-value divisor used for synthetic depth PNGs (0.02 mm steps,
///        spanning up to 1.31 m). The desk-scale scenes stay well under that
///        span, and the fine step keeps quantization out of the solved poses.
inline constexpr double kSynthDepthDivisor = 50000.0;

/**
 * \brief Generates one query/reference pair into \p out_dir.
 *
 * Both images share the textured target (object 1, a cylinder) at the world
 * origin; each image has its own background texture and its own distractor
 * boxes, so only the target relates the two views. The reference camera
 * orbits the target by the configured per-axis angles. Ground truth poses,
 * visibility masks, per-image intrinsics and the exact relative transform
 * are written alongside the images.
 */
inline SynthScene synth_scene(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path root(out_dir);
  for (const char* sub : {"", "rgb", "depth", "mask_visib", "models"})
    fs::create_directories(root / sub);

  CameraIntrinsics k;
  k.fx = k.fy = cfg.focal;
  k.cx = cfg.width / 2.0;
  k.cy = cfg.height / 2.0;
  k.width = cfg.width;
  k.height = cfg.height;

  const double deg = std::numbers::pi / 180.0;
  const Eigen::Matrix3d gap = axis_angle({0, 0, 1}, cfg.rot_z_deg * deg) *
                              axis_angle({0, 1, 0}, cfg.rot_y_deg * deg) *
                              axis_angle({1, 0, 0}, cfg.rot_x_deg * deg);
  const RigidTransform w2q{Eigen::Matrix3d::Identity(),
                           Eigen::Vector3d(0, 0, cfg.camera_distance)};
  const RigidTransform w2r = w2q * RigidTransform{gap, Eigen::Vector3d::Zero()};

  // Shared geometry: target cylinder, backdrop plane, distractor box. The
  // backdrop and distractors are placed per image in that image's camera
  // frame, so clutter frames the target without occluding it at any orbit
  // angle; only the target ties the two views together. The cylinder cross
  // section is elliptic so its depth profile rotates with its texture; a
  // circular profile would keep the depth image pinned to the silhouette
  // while the texture turns, feeding contradictory depth into the fused
  // descriptors at every nonzero gap.
  const mesh::MeshModel target = detail::cylinder_mesh(0.13, 0.08, 0.22, 48);
  std::vector<Eigen::Vector3d> plane_v = {{-1.5, -1.5, 0}, {1.5, -1.5, 0},
                                          {1.5, 1.5, 0}, {-1.5, 1.5, 0}};
  const mesh::MeshModel plane =
      mesh::MeshModel::create(plane_v, {{0, 1, 2}, {0, 2, 3}});
  const mesh::MeshModel distractor_box = detail::box_mesh(0.1, 0.1, 0.1);

  mesh::TriangleSoup target_mm;
  for (const auto& v : target.vertices) target_mm.vertices.push_back(v * 1000.0);
  target_mm.triangles = target.triangles;
  mesh::save_ply((root / "models" / "obj_000001.ply").string(), target_mm, true);

  nlohmann::json cameras, gts;
  SynthScene out;
  out.dir = out_dir;
  out.object_ids = {1};

  for (int image_id = 0; image_id < 2; ++image_id) {
    const bool is_query = image_id == 0;
    const RigidTransform& w2c = is_query ? w2q : w2r;
    const std::uint64_t image_seed =
        cfg.seed * 0x100000001B3ULL + static_cast<std::uint64_t>(image_id) + 1;

    const RigidTransform c2w = w2c.inverse();
    // Texture frequency scales inversely with camera distance so every
    // surface lands at a similar on-screen texture scale; the absolute level
    // is coarse enough that descriptors stay correlated under the fractional
    // grid-cell shifts a wide orbit gap induces.
    std::vector<detail::PlacedObject> placed;
    placed.push_back(
        {0, &plane,
         c2w * RigidTransform{Eigen::Matrix3d::Identity(),
                              Eigen::Vector3d(0, 0, cfg.camera_distance + 0.25)},
         image_seed ^ 0xB5C0FBCFULL, 21.7 * cfg.texture_scale});
    placed.push_back({1, &target, RigidTransform::identity(),
                      cfg.seed ^ 0x51ED270BULL, 31.5 * cfg.texture_scale});

    std::mt19937_64 place_rng(image_seed ^ 0xD6E8FEB8ULL);
    std::uniform_real_distribution<double> jitter(-0.02, 0.02);
    for (int d = 0; d < cfg.distractors; ++d) {
      const double phi = 2.0 * std::numbers::pi * (d + 0.25) /
                         std::max(1, cfg.distractors);
      const RigidTransform in_cam{
          axis_angle({0, 1, 0},
                     2.0 * std::numbers::pi * detail::lattice(image_seed, d, 7, 9)),
          Eigen::Vector3d(0.34 * std::cos(phi) + jitter(place_rng),
                          0.26 * std::sin(phi) + jitter(place_rng),
                          cfg.camera_distance + 0.05 + jitter(place_rng))};
      detail::PlacedObject obj;
      obj.obj_id = 2 + d + (is_query ? 0 : cfg.distractors);
      obj.model = &distractor_box;
      obj.m2w = c2w * in_cam;
      obj.tex_seed = image_seed * 131ULL + static_cast<std::uint64_t>(d) * 7919ULL;
      obj.tex_freq = 25.9 * cfg.texture_scale;
      placed.push_back(obj);
      out.object_ids.push_back(obj.obj_id);
    }

    auto view = detail::render_view(placed, w2c, k, cfg);
    detail::corrupt_depth(view.depth, cfg, image_seed ^ 0xA24BAED4ULL);

    const std::string name = io::image_name(image_id);
    io::save_png_rgb8((root / "rgb" / (name + ".png")).string(),
                      detail::gray_to_rgb8(view.gray));
    io::save_depth_png((root / "depth" / (name + ".png")).string(), view.depth,
                       kSynthDepthDivisor);

    const std::string key = std::to_string(image_id);
    cameras[key]["cam_K"] = {k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0};
    cameras[key]["depth_scale"] = 1000.0 / kSynthDepthDivisor;

    auto& gt_list = gts[key] = nlohmann::json::array();
    int slot = 0;
    for (std::size_t oi = 0; oi < placed.size(); ++oi) {
      const auto& obj = placed[oi];
      if (obj.obj_id == 0) continue;
      const RigidTransform m2c = w2c * obj.m2w;
      nlohmann::json g;
      g["obj_id"] = obj.obj_id;
      auto& rj = g["cam_R_m2c"] = nlohmann::json::array();
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rj.push_back(m2c.R(r, c));
      auto& tj = g["cam_t_m2c"] = nlohmann::json::array();
      for (int r = 0; r < 3; ++r) tj.push_back(m2c.t(r) * 1000.0);
      gt_list.push_back(g);

      Mask visib(k.width, k.height, 0);
      for (int y = 0; y < k.height; ++y)
        for (int x = 0; x < k.width; ++x)
          if (view.winner.at(x, y) == static_cast<int>(oi)) visib.at(x, y) = 255;
      char suffix[24];
      std::snprintf(suffix, sizeof(suffix), "%06d_%06d.png", image_id, slot);
      io::save_png_gray8((root / "mask_visib" / suffix).string(), visib);
      ++slot;
    }
  }

  io::detail::write_json_file((root / "scene_camera.json").string(), cameras);
  io::detail::write_json_file((root / "scene_gt.json").string(), gts);

  out.info.query_id = 0;
  out.info.reference_id = 1;
  out.info.target_obj = 1;
  out.info.rotation_gap_deg =
      rotation_angle_between(gap, Eigen::Matrix3d::Identity()) / deg;
  out.info.relative = w2r * w2q.inverse();
  io::save_synth_info(out_dir, out.info);
  return out;
}

}  // namespace refpose::synth
