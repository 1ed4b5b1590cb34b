/**
 * \file mesh.hpp
 * \brief Triangle mesh model: PLY reading and writing (ASCII and
 *        little-endian binary), exact diameter, and symmetry bookkeeping.
 */
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "refpose/transform.hpp"
#include "refpose/types.hpp"

namespace refpose::mesh {

/// \brief Raw geometry read from a PLY file.
struct TriangleSoup {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;
};

namespace detail {

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

inline PlyType ply_type(const std::string& name, const std::string& path) {
  if (name == "char" || name == "int8") return PlyType::i8;
  if (name == "uchar" || name == "uint8") return PlyType::u8;
  if (name == "short" || name == "int16") return PlyType::i16;
  if (name == "ushort" || name == "uint16") return PlyType::u16;
  if (name == "int" || name == "int32") return PlyType::i32;
  if (name == "uint" || name == "uint32") return PlyType::u32;
  if (name == "float" || name == "float32") return PlyType::f32;
  if (name == "double" || name == "float64") return PlyType::f64;
  throw FormatError("load_ply: unknown property type '" + name + "' in " + path);
}

inline std::size_t ply_size(PlyType t) {
  switch (t) {
    case PlyType::i8:
    case PlyType::u8: return 1;
    case PlyType::i16:
    case PlyType::u16: return 2;
    case PlyType::i32:
    case PlyType::u32:
    case PlyType::f32: return 4;
    case PlyType::f64: return 8;
  }
  return 0;
}

/// Reads one little-endian scalar of the given type as a double.
inline double read_binary_scalar(std::istream& is, PlyType t, const std::string& path) {
  unsigned char b[8] = {0};
  is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(ply_size(t)));
  if (!is) throw FormatError("load_ply: truncated binary data in " + path);
  const auto u16 = [&] { return static_cast<std::uint16_t>(b[0] | (b[1] << 8)); };
  const auto u32 = [&] {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  const auto u64 = [&] {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  };
  switch (t) {
    case PlyType::i8: return static_cast<double>(static_cast<std::int8_t>(b[0]));
    case PlyType::u8: return static_cast<double>(b[0]);
    case PlyType::i16: return static_cast<double>(static_cast<std::int16_t>(u16()));
    case PlyType::u16: return static_cast<double>(u16());
    case PlyType::i32: return static_cast<double>(static_cast<std::int32_t>(u32()));
    case PlyType::u32: return static_cast<double>(u32());
    case PlyType::f32: {
      float f;
      const std::uint32_t v = u32();
      static_assert(sizeof(f) == 4);
      std::memcpy(&f, &v, 4);
      return static_cast<double>(f);
    }
    case PlyType::f64: {
      double d;
      const std::uint64_t v = u64();
      std::memcpy(&d, &v, 8);
      return d;
    }
  }
  return 0.0;
}

inline double read_ascii_scalar(std::istream& is, const std::string& path) {
  double v;
  if (!(is >> v)) throw FormatError("load_ply: truncated ASCII data in " + path);
  return v;
}

struct PlyProperty {
  std::string name;
  bool is_list = false;
  PlyType count_type = PlyType::u8;
  PlyType value_type = PlyType::f32;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

}  // namespace detail

/**
 * \brief Loads vertices and triangles from a PLY file.
 *
 * Supports ASCII and binary_little_endian layouts; binary_big_endian is
 * rejected. Unknown vertex/face properties and extra elements are skipped.
 * Faces with more than three indices are fan-triangulated.
 */
inline TriangleSoup load_ply(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_ply: cannot open " + path);

  std::string line;
  if (!std::getline(is, line)) throw FormatError("load_ply: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "ply") throw FormatError("load_ply: missing 'ply' magic in " + path);

  bool binary = false;
  bool format_seen = false;
  std::vector<detail::PlyElement> elements;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword == "comment" || keyword == "obj_info" || keyword.empty()) continue;
    if (keyword == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") {
        binary = false;
      } else if (fmt == "binary_little_endian") {
        binary = true;
      } else if (fmt == "binary_big_endian") {
        throw FormatError("load_ply: big-endian PLY is not supported (" + path + ")");
      } else {
        throw FormatError("load_ply: unknown format '" + fmt + "' in " + path);
      }
      format_seen = true;
    } else if (keyword == "element") {
      detail::PlyElement el;
      long long count = -1;
      ls >> el.name >> count;
      if (el.name.empty() || count < 0 || count > (1LL << 26))
        throw FormatError("load_ply: implausible element declaration in " + path);
      el.count = static_cast<std::size_t>(count);
      elements.push_back(el);
    } else if (keyword == "property") {
      if (elements.empty())
        throw FormatError("load_ply: property before any element in " + path);
      detail::PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        std::string ct, vt;
        ls >> ct >> vt >> p.name;
        p.is_list = true;
        p.count_type = detail::ply_type(ct, path);
        p.value_type = detail::ply_type(vt, path);
      } else {
        ls >> p.name;
        p.value_type = detail::ply_type(t, path);
      }
      if (p.name.empty()) throw FormatError("load_ply: unnamed property in " + path);
      elements.back().props.push_back(p);
    } else if (keyword == "end_header") {
      break;
    } else {
      throw FormatError("load_ply: unexpected header keyword '" + keyword + "' in " + path);
    }
  }
  if (!format_seen) throw FormatError("load_ply: missing format line in " + path);

  TriangleSoup out;
  const auto scalar = [&](detail::PlyType t) {
    return binary ? detail::read_binary_scalar(is, t, path)
                  : detail::read_ascii_scalar(is, path);
  };

  for (const auto& el : elements) {
    const bool is_vertex = el.name == "vertex";
    const bool is_face = el.name == "face";
    if (is_vertex) out.vertices.reserve(el.count);

    for (std::size_t i = 0; i < el.count; ++i) {
      double x = 0, y = 0, z = 0;
      std::vector<long long> indices;
      for (const auto& p : el.props) {
        if (p.is_list) {
          const double cnt_d = scalar(p.count_type);
          const long long cnt = static_cast<long long>(cnt_d);
          if (cnt < 0 || cnt > 255)
            throw FormatError("load_ply: implausible list count in " + path);
          for (long long k = 0; k < cnt; ++k) {
            const double v = scalar(p.value_type);
            if (is_face && (p.name == "vertex_indices" || p.name == "vertex_index"))
              indices.push_back(static_cast<long long>(v));
          }
        } else {
          const double v = scalar(p.value_type);
          if (is_vertex) {
            if (p.name == "x") x = v;
            else if (p.name == "y") y = v;
            else if (p.name == "z") z = v;
          }
        }
      }
      if (is_vertex) out.vertices.emplace_back(x, y, z);
      if (is_face && !indices.empty()) {
        if (indices.size() < 3)
          throw FormatError("load_ply: face with fewer than 3 indices in " + path);
        for (std::size_t k = 1; k + 1 < indices.size(); ++k) {
          const long long a = indices[0], b = indices[k], c = indices[k + 1];
          for (long long ix : {a, b, c})
            if (ix < 0 || static_cast<std::size_t>(ix) >= out.vertices.size())
              throw FormatError("load_ply: face index out of range in " + path);
          out.triangles.push_back({static_cast<int>(a), static_cast<int>(b),
                                   static_cast<int>(c)});
        }
      }
    }
  }
  return out;
}

/// \brief Writes a PLY file with double-precision coordinates.
inline void save_ply(const std::string& path, const TriangleSoup& soup, bool binary) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_ply: cannot open " + path);
  os << "ply\n";
  os << "format " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
  os << "element vertex " << soup.vertices.size() << "\n";
  os << "property double x\nproperty double y\nproperty double z\n";
  os << "element face " << soup.triangles.size() << "\n";
  os << "property list uchar int vertex_indices\n";
  os << "end_header\n";

  const auto put_f64 = [&](double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
  };
  const auto put_i32 = [&](std::int32_t x) {
    const auto v = static_cast<std::uint32_t>(x);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
  };

  if (binary) {
    for (const auto& v : soup.vertices) {
      put_f64(v.x());
      put_f64(v.y());
      put_f64(v.z());
    }
    for (const auto& t : soup.triangles) {
      const unsigned char n = 3;
      os.write(reinterpret_cast<const char*>(&n), 1);
      put_i32(t[0]);
      put_i32(t[1]);
      put_i32(t[2]);
    }
  } else {
    os.precision(17);
    for (const auto& v : soup.vertices)
      os << v.x() << " " << v.y() << " " << v.z() << "\n";
    for (const auto& t : soup.triangles)
      os << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
  }
  if (!os) throw FormatError("save_ply: write failed for " + path);
}

/// \brief Exact object diameter: the maximum pairwise vertex distance.
inline double mesh_diameter(const std::vector<Eigen::Vector3d>& vertices) {
  double best_sq = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i)
    for (std::size_t j = i + 1; j < vertices.size(); ++j)
      best_sq = std::max(best_sq, (vertices[i] - vertices[j]).squaredNorm());
  return std::sqrt(best_sq);
}

/**
 * \brief Object model fed to the pose metrics: geometry, exact diameter and
 *        the symmetry set (always holding the identity first).
 */
struct MeshModel {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<RigidTransform> symmetries;
  double diameter = 0.0;

  static MeshModel create(std::vector<Eigen::Vector3d> vertices,
                          std::vector<std::array<int, 3>> triangles,
                          std::vector<RigidTransform> symmetries = {}) {
    MeshModel m;
    m.vertices = std::move(vertices);
    m.triangles = std::move(triangles);
    if (m.vertices.empty())
      throw InvalidInputError("MeshModel: empty vertex list");
    for (const auto& t : m.triangles)
      for (int ix : t)
        if (ix < 0 || static_cast<std::size_t>(ix) >= m.vertices.size())
          throw InvalidInputError("MeshModel: triangle index out of range");
    m.diameter = mesh_diameter(m.vertices);
    if (!(m.diameter > 0.0))
      throw InvalidInputError("MeshModel: degenerate geometry (diameter is zero)");

    bool has_identity = false;
    for (const auto& s : symmetries)
      if ((s.R - Eigen::Matrix3d::Identity()).norm() < 1e-12 && s.t.norm() < 1e-12)
        has_identity = true;
    m.symmetries.reserve(symmetries.size() + 1);
    if (!has_identity) m.symmetries.push_back(RigidTransform::identity());
    for (auto& s : symmetries) m.symmetries.push_back(std::move(s));
    return m;
  }

  static MeshModel from_file(const std::string& path, double scale = 1.0,
                             std::vector<RigidTransform> symmetries = {}) {
    TriangleSoup soup = load_ply(path);
    if (scale != 1.0)
      for (auto& v : soup.vertices) v *= scale;
    return create(std::move(soup.vertices), std::move(soup.triangles),
                  std::move(symmetries));
  }
};

/**
 * \brief How far a claimed symmetry strays from mapping the vertex set onto
 *        itself: max over vertices of the distance to the nearest vertex
 *        after applying S. Loaders report large values as warnings.
 */
inline double symmetry_mapping_error(const MeshModel& mesh, const RigidTransform& S) {
  double worst = 0.0;
  for (const auto& v : mesh.vertices) {
    const Eigen::Vector3d sv = S.apply(v);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& w : mesh.vertices)
      best = std::min(best, (sv - w).squaredNorm());
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

}  // namespace refpose::mesh
