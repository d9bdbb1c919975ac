#pragma once

// ASCII PLY and XYZ point-cloud reading/writing.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "graphsc/geometry.hpp"

namespace graphsc {

namespace detail {

inline std::string lowercase_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

inline double parse_coordinate(const std::string& token, const std::string& where) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(token, &used);
  } catch (const std::exception&) {
    fail_validation(where + ": cannot parse number '" + token + "'");
  }
  if (used != token.size()) fail_validation(where + ": cannot parse number '" + token + "'");
  if (!std::isfinite(value)) fail_validation(where + ": non-finite coordinate '" + token + "'");
  return value;
}

}  // namespace detail

/// Reads an ASCII PLY file. Only the vertex element's x, y and z properties are
/// used; other vertex properties are skipped and any later elements ignored.
inline PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) fail_validation(path.string() + ": not a PLY file");

  std::size_t vertex_count = 0;
  bool in_vertex = false;
  bool seen_vertex = false;
  bool ascii = false;
  std::vector<std::string> vertex_props;
  std::vector<bool> single_precision;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) {
        if (seen_vertex) fail_validation(path.string() + ": duplicate vertex element");
        seen_vertex = true;
        vertex_count = count;
      } else if (!seen_vertex && count > 0) {
        fail_validation(path.string() + ": elements before vertex are not supported");
      }
    } else if (word == "property" && in_vertex) {
      std::string type;
      std::string name;
      ls >> type;
      if (type == "list") fail_validation(path.string() + ": list properties on vertices are not supported");
      ls >> name;
      vertex_props.push_back(name);
      single_precision.push_back(type == "float" || type == "float32");
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) fail_validation(path.string() + ": only ascii PLY is supported");
  if (!seen_vertex) fail_validation(path.string() + ": no vertex element");

  auto find_prop = [&](const std::string& name) {
    auto it = std::find(vertex_props.begin(), vertex_props.end(), name);
    if (it == vertex_props.end()) fail_validation(path.string() + ": missing vertex property " + name);
    return static_cast<std::size_t>(it - vertex_props.begin());
  };
  const std::size_t ix = find_prop("x"), iy = find_prop("y"), iz = find_prop("z");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  std::vector<std::string> tokens(vertex_props.size());
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!std::getline(in, line)) fail_validation(path.string() + ": truncated vertex list");
    std::istringstream ls(line);
    for (auto& t : tokens) {
      if (!(ls >> t)) fail_validation(path.string() + ": short vertex row " + std::to_string(v));
    }
    const std::string where = path.string() + " vertex " + std::to_string(v);
    auto coord = [&](std::size_t i) {
      const double value = detail::parse_coordinate(tokens[i], where);
      return single_precision[i] ? round_to_float(value) : value;
    };
    cloud.points.emplace_back(coord(ix), coord(iy), coord(iz));
  }
  return cloud;
}

/// Writes an ASCII PLY with float x, y, z. Values are printed with enough
/// digits to round-trip single precision exactly.
inline void write_ply(const std::filesystem::path& path, std::span<const Vec3> pts) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "ply\nformat ascii 1.0\nelement vertex %zu\n", pts.size());
  std::fprintf(fp, "property float x\nproperty float y\nproperty float z\nend_header\n");
  for (const Vec3& p : pts) std::fprintf(fp, "%.9g %.9g %.9g\n", p.x(), p.y(), p.z());
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

/// Whitespace-separated "x y z" rows; blank lines and '#' comments skipped.
inline PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());
  PointCloud cloud;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!(ls >> a)) continue;
    if (!(ls >> b >> c)) fail_validation(path.string() + ": short row " + std::to_string(row));
    const std::string where = path.string() + " row " + std::to_string(row);
    cloud.points.emplace_back(detail::parse_coordinate(a, where), detail::parse_coordinate(b, where),
                              detail::parse_coordinate(c, where));
  }
  return cloud;
}

inline void write_xyz(const std::filesystem::path& path, std::span<const Vec3> pts) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  for (const Vec3& p : pts) std::fprintf(fp, "%.17g %.17g %.17g\n", p.x(), p.y(), p.z());
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

/// Dispatches on extension: .ply, otherwise XYZ text.
inline PointCloud read_cloud(const std::filesystem::path& path) {
  return detail::lowercase_extension(path) == ".ply" ? read_ply(path) : read_xyz(path);
}

}  // namespace graphsc
