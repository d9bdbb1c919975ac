#pragma once

// Synthetic scenes: a source surface, a ground-truth warp drawn from the
// embedded-deformation family, the warped target and a corrupted set of
// labeled correspondences.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "graphsc/cloud_io.hpp"
#include "graphsc/correspondence.hpp"
#include "graphsc/warp.hpp"

namespace graphsc {

enum class Surface { plane_grid, cylinder, two_lobe };
enum class WarpKind { global_rigid, smooth_graph, articulated };
enum class OutlierMode { uniform_in_bbox, shuffled_target };

struct SceneSpec {
  std::size_t point_count = 500;
  std::size_t correspondence_count = 0;  // 0: one per source point
  Surface surface = Surface::plane_grid;
  WarpKind warp_kind = WarpKind::smooth_graph;
  double rotation = 0.35;     // radians
  double translation = 0.05;  // meters
  double inlier_ratio = 0.5;
  double inlier_noise_std = 0.005;
  OutlierMode outlier_mode = OutlierMode::uniform_in_bbox;
  double label_tau_d = 0.04;  // outliers are kept only with residual >= 3 * tau_d
  double gt_coverage = 0.08;
  std::size_t gt_k = 6;
  std::uint64_t seed = 0;

  std::size_t effective_correspondences() const {
    return correspondence_count == 0 ? point_count : correspondence_count;
  }

  void validate() const {
    if (point_count < 1) fail_validation("point_count must be at least 1");
    if (correspondence_count > point_count) fail_validation("correspondence_count must not exceed point_count");
    if (!(inlier_ratio >= 0.0 && inlier_ratio <= 1.0)) fail_validation("inlier_ratio must lie in [0,1]");
    if (!(inlier_noise_std >= 0.0)) fail_validation("inlier_noise_std must be non-negative");
    if (!std::isfinite(rotation) || !(rotation >= 0.0)) fail_validation("rotation must be non-negative");
    if (!std::isfinite(translation) || !(translation >= 0.0)) fail_validation("translation must be non-negative");
    if (!(label_tau_d > 0.0)) fail_validation("label_tau_d must be positive");
    if (!(gt_coverage > 0.0)) fail_validation("gt_coverage must be positive");
    if (gt_k < 1) fail_validation("gt_k must be at least 1");
  }
};

namespace detail {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

inline constexpr EnumName<Surface> kSurfaceNames[] = {
    {Surface::plane_grid, "plane-grid"}, {Surface::cylinder, "cylinder"}, {Surface::two_lobe, "two-lobe"}};
inline constexpr EnumName<WarpKind> kWarpNames[] = {{WarpKind::global_rigid, "global-rigid"},
                                                    {WarpKind::smooth_graph, "smooth-graph"},
                                                    {WarpKind::articulated, "articulated"}};
inline constexpr EnumName<OutlierMode> kOutlierNames[] = {{OutlierMode::uniform_in_bbox, "uniform-in-bbox"},
                                                          {OutlierMode::shuffled_target, "shuffled-target"}};

template <class E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <class E, std::size_t N>
E enum_parse(const EnumName<E> (&table)[N], const std::string& s, const char* key) {
  for (const auto& e : table) {
    if (s == e.name) return e.value;
  }
  fail_validation(std::string(key) + ": unknown value '" + s + "'");
}

// Non-negative integer, whether the document stored it signed or unsigned.
inline bool is_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

template <class T>
T get_count(const nlohmann::json& v, const std::string& key) {
  if (!is_count(v)) fail_validation(key + ": must be a non-negative integer");
  return v.get<T>();
}

// Rounds to single precision so the PLY float round trip is exact.
inline Vec3 to_float_grid(const Vec3& p) {
  return Vec3(round_to_float(p.x()), round_to_float(p.y()), round_to_float(p.z()));
}

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(normal(rng), normal(rng), normal(rng));
  } while (v.norm() < 1e-12);
  return v.normalized();
}

inline Mat3 axis_angle(const Vec3& axis, double angle) { return exp_so3(axis * angle); }

}  // namespace detail

inline nlohmann::json to_json(const SceneSpec& s) {
  using detail::enum_name;
  return nlohmann::json{{"point_count", s.point_count},
                        {"correspondence_count", s.correspondence_count},
                        {"surface", enum_name(detail::kSurfaceNames, s.surface)},
                        {"warp_kind", enum_name(detail::kWarpNames, s.warp_kind)},
                        {"rotation", s.rotation},
                        {"translation", s.translation},
                        {"inlier_ratio", s.inlier_ratio},
                        {"inlier_noise_std", s.inlier_noise_std},
                        {"outlier_mode", enum_name(detail::kOutlierNames, s.outlier_mode)},
                        {"label_tau_d", s.label_tau_d},
                        {"gt_coverage", s.gt_coverage},
                        {"gt_k", s.gt_k},
                        {"seed", s.seed}};
}

/// Parses a scene spec; unknown keys and out-of-range values are rejected with
/// a message naming the key.
inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail_validation("scene spec must be a JSON object");
  SceneSpec s;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "point_count") {
        s.point_count = detail::get_count<std::size_t>(value, key);
      } else if (key == "correspondence_count") {
        s.correspondence_count = detail::get_count<std::size_t>(value, key);
      } else if (key == "surface") {
        s.surface = detail::enum_parse(detail::kSurfaceNames, value.get<std::string>(), "surface");
      } else if (key == "warp_kind") {
        s.warp_kind = detail::enum_parse(detail::kWarpNames, value.get<std::string>(), "warp_kind");
      } else if (key == "rotation") {
        s.rotation = value.get<double>();
      } else if (key == "translation") {
        s.translation = value.get<double>();
      } else if (key == "inlier_ratio") {
        s.inlier_ratio = value.get<double>();
        if (!(s.inlier_ratio >= 0.0 && s.inlier_ratio <= 1.0)) fail_validation("inlier_ratio must lie in [0,1]");
      } else if (key == "inlier_noise_std") {
        s.inlier_noise_std = value.get<double>();
      } else if (key == "outlier_mode") {
        s.outlier_mode = detail::enum_parse(detail::kOutlierNames, value.get<std::string>(), "outlier_mode");
      } else if (key == "label_tau_d") {
        s.label_tau_d = value.get<double>();
      } else if (key == "gt_coverage") {
        s.gt_coverage = value.get<double>();
      } else if (key == "gt_k") {
        s.gt_k = detail::get_count<std::size_t>(value, key);
      } else if (key == "seed") {
        s.seed = detail::get_count<std::uint64_t>(value, key);
      } else {
        fail_validation("unknown key '" + key + "'");
      }
    } catch (const nlohmann::json::exception&) {
      fail_validation(key + ": wrong value type");
    }
  }
  s.validate();
  return s;
}

inline SceneSpec read_scene_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_validation(path.string() + ": " + e.what());
  }
  return scene_spec_from_json(j);
}

/// Source surface samples, rounded to single precision.
inline std::vector<Vec3> sample_surface(Surface surface, std::size_t n, std::mt19937_64& rng) {
  std::vector<Vec3> pts;
  pts.reserve(n);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  switch (surface) {
    case Surface::plane_grid: {
      const double extent = 0.6;
      const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
      const double step = side > 1 ? extent / static_cast<double>(side - 1) : 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double u = static_cast<double>(i % side) * step - 0.5 * extent;
        const double v = static_cast<double>(i / side) * step - 0.5 * extent;
        pts.push_back(detail::to_float_grid(Vec3(u, v, 0.0)));
      }
      break;
    }
    case Surface::cylinder: {
      const double radius = 0.15, height = 0.4;
      for (std::size_t i = 0; i < n; ++i) {
        const double phi = 2.0 * EIGEN_PI * uni(rng);
        const double z = (uni(rng) - 0.5) * height;
        pts.push_back(detail::to_float_grid(Vec3(radius * std::cos(phi), radius * std::sin(phi), z)));
      }
      break;
    }
    case Surface::two_lobe: {
      const double radius = 0.12;
      for (std::size_t i = 0; i < n; ++i) {
        const Vec3 centre(i % 2 == 0 ? -0.12 : 0.12, 0.0, 0.0);
        pts.push_back(detail::to_float_grid(centre + radius * detail::random_unit(rng)));
      }
      break;
    }
  }
  return pts;
}

/// Ground-truth warp over a graph built on `source`.
inline WarpField make_ground_truth(const SceneSpec& spec, std::span<const Vec3> source, std::mt19937_64& rng) {
  WarpField w = WarpField::identity(build_graph(source, spec.gt_coverage, spec.gt_k));
  const Vec3 c = centroid(source);
  double extent = 0.0;
  for (const Vec3& p : source) extent = std::max(extent, (p - c).norm());
  if (extent == 0.0) extent = 1.0;

  const Vec3 axis = detail::random_unit(rng);
  const Vec3 shift = spec.translation * detail::random_unit(rng);
  const std::size_t nodes = w.graph.node_count();

  switch (spec.warp_kind) {
    case WarpKind::global_rigid: {
      const Mat3 r = detail::axis_angle(axis, spec.rotation);
      for (std::size_t j = 0; j < nodes; ++j) {
        const Vec3& v = w.graph.nodes[j];
        w.transforms[j] = {r, r * v + shift - v};
      }
      break;
    }
    case WarpKind::smooth_graph: {
      // Bend about `axis`, with angle varying smoothly along `dir`:
      //   f(p) = R(theta(p)) (p - c) + c + shift,  theta(p) = rot * sin(pi/2 * (p - c).dir / extent)
      const Vec3 dir = detail::random_unit(rng);
      for (std::size_t j = 0; j < nodes; ++j) {
        const Vec3& v = w.graph.nodes[j];
        const double theta = spec.rotation * std::sin(0.5 * EIGEN_PI * (v - c).dot(dir) / extent);
        const Mat3 r = detail::axis_angle(axis, theta);
        w.transforms[j] = {r, r * (v - c) + c + shift - v};
      }
      break;
    }
    case WarpKind::articulated: {
      // Two rigid parts split by a plane through the centroid; one part also
      // rotates about the centroid.
      const Vec3 normal = detail::random_unit(rng);
      const Mat3 r = detail::axis_angle(axis, spec.rotation);
      for (std::size_t j = 0; j < nodes; ++j) {
        const Vec3& v = w.graph.nodes[j];
        if ((v - c).dot(normal) >= 0.0) {
          w.transforms[j] = {r, r * (v - c) + c + shift - v};
        } else {
          w.transforms[j] = {Mat3::Identity(), shift};
        }
      }
      break;
    }
  }
  return w;
}

struct Scene {
  SceneSpec spec;
  std::vector<Vec3> source;
  std::vector<Vec3> target;
  WarpField gt;
  CorrespondenceSet corr;  // labels filled
};

inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Scene s;
  s.spec = spec;
  s.source = sample_surface(spec.surface, spec.point_count, rng);
  s.gt = make_ground_truth(spec, s.source, rng);
  s.target.reserve(s.source.size());
  for (const Vec3& p : s.source) s.target.push_back(detail::to_float_grid(s.gt.warp(p)));

  const std::size_t nc = spec.effective_correspondences();
  const auto n_in = static_cast<std::size_t>(std::llround(spec.inlier_ratio * static_cast<double>(nc)));

  std::vector<std::size_t> pick(s.source.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  std::shuffle(pick.begin(), pick.end(), rng);
  pick.resize(nc);

  const BoundingBox box = bounding_box(s.target);
  const Vec3 pad = Vec3::Constant(0.1);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_target(0, s.target.size() - 1);
  std::normal_distribution<double> noise(0.0, spec.inlier_noise_std > 0.0 ? spec.inlier_noise_std : 1.0);
  const double floor = 3.0 * spec.label_tau_d;

  for (std::size_t k = 0; k < nc; ++k) {
    const Vec3& x = s.source[pick[k]];
    const Vec3 wx = s.gt.warp(x);
    if (k < n_in) {
      Vec3 y = wx;
      if (spec.inlier_noise_std > 0.0) y += Vec3(noise(rng), noise(rng), noise(rng));
      s.corr.push_back(x, y);
      s.corr.labels.push_back(1);
      continue;
    }
    Vec3 y;
    std::size_t attempts = 0;
    do {
      if (++attempts > 10000) fail_validation("synth: cannot place an outlier beyond the residual floor");
      if (spec.outlier_mode == OutlierMode::uniform_in_bbox) {
        const Vec3 lo = box.lo - pad, hi = box.hi + pad;
        y = Vec3(lo.x() + uni(rng) * (hi.x() - lo.x()), lo.y() + uni(rng) * (hi.y() - lo.y()),
                 lo.z() + uni(rng) * (hi.z() - lo.z()));
      } else {
        y = s.target[any_target(rng)];
      }
    } while ((y - wx).norm() < floor);
    s.corr.push_back(x, y);
    s.corr.labels.push_back(0);
  }

  std::vector<std::size_t> order(nc);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  s.corr = s.corr.select(order);
  return s;
}

/// Scene bundle: source.ply, target.ply, corr.csv, warp.txt and spec.json.
inline void write_scene(const std::filesystem::path& dir, const Scene& s) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail_io("cannot create " + dir.string() + ": " + ec.message());
  write_ply(dir / "source.ply", s.source);
  write_ply(dir / "target.ply", s.target);
  write_correspondences(dir / "corr.csv", s.corr);
  write_warp_field(dir / "warp.txt", s.gt);
  std::ofstream out(dir / "spec.json");
  if (!out) fail_io("cannot write " + (dir / "spec.json").string());
  out << to_json(s.spec).dump(2) << "\n";
}

inline Scene read_scene(const std::filesystem::path& dir) {
  Scene s;
  s.spec = read_scene_spec(dir / "spec.json");
  s.source = read_cloud(dir / "source.ply").points;
  s.target = read_cloud(dir / "target.ply").points;
  s.corr = read_correspondences(dir / "corr.csv");
  s.gt = read_warp_field(dir / "warp.txt");
  return s;
}

}  // namespace graphsc
