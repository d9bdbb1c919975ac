#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "graphsc/defgraph.hpp"

namespace graphsc {

/// Embedded deformation: a deformation graph plus one rigid transform per node.
///   W(p) = sum_j alpha_j(p) * (R_j (p - v_j) + t_j + v_j)
struct WarpField {
  DeformationGraph graph;
  std::vector<RigidTransform> transforms;

  static WarpField identity(DeformationGraph graph) {
    WarpField w;
    w.transforms.assign(graph.node_count(), RigidTransform::identity());
    w.graph = std::move(graph);
    return w;
  }

  Vec3 warp(const Vec3& p, std::span<const NodeWeight> weights) const {
    Vec3 out = Vec3::Zero();
    for (const auto& nw : weights) {
      const Vec3& v = graph.nodes[nw.node];
      const RigidTransform& t = transforms[nw.node];
      out += nw.weight * (t.rotation * (p - v) + t.translation + v);
    }
    return out;
  }

  /// Evaluates at an arbitrary point, attaching it to its nearest nodes.
  Vec3 warp(const Vec3& p) const { return warp(p, graph.attach(p)); }

  std::vector<Vec3> warp_all(std::span<const Vec3> pts) const {
    std::vector<Vec3> out(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) out[i] = warp(pts[i]);
    return out;
  }

  void validate() const {
    if (transforms.size() != graph.node_count()) fail_validation("warp field: transform count != node count");
    for (const auto& t : transforms) {
      const double ortho = (t.rotation.transpose() * t.rotation - Mat3::Identity()).norm();
      if (!(ortho < 1e-9) || !(std::abs(t.rotation.determinant() - 1.0) < 1e-9)) {
        fail_validation("warp field: rotation is not orthonormal");
      }
    }
  }
};

/// Warp-field text file:
///   warpfield <node count> <coverage> <k>
///   <vx> <vy> <vz> <wx> <wy> <wz> <tx> <ty> <tz>     (one line per node)
/// where w is the axis-angle vector of the node rotation.
inline void write_warp_field(const std::filesystem::path& path, const WarpField& w) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "warpfield %zu %.17g %zu\n", w.graph.node_count(), w.graph.coverage, w.graph.assign_k);
  for (std::size_t j = 0; j < w.graph.node_count(); ++j) {
    const Vec3& v = w.graph.nodes[j];
    const Vec3 r = log_so3(w.transforms[j].rotation);
    const Vec3& t = w.transforms[j].translation;
    std::fprintf(fp, "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", v.x(), v.y(), v.z(), r.x(), r.y(),
                 r.z(), t.x(), t.y(), t.z());
  }
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

/// Reads a warp field. Node positions are restored but point assignments are
/// not; evaluation attaches points on demand.
inline WarpField read_warp_field(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());
  std::string tag;
  std::size_t count = 0;
  WarpField w;
  if (!(in >> tag >> count >> w.graph.coverage >> w.graph.assign_k) || tag != "warpfield") {
    fail_validation(path.string() + ": malformed warp field header");
  }
  if (count == 0 || !(w.graph.coverage > 0.0) || w.graph.assign_k == 0) {
    fail_validation(path.string() + ": invalid warp field header values");
  }
  w.graph.nodes.resize(count);
  w.transforms.resize(count);
  for (std::size_t j = 0; j < count; ++j) {
    double v[9];
    for (double& x : v) {
      if (!(in >> x) || !std::isfinite(x)) fail_validation(path.string() + ": malformed node line " + std::to_string(j));
    }
    w.graph.nodes[j] = Vec3(v[0], v[1], v[2]);
    w.transforms[j].rotation = exp_so3(Vec3(v[3], v[4], v[5]));
    w.transforms[j].translation = Vec3(v[6], v[7], v[8]);
  }
  w.graph.node_source_indices.resize(count);
  std::iota(w.graph.node_source_indices.begin(), w.graph.node_source_indices.end(), std::size_t{0});
  return w;
}

}  // namespace graphsc
