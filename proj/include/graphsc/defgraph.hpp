#pragma once

#include <cstdio>
#include <filesystem>
#include <set>
#include <utility>
#include <vector>

#include "graphsc/geometry.hpp"

namespace graphsc {

struct NodeWeight {
  std::size_t node;
  double weight;
};

/// Gaussian skinning weights of `point` w.r.t. `nodes`, normalized to sum to 1.
/// Distances are shifted by the smallest one before exponentiation so far-away
/// points do not underflow to 0/0.
inline std::vector<double> skinning_weights(const Vec3& point, std::span<const Vec3> nodes, double bandwidth) {
  if (nodes.empty()) fail_validation("skinning_weights: no nodes");
  if (!(bandwidth > 0.0)) fail_validation("skinning_weights: bandwidth must be positive");
  std::vector<double> sq(nodes.size());
  double min_sq = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    sq[j] = (point - nodes[j]).squaredNorm();
    min_sq = std::min(min_sq, sq[j]);
  }
  const double inv_two_var = 1.0 / (2.0 * bandwidth * bandwidth);
  std::vector<double> w(nodes.size());
  double total = 0.0;
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    w[j] = std::exp(-(sq[j] - min_sq) * inv_two_var);
    total += w[j];
  }
  for (double& x : w) x /= total;
  return w;
}

/// Nodes sampled from a cloud by FPS, every point tied to its nearest nodes
/// with skinning weights, and edges between nodes that share a point.
struct DeformationGraph {
  std::vector<Vec3> nodes;
  std::vector<std::size_t> node_source_indices;
  double coverage = 0.0;
  std::size_t assign_k = 0;
  std::vector<std::vector<NodeWeight>> point_to_nodes;
  std::vector<std::vector<std::size_t>> node_to_members;
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // u < v, sorted

  std::size_t node_count() const noexcept { return nodes.size(); }
  std::size_t effective_k() const noexcept { return std::min(assign_k, nodes.size()); }

  /// Assignment of an arbitrary point: its nearest nodes and their weights,
  /// nodes in ascending distance order.
  std::vector<NodeWeight> attach(const Vec3& p) const {
    const auto near = knn(p, nodes, effective_k());
    std::vector<Vec3> pos(near.size());
    for (std::size_t i = 0; i < near.size(); ++i) pos[i] = nodes[near[i].index];
    const auto w = skinning_weights(p, pos, coverage);
    std::vector<NodeWeight> out(near.size());
    for (std::size_t i = 0; i < near.size(); ++i) out[i] = {near[i].index, w[i]};
    return out;
  }
};

/// Assigns `points` to the graph's nodes, filling point_to_nodes,
/// node_to_members and edges.
inline void assign_points(DeformationGraph& graph, std::span<const Vec3> points) {
  graph.point_to_nodes.assign(points.size(), {});
  graph.node_to_members.assign(graph.nodes.size(), {});
  std::set<std::pair<std::size_t, std::size_t>> edge_set;
  for (std::size_t i = 0; i < points.size(); ++i) {
    graph.point_to_nodes[i] = graph.attach(points[i]);
    const auto& nw = graph.point_to_nodes[i];
    for (std::size_t a = 0; a < nw.size(); ++a) {
      graph.node_to_members[nw[a].node].push_back(i);
      for (std::size_t b = a + 1; b < nw.size(); ++b) {
        edge_set.emplace(std::min(nw[a].node, nw[b].node), std::max(nw[a].node, nw[b].node));
      }
    }
  }
  graph.edges.assign(edge_set.begin(), edge_set.end());
}

inline DeformationGraph build_graph(std::span<const Vec3> cloud, double coverage, std::size_t assign_k,
                                    std::size_t start_index = 0) {
  if (cloud.empty()) fail_validation("build_graph: empty cloud");
  if (assign_k < 1) fail_validation("build_graph: assign_k must be at least 1");
  validate_finite(cloud, "build_graph");
  DeformationGraph graph;
  graph.coverage = coverage;
  graph.assign_k = assign_k;
  graph.node_source_indices = furthest_point_sample(cloud, coverage, start_index);
  graph.nodes.reserve(graph.node_source_indices.size());
  for (std::size_t idx : graph.node_source_indices) graph.nodes.push_back(cloud[idx]);
  assign_points(graph, cloud);
  return graph;
}

/// Text dump, one record per line:
///   graph <nodes> <points> <edges> <coverage> <k>
///   node <j> <x> <y> <z> <source index>
///   assign <i> <node>:<weight> ...
///   edge <u> <v>
inline void write_graph_dump(std::FILE* fp, const DeformationGraph& g) {
  std::fprintf(fp, "graph %zu %zu %zu %.17g %zu\n", g.nodes.size(), g.point_to_nodes.size(), g.edges.size(),
               g.coverage, g.assign_k);
  for (std::size_t j = 0; j < g.nodes.size(); ++j) {
    std::fprintf(fp, "node %zu %.9g %.9g %.9g %zu\n", j, g.nodes[j].x(), g.nodes[j].y(), g.nodes[j].z(),
                 g.node_source_indices.empty() ? j : g.node_source_indices[j]);
  }
  for (std::size_t i = 0; i < g.point_to_nodes.size(); ++i) {
    std::fprintf(fp, "assign %zu", i);
    for (const auto& nw : g.point_to_nodes[i]) std::fprintf(fp, " %zu:%.9g", nw.node, nw.weight);
    std::fprintf(fp, "\n");
  }
  for (const auto& [u, v] : g.edges) std::fprintf(fp, "edge %zu %zu\n", u, v);
}

}  // namespace graphsc
