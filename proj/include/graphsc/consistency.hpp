#pragma once

#include <Eigen/Core>

#include "graphsc/correspondence.hpp"
#include "graphsc/defgraph.hpp"

namespace graphsc {

/// Length consistency of two correspondences: [1 - delta^2 / sigma_d^2]_+ where
/// delta is the difference between their source-side and target-side distances.
inline double pairwise_consistency(const Vec3& xi, const Vec3& yi, const Vec3& xj, const Vec3& yj, double sigma_d) {
  const double delta = std::abs((xi - xj).norm() - (yi - yj).norm());
  return std::max(0.0, 1.0 - (delta * delta) / (sigma_d * sigma_d));
}

/// Per-node consistency blocks. theta[j] is |C_j| x |C_j|, rows and columns in
/// the order of graph.node_to_members[j]; nodes without members hold an empty
/// matrix.
struct LocalConsistency {
  std::vector<Eigen::MatrixXd> theta;
  double sigma_d = 0.0;
};

/// Correspondence graph: nodes sampled from the correspondences' source
/// endpoints, each correspondence assigned to its k nearest nodes.
inline DeformationGraph build_correspondence_graph(const CorrespondenceSet& corr, double coverage, std::size_t k,
                                                   std::size_t start_index = 0) {
  if (corr.empty()) fail_validation("correspondence graph: no correspondences");
  return build_graph(corr.source, coverage, k, start_index);
}

inline LocalConsistency local_consistency(const CorrespondenceSet& corr, const DeformationGraph& graph,
                                          double sigma_d) {
  if (!(sigma_d > 0.0)) fail_validation("local_consistency: sigma_d must be positive");
  if (graph.point_to_nodes.size() != corr.size()) {
    fail_validation("local_consistency: graph was not built over these correspondences");
  }
  LocalConsistency out;
  out.sigma_d = sigma_d;
  out.theta.resize(graph.node_count());
  for (std::size_t j = 0; j < graph.node_count(); ++j) {
    const auto& members = graph.node_to_members[j];
    const auto m = static_cast<Eigen::Index>(members.size());
    Eigen::MatrixXd& t = out.theta[j];
    t.resize(m, m);
    for (Eigen::Index a = 0; a < m; ++a) {
      t(a, a) = 1.0;
      for (Eigen::Index b = a + 1; b < m; ++b) {
        const std::size_t i = members[static_cast<std::size_t>(a)];
        const std::size_t k = members[static_cast<std::size_t>(b)];
        const double v = pairwise_consistency(corr.source[i], corr.target[i], corr.source[k], corr.target[k], sigma_d);
        t(a, b) = v;
        t(b, a) = v;
      }
    }
  }
  return out;
}

}  // namespace graphsc
