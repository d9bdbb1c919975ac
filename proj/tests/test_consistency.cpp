#include <gtest/gtest.h>

#include <random>

#include "graphsc/consistency.hpp"
#include "graphsc/synth.hpp"

using namespace graphsc;

namespace {

CorrespondenceSet random_corr(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  std::normal_distribution<double> noise(0.0, 0.03);
  CorrespondenceSet c;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 x(u(rng), u(rng), u(rng));
    c.push_back(x, x + Vec3(0.1, 0, 0) + Vec3(noise(rng), noise(rng), noise(rng)));
  }
  return c;
}

// Consistency between two correspondences by direct evaluation over all nodes:
// the pairwise value when some node holds both, otherwise 0.
double direct_pair(const CorrespondenceSet& c, const DeformationGraph& g, std::size_t i, std::size_t k, double sd) {
  for (const auto& a : g.point_to_nodes[i]) {
    for (const auto& b : g.point_to_nodes[k]) {
      if (a.node == b.node) {
        const double d = std::abs((c.source[i] - c.source[k]).norm() - (c.target[i] - c.target[k]).norm());
        return std::max(0.0, 1.0 - d * d / (sd * sd));
      }
    }
  }
  return 0.0;
}

}  // namespace

TEST(Pairwise, IdenticalIsOne) {
  const Vec3 x(0.1, 0.2, 0.3), y(1, 1, 1);
  EXPECT_EQ(pairwise_consistency(x, y, x, y, 0.08), 1.0);
}

TEST(Pairwise, ClampBoundaryIsZero) {
  // delta = 0.5 - 0.25 = 0.25 = sigma_d, all terms exact in binary.
  EXPECT_EQ(pairwise_consistency(Vec3(0, 0, 0), Vec3(0, 0, 0), Vec3(0.5, 0, 0), Vec3(0.25, 0, 0), 0.25), 0.0);
  EXPECT_EQ(pairwise_consistency(Vec3(0, 0, 0), Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(5, 0, 0), 0.08), 0.0);
}

TEST(Pairwise, ScalarEvaluation) {
  const double v = pairwise_consistency(Vec3(0, 0, 0), Vec3(0, 0, 0), Vec3(1.0, 0, 0), Vec3(0, 1.04, 0), 0.08);
  EXPECT_NEAR(v, 0.75, 1e-12);
}

TEST(LocalConsistency, SingleCorrespondence) {
  CorrespondenceSet c;
  c.push_back(Vec3::Zero(), Vec3(1, 0, 0));
  const auto g = build_correspondence_graph(c, 0.08, 6);
  const auto lc = local_consistency(c, g, 0.08);
  ASSERT_EQ(lc.theta.size(), 1u);
  ASSERT_EQ(lc.theta[0].rows(), 1);
  EXPECT_EQ(lc.theta[0](0, 0), 1.0);
}

TEST(LocalConsistency, ThreeUnderOneNodeMatchDenseOracle) {
  CorrespondenceSet c;
  c.push_back(Vec3(0, 0, 0), Vec3(0, 0, 0));
  c.push_back(Vec3(0.02, 0, 0), Vec3(0.05, 0.01, 0));
  c.push_back(Vec3(0, 0.03, 0), Vec3(0.01, 0.01, 0.02));
  const auto g = build_correspondence_graph(c, 0.08, 6);
  ASSERT_EQ(g.node_count(), 1u);
  const auto lc = local_consistency(c, g, 0.08);
  for (Eigen::Index a = 0; a < 3; ++a) {
    for (Eigen::Index b = 0; b < 3; ++b) {
      const std::size_t i = g.node_to_members[0][static_cast<std::size_t>(a)];
      const std::size_t k = g.node_to_members[0][static_cast<std::size_t>(b)];
      const double d = std::abs((c.source[i] - c.source[k]).norm() - (c.target[i] - c.target[k]).norm());
      EXPECT_EQ(lc.theta[0](a, b), std::max(0.0, 1.0 - d * d / (0.08 * 0.08)));
    }
  }
}

TEST(LocalConsistency, DisjointNodesShareNothing) {
  CorrespondenceSet c;
  c.push_back(Vec3(0, 0, 0), Vec3(0, 0, 0));
  c.push_back(Vec3(1, 0, 0), Vec3(1, 0, 0));
  const auto g = build_correspondence_graph(c, 0.08, 1);
  ASSERT_EQ(g.node_count(), 2u);
  const auto lc = local_consistency(c, g, 0.08);
  for (const auto& t : lc.theta) EXPECT_EQ(t.rows(), 1);
  EXPECT_EQ(direct_pair(c, g, 0, 1, 0.08), 0.0);
}

TEST(LocalConsistency, BlocksAreSymmetricUnitDiagonal) {
  const auto c = random_corr(150, 4);
  const auto g = build_correspondence_graph(c, 0.08, 6);
  const auto lc = local_consistency(c, g, 0.08);
  for (const auto& t : lc.theta) {
    if (t.size() == 0) continue;
    EXPECT_EQ(t, t.transpose());
    EXPECT_TRUE((t.diagonal().array() == 1.0).all());
    EXPECT_GE(t.minCoeff(), 0.0);
    EXPECT_LE(t.maxCoeff(), 1.0);
  }
}

TEST(LocalConsistency, NodeAssemblyEqualsDirectEvaluation) {
  for (std::size_t n : {10u, 80u, 200u}) {
    const auto c = random_corr(n, n);
    const auto g = build_correspondence_graph(c, 0.1, 6);
    const auto lc = local_consistency(c, g, 0.08);
    Eigen::MatrixXd assembled = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < g.node_count(); ++j) {
      const auto& m = g.node_to_members[j];
      for (std::size_t a = 0; a < m.size(); ++a) {
        for (std::size_t b = 0; b < m.size(); ++b) {
          assembled(static_cast<Eigen::Index>(m[a]), static_cast<Eigen::Index>(m[b])) =
              lc.theta[j](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        const double direct = i == k ? 1.0 : direct_pair(c, g, i, k, 0.08);
        ASSERT_EQ(assembled(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)), direct) << i << "," << k;
      }
    }
  }
}

TEST(LocalConsistency, InvariantUnderRigidMotionOfTarget) {
  const auto c = random_corr(120, 17);
  const auto g = build_correspondence_graph(c, 0.1, 6);
  const auto lc = local_consistency(c, g, 0.08);
  CorrespondenceSet moved = c;
  const Mat3 r = exp_so3(Vec3(0.4, -0.3, 0.9));
  for (Vec3& y : moved.target) y = r * y + Vec3(0.5, -1.0, 2.0);
  const auto lc2 = local_consistency(moved, g, 0.08);
  for (std::size_t j = 0; j < lc.theta.size(); ++j) {
    if (lc.theta[j].size() == 0) continue;
    EXPECT_LT((lc.theta[j] - lc2.theta[j]).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(LocalConsistency, RigidSceneInliersFullyConsistent) {
  SceneSpec spec;
  spec.warp_kind = WarpKind::global_rigid;
  spec.rotation = 10.0 * EIGEN_PI / 180.0;
  spec.translation = 0.1;
  spec.inlier_noise_std = 0.0;
  spec.correspondence_count = 200;
  spec.seed = 5;
  const Scene s = generate_scene(spec);
  const auto g = build_correspondence_graph(s.corr, 0.08, 6);
  const auto lc = local_consistency(s.corr, g, 0.08);
  for (std::size_t j = 0; j < g.node_count(); ++j) {
    const auto& m = g.node_to_members[j];
    for (std::size_t a = 0; a < m.size(); ++a) {
      for (std::size_t b = 0; b < m.size(); ++b) {
        if (s.corr.labels[m[a]] == 1 && s.corr.labels[m[b]] == 1) {
          EXPECT_NEAR(lc.theta[j](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)), 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(LocalConsistency, RejectsMismatchedGraph) {
  const auto c = random_corr(10, 1);
  const auto g = build_correspondence_graph(random_corr(12, 2), 0.1, 6);
  EXPECT_THROW(local_consistency(c, g, 0.08), Error);
  EXPECT_THROW(local_consistency(c, build_correspondence_graph(c, 0.1, 6), 0.0), Error);
}
