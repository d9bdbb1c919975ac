#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "graphsc/metrics.hpp"
#include "graphsc/nicp.hpp"
#include "graphsc/synth.hpp"

using namespace graphsc;

namespace {

WarpField single_node(const Vec3& v) { return WarpField::identity(build_graph(std::vector<Vec3>{v}, 0.1, 1)); }

// 2 nodes, 3 correspondences, 1 edge, non-identity linearization point.
struct Micro {
  WarpField field;
  CorrespondenceSet corr;
};

Micro micro_instance(std::uint64_t seed) {
  const std::vector<Vec3> src{Vec3(0, 0, 0), Vec3(0.1, 0, 0), Vec3(0.05, 0.02, 0.01)};
  Micro m;
  m.field = WarpField::identity(build_graph(src, 0.06, 2));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (auto& t : m.field.transforms) {
    t.rotation = exp_so3(Vec3(u(rng), u(rng), u(rng)));
    t.translation = Vec3(u(rng), u(rng), u(rng)) * 0.1;
  }
  for (const Vec3& x : src) m.corr.push_back(x, x + Vec3(u(rng), u(rng), u(rng)) * 0.1);
  return m;
}

std::vector<Vec3> random_cloud(std::size_t n, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  return pts;
}

// Smooth bend about y whose angle grows with x.
Vec3 bend(const Vec3& p) {
  const Mat3 r = exp_so3(Vec3(0, 0.6 * p.x(), 0));
  return r * p + Vec3(0.02, 0.01, 0);
}

double corr_energy(const WarpField& w, const CorrespondenceSet& c) {
  double e = 0;
  for (std::size_t i = 0; i < c.size(); ++i) e += (w.warp(c.source[i]) - c.target[i]).squaredNorm();
  return e;
}

}  // namespace

TEST(Warp, IdentityFieldIsIdentity) {
  const auto pts = random_cloud(100, 1, 0.3);
  const WarpField w = WarpField::identity(build_graph(pts, 0.1, 4));
  for (const Vec3& p : pts) EXPECT_LT((w.warp(p) - p).norm(), 1e-15);
}

TEST(Warp, PureTranslation) {
  WarpField w = single_node(Vec3(0.2, 0.3, 0.4));
  w.transforms[0].translation = Vec3(1, 0, 0);
  EXPECT_EQ(w.warp(Vec3(5, 6, 7)), Vec3(6, 6, 7));
}

TEST(Warp, QuarterTurnAboutNode) {
  const Vec3 v(0.2, 0.3, 0.4);
  WarpField w = single_node(v);
  w.transforms[0].rotation = exp_so3(Vec3(0, 0, EIGEN_PI / 2));
  EXPECT_LT((w.warp(v + Vec3(1, 0, 0)) - (v + Vec3(0, 1, 0))).norm(), 1e-15);
}

TEST(Residuals, ScalarExample) {
  WarpField w = single_node(Vec3::Zero());
  w.transforms[0].translation = Vec3(0.1, 0, 0);
  CorrespondenceSet c;
  c.push_back(Vec3(0.01, 0.02, 0), Vec3(0.01, 0.02, 0));
  const auto p = make_problem(w, c, SolverConfig{});
  const Eigen::VectorXd r = residuals(w, p);
  ASSERT_EQ(r.size(), 3);
  EXPECT_NEAR(r(0), 0.5, 1e-15);
  EXPECT_EQ(r(1), 0.0);
  EXPECT_EQ(r(2), 0.0);
}

TEST(Residuals, IdentityConsistentDataIsZero) {
  const auto pts = random_cloud(80, 2, 0.3);
  const WarpField w = WarpField::identity(build_graph(pts, 0.12, 4));
  CorrespondenceSet c;
  for (const Vec3& p : pts) c.push_back(p, p);
  const auto p = make_problem(w, c, SolverConfig{});
  ASSERT_FALSE(p.edges.empty());
  EXPECT_EQ(p.residual_count(), 3 * (80 + p.edges.size()));
  // Skinning weights sum to one up to rounding.
  EXPECT_LT(residuals(w, p).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Jacobian, SingleNodeBlocks) {
  const Vec3 v(0.3, -0.2, 0.1);
  const WarpField w = single_node(v);
  CorrespondenceSet c;
  c.push_back(v, v + Vec3(0.1, 0, 0));
  c.push_back(v + Vec3(0.05, 0, 0), v);
  const auto p = make_problem(w, c, SolverConfig{});
  const Eigen::MatrixXd j = Eigen::MatrixXd(jacobian(w, p));
  ASSERT_EQ(j.rows(), 6);
  ASSERT_EQ(j.cols(), 6);
  const Eigen::Matrix3d trans = j.block(0, 3, 3, 3), rot = j.block(0, 0, 3, 3);
  EXPECT_EQ(trans, Eigen::Matrix3d(5.0 * Mat3::Identity()));
  EXPECT_EQ(rot, Eigen::Matrix3d::Zero());
  EXPECT_LT((Eigen::Matrix3d(j.block(3, 0, 3, 3)) - (-5.0 * skew(Vec3(0.05, 0, 0)))).norm(), 1e-15);
}

TEST(Jacobian, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Micro m = micro_instance(seed);
    ASSERT_EQ(m.field.graph.node_count(), 2u);
    ASSERT_EQ(m.field.graph.edges.size(), 1u);
    const auto p = make_problem(m.field, m.corr, SolverConfig{});
    const Eigen::MatrixXd j = Eigen::MatrixXd(jacobian(m.field, p));
    Eigen::MatrixXd fd(j.rows(), j.cols());
    const double h = 1e-6;
    for (Eigen::Index c = 0; c < j.cols(); ++c) {
      Eigen::VectorXd d = Eigen::VectorXd::Zero(j.cols());
      d(c) = h;
      const Eigen::VectorXd rp = residuals(apply_update(m.field, d, false), p);
      const Eigen::VectorXd rm = residuals(apply_update(m.field, -d, false), p);
      fd.col(c) = (rp - rm) / (2 * h);
    }
    const Eigen::Index half = j.cols() / 2;
    const double rot_rel = (j.leftCols(half) - fd.leftCols(half)).cwiseAbs().maxCoeff() /
                           j.leftCols(half).cwiseAbs().maxCoeff();
    const double trans_rel = (j.rightCols(half) - fd.rightCols(half)).cwiseAbs().maxCoeff() /
                             j.rightCols(half).cwiseAbs().maxCoeff();
    EXPECT_LT(rot_rel, 1e-5);
    EXPECT_LT(trans_rel, 1e-9);
  }
}

TEST(GaussNewton, ZeroResidualGivesZeroStep) {
  const auto pts = random_cloud(50, 3, 0.3);
  const WarpField w = WarpField::identity(build_graph(pts, 0.12, 4));
  CorrespondenceSet c;
  for (const Vec3& p : pts) c.push_back(p, p);
  const auto step = gauss_newton_step(w, make_problem(w, c, SolverConfig{}), SolverConfig{});
  EXPECT_LT(step.step_norm, 1e-13);
  EXPECT_LT(step.cost, 1e-26);
}

TEST(GaussNewton, OneStepRecoversGlobalTranslation) {
  std::vector<Vec3> pts;
  for (int i = 0; i < 15; ++i) {
    for (int k = 0; k < 15; ++k) pts.emplace_back(0.02 * i, 0.02 * k, 0.001 * ((i * 7 + k * 3) % 5));
  }
  const Vec3 d(0.05, -0.03, 0.02);
  CorrespondenceSet c;
  for (const Vec3& p : pts) c.push_back(p, p + d);
  const WarpField w = WarpField::identity(build_graph(pts, 0.08, 6));
  // The closed form is the undamped solution; the default damping biases it by ~3e-5.
  SolverConfig cfg;
  cfg.marquardt = 1e-10;
  const auto step = gauss_newton_step(w, make_problem(w, c, cfg), cfg);
  for (const auto& t : step.field.transforms) {
    EXPECT_LT((t.translation - d).norm(), 1e-6);
    EXPECT_LT((t.rotation - Mat3::Identity()).norm(), 1e-6);
  }
}

TEST(GaussNewton, SparseSolveMatchesDense) {
  SceneSpec spec;
  spec.seed = 4;
  spec.inlier_ratio = 1.0;
  const Scene s = generate_scene(spec);
  const SolverConfig cfg;
  WarpField w = WarpField::identity(build_graph(s.source, cfg.graph_coverage, cfg.graph_k));
  const auto p = make_problem(w, s.corr, cfg);
  for (int it = 0; it < 3; ++it) {
    const Eigen::MatrixXd j = Eigen::MatrixXd(jacobian(w, p));
    const Eigen::VectorXd r = residuals(w, p);
    const Eigen::MatrixXd a = j.transpose() * j + cfg.marquardt * Eigen::MatrixXd::Identity(j.cols(), j.cols());
    const Eigen::VectorXd delta = a.ldlt().solve(-(j.transpose() * r));
    const WarpField dense = apply_update(w, delta);
    const auto sparse = gauss_newton_step(w, p, cfg);
    for (std::size_t n = 0; n < w.transforms.size(); ++n) {
      EXPECT_LT((dense.transforms[n].rotation - sparse.field.transforms[n].rotation).cwiseAbs().maxCoeff(), 1e-8);
      EXPECT_LT((dense.transforms[n].translation - sparse.field.transforms[n].translation).cwiseAbs().maxCoeff(), 1e-8);
    }
    w = sparse.field;
  }
}

TEST(GaussNewton, StepDescends) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SceneSpec spec;
    spec.seed = seed;
    spec.inlier_ratio = 0.7;
    const Scene s = generate_scene(spec);
    const SolverConfig cfg;
    const WarpField w = WarpField::identity(build_graph(s.source, cfg.graph_coverage, cfg.graph_k));
    const auto p = make_problem(w, s.corr, cfg);
    EXPECT_LE(gauss_newton_step(w, p, cfg).cost, cost(w, p));
  }
}

TEST(Solve, ConsistentDataStaysIdentity) {
  const auto pts = random_cloud(60, 5, 0.3);
  CorrespondenceSet c;
  for (const Vec3& p : pts) c.push_back(p, p);
  const auto res = solve(c, pts, SolverConfig{});
  EXPECT_LE(res.iterations, 1u);
  EXPECT_LT(res.cost_trace.front(), 1e-25);
  for (const auto& t : res.field.transforms) {
    EXPECT_LT((t.rotation - Mat3::Identity()).norm(), 1e-12);
    EXPECT_LT(t.translation.norm(), 1e-12);
  }
}

TEST(Solve, RecoversGlobalRigidMotion) {
  SceneSpec spec;
  spec.point_count = 500;
  spec.warp_kind = WarpKind::global_rigid;
  spec.rotation = 10.0 * EIGEN_PI / 180.0;
  spec.translation = 0.1;
  spec.inlier_ratio = 1.0;
  spec.inlier_noise_std = 0.0;
  spec.seed = 1;
  const Scene s = generate_scene(spec);
  const auto res = solve(s.corr, s.source, SolverConfig{});
  EXPECT_LE(res.iterations, 50u);
  for (std::size_t i = 1; i < res.cost_trace.size(); ++i) EXPECT_LE(res.cost_trace[i], res.cost_trace[i - 1]);
  EXPECT_LT(registration_metrics(s.source, res.field, s.gt).epe, 1e-4);
  res.field.validate();
}

TEST(Solve, TwoLobeBendConverges) {
  SceneSpec spec;
  spec.surface = Surface::two_lobe;
  spec.warp_kind = WarpKind::smooth_graph;
  spec.rotation = 0.1;
  spec.inlier_ratio = 1.0;
  spec.inlier_noise_std = 0.0;
  spec.seed = 2;
  const Scene s = generate_scene(spec);
  // A bend carries nonzero edge energy, so the data term only vanishes with a
  // weak regularizer.
  SolverConfig cfg;
  cfg.lambda_reg = 0.01;
  cfg.max_iterations = 200;
  cfg.cost_tolerance = 1e-12;
  cfg.step_tolerance = 1e-12;
  for (const SolverConfig& c : {cfg, SolverConfig{}}) {
    const auto res = solve(s.corr, s.source, c);
    if (c.lambda_reg == 0.01) EXPECT_LT(corr_energy(res.field, s.corr), 1e-6);
    for (std::size_t i = 1; i < res.cost_trace.size(); ++i) EXPECT_LT(res.cost_trace[i], res.cost_trace[i - 1]);
    for (const auto& t : res.field.transforms) {
      EXPECT_LT((t.rotation.transpose() * t.rotation - Mat3::Identity()).norm(), 1e-8);
      EXPECT_NEAR(t.rotation.determinant(), 1.0, 1e-8);
    }
  }
}

TEST(Solve, StiffRegularizerShrinksRotationSpread) {
  SceneSpec spec;
  spec.warp_kind = WarpKind::smooth_graph;
  spec.rotation = 0.6;
  spec.surface = Surface::cylinder;
  spec.inlier_noise_std = 0.0;
  spec.seed = 3;
  spec.inlier_ratio = 1.0;
  const Scene s = generate_scene(spec);
  auto spread = [&](double lambda_r) {
    SolverConfig cfg;
    cfg.lambda_reg = lambda_r;
    const auto res = solve(s.corr, s.source, cfg);
    Mat3 mean = Mat3::Zero();
    for (const auto& t : res.field.transforms) mean += t.rotation;
    const Mat3 centre = nearest_rotation(mean);
    double total = 0;
    for (const auto& t : res.field.transforms) total += (t.rotation - centre).norm();
    return total / static_cast<double>(res.field.transforms.size());
  };
  const double s1 = spread(1), s10 = spread(10), s100 = spread(100);
  EXPECT_GT(s1, s10);
  EXPECT_GT(s10, s100);
}

TEST(Solve, EquivariantUnderRigidMotion) {
  const auto src = random_cloud(300, 9, 0.25);
  CorrespondenceSet c;
  for (const Vec3& p : src) c.push_back(p, bend(p));
  const RigidTransform g{exp_so3(Vec3(0.3, -0.5, 0.8)), Vec3(0.4, 0.1, -0.2)};
  std::vector<Vec3> src2;
  CorrespondenceSet c2;
  for (std::size_t i = 0; i < c.size(); ++i) {
    src2.push_back(g.apply(src[i]));
    c2.push_back(g.apply(c.source[i]), g.apply(c.target[i]));
  }
  const auto r1 = solve(c, src, SolverConfig{});
  const auto r2 = solve(c2, src2, SolverConfig{});
  double e1 = 0, e2 = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    e1 += (r1.field.warp(src[i]) - bend(src[i])).norm();
    e2 += (r2.field.warp(src2[i]) - g.apply(bend(src[i]))).norm();
  }
  EXPECT_NEAR(e1 / 300, e2 / 300, 1e-6);
}

TEST(Solve, RejectsBadInput) {
  SolverConfig cfg;
  cfg.lambda_corr = 0;
  const auto pts = random_cloud(10, 1, 0.1);
  CorrespondenceSet c;
  for (const Vec3& p : pts) c.push_back(p, p);
  EXPECT_THROW(solve(c, pts, cfg), Error);
  EXPECT_THROW(solve(CorrespondenceSet{}, pts, SolverConfig{}), Error);
}

TEST(CostTrace, RoundTrip) {
  const std::vector<double> trace{3.0, 1.0 / 3.0, 1e-17};
  const auto path = std::filesystem::temp_directory_path() / "graphsc_trace.csv";
  write_cost_trace(path, trace);
  EXPECT_EQ(read_cost_trace(path), trace);
}

TEST(WarpFile, RoundTrip) {
  const Micro m = micro_instance(3);
  const auto path = std::filesystem::temp_directory_path() / "graphsc_warp.txt";
  write_warp_field(path, m.field);
  const WarpField back = read_warp_field(path);
  ASSERT_EQ(back.transforms.size(), m.field.transforms.size());
  for (const Vec3& x : m.corr.source) EXPECT_LT((back.warp(x) - m.field.warp(x)).norm(), 1e-12);
}
