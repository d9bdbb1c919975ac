#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "graphsc/consistency.hpp"
#include "graphsc/synth.hpp"
#include "graphsc/training.hpp"

using namespace graphsc;

namespace {

SceneSpec small_spec(std::uint64_t seed) {
  SceneSpec s;
  s.point_count = 100;
  s.seed = seed;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double min_outlier_residual(const Scene& s) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.corr.size(); ++i) {
    if (s.corr.labels[i] == 0) m = std::min(m, (s.gt.warp(s.corr.source[i]) - s.corr.target[i]).norm());
  }
  return m;
}

}  // namespace

TEST(Synth, HalfInliersOnHundred) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene s = generate_scene(small_spec(seed));
    ASSERT_EQ(s.corr.size(), 100u);
    EXPECT_EQ(std::count(s.corr.labels.begin(), s.corr.labels.end(), 1), 50);
  }
}

TEST(Synth, AllInliersNoiseless) {
  SceneSpec spec = small_spec(3);
  spec.inlier_ratio = 1.0;
  spec.inlier_noise_std = 0.0;
  for (auto surface : {Surface::plane_grid, Surface::cylinder, Surface::two_lobe}) {
    for (auto kind : {WarpKind::global_rigid, WarpKind::smooth_graph, WarpKind::articulated}) {
      spec.surface = surface;
      spec.warp_kind = kind;
      const Scene s = generate_scene(spec);
      for (std::size_t i = 0; i < s.corr.size(); ++i) {
        EXPECT_EQ(s.corr.labels[i], 1);
        EXPECT_EQ((s.gt.warp(s.corr.source[i]) - s.corr.target[i]).norm(), 0.0);
      }
    }
  }
}

TEST(Synth, TargetIsWarpedSource) {
  const Scene s = generate_scene(small_spec(4));
  ASSERT_EQ(s.target.size(), s.source.size());
  for (std::size_t i = 0; i < s.source.size(); ++i) {
    // Only float rounding separates the stored target from the exact warp.
    EXPECT_LT((s.gt.warp(s.source[i]) - s.target[i]).norm(), 1e-6);
  }
}

TEST(Synth, SameSeedSameScene) {
  SceneSpec spec = small_spec(9);
  spec.surface = Surface::cylinder;
  spec.outlier_mode = OutlierMode::shuffled_target;
  const Scene a = generate_scene(spec);
  const Scene b = generate_scene(spec);
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.corr.source, b.corr.source);
  EXPECT_EQ(a.corr.target, b.corr.target);
  EXPECT_EQ(a.corr.labels, b.corr.labels);
  const Scene c = generate_scene(small_spec(10));
  EXPECT_NE(a.corr.target, c.corr.target);
}

TEST(Synth, RigidInliersAreFullyConsistent) {
  SceneSpec spec = small_spec(5);
  spec.warp_kind = WarpKind::global_rigid;
  spec.inlier_noise_std = 0.0;
  const Scene s = generate_scene(spec);
  for (std::size_t i = 0; i < s.corr.size(); ++i) {
    if (s.corr.labels[i] != 1) continue;
    for (std::size_t j = 0; j < s.corr.size(); ++j) {
      if (s.corr.labels[j] != 1) continue;
      const double t = pairwise_consistency(s.corr.source[i], s.corr.target[i], s.corr.source[j],
                                            s.corr.target[j], 0.08);
      EXPECT_NEAR(t, 1.0, 1e-9);
    }
  }
}

TEST(Synth, LabelsAgreeWithResidualLabeling) {
  for (auto mode : {OutlierMode::uniform_in_bbox, OutlierMode::shuffled_target}) {
    SceneSpec spec = small_spec(6);
    spec.point_count = 300;
    spec.outlier_mode = mode;
    spec.inlier_noise_std = 0.005;
    const Scene s = generate_scene(spec);
    const double floor = min_outlier_residual(s);
    EXPECT_GE(floor, 3.0 * spec.label_tau_d);
    // Any tau_d strictly between 5 * noise std and the smallest outlier residual.
    for (double tau : {0.026, 0.04, 0.5 * (0.025 + floor), floor - 1e-6}) {
      EXPECT_EQ(label_correspondences(s.corr, s.gt, tau), s.corr.labels) << "tau_d " << tau;
    }
  }
}

TEST(Synth, SmoothGraphRotationsBounded) {
  SceneSpec spec = small_spec(7);
  spec.rotation = 0.2;
  const Scene s = generate_scene(spec);
  for (const auto& t : s.gt.transforms) {
    const Eigen::AngleAxisd aa(t.rotation);
    EXPECT_LE(aa.angle(), 0.2 + 1e-12);
  }
}

TEST(Synth, BundleRoundTrip) {
  SceneSpec spec = small_spec(8);
  spec.surface = Surface::two_lobe;
  const Scene s = generate_scene(spec);
  const auto dir = std::filesystem::temp_directory_path() / "graphsc_synth_bundle";
  std::filesystem::remove_all(dir);
  write_scene(dir, s);
  for (const char* f : {"source.ply", "target.ply", "corr.csv", "warp.txt", "spec.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const Scene r = read_scene(dir);
  EXPECT_EQ(r.source, s.source);
  EXPECT_EQ(r.target, s.target);
  EXPECT_EQ(r.corr.labels, s.corr.labels);
  ASSERT_EQ(r.corr.size(), s.corr.size());
  for (std::size_t i = 0; i < s.corr.size(); ++i) {
    EXPECT_LT((r.corr.source[i] - s.corr.source[i]).norm(), 1e-12);
    EXPECT_LT((r.corr.target[i] - s.corr.target[i]).norm(), 1e-12);
  }
  EXPECT_EQ(to_json(r.spec), to_json(s.spec));
  for (const Vec3& p : s.source) EXPECT_LT((r.gt.warp(p) - s.gt.warp(p)).norm(), 1e-9);

  // Writing the same scene twice gives identical bytes.
  const auto dir2 = dir.string() + "_again";
  write_scene(dir2, generate_scene(spec));
  for (const char* f : {"source.ply", "target.ply", "corr.csv", "warp.txt", "spec.json"}) {
    EXPECT_EQ(slurp(dir / f), slurp(std::filesystem::path(dir2) / f)) << f;
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST(SceneSpecJson, RoundTrip) {
  SceneSpec s;
  s.point_count = 321;
  s.surface = Surface::cylinder;
  s.warp_kind = WarpKind::articulated;
  s.outlier_mode = OutlierMode::shuffled_target;
  s.inlier_ratio = 0.3;
  s.seed = 77;
  EXPECT_EQ(to_json(scene_spec_from_json(to_json(s))), to_json(s));
}

TEST(SceneSpecJson, Rejections) {
  auto message = [](const nlohmann::json& j) {
    try {
      scene_spec_from_json(j);
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::validation);
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message({{"inlier_ratio", 1.2}}).find("inlier_ratio"), std::string::npos);
  EXPECT_NE(message({{"colour", 1}}).find("colour"), std::string::npos);
  EXPECT_NE(message({{"surface", "torus"}}).find("surface"), std::string::npos);
  EXPECT_NE(message({{"point_count", "many"}}).find("point_count"), std::string::npos);
  EXPECT_NE(message({{"point_count", 0}}).find("point_count"), std::string::npos);
  EXPECT_NE(message(nlohmann::json::array()), "");
}
