#pragma once

#include <cstdio>
#include <filesystem>
#include <set>

#include "graphsc/warp.hpp"

namespace graphsc {

namespace thresholds {
inline constexpr double kStrictEpe = 0.025;       // meters
inline constexpr double kStrictRelative = 0.025;
inline constexpr double kRelaxedEpe = 0.05;       // meters
inline constexpr double kRelaxedRelative = 0.05;
inline constexpr double kOutlierRelative = 0.30;
inline constexpr double kZeroMotion = 1e-12;       // meters; below this RE is undefined
}  // namespace thresholds

struct MetricsReport {
  double epe = 0.0;
  double acc_s = 0.0;
  double acc_r = 0.0;
  double outlier_ratio = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t point_count = 0;
};

/// Per-point end-point error and relative error. Relative error is NaN where
/// the ground truth does not move the point (up to rounding).
struct PointErrors {
  std::vector<double> epe;
  std::vector<double> relative;
};

inline PointErrors point_errors(std::span<const Vec3> source, const WarpField& est, const WarpField& gt) {
  if (source.empty()) fail_validation("registration metrics: empty source cloud");
  PointErrors e;
  e.epe.resize(source.size());
  e.relative.resize(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Vec3 w_gt = gt.warp(source[i]);
    const double err = (est.warp(source[i]) - w_gt).norm();
    const double motion = (w_gt - source[i]).norm();
    e.epe[i] = err;
    e.relative[i] = motion > thresholds::kZeroMotion ? err / motion : std::numeric_limits<double>::quiet_NaN();
  }
  return e;
}

/// EPE, AccS, AccR and OR from per-point errors. A point whose relative error
/// is undefined is judged on EPE alone and never counted as an outlier.
inline MetricsReport registration_metrics(const PointErrors& e) {
  MetricsReport r;
  r.point_count = e.epe.size();
  std::size_t strict = 0, relaxed = 0, outliers = 0;
  for (std::size_t i = 0; i < e.epe.size(); ++i) {
    const double epe = e.epe[i];
    const double re = e.relative[i];
    const bool has_re = !std::isnan(re);
    r.epe += epe;
    if (epe < thresholds::kStrictEpe || (has_re && re < thresholds::kStrictRelative)) ++strict;
    if (epe < thresholds::kRelaxedEpe || (has_re && re < thresholds::kRelaxedRelative)) ++relaxed;
    if (has_re && re > thresholds::kOutlierRelative) ++outliers;
  }
  const double n = static_cast<double>(r.point_count);
  r.epe /= n;
  r.acc_s = static_cast<double>(strict) / n;
  r.acc_r = static_cast<double>(relaxed) / n;
  r.outlier_ratio = static_cast<double>(outliers) / n;
  return r;
}

inline MetricsReport registration_metrics(std::span<const Vec3> source, const WarpField& est, const WarpField& gt) {
  return registration_metrics(point_errors(source, est, gt));
}

struct ClassificationMetrics {
  double precision = 0.0;
  double recall = 0.0;
};

/// Precision and recall of a predicted inlier set. An empty prediction has
/// precision 0; a scene without true inliers has recall 1.
inline ClassificationMetrics classification_metrics(std::span<const std::size_t> predicted, std::span<const int> labels) {
  const std::set<std::size_t> unique(predicted.begin(), predicted.end());
  std::size_t tp = 0;
  for (std::size_t i : unique) {
    if (i >= labels.size()) fail_validation("classification metrics: prediction index out of range");
    tp += labels[i] == 1 ? 1 : 0;
  }
  std::size_t positives = 0;
  for (int l : labels) positives += l == 1 ? 1 : 0;
  ClassificationMetrics m;
  m.precision = unique.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(unique.size());
  m.recall = positives == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(positives);
  return m;
}

inline void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& m) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "points,epe,acc_s,acc_r,outlier_ratio\n");
  std::fprintf(fp, "%zu,%.9g,%.9g,%.9g,%.9g\n", m.point_count, m.epe, m.acc_s, m.acc_r, m.outlier_ratio);
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

inline void print_metrics_table(std::FILE* fp, const MetricsReport& m) {
  std::fprintf(fp, "%-14s %12s\n", "metric", "value");
  std::fprintf(fp, "%-14s %12zu\n", "points", m.point_count);
  std::fprintf(fp, "%-14s %12.6f\n", "EPE (m)", m.epe);
  std::fprintf(fp, "%-14s %12.4f\n", "AccS", m.acc_s);
  std::fprintf(fp, "%-14s %12.4f\n", "AccR", m.acc_r);
  std::fprintf(fp, "%-14s %12.4f\n", "OR", m.outlier_ratio);
}

}  // namespace graphsc
