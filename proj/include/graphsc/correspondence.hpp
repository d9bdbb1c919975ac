#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "graphsc/geometry.hpp"

namespace graphsc {

/// Putative matches (x in the source cloud, y in the target cloud), with
/// optional ground-truth labels and predicted scores.
struct CorrespondenceSet {
  std::vector<Vec3> source;
  std::vector<Vec3> target;
  std::vector<int> labels;     // empty, or one 0/1 per pair
  std::vector<double> scores;  // empty, or one value in [0,1] per pair

  std::size_t size() const noexcept { return source.size(); }
  bool empty() const noexcept { return source.empty(); }
  bool has_labels() const noexcept { return !labels.empty(); }
  bool has_scores() const noexcept { return !scores.empty(); }

  void push_back(const Vec3& x, const Vec3& y) {
    source.push_back(x);
    target.push_back(y);
  }

  void validate() const {
    if (source.size() != target.size()) fail_validation("correspondences: endpoint count mismatch");
    validate_finite(source, "correspondences (source)");
    validate_finite(target, "correspondences (target)");
    if (has_labels()) {
      if (labels.size() != size()) fail_validation("correspondences: label count mismatch");
      for (int l : labels) {
        if (l != 0 && l != 1) fail_validation("correspondences: labels must be 0 or 1");
      }
    }
    if (has_scores()) {
      if (scores.size() != size()) fail_validation("correspondences: score count mismatch");
      for (double s : scores) {
        if (!(s >= 0.0 && s <= 1.0)) fail_validation("correspondences: scores must lie in [0,1]");
      }
    }
  }

  /// Subset in the order given by `indices`.
  CorrespondenceSet select(std::span<const std::size_t> indices) const {
    CorrespondenceSet out;
    for (std::size_t i : indices) {
      out.push_back(source.at(i), target.at(i));
      if (has_labels()) out.labels.push_back(labels[i]);
      if (has_scores()) out.scores.push_back(scores[i]);
    }
    return out;
  }
};

/// corr.csv: mandatory header, then one row per pair with six coordinates,
/// followed by an optional label and an optional score column.
inline void write_correspondences(const std::filesystem::path& path, const CorrespondenceSet& corr) {
  corr.validate();
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "x,y,z,tx,ty,tz");
  if (corr.has_labels()) std::fprintf(fp, ",label");
  if (corr.has_scores()) std::fprintf(fp, ",score");
  std::fprintf(fp, "\n");
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const Vec3& x = corr.source[i];
    const Vec3& y = corr.target[i];
    std::fprintf(fp, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", x.x(), x.y(), x.z(), y.x(), y.y(), y.z());
    if (corr.has_labels()) std::fprintf(fp, ",%d", corr.labels[i]);
    if (corr.has_scores()) std::fprintf(fp, ",%.17g", corr.scores[i]);
    std::fprintf(fp, "\n");
  }
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

inline CorrespondenceSet read_correspondences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());

  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t\r");
      const auto e = cell.find_last_not_of(" \t\r");
      cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
    }
    return cells;
  };

  std::string line;
  if (!std::getline(in, line)) fail_validation(path.string() + ": missing header row");
  const auto header = split(line);
  const std::vector<std::string> coords{"x", "y", "z", "tx", "ty", "tz"};
  if (header.size() < 6 || !std::equal(coords.begin(), coords.end(), header.begin())) {
    fail_validation(path.string() + ": header must start with x,y,z,tx,ty,tz");
  }
  int label_col = -1;
  int score_col = -1;
  for (std::size_t c = 6; c < header.size(); ++c) {
    if (header[c] == "label" && label_col < 0) {
      label_col = static_cast<int>(c);
    } else if (header[c] == "score" && score_col < 0) {
      score_col = static_cast<int>(c);
    } else {
      fail_validation(path.string() + ": unexpected column '" + header[c] + "'");
    }
  }

  CorrespondenceSet corr;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    const std::string where = path.string() + " row " + std::to_string(row);
    if (cells.size() != header.size()) fail_validation(where + ": expected " + std::to_string(header.size()) + " columns");
    double v[6];
    for (int c = 0; c < 6; ++c) {
      std::size_t used = 0;
      try {
        v[c] = std::stod(cells[c], &used);
      } catch (const std::exception&) {
        fail_validation(where + ": malformed number '" + cells[c] + "'");
      }
      if (used != cells[c].size() || !std::isfinite(v[c])) fail_validation(where + ": malformed number '" + cells[c] + "'");
    }
    corr.push_back(Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5]));
    if (label_col >= 0) {
      const std::string& s = cells[static_cast<std::size_t>(label_col)];
      if (s != "0" && s != "1") fail_validation(where + ": label must be 0 or 1");
      corr.labels.push_back(s == "1" ? 1 : 0);
    }
    if (score_col >= 0) {
      const std::string& s = cells[static_cast<std::size_t>(score_col)];
      std::size_t used = 0;
      double sc = -1.0;
      try {
        sc = std::stod(s, &used);
      } catch (const std::exception&) {
        fail_validation(where + ": malformed score '" + s + "'");
      }
      if (used != s.size()) fail_validation(where + ": malformed score '" + s + "'");
      corr.scores.push_back(sc);
    }
  }
  corr.validate();
  return corr;
}

}  // namespace graphsc
