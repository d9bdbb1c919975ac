#pragma once

// End-to-end stages shared by the command-line tool and the tests:
// prune (score + classify), register, evaluate, gradient check, dataset IO.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "graphsc/config.hpp"
#include "graphsc/metrics.hpp"
#include "graphsc/model_io.hpp"
#include "graphsc/synth.hpp"

namespace graphsc {

/// Scores every correspondence with the network.
template <class S>
std::vector<double> score_correspondences(const ScNetModel<S>& model, const CorrespondenceSet& corr,
                                          const GraphParams& gp) {
  if (corr.empty()) fail_validation("prune: no correspondences");
  corr.validate();
  const DeformationGraph graph = build_correspondence_graph(corr, gp.coverage, gp.k);
  const LocalConsistency lc = local_consistency(corr, graph, gp.sigma_d);
  return forward(model, make_batch<S>(corr, graph, lc)).scores;
}

struct PruneResult {
  std::vector<double> scores;        // one per input correspondence
  std::vector<std::size_t> kept;     // ascending input indices
  CorrespondenceSet pruned;          // kept rows, labels carried over, scores attached
};

template <class S>
PruneResult prune(const ScNetModel<S>& model, const CorrespondenceSet& corr, const GraphParams& gp, double tau_s) {
  PruneResult r;
  r.scores = score_correspondences(model, corr, gp);
  r.kept = classify(r.scores, tau_s);
  std::sort(r.kept.begin(), r.kept.end());
  CorrespondenceSet scored = corr;
  scored.scores = r.scores;
  for (double& s : scored.scores) s = std::clamp(s, 0.0, 1.0);
  r.pruned = scored.select(r.kept);
  return r;
}

/// Labeled training scenes from every subdirectory of `dir` holding a scene
/// bundle, in name order. Labels come from the bundled ground-truth warp.
inline std::vector<LabeledScene> load_dataset(const std::filesystem::path& dir, double tau_d) {
  if (!std::filesystem::is_directory(dir)) fail_io(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> scene_dirs;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "corr.csv")) scene_dirs.push_back(entry.path());
  }
  std::sort(scene_dirs.begin(), scene_dirs.end());
  if (scene_dirs.empty()) fail_validation(dir.string() + ": no scene bundles found");
  std::vector<LabeledScene> scenes;
  scenes.reserve(scene_dirs.size());
  for (const auto& d : scene_dirs) {
    const CorrespondenceSet corr = read_correspondences(d / "corr.csv");
    const WarpField gt = read_warp_field(d / "warp.txt");
    scenes.push_back({corr, label_correspondences(corr, gt, tau_d)});
  }
  return scenes;
}

inline std::vector<LabeledScene> to_labeled(const std::vector<Scene>& scenes, double tau_d) {
  std::vector<LabeledScene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({s.corr, label_correspondences(s.corr, s.gt, tau_d)});
  return out;
}

/// A cost trace is valid when it never increases.
inline bool non_increasing(std::span<const double> trace) {
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace[i] > trace[i - 1]) return false;
  }
  return true;
}

/// Metrics pooled over every point of several scenes.
inline MetricsReport pooled_metrics(std::span<const PointErrors> scenes) {
  PointErrors all;
  for (const auto& e : scenes) {
    all.epe.insert(all.epe.end(), e.epe.begin(), e.epe.end());
    all.relative.insert(all.relative.end(), e.relative.begin(), e.relative.end());
  }
  if (all.epe.empty()) fail_validation("pooled metrics: no points");
  return registration_metrics(all);
}

// ---------------------------------------------------------------- histogram

struct Histogram {
  double bin_width = 0.0;
  std::vector<std::size_t> counts;
};

inline Histogram error_histogram(std::span<const double> errors, std::size_t bins = 20) {
  Histogram h;
  h.counts.assign(bins, 0);
  double hi = 0.0;
  for (double e : errors) hi = std::max(hi, e);
  h.bin_width = hi > 0.0 ? hi / static_cast<double>(bins) : 1e-3;
  for (double e : errors) {
    auto b = static_cast<std::size_t>(e / h.bin_width);
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

inline void write_histogram_csv(const std::filesystem::path& path, const Histogram& h) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "bin_lo,bin_hi,count\n");
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    std::fprintf(fp, "%.9g,%.9g,%zu\n", static_cast<double>(b) * h.bin_width, static_cast<double>(b + 1) * h.bin_width,
                 h.counts[b]);
  }
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

inline void write_histogram_svg(const std::filesystem::path& path, const Histogram& h) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  const double width = 640, height = 360, left = 60, bottom = 40, top = 20, right = 20;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const std::size_t peak = std::max<std::size_t>(1, *std::max_element(h.counts.begin(), h.counts.end()));
  const double bar_w = plot_w / static_cast<double>(h.counts.size());
  std::fprintf(fp, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\">\n", width, height);
  std::fprintf(fp, "<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n");
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    const double bh = plot_h * static_cast<double>(h.counts[b]) / static_cast<double>(peak);
    std::fprintf(fp, "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"#4477aa\"/>\n",
                 left + bar_w * static_cast<double>(b), top + plot_h - bh, bar_w * 0.9, bh);
  }
  std::fprintf(fp, "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n", left, top + plot_h,
               left + plot_w, top + plot_h);
  std::fprintf(fp, "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n", left, top, left,
               top + plot_h);
  std::fprintf(fp, "<text x=\"%.0f\" y=\"%.0f\" font-size=\"12\" text-anchor=\"middle\">end-point error (m), 0 to %.4g</text>\n",
               left + plot_w / 2, height - 10, h.bin_width * static_cast<double>(h.counts.size()));
  std::fprintf(fp, "<text x=\"15\" y=\"%.0f\" font-size=\"12\" transform=\"rotate(-90 15 %.0f)\" text-anchor=\"middle\">points (max %zu)</text>\n",
               top + plot_h / 2, top + plot_h / 2, peak);
  std::fprintf(fp, "</svg>\n");
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

// ----------------------------------------------------------- gradient check

struct GradcheckReport {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t parameter_count = 0;
  std::size_t shrunk_steps = 0;  // parameters whose step straddled a kink
  double seconds = 0.0;
};

/// Six correspondences in two clusters, so the correspondence graph has two
/// nodes with every correspondence assigned to both.
inline TrainingSample<double> gradcheck_sample(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  std::uniform_real_distribution<double> shift(-0.3, 0.3);
  CorrespondenceSet corr;
  for (int i = 0; i < 6; ++i) {
    const Vec3 centre(i < 3 ? -0.25 : 0.25, 0.0, 0.0);
    const Vec3 x = centre + Vec3(jitter(rng), jitter(rng), jitter(rng));
    const Vec3 y = x + Vec3(0.1, 0.0, 0.0) + (i % 2 == 0 ? Vec3(0.1 * jitter(rng), 0.1 * jitter(rng), 0.1 * jitter(rng))
                                                         : Vec3(shift(rng), shift(rng), shift(rng)));
    corr.push_back(x, y);
  }
  GraphParams gp;
  gp.coverage = 0.2;
  gp.k = 2;
  return make_sample<double>(corr, {1, 0, 1, 0, 1, 1}, gp);
}

namespace detail {

struct Probe {
  double loss = 0.0;
  std::vector<bool> signs;  // which side of every kink each input sits on
};

template <class S>
void append_signs(const Matrix<S>& m, std::vector<bool>& out) {
  for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data()[i] > S(0));
}

/// Loss plus the side of every non-differentiable point it passes through:
/// leaky-rectifier inputs and the clamp inside the feature consistency term.
inline Probe probe(const ScNetModel<double>& model, const TrainingSample<double>& sample, const TrainConfig& cfg) {
  ForwardCache<double> cache;
  const auto out = forward(model, sample.batch, &cache);
  Probe p;
  p.loss = total_loss(out, sample.nodes, sample.labels, model.sigma_f, cfg.focal_gamma, cfg.loss_lambda).total;
  for (const auto& c : cache.init) append_signs(c.normed, p.signs);
  for (const auto& block : cache.blocks) {
    for (const auto& u : block) append_signs(u.hidden_pre, p.signs);
  }
  for (const auto& c : cache.head) append_signs(c.normed, p.signs);
  const Eigen::MatrixXd unit = out.features.rowwise().normalized();
  const double s2 = model.sigma_f * model.sigma_f;
  for (const auto& members : sample.nodes) {
    for (std::size_t a : members) {
      for (std::size_t b : members) {
        const double d2 = (unit.row(static_cast<Eigen::Index>(a)) - unit.row(static_cast<Eigen::Index>(b))).squaredNorm();
        p.signs.push_back(1.0 - d2 / s2 > 0.0);
      }
    }
  }
  return p;
}

}  // namespace detail

/// Fourth-order central differences, (8[f(h) - f(-h)] - [f(2h) - f(-2h)]) / 12h,
/// of the total loss for every parameter of a micro model. Relative error per parameter is |a - n| / max(|a|, |n|, floor). A central
/// difference is only a valid oracle where the loss is smooth, so when the
/// stencil moves any kink input across zero the step is shrunk tenfold
/// (down to 1e-8) for that parameter; such parameters are counted.
inline GradcheckReport gradcheck(std::uint64_t seed, double step = 1e-4, double floor = 1e-6) {
  const auto start = std::chrono::steady_clock::now();
  const TrainingSample<double> sample = gradcheck_sample(seed);
  ScNetModel<double> model = ScNetModel<double>::initialized(Architecture::micro(16), seed);
  model.sigma_f = 0.9;
  TrainConfig cfg;
  ScNetModel<double> grad = ScNetModel<double>::zeros(model.arch);
  loss_and_gradient(model, sample, cfg, grad);
  const std::vector<bool> base = detail::probe(model, sample, cfg).signs;

  std::vector<const double*> analytic;
  grad.visit([&](const std::string&, const double* p, std::size_t) { analytic.push_back(p); });

  GradcheckReport rep;
  rep.parameter_count = model.parameter_count();
  std::size_t tensor = 0;
  model.visit([&](const std::string& name, double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const double saved = p[i];
      double h = step;
      double numeric = 0.0;
      for (;;) {
        auto at = [&](double offset) {
          p[i] = saved + offset;
          auto r = detail::probe(model, sample, cfg);
          p[i] = saved;
          return r;
        };
        const auto up1 = at(h), down1 = at(-h), up2 = at(2.0 * h), down2 = at(-2.0 * h);
        numeric = (8.0 * (up1.loss - down1.loss) - (up2.loss - down2.loss)) / (12.0 * h);
        const bool smooth = up1.signs == base && down1.signs == base && up2.signs == base && down2.signs == base;
        if (smooth || h <= 1e-8) break;
        if (h == step) ++rep.shrunk_steps;
        h *= 0.1;
      }
      const double a = analytic[tensor][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > rep.max_relative_error) {
        rep.max_relative_error = rel;
        rep.worst_tensor = name;
        rep.worst_index = i;
      }
    }
    ++tensor;
  });
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace graphsc
