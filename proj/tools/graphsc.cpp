// graphsc: synthesize scenes, train the scorer, prune correspondences,
// register, evaluate, check gradients and inspect graphs.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "graphsc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace graphsc;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

PipelineConfig load_config(const Globals& g) {
  PipelineConfig cfg = g.config_path.empty() ? PipelineConfig{} : read_config(g.config_path);
  if (g.seed) {
    cfg.model_seed = *g.seed;
    cfg.train.seed = *g.seed;
  }
  return cfg;
}

CorrespondenceSet load_corr(const fs::path& input) {
  return read_correspondences(fs::is_directory(input) ? input / "corr.csv" : input);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail_io("cannot create " + dir.string() + ": " + ec.message());
}

void write_scores(const fs::path& path, const std::vector<double>& scores) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "index,score\n");
  for (std::size_t i = 0; i < scores.size(); ++i) std::fprintf(fp, "%zu,%.9g\n", i, scores[i]);
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

int run_synth(const Globals& g, const std::string& spec_path, const fs::path& out) {
  SceneSpec spec = read_scene_spec(spec_path);
  if (g.seed) spec.seed = *g.seed;
  const Scene scene = generate_scene(spec);
  write_scene(out, scene);
  std::size_t inliers = 0;
  for (int l : scene.corr.labels) inliers += static_cast<std::size_t>(l);
  std::printf("scene: %zu points, %zu correspondences (%zu inliers), %zu gt nodes -> %s\n", scene.source.size(),
              scene.corr.size(), inliers, scene.gt.graph.node_count(), out.string().c_str());
  return 0;
}

int run_train(const Globals& g, const fs::path& dataset, const fs::path& model_path, const std::string& log_path,
              const std::string& checkpoint_path) {
  const PipelineConfig cfg = load_config(g);
  const auto scenes = load_dataset(dataset, cfg.train.label_tau_d);
  ScNetModel<float> model = ScNetModel<float>::initialized(cfg.arch, cfg.model_seed);
  AdamOptimizer<float> adam(cfg.arch, cfg.train.weight_decay);
  std::printf("training on %zu scenes, %zu parameters, %zu epochs\n", scenes.size(), model.parameter_count(),
              cfg.train.epochs);
  const auto log = train(model, scenes, cfg.graph, cfg.train, &adam, [](const EpochLog& e) {
    std::printf("epoch %3zu  loss %.6f  cls %.6f  con %.6f  lr %.3g\n", e.epoch, e.mean_loss, e.mean_classification,
                e.mean_consistency, e.learning_rate);
    std::fflush(stdout);
  });
  save_model(model_path, model);
  if (!log_path.empty()) write_loss_log(log_path, log);
  if (!checkpoint_path.empty()) save_model(checkpoint_path, model, &adam);
  return 0;
}

int run_prune(const Globals& g, const fs::path& input, const fs::path& model_path, const fs::path& out) {
  const PipelineConfig cfg = load_config(g);
  const CorrespondenceSet corr = load_corr(input);
  const LoadedModel loaded = load_model(model_path, cfg.arch);
  const PruneResult r = prune(loaded.model, corr, cfg.graph, cfg.tau_s);
  ensure_dir(out);
  write_correspondences(out / "corr.csv", r.pruned);
  write_scores(out / "scores.csv", r.scores);
  std::printf("kept %zu of %zu correspondences\n", r.kept.size(), corr.size());
  if (corr.has_labels()) {
    const auto m = classification_metrics(r.kept, corr.labels);
    std::printf("precision %.4f  recall %.4f\n", m.precision, m.recall);
  }
  return 0;
}

int run_register(const Globals& g, const fs::path& corr_path, const fs::path& source_path, const fs::path& out,
                 const std::string& gt_path) {
  const PipelineConfig cfg = load_config(g);
  const CorrespondenceSet corr = load_corr(corr_path);
  const PointCloud source = read_cloud(source_path);
  const SolveResult res = solve(corr, source.points, cfg.solver);
  ensure_dir(out);
  write_warp_field(out / "warp.txt", res.field);
  write_ply(out / "warped.ply", res.field.warp_all(source.points));
  write_cost_trace(out / "cost-trace.csv", res.cost_trace);
  std::printf("%zu iterations, cost %.9g -> %.9g\n", res.iterations, res.cost_trace.front(), res.cost_trace.back());
  if (!gt_path.empty()) {
    const WarpField gt = read_warp_field(gt_path);
    const auto m = registration_metrics(source.points, res.field, gt);
    std::printf("EPE vs ground truth: %.9g m\n", m.epe);
  }
  return 0;
}

int run_eval(const fs::path& est_path, const fs::path& gt_path, const fs::path& source_path, const std::string& out,
             const std::string& trace_path) {
  const WarpField est = read_warp_field(est_path);
  const WarpField gt = read_warp_field(gt_path);
  const PointCloud source = read_cloud(source_path);
  const PointErrors errors = point_errors(source.points, est, gt);
  const MetricsReport m = registration_metrics(errors);
  print_metrics_table(stdout, m);
  if (!out.empty()) {
    const fs::path dir(out);
    ensure_dir(dir);
    write_metrics_csv(dir / "metrics.csv", m);
    const Histogram h = error_histogram(errors.epe);
    write_histogram_csv(dir / "epe-histogram.csv", h);
    write_histogram_svg(dir / "epe-histogram.svg", h);
  }
  if (!trace_path.empty()) {
    const auto trace = read_cost_trace(trace_path);
    const bool ok = non_increasing(trace);
    std::printf("cost trace: %zu entries, %s\n", trace.size(), ok ? "non-increasing" : "INCREASES");
    if (!ok) fail_numerical("cost trace is not monotone");
  }
  return 0;
}

int run_gradcheck(const Globals& g) {
  const std::uint64_t seed = g.seed.value_or(0);
  const GradcheckReport r = gradcheck(seed);
  std::printf("gradcheck seed %llu: %zu parameters, max relative error %.3e (%s[%zu]), %zu kink-limited steps, %.2f s\n",
              static_cast<unsigned long long>(seed), r.parameter_count, r.max_relative_error, r.worst_tensor.c_str(),
              r.worst_index, r.shrunk_steps, r.seconds);
  const bool pass = r.max_relative_error < 1e-4;
  std::printf("%s\n", pass ? "PASS" : "FAIL");
  return pass ? 0 : 3;
}

int run_inspect(const Globals& g, const fs::path& input, bool solver_graph, const std::string& out,
                const std::string& theta_csv) {
  const PipelineConfig cfg = load_config(g);
  const bool is_corr = fs::is_directory(input) || input.extension() == ".csv";
  DeformationGraph graph;
  std::optional<CorrespondenceSet> corr;
  if (is_corr) {
    corr = load_corr(input);
    graph = solver_graph ? build_graph(corr->source, cfg.solver.graph_coverage, cfg.solver.graph_k)
                         : build_correspondence_graph(*corr, cfg.graph.coverage, cfg.graph.k);
  } else {
    const PointCloud cloud = read_cloud(input);
    graph = solver_graph ? build_graph(cloud.points, cfg.solver.graph_coverage, cfg.solver.graph_k)
                         : build_graph(cloud.points, cfg.graph.coverage, cfg.graph.k);
  }
  std::FILE* fp = out.empty() ? stdout : std::fopen(out.c_str(), "w");
  if (!fp) fail_io("cannot write " + out);
  write_graph_dump(fp, graph);
  if (fp != stdout && std::fclose(fp) != 0) fail_io("error writing " + out);

  if (!theta_csv.empty()) {
    if (!corr) fail_validation("--theta-stats needs a correspondence file");
    const LocalConsistency lc = local_consistency(*corr, graph, cfg.graph.sigma_d);
    std::FILE* tf = std::fopen(theta_csv.c_str(), "w");
    if (!tf) fail_io("cannot write " + theta_csv);
    std::fprintf(tf, "node,members,min,mean,max\n");
    for (std::size_t j = 0; j < lc.theta.size(); ++j) {
      const auto& t = lc.theta[j];
      if (t.size() == 0) continue;
      std::fprintf(tf, "%zu,%lld,%.9g,%.9g,%.9g\n", j, static_cast<long long>(t.rows()), t.minCoeff(), t.mean(),
                   t.maxCoeff());
    }
    if (std::fclose(tf) != 0) fail_io("error writing " + theta_csv);
  }
  return 0;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::validation:
      return 2;
    case ErrorKind::numerical:
      return 3;
    case ErrorKind::io:
      return 4;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graph-based local spatial consistency for non-rigid registration"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "pipeline config (flat JSON)");
  app.add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { g.seed = s; }, "override seeds");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);

  std::string spec, out, model, log, checkpoint, gt, trace, theta;
  fs::path input, source, est;
  bool solver_graph = false;

  auto* synth = app.add_subcommand("synth", "generate a scene bundle from a spec");
  synth->add_option("spec", spec, "scene spec (JSON)")->required();
  synth->add_option("out", out, "output directory")->required();

  auto* trn = app.add_subcommand("train", "train the correspondence scorer");
  trn->add_option("dataset", input, "directory of scene bundles")->required();
  trn->add_option("-o,--model", model, "output parameter file")->required();
  trn->add_option("--log", log, "per-epoch loss CSV");
  trn->add_option("--checkpoint", checkpoint, "parameter file with optimizer state");

  auto* prn = app.add_subcommand("prune", "score and filter correspondences");
  prn->add_option("input", input, "scene directory or corr.csv")->required();
  prn->add_option("-m,--model", model, "parameter file")->required();
  prn->add_option("-o,--out", out, "output directory")->required();

  auto* reg = app.add_subcommand("register", "fit an embedded deformation to correspondences");
  reg->add_option("corr", input, "scene directory or corr.csv")->required();
  reg->add_option("source", source, "source cloud (.ply or .xyz)")->required();
  reg->add_option("-o,--out", out, "output directory")->required();
  reg->add_option("--gt", gt, "ground-truth warp for an EPE printout");

  auto* evl = app.add_subcommand("eval", "registration metrics against a ground-truth warp");
  evl->add_option("est", est, "estimated warp.txt")->required();
  evl->add_option("gt", gt, "ground-truth warp.txt")->required();
  evl->add_option("source", source, "source cloud")->required();
  evl->add_option("-o,--out", out, "directory for metrics.csv and the error histogram");
  evl->add_option("--trace", trace, "cost-trace.csv to check for monotonicity");

  auto* grc = app.add_subcommand("gradcheck", "compare analytic and numeric gradients on a micro model");

  auto* ins = app.add_subcommand("inspect-graph", "dump a deformation graph");
  ins->add_option("input", input, "corr.csv, scene directory or point cloud")->required();
  ins->add_flag("--solver", solver_graph, "use the solver graph parameters (sigma_g, k_g)");
  ins->add_option("-o,--out", out, "dump file (default stdout)");
  ins->add_option("--theta-stats", theta, "per-node consistency statistics CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  Eigen::setNbThreads(g.threads);

  try {
    if (*synth) return run_synth(g, spec, out);
    if (*trn) return run_train(g, input, model, log, checkpoint);
    if (*prn) return run_prune(g, input, model, out);
    if (*reg) return run_register(g, input, source, out, gt);
    if (*evl) return run_eval(est, gt, source, out, trace);
    if (*grc) return run_gradcheck(g);
    if (*ins) return run_inspect(g, input, solver_graph, out, theta);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
