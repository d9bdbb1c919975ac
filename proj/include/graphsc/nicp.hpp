#pragma once

// Non-rigid ICP over an embedded deformation graph: damped Gauss-Newton on
//   E = lambda_c * sum |W(x_i) - y_i|^2
//     + lambda_r * sum_{(u,v)} |R_u (v_v - v_u) + v_u + t_u - (v_v + t_v)|^2
// with incremental updates R <- exp(w^) R, t <- t + dt.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <vector>

#include "graphsc/correspondence.hpp"
#include "graphsc/warp.hpp"

namespace graphsc {

struct SolverConfig {
  double lambda_corr = 25.0;
  double lambda_reg = 1.0;
  double marquardt = 0.01;
  std::size_t max_iterations = 50;
  double cost_tolerance = 1e-6;  // stop when (prev - cost) <= tol * prev
  double step_tolerance = 1e-6;  // stop when max |dT| < tol
  double graph_coverage = 0.08;  // sigma_g
  std::size_t graph_k = 6;       // k_g

  void validate() const {
    if (!(lambda_corr > 0.0)) fail_validation("lambda_c must be positive");
    if (!(lambda_reg > 0.0)) fail_validation("lambda_r must be positive");
    if (!(marquardt > 0.0)) fail_validation("lambda_m must be positive");
    if (max_iterations < 1) fail_validation("max_iterations must be at least 1");
    if (!(cost_tolerance > 0.0)) fail_validation("cost_tolerance must be positive");
    if (!(step_tolerance > 0.0)) fail_validation("step_tolerance must be positive");
    if (!(graph_coverage > 0.0)) fail_validation("sigma_g must be positive");
    if (graph_k < 1) fail_validation("k_g must be at least 1");
  }
};

/// Fixed data of one registration: correspondences with their node
/// attachments, the edge list and the square-rooted term weights.
struct RegistrationProblem {
  std::vector<Vec3> source;
  std::vector<Vec3> target;
  std::vector<std::vector<NodeWeight>> attachments;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::size_t node_count = 0;
  double sqrt_corr = 5.0;
  double sqrt_reg = 1.0;

  std::size_t residual_count() const { return 3 * (source.size() + edges.size()); }
  std::size_t variable_count() const { return 6 * node_count; }
};

inline RegistrationProblem make_problem(const WarpField& field, const CorrespondenceSet& corr, const SolverConfig& cfg) {
  if (corr.empty()) fail_validation("registration: no correspondences");
  corr.validate();
  RegistrationProblem p;
  p.source = corr.source;
  p.target = corr.target;
  p.attachments.reserve(corr.size());
  for (const Vec3& x : corr.source) p.attachments.push_back(field.graph.attach(x));
  p.edges = field.graph.edges;
  p.node_count = field.graph.node_count();
  p.sqrt_corr = std::sqrt(cfg.lambda_corr);
  p.sqrt_reg = std::sqrt(cfg.lambda_reg);
  return p;
}

/// Stacked residuals: all correspondence terms, then all edge terms.
inline Eigen::VectorXd residuals(const WarpField& field, const RegistrationProblem& p) {
  Eigen::VectorXd r(static_cast<Eigen::Index>(p.residual_count()));
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < p.source.size(); ++i, row += 3) {
    r.segment<3>(row) = p.sqrt_corr * (field.warp(p.source[i], p.attachments[i]) - p.target[i]);
  }
  for (const auto& [u, v] : p.edges) {
    const Vec3& vu = field.graph.nodes[u];
    const Vec3& vv = field.graph.nodes[v];
    const auto& tu = field.transforms[u];
    const auto& tv = field.transforms[v];
    r.segment<3>(row) = p.sqrt_reg * (tu.rotation * (vv - vu) + vu + tu.translation - (vv + tv.translation));
    row += 3;
  }
  return r;
}

inline double cost(const WarpField& field, const RegistrationProblem& p) { return residuals(field, p).squaredNorm(); }

/// Jacobian w.r.t. [w_1..w_V, dt_1..dt_V] at w = 0, dt = 0.
inline Eigen::SparseMatrix<double> jacobian(const WarpField& field, const RegistrationProblem& p) {
  const auto nv = static_cast<Eigen::Index>(p.node_count);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(p.source.size() * 6 * 9 + p.edges.size() * 27);
  auto put = [&](Eigen::Index r0, Eigen::Index c0, const Mat3& block) {
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        if (block(a, b) != 0.0) trip.emplace_back(r0 + a, c0 + b, block(a, b));
      }
    }
  };
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < p.source.size(); ++i, row += 3) {
    for (const auto& nw : p.attachments[i]) {
      const auto j = static_cast<Eigen::Index>(nw.node);
      const Vec3 lever = field.transforms[nw.node].rotation * (p.source[i] - field.graph.nodes[nw.node]);
      put(row, 3 * j, -p.sqrt_corr * nw.weight * skew(lever));
      put(row, 3 * nv + 3 * j, p.sqrt_corr * nw.weight * Mat3::Identity());
    }
  }
  for (const auto& [u, v] : p.edges) {
    const Vec3 lever = field.transforms[u].rotation * (field.graph.nodes[v] - field.graph.nodes[u]);
    put(row, 3 * static_cast<Eigen::Index>(u), -p.sqrt_reg * skew(lever));
    put(row, 3 * nv + 3 * static_cast<Eigen::Index>(u), p.sqrt_reg * Mat3::Identity());
    put(row, 3 * nv + 3 * static_cast<Eigen::Index>(v), -p.sqrt_reg * Mat3::Identity());
    row += 3;
  }
  Eigen::SparseMatrix<double> j(static_cast<Eigen::Index>(p.residual_count()), 6 * nv);
  j.setFromTriplets(trip.begin(), trip.end());
  return j;
}

/// Applies dT = [w; dt]: R_j <- exp(w_j^) R_j, t_j <- t_j + dt_j. With
/// `reorthonormalize`, each rotation is projected back onto SO(3).
inline WarpField apply_update(const WarpField& field, const Eigen::VectorXd& delta, bool reorthonormalize = true) {
  WarpField out = field;
  const auto nv = static_cast<Eigen::Index>(field.graph.node_count());
  for (Eigen::Index j = 0; j < nv; ++j) {
    auto& t = out.transforms[static_cast<std::size_t>(j)];
    t.rotation = exp_so3(delta.segment<3>(3 * j)) * t.rotation;
    if (reorthonormalize) t.rotation = nearest_rotation(t.rotation);
    t.translation += delta.segment<3>(3 * nv + 3 * j);
  }
  return out;
}

struct StepResult {
  WarpField field;
  double cost = 0.0;
  double step_norm = 0.0;  // max |dT|
};

/// One damped Gauss-Newton step, solving (J^T J + lambda_m I) dT = -J^T r.
inline StepResult gauss_newton_step(const WarpField& field, const RegistrationProblem& p, const SolverConfig& cfg) {
  const Eigen::VectorXd r = residuals(field, p);
  const Eigen::SparseMatrix<double> j = jacobian(field, p);
  Eigen::SparseMatrix<double> normal = (j.transpose() * j).pruned();
  Eigen::SparseMatrix<double> damping(normal.rows(), normal.cols());
  damping.setIdentity();
  normal += cfg.marquardt * damping;
  const Eigen::VectorXd rhs = -(j.transpose() * r);

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(normal);
  if (ldlt.info() != Eigen::Success) fail_numerical("solver breakdown: factorization failed");
  const Eigen::VectorXd delta = ldlt.solve(rhs);
  if (ldlt.info() != Eigen::Success || !delta.allFinite()) fail_numerical("solver breakdown: non-finite step");

  StepResult out;
  out.field = apply_update(field, delta);
  out.cost = cost(out.field, p);
  out.step_norm = delta.size() > 0 ? delta.cwiseAbs().maxCoeff() : 0.0;
  return out;
}

// Squared-meter cost at which residuals are pure rounding noise.
inline constexpr double kConvergedCost = 1e-20;

struct SolveResult {
  WarpField field;
  std::vector<double> cost_trace;  // cost before any step, then after each accepted step
  std::size_t iterations = 0;      // accepted steps
};

/// Iterates from `initial`. Stops at max_iterations, on a small relative cost
/// decrease or a small step; a step that raises the cost is discarded and
/// ends the run.
inline SolveResult solve(const CorrespondenceSet& corr, WarpField initial, const SolverConfig& cfg) {
  cfg.validate();
  const RegistrationProblem p = make_problem(initial, corr, cfg);
  SolveResult res;
  res.field = std::move(initial);
  double current = cost(res.field, p);
  res.cost_trace.push_back(current);
  if (current <= kConvergedCost) return res;
  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    StepResult step;
    try {
      step = gauss_newton_step(res.field, p, cfg);
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(e.what()) + " at iteration " + std::to_string(it));
    }
    if (!std::isfinite(step.cost)) fail_numerical("solver breakdown: non-finite cost at iteration " + std::to_string(it));
    if (step.cost > current) break;
    res.field = std::move(step.field);
    res.cost_trace.push_back(step.cost);
    res.iterations = it;
    const double decrease = current - step.cost;
    current = step.cost;
    if (current <= kConvergedCost || step.step_norm < cfg.step_tolerance || decrease <= cfg.cost_tolerance * (current + decrease)) {
      break;
    }
  }
  return res;
}

/// Builds the solver graph over `source` and registers from the identity.
inline SolveResult solve(const CorrespondenceSet& corr, std::span<const Vec3> source, const SolverConfig& cfg) {
  cfg.validate();
  return solve(corr, WarpField::identity(build_graph(source, cfg.graph_coverage, cfg.graph_k)), cfg);
}

inline void write_cost_trace(const std::filesystem::path& path, std::span<const double> trace) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "iteration,cost\n");
  for (std::size_t i = 0; i < trace.size(); ++i) std::fprintf(fp, "%zu,%.17g\n", i, trace[i]);
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

inline std::vector<double> read_cost_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("iteration,cost", 0) != 0) fail_validation(path.string() + ": bad header");
  std::vector<double> trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) fail_validation(path.string() + ": malformed row");
    trace.push_back(std::stod(line.substr(comma + 1)));
  }
  return trace;
}

}  // namespace graphsc
