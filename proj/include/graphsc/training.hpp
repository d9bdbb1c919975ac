#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "graphsc/scnet.hpp"
#include "graphsc/warp.hpp"

namespace graphsc {

inline constexpr double kScoreClamp = 1e-7;

struct TrainConfig {
  std::size_t epochs = 40;
  double learning_rate = 1e-4;
  double lr_decay_per_epoch = 0.05;  // lr_e = lr * (1 - decay)^e
  double weight_decay = 1e-6;
  double focal_gamma = 2.0;
  double label_tau_d = 0.04;
  double loss_lambda = 1.0;
  bool augment = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) fail_validation("epochs must be at least 1");
    if (!(learning_rate >= 0.0)) fail_validation("learning_rate must be non-negative");
    if (!(lr_decay_per_epoch >= 0.0 && lr_decay_per_epoch < 1.0)) fail_validation("lr_decay must lie in [0,1)");
    if (!(weight_decay >= 0.0)) fail_validation("weight_decay must be non-negative");
    if (!(focal_gamma >= 0.0)) fail_validation("focal_gamma must be non-negative");
    if (!(label_tau_d > 0.0)) fail_validation("tau_d must be positive");
    if (!(loss_lambda >= 0.0)) fail_validation("loss_lambda must be non-negative");
  }

  double learning_rate_at(std::size_t epoch) const {
    return learning_rate * std::pow(1.0 - lr_decay_per_epoch, static_cast<double>(epoch));
  }
};

/// 1 where the ground-truth warp maps x within tau_d of y (strictly), else 0.
inline std::vector<int> label_correspondences(const CorrespondenceSet& corr, const WarpField& gt, double tau_d) {
  std::vector<int> labels(corr.size());
  for (std::size_t i = 0; i < corr.size(); ++i) {
    labels[i] = (gt.warp(corr.source[i]) - corr.target[i]).norm() < tau_d ? 1 : 0;
  }
  return labels;
}

/// Binary focal loss; the score is clamped to [1e-7, 1 - 1e-7] first.
inline double focal_loss(double score, int label, double gamma) {
  const double s = std::clamp(score, kScoreClamp, 1.0 - kScoreClamp);
  return label == 1 ? -std::pow(1.0 - s, gamma) * std::log(s) : -std::pow(s, gamma) * std::log(1.0 - s);
}

/// d focal / d score, zero where the clamp is active.
inline double focal_loss_grad(double score, int label, double gamma) {
  if (score < kScoreClamp || score > 1.0 - kScoreClamp) return 0.0;
  const double s = score;
  if (label == 1) {
    const double a = gamma == 0.0 ? 0.0 : gamma * std::pow(1.0 - s, gamma - 1.0) * std::log(s);
    return a - std::pow(1.0 - s, gamma) / s;
  }
  const double a = gamma == 0.0 ? 0.0 : gamma * std::pow(s, gamma - 1.0) * std::log(1.0 - s);
  return -a + std::pow(s, gamma) / (1.0 - s);
}

/// Members of one non-empty node: the pairs over which feature consistency is
/// supervised.
using NodeMembers = std::vector<std::vector<std::size_t>>;

template <class S>
NodeMembers node_members(const SceneBatch<S>& batch) {
  NodeMembers out;
  for (const auto& nb : batch.node_blocks) {
    out.emplace_back(batch.slot_member.begin() + static_cast<std::ptrdiff_t>(nb.begin),
                     batch.slot_member.begin() + static_cast<std::ptrdiff_t>(nb.begin + nb.count));
  }
  return out;
}

inline NodeMembers node_members(const DeformationGraph& graph) {
  NodeMembers out;
  for (const auto& m : graph.node_to_members) {
    if (!m.empty()) out.push_back(m);
  }
  return out;
}

struct ConsistencyLossResult {
  double value = 0.0;
  Eigen::MatrixXd dfeatures;  // empty unless gradients were requested
  double dsigma_f = 0.0;
};

/// Local feature-consistency loss. Features are normalized to the unit sphere;
/// for members x, y of a node, delta = [1 - |h_x - h_y|^2 / sigma_f^2]_+ is
/// pulled towards 1 when both are inliers and towards 0 otherwise. The mean of
/// |delta - target| is taken per node, then averaged over non-empty nodes.
inline ConsistencyLossResult consistency_loss(const Eigen::MatrixXd& features, const NodeMembers& nodes,
                                              std::span<const int> labels, double sigma_f, bool with_grad = false) {
  if (nodes.empty()) fail_validation("consistency_loss: graph has no populated nodes");
  const Eigen::Index n = features.rows();
  if (static_cast<std::size_t>(n) != labels.size()) fail_validation("consistency_loss: label count mismatch");

  Eigen::VectorXd norms = features.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(norms(i) > 0.0)) fail_validation("consistency_loss: degenerate feature at row " + std::to_string(i));
  }
  const Eigen::MatrixXd unit = norms.cwiseInverse().asDiagonal() * features;

  ConsistencyLossResult r;
  Eigen::MatrixXd dunit;
  if (with_grad) dunit = Eigen::MatrixXd::Zero(n, features.cols());
  const double sf2 = sigma_f * sigma_f;
  const double node_weight = 1.0 / static_cast<double>(nodes.size());
  for (const auto& members : nodes) {
    const double m = static_cast<double>(members.size());
    const double w = node_weight / (m * m);
    for (std::size_t a : members) {
      for (std::size_t b : members) {
        const double target = (labels[a] == 1 && labels[b] == 1) ? 1.0 : 0.0;
        const Eigen::RowVectorXd diff = unit.row(static_cast<Eigen::Index>(a)) - unit.row(static_cast<Eigen::Index>(b));
        const double dist2 = diff.squaredNorm();
        const double raw = 1.0 - dist2 / sf2;
        const double delta = std::max(0.0, raw);
        r.value += w * std::abs(delta - target);
        if (!with_grad || !(raw > 0.0)) continue;
        // |delta - target| has slope -1 for inlier pairs and +1 otherwise, as delta <= 1.
        const double dl_ddelta = target == 1.0 ? -w : w;
        r.dsigma_f += dl_ddelta * 2.0 * dist2 / (sf2 * sigma_f);
        const double dl_ddist2 = -dl_ddelta / sf2;
        dunit.row(static_cast<Eigen::Index>(a)) += 2.0 * dl_ddist2 * diff;
        dunit.row(static_cast<Eigen::Index>(b)) -= 2.0 * dl_ddist2 * diff;
      }
    }
  }
  if (with_grad) {
    r.dfeatures.resize(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVectorXd u = unit.row(i);
      r.dfeatures.row(i) = (dunit.row(i) - u * u.dot(dunit.row(i))) / norms(i);
    }
  }
  return r;
}

struct LossBreakdown {
  double total = 0.0;
  double classification = 0.0;
  double consistency = 0.0;
};

struct LossGradients {
  std::vector<double> dlogits;
  Eigen::MatrixXd dfeatures;
  double dsigma_f = 0.0;
};

/// L = mean focal loss + lambda * consistency loss.
template <class S>
LossBreakdown total_loss(const ForwardResult<S>& out, const NodeMembers& nodes, std::span<const int> labels,
                         double sigma_f, double gamma, double lambda, LossGradients* grads = nullptr) {
  const std::size_t n = out.scores.size();
  if (labels.size() != n) fail_validation("total_loss: label count mismatch");
  LossBreakdown loss;
  if (grads) grads->dlogits.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    loss.classification += focal_loss(out.scores[i], labels[i], gamma) / static_cast<double>(n);
    if (grads) {
      const double s = out.scores[i];
      grads->dlogits[i] = focal_loss_grad(s, labels[i], gamma) * s * (1.0 - s) / static_cast<double>(n);
    }
  }
  if (lambda != 0.0) {
    const auto con = consistency_loss(out.features.template cast<double>(), nodes, labels, sigma_f, grads != nullptr);
    loss.consistency = con.value;
    if (grads) {
      grads->dfeatures = lambda * con.dfeatures;
      grads->dsigma_f = lambda * con.dsigma_f;
    }
  } else if (grads) {
    grads->dfeatures.resize(0, 0);
    grads->dsigma_f = 0.0;
  }
  loss.total = loss.classification + lambda * loss.consistency;
  return loss;
}

/// A labeled scene ready for the network.
template <class S>
struct TrainingSample {
  SceneBatch<S> batch;
  NodeMembers nodes;
  std::vector<int> labels;
};

struct GraphParams {
  double coverage = 0.08;  // sigma_n
  std::size_t k = 6;
  double sigma_d = 0.08;
};

template <class S>
TrainingSample<S> make_sample(const CorrespondenceSet& corr, std::vector<int> labels, const GraphParams& gp) {
  const DeformationGraph graph = build_correspondence_graph(corr, gp.coverage, gp.k);
  const LocalConsistency lc = local_consistency(corr, graph, gp.sigma_d);
  TrainingSample<S> s;
  s.batch = make_batch<S>(corr, graph, lc);
  s.nodes = node_members(s.batch);
  s.labels = std::move(labels);
  return s;
}

/// Loss and full parameter gradient for one sample. Gradients are written into
/// `grad` (zeroed first). Throws naming the tensor if any gradient is not finite.
template <class S>
LossBreakdown loss_and_gradient(const ScNetModel<S>& model, const TrainingSample<S>& sample, const TrainConfig& cfg,
                                ScNetModel<S>& grad) {
  ForwardCache<S> cache;
  const auto out = forward(model, sample.batch, &cache);
  LossGradients lg;
  const auto loss = total_loss(out, sample.nodes, sample.labels, static_cast<double>(model.sigma_f), cfg.focal_gamma,
                               cfg.loss_lambda, &lg);
  grad.set_zero();
  const Matrix<S> dfeat = lg.dfeatures.size() > 0 ? Matrix<S>(lg.dfeatures.template cast<S>()) : Matrix<S>();
  backward(model, sample.batch, cache, lg.dlogits, dfeat, grad);
  grad.sigma_f += static_cast<S>(lg.dsigma_f);
  grad.visit([](const std::string& name, const S* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(static_cast<double>(p[i]))) fail_numerical("non-finite gradient in " + name);
    }
  });
  return loss;
}

template <class S>
LossBreakdown evaluate_loss(const ScNetModel<S>& model, const TrainingSample<S>& sample, const TrainConfig& cfg) {
  const auto out = forward(model, sample.batch);
  return total_loss(out, sample.nodes, sample.labels, static_cast<double>(model.sigma_f), cfg.focal_gamma,
                    cfg.loss_lambda);
}

/// Adam with decoupled weight decay.
template <class S>
class AdamOptimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit AdamOptimizer(const Architecture& arch, double weight_decay = 0.0)
      : first_(ScNetModel<S>::zeros(arch)), second_(ScNetModel<S>::zeros(arch)), weight_decay_(weight_decay) {}

  void step(ScNetModel<S>& params, const ScNetModel<S>& grad, double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(steps_));
    std::vector<S*> p_ptr, m_ptr, v_ptr;
    std::vector<const S*> g_ptr;
    std::vector<std::size_t> sizes;
    params.visit([&](const std::string&, S* p, std::size_t n) {
      p_ptr.push_back(p);
      sizes.push_back(n);
    });
    grad.visit([&](const std::string&, const S* p, std::size_t) { g_ptr.push_back(p); });
    first_.visit([&](const std::string&, S* p, std::size_t) { m_ptr.push_back(p); });
    second_.visit([&](const std::string&, S* p, std::size_t) { v_ptr.push_back(p); });
    for (std::size_t t = 0; t < p_ptr.size(); ++t) {
      for (std::size_t i = 0; i < sizes[t]; ++i) {
        const double g = static_cast<double>(g_ptr[t][i]);
        const double m = kBeta1 * static_cast<double>(m_ptr[t][i]) + (1.0 - kBeta1) * g;
        const double v = kBeta2 * static_cast<double>(v_ptr[t][i]) + (1.0 - kBeta2) * g * g;
        m_ptr[t][i] = static_cast<S>(m);
        v_ptr[t][i] = static_cast<S>(v);
        const double update = (m / c1) / (std::sqrt(v / c2) + kEps) + weight_decay_ * static_cast<double>(p_ptr[t][i]);
        p_ptr[t][i] = static_cast<S>(static_cast<double>(p_ptr[t][i]) - lr * update);
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  const ScNetModel<S>& first_moment() const { return first_; }
  const ScNetModel<S>& second_moment() const { return second_; }
  ScNetModel<S>& first_moment() { return first_; }
  ScNetModel<S>& second_moment() { return second_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

 private:
  ScNetModel<S> first_;
  ScNetModel<S> second_;
  double weight_decay_;
  std::uint64_t steps_ = 0;
};

struct EpochLog {
  std::size_t epoch;
  double mean_loss;
  double mean_classification;
  double mean_consistency;
  double learning_rate;
};

/// Random rotation of at most 10 degrees and N(0, 0.05) translation applied to
/// the target endpoints. Labels and local consistency are unchanged by it.
inline CorrespondenceSet augment_correspondences(const CorrespondenceSet& corr, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Vec3 axis(normal(rng), normal(rng), normal(rng));
  axis.normalize();
  const double angle = uni(rng) * (10.0 * EIGEN_PI / 180.0);
  const Mat3 r = exp_so3(axis * angle);
  const Vec3 t(0.05 * normal(rng), 0.05 * normal(rng), 0.05 * normal(rng));
  CorrespondenceSet out = corr;
  for (Vec3& y : out.target) y = r * y + t;
  return out;
}

/// Labeled scene kept around in raw form, for augmentation.
struct LabeledScene {
  CorrespondenceSet corr;
  std::vector<int> labels;
};

/// Trains in place, one scene per step, scenes reshuffled every epoch.
template <class S>
std::vector<EpochLog> train(ScNetModel<S>& model, const std::vector<LabeledScene>& scenes, const GraphParams& gp,
                            const TrainConfig& cfg, AdamOptimizer<S>* optimizer = nullptr,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (scenes.empty()) fail_validation("train: empty dataset");
  AdamOptimizer<S> local(model.arch, cfg.weight_decay);
  AdamOptimizer<S>& adam = optimizer ? *optimizer : local;

  std::vector<TrainingSample<S>> prepared;
  if (!cfg.augment) {
    prepared.reserve(scenes.size());
    for (const auto& sc : scenes) prepared.push_back(make_sample<S>(sc.corr, sc.labels, gp));
  }

  std::mt19937_64 rng(cfg.seed);
  ScNetModel<S> grad = ScNetModel<S>::zeros(model.arch);
  std::vector<EpochLog> log;
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.learning_rate_at(e);
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog entry{e, 0.0, 0.0, 0.0, lr};
    for (std::size_t step = 0; step < order.size(); ++step) {
      const std::size_t idx = order[step];
      LossBreakdown loss;
      if (cfg.augment) {
        const auto sample = make_sample<S>(augment_correspondences(scenes[idx].corr, rng), scenes[idx].labels, gp);
        loss = loss_and_gradient(model, sample, cfg, grad);
      } else {
        loss = loss_and_gradient(model, prepared[idx], cfg, grad);
      }
      if (!std::isfinite(loss.total)) {
        fail_numerical("training diverged at epoch " + std::to_string(e) + ", step " + std::to_string(step));
      }
      adam.step(model, grad, lr);
      entry.mean_loss += loss.total;
      entry.mean_classification += loss.classification;
      entry.mean_consistency += loss.consistency;
    }
    const double n = static_cast<double>(order.size());
    entry.mean_loss /= n;
    entry.mean_classification /= n;
    entry.mean_consistency /= n;
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

inline void write_loss_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::FILE* fp = std::fopen(path.string().c_str(), "w");
  if (!fp) fail_io("cannot write " + path.string());
  std::fprintf(fp, "epoch,mean_loss,mean_cls,mean_con,lr\n");
  for (const auto& e : log) {
    std::fprintf(fp, "%zu,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.mean_loss, e.mean_classification, e.mean_consistency,
                 e.learning_rate);
  }
  if (std::fclose(fp) != 0) fail_io("error writing " + path.string());
}

}  // namespace graphsc
