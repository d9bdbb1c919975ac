#pragma once

// Correspondence classifier: Fourier input encoding, a shallow MLP, stacked
// graph-based embedding blocks built from spatial-consistency-aware
// self-attention, skinning-weighted aggregation and a sigmoid head.
//
// Everything is templated on the scalar type: training runs in float, the
// gradient check in double, through the same code.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "graphsc/consistency.hpp"

namespace graphsc {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

inline constexpr std::size_t kEncodingWidth = 18;

struct Architecture {
  std::vector<std::size_t> init_widths{256, 256, 256};
  std::size_t blocks = 3;
  std::size_t units_per_block = 2;
  std::vector<std::size_t> head_widths{128, 64, 1};
  std::size_t norm_groups = 8;
  double leaky_slope = 0.01;

  std::size_t feature_width() const { return init_widths.back(); }

  /// d=16, one block holding one attention unit. Used for gradient checks.
  static Architecture micro(std::size_t d = 16) {
    Architecture a;
    a.init_widths = {d, d, d};
    a.blocks = 1;
    a.units_per_block = 1;
    return a;
  }

  void validate() const {
    if (init_widths.empty() || head_widths.size() < 1) fail_validation("architecture: empty MLP");
    if (head_widths.back() != 1) fail_validation("architecture: head must end in one channel");
    if (norm_groups == 0) fail_validation("architecture: norm_groups must be positive");
    for (std::size_t w : init_widths) {
      if (w == 0 || w % norm_groups != 0) fail_validation("architecture: init widths must be divisible by norm_groups");
    }
    for (std::size_t i = 0; i + 1 < head_widths.size(); ++i) {
      if (head_widths[i] == 0 || head_widths[i] % norm_groups != 0) {
        fail_validation("architecture: head widths must be divisible by norm_groups");
      }
    }
  }

  bool operator==(const Architecture&) const = default;
};

/// y = x * weight + bias, weight stored (in x out).
template <class S>
struct Linear {
  Matrix<S> weight;
  RowVector<S> bias;  // may be empty
};

/// Normalization scale and shift.
template <class S>
struct Affine {
  RowVector<S> gamma;
  RowVector<S> beta;
};

template <class S>
struct AttentionUnit {
  Matrix<S> w_query;
  Matrix<S> w_key;
  Matrix<S> w_value;
  Linear<S> out;
  Affine<S> norm1;
  Linear<S> ff1;
  Linear<S> ff2;
  Affine<S> norm2;
};

template <class S>
struct ScNetModel {
  Architecture arch;
  std::vector<Linear<S>> init_layers;
  std::vector<Affine<S>> init_norms;
  std::vector<std::vector<AttentionUnit<S>>> blocks;
  std::vector<Linear<S>> head_layers;
  std::vector<Affine<S>> head_norms;  // one per head layer except the last
  S sigma_f = S(1);                   // feature-consistency tolerance

  /// Every tensor zero-filled; also serves as a gradient accumulator.
  static ScNetModel zeros(const Architecture& arch) {
    arch.validate();
    ScNetModel m;
    m.arch = arch;
    auto lin = [](std::size_t in, std::size_t out, bool bias) {
      Linear<S> l;
      l.weight = Matrix<S>::Zero(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
      if (bias) l.bias = RowVector<S>::Zero(static_cast<Eigen::Index>(out));
      return l;
    };
    auto aff = [](std::size_t c) {
      return Affine<S>{RowVector<S>::Zero(static_cast<Eigen::Index>(c)), RowVector<S>::Zero(static_cast<Eigen::Index>(c))};
    };
    std::size_t in = kEncodingWidth;
    for (std::size_t w : arch.init_widths) {
      m.init_layers.push_back(lin(in, w, true));
      m.init_norms.push_back(aff(w));
      in = w;
    }
    const std::size_t d = arch.feature_width();
    m.blocks.resize(arch.blocks);
    for (auto& block : m.blocks) {
      block.resize(arch.units_per_block);
      for (auto& u : block) {
        u.w_query = lin(d, d, false).weight;
        u.w_key = lin(d, d, false).weight;
        u.w_value = lin(d, d, false).weight;
        u.out = lin(d, d, true);
        u.norm1 = aff(d);
        u.ff1 = lin(d, d, true);
        u.ff2 = lin(d, d, true);
        u.norm2 = aff(d);
      }
    }
    in = d;
    for (std::size_t i = 0; i < arch.head_widths.size(); ++i) {
      m.head_layers.push_back(lin(in, arch.head_widths[i], true));
      if (i + 1 < arch.head_widths.size()) m.head_norms.push_back(aff(arch.head_widths[i]));
      in = arch.head_widths[i];
    }
    m.sigma_f = S(0);
    return m;
  }

  /// Linear layers uniform in +-sqrt(1/fan_in), norms at identity, sigma_f = 1.
  static ScNetModel initialized(const Architecture& arch, std::uint64_t seed) {
    ScNetModel m = zeros(arch);
    std::mt19937_64 rng(seed);
    auto fill_linear = [&](Matrix<S>& w, RowVector<S>* b) {
      const double bound = std::sqrt(1.0 / static_cast<double>(w.rows()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(dist(rng));
      if (b) {
        for (Eigen::Index i = 0; i < b->size(); ++i) b->data()[i] = static_cast<S>(dist(rng));
      }
    };
    auto identity_norm = [](Affine<S>& a) {
      a.gamma.setOnes();
      a.beta.setZero();
    };
    for (std::size_t i = 0; i < m.init_layers.size(); ++i) {
      fill_linear(m.init_layers[i].weight, &m.init_layers[i].bias);
      identity_norm(m.init_norms[i]);
    }
    for (auto& block : m.blocks) {
      for (auto& u : block) {
        fill_linear(u.w_query, nullptr);
        fill_linear(u.w_key, nullptr);
        fill_linear(u.w_value, nullptr);
        fill_linear(u.out.weight, &u.out.bias);
        identity_norm(u.norm1);
        fill_linear(u.ff1.weight, &u.ff1.bias);
        fill_linear(u.ff2.weight, &u.ff2.bias);
        identity_norm(u.norm2);
      }
    }
    for (std::size_t i = 0; i < m.head_layers.size(); ++i) {
      fill_linear(m.head_layers[i].weight, &m.head_layers[i].bias);
      if (i < m.head_norms.size()) identity_norm(m.head_norms[i]);
    }
    m.sigma_f = S(1);
    return m;
  }

  /// Calls f(name, data, count) for every parameter tensor in declaration
  /// order. The order defines the on-disk layout.
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const S*, std::size_t count) { n += count; });
    return n;
  }

  template <class T>
  ScNetModel<T> cast() const {
    ScNetModel<T> out = ScNetModel<T>::zeros(arch);
    std::vector<const S*> src;
    visit([&](const std::string&, const S* p, std::size_t) { src.push_back(p); });
    std::size_t t = 0;
    out.visit([&](const std::string&, T* p, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<T>(src[t][i]);
      ++t;
    });
    return out;
  }

  void set_zero() {
    visit([](const std::string&, S* p, std::size_t n) { std::fill(p, p + n, S(0)); });
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& m, F& f) {
    auto tensor = [&](const std::string& name, auto& t) {
      if (t.size() > 0) f(name, t.data(), static_cast<std::size_t>(t.size()));
    };
    for (std::size_t i = 0; i < m.init_layers.size(); ++i) {
      const std::string p = "init." + std::to_string(i);
      tensor(p + ".weight", m.init_layers[i].weight);
      tensor(p + ".bias", m.init_layers[i].bias);
      tensor(p + ".norm.gamma", m.init_norms[i].gamma);
      tensor(p + ".norm.beta", m.init_norms[i].beta);
    }
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
      for (std::size_t k = 0; k < m.blocks[b].size(); ++k) {
        auto& u = m.blocks[b][k];
        const std::string p = "block." + std::to_string(b) + ".unit." + std::to_string(k);
        tensor(p + ".w_query", u.w_query);
        tensor(p + ".w_key", u.w_key);
        tensor(p + ".w_value", u.w_value);
        tensor(p + ".out.weight", u.out.weight);
        tensor(p + ".out.bias", u.out.bias);
        tensor(p + ".norm1.gamma", u.norm1.gamma);
        tensor(p + ".norm1.beta", u.norm1.beta);
        tensor(p + ".ff1.weight", u.ff1.weight);
        tensor(p + ".ff1.bias", u.ff1.bias);
        tensor(p + ".ff2.weight", u.ff2.weight);
        tensor(p + ".ff2.bias", u.ff2.bias);
        tensor(p + ".norm2.gamma", u.norm2.gamma);
        tensor(p + ".norm2.beta", u.norm2.beta);
      }
    }
    for (std::size_t i = 0; i < m.head_layers.size(); ++i) {
      const std::string p = "head." + std::to_string(i);
      tensor(p + ".weight", m.head_layers[i].weight);
      tensor(p + ".bias", m.head_layers[i].bias);
      if (i < m.head_norms.size()) {
        tensor(p + ".norm.gamma", m.head_norms[i].gamma);
        tensor(p + ".norm.beta", m.head_norms[i].beta);
      }
    }
    f(std::string("sigma_f"), &m.sigma_f, std::size_t{1});
  }
};

/// Centered correspondence coordinates followed by their half-frequency sine
/// and cosine: [c; sin(c/2); cos(c/2)], 18 columns.
inline Eigen::MatrixXd encode_input(const CorrespondenceSet& corr) {
  if (corr.empty()) fail_validation("encode_input: no correspondences");
  const auto n = static_cast<Eigen::Index>(corr.size());
  Eigen::MatrixXd c(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    c.row(i).head<3>() = corr.source[static_cast<std::size_t>(i)].transpose();
    c.row(i).tail<3>() = corr.target[static_cast<std::size_t>(i)].transpose();
  }
  const Eigen::RowVectorXd mean = c.colwise().mean();
  c.rowwise() -= mean;
  Eigen::MatrixXd d(n, static_cast<Eigen::Index>(kEncodingWidth));
  d.leftCols(6) = c;
  d.middleCols(6, 6) = (0.5 * c.array()).sin().matrix();
  d.rightCols(6) = (0.5 * c.array()).cos().matrix();
  return d;
}

/// One scene prepared for the network. Node-member pairs ("slots") are laid
/// out node by node in ascending node order, members ascending within a node.
template <class S>
struct SceneBatch {
  struct NodeBlock {
    std::size_t node;
    std::size_t begin;
    std::size_t count;
    Matrix<S> theta;
  };
  std::size_t correspondence_count = 0;
  Matrix<S> encoded;
  std::vector<NodeBlock> node_blocks;
  std::vector<std::size_t> slot_member;
  std::vector<S> slot_weight;

  std::size_t slot_count() const { return slot_member.size(); }
};

template <class S>
SceneBatch<S> make_batch(const CorrespondenceSet& corr, const DeformationGraph& graph, const LocalConsistency& lc) {
  if (graph.point_to_nodes.size() != corr.size()) fail_validation("make_batch: graph does not match correspondences");
  if (lc.theta.size() != graph.node_count()) fail_validation("make_batch: consistency does not match graph");
  SceneBatch<S> b;
  b.correspondence_count = corr.size();
  b.encoded = encode_input(corr).cast<S>();
  for (std::size_t j = 0; j < graph.node_count(); ++j) {
    const auto& members = graph.node_to_members[j];
    if (members.empty()) continue;  // ignored, as is any node without members
    typename SceneBatch<S>::NodeBlock block{j, b.slot_member.size(), members.size(), lc.theta[j].cast<S>()};
    for (std::size_t i : members) {
      double w = -1.0;
      for (const auto& nw : graph.point_to_nodes[i]) {
        if (nw.node == j) w = nw.weight;
      }
      if (w < 0.0) fail_validation("make_batch: inconsistent node membership");
      b.slot_member.push_back(i);
      b.slot_weight.push_back(static_cast<S>(w));
    }
    b.node_blocks.push_back(std::move(block));
  }
  return b;
}

namespace nn {

template <class S>
inline constexpr S kNormEps = S(1e-5);

template <class S>
void linear_forward(const Linear<S>& l, const Matrix<S>& x, Matrix<S>& y) {
  y.noalias() = x * l.weight;
  if (l.bias.size() > 0) y.rowwise() += l.bias;
}

/// Accumulates parameter gradients into `g`; writes the input gradient when
/// `dx` is non-null.
template <class S>
void linear_backward(const Linear<S>& l, const Matrix<S>& x, const Matrix<S>& dy, Linear<S>& g, Matrix<S>* dx) {
  g.weight.noalias() += x.transpose() * dy;
  if (l.bias.size() > 0) g.bias += dy.colwise().sum();
  if (dx) dx->noalias() = dy * l.weight.transpose();
}

template <class S>
struct NormCache {
  Matrix<S> normalized;
  std::vector<S> inv_std;
};

/// Group normalization with statistics pooled over all rows and the channels
/// of a group (rows play the role of the points axis).
template <class S>
void group_norm_forward(const Matrix<S>& x, const Affine<S>& a, std::size_t groups, NormCache<S>& c, Matrix<S>& y) {
  const Eigen::Index cg = x.cols() / static_cast<Eigen::Index>(groups);
  const S count = static_cast<S>(x.rows() * cg);
  c.normalized.resize(x.rows(), x.cols());
  c.inv_std.assign(groups, S(0));
  for (std::size_t g = 0; g < groups; ++g) {
    const auto block = x.middleCols(static_cast<Eigen::Index>(g) * cg, cg);
    const S mean = block.sum() / count;
    const S var = (block.array() - mean).square().sum() / count;
    const S inv = S(1) / std::sqrt(var + kNormEps<S>);
    c.inv_std[g] = inv;
    c.normalized.middleCols(static_cast<Eigen::Index>(g) * cg, cg) = (block.array() - mean) * inv;
  }
  y = (c.normalized.array().rowwise() * a.gamma.array()).rowwise() + a.beta.array();
}

template <class S>
void group_norm_backward(const NormCache<S>& c, const Affine<S>& a, std::size_t groups, const Matrix<S>& dy,
                         Affine<S>& g, Matrix<S>& dx) {
  g.gamma += (dy.array() * c.normalized.array()).colwise().sum().matrix();
  g.beta += dy.colwise().sum();
  const Matrix<S> dn = (dy.array().rowwise() * a.gamma.array()).matrix();
  const Eigen::Index cg = dy.cols() / static_cast<Eigen::Index>(groups);
  const S count = static_cast<S>(dy.rows() * cg);
  dx.resize(dy.rows(), dy.cols());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(gi) * cg;
    const auto dnb = dn.middleCols(c0, cg).array();
    const auto nb = c.normalized.middleCols(c0, cg).array();
    const S sum_dn = dnb.sum();
    const S sum_dn_n = (dnb * nb).sum();
    dx.middleCols(c0, cg) = ((dnb * count - sum_dn - nb * sum_dn_n) * (c.inv_std[gi] / count)).matrix();
  }
}

/// Layer normalization over the columns of each row.
template <class S>
void layer_norm_forward(const Matrix<S>& x, const Affine<S>& a, NormCache<S>& c, Matrix<S>& y) {
  const S count = static_cast<S>(x.cols());
  c.normalized.resize(x.rows(), x.cols());
  c.inv_std.resize(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).sum() / count;
    const S var = (x.row(r).array() - mean).square().sum() / count;
    const S inv = S(1) / std::sqrt(var + kNormEps<S>);
    c.inv_std[static_cast<std::size_t>(r)] = inv;
    c.normalized.row(r) = (x.row(r).array() - mean) * inv;
  }
  y = (c.normalized.array().rowwise() * a.gamma.array()).rowwise() + a.beta.array();
}

template <class S>
void layer_norm_backward(const NormCache<S>& c, const Affine<S>& a, const Matrix<S>& dy, Affine<S>& g, Matrix<S>& dx) {
  g.gamma += (dy.array() * c.normalized.array()).colwise().sum().matrix();
  g.beta += dy.colwise().sum();
  const Matrix<S> dn = (dy.array().rowwise() * a.gamma.array()).matrix();
  const S count = static_cast<S>(dy.cols());
  dx.resize(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const auto dnr = dn.row(r).array();
    const auto nr = c.normalized.row(r).array();
    const S sum_dn = dnr.sum();
    const S sum_dn_n = (dnr * nr).sum();
    dx.row(r) = ((dnr * count - sum_dn - nr * sum_dn_n) * (c.inv_std[static_cast<std::size_t>(r)] / count)).matrix();
  }
}

template <class S>
Matrix<S> leaky_relu(const Matrix<S>& x, S slope) {
  return x.unaryExpr([slope](S v) { return v > S(0) ? v : slope * v; });
}

/// dx = dy * f'(x) with f'(0) taken as the negative slope.
template <class S>
Matrix<S> leaky_relu_backward(const Matrix<S>& x, const Matrix<S>& dy, S slope) {
  return x.binaryExpr(dy, [slope](S v, S g) { return v > S(0) ? g : slope * g; });
}

/// Linear -> GroupNorm -> LeakyReLU.
template <class S>
struct DenseCache {
  Matrix<S> input;
  NormCache<S> norm;
  Matrix<S> normed;  // pre-activation
};

template <class S>
void dense_forward(const Linear<S>& l, const Affine<S>& a, const Architecture& arch, const Matrix<S>& x,
                   DenseCache<S>& c, Matrix<S>& y) {
  c.input = x;
  Matrix<S> pre;
  linear_forward(l, x, pre);
  group_norm_forward(pre, a, arch.norm_groups, c.norm, c.normed);
  y = leaky_relu(c.normed, static_cast<S>(arch.leaky_slope));
}

template <class S>
void dense_backward(const Linear<S>& l, const Affine<S>& a, const Architecture& arch, const DenseCache<S>& c,
                    const Matrix<S>& dy, Linear<S>& gl, Affine<S>& ga, Matrix<S>* dx) {
  const Matrix<S> dnormed = leaky_relu_backward(c.normed, dy, static_cast<S>(arch.leaky_slope));
  Matrix<S> dpre;
  group_norm_backward(c.norm, a, arch.norm_groups, dnormed, ga, dpre);
  linear_backward(l, c.input, dpre, gl, dx);
}

/// Row-wise softmax of theta .* logits, with logits = Q K^T / sqrt(d).
/// Theta scales the logits; a zero entry gives logit 0, not a mask.
template <class S>
Matrix<S> consistency_attention_weights(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& theta, S inv_sqrt_d) {
  Matrix<S> logits = ((q * k.transpose()).array() * theta.array() * inv_sqrt_d).matrix();
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const S mx = logits.row(r).maxCoeff();
    logits.row(r) = (logits.row(r).array() - mx).exp();
    logits.row(r) /= logits.row(r).sum();
  }
  return logits;
}

template <class S>
struct UnitCache {
  Matrix<S> x;
  Matrix<S> q;
  Matrix<S> k;
  Matrix<S> v;
  std::vector<Matrix<S>> attention;  // one per node block
  Matrix<S> attended;                // attention-weighted values
  NormCache<S> norm1;
  Matrix<S> z1;
  Matrix<S> hidden_pre;
  Matrix<S> hidden;
  NormCache<S> norm2;
};

/// One attention unit applied to every node block of the slot matrix `x`:
///   Z' = LN(X + Linear(softmax(theta .* QK^T/sqrt(d)) V))
///   Z  = LN(Z' + FF(Z'))
template <class S>
void unit_forward(const AttentionUnit<S>& u, const SceneBatch<S>& batch, const Architecture& arch,
                  const Matrix<S>& x, UnitCache<S>& c, Matrix<S>& z) {
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(x.cols()));
  c.x = x;
  c.q.noalias() = x * u.w_query;
  c.k.noalias() = x * u.w_key;
  c.v.noalias() = x * u.w_value;
  c.attended.resize(x.rows(), x.cols());
  c.attention.resize(batch.node_blocks.size());
  for (std::size_t b = 0; b < batch.node_blocks.size(); ++b) {
    const auto& nb = batch.node_blocks[b];
    const auto r0 = static_cast<Eigen::Index>(nb.begin);
    const auto m = static_cast<Eigen::Index>(nb.count);
    c.attention[b] = consistency_attention_weights<S>(c.q.middleRows(r0, m), c.k.middleRows(r0, m), nb.theta, inv_sqrt_d);
    c.attended.middleRows(r0, m).noalias() = c.attention[b] * c.v.middleRows(r0, m);
  }
  Matrix<S> y1;
  linear_forward(u.out, c.attended, y1);
  y1 += x;
  layer_norm_forward(y1, u.norm1, c.norm1, c.z1);
  linear_forward(u.ff1, c.z1, c.hidden_pre);
  c.hidden = leaky_relu(c.hidden_pre, static_cast<S>(arch.leaky_slope));
  Matrix<S> y2;
  linear_forward(u.ff2, c.hidden, y2);
  y2 += c.z1;
  layer_norm_forward(y2, u.norm2, c.norm2, z);
}

template <class S>
void unit_backward(const AttentionUnit<S>& u, const SceneBatch<S>& batch, const Architecture& arch,
                   const UnitCache<S>& c, const Matrix<S>& dz, AttentionUnit<S>& g, Matrix<S>& dx) {
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(c.x.cols()));
  const S slope = static_cast<S>(arch.leaky_slope);

  Matrix<S> dy2;
  layer_norm_backward(c.norm2, u.norm2, dz, g.norm2, dy2);
  Matrix<S> dhidden;
  linear_backward(u.ff2, c.hidden, dy2, g.ff2, &dhidden);
  const Matrix<S> dhidden_pre = leaky_relu_backward(c.hidden_pre, dhidden, slope);
  Matrix<S> dz1;
  linear_backward(u.ff1, c.z1, dhidden_pre, g.ff1, &dz1);
  dz1 += dy2;

  Matrix<S> dy1;
  layer_norm_backward(c.norm1, u.norm1, dz1, g.norm1, dy1);
  Matrix<S> dattended;
  linear_backward(u.out, c.attended, dy1, g.out, &dattended);

  Matrix<S> dq(c.q.rows(), c.q.cols());
  Matrix<S> dk(c.k.rows(), c.k.cols());
  Matrix<S> dv(c.v.rows(), c.v.cols());
  for (std::size_t b = 0; b < batch.node_blocks.size(); ++b) {
    const auto& nb = batch.node_blocks[b];
    const auto r0 = static_cast<Eigen::Index>(nb.begin);
    const auto m = static_cast<Eigen::Index>(nb.count);
    const Matrix<S>& a = c.attention[b];
    const Matrix<S> dout = dattended.middleRows(r0, m);
    const Matrix<S> da = dout * c.v.middleRows(r0, m).transpose();
    dv.middleRows(r0, m).noalias() = a.transpose() * dout;
    const auto row_dot = (da.array() * a.array()).rowwise().sum();
    Matrix<S> dlogits = (a.array() * (da.array().colwise() - row_dot)).matrix();
    dlogits = (dlogits.array() * nb.theta.array() * inv_sqrt_d).matrix();
    dq.middleRows(r0, m).noalias() = dlogits * c.k.middleRows(r0, m);
    dk.middleRows(r0, m).noalias() = dlogits.transpose() * c.q.middleRows(r0, m);
  }
  g.w_query.noalias() += c.x.transpose() * dq;
  g.w_key.noalias() += c.x.transpose() * dk;
  g.w_value.noalias() += c.x.transpose() * dv;
  dx = dy1;
  dx.noalias() += dq * u.w_query.transpose();
  dx.noalias() += dk * u.w_key.transpose();
  dx.noalias() += dv * u.w_value.transpose();
}

/// h_i = sum over the nodes of correspondence i of alpha_ij * z_i^j, reduced in
/// ascending node order.
template <class S>
Matrix<S> aggregate_slots(const SceneBatch<S>& batch, const Matrix<S>& z) {
  Matrix<S> h = Matrix<S>::Zero(static_cast<Eigen::Index>(batch.correspondence_count), z.cols());
  for (std::size_t s = 0; s < batch.slot_count(); ++s) {
    h.row(static_cast<Eigen::Index>(batch.slot_member[s])) += batch.slot_weight[s] * z.row(static_cast<Eigen::Index>(s));
  }
  return h;
}

template <class S>
Matrix<S> gather_slots(const SceneBatch<S>& batch, const Matrix<S>& f) {
  Matrix<S> x(static_cast<Eigen::Index>(batch.slot_count()), f.cols());
  for (std::size_t s = 0; s < batch.slot_count(); ++s) {
    x.row(static_cast<Eigen::Index>(s)) = f.row(static_cast<Eigen::Index>(batch.slot_member[s]));
  }
  return x;
}

}  // namespace nn

template <class S>
struct ForwardCache {
  std::vector<nn::DenseCache<S>> init;
  std::vector<std::vector<nn::UnitCache<S>>> blocks;
  std::vector<nn::DenseCache<S>> head;
  Matrix<S> head_last_input;
};

template <class S>
struct ForwardResult {
  Matrix<S> features;          // aggregated output of the last block, N x d
  std::vector<double> logits;  // pre-sigmoid head output
  std::vector<double> scores;  // sigmoid(logits)
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Full forward pass. `cache` may be null when no backward pass follows.
template <class S>
ForwardResult<S> forward(const ScNetModel<S>& model, const SceneBatch<S>& batch, std::type_identity_t<ForwardCache<S>>* cache = nullptr) {
  ForwardCache<S> local;
  ForwardCache<S>& c = cache ? *cache : local;
  const Architecture& arch = model.arch;

  c.init.resize(model.init_layers.size());
  Matrix<S> f = batch.encoded;
  for (std::size_t i = 0; i < model.init_layers.size(); ++i) {
    Matrix<S> out;
    nn::dense_forward(model.init_layers[i], model.init_norms[i], arch, f, c.init[i], out);
    f = std::move(out);
  }

  c.blocks.resize(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    c.blocks[b].resize(model.blocks[b].size());
    Matrix<S> x = nn::gather_slots(batch, f);
    for (std::size_t k = 0; k < model.blocks[b].size(); ++k) {
      Matrix<S> z;
      nn::unit_forward(model.blocks[b][k], batch, arch, x, c.blocks[b][k], z);
      x = std::move(z);
    }
    f = nn::aggregate_slots(batch, x);
  }

  ForwardResult<S> out;
  out.features = f;
  c.head.resize(model.head_norms.size());
  Matrix<S> h = f;
  for (std::size_t i = 0; i < model.head_norms.size(); ++i) {
    Matrix<S> y;
    nn::dense_forward(model.head_layers[i], model.head_norms[i], arch, h, c.head[i], y);
    h = std::move(y);
  }
  c.head_last_input = h;
  Matrix<S> logit;
  nn::linear_forward(model.head_layers.back(), h, logit);
  out.logits.resize(batch.correspondence_count);
  out.scores.resize(batch.correspondence_count);
  for (std::size_t i = 0; i < batch.correspondence_count; ++i) {
    out.logits[i] = static_cast<double>(logit(static_cast<Eigen::Index>(i), 0));
    out.scores[i] = sigmoid(out.logits[i]);
  }
  return out;
}

/// Reverse pass. `dlogits` is dL/dlogit per correspondence and `dfeatures`
/// (possibly empty) is a direct gradient on the aggregated features.
/// Parameter gradients are accumulated into `grad`.
template <class S>
void backward(const ScNetModel<S>& model, const SceneBatch<S>& batch, const ForwardCache<S>& c,
              const std::vector<double>& dlogits, const Matrix<S>& dfeatures, ScNetModel<S>& grad) {
  const Architecture& arch = model.arch;
  Matrix<S> dy(static_cast<Eigen::Index>(batch.correspondence_count), 1);
  for (std::size_t i = 0; i < batch.correspondence_count; ++i) dy(static_cast<Eigen::Index>(i), 0) = static_cast<S>(dlogits[i]);

  Matrix<S> dh;
  nn::linear_backward(model.head_layers.back(), c.head_last_input, dy, grad.head_layers.back(), &dh);
  for (std::size_t i = model.head_norms.size(); i-- > 0;) {
    Matrix<S> dx;
    nn::dense_backward(model.head_layers[i], model.head_norms[i], arch, c.head[i], dh, grad.head_layers[i],
                       grad.head_norms[i], &dx);
    dh = std::move(dx);
  }
  if (dfeatures.size() > 0) dh += dfeatures;

  for (std::size_t b = model.blocks.size(); b-- > 0;) {
    const auto slots = static_cast<Eigen::Index>(batch.slot_count());
    Matrix<S> dz(slots, dh.cols());
    for (std::size_t s = 0; s < batch.slot_count(); ++s) {
      dz.row(static_cast<Eigen::Index>(s)) = batch.slot_weight[s] * dh.row(static_cast<Eigen::Index>(batch.slot_member[s]));
    }
    for (std::size_t k = model.blocks[b].size(); k-- > 0;) {
      Matrix<S> dx;
      nn::unit_backward(model.blocks[b][k], batch, arch, c.blocks[b][k], dz, grad.blocks[b][k], dx);
      dz = std::move(dx);
    }
    Matrix<S> df = Matrix<S>::Zero(dh.rows(), dh.cols());
    for (std::size_t s = 0; s < batch.slot_count(); ++s) {
      df.row(static_cast<Eigen::Index>(batch.slot_member[s])) += dz.row(static_cast<Eigen::Index>(s));
    }
    dh = std::move(df);
  }

  for (std::size_t i = model.init_layers.size(); i-- > 0;) {
    Matrix<S> dx;
    nn::dense_backward(model.init_layers[i], model.init_norms[i], arch, c.init[i], dh, grad.init_layers[i],
                       grad.init_norms[i], i > 0 ? &dx : nullptr);
    dh = std::move(dx);
  }
}

/// Indices with score > tau_s. When none pass, the top max(8, 5% of N)
/// scores are kept instead (capped at N), ties broken by lower index.
inline std::vector<std::size_t> classify(std::span<const double> scores, double tau_s) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > tau_s) keep.push_back(i);
  }
  if (!keep.empty() || scores.empty()) return keep;
  const auto five_percent = static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(scores.size())));
  const std::size_t n = std::min(scores.size(), std::max<std::size_t>(8, five_percent));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  keep.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(keep.begin(), keep.end());
  return keep;
}

}  // namespace graphsc
