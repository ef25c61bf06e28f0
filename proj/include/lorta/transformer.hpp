#pragma once

// Desk-scale transformer following the layer equations
//
//   Attn(X) = X + sum_h softmax(X Q_h K_h^T X^T / sqrt(d)) X V_h P_h^T
//   Y       = LayerNorm(X + Attn(X))
//   X'      = LayerNorm(Y + MLP(Y))
//   MLP(X)  = ReLU(X G1^T + 1 b1^T) G2^T + 1 b2^T
//
// with per-head Q_h, K_h, V_h, P_h of shape d x d_H. Note the residual appears
// both inside Attn and in Y, and the softmax temperature is sqrt(d). There is
// no positional encoding and no causal mask.
//
// Adapters are injected as a side path: X W~ is computed as X W + X dW, so a
// zero update leaves every intermediate bit-identical.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "lorta/adapters.hpp"
#include "lorta/config.hpp"
#include "lorta/error.hpp"
#include "lorta/rng.hpp"
#include "lorta/tensor.hpp"

namespace lorta {

struct LayerWeights {
  std::array<std::vector<Matrix>, 4> attn;  // [WeightKind][head], d x d_H
  Matrix g1;                                // hidden x d
  Vector b1;                                // hidden
  Matrix g2;                                // d x hidden
  Vector b2;                                // d
  Vector ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  const Matrix& weight(WeightKind k, std::size_t h) const {
    return attn[static_cast<std::size_t>(k)][h];
  }
  Matrix& weight(WeightKind k, std::size_t h) {
    return attn[static_cast<std::size_t>(k)][h];
  }

  bool operator==(const LayerWeights& o) const {
    for (std::size_t k = 0; k < 4; ++k) {
      if (attn[k].size() != o.attn[k].size()) return false;
      for (std::size_t h = 0; h < attn[k].size(); ++h) {
        if (attn[k][h] != o.attn[k][h]) return false;
      }
    }
    return g1 == o.g1 && b1 == o.b1 && g2 == o.g2 && b2 == o.b2 &&
           ln1_gain == o.ln1_gain && ln1_bias == o.ln1_bias &&
           ln2_gain == o.ln2_gain && ln2_bias == o.ln2_bias;
  }
};

struct TransformerWeights {
  ModelConfig config;
  std::vector<LayerWeights> layers;

  bool operator==(const TransformerWeights& o) const {
    return config.adapter_compatible(o.config) && layers == o.layers;
  }

  bool all_finite() const {
    for (const auto& lw : layers) {
      for (const auto& kind : lw.attn)
        for (const auto& w : kind)
          if (!w.allFinite()) return false;
      if (!lw.g1.allFinite() || !lw.b1.allFinite() || !lw.g2.allFinite() ||
          !lw.b2.allFinite() || !lw.ln1_gain.allFinite() ||
          !lw.ln1_bias.allFinite() || !lw.ln2_gain.allFinite() ||
          !lw.ln2_bias.allFinite())
        return false;
    }
    return true;
  }
};

// Zero-filled weights of the right shapes; layer norms are identity maps.
inline TransformerWeights zero_weights(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const auto hid = static_cast<Eigen::Index>(cfg.mlp_hidden());
  TransformerWeights w{cfg, {}};
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights lw;
    for (auto& kind : lw.attn) kind.assign(cfg.heads, Matrix::Zero(d, dh));
    lw.g1 = Matrix::Zero(hid, d);
    lw.b1 = Vector::Zero(hid);
    lw.g2 = Matrix::Zero(d, hid);
    lw.b2 = Vector::Zero(d);
    lw.ln1_gain = lw.ln2_gain = Vector::Ones(d);
    lw.ln1_bias = lw.ln2_bias = Vector::Zero(d);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

inline TransformerWeights random_weights(const ModelConfig& cfg,
                                         std::uint64_t seed) {
  TransformerWeights w = zero_weights(cfg);
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden()));
  auto fill = [&](auto& m, double lo, double hi) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(lo, hi);
  };
  for (auto& lw : w.layers) {
    for (auto& kind : lw.attn)
      for (auto& m : kind) fill(m, -sd, sd);
    fill(lw.g1, -sd, sd);
    fill(lw.b1, -0.1, 0.1);
    fill(lw.g2, -sh, sh);
    fill(lw.b2, -0.1, 0.1);
    fill(lw.ln1_gain, 0.9, 1.1);
    fill(lw.ln1_bias, -0.1, 0.1);
    fill(lw.ln2_gain, 0.9, 1.1);
    fill(lw.ln2_bias, -0.1, 0.1);
  }
  return w;
}

inline Matrix random_input(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return rng.uniform_matrix(static_cast<Eigen::Index>(cfg.seq_len),
                            static_cast<Eigen::Index>(cfg.d), -1.0, 1.0);
}

// Row-wise, max-shifted softmax.
inline Matrix softmax_rows(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    out.row(i) = (s.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

struct LayerNormCache {
  Matrix normalized;  // (z - mean) * rstd, before gain/bias
  Vector rstd;
};

inline Matrix layer_norm_rows(const Matrix& z, const Vector& gain,
                              const Vector& bias, double eps,
                              LayerNormCache* cache = nullptr) {
  const auto n = z.rows();
  const double inv_d = 1.0 / static_cast<double>(z.cols());
  Matrix hat(n, z.cols());
  Vector rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = z.row(i).sum() * inv_d;
    const Eigen::RowVectorXd c = z.row(i).array() - mean;
    const double var = c.squaredNorm() * inv_d;
    rstd(i) = 1.0 / std::sqrt(var + eps);
    hat.row(i) = c * rstd(i);
  }
  Matrix out = hat * gain.asDiagonal();
  out.rowwise() += bias.transpose();
  if (cache) *cache = {std::move(hat), std::move(rstd)};
  return out;
}

struct HeadTrace {
  Matrix qx, kx, ux;  // X Q~, X K~, X V~ (N x d_H)
  Matrix probs;       // softmax(qx kx^T / sqrt(d)), N x N
  Matrix mixed;       // probs * ux, N x d_H
};

struct LayerTrace {
  Matrix input;                 // X^(l), N x d
  std::vector<HeadTrace> heads;
  Matrix attn;                  // Attn(X), N x d
  LayerNormCache ln1;
  Matrix y;                     // Y^(l)
  Matrix mlp_pre;               // Y G1^T + 1 b1^T
  LayerNormCache ln2;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  std::vector<Matrix> updates;  // scaled adapter updates (m * L + l), or empty
};

struct ForwardResult {
  Matrix output;
  ForwardTrace trace;
};

namespace detail {

inline void require_finite_stage(const Matrix& m, std::size_t layer,
                                 const char* stage) {
  if (!m.allFinite()) {
    throw NumericError("forward: non-finite values in layer " +
                       std::to_string(layer) + " (" + stage + ")");
  }
}

}  // namespace detail

// Effective head weight: base plus the adapter update if that kind is tuned.
inline std::optional<Matrix> head_delta(const ModelConfig& cfg,
                                        const std::vector<Matrix>& updates,
                                        WeightKind kind, std::size_t l,
                                        std::size_t h) {
  if (updates.empty()) return std::nullopt;
  const auto m = finetuned_index(cfg.matrices, kind);
  if (!m) return std::nullopt;
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  return updates[*m * cfg.layers + l].middleCols(static_cast<Eigen::Index>(h) * dh,
                                                 dh);
}

inline void check_adapter_fits(const ModelConfig& cfg, const AdapterState& st) {
  if (!cfg.adapter_compatible(st.config)) {
    throw ShapeError("adapter config (d, H, L, M) does not match the model");
  }
}

inline ForwardResult forward(const TransformerWeights& w,
                             const AdapterState* adapter, const Matrix& x) {
  const ModelConfig& cfg = w.config;
  const auto d = static_cast<Eigen::Index>(cfg.d);
  if (x.cols() != d || x.rows() < 1) {
    throw ShapeError("forward: input must be N x " + std::to_string(cfg.d) +
                     ", got " + std::to_string(x.rows()) + " x " +
                     std::to_string(x.cols()));
  }
  if (!x.allFinite()) throw NumericError("forward: non-finite input");
  if (w.layers.size() != cfg.layers) {
    throw ShapeError("forward: weights hold " + std::to_string(w.layers.size()) +
                     " layers, config says " + std::to_string(cfg.layers));
  }

  ForwardResult res;
  if (adapter) {
    check_adapter_fits(cfg, *adapter);
    res.trace.updates = layer_updates(*adapter);
  }
  const auto& updates = res.trace.updates;
  const double inv_temp = 1.0 / std::sqrt(static_cast<double>(cfg.d));

  Matrix cur = x;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerTrace lt;
    lt.input = cur;
    Matrix attn = cur;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      HeadTrace ht;
      auto project = [&](WeightKind k) {
        Matrix p = cur * lw.weight(k, h);
        if (auto dw = head_delta(cfg, updates, k, l, h)) p += cur * *dw;
        return p;
      };
      ht.qx = project(WeightKind::kQuery);
      ht.kx = project(WeightKind::kKey);
      ht.ux = project(WeightKind::kValue);
      ht.probs = softmax_rows(inv_temp * ht.qx * ht.kx.transpose());
      ht.mixed = ht.probs * ht.ux;
      attn += ht.mixed * lw.weight(WeightKind::kProj, h).transpose();
      if (auto dp = head_delta(cfg, updates, WeightKind::kProj, l, h)) {
        attn += ht.mixed * dp->transpose();
      }
      lt.heads.push_back(std::move(ht));
    }
    detail::require_finite_stage(attn, l, "attention");
    lt.attn = attn;
    lt.y = layer_norm_rows(cur + attn, lw.ln1_gain, lw.ln1_bias,
                           cfg.layer_norm_eps, &lt.ln1);
    lt.mlp_pre = lt.y * lw.g1.transpose();
    lt.mlp_pre.rowwise() += lw.b1.transpose();
    Matrix mlp = lt.mlp_pre.cwiseMax(0.0) * lw.g2.transpose();
    mlp.rowwise() += lw.b2.transpose();
    detail::require_finite_stage(mlp, l, "mlp");
    cur = layer_norm_rows(lt.y + mlp, lw.ln2_gain, lw.ln2_bias,
                          cfg.layer_norm_eps, &lt.ln2);
    detail::require_finite_stage(cur, l, "output");
    res.trace.layers.push_back(std::move(lt));
  }
  res.output = std::move(cur);
  return res;
}

inline Matrix forward_output(const TransformerWeights& w,
                             const AdapterState* adapter, const Matrix& x) {
  return forward(w, adapter, x).output;
}

// Adds (sign = +1) or subtracts (sign = -1) the adapter's materialized
// updates to the fine-tuned base weights.
inline TransformerWeights apply_updates(const TransformerWeights& w,
                                        const AdapterState& st, double sign) {
  check_adapter_fits(w.config, st);
  const ModelConfig& cfg = w.config;
  const auto updates = layer_updates(st);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  TransformerWeights out = w;
  for (std::size_t m = 0; m < cfg.matrices; ++m) {
    const WeightKind kind = finetuned_kind(cfg.matrices, m);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const Matrix& u = updates[m * cfg.layers + l];
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        out.layers[l].weight(kind, h) +=
            sign * u.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      }
    }
  }
  return out;
}

inline TransformerWeights merge(const TransformerWeights& w,
                                const AdapterState& st) {
  return apply_updates(w, st, 1.0);
}

inline TransformerWeights unmerge(const TransformerWeights& w,
                                  const AdapterState& st) {
  return apply_updates(w, st, -1.0);
}

}  // namespace lorta
