#pragma once

// Reverse-mode gradients of a scalar loss with respect to adapter factors
// only. Base weights are frozen: the backward pass produces dLoss/dW~ for
// every fine-tuned head weight, which the adapter's update_vjp maps back to
// its trainable factors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lorta/adapters.hpp"
#include "lorta/error.hpp"
#include "lorta/rng.hpp"
#include "lorta/transformer.hpp"

namespace lorta {

enum class LossKind { kMseRegression, kTeacherMatch };

struct LossSpec {
  LossKind kind = LossKind::kTeacherMatch;
  std::uint64_t target_seed = 0;
  std::size_t batch_size = 4;
  std::size_t steps = 100;
};

struct Batch {
  std::vector<Matrix> inputs;   // each N x d
  std::vector<Matrix> targets;  // each N x d
};

// Random inputs; targets are random (regression) or the teacher's outputs.
inline Batch make_batch(const ModelConfig& cfg, const LossSpec& spec,
                        const TransformerWeights* teacher = nullptr) {
  if (spec.batch_size < 1) throw ConfigError("LossSpec: batch_size must be >= 1");
  if (spec.kind == LossKind::kTeacherMatch && !teacher) {
    throw ConfigError("teacher_match loss needs teacher weights");
  }
  Batch b;
  for (std::size_t i = 0; i < spec.batch_size; ++i) {
    b.inputs.push_back(random_input(cfg, derive_seed(spec.target_seed, 2 * i)));
    if (spec.kind == LossKind::kTeacherMatch) {
      b.targets.push_back(forward_output(*teacher, nullptr, b.inputs.back()));
    } else {
      b.targets.push_back(
          random_input(cfg, derive_seed(spec.target_seed, 2 * i + 1)));
    }
  }
  return b;
}

// Teacher = base with a seeded random adapter of the given spec merged in,
// so the target is exactly representable by that adapter family. A positive
// `update_norm` rescales one factor so the stacked updates have that total
// Frobenius norm (every method is linear in each factor).
inline TransformerWeights make_teacher(const TransformerWeights& base,
                                       const AdapterSpec& spec,
                                       double update_norm = 0.0) {
  AdapterState st = make_adapter(spec, base.config, Init::kRandom);
  if (update_norm > 0.0) {
    double sq = 0.0;
    for (const auto& u : layer_updates(st)) sq += u.squaredNorm();
    if (sq == 0.0) throw NumericError("make_teacher: teacher update is zero");
    st.trainable.front().value *= update_norm / std::sqrt(sq);
  }
  return merge(base, st);
}

// Base model, teacher and batch for a teacher-match run, all derived from
// one seed.
struct TeacherTask {
  TransformerWeights base;
  TransformerWeights teacher;
  Batch batch;
};

inline TeacherTask make_teacher_task(const ModelConfig& cfg,
                                     AdapterSpec teacher_spec,
                                     std::uint64_t seed,
                                     std::size_t batch_size = 4,
                                     double update_norm = 4.0) {
  TeacherTask t{random_weights(cfg, seed), {}, {}};
  teacher_spec.seed = derive_seed(seed, 100);
  t.teacher = make_teacher(t.base, teacher_spec, update_norm);
  LossSpec ls;
  ls.kind = LossKind::kTeacherMatch;
  ls.target_seed = derive_seed(seed, 200);
  ls.batch_size = batch_size;
  t.batch = make_batch(cfg, ls, &t.teacher);
  return t;
}

namespace detail {

inline Matrix layer_norm_backward(const Matrix& dout, const LayerNormCache& c,
                                  const Vector& gain) {
  const Matrix dhat = dout * gain.asDiagonal();
  const double inv_d = 1.0 / static_cast<double>(dout.cols());
  Matrix dz(dout.rows(), dout.cols());
  for (Eigen::Index i = 0; i < dout.rows(); ++i) {
    const double mean_dhat = dhat.row(i).sum() * inv_d;
    const double mean_dhat_hat = dhat.row(i).dot(c.normalized.row(i)) * inv_d;
    dz.row(i) = c.rstd(i) * (dhat.row(i).array() - mean_dhat -
                             c.normalized.row(i).array() * mean_dhat_hat)
                                .matrix();
  }
  return dz;
}

}  // namespace detail

// Gradient of the loss w.r.t. every scaled layer update (m * L + l), given
// dLoss/dOutput for one forward pass. Accumulates into `grads`.
inline void backward_updates(const TransformerWeights& w,
                             const ForwardTrace& trace, const Matrix& dout,
                             std::vector<Matrix>& grads) {
  const ModelConfig& cfg = w.config;
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double inv_temp = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  if (grads.size() != cfg.matrices * cfg.layers) {
    grads.assign(cfg.matrices * cfg.layers, Matrix::Zero(d, d));
  }

  auto effective = [&](WeightKind k, std::size_t l, std::size_t h) {
    Matrix m = w.layers[l].weight(k, h);
    if (auto dw = head_delta(cfg, trace.updates, k, l, h)) m += *dw;
    return m;
  };
  auto accumulate = [&](WeightKind k, std::size_t l, std::size_t h,
                        const Matrix& g) {
    if (auto m = finetuned_index(cfg.matrices, k)) {
      grads[*m * cfg.layers + l].middleCols(static_cast<Eigen::Index>(h) * dh,
                                            dh) += g;
    }
  };

  Matrix dcur = dout;
  for (std::size_t l = cfg.layers; l-- > 0;) {
    const LayerWeights& lw = w.layers[l];
    const LayerTrace& lt = trace.layers[l];
    const Matrix& x = lt.input;

    const Matrix dz2 = detail::layer_norm_backward(dcur, lt.ln2, lw.ln2_gain);
    const Matrix drelu = dz2 * lw.g2;
    const Matrix dpre =
        drelu.cwiseProduct((lt.mlp_pre.array() > 0.0).cast<double>().matrix());
    const Matrix dy = dz2 + dpre * lw.g1;

    const Matrix dz1 = detail::layer_norm_backward(dy, lt.ln1, lw.ln1_gain);
    Matrix dx = 2.0 * dz1;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const HeadTrace& ht = lt.heads[h];
      const Matrix q = effective(WeightKind::kQuery, l, h);
      const Matrix k = effective(WeightKind::kKey, l, h);
      const Matrix v = effective(WeightKind::kValue, l, h);
      const Matrix p = effective(WeightKind::kProj, l, h);

      const Matrix dmixed = dz1 * p;
      accumulate(WeightKind::kProj, l, h, dz1.transpose() * ht.mixed);

      const Matrix dprobs = dmixed * ht.ux.transpose();
      const Matrix dux = ht.probs.transpose() * dmixed;
      accumulate(WeightKind::kValue, l, h, x.transpose() * dux);
      dx += dux * v.transpose();

      const Vector rowdot = dprobs.cwiseProduct(ht.probs).rowwise().sum();
      Matrix dscore = ht.probs.cwiseProduct(dprobs.colwise() - rowdot);
      dscore *= inv_temp;
      const Matrix dqx = dscore * ht.kx;
      const Matrix dkx = dscore.transpose() * ht.qx;
      accumulate(WeightKind::kQuery, l, h, x.transpose() * dqx);
      accumulate(WeightKind::kKey, l, h, x.transpose() * dkx);
      dx += dqx * q.transpose() + dkx * k.transpose();
    }
    dcur = std::move(dx);
  }
}

struct LossAndGrads {
  double loss = 0.0;
  FactorList grads;  // same names/shapes as the trainable factors
};

// Loss = mean over batch and positions of the squared error summed over
// features.
inline double batch_loss(const TransformerWeights& w, const AdapterState& st,
                         const Batch& batch) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    const Matrix y = forward_output(w, &st, batch.inputs[b]);
    total += (y - batch.targets[b]).squaredNorm();
    count += static_cast<std::size_t>(y.rows());
  }
  return total / static_cast<double>(count);
}

inline LossAndGrads loss_and_grads(const TransformerWeights& w,
                                   const AdapterState& st, const Batch& batch) {
  check_adapter_fits(w.config, st);
  if (batch.inputs.empty() || batch.inputs.size() != batch.targets.size()) {
    throw ShapeError("loss_and_grads: empty or ragged batch");
  }
  std::size_t count = 0;
  for (const auto& x : batch.inputs) count += static_cast<std::size_t>(x.rows());
  const double inv = 1.0 / static_cast<double>(count);

  LossAndGrads out;
  std::vector<Matrix> grads;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    ForwardResult fr = forward(w, &st, batch.inputs[b]);
    const Matrix diff = fr.output - batch.targets[b];
    const double l = diff.squaredNorm();
    if (!std::isfinite(l)) {
      throw NumericError("loss_and_grads: non-finite loss at batch index " +
                         std::to_string(b));
    }
    out.loss += l;
    backward_updates(w, fr.trace, 2.0 * inv * diff, grads);
  }
  out.loss /= static_cast<double>(count);
  out.grads = update_vjp(st, grads);
  return out;
}

struct FactorGradError {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradReport {
  std::vector<FactorGradError> factors;
  double step = 1e-5;
  double max_rel_error = 0.0;

  bool passed(double threshold = 1e-5) const {
    return max_rel_error < threshold;
  }
};

inline double grad_rel_error(double analytic, double numeric,
                             double floor = 1e-12) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Entries far below a factor's largest gradient are compared against this
// fraction of it; central differences cannot resolve them relative to their
// own size.
inline constexpr double kGradFloorFraction = 1e-3;

// Compares analytic gradients against central differences on every scalar
// of every trainable factor. `corrupt` perturbs the analytic gradient and
// exists as a negative control.
inline GradReport gradcheck(const TransformerWeights& w, const AdapterState& st,
                            const Batch& batch, double step = 1e-5,
                            bool corrupt = false) {
  LossAndGrads an = loss_and_grads(w, st, batch);
  if (corrupt) {
    for (auto& g : an.grads) {
      for (double& v : g.value.data()) v = v * 1.01 + 1e-3;
    }
  }
  GradReport rep;
  rep.step = step;
  AdapterState probe = st;
  for (std::size_t f = 0; f < probe.trainable.size(); ++f) {
    FactorGradError fe{probe.trainable[f].name, 0.0};
    auto data = probe.trainable[f].value.data();
    const auto ga = an.grads[f].value.data();
    double gmax = 0.0;
    for (double g : ga) gmax = std::max(gmax, std::abs(g));
    const double floor = std::max(1e-12, kGradFloorFraction * gmax);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double lp = batch_loss(w, probe, batch);
      data[i] = orig - step;
      const double lm = batch_loss(w, probe, batch);
      data[i] = orig;
      const double fd = (lp - lm) / (2.0 * step);
      fe.max_rel_error = std::max(fe.max_rel_error, grad_rel_error(ga[i], fd, floor));
    }
    rep.max_rel_error = std::max(rep.max_rel_error, fe.max_rel_error);
    rep.factors.push_back(std::move(fe));
  }
  return rep;
}

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.0;
  double divergence_threshold = 1e6;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

struct TrainResult {
  AdapterState state;
  std::vector<double> losses;  // loss before each step, then the final loss
  bool diverged = false;
};

// Full-batch SGD (optional heavy-ball momentum) on the trainable factors.
inline TrainResult train(const TransformerWeights& w, const AdapterState& st,
                         const Batch& batch, std::size_t steps,
                         const SgdOptions& opt) {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  TrainResult res{st, {}, false};
  FactorList velocity;
  for (const auto& f : st.trainable) {
    velocity.push_back({f.name, DenseTensor(f.value.shape(), 0.0)});
  }
  for (std::size_t s = 0; s < steps; ++s) {
    LossAndGrads lg;
    try {
      lg = loss_and_grads(w, res.state, batch);
    } catch (const NumericError&) {
      res.diverged = true;
      return res;
    }
    res.losses.push_back(lg.loss);
    if (lg.loss > opt.divergence_threshold) {
      res.diverged = true;
      return res;
    }
    double gscale = 1.0;
    if (opt.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& g : lg.grads) {
        for (double v : g.value.data()) sq += v * v;
      }
      const double norm = std::sqrt(sq);
      if (norm > opt.clip_norm) gscale = opt.clip_norm / norm;
    }
    for (std::size_t f = 0; f < res.state.trainable.size(); ++f) {
      auto p = res.state.trainable[f].value.data();
      auto v = velocity[f].value.data();
      const auto g = lg.grads[f].value.data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = opt.momentum * v[i] + gscale * g[i];
        p[i] -= opt.learning_rate * v[i];
      }
    }
  }
  try {
    const double final_loss = batch_loss(w, res.state, batch);
    res.losses.push_back(final_loss);
    if (!std::isfinite(final_loss) || final_loss > opt.divergence_threshold) {
      res.diverged = true;
    }
  } catch (const NumericError&) {
    res.diverged = true;
  }
  return res;
}

}  // namespace lorta
