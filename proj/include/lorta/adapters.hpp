#pragma once

// Low-rank adapter parameterizations of attention-weight updates.
//
// Every method produces, for each fine-tuned matrix type m and layer l, a
// d x d update whose column block [h*d_H, (h+1)*d_H) is the update of head h
// (heads are concatenated along columns). The materialized update is always
// scaled by alpha / r.
//
// Factor layouts (all DenseTensors are row-major):
//
//   lora        A (M, L, d, r), B (M, L, d, r)          U_ml = A_ml B_ml^T
//   lorta       A (d, r), B (d_H, r), C_H (H, r), C_L (L, r), C_M (M, r)
//               U[:, :, h, l, m] = A Diag(C_H[h] * C_L[l] * C_M[m]) B^T
//   lotr        A (M, d, r), B (M, d, r), G (M, L, r, r)
//               U_ml = A_m G_ml B_m^T                     (Tucker2 per type)
//   fact-tt     A (d, r), G (M, L, r, r), B (d, r)
//               U_ml = A G_ml B^T                         (tensor train)
//   fact-tk     U (d, r), V (d, r), C (M, L, r), core (r, r, r)
//               U_ml = U (sum_c C[m, l, c] core[:, :, c]) V^T  (Tucker3)
//   vera        frozen A (d, r), B (d, r); trainable C_D (L, r), C_B (L, d)
//               U_l = A Diag(C_D[l]) B^T Diag(C_B[l])     (shared over m)
//   nola        frozen A (d, r, k), B (d, r, k); trainable alpha (k, L),
//               beta (k, L)
//               U_l = sum_i sum_j alpha[i, l] beta[j, l] A_i B_j^T
//   loretta-rep A_core{t}, B_core{t} (M, L, r, k_t, r) for t < D
//               A_ml, B_ml are d x r matrices read row-major from the
//               k_1 x ... x k_D tensor T(i_1..i_D) = trace(prod_t G_t[:, i_t, :])
//               U_ml = A_ml B_ml^T
//
// The LoReTTA chains are closed with a trace so that every core has the
// r x k x r shape used by the closed-form parameter count.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lorta/config.hpp"
#include "lorta/cp.hpp"
#include "lorta/error.hpp"
#include "lorta/rng.hpp"
#include "lorta/tensor.hpp"

namespace lorta {

struct NamedTensor {
  std::string name;
  DenseTensor value;

  bool operator==(const NamedTensor&) const = default;
};

using FactorList = std::vector<NamedTensor>;

inline std::size_t scalar_count(const FactorList& factors) {
  std::size_t n = 0;
  for (const auto& f : factors) n += f.value.size();
  return n;
}

inline const DenseTensor& find_factor(const FactorList& factors,
                                      std::string_view name) {
  for (const auto& f : factors) {
    if (f.name == name) return f.value;
  }
  throw ShapeError("no factor named '" + std::string(name) + "'");
}

inline DenseTensor& find_factor(FactorList& factors, std::string_view name) {
  for (auto& f : factors) {
    if (f.name == name) return f.value;
  }
  throw ShapeError("no factor named '" + std::string(name) + "'");
}

using FactorLayout = std::vector<std::pair<std::string, Shape>>;

inline FactorLayout trainable_layout(const AdapterSpec& spec,
                                     const ModelConfig& cfg) {
  const std::size_t d = cfg.d, dh = cfg.head_dim(), H = cfg.heads,
                    L = cfg.layers, M = cfg.matrices, r = spec.rank;
  switch (spec.method) {
    case Method::kLoRA:
      return {{"A", {M, L, d, r}}, {"B", {M, L, d, r}}};
    case Method::kLoRTA:
      return {{"A", {d, r}},
              {"B", {dh, r}},
              {"C_H", {H, r}},
              {"C_L", {L, r}},
              {"C_M", {M, r}}};
    case Method::kLoTR:
      return {{"A", {M, d, r}}, {"B", {M, d, r}}, {"G", {M, L, r, r}}};
    case Method::kFacTTT:
      return {{"A", {d, r}}, {"G", {M, L, r, r}}, {"B", {d, r}}};
    case Method::kFacTTK:
      return {{"U", {d, r}}, {"V", {d, r}}, {"C", {M, L, r}}, {"core", {r, r, r}}};
    case Method::kVeRA:
      return {{"C_D", {L, r}}, {"C_B", {L, d}}};
    case Method::kNOLA:
      return {{"alpha", {spec.nola_k, L}}, {"beta", {spec.nola_k, L}}};
    case Method::kLoReTTA: {
      FactorLayout out;
      for (const char* side : {"A", "B"}) {
        for (std::size_t t = 0; t < spec.loretta_dims.size(); ++t) {
          out.push_back({std::string(side) + "_core" + std::to_string(t),
                         {M, L, r, spec.loretta_dims[t], r}});
        }
      }
      return out;
    }
  }
  throw ConfigError("trainable_layout: unknown method");
}

inline FactorLayout frozen_layout(const AdapterSpec& spec,
                                  const ModelConfig& cfg) {
  const std::size_t d = cfg.d, r = spec.rank;
  switch (spec.method) {
    case Method::kVeRA:
      return {{"A", {d, r}}, {"B", {d, r}}};
    case Method::kNOLA:
      return {{"A", {d, r, spec.nola_k}}, {"B", {d, r, spec.nola_k}}};
    default:
      return {};
  }
}

struct AdapterState {
  AdapterSpec spec;
  ModelConfig config;
  FactorList trainable;
  FactorList frozen;

  const DenseTensor& factor(std::string_view name) const {
    for (const auto* list : {&trainable, &frozen}) {
      for (const auto& f : *list) {
        if (f.name == name) return f.value;
      }
    }
    throw ShapeError("adapter has no factor named '" + std::string(name) + "'");
  }

  // Checks factor names and shapes against the layout for spec/config.
  void validate() const {
    spec.validate(config);
    auto check = [](const FactorList& have, const FactorLayout& want,
                    const char* what) {
      if (have.size() != want.size()) {
        throw ShapeError(std::string("adapter: expected ") +
                         std::to_string(want.size()) + " " + what +
                         " factors, got " + std::to_string(have.size()));
      }
      for (std::size_t i = 0; i < want.size(); ++i) {
        if (have[i].name != want[i].first ||
            have[i].value.shape() != want[i].second) {
          throw ShapeError(std::string("adapter: ") + what + " factor " +
                           std::to_string(i) + " is '" + have[i].name + "' " +
                           shape_string(have[i].value.shape()) +
                           ", expected '" + want[i].first + "' " +
                           shape_string(want[i].second));
        }
      }
    };
    check(trainable, trainable_layout(spec, config), "trainable");
    check(frozen, frozen_layout(spec, config), "frozen");
  }
};

enum class Init {
  kZeroUpdate,  // random factors except one set to zero: update starts at 0
  kRandom,      // every trainable factor random
  kZero,        // every trainable factor zero
};

// Name of the trainable factor zeroed by Init::kZeroUpdate.
inline std::string_view zero_init_factor(Method m) {
  switch (m) {
    case Method::kLoRA: return "A";
    case Method::kLoRTA: return "A";
    case Method::kLoTR: return "G";
    case Method::kFacTTT: return "G";
    case Method::kFacTTK: return "core";
    case Method::kVeRA: return "C_B";
    case Method::kNOLA: return "alpha";
    case Method::kLoReTTA: return "A_core0";
  }
  return "";
}

// Frozen factors depend only on (spec, config); they are regenerated from
// the seed when a checkpoint is loaded.
inline FactorList make_frozen(const AdapterSpec& spec, const ModelConfig& cfg) {
  FactorList out;
  Rng rng(derive_seed(spec.seed, 1));
  const double bound = 1.0 / std::sqrt(static_cast<double>(spec.rank));
  for (auto& [name, shape] : frozen_layout(spec, cfg)) {
    DenseTensor t(shape);
    rng.fill_uniform(t, -bound, bound);
    out.push_back({name, std::move(t)});
  }
  return out;
}

inline AdapterState make_adapter(const AdapterSpec& spec, const ModelConfig& cfg,
                                 Init init = Init::kZeroUpdate) {
  spec.validate(cfg);
  AdapterState st{spec, cfg, {}, make_frozen(spec, cfg)};
  Rng rng(derive_seed(spec.seed, 2));
  const double bound = 1.0 / std::sqrt(static_cast<double>(spec.rank));
  for (auto& [name, shape] : trainable_layout(spec, cfg)) {
    DenseTensor t(shape);
    if (init != Init::kZero) rng.fill_uniform(t, -bound, bound);
    if (init == Init::kZeroUpdate && name == zero_init_factor(spec.method)) {
      t.fill(0.0);
    }
    st.trainable.push_back({name, std::move(t)});
  }
  return st;
}

inline const FactorList& trainable_factors(const AdapterState& st) {
  return st.trainable;
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParamCountReport {
  Method method = Method::kLoRA;
  std::size_t rank = 0;
  std::uint64_t trainable_count = 0;
  std::string formula_text;
  double savings_vs_lora = 0.0;  // 1 - count / count(LoRA at same rank)
};

inline std::uint64_t lora_count(const ModelConfig& cfg, std::size_t r) {
  return 2ULL * cfg.matrices * cfg.layers * cfg.d * r;
}

inline ParamCountReport count_params(const AdapterSpec& spec,
                                     const ModelConfig& cfg) {
  spec.validate(cfg);
  const std::uint64_t d = cfg.d, H = cfg.heads, L = cfg.layers,
                      M = cfg.matrices, r = spec.rank;
  ParamCountReport rep;
  rep.method = spec.method;
  rep.rank = spec.rank;
  switch (spec.method) {
    case Method::kLoRA:
      rep.trainable_count = 2 * M * L * d * r;
      rep.formula_text = "2*M*L*d*r";
      break;
    case Method::kLoRTA:
      rep.trainable_count = (d + d / H + H + L + M) * r;
      rep.formula_text = "(d + d/H + H + L + M)*r";
      break;
    case Method::kLoTR:
      rep.trainable_count = M * (L * r * r + 2 * d * r);
      rep.formula_text = "M*(L*r^2 + 2*d*r)";
      break;
    case Method::kFacTTT:
      rep.trainable_count = M * L * r * r + 2 * d * r;
      rep.formula_text = "M*L*r^2 + 2*d*r";
      break;
    case Method::kFacTTK:
      rep.trainable_count = (2 * d + M * L) * r + r * r * r;
      rep.formula_text = "(2*d + M*L)*r + r^3";
      break;
    case Method::kLoReTTA: {
      std::uint64_t sum = 0;
      for (std::size_t k : spec.loretta_dims) sum += k;
      rep.trainable_count = 2 * M * L * r * r * sum;
      rep.formula_text = "2*M*L*r^2*sum(k_i)";
      break;
    }
    case Method::kVeRA:
      rep.trainable_count = L * (r + d);
      rep.formula_text = "L*(r + d)";
      break;
    case Method::kNOLA:
      rep.trainable_count = 2 * spec.nola_k * L;
      rep.formula_text = "2*k*L";
      break;
  }
  rep.savings_vs_lora =
      1.0 - static_cast<double>(rep.trainable_count) /
                static_cast<double>(lora_count(cfg, spec.rank));
  return rep;
}

struct SavingsRow {
  std::string added_modes;
  std::string tensor_dims;
  std::size_t num_tensors = 0;
  double savings = 0.0;
};

// Savings of CP parameterizations that share progressively more modes,
// relative to a per-matrix LoRA update, as closed forms in (d, H, L, M, r).
inline std::vector<SavingsRow> savings_breakdown(const ModelConfig& cfg,
                                                 std::size_t r) {
  cfg.validate();
  if (r < 1) throw ConfigError("savings_breakdown: rank must be >= 1");
  const double d = static_cast<double>(cfg.d);
  const double H = static_cast<double>(cfg.heads);
  const double L = static_cast<double>(cfg.layers);
  const double M = static_cast<double>(cfg.matrices);
  const double denom = 2.0 * d * static_cast<double>(r);
  const double base = d * (1.0 + 1.0 / H) + H;
  return {
      {"none", "d x d", cfg.matrices * cfg.layers, 0.0},
      {"heads", "d x d/H x H", cfg.matrices * cfg.layers, 1.0 - base / denom},
      {"heads+matrices", "d x d/H x H x M", cfg.layers,
       1.0 - (base + M) / denom},
      {"heads+matrices+layers", "d x d/H x H x M x L", 1,
       1.0 - (base + M + L) / denom},
  };
}

struct MatchedRankComparison {
  std::size_t lora_rank = 0;
  std::size_t lorta_rank = 0;  // r' = r * M * L
  std::uint64_t lora_params = 0;
  std::uint64_t lorta_params = 0;
  double savings = 0.0;
};

// LoRA at per-matrix rank r has total tensor rank r * M * L; compare against
// a LoRTA adapter of that tensor rank.
inline MatchedRankComparison matched_tensor_rank(const ModelConfig& cfg,
                                                 std::size_t r) {
  cfg.validate();
  MatchedRankComparison c;
  c.lora_rank = r;
  c.lorta_rank = r * cfg.matrices * cfg.layers;
  c.lora_params = lora_count(cfg, r);
  AdapterSpec spec;
  spec.method = Method::kLoRTA;
  spec.rank = c.lorta_rank;
  c.lorta_params = count_params(spec, cfg).trainable_count;
  c.savings = 1.0 - static_cast<double>(c.lorta_params) /
                        static_cast<double>(c.lora_params);
  return c;
}

// ---------------------------------------------------------------------------
// Materialization

namespace detail {

inline void require_finite(const AdapterState& st) {
  for (const auto* list : {&st.trainable, &st.frozen}) {
    for (const auto& f : *list) {
      if (!f.value.all_finite()) {
        throw NumericError("adapter factor '" + f.name +
                           "' contains non-finite values");
      }
    }
  }
}

inline void check_ml(const ModelConfig& cfg, std::size_t m, std::size_t l) {
  if (m >= cfg.matrices) {
    throw IndexError("matrix index " + std::to_string(m) + " >= M = " +
                     std::to_string(cfg.matrices));
  }
  if (l >= cfg.layers) {
    throw IndexError("layer index " + std::to_string(l) + " >= L = " +
                     std::to_string(cfg.layers));
  }
}

// r x r slice [:, i, :] of the (m, l) core of a (M, L, r, k, r) tensor.
inline Matrix ring_core_slice(const DenseTensor& cores, std::size_t ml,
                              std::size_t i) {
  const std::size_t r = cores.extent(2), k = cores.extent(3);
  const double* base = cores.data().data() + ml * r * k * r;
  Matrix out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r));
  for (std::size_t a = 0; a < r; ++a) {
    for (std::size_t b = 0; b < r; ++b) {
      out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          base[(a * k + i) * r + b];
    }
  }
  return out;
}

inline std::vector<const DenseTensor*> ring_cores(const AdapterState& st,
                                                  const char* side) {
  std::vector<const DenseTensor*> out;
  for (std::size_t t = 0; t < st.spec.loretta_dims.size(); ++t) {
    out.push_back(&st.factor(std::string(side) + "_core" + std::to_string(t)));
  }
  return out;
}

// Contracts a trace-closed tensor-train chain into the d x r factor it
// parameterizes (row-major reading of the k_1 x ... x k_D tensor).
inline Matrix ring_factor(const std::vector<const DenseTensor*>& cores,
                          std::size_t ml, std::size_t d, std::size_t r) {
  const std::size_t D = cores.size();
  std::vector<std::size_t> dims(D);
  for (std::size_t t = 0; t < D; ++t) dims[t] = cores[t]->extent(3);
  Matrix out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(r));
  std::vector<std::size_t> idx(D, 0);
  for (std::size_t flat = 0; flat < d * r; ++flat) {
    Matrix prod = ring_core_slice(*cores[0], ml, idx[0]);
    for (std::size_t t = 1; t < D; ++t) {
      prod = prod * ring_core_slice(*cores[t], ml, idx[t]);
    }
    out(static_cast<Eigen::Index>(flat / r), static_cast<Eigen::Index>(flat % r)) =
        prod.trace();
    for (std::size_t t = D; t-- > 0;) {
      if (++idx[t] < dims[t]) break;
      idx[t] = 0;
    }
  }
  return out;
}

// Accumulates the gradient of the chain given dL/d(factor).
inline void ring_factor_vjp(const std::vector<const DenseTensor*>& cores,
                            std::size_t ml, const Matrix& grad,
                            std::vector<DenseTensor*>& out) {
  const std::size_t D = cores.size();
  const std::size_t r = cores[0]->extent(2);
  std::vector<std::size_t> dims(D);
  for (std::size_t t = 0; t < D; ++t) dims[t] = cores[t]->extent(3);
  const auto rr = static_cast<Eigen::Index>(r);
  const std::size_t total = static_cast<std::size_t>(grad.size());
  std::vector<std::size_t> idx(D, 0);
  std::vector<Matrix> slices(D), prefix(D + 1), suffix(D + 1);
  for (std::size_t flat = 0; flat < total; ++flat) {
    const double g = grad(static_cast<Eigen::Index>(flat / r),
                          static_cast<Eigen::Index>(flat % r));
    if (g != 0.0) {
      for (std::size_t t = 0; t < D; ++t) {
        slices[t] = ring_core_slice(*cores[t], ml, idx[t]);
      }
      prefix[0] = Matrix::Identity(rr, rr);
      for (std::size_t t = 0; t < D; ++t) prefix[t + 1] = prefix[t] * slices[t];
      suffix[D] = Matrix::Identity(rr, rr);
      for (std::size_t t = D; t-- > 0;) suffix[t] = slices[t] * suffix[t + 1];
      for (std::size_t t = 0; t < D; ++t) {
        // d trace(P G S) / dG = (S P)^T
        const Matrix dg = g * (suffix[t + 1] * prefix[t]).transpose();
        double* base = out[t]->data().data() + ml * r * dims[t] * r;
        for (std::size_t a = 0; a < r; ++a) {
          for (std::size_t b = 0; b < r; ++b) {
            base[(a * dims[t] + idx[t]) * r + b] +=
                dg(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
          }
        }
      }
    }
    for (std::size_t t = D; t-- > 0;) {
      if (++idx[t] < dims[t]) break;
      idx[t] = 0;
    }
  }
}

// i-th frontal slice of a (d, r, k) stack: A_i(p, q) = X[p, q, i].
inline Matrix stack_slice(const DenseTensor& x, std::size_t i) {
  const std::size_t d = x.extent(0), r = x.extent(1), k = x.extent(2);
  Matrix out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(r));
  const auto data = x.data();
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = 0; q < r; ++q) {
      out(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q)) =
          data[(p * r + q) * k + i];
    }
  }
  return out;
}

// Lateral slice X[:, q, :] of a (d, r, k) stack, d x k.
inline Matrix stack_lateral(const DenseTensor& x, std::size_t q) {
  const std::size_t d = x.extent(0), r = x.extent(1), k = x.extent(2);
  Matrix out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  const auto data = x.data();
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t i = 0; i < k; ++i) {
      out(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) =
          data[(p * r + q) * k + i];
    }
  }
  return out;
}

inline Vector column_of(const DenseTensor& t2, std::size_t col) {
  return t2.as_matrix().col(static_cast<Eigen::Index>(col));
}

inline Eigen::RowVectorXd row_of(const DenseTensor& t2, std::size_t row) {
  return t2.as_matrix().row(static_cast<Eigen::Index>(row));
}

// Row (m, l) of a leading-(M, L) tensor viewed as an r x r matrix.
inline Matrix ml_block(const DenseTensor& t, std::size_t ml) {
  return t.block(ml);
}

}  // namespace detail

// NOLA update for layer l as the literal double sum over basis pairs.
inline Matrix nola_update_double_sum(const AdapterState& st, std::size_t l) {
  const auto& A = st.factor("A");
  const auto& B = st.factor("B");
  const auto& alpha = st.factor("alpha");
  const auto& beta = st.factor("beta");
  const std::size_t k = st.spec.nola_k;
  const auto d = static_cast<Eigen::Index>(st.config.d);
  Matrix out = Matrix::Zero(d, d);
  std::vector<Matrix> as, bs;
  for (std::size_t i = 0; i < k; ++i) {
    as.push_back(detail::stack_slice(A, i));
    bs.push_back(detail::stack_slice(B, i));
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out += alpha.at({i, l}) * beta.at({j, l}) * (as[i] * bs[j].transpose());
    }
  }
  return out;
}

// NOLA update for layer l in the factorized form
// sum_m P_A^(m) (alpha_l beta_l^T) P_B^(m)^T with P_A^(m) = A[:, m, :].
inline Matrix nola_update_factorized(const AdapterState& st, std::size_t l) {
  const auto& A = st.factor("A");
  const auto& B = st.factor("B");
  const Vector a = detail::column_of(st.factor("alpha"), l);
  const Vector b = detail::column_of(st.factor("beta"), l);
  const Matrix coeff = a * b.transpose();
  const auto d = static_cast<Eigen::Index>(st.config.d);
  Matrix out = Matrix::Zero(d, d);
  for (std::size_t m = 0; m < st.spec.rank; ++m) {
    out += detail::stack_lateral(A, m) * coeff *
           detail::stack_lateral(B, m).transpose();
  }
  return out;
}

// Unscaled d x d update for matrix type m at layer l (heads concatenated
// along columns).
inline Matrix layer_update_unscaled(const AdapterState& st, std::size_t m,
                                    std::size_t l) {
  const ModelConfig& cfg = st.config;
  detail::check_ml(cfg, m, l);
  const std::size_t ml = m * cfg.layers + l;
  switch (st.spec.method) {
    case Method::kLoRA: {
      const auto& A = st.factor("A");
      const auto& B = st.factor("B");
      return A.block(ml) * B.block(ml).transpose();
    }
    case Method::kLoRTA: {
      const auto A = st.factor("A").as_matrix();
      const auto B = st.factor("B").as_matrix();
      const auto CH = st.factor("C_H").as_matrix();
      const Eigen::RowVectorXd lm =
          st.factor("C_L").as_matrix().row(static_cast<Eigen::Index>(l))
              .cwiseProduct(
                  st.factor("C_M").as_matrix().row(static_cast<Eigen::Index>(m)));
      const auto d = static_cast<Eigen::Index>(cfg.d);
      const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
      Matrix out(d, d);
      for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(cfg.heads); ++h) {
        const Eigen::RowVectorXd w = CH.row(h).cwiseProduct(lm);
        out.middleCols(h * dh, dh) = (A * w.asDiagonal()) * B.transpose();
      }
      return out;
    }
    case Method::kLoTR: {
      const auto& A = st.factor("A");
      const auto& B = st.factor("B");
      const auto& G = st.factor("G");
      return A.block(m) * G.block(ml) * B.block(m).transpose();
    }
    case Method::kFacTTT: {
      const auto A = st.factor("A").as_matrix();
      const auto B = st.factor("B").as_matrix();
      return A * st.factor("G").block(ml) * B.transpose();
    }
    case Method::kFacTTK: {
      const auto U = st.factor("U").as_matrix();
      const auto V = st.factor("V").as_matrix();
      const auto& C = st.factor("C");
      const auto& core = st.factor("core");
      const std::size_t r = st.spec.rank;
      Matrix mix = Matrix::Zero(static_cast<Eigen::Index>(r),
                                static_cast<Eigen::Index>(r));
      for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t b = 0; b < r; ++b) {
          double s = 0.0;
          for (std::size_t c = 0; c < r; ++c) {
            s += core.at({a, b, c}) * C.at({m, l, c});
          }
          mix(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = s;
        }
      }
      return U * mix * V.transpose();
    }
    case Method::kVeRA: {
      const auto A = st.factor("A").as_matrix();
      const auto B = st.factor("B").as_matrix();
      const Eigen::RowVectorXd cd = detail::row_of(st.factor("C_D"), l);
      const Eigen::RowVectorXd cb = detail::row_of(st.factor("C_B"), l);
      return (A * cd.asDiagonal()) * B.transpose() * cb.asDiagonal();
    }
    case Method::kNOLA:
      return nola_update_double_sum(st, l);
    case Method::kLoReTTA: {
      const Matrix A = detail::ring_factor(detail::ring_cores(st, "A"), ml,
                                           cfg.d, st.spec.rank);
      const Matrix B = detail::ring_factor(detail::ring_cores(st, "B"), ml,
                                           cfg.d, st.spec.rank);
      return A * B.transpose();
    }
  }
  throw ConfigError("layer_update: unknown method");
}

// Scaled d x d update (alpha / r) for matrix type m at layer l.
inline Matrix layer_update(const AdapterState& st, std::size_t m,
                           std::size_t l) {
  detail::require_finite(st);
  return st.spec.scale() * layer_update_unscaled(st, m, l);
}

// All scaled layer updates, indexed m * L + l.
inline std::vector<Matrix> layer_updates(const AdapterState& st) {
  detail::require_finite(st);
  std::vector<Matrix> out;
  out.reserve(st.config.matrices * st.config.layers);
  for (std::size_t m = 0; m < st.config.matrices; ++m) {
    for (std::size_t l = 0; l < st.config.layers; ++l) {
      out.push_back(st.spec.scale() * layer_update_unscaled(st, m, l));
    }
  }
  return out;
}

// Scaled d x d_H update of head h for matrix type m at layer l.
inline Matrix materialize_update(const AdapterState& st, std::size_t m,
                                 std::size_t l, std::size_t h) {
  if (h >= st.config.heads) {
    throw IndexError("head index " + std::to_string(h) + " >= H = " +
                     std::to_string(st.config.heads));
  }
  detail::check_ml(st.config, m, l);
  const auto dh = static_cast<Eigen::Index>(st.config.head_dim());
  if (st.spec.method == Method::kLoRTA) {
    detail::require_finite(st);
    const auto A = st.factor("A").as_matrix();
    const auto B = st.factor("B").as_matrix();
    const Eigen::RowVectorXd w =
        st.factor("C_H").as_matrix().row(static_cast<Eigen::Index>(h))
            .cwiseProduct(st.factor("C_L").as_matrix().row(static_cast<Eigen::Index>(l)))
            .cwiseProduct(st.factor("C_M").as_matrix().row(static_cast<Eigen::Index>(m)));
    return st.spec.scale() * ((A * w.asDiagonal()) * B.transpose());
  }
  return layer_update(st, m, l).middleCols(static_cast<Eigen::Index>(h) * dh, dh);
}

// Stacks every head update into a d x d_H x H x L x M tensor.
inline DenseTensor stack_updates(const ModelConfig& cfg,
                                 const std::vector<Matrix>& layer) {
  const std::size_t d = cfg.d, dh = cfg.head_dim(), H = cfg.heads,
                    L = cfg.layers, M = cfg.matrices;
  if (layer.size() != M * L) {
    throw ShapeError("stack_updates: expected " + std::to_string(M * L) +
                     " layer updates, got " + std::to_string(layer.size()));
  }
  DenseTensor out({d, dh, H, L, M});
  auto data = out.data();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t l = 0; l < L; ++l) {
      const Matrix& w = layer[m * L + l];
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < dh; ++j) {
          for (std::size_t h = 0; h < H; ++h) {
            data[(((i * dh + j) * H + h) * L + l) * M + m] =
                w(static_cast<Eigen::Index>(i),
                  static_cast<Eigen::Index>(h * dh + j));
          }
        }
      }
    }
  }
  return out;
}

inline DenseTensor materialize_all(const AdapterState& st) {
  return stack_updates(st.config, layer_updates(st));
}

// The LoRTA factors as a CP model of order 5, (A, B, C_H, C_L, C_M).
inline CPModel lorta_cp_model(const AdapterState& st) {
  if (st.spec.method != Method::kLoRTA) {
    throw ConfigError("lorta_cp_model: adapter is not LoRTA");
  }
  std::vector<Matrix> f;
  for (const char* n : {"A", "B", "C_H", "C_L", "C_M"}) {
    f.emplace_back(st.factor(n).as_matrix());
  }
  return CPModel(std::move(f));
}

// ---------------------------------------------------------------------------
// Adjoint of layer_updates: given dLoss/dW for every scaled layer update
// (indexed m * L + l), returns dLoss/d(factor) for every trainable factor in
// declaration order.
inline FactorList update_vjp(const AdapterState& st,
                             const std::vector<Matrix>& grad) {
  const ModelConfig& cfg = st.config;
  const std::size_t L = cfg.layers, M = cfg.matrices, H = cfg.heads;
  if (grad.size() != M * L) {
    throw ShapeError("update_vjp: expected " + std::to_string(M * L) +
                     " gradient blocks, got " + std::to_string(grad.size()));
  }
  FactorList out;
  for (const auto& f : st.trainable) {
    out.push_back({f.name, DenseTensor(f.value.shape(), 0.0)});
  }
  const double s = st.spec.scale();
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());

  switch (st.spec.method) {
    case Method::kLoRA: {
      const auto& A = st.factor("A");
      const auto& B = st.factor("B");
      auto& dA = find_factor(out, "A");
      auto& dB = find_factor(out, "B");
      for (std::size_t ml = 0; ml < M * L; ++ml) {
        dA.block(ml) = s * grad[ml] * B.block(ml);
        dB.block(ml) = s * grad[ml].transpose() * A.block(ml);
      }
      break;
    }
    case Method::kLoRTA: {
      const auto A = st.factor("A").as_matrix();
      const auto B = st.factor("B").as_matrix();
      const auto CH = st.factor("C_H").as_matrix();
      const auto CL = st.factor("C_L").as_matrix();
      const auto CM = st.factor("C_M").as_matrix();
      auto dA = find_factor(out, "A").as_matrix();
      auto dB = find_factor(out, "B").as_matrix();
      auto dCH = find_factor(out, "C_H").as_matrix();
      auto dCL = find_factor(out, "C_L").as_matrix();
      auto dCM = find_factor(out, "C_M").as_matrix();
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t l = 0; l < L; ++l) {
          const Matrix& g = grad[m * L + l];
          const auto mi = static_cast<Eigen::Index>(m);
          const auto li = static_cast<Eigen::Index>(l);
          for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(H); ++h) {
            const Matrix gh = g.middleCols(h * dh, dh);
            const Eigen::RowVectorXd w =
                CH.row(h).cwiseProduct(CL.row(li)).cwiseProduct(CM.row(mi));
            const Matrix gb = gh * B;  // d x r
            dA += s * gb * w.asDiagonal();
            dB += s * gh.transpose() * A * w.asDiagonal();
            // p_f = (A^T G_h B)_{ff}
            const Eigen::RowVectorXd p = s * A.cwiseProduct(gb).colwise().sum();
            dCH.row(h) += p.cwiseProduct(CL.row(li)).cwiseProduct(CM.row(mi));
            dCL.row(li) += p.cwiseProduct(CH.row(h)).cwiseProduct(CM.row(mi));
            dCM.row(mi) += p.cwiseProduct(CH.row(h)).cwiseProduct(CL.row(li));
          }
        }
      }
      break;
    }
    case Method::kLoTR: {
      const auto& A = st.factor("A");
      const auto& B = st.factor("B");
      const auto& G = st.factor("G");
      auto& dA = find_factor(out, "A");
      auto& dB = find_factor(out, "B");
      auto& dG = find_factor(out, "G");
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t ml = m * L + l;
          const Matrix& g = grad[ml];
          const Matrix gm = G.block(ml);
          dA.block(m) += s * g * B.block(m) * gm.transpose();
          dB.block(m) += s * g.transpose() * A.block(m) * gm;
          dG.block(ml) = s * A.block(m).transpose() * g * B.block(m);
        }
      }
      break;
    }
    case Method::kFacTTT: {
      const auto A = st.factor("A").as_matrix();
      const auto B = st.factor("B").as_matrix();
      const auto& G = st.factor("G");
      auto dA = find_factor(out, "A").as_matrix();
      auto dB = find_factor(out, "B").as_matrix();
      auto& dG = find_factor(out, "G");
      for (std::size_t ml = 0; ml < M * L; ++ml) {
        const Matrix gm = G.block(ml);
        dA += s * grad[ml] * B * gm.transpose();
        dB += s * grad[ml].transpose() * A * gm;
        dG.block(ml) = s * A.transpose() * grad[ml] * B;
      }
      break;
    }
    case Method::kFacTTK: {
      const auto U = st.factor("U").as_matrix();
      const auto V = st.factor("V").as_matrix();
      const auto& C = st.factor("C");
      const auto& core = st.factor("core");
      auto dU = find_factor(out, "U").as_matrix();
      auto dV = find_factor(out, "V").as_matrix();
      auto& dC = find_factor(out, "C");
      auto& dcore = find_factor(out, "core");
      const std::size_t r = st.spec.rank;
      const auto ri = static_cast<Eigen::Index>(r);
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t l = 0; l < L; ++l) {
          const Matrix& g = grad[m * L + l];
          Matrix mix = Matrix::Zero(ri, ri);
          for (std::size_t a = 0; a < r; ++a)
            for (std::size_t b = 0; b < r; ++b)
              for (std::size_t c = 0; c < r; ++c)
                mix(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) +=
                    core.at({a, b, c}) * C.at({m, l, c});
          dU += s * g * V * mix.transpose();
          dV += s * g.transpose() * U * mix;
          const Matrix dmix = s * U.transpose() * g * V;
          for (std::size_t a = 0; a < r; ++a) {
            for (std::size_t b = 0; b < r; ++b) {
              const double dm = dmix(static_cast<Eigen::Index>(a),
                                     static_cast<Eigen::Index>(b));
              for (std::size_t c = 0; c < r; ++c) {
                dC.at({m, l, c}) += dm * core.at({a, b, c});
                dcore.at({a, b, c}) += dm * C.at({m, l, c});
              }
            }
          }
        }
      }
      break;
    }
    case Method::kVeRA: {
      const auto A = st.factor("A").as_matrix();
      const auto B = st.factor("B").as_matrix();
      auto dCD = find_factor(out, "C_D").as_matrix();
      auto dCB = find_factor(out, "C_B").as_matrix();
      for (std::size_t l = 0; l < L; ++l) {
        Matrix g = Matrix::Zero(grad[l].rows(), grad[l].cols());
        for (std::size_t m = 0; m < M; ++m) g += grad[m * L + l];
        const auto li = static_cast<Eigen::Index>(l);
        const Eigen::RowVectorXd cd = detail::row_of(st.factor("C_D"), l);
        const Eigen::RowVectorXd cb = detail::row_of(st.factor("C_B"), l);
        const Matrix p = (A * cd.asDiagonal()) * B.transpose();
        dCB.row(li) += s * p.cwiseProduct(g).colwise().sum();
        const Matrix dp = s * g * cb.asDiagonal();
        dCD.row(li) += A.cwiseProduct(dp * B).colwise().sum();
      }
      break;
    }
    case Method::kNOLA: {
      const auto& Af = st.factor("A");
      const auto& Bf = st.factor("B");
      const auto& alpha = st.factor("alpha");
      const auto& beta = st.factor("beta");
      auto& dalpha = find_factor(out, "alpha");
      auto& dbeta = find_factor(out, "beta");
      const std::size_t k = st.spec.nola_k;
      std::vector<Matrix> as, bs;
      for (std::size_t i = 0; i < k; ++i) {
        as.push_back(detail::stack_slice(Af, i));
        bs.push_back(detail::stack_slice(Bf, i));
      }
      for (std::size_t l = 0; l < L; ++l) {
        Matrix g = Matrix::Zero(grad[l].rows(), grad[l].cols());
        for (std::size_t m = 0; m < M; ++m) g += grad[m * L + l];
        Matrix at = Matrix::Zero(as[0].rows(), as[0].cols());
        Matrix bt = Matrix::Zero(bs[0].rows(), bs[0].cols());
        for (std::size_t i = 0; i < k; ++i) {
          at += alpha.at({i, l}) * as[i];
          bt += beta.at({i, l}) * bs[i];
        }
        const Matrix dat = s * g * bt;
        const Matrix dbt = s * g.transpose() * at;
        for (std::size_t i = 0; i < k; ++i) {
          dalpha.at({i, l}) = as[i].cwiseProduct(dat).sum();
          dbeta.at({i, l}) = bs[i].cwiseProduct(dbt).sum();
        }
      }
      break;
    }
    case Method::kLoReTTA: {
      const auto acores = detail::ring_cores(st, "A");
      const auto bcores = detail::ring_cores(st, "B");
      const std::size_t D = acores.size();
      std::vector<DenseTensor*> dA, dB;
      for (std::size_t t = 0; t < D; ++t) {
        dA.push_back(&find_factor(out, "A_core" + std::to_string(t)));
        dB.push_back(&find_factor(out, "B_core" + std::to_string(t)));
      }
      for (std::size_t ml = 0; ml < M * L; ++ml) {
        const Matrix A = detail::ring_factor(acores, ml, cfg.d, st.spec.rank);
        const Matrix B = detail::ring_factor(bcores, ml, cfg.d, st.spec.rank);
        const Matrix ga = s * grad[ml] * B;
        const Matrix gb = s * grad[ml].transpose() * A;
        detail::ring_factor_vjp(acores, ml, ga, dA);
        detail::ring_factor_vjp(bcores, ml, gb, dB);
      }
      break;
    }
  }
  return out;
}

}  // namespace lorta
