#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorta/error.hpp"

namespace lorta {

// Transformer hyperparameters relevant to adapters and the mini model.
struct ModelConfig {
  std::size_t d = 64;          // embedding dimension
  std::size_t heads = 4;       // H
  std::size_t layers = 2;      // L
  std::size_t matrices = 2;    // M, fine-tuned matrix types
  std::size_t seq_len = 16;    // N
  std::size_t mlp_width = 0;   // 0 means 4 * d
  double layer_norm_eps = 1e-5;

  std::size_t head_dim() const { return d / heads; }
  std::size_t mlp_hidden() const { return mlp_width == 0 ? 4 * d : mlp_width; }

  void validate() const {
    if (d < 1) throw ConfigError("ModelConfig: d must be >= 1");
    if (heads < 1) throw ConfigError("ModelConfig: heads must be >= 1");
    if (d % heads != 0) {
      throw ConfigError("ModelConfig: d = " + std::to_string(d) +
                        " is not divisible by heads = " +
                        std::to_string(heads));
    }
    if (layers < 1) throw ConfigError("ModelConfig: layers must be >= 1");
    if (matrices < 1 || matrices > 4) {
      throw ConfigError("ModelConfig: matrices must be in [1, 4], got " +
                        std::to_string(matrices));
    }
  }

  // Adapter-relevant dimensions agree.
  bool adapter_compatible(const ModelConfig& o) const {
    return d == o.d && heads == o.heads && layers == o.layers &&
           matrices == o.matrices;
  }

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig llama2_7b(std::size_t matrices = 2) {
    ModelConfig c;
    c.d = 4096;
    c.heads = 32;
    c.layers = 32;
    c.matrices = matrices;
    c.seq_len = 16;
    c.mlp_width = 11008;
    return c;
  }
};

// Attention weight kinds of one head.
enum class WeightKind : std::uint8_t { kQuery = 0, kKey = 1, kValue = 2, kProj = 3 };

// Fine-tuned matrix index m -> weight kind, for M fine-tuned types:
// M=1 {Q}, M=2 {Q,V}, M=3 {Q,K,V}, M=4 {Q,K,V,P}.
inline WeightKind finetuned_kind(std::size_t matrices, std::size_t m) {
  static constexpr std::array<std::array<WeightKind, 4>, 4> kTable{{
      {WeightKind::kQuery, WeightKind::kQuery, WeightKind::kQuery, WeightKind::kQuery},
      {WeightKind::kQuery, WeightKind::kValue, WeightKind::kQuery, WeightKind::kQuery},
      {WeightKind::kQuery, WeightKind::kKey, WeightKind::kValue, WeightKind::kQuery},
      {WeightKind::kQuery, WeightKind::kKey, WeightKind::kValue, WeightKind::kProj},
  }};
  if (matrices < 1 || matrices > 4 || m >= matrices) {
    throw IndexError("finetuned_kind: matrix index " + std::to_string(m) +
                     " invalid for M = " + std::to_string(matrices));
  }
  return kTable[matrices - 1][m];
}

// Inverse of finetuned_kind; empty when the kind is not fine-tuned.
inline std::optional<std::size_t> finetuned_index(std::size_t matrices,
                                                  WeightKind kind) {
  for (std::size_t m = 0; m < matrices; ++m) {
    if (finetuned_kind(matrices, m) == kind) return m;
  }
  return std::nullopt;
}

enum class Method : std::uint32_t {
  kLoRA = 1,
  kLoRTA = 2,
  kLoTR = 3,
  kVeRA = 4,
  kNOLA = 5,
  kLoReTTA = 6,
  kFacTTT = 7,
  kFacTTK = 8,
};

inline constexpr std::array<Method, 8> kAllMethods{
    Method::kLoRA, Method::kLoRTA,   Method::kLoTR,   Method::kVeRA,
    Method::kNOLA, Method::kLoReTTA, Method::kFacTTT, Method::kFacTTK};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::kLoRA: return "lora";
    case Method::kLoRTA: return "lorta";
    case Method::kLoTR: return "lotr";
    case Method::kVeRA: return "vera";
    case Method::kNOLA: return "nola";
    case Method::kLoReTTA: return "loretta-rep";
    case Method::kFacTTT: return "fact-tt";
    case Method::kFacTTK: return "fact-tk";
  }
  return "unknown";
}

inline Method parse_method(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "loretta") lower = "loretta-rep";
  if (lower == "fact_tt") lower = "fact-tt";
  if (lower == "fact_tk") lower = "fact-tk";
  for (Method m : kAllMethods) {
    if (method_name(m) == lower) return m;
  }
  throw ConfigError("unknown adapter method '" + std::string(s) + "'");
}

inline Method method_from_id(std::uint32_t id) {
  for (Method m : kAllMethods) {
    if (static_cast<std::uint32_t>(m) == id) return m;
  }
  throw ConfigError("unknown adapter method id " + std::to_string(id));
}

// Methods whose random projections are frozen and regenerated from the seed.
inline bool has_frozen_factors(Method m) {
  return m == Method::kVeRA || m == Method::kNOLA;
}

struct AdapterSpec {
  Method method = Method::kLoRTA;
  std::size_t rank = 1;
  double alpha = 1.0;
  std::size_t nola_k = 0;                    // NOLA basis count
  std::vector<std::size_t> loretta_dims;     // LoReTTA k_1..k_D
  std::uint64_t seed = 0;

  double scale() const { return alpha / static_cast<double>(rank); }

  void validate(const ModelConfig& cfg) const {
    cfg.validate();
    if (rank < 1) throw ConfigError("AdapterSpec: rank must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("AdapterSpec: alpha must be > 0");
    if (method == Method::kNOLA && nola_k < 1) {
      throw ConfigError("AdapterSpec: NOLA needs a basis count k >= 1");
    }
    if (method == Method::kLoReTTA) {
      if (loretta_dims.empty()) {
        throw ConfigError("AdapterSpec: LoReTTA needs tensorization dims");
      }
      std::size_t prod = 1;
      for (std::size_t k : loretta_dims) {
        if (k < rank) {
          throw ConfigError("AdapterSpec: LoReTTA dim " + std::to_string(k) +
                            " is smaller than rank " + std::to_string(rank));
        }
        prod *= k;
      }
      if (prod != cfg.d * rank) {
        throw ConfigError("AdapterSpec: LoReTTA dims multiply to " +
                          std::to_string(prod) + ", expected d*r = " +
                          std::to_string(cfg.d * rank));
      }
    }
  }

  // Method-specific dimensions in checkpoint order.
  std::vector<std::size_t> extra_dims() const {
    if (method == Method::kNOLA) return {nola_k};
    if (method == Method::kLoReTTA) return loretta_dims;
    return {};
  }
};

// Two-way tensorization k_1 * k_2 = d * r with both k_i >= r, picking the
// divisor closest to sqrt(d * r). Falls back to a single mode when d < r.
inline std::vector<std::size_t> default_loretta_dims(std::size_t d,
                                                     std::size_t r) {
  const std::size_t n = d * r;
  std::size_t best = 0;
  for (std::size_t k = r; k * k <= n; ++k) {
    if (n % k == 0 && n / k >= r) best = k;
  }
  if (best == 0) return {n};
  return {best, n / best};
}

// Spec with method-specific defaults filled in (k = 4 NOLA bases, two-way
// LoReTTA tensorization).
inline AdapterSpec default_spec(Method method, std::size_t rank, double alpha,
                                const ModelConfig& cfg, std::uint64_t seed = 0) {
  AdapterSpec s;
  s.method = method;
  s.rank = rank;
  s.alpha = alpha;
  s.seed = seed;
  if (method == Method::kNOLA) s.nola_k = 4;
  if (method == Method::kLoReTTA) s.loretta_dims = default_loretta_dims(cfg.d, rank);
  return s;
}

}  // namespace lorta
