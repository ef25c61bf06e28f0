#pragma once

#include <cstdint>
#include <random>

#include "lorta/tensor.hpp"

namespace lorta {

// Seeded generator with a platform-independent real mapping.
// std::uniform_real_distribution differs across standard libraries, so the
// conversion from raw mt19937_64 output is done here; frozen adapter factors
// regenerated from a stored seed must be bit-identical everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  std::uint64_t next_u64() { return engine_(); }

  void fill_uniform(DenseTensor& t, double lo, double hi) {
    for (double& v : t.data()) v = uniform(lo, hi);
  }

  Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo,
                        double hi) {
    Matrix m(rows, cols);
    // Row-major fill so the draw order matches DenseTensor layout.
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = uniform(lo, hi);
    }
    return m;
  }

 private:
  std::mt19937_64 engine_;
};

// Derives an independent stream seed from a base seed and a stream tag
// (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace lorta
