#pragma once

// CP (PARAFAC) tensor machinery: reconstruction from factors, mode-n
// unfolding, Khatri-Rao products, slicing and ALS fitting.
//
// Unfolding convention: the mode-n unfolding X_(n) has I_n rows; its columns
// enumerate the remaining modes in increasing mode order with the FIRST
// remaining mode varying fastest and the LAST remaining mode varying
// slowest. Under this convention
//
//   X_(n) = A_n * khatri_rao(A_N, ..., A_{n+1}, A_{n-1}, ..., A_1)^T
//
// where khatri_rao(a, b) has column f equal to kron(a[:, f], b[:, f]).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "lorta/error.hpp"
#include "lorta/rng.hpp"
#include "lorta/tensor.hpp"

namespace lorta {

struct CPModel {
  std::vector<Matrix> factors;  // A_n, I_n x R

  CPModel() = default;
  explicit CPModel(std::vector<Matrix> f) : factors(std::move(f)) {
    validate();
  }

  // Rank-0 model of the given shape (reconstructs to zeros).
  static CPModel zeros(const Shape& shape) {
    std::vector<Matrix> f;
    f.reserve(shape.size());
    for (std::size_t e : shape) f.emplace_back(static_cast<Eigen::Index>(e), 0);
    return CPModel(std::move(f));
  }

  std::size_t order() const noexcept { return factors.size(); }

  std::size_t rank() const {
    return factors.empty() ? 0 : static_cast<std::size_t>(factors[0].cols());
  }

  Shape shape() const {
    Shape s;
    s.reserve(factors.size());
    for (const auto& a : factors) s.push_back(static_cast<std::size_t>(a.rows()));
    return s;
  }

  void validate() const {
    if (factors.empty()) throw ShapeError("CPModel: no factors");
    const auto r = factors[0].cols();
    for (std::size_t n = 0; n < factors.size(); ++n) {
      if (factors[n].cols() != r) {
        throw ShapeError("CPModel: factor " + std::to_string(n) + " has " +
                         std::to_string(factors[n].cols()) +
                         " columns, expected " + std::to_string(r));
      }
      if (factors[n].rows() < 1) {
        throw ShapeError("CPModel: factor " + std::to_string(n) +
                         " has no rows");
      }
    }
  }
};

// Concatenates the columns of two models of identical shape.
inline CPModel concat_columns(const CPModel& a, const CPModel& b) {
  a.validate();
  b.validate();
  if (a.shape() != b.shape()) {
    throw ShapeError("concat_columns: shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  std::vector<Matrix> f;
  for (std::size_t n = 0; n < a.order(); ++n) {
    Matrix m(a.factors[n].rows(), a.factors[n].cols() + b.factors[n].cols());
    m << a.factors[n], b.factors[n];
    f.push_back(std::move(m));
  }
  return CPModel(std::move(f));
}

// X(i_1..i_N) = sum_f prod_n A_n(i_n, f)
inline DenseTensor reconstruct(const CPModel& model) {
  model.validate();
  const Shape shape = model.shape();
  const std::size_t order = shape.size();
  const auto rank = static_cast<Eigen::Index>(model.rank());
  DenseTensor out(shape);
  if (rank == 0) return out;

  // prefix[k] holds prod_{n<=k} A_n(i_n, :) for the current index prefix.
  std::vector<Eigen::RowVectorXd> prefix(order, Eigen::RowVectorXd(rank));
  std::vector<std::size_t> idx(order, 0);
  auto refresh = [&](std::size_t from) {
    for (std::size_t k = from; k < order; ++k) {
      const auto row = model.factors[k].row(static_cast<Eigen::Index>(idx[k]));
      if (k == 0) {
        prefix[k] = row;
      } else {
        prefix[k] = prefix[k - 1].cwiseProduct(row);
      }
    }
  };
  refresh(0);
  auto data = out.data();
  for (std::size_t flat = 0; flat < data.size(); ++flat) {
    data[flat] = prefix[order - 1].sum();
    // Odometer increment, last mode fastest.
    std::size_t k = order;
    while (k > 0) {
      --k;
      if (++idx[k] < shape[k]) break;
      idx[k] = 0;
    }
    if (flat + 1 < data.size()) refresh(k);
  }
  return out;
}

namespace detail {

// Column stride of each non-`mode` mode in the unfolding (first remaining
// mode fastest).
inline std::vector<std::size_t> unfold_strides(const Shape& shape,
                                               std::size_t mode) {
  std::vector<std::size_t> stride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k == mode) continue;
    stride[k] = s;
    s *= shape[k];
  }
  return stride;
}

}  // namespace detail

inline Matrix unfold(const DenseTensor& t, std::size_t mode) {
  const Shape& shape = t.shape();
  if (mode >= shape.size()) {
    throw IndexError("unfold: mode " + std::to_string(mode) +
                     " out of range for order " + std::to_string(shape.size()));
  }
  const auto stride = detail::unfold_strides(shape, mode);
  const std::size_t cols = t.size() / shape[mode];
  Matrix out(static_cast<Eigen::Index>(shape[mode]),
             static_cast<Eigen::Index>(cols));
  std::vector<std::size_t> idx(shape.size(), 0);
  auto data = t.data();
  for (std::size_t flat = 0; flat < data.size(); ++flat) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < shape.size(); ++k) col += idx[k] * stride[k];
    out(static_cast<Eigen::Index>(idx[mode]), static_cast<Eigen::Index>(col)) =
        data[flat];
    for (std::size_t k = shape.size(); k-- > 0;) {
      if (++idx[k] < shape[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

inline DenseTensor fold(const Matrix& m, std::size_t mode, const Shape& shape) {
  if (mode >= shape.size()) {
    throw IndexError("fold: mode " + std::to_string(mode) +
                     " out of range for order " + std::to_string(shape.size()));
  }
  DenseTensor out(shape);
  if (static_cast<std::size_t>(m.rows()) != shape[mode] ||
      static_cast<std::size_t>(m.cols()) != out.size() / shape[mode]) {
    throw ShapeError("fold: matrix " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + " does not unfold shape " +
                     shape_string(shape) + " at mode " + std::to_string(mode));
  }
  const auto stride = detail::unfold_strides(shape, mode);
  std::vector<std::size_t> idx(shape.size(), 0);
  auto data = out.data();
  for (std::size_t flat = 0; flat < data.size(); ++flat) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < shape.size(); ++k) col += idx[k] * stride[k];
    data[flat] = m(static_cast<Eigen::Index>(idx[mode]),
                   static_cast<Eigen::Index>(col));
    for (std::size_t k = shape.size(); k-- > 0;) {
      if (++idx[k] < shape[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

// Column-wise Kronecker product: result(i*J + j, f) = a(i, f) * b(j, f).
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("khatri_rao: column mismatch " + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()));
  }
  Matrix out(a.rows() * b.rows(), a.cols());
  for (Eigen::Index f = 0; f < a.cols(); ++f) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      out.col(f).segment(i * b.rows(), b.rows()) = a(i, f) * b.col(f);
    }
  }
  return out;
}

// khatri_rao(A_N, ..., A_{n+1}, A_{n-1}, ..., A_1): the right factor of the
// mode-n unfolding of a CP model under the convention above.
inline Matrix khatri_rao_except(const std::vector<Matrix>& factors,
                                std::size_t skip) {
  Matrix acc;
  bool first = true;
  for (std::size_t k = factors.size(); k-- > 0;) {
    if (k == skip) continue;
    if (first) {
      acc = factors[k];
      first = false;
    } else {
      acc = khatri_rao(acc, factors[k]);
    }
  }
  return acc;
}

// Fixes the modes listed in `fixed` (mode -> index); the free modes keep their
// relative order.
inline DenseTensor slice(const DenseTensor& t,
                         const std::map<std::size_t, std::size_t>& fixed) {
  const Shape& shape = t.shape();
  if (fixed.size() >= shape.size()) {
    throw IndexError("slice: must leave at least one mode free");
  }
  for (auto [mode, index] : fixed) {
    if (mode >= shape.size()) {
      throw IndexError("slice: mode " + std::to_string(mode) +
                       " out of range for order " +
                       std::to_string(shape.size()));
    }
    if (index >= shape[mode]) {
      throw IndexError("slice: index " + std::to_string(index) +
                       " out of range for mode " + std::to_string(mode) +
                       " of extent " + std::to_string(shape[mode]));
    }
  }
  Shape out_shape;
  std::vector<std::size_t> free_modes;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (!fixed.contains(k)) {
      out_shape.push_back(shape[k]);
      free_modes.push_back(k);
    }
  }
  DenseTensor out(out_shape);
  std::vector<std::size_t> src(shape.size(), 0);
  for (auto [mode, index] : fixed) src[mode] = index;
  std::vector<std::size_t> idx(out_shape.size(), 0);
  auto data = out.data();
  for (std::size_t flat = 0; flat < data.size(); ++flat) {
    for (std::size_t k = 0; k < free_modes.size(); ++k) src[free_modes[k]] = idx[k];
    data[flat] = t.at(src);
    for (std::size_t k = idx.size(); k-- > 0;) {
      if (++idx[k] < out_shape[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

struct FitReport {
  double relative_error = 0.0;  // ||X - Xhat||_F / ||X||_F
  double r_squared = 1.0;       // 1 - SSE / SST, SST about the entry mean
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> history;  // relative error after each sweep
};

// Relative error and R^2 of `approx` against `target`. When the target is
// constant (SST == 0) the uncentered sum of squares is used instead so that
// an exact fit still scores 1.
inline FitReport fit_quality(const DenseTensor& target,
                             const DenseTensor& approx) {
  if (target.shape() != approx.shape()) {
    throw ShapeError("fit_quality: shape mismatch " +
                     shape_string(target.shape()) + " vs " +
                     shape_string(approx.shape()));
  }
  const auto x = target.data();
  const auto y = approx.data();
  double sse = 0.0, norm2 = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = x[i] - y[i];
    sse += e * e;
    norm2 += x[i] * x[i];
    mean += x[i];
  }
  if (norm2 == 0.0) {
    throw NumericError("fit_quality: target tensor is all zeros");
  }
  mean /= static_cast<double>(x.size());
  double sst = 0.0;
  for (double v : x) sst += (v - mean) * (v - mean);
  if (sst <= 1e-24 * norm2) sst = norm2;

  FitReport r;
  r.relative_error = std::sqrt(sse / norm2);
  r.r_squared = 1.0 - sse / sst;
  return r;
}

enum class AlsInit {
  kRandom,  // uniform[-1, 1]
  kSvd,     // leading left singular vectors of each unfolding, random fill
};

struct AlsOptions {
  AlsInit init = AlsInit::kRandom;
  std::size_t max_iters = 500;
  double tol = 1e-8;     // stop when |delta relative error| < tol
  double ridge = 1e-12;  // added to the Gram diagonal before solving
  std::uint64_t seed = 0;
};

struct CpFit {
  CPModel model;
  FitReport report;
};

inline CpFit cp_als(const DenseTensor& t, std::size_t rank,
                    const AlsOptions& opt = {}) {
  if (rank < 1) throw ConfigError("cp_als: rank must be >= 1");
  if (t.frobenius_norm() == 0.0) {
    throw NumericError("cp_als: cannot fit an all-zero tensor");
  }
  if (!t.all_finite()) throw NumericError("cp_als: non-finite input");

  const Shape& shape = t.shape();
  const std::size_t order = shape.size();
  const auto r = static_cast<Eigen::Index>(rank);

  Rng rng(opt.seed);
  std::vector<Matrix> factors;
  factors.reserve(order);
  for (std::size_t e : shape) {
    factors.push_back(
        rng.uniform_matrix(static_cast<Eigen::Index>(e), r, -1.0, 1.0));
  }

  std::vector<Matrix> unfolded;
  unfolded.reserve(order);
  for (std::size_t n = 0; n < order; ++n) unfolded.push_back(unfold(t, n));

  if (opt.init == AlsInit::kSvd) {
    for (std::size_t n = 0; n < order; ++n) {
      Eigen::BDCSVD<Matrix> svd(unfolded[n], Eigen::ComputeThinU);
      const Eigen::Index k = std::min(r, svd.matrixU().cols());
      factors[n].leftCols(k) = svd.matrixU().leftCols(k);
    }
  }

  std::vector<Matrix> grams(order);
  for (std::size_t n = 0; n < order; ++n) {
    grams[n] = factors[n].transpose() * factors[n];
  }

  CpFit fit;
  double prev = std::numeric_limits<double>::infinity();
  const Matrix ridge = opt.ridge * Matrix::Identity(r, r);

  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    for (std::size_t n = 0; n < order; ++n) {
      Matrix v = Matrix::Ones(r, r);
      for (std::size_t k = 0; k < order; ++k) {
        if (k != n) v = v.cwiseProduct(grams[k]);
      }
      const Matrix mttkrp = unfolded[n] * khatri_rao_except(factors, n);
      // Solve A_n (V + eps I) = MTTKRP; the orthogonal decomposition gives the
      // minimum-norm (pseudo-inverse) solution if the system is singular.
      Eigen::CompleteOrthogonalDecomposition<Matrix> cod(v + ridge);
      factors[n] = cod.solve(mttkrp.transpose()).transpose();
      // Keep scale in the last mode only; the next solve absorbs it.
      if (n + 1 < order) {
        for (Eigen::Index f = 0; f < r; ++f) {
          const double nrm = factors[n].col(f).norm();
          if (nrm > 0.0) factors[n].col(f) /= nrm;
        }
      }
      grams[n] = factors[n].transpose() * factors[n];
    }

    fit.model = CPModel(factors);
    const FitReport q = fit_quality(t, reconstruct(fit.model));
    fit.report.relative_error = q.relative_error;
    fit.report.r_squared = q.r_squared;
    fit.report.history.push_back(q.relative_error);
    fit.report.iterations = it + 1;
    if (std::abs(prev - q.relative_error) < opt.tol) {
      fit.report.converged = true;
      break;
    }
    prev = q.relative_error;
  }
  return fit;
}

// Best of `restarts` seeded ALS runs (seeds derived from opt.seed).
inline CpFit cp_als_best(const DenseTensor& t, std::size_t rank,
                         std::size_t restarts, const AlsOptions& opt = {}) {
  if (restarts < 1) throw ConfigError("cp_als_best: restarts must be >= 1");
  CpFit best;
  bool have = false;
  for (std::size_t k = 0; k < restarts; ++k) {
    AlsOptions o = opt;
    o.seed = derive_seed(opt.seed, k);
    CpFit f = cp_als(t, rank, o);
    if (!have || f.report.relative_error < best.report.relative_error) {
      best = std::move(f);
      have = true;
    }
  }
  return best;
}

}  // namespace lorta
