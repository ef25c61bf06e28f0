#pragma once

// Post-hoc CP compression of matrix adapter updates. Each d x d update is
// viewed as a d x d_H x H tensor whose slice h is the column block
// [h d_H, (h+1) d_H), the same layout the adapters use for per-head blocks.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lorta/cp.hpp"
#include "lorta/error.hpp"
#include "lorta/tensor.hpp"

namespace lorta {

inline DenseTensor reshape_heads(const Matrix& w, std::size_t heads) {
  if (heads < 1 || w.cols() % static_cast<Eigen::Index>(heads) != 0) {
    throw ShapeError("reshape_heads: " + std::to_string(w.cols()) +
                     " columns not divisible by " + std::to_string(heads) +
                     " heads");
  }
  const auto rows = static_cast<std::size_t>(w.rows());
  const std::size_t dh = static_cast<std::size_t>(w.cols()) / heads;
  DenseTensor t({rows, dh, heads});
  auto out = t.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < dh; ++j)
      for (std::size_t h = 0; h < heads; ++h)
        out[(i * dh + j) * heads + h] = w(static_cast<Eigen::Index>(i),
                                          static_cast<Eigen::Index>(h * dh + j));
  return t;
}

inline Matrix flatten_heads(const DenseTensor& t) {
  if (t.order() != 3) {
    throw ShapeError("flatten_heads: expected a 3-way tensor, got " +
                     shape_string(t.shape()));
  }
  const std::size_t rows = t.shape()[0], dh = t.shape()[1], heads = t.shape()[2];
  Matrix w(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dh * heads));
  const auto in = t.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < dh; ++j)
      for (std::size_t h = 0; h < heads; ++h)
        w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(h * dh + j)) =
            in[(i * dh + j) * heads + h];
  return w;
}

struct SummaryStats {
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  double std = 0.0;  // population (divides by n)
};

inline SummaryStats summarize(std::vector<double> v) {
  if (v.empty()) throw ConfigError("summarize: empty sample");
  SummaryStats s;
  const double n = static_cast<double>(v.size());
  for (double x : v) s.mean += x;
  s.mean /= n;
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / n);
  s.max = *std::max_element(v.begin(), v.end());
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  s.median = v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
  return s;
}

struct DecomposeOptions {
  std::size_t rank = 8;
  std::size_t restarts = 3;
  AlsOptions als{AlsInit::kSvd};
};

struct DecompositionStats {
  std::vector<FitReport> reports;    // one per decomposed matrix, input order
  std::vector<std::size_t> indices;  // input index of each report
  std::vector<std::string> warnings;
  SummaryStats relative_error;
  SummaryStats r_squared;
};

inline DecompositionStats decompose_adapter(const std::vector<Matrix>& updates,
                                            std::size_t heads,
                                            const DecomposeOptions& opt = {}) {
  DecompositionStats st;
  for (std::size_t i = 0; i < updates.size(); ++i) {
    const Matrix& u = updates[i];
    if (!u.allFinite()) {
      throw NumericError("decompose_adapter: matrix " + std::to_string(i) +
                         " has non-finite entries");
    }
    if (u.squaredNorm() == 0.0) {
      st.warnings.push_back("matrix " + std::to_string(i) +
                            " is all zeros; skipped (relative error undefined)");
      continue;
    }
    AlsOptions als = opt.als;
    als.seed = derive_seed(opt.als.seed, i);
    st.reports.push_back(
        cp_als_best(reshape_heads(u, heads), opt.rank, opt.restarts, als).report);
    st.indices.push_back(i);
  }
  if (st.reports.empty()) {
    throw NumericError("decompose_adapter: no non-zero matrices to decompose");
  }
  std::vector<double> re, r2;
  for (const auto& r : st.reports) {
    re.push_back(r.relative_error);
    r2.push_back(r.r_squared);
  }
  st.relative_error = summarize(std::move(re));
  st.r_squared = summarize(std::move(r2));
  return st;
}

// Two rows (relative error, R^2) by Mean / Median / Max / Std.
inline std::string stats_table(const DecompositionStats& st, char sep = '\t') {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "metric" << sep << "Mean" << sep << "Median" << sep << "Max" << sep
     << "Std\n";
  auto row = [&](const char* name, const SummaryStats& s) {
    os << name << sep << s.mean << sep << s.median << sep << s.max << sep
       << s.std << '\n';
  };
  row("Relative Error", st.relative_error);
  row("R^2", st.r_squared);
  return os.str();
}

}  // namespace lorta
