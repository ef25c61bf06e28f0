#include <gtest/gtest.h>

#include <cmath>

#include "lorta/decompose.hpp"
#include "lorta/training.hpp"

namespace lorta {
namespace {

// Residual of the best rank-k approximation relative to ||W||, from the
// singular values.
double svd_tail(const Matrix& w, Eigen::Index k) {
  Eigen::JacobiSVD<Matrix> svd(w);
  const Vector s = svd.singularValues();
  return std::sqrt(s.tail(s.size() - k).squaredNorm()) / s.norm();
}

TEST(Reshape, HeadBlockConvention) {
  Matrix w(2, 6);
  w << 0, 1, 2, 3, 4, 5,
       6, 7, 8, 9, 10, 11;
  const DenseTensor t = reshape_heads(w, 3);
  EXPECT_EQ(t.shape(), (Shape{2, 2, 3}));
  // slice h holds columns [2h, 2h + 2)
  EXPECT_EQ(t.at({0, 0, 0}), 0);
  EXPECT_EQ(t.at({0, 1, 0}), 1);
  EXPECT_EQ(t.at({0, 0, 2}), 4);
  EXPECT_EQ(t.at({1, 1, 1}), 9);
  EXPECT_EQ(t.at({1, 0, 2}), 10);
}

TEST(Reshape, RoundTripExact) {
  Rng rng(1);
  const Matrix w = rng.uniform_matrix(12, 12, -1, 1);
  for (std::size_t h : {1u, 2u, 3u, 4u, 6u, 12u}) {
    EXPECT_TRUE(flatten_heads(reshape_heads(w, h)) == w);
  }
  EXPECT_THROW(reshape_heads(w, 5), ShapeError);
  EXPECT_THROW(flatten_heads(DenseTensor({2, 2})), ShapeError);
}

TEST(Reshape, MatchesAdapterStackLayout) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  const auto st = make_adapter(default_spec(Method::kLoRA, 2, 1.0, cfg, 3), cfg,
                               Init::kRandom);
  const auto updates = layer_updates(st);
  const DenseTensor stacked = materialize_all(st);
  for (std::size_t m = 0; m < cfg.matrices; ++m)
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const DenseTensor t = reshape_heads(updates[m * cfg.layers + l], cfg.heads);
      for (std::size_t i = 0; i < cfg.d; ++i)
        for (std::size_t j = 0; j < cfg.head_dim(); ++j)
          for (std::size_t h = 0; h < cfg.heads; ++h)
            EXPECT_EQ(t.at({i, j, h}), stacked.at({i, j, h, l, m}));
    }
}

TEST(Summary, HandComputed) {
  const SummaryStats s = summarize({10, 1, 3, 2});
  EXPECT_DOUBLE_EQ(s.mean, 4.0);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.max, 10.0);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(12.5));
  EXPECT_DOUBLE_EQ(summarize({5, 1, 3}).median, 3.0);
  EXPECT_THROW(summarize({}), ConfigError);
}

TEST(Decompose, RecoversCpStructuredInputs) {
  Rng rng(2);
  std::vector<Matrix> inputs;
  for (int k = 0; k < 4; ++k) {
    CPModel m({rng.uniform_matrix(16, 3, -1, 1), rng.uniform_matrix(4, 3, -1, 1),
               rng.uniform_matrix(4, 3, -1, 1)});
    inputs.push_back(flatten_heads(reconstruct(m)));
  }
  DecomposeOptions opt;
  opt.rank = 3;
  const auto st = decompose_adapter(inputs, 4, opt);
  ASSERT_EQ(st.reports.size(), 4u);
  EXPECT_LT(st.relative_error.mean, 1e-6);
  EXPECT_GT(st.r_squared.mean, 1.0 - 1e-10);
}

TEST(Decompose, DiagonalSingleHeadClosedForm) {
  Matrix w(2, 2);
  w << 3, 0,
       0, 1;
  DecomposeOptions opt;
  opt.rank = 1;
  const auto st = decompose_adapter({w}, 1, opt);
  EXPECT_NEAR(st.reports[0].relative_error, 1.0 / std::sqrt(10.0), 1e-8);
  EXPECT_NEAR(svd_tail(w, 1), 1.0 / std::sqrt(10.0), 1e-15);
}

TEST(Decompose, SingleHeadIsTruncatedSvd) {
  Rng rng(3);
  for (int k = 0; k < 3; ++k) {
    const Matrix w = rng.uniform_matrix(6, 5, -1, 1);
    for (std::size_t r : {1u, 2u}) {
      DecomposeOptions opt;
      opt.rank = r;
      opt.als.max_iters = 3000;
      opt.als.tol = 1e-13;
      const auto st = decompose_adapter({w}, 1, opt);
      EXPECT_NEAR(st.reports[0].relative_error,
                  svd_tail(w, static_cast<Eigen::Index>(r)), 1e-6);
    }
  }
}

TEST(Decompose, ScalingLeavesRelativeErrorUnchanged) {
  Rng rng(4);
  const Matrix w = rng.uniform_matrix(8, 8, -1, 1);
  DecomposeOptions opt;
  opt.rank = 2;
  const auto a = decompose_adapter({w}, 2, opt);
  const auto b = decompose_adapter({w * 16.0 / 3.0}, 2, opt);
  EXPECT_NEAR(a.relative_error.mean, b.relative_error.mean, 1e-9);
  EXPECT_NEAR(a.r_squared.mean, b.r_squared.mean, 1e-9);
}

TEST(Decompose, ErrorNonIncreasingInRank) {
  Rng rng(5);
  const Matrix w = rng.uniform_matrix(8, 8, -1, 1);
  double prev = 1.0;
  for (std::size_t r = 1; r <= 5; ++r) {
    DecomposeOptions opt;
    opt.rank = r;
    opt.als.max_iters = 2000;
    const double e = decompose_adapter({w}, 2, opt).relative_error.mean;
    EXPECT_LE(e, prev + 1e-9) << "rank " << r;
    prev = e;
  }
}

TEST(Decompose, ZeroMatrixSkippedWithWarning) {
  Rng rng(6);
  const Matrix w = rng.uniform_matrix(4, 4, -1, 1);
  DecomposeOptions opt;
  opt.rank = 1;
  const auto st = decompose_adapter({Matrix::Zero(4, 4), w}, 2, opt);
  ASSERT_EQ(st.reports.size(), 1u);
  EXPECT_EQ(st.indices[0], 1u);
  ASSERT_EQ(st.warnings.size(), 1u);
  EXPECT_NE(st.warnings[0].find("matrix 0"), std::string::npos);

  EXPECT_THROW(decompose_adapter({Matrix::Zero(4, 4)}, 2, opt), NumericError);
  Matrix bad = w;
  bad(0, 0) = INFINITY;
  EXPECT_THROW(decompose_adapter({bad}, 2, opt), NumericError);
}

TEST(Decompose, TableLayout) {
  Rng rng(7);
  DecomposeOptions opt;
  opt.rank = 1;
  const auto st = decompose_adapter({rng.uniform_matrix(4, 4, -1, 1)}, 2, opt);
  const std::string t = stats_table(st, ',');
  EXPECT_EQ(t.rfind("metric,Mean,Median,Max,Std\nRelative Error,", 0), 0u);
  EXPECT_NE(t.find("\nR^2,"), std::string::npos);
}

// Reduced-size version of the trained-LoRA vs LoRTA-structured contrast.
TEST(Decompose, TrainedLoRAFitsWorseThanLoRTA) {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 4;
  cfg.layers = 1;
  cfg.seq_len = 6;
  const auto task =
      make_teacher_task(cfg, default_spec(Method::kLoRA, 4, 1.0, cfg), 1);
  SgdOptions sgd;
  sgd.learning_rate = 0.5;
  sgd.momentum = 0.9;
  sgd.clip_norm = 0.1;
  DecomposeOptions opt;
  opt.rank = 4;
  double err[2];
  int k = 0;
  for (Method m : {Method::kLoRA, Method::kLoRTA}) {
    const auto st = make_adapter(default_spec(m, 4, 1.0, cfg, 2), cfg,
                                 Init::kZeroUpdate);
    const auto res = train(task.base, st, task.batch, 100, sgd);
    err[k++] = decompose_adapter(layer_updates(res.state), cfg.heads, opt)
                   .relative_error.mean;
  }
  EXPECT_GT(err[0], 10.0 * err[1]) << err[0] << " vs " << err[1];
}

}  // namespace
}  // namespace lorta
