// Acceptance gate: one line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "lorta/lorta.hpp"

using namespace lorta;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1, 2: counts ------------------------------------------------------------

Outcome table1_counts() {
  const ModelConfig cfg = ModelConfig::llama2_7b(2);
  struct Cell {
    Method m;
    std::size_t r;
    std::uint64_t expect;
  };
  const Cell cells[] = {{Method::kLoRA, 4, 2097152},
                        {Method::kLoRTA, 4, 17160},
                        {Method::kLoRTA, 64, 274560},
                        {Method::kFacTTT, 64, 786432},
                        {Method::kFacTTK, 64, 790528}};
  Outcome o;
  for (const auto& c : cells) {
    const auto got = count_params(default_spec(c.m, c.r, 1.0, cfg), cfg).trainable_count;
    if (got != c.expect) o.pass = false;
    o.detail += std::string(method_name(c.m)) + " r" + std::to_string(c.r) + "=" +
                std::to_string(got) + " ";
  }
  return o;
}

Outcome matched_savings() {
  const auto c = matched_tensor_rank(ModelConfig::llama2_7b(4), 1);
  const double pct = 100.0 * c.savings;
  return {std::abs(pct - 47.6) <= 0.1, fmt("savings %.3f%%", pct) + " at M=4"};
}

// ---- 3: gradients ------------------------------------------------------------

Outcome gradient_check() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.seq_len = 3;
  double worst = 0.0;
  std::size_t cases = 0;
  for (Method m : kAllMethods)
    for (std::size_t r : {1u, 2u})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto task =
            make_teacher_task(cfg, default_spec(m, r, 1.5, cfg), seed + 100, 2, 1.0);
        const auto st = make_adapter(default_spec(m, r, 1.5, cfg, seed), cfg, Init::kRandom);
        worst = std::max(worst, gradcheck(task.base, st, task.batch, 1e-5).max_rel_error);
        ++cases;
      }
  return {worst < 1e-5, std::to_string(cases) + " cases, max rel err " + fmt("%.2e", worst)};
}

// ---- 4: merge ----------------------------------------------------------------

Outcome merge_equivalence() {
  const ModelConfig cfg;
  double worst = 0.0;
  for (Method m : kAllMethods)
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto w = random_weights(cfg, seed);
      const auto st = make_adapter(default_spec(m, 2, 2.0, cfg, seed + 50), cfg, Init::kRandom);
      const Matrix x = random_input(cfg, seed + 99);
      const Matrix a = forward_output(w, &st, x);
      const Matrix b = forward_output(merge(w, st), nullptr, x);
      worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
    }
  return {worst <= 1e-10, "max abs diff " + fmt("%.2e", worst)};
}

// ---- 5: CP machinery ---------------------------------------------------------

CPModel random_cp(std::uint64_t seed, const Shape& shape, std::size_t rank) {
  Rng rng(seed);
  std::vector<Matrix> f;
  for (std::size_t e : shape) {
    f.push_back(rng.uniform_matrix(static_cast<Eigen::Index>(e),
                                   static_cast<Eigen::Index>(rank), -1.0, 1.0));
  }
  return CPModel(std::move(f));
}

Outcome cp_machinery() {
  double worst_fit = 0.0;
  const std::vector<Shape> shapes{{16, 8, 4}, {8, 6, 5, 4}, {12, 10, 6}};
  for (const auto& shape : shapes)
    for (std::size_t r = 1; r <= 4; ++r)
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const DenseTensor t = reconstruct(random_cp(seed * 31 + r, shape, r));
        AlsOptions opt;
        opt.max_iters = 2000;
        opt.tol = 1e-14;
        opt.seed = seed;
        worst_fit = std::max(worst_fit, cp_als_best(t, r, 3, opt).report.relative_error);
      }

  // Fixing all modes past the first two: A1 * prod_n Diag(A_n(i_n, :)) * A2^T.
  double worst_slice = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const CPModel m = random_cp(seed, {6, 5, 3, 2, 2}, 3);
    const DenseTensor t = reconstruct(m);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 2; ++c) {
          const Eigen::RowVectorXd diag =
              m.factors[2].row(static_cast<Eigen::Index>(a))
                  .cwiseProduct(m.factors[3].row(static_cast<Eigen::Index>(b)))
                  .cwiseProduct(m.factors[4].row(static_cast<Eigen::Index>(c)));
          const Matrix expect = m.factors[0] * diag.asDiagonal() * m.factors[1].transpose();
          const Matrix got = slice(t, {{2, a}, {3, b}, {4, c}}).as_matrix();
          worst_slice = std::max(worst_slice, (got - expect).cwiseAbs().maxCoeff());
        }
  }
  return {worst_fit < 1e-6 && worst_slice <= 1e-12,
          "ALS max rel err " + fmt("%.2e", worst_fit) + ", slice max diff " +
              fmt("%.2e", worst_slice)};
}

// ---- 6, 7: materialization identities ---------------------------------------

Outcome lorta_identity() {
  ModelConfig cfg;
  cfg.matrices = 3;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto st = make_adapter(default_spec(Method::kLoRTA, 1 + seed % 4, 2.5, cfg, seed),
                                 cfg, Init::kRandom);
    // Entry-wise sum over the rank, independent of reconstruct().
    const auto& A = find_factor(st.trainable, "A");
    const auto& B = find_factor(st.trainable, "B");
    const auto& CH = find_factor(st.trainable, "C_H");
    const auto& CL = find_factor(st.trainable, "C_L");
    const auto& CM = find_factor(st.trainable, "C_M");
    const DenseTensor got = materialize_all(st);
    const std::size_t dh = cfg.d / cfg.heads, r = st.spec.rank;
    for (std::size_t i = 0; i < cfg.d; ++i)
      for (std::size_t j = 0; j < dh; ++j)
        for (std::size_t h = 0; h < cfg.heads; ++h)
          for (std::size_t l = 0; l < cfg.layers; ++l)
            for (std::size_t m = 0; m < cfg.matrices; ++m) {
              double v = 0.0;
              for (std::size_t k = 0; k < r; ++k) {
                v += A.at({i, k}) * B.at({j, k}) * CH.at({h, k}) * CL.at({l, k}) *
                     CM.at({m, k});
              }
              worst = std::max(worst, std::abs(st.spec.scale() * v - got.at({i, j, h, l, m})));
            }
  }
  return {worst <= 1e-12, "max abs diff " + fmt("%.2e", worst)};
}

Outcome nola_dual_forms() {
  const ModelConfig cfg;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto st = make_adapter(default_spec(Method::kNOLA, 3, 1.0, cfg, seed), cfg,
                                 Init::kRandom);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      worst = std::max(worst, (nola_update_double_sum(st, l) - nola_update_factorized(st, l))
                                  .cwiseAbs()
                                  .maxCoeff());
    }
  }
  return {worst <= 1e-10, "max abs diff " + fmt("%.2e", worst)};
}

// ---- 8: decomposition contrast -----------------------------------------------

Outcome decomposition_contrast() {
  const ModelConfig cfg;
  const std::size_t r = 8;
  SgdOptions opt;
  opt.learning_rate = 0.5;
  opt.momentum = 0.9;
  opt.clip_norm = 0.1;
  Outcome o;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto task = make_teacher_task(cfg, default_spec(Method::kLoRA, r, 1.0, cfg), seed);
    double err[2];
    int i = 0;
    for (Method m : {Method::kLoRA, Method::kLoRTA}) {
      const auto st = make_adapter(default_spec(m, r, 1.0, cfg, seed + 50), cfg,
                                   Init::kZeroUpdate);
      const auto res = train(task.base, st, task.batch, 200, opt);
      DecomposeOptions d;
      d.rank = r;
      err[i++] = decompose_adapter(layer_updates(res.state), cfg.heads, d).relative_error.mean;
    }
    const double ratio = err[0] / err[1];
    if (!(ratio >= 10.0)) o.pass = false;
    o.detail += "seed " + std::to_string(seed) + ": lora " + fmt("%.3f", err[0]) +
                " lorta " + fmt("%.2e", err[1]) + " (" + fmt("%.0fx", ratio) + ") ";
  }
  return o;
}

// ---- 9: load benchmark -------------------------------------------------------

Outcome io_benchmark() {
  const ModelConfig cfg = bench_config();
  const fs::path dir =
      fs::temp_directory_path() / ("lorta_acceptance_" + std::to_string(::getpid()));
  Outcome o;
  std::size_t ordered = 0, cells = 0;
  for (std::size_t r : {4u, 64u})
    for (std::size_t n : {1u, 10u, 100u}) {
      std::map<Method, double> mean;
      for (Method m : {Method::kLoRTA, Method::kLoTR, Method::kLoRA}) {
        const auto spec = default_spec(m, r, 1.0, cfg);
        const auto row = bench_concurrent(spec, cfg, n, dir / std::string(method_name(m)));
        fs::remove_all(dir / std::string(method_name(m)));
        const auto expect_bytes =
            checkpoint_header_size(spec) + 4 * count_params(spec, cfg).trainable_count;
        if (row.bytes != expect_bytes || row.samples_ms.size() != 20) o.pass = false;
        mean[m] = row.mean_ms;
      }
      ++cells;
      if (mean[Method::kLoRTA] < mean[Method::kLoTR] &&
          mean[Method::kLoTR] < mean[Method::kLoRA]) {
        ++ordered;
      }
    }
  fs::remove_all(dir);
  if (ordered != cells) o.pass = false;
  o.detail = "d=" + std::to_string(cfg.d) + ", ordering held in " + std::to_string(ordered) +
             "/" + std::to_string(cells) + " cells, payload = 4 x count" +
             (o.pass ? "" : " (check failed)");
  return o;
}

// ---- 10: realizable training -------------------------------------------------

Outcome realizable_training() {
  const ModelConfig cfg;
  SgdOptions opt;
  opt.learning_rate = 3.0;
  opt.momentum = 0.9;
  opt.clip_norm = 0.1;
  Outcome o;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto task =
        make_teacher_task(cfg, default_spec(Method::kLoRTA, 1, 1.0, cfg), seed);
    const auto st = make_adapter(
        default_spec(Method::kLoRTA, 1, 1.0, cfg, derive_seed(seed, 300)), cfg,
        Init::kZeroUpdate);
    const auto res = train(task.base, st, task.batch, 2000, opt);
    const double frac = res.losses.back() / res.losses.front();
    if (res.diverged || !(frac <= 0.01)) o.pass = false;
    o.detail += "seed " + std::to_string(seed) + ": " + fmt("%.1e", frac) + " ";
  }
  o.detail = "final/initial loss " + o.detail;
  return o;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "parameter counts (Llama2-7b dims)", 1, table1_counts},
      {2, "matched-rank savings", 1, matched_savings},
      {3, "gradient check", 60, gradient_check},
      {4, "merge equivalence", 60, merge_equivalence},
      {5, "CP-ALS recovery and slice formula", 60, cp_machinery},
      {6, "LoRTA tensor identity", 0, lorta_identity},
      {7, "NOLA dual forms", 0, nola_dual_forms},
      {8, "decomposition contrast (>= 10x)", 0, decomposition_contrast},
      {9, "load latency ordering", 0, io_benchmark},
      {10, "realizable-target training", 120, realizable_training},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt(" over budget of %.0f s", c.budget_s);
    }
    failed += !o.pass;
    std::printf("%s  %2d  %-36s %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
