#pragma once

// Load-latency benchmark for n concurrent adapters: n distinct checkpoints
// are written once, then each repetition reads and instantiates all of them
// sequentially and the wall time of the whole batch is recorded.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "lorta/checkpoint.hpp"
#include "lorta/decompose.hpp"

namespace lorta {

struct BenchRow {
  Method method = Method::kLoRTA;
  std::size_t rank = 0;
  std::size_t n = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::uint64_t bytes = 0;        // size of one checkpoint file
  std::vector<double> samples_ms; // one per repetition
};

struct BenchOptions {
  std::size_t reps = 20;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
};

// Writes n checkpoints of the given spec (seeds differ) under dir.
inline std::vector<std::filesystem::path> write_bench_files(
    const AdapterSpec& spec, const ModelConfig& cfg, std::size_t n,
    const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < n; ++i) {
    AdapterSpec s = spec;
    s.seed = derive_seed(seed, i);
    const auto path = dir / (std::string(method_name(spec.method)) + "_r" +
                             std::to_string(spec.rank) + "_" + std::to_string(i) +
                             ".lrta");
    save_checkpoint(make_adapter(s, cfg, Init::kRandom), path);
    paths.push_back(path);
  }
  return paths;
}

// Wall time in milliseconds to load every file once.
inline double time_loads(const std::vector<std::filesystem::path>& paths) {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t sink = 0;
  for (const auto& p : paths) sink += load_checkpoint(p).trainable.size();
  const auto t1 = std::chrono::steady_clock::now();
  if (sink == 0) throw FormatError("benchmark: loaded adapters are empty");
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

inline BenchRow bench_concurrent(const AdapterSpec& spec, const ModelConfig& cfg,
                                 std::size_t n, const std::filesystem::path& dir,
                                 const BenchOptions& opt = {}) {
  if (n < 1) throw ConfigError("bench: n must be >= 1");
  if (opt.reps < 20) throw ConfigError("bench: reps must be >= 20");
  const auto paths = write_bench_files(spec, cfg, n, dir, opt.seed);
  BenchRow row{spec.method, spec.rank, n, 0.0, 0.0,
               std::filesystem::file_size(paths.front()), {}};
  for (std::size_t i = 0; i < opt.warmup; ++i) time_loads(paths);
  for (std::size_t i = 0; i < opt.reps; ++i) row.samples_ms.push_back(time_loads(paths));
  const SummaryStats s = summarize(row.samples_ms);
  row.mean_ms = s.mean;
  row.std_ms = s.std;
  return row;
}

inline std::string bench_csv_header() { return "method,r,n,mean_ms,std_ms,bytes"; }

inline std::string bench_csv_row(const BenchRow& r) {
  std::ostringstream os;
  os << method_name(r.method) << ',' << r.rank << ',' << r.n << ',' << r.mean_ms
     << ',' << r.std_ms << ',' << r.bytes;
  return os.str();
}

// Dimensions for the load benchmark. At d = 64, L = 2 LoTR and LoRA have the
// same size at r = 64, so the benchmark widens d.
inline ModelConfig bench_config() {
  ModelConfig c;
  c.d = 256;
  return c;
}

}  // namespace lorta
