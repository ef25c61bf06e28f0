// lorta: parameter counts, training, materialization, decomposition,
// gradient checks and load benchmarks for tensor adapters.
//
// Exit codes: 0 ok, 1 check failed or runtime error, 2 usage error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lorta/lorta.hpp"

namespace fs = std::filesystem;
using namespace lorta;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

struct DimArgs {
  std::string preset = "desk";
  std::size_t d = 64, heads = 4, layers = 2, matrices = 2, seq_len = 16;
  CLI::Option *d_opt = nullptr, *heads_opt = nullptr, *layers_opt = nullptr,
              *matrices_opt = nullptr;

  void add(CLI::App* app, bool with_preset) {
    if (with_preset) {
      app->add_option("--preset", preset, "desk or llama2-7b (counting only)")
          ->check(CLI::IsMember({"desk", "llama2-7b"}))
          ->capture_default_str();
    }
    d_opt = app->add_option("--d", d, "embedding dimension")->capture_default_str();
    heads_opt = app->add_option("--heads", heads, "attention heads H")->capture_default_str();
    layers_opt = app->add_option("--layers", layers, "layers L")->capture_default_str();
    matrices_opt = app->add_option("--matrices", matrices, "fine-tuned matrix types M")
                       ->capture_default_str();
    app->add_option("--seq-len", seq_len, "sequence length N")->capture_default_str();
  }

  // Applies the preset, then explicit flags, and records the result as the
  // option defaults so the manifest command line does not depend on presets.
  ModelConfig resolve(std::size_t default_matrices = 0) {
    ModelConfig c = preset == "llama2-7b" ? ModelConfig::llama2_7b() : ModelConfig{};
    if (preset != "llama2-7b" || d_opt->count()) c.d = d;
    if (preset != "llama2-7b" || heads_opt->count()) c.heads = heads;
    if (preset != "llama2-7b" || layers_opt->count()) c.layers = layers;
    c.matrices = default_matrices && !matrices_opt->count() ? default_matrices : matrices;
    c.seq_len = seq_len;
    c.validate();
    d_opt->default_str(std::to_string(c.d));
    heads_opt->default_str(std::to_string(c.heads));
    layers_opt->default_str(std::to_string(c.layers));
    matrices_opt->default_str(std::to_string(c.matrices));
    return c;
  }
};

struct AdapterArgs {
  std::string method = "lorta";
  std::size_t rank = 1;
  double alpha = 1.0;
  std::size_t nola_k = 4;
  std::vector<std::size_t> loretta_dims;

  void add(CLI::App* app, const std::string& default_method, std::size_t default_rank) {
    method = default_method;
    rank = default_rank;
    app->add_option("--method", method, "adapter method")->capture_default_str();
    app->add_option("--rank", rank, "rank r")->capture_default_str();
    app->add_option("--alpha", alpha, "scale numerator (update scaled by alpha/r)")
        ->capture_default_str();
    app->add_option("--nola-k", nola_k, "NOLA basis count")->capture_default_str();
    app->add_option("--loretta-dims", loretta_dims,
                    "LoReTTA tensorization k_1,...,k_D (product d*r)")
        ->delimiter(',');
  }

  AdapterSpec resolve(Method m, const ModelConfig& cfg, std::uint64_t seed) const {
    AdapterSpec s = default_spec(m, rank, alpha, cfg, seed);
    s.nola_k = m == Method::kNOLA ? nola_k : 0;
    if (m == Method::kLoReTTA && !loretta_dims.empty()) s.loretta_dims = loretta_dims;
    s.validate(cfg);
    return s;
  }
};

// Flat key=value record written next to every output set.
class Manifest {
 public:
  void set(const std::string& k, const std::string& v) { kv_[k] = v; }
  template <class T>
  void set(const std::string& k, const T& v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    kv_[k] = os.str();
  }
  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream out(dir / "manifest.txt");
    for (const auto& [k, v] : kv_) out << k << '=' << v << '\n';
  }

 private:
  std::map<std::string, std::string> kv_;
};

std::string quote_arg(const std::string& s) {
  if (s.find_first_of(" \t\"'") == std::string::npos && !s.empty()) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') q += '\\';
    q += c;
  }
  return q + "\"";
}

// Every option of the subcommand with its effective value, so the line can
// be replayed without relying on defaults.
std::string resolved_command(const CLI::App* sub, Manifest& m) {
  std::string line = sub->get_name();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || opt->get_lnames().empty()) continue;
    const std::string& lname = opt->get_lnames().front();
    if (lname == "help") continue;
    if (opt->get_expected_min() == 0) {
      m.set("opt." + lname, opt->count() ? "true" : "false");
      if (opt->count()) line += " --" + lname;
      continue;
    }
    std::string value;
    if (!opt->results().empty()) {
      for (std::size_t i = 0; i < opt->results().size(); ++i) {
        if (i) value += ',';
        value += opt->results()[i];
      }
    } else {
      value = opt->get_default_str();
    }
    if (value.empty() || value == "[]") continue;
    m.set("opt." + lname, value);
    line += " --" + lname + " " + quote_arg(value);
  }
  return line;
}

std::vector<Method> methods_from(const std::string& s) {
  if (s == "all") return {kAllMethods.begin(), kAllMethods.end()};
  return {parse_method(s)};
}

Init parse_init(const std::string& s) {
  if (s == "zero-update") return Init::kZeroUpdate;
  if (s == "random") return Init::kRandom;
  if (s == "zero") return Init::kZero;
  throw ConfigError("unknown init '" + s + "' (zero-update, random, zero)");
}

std::string fmt_pct(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * x << '%';
  return os.str();
}

// ---- count -------------------------------------------------------------------

struct CountCmd {
  DimArgs dims;
  AdapterArgs ad;
  bool matched = false;

  int run(Manifest& man) {
    const ModelConfig cfg = dims.resolve(matched ? 4 : 0);
    if (matched) {
      std::cout << "added_modes\ttensor_dims\tnum_tensors\tsavings\n";
      for (const auto& row : savings_breakdown(cfg, ad.rank)) {
        std::cout << row.added_modes << '\t' << row.tensor_dims << '\t'
                  << row.num_tensors << '\t' << fmt_pct(row.savings) << '\n';
      }
      const auto c = matched_tensor_rank(cfg, ad.rank);
      std::cout << "\nlora_rank\tlorta_tensor_rank\tlora_params\tlorta_params\tsavings\n"
                << c.lora_rank << '\t' << c.lorta_rank << '\t' << c.lora_params << '\t'
                << c.lorta_params << '\t' << fmt_pct(c.savings) << '\n';
      man.set("matched.savings", c.savings);
      return kExitOk;
    }
    std::cout << "method\trank\ttrainable_params\tformula\tsavings_vs_lora\n";
    for (Method m : methods_from(ad.method)) {
      const auto rep = count_params(ad.resolve(m, cfg, 0), cfg);
      std::cout << method_name(m) << '\t' << rep.rank << '\t' << rep.trainable_count
                << '\t' << rep.formula_text << '\t' << fmt_pct(rep.savings_vs_lora)
                << '\n';
      man.set("count." + std::string(method_name(m)), rep.trainable_count);
    }
    return kExitOk;
  }
};

// ---- gradcheck ---------------------------------------------------------------

struct GradcheckCmd {
  DimArgs dims;
  AdapterArgs ad;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double step = 1e-5;
  double threshold = 1e-5;
  std::string init = "random";
  bool corrupt = false;

  int run(Manifest& man) {
    const ModelConfig cfg = dims.resolve();
    bool all_ok = true;
    for (Method m : methods_from(ad.method)) {
      const AdapterSpec spec = ad.resolve(m, cfg, derive_seed(seed, 1));
      const auto task = make_teacher_task(cfg, spec, seed, batch, 1.0);
      const auto st = make_adapter(spec, cfg, parse_init(init));
      const auto rep = gradcheck(task.base, st, task.batch, step, corrupt);
      const bool ok = rep.passed(threshold);
      all_ok = all_ok && ok;
      std::cout << method_name(m) << " r=" << spec.rank << ": "
                << (ok ? "PASS" : "FAIL") << " max_rel_error=" << rep.max_rel_error
                << '\n';
      for (const auto& f : rep.factors) {
        std::cout << "  " << f.name << '\t' << f.max_rel_error << '\n';
      }
      man.set("gradcheck." + std::string(method_name(m)) + ".max_rel_error",
              rep.max_rel_error);
    }
    man.set("gradcheck.passed", all_ok ? "true" : "false");
    return all_ok ? kExitOk : kExitFailed;
  }
};

// ---- train -------------------------------------------------------------------

struct TrainCmd {
  DimArgs dims;
  AdapterArgs ad;
  std::string task = "teacher-match";
  std::string teacher_method = "lorta";
  std::size_t teacher_rank = 1;
  double teacher_norm = 4.0;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  double lr = 3.0;
  double momentum = 0.9;
  double clip = 0.1;
  std::string init = "zero-update";
  fs::path out = "lorta-train";

  int run(Manifest& man) {
    const ModelConfig cfg = dims.resolve();
    const Method m = parse_method(ad.method);
    const AdapterSpec spec = ad.resolve(m, cfg, derive_seed(seed, 300));
    TransformerWeights base;
    Batch data;
    if (task == "teacher-match") {
      AdapterArgs t = ad;
      t.rank = teacher_rank;
      const Method tm = parse_method(teacher_method);
      auto tt = make_teacher_task(cfg, t.resolve(tm, cfg, 0), seed, batch, teacher_norm);
      base = std::move(tt.base);
      data = std::move(tt.batch);
    } else if (task == "regression") {
      base = random_weights(cfg, seed);
      LossSpec ls;
      ls.kind = LossKind::kMseRegression;
      ls.target_seed = derive_seed(seed, 200);
      ls.batch_size = batch;
      data = make_batch(cfg, ls);
    } else {
      throw ConfigError("unknown task '" + task + "' (teacher-match, regression)");
    }
    SgdOptions opt;
    opt.learning_rate = lr;
    opt.momentum = momentum;
    opt.clip_norm = clip;
    const auto res = train(base, make_adapter(spec, cfg, parse_init(init)), data, steps, opt);

    fs::create_directories(out);
    {
      std::ofstream csv(out / "loss.csv");
      csv << "step,loss\n" << std::setprecision(17);
      for (std::size_t i = 0; i < res.losses.size(); ++i) {
        csv << i << ',' << res.losses[i] << '\n';
      }
    }
    if (!res.diverged) save_checkpoint(res.state, out / "adapter.lrta");
    const double first = res.losses.front(), last = res.losses.back();
    std::cout << "initial_loss=" << first << " final_loss=" << last
              << " reduction=" << first / last << (res.diverged ? " DIVERGED" : "")
              << '\n';
    man.set("output.loss_csv", (out / "loss.csv").string());
    if (!res.diverged) man.set("output.checkpoint", (out / "adapter.lrta").string());
    man.set("result.initial_loss", first);
    man.set("result.final_loss", last);
    man.set("result.steps_run", res.losses.size() - 1);
    man.set("result.diverged", res.diverged ? "true" : "false");
    return res.diverged ? kExitFailed : kExitOk;
  }
};

// ---- materialize -------------------------------------------------------------

struct MaterializeCmd {
  DimArgs dims;
  AdapterArgs ad;
  fs::path checkpoint;
  std::uint64_t seed = 0;
  std::string init = "random";
  fs::path out = "lorta-materialize";

  int run(Manifest& man) {
    AdapterState st;
    if (!checkpoint.empty()) {
      st = load_checkpoint(checkpoint);
    } else {
      const ModelConfig cfg = dims.resolve();
      st = make_adapter(ad.resolve(parse_method(ad.method), cfg, seed), cfg,
                        parse_init(init));
    }
    fs::create_directories(out);
    const auto updates = layer_updates(st);
    const ModelConfig& cfg = st.config;
    for (std::size_t m = 0; m < cfg.matrices; ++m)
      for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto name = "update_m" + std::to_string(m) + "_l" + std::to_string(l) + ".csv";
        write_matrix_csv(updates[m * cfg.layers + l], out / name);
      }
    std::cout << "wrote " << updates.size() << " update matrices ("
              << cfg.d << " x " << cfg.d << ") to " << out.string() << '\n';
    man.set("output.dir", out.string());
    man.set("result.matrices", updates.size());
    man.set("adapter.method", std::string(method_name(st.spec.method)));
    return kExitOk;
  }
};

// ---- decompose ---------------------------------------------------------------

struct DecomposeCmd {
  fs::path input;
  std::size_t heads = 4;
  std::size_t rank = 8;
  std::size_t restarts = 3;
  std::size_t max_iters = 500;
  std::uint64_t seed = 0;
  fs::path out = "lorta-decompose";

  int run(Manifest& man) {
    if (!fs::is_directory(input)) {
      throw ConfigError("--input '" + input.string() + "' is not a directory");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(input)) {
      const auto ext = e.path().extension();
      if (e.is_regular_file() && (ext == ".csv" || ext == ".lrta")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no .csv or .lrta files in " + input.string());
    std::vector<Matrix> mats;
    std::vector<std::string> labels;
    for (const auto& f : files) {
      if (f.extension() == ".lrta") {
        const auto st = load_checkpoint(f);
        const auto ups = layer_updates(st);
        for (std::size_t i = 0; i < ups.size(); ++i) {
          mats.push_back(ups[i]);
          labels.push_back(f.filename().string() + "#" + std::to_string(i));
        }
      } else {
        mats.push_back(read_matrix_csv(f));
        labels.push_back(f.filename().string());
      }
    }
    DecomposeOptions opt;
    opt.rank = rank;
    opt.restarts = restarts;
    opt.als.max_iters = max_iters;
    opt.als.seed = seed;
    const auto stats = decompose_adapter(mats, heads, opt);
    for (const auto& w : stats.warnings) std::cerr << "warning: " << w << '\n';

    fs::create_directories(out);
    const std::string table = stats_table(stats);
    std::ofstream(out / "stats.tsv") << table;
    {
      std::ofstream pm(out / "per_matrix.csv");
      pm << "source,relative_error,r_squared,iterations\n" << std::setprecision(17);
      for (std::size_t i = 0; i < stats.reports.size(); ++i) {
        const auto& r = stats.reports[i];
        pm << labels[stats.indices[i]] << ',' << r.relative_error << ','
           << r.r_squared << ',' << r.iterations << '\n';
      }
    }
    std::cout << table;
    man.set("output.stats", (out / "stats.tsv").string());
    man.set("output.per_matrix", (out / "per_matrix.csv").string());
    man.set("result.matrices", stats.reports.size());
    man.set("result.skipped", stats.warnings.size());
    man.set("result.mean_relative_error", stats.relative_error.mean);
    man.set("result.mean_r_squared", stats.r_squared.mean);
    return kExitOk;
  }
};

// ---- bench -------------------------------------------------------------------

struct BenchCmd {
  DimArgs dims;
  AdapterArgs ad;
  std::vector<std::size_t> ns{1, 10, 100};
  std::size_t reps = 20;
  std::uint64_t seed = 0;
  fs::path out = "lorta-bench";

  int run(Manifest& man) {
    const ModelConfig cfg = dims.resolve();
    std::vector<Method> methods;
    if (ad.method == "all") {
      methods = {Method::kLoRTA, Method::kLoTR, Method::kLoRA};
    } else {
      methods = methods_from(ad.method);
    }
    fs::create_directories(out);
    const fs::path scratch = out / "files";
    BenchOptions bo;
    bo.reps = reps;
    bo.seed = seed;
    std::ofstream csv(out / "bench.csv");
    csv << bench_csv_header() << '\n';
    std::cout << bench_csv_header() << '\n';
    for (std::size_t n : ns)
      for (Method m : methods) {
        const auto row = bench_concurrent(ad.resolve(m, cfg, seed), cfg, n,
                                          scratch / std::string(method_name(m)), bo);
        fs::remove_all(scratch / std::string(method_name(m)));
        csv << bench_csv_row(row) << '\n';
        std::cout << bench_csv_row(row) << '\n';
      }
    fs::remove_all(scratch);
    man.set("output.csv", (out / "bench.csv").string());
    return kExitOk;
  }
};

std::string read_manifest_command(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open manifest '" + p.string() + "'");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("command=", 0) == 0) return line.substr(8);
  }
  throw ConfigError("manifest '" + p.string() + "' has no command line");
}

int run_cli(int argc, char** argv, const std::string* replay_line);

int dispatch(CLI::App& app, const std::vector<std::pair<CLI::App*, std::function<int(Manifest&)>>>& cmds,
             const std::map<CLI::App*, fs::path*>& outs) {
  for (const auto& [sub, fn] : cmds) {
    if (!sub->parsed()) continue;
    Manifest man;
    man.set("tool", "lorta");
    man.set("tool_version", kVersion);
    man.set("subcommand", sub->get_name());
    const auto out_it = outs.find(sub);
    const fs::path* out = out_it == outs.end() ? nullptr : out_it->second;
    auto finish = [&](const std::string& status, int code) {
      man.set("command", resolved_command(sub, man));
      man.set("status", status);
      if (out && !out->empty()) man.write(*out);
      return code;
    };
    try {
      const int code = fn(man);
      return finish(code == kExitOk ? "ok" : "failed", code);
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      man.set("error", e.what());
      return finish("failed", kExitUsage);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      man.set("error", e.what());
      return finish("failed", kExitFailed);
    }
  }
  (void)app;
  return kExitUsage;
}

int run_cli(int argc, char** argv, const std::string* replay_line) {
  CLI::App app{"Low-rank tensor adapter toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CountCmd count;
  auto* c = app.add_subcommand("count", "trainable parameter counts");
  count.dims.add(c, true);
  count.ad.add(c, "all", 4);
  c->add_flag("--matched-tensor-rank", count.matched,
              "compare LoRA rank r with LoRTA at tensor rank r*M*L (M defaults to 4)");
  fs::path count_out;
  c->add_option("--out", count_out, "directory for the manifest");

  GradcheckCmd gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc.dims.d = 8;
  gc.dims.heads = 2;
  gc.dims.seq_len = 3;
  gc.dims.add(g, false);
  gc.ad.add(g, "lorta", 2);
  g->add_option("--seed", gc.seed)->capture_default_str();
  g->add_option("--batch", gc.batch)->capture_default_str();
  g->add_option("--step", gc.step, "central-difference step")->capture_default_str();
  g->add_option("--threshold", gc.threshold)->capture_default_str();
  g->add_option("--init", gc.init, "random, zero-update or zero")->capture_default_str();
  g->add_flag("--corrupt", gc.corrupt, "perturb the analytic gradient (negative control)");
  fs::path gc_out;
  g->add_option("--out", gc_out, "directory for the manifest");

  TrainCmd tr;
  auto* t = app.add_subcommand("train", "train an adapter on a toy task");
  tr.dims.add(t, false);
  tr.ad.add(t, "lorta", 1);
  t->add_option("--task", tr.task, "teacher-match or regression")->capture_default_str();
  t->add_option("--teacher-method", tr.teacher_method)->capture_default_str();
  t->add_option("--teacher-rank", tr.teacher_rank)->capture_default_str();
  t->add_option("--teacher-norm", tr.teacher_norm,
                "Frobenius norm of the teacher update")->capture_default_str();
  t->add_option("--steps", tr.steps)->capture_default_str();
  t->add_option("--batch", tr.batch)->capture_default_str();
  t->add_option("--seed", tr.seed)->capture_default_str();
  t->add_option("--lr", tr.lr)->capture_default_str();
  t->add_option("--momentum", tr.momentum)->capture_default_str();
  t->add_option("--clip", tr.clip, "gradient-norm clip, 0 disables")->capture_default_str();
  t->add_option("--init", tr.init)->capture_default_str();
  t->add_option("--out", tr.out)->capture_default_str();

  MaterializeCmd mt;
  auto* ma = app.add_subcommand("materialize", "write per-layer update matrices as CSV");
  mt.dims.add(ma, false);
  mt.ad.add(ma, "lorta", 2);
  ma->add_option("--checkpoint", mt.checkpoint, "load the adapter from a checkpoint");
  ma->add_option("--seed", mt.seed)->capture_default_str();
  ma->add_option("--init", mt.init)->capture_default_str();
  ma->add_option("--out", mt.out)->capture_default_str();

  DecomposeCmd dc;
  auto* de = app.add_subcommand("decompose", "CP-decompose matrix adapter updates");
  de->add_option("--input", dc.input, "directory of .csv matrices or .lrta checkpoints")
      ->required();
  de->add_option("--heads", dc.heads)->capture_default_str();
  de->add_option("--rank", dc.rank)->capture_default_str();
  de->add_option("--restarts", dc.restarts)->capture_default_str();
  de->add_option("--max-iters", dc.max_iters)->capture_default_str();
  de->add_option("--seed", dc.seed)->capture_default_str();
  de->add_option("--out", dc.out)->capture_default_str();

  BenchCmd bc;
  auto* be = app.add_subcommand("bench", "checkpoint load-latency benchmark");
  bc.dims.d = bench_config().d;
  bc.dims.add(be, false);
  bc.ad.add(be, "all", 4);
  be->add_option("--n", bc.ns, "concurrent adapters (comma list)")->delimiter(',')
      ->capture_default_str();
  be->add_option("--reps", bc.reps)->capture_default_str();
  be->add_option("--seed", bc.seed)->capture_default_str();
  be->add_option("--out", bc.out)->capture_default_str();

  fs::path manifest_path;
  auto* rp = app.add_subcommand("replay", "re-run the command recorded in a manifest");
  rp->add_option("manifest", manifest_path)->required();

  try {
    if (replay_line) {
      app.parse(*replay_line, false);
    } else {
      app.parse(argc, argv);
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (rp->parsed()) {
    if (replay_line) {
      std::cerr << "error: a manifest cannot replay another replay\n";
      return kExitUsage;
    }
    try {
      const std::string line = read_manifest_command(manifest_path);
      return run_cli(0, nullptr, &line);
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitUsage;
    }
  }

  return dispatch(app,
                  {{c, [&](Manifest& m) { return count.run(m); }},
                   {g, [&](Manifest& m) { return gc.run(m); }},
                   {t, [&](Manifest& m) { return tr.run(m); }},
                   {ma, [&](Manifest& m) { return mt.run(m); }},
                   {de, [&](Manifest& m) { return dc.run(m); }},
                   {be, [&](Manifest& m) { return bc.run(m); }}},
                  {{c, &count_out}, {g, &gc_out}, {t, &tr.out}, {ma, &mt.out},
                   {de, &dc.out}, {be, &bc.out}});
}

}  // namespace

int main(int argc, char** argv) { return run_cli(argc, argv, nullptr); }
