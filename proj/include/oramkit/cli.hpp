#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <csignal>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oramkit/analysis.hpp"
#include "oramkit/storage.hpp"
#include "oramkit/wire.hpp"
#include "oramkit/workload.hpp"

/// @brief The oramkit command line: run, bench, distinguish, gen, serve.
/// Exit codes: 0 success, 1 oracle divergence or failed check, 2 bad
/// configuration or input.
namespace oramkit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitConfig = 2;

/// Diagnostics on stderr, enabled by ORAMKIT_LOG (any value but "0"/"off").
inline bool log_enabled() {
  const char* v = std::getenv("ORAMKIT_LOG");
  if (v == nullptr) return false;
  std::string s(v);
  return !s.empty() && s != "0" && s != "off";
}

inline void log(const std::string& msg) {
  if (log_enabled()) std::cerr << "oramkit: " << msg << '\n';
}

struct StructureFlags {
  std::string variant = "sqrt";
  std::string mode = "deamortized";
  std::string table = "bucket";
  std::uint64_t n = 64;
  std::string seed = "0";
  unsigned top_level = 2;
  std::uint64_t bucket_size = 8;
  double eps = 0.5;
  std::size_t stash_size = 8;
  CLI::Option* table_opt = nullptr;
  CLI::Option* hier_opts[4] = {};

  void add_to(CLI::App& app, bool with_mode = true) {
    app.add_option("--variant", variant, "sqrt or hier")->capture_default_str();
    if (with_mode)
      app.add_option("--mode", mode, "amortized or deamortized")->capture_default_str();
    table_opt = app.add_option("--table", table, "bucket or cuckoo (hier only)");
    app.add_option("--n", n, "logical capacity")->capture_default_str();
    app.add_option("--seed", seed, "hex seed")->capture_default_str();
    hier_opts[0] = app.add_option("--top-level", top_level, "hier top level");
    hier_opts[1] = app.add_option("--bucket-size", bucket_size, "hier bucket slots");
    hier_opts[2] = app.add_option("--eps", eps, "hier cuckoo expansion");
    hier_opts[3] = app.add_option("--stash-size", stash_size, "hier cuckoo stash");
  }

  static Mode parse_mode(const std::string& m) {
    if (m == "amortized") return Mode::Amortized;
    if (m == "deamortized") return Mode::Deamortized;
    throw ConfigError("mode must be amortized or deamortized");
  }

  VariantConfig config(const std::string& mode_name) const {
    VariantConfig c;
    if (variant == "sqrt") {
      c.variant = Variant::Sqrt;
      if (table_opt && table_opt->count() > 0)
        throw ConfigError("--table applies to the hier variant only");
      for (auto* o : hier_opts)
        if (o && o->count() > 0)
          throw ConfigError(o->get_name() + " applies to the hier variant only");
    } else if (variant == "hier") {
      c.variant = Variant::Hier;
      if (table == "bucket")
        c.table = TableKind::Bucket;
      else if (table == "cuckoo")
        c.table = TableKind::Cuckoo;
      else
        throw ConfigError("table must be bucket or cuckoo");
    } else {
      throw ConfigError("variant must be sqrt or hier");
    }
    c.mode = parse_mode(mode_name);
    c.n = n;
    c.seed = Rng::from_hex(seed).seed();
    c.top_level = top_level;
    c.bucket_size = bucket_size;
    c.eps = eps;
    c.stash_size = stash_size;
    // construct once to surface parameter errors before any work
    if (c.variant == Variant::Sqrt)
      SqrtParams::for_capacity(c.n);
    else
      HierParams::for_config(c);
    return c;
  }
  VariantConfig config() const { return config(mode); }
};

inline std::unique_ptr<Backend> open_backend(const std::string& target, std::size_t cell) {
  if (target == "mem") return std::make_unique<MemoryBackend>(cell);
  if (target.rfind("file:", 0) == 0) {
    std::filesystem::path dir = target.substr(5);
    if (dir.empty()) throw ConfigError("file backend needs a directory");
    std::filesystem::create_directories(dir);
    return std::make_unique<FileBackend>(dir, cell);
  }
  if (target.rfind("tcp:", 0) == 0) return wire::TcpBackend::connect(target.substr(4), cell);
  throw ConfigError("backend must be mem, file:DIR or tcp:HOST:PORT");
}

inline std::string seed_hex(const Rng::Seed& s) {
  return to_hex(std::span<const std::uint8_t>(s.data(), s.size()));
}

/// The j-th seed of a bench or battery derived from the base seed.
inline Rng::Seed derive_seed(const Rng::Seed& base, std::uint64_t j) {
  PrfKey k{base};
  return PrfKey::from_words(prf_eval(k, "derived-seed", 2 * j),
                            prf_eval(k, "derived-seed", 2 * j + 1))
      .bytes;
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || used == 0) throw ConfigError("bad list entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct RunFlags {
  StructureFlags s;
  std::string workload;
  std::string trace_out;
  std::string result_out;
  std::string backend = "mem";
  bool no_oracle = false;
};

inline int cmd_run(const RunFlags& f) {
  VariantConfig cfg = f.s.config();
  std::ifstream in(f.workload);
  if (!in) throw ConfigError("cannot open workload " + f.workload);
  auto ops = read_workload(in, cfg.n, cfg.block_size);
  log("run " + cfg.name() + " n=" + std::to_string(cfg.n) + " ops=" +
      std::to_string(ops.size()) + " backend=" + f.backend);

  auto backend = open_backend(f.backend, cell_size_for(cfg.block_size));
  TraceRecorder rec(!f.trace_out.empty());
  TracedStore store(*backend, rec);
  auto oram = make_oram(cfg, store);

  OracleResult oracle;
  std::vector<std::uint64_t> own;
  if (f.no_oracle) {
    for (const auto& op : ops) {
      oram->access(op);
      own.push_back(oram->last_stats().total());
    }
    oracle.steps = ops.size();
  } else {
    PlainRam ram(cfg.n, cfg.block_size);
    for (const auto& op : ops) {
      ++oracle.steps;
      Bytes want = ram.apply(op);
      Bytes got = oram->access(op);
      own.push_back(oram->last_stats().total());
      if (got != want) {
        oracle.divergence = Divergence{oracle.steps, std::move(want), std::move(got), {}};
        break;
      }
    }
  }

  auto counts = request_counts(rec, own.size());
  auto profile = summarize_counts(cfg.name(), cfg.n, counts);
  nlohmann::json res;
  res["variant"] = cfg.name();
  res["n"] = cfg.n;
  res["seed"] = seed_hex(cfg.seed);
  res["steps"] = oracle.steps;
  res["oracle"] = f.no_oracle ? "off" : oracle.pass() ? "pass" : "divergence";
  if (oracle.divergence)
    res["divergence"] = {{"step", oracle.divergence->step},
                         {"expected", to_hex(oracle.divergence->expected)},
                         {"got", to_hex(oracle.divergence->got)}};
  res["retries"] = oram->retries();
  res["trace_events"] = rec.total();
  res["profile"] = profile_json(profile);

  if (!f.trace_out.empty()) save_trace(f.trace_out, rec.events());
  if (!f.result_out.empty()) {
    std::ofstream os(f.result_out);
    if (!os) throw ConfigError("cannot write " + f.result_out);
    os << res.dump(2) << '\n';
  }
  std::cout << res.dump() << '\n';
  return oracle.pass() ? kExitOk : kExitFail;
}

// ---------------------------------------------------------------------------

struct BenchFlags {
  StructureFlags s;
  std::string modes = "deamortized";
  std::string n_list;
  std::uint64_t ops_per_n = 8;
  std::uint64_t seeds = 1;
  std::string out;
};

inline int cmd_bench(const BenchFlags& f) {
  auto ns = parse_u64_list(f.n_list);
  if (ns.empty()) throw ConfigError("--n-list is empty");
  std::vector<std::string> modes;
  if (f.modes == "both") {
    modes = {"amortized", "deamortized"};
  } else {
    std::stringstream ss(f.modes);
    std::string m;
    while (std::getline(ss, m, ','))
      if (!m.empty()) modes.push_back(m);
  }
  if (modes.empty()) throw ConfigError("--mode is empty");
  if (f.seeds == 0 || f.ops_per_n == 0) throw ConfigError("--seeds and --ops-per-n must be positive");

  std::vector<VariantConfig> cells;
  for (const auto& m : modes)
    for (auto n : ns) {
      StructureFlags s = f.s;
      s.n = n;
      cells.push_back(s.config(m));
    }

  std::ofstream file;
  if (!f.out.empty()) {
    file.open(f.out);
    if (!file) throw ConfigError("cannot write " + f.out);
  }
  std::ostream& os = f.out.empty() ? std::cout : file;
  os << "variant,mode,n,seed,mean,p50,p99,max,max_over_mean\n";
  const Rng::Seed base = Rng::from_hex(f.s.seed).seed();
  for (auto cfg : cells) {
    for (std::uint64_t j = 0; j < f.seeds; ++j) {
      cfg.seed = derive_seed(base, j);
      Rng wl = Rng(cfg.seed).fork("workload");
      auto ops = generate_workload(cfg.n, f.ops_per_n * cfg.n, Distribution{}, wl,
                                   cfg.block_size);
      log("bench " + cfg.name() + " n=" + std::to_string(cfg.n) + " seed#" +
          std::to_string(j));
      auto p = profile_overhead(cfg, ops);
      std::string variant = to_string(cfg.variant);
      if (cfg.variant == Variant::Hier) variant += std::string("-") + to_string(cfg.table);
      os << variant << ',' << to_string(cfg.mode) << ',' << cfg.n << ','
         << seed_hex(cfg.seed) << ',' << p.mean << ',' << p.p50 << ',' << p.p99 << ','
         << p.max << ',' << p.max_over_mean << '\n';
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct DistinguishFlags {
  StructureFlags s;
  std::uint64_t pairs = 20;
  std::uint64_t seeds = 200;
  std::string report;
  bool leak_probe_choice = false;
};

inline int cmd_distinguish(const DistinguishFlags& f) {
  VariantConfig cfg = f.s.config();
  cfg.leak_probe_choice = f.leak_probe_choice;
  if (cfg.leak_probe_choice && cfg.variant != Variant::Sqrt)
    throw ConfigError("--leak-probe-choice applies to the sqrt variant only");
  if (f.pairs == 0) throw ConfigError("--pairs must be positive");
  log("distinguish " + cfg.name() + " n=" + std::to_string(cfg.n));
  Report rep = distinguish(cfg, f.pairs, f.seeds, Rng(cfg.seed));
  if (cfg.leak_probe_choice) rep.summary["leak_probe_choice"] = true;
  auto j = rep.to_json();
  if (!f.report.empty()) {
    std::ofstream os(f.report);
    if (!os) throw ConfigError("cannot write " + f.report);
    os << j.dump(2) << '\n';
  }
  std::cout << j.dump() << '\n';
  for (const auto& c : rep.checks)
    if (!c.pass) std::cerr << "check failed: " << c.name << ": " << c.detail << '\n';
  return rep.pass() ? kExitOk : kExitFail;
}

// ---------------------------------------------------------------------------

struct GenFlags {
  std::uint64_t n = 64;
  std::uint64_t ops = 100;
  std::string dist = "uniform";
  std::string seed = "0";
  std::string out;
};

inline int cmd_gen(const GenFlags& f) {
  auto d = Distribution::parse(f.dist);
  auto ops = generate_workload(f.n, f.ops, d, Rng::from_hex(f.seed).fork("workload"));
  if (f.out.empty()) {
    write_workload(std::cout, ops);
    return kExitOk;
  }
  std::ofstream os(f.out);
  if (!os) throw ConfigError("cannot write " + f.out);
  write_workload(os, ops);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ServeFlags {
  std::string bind = "127.0.0.1:7070";
  std::string dir;
  std::size_t cell_size = cell_size_for(kDefaultBlockSize);
  std::string trace_dir;
};

inline std::atomic<bool>& stop_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline void on_signal(int) { stop_flag() = true; }

inline int cmd_serve(const ServeFlags& f) {
  if (f.dir.empty()) throw ConfigError("--dir is required");
  std::filesystem::create_directories(f.dir);
  FileBackend backend(f.dir, f.cell_size);
  wire::ServerOptions opts;
  if (!f.trace_dir.empty()) {
    std::filesystem::create_directories(f.trace_dir);
    opts.trace_dir = f.trace_dir;
  }
  wire::TcpServer server(backend, f.bind, opts);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.start();
  std::cout << "listening on port " << server.port() << std::endl;
  while (!stop_flag()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  server.join();
  log("served " + std::to_string(server.sessions_served()) + " sessions");
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int main(int argc, char** argv) {
  CLI::App app{"oramkit: oblivious RAM toolkit"};
  app.require_subcommand(1);

  RunFlags run;
  auto* run_cmd = app.add_subcommand("run", "execute a workload with oracle checking");
  run.s.add_to(*run_cmd);
  run_cmd->add_option("--workload", run.workload, "JSON Lines workload")->required();
  run_cmd->add_option("--trace-out", run.trace_out, "trace file (.csv or .jsonl)");
  run_cmd->add_option("--result-out", run.result_out, "result JSON file");
  run_cmd->add_option("--backend", run.backend, "mem, file:DIR or tcp:HOST:PORT")
      ->capture_default_str();
  run_cmd->add_flag("--no-oracle", run.no_oracle, "skip plain-RAM comparison");

  BenchFlags bench;
  auto* bench_cmd = app.add_subcommand("bench", "per-request overhead profiles");
  bench.s.add_to(*bench_cmd, false);
  bench_cmd->add_option("--mode", bench.modes, "amortized, deamortized, a list, or both")
      ->capture_default_str();
  bench_cmd->add_option("--n-list", bench.n_list, "comma-separated capacities")->required();
  bench_cmd->add_option("--ops-per-n", bench.ops_per_n, "requests per unit of n")
      ->capture_default_str();
  bench_cmd->add_option("--seeds", bench.seeds, "seeds per cell")->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "CSV output (default stdout)");

  DistinguishFlags dist;
  auto* dist_cmd = app.add_subcommand("distinguish", "obliviousness battery");
  dist.s.add_to(*dist_cmd);
  dist_cmd->add_option("--pairs", dist.pairs, "program pairs")->capture_default_str();
  dist_cmd->add_option("--seeds", dist.seeds, "seeds for the uniformity check")
      ->capture_default_str();
  dist_cmd->add_option("--report", dist.report, "report JSON file");
  dist_cmd->add_flag("--leak-probe-choice", dist.leak_probe_choice,
                     "debug: skip the main probe after a shelter hit");

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a workload");
  gen_cmd->add_option("--n", gen.n, "logical capacity")->capture_default_str();
  gen_cmd->add_option("--ops", gen.ops, "number of requests")->capture_default_str();
  gen_cmd->add_option("--dist", gen.dist, "uniform or zipf:THETA")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "hex seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output path (default stdout)");

  ServeFlags serve;
  auto* serve_cmd = app.add_subcommand("serve", "serve a file-backed block store over TCP");
  serve_cmd->add_option("--bind", serve.bind, "HOST:PORT")->capture_default_str();
  serve_cmd->add_option("--dir", serve.dir, "storage directory")->required();
  serve_cmd->add_option("--cell-size", serve.cell_size, "bytes per cell")->capture_default_str();
  serve_cmd->add_option("--trace-dir", serve.trace_dir, "per-session trace directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*bench_cmd) return cmd_bench(bench);
    if (*dist_cmd) return cmd_distinguish(dist);
    if (*gen_cmd) return cmd_gen(gen);
    if (*serve_cmd) return cmd_serve(serve);
  } catch (const ConfigError& e) {
    std::cerr << "oramkit: " << e.what() << '\n';
    return kExitConfig;
  } catch (const StorageError& e) {
    std::cerr << "oramkit: storage: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "oramkit: " << e.what() << '\n';
    return kExitFail;
  }
  return kExitConfig;
}

}  // namespace oramkit::cli
