#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "oramkit/hier_oram.hpp"
#include "oramkit/oram.hpp"
#include "oramkit/sqrt_oram.hpp"
#include "oramkit/storage.hpp"

/// @brief Verification battery: oracle harness, trace skeletons, no-repeat
/// probing, chi-square uniformity, overhead profiles and JSON reports.
namespace oramkit {

inline std::unique_ptr<Oram> make_oram(const VariantConfig& cfg, Backend& store) {
  if (cfg.variant == Variant::Sqrt) return std::make_unique<SqrtOram>(cfg, store);
  return std::make_unique<HierOram>(cfg, store);
}

/// Random program of `len` requests over [0, n); half reads, half writes.
inline std::vector<LogicalOp> random_program(std::uint64_t n, std::uint64_t len,
                                             Rng& rng,
                                             std::size_t block_size = kDefaultBlockSize) {
  std::vector<LogicalOp> ops;
  ops.reserve(len);
  for (std::uint64_t i = 0; i < len; ++i) {
    std::uint64_t a = rng.uniform(n);
    if (rng.uniform(2) == 0) {
      ops.push_back(LogicalOp::read(a));
      continue;
    }
    Bytes v(block_size);
    for (std::size_t j = 0; j < block_size; j += 8) {
      std::uint64_t w = rng.next_u64();
      for (std::size_t b = 0; b < 8 && j + b < block_size; ++b)
        v[j + b] = static_cast<std::uint8_t>(w >> (8 * b));
    }
    ops.push_back(LogicalOp::write(a, std::move(v)));
  }
  return ops;
}

// ---------------------------------------------------------------------------
// oracle harness

struct Divergence {
  std::uint64_t step = 0;
  Bytes expected;
  Bytes got;
  std::string error;  // set when the ORAM threw instead of answering
};

struct OracleResult {
  std::uint64_t steps = 0;
  std::optional<Divergence> divergence;
  bool pass() const { return !divergence.has_value(); }
};

/// Runs `ops` against the ORAM and a plain RAM in lockstep.
inline OracleResult run_with_oracle(Oram& oram, std::span<const LogicalOp> ops) {
  PlainRam ram(oram.capacity(), oram.config().block_size);
  OracleResult r;
  for (const auto& op : ops) {
    ++r.steps;
    Bytes want = ram.apply(op);
    try {
      Bytes got = oram.access(op);
      if (got != want) {
        r.divergence = Divergence{r.steps, std::move(want), std::move(got), {}};
        return r;
      }
    } catch (const std::exception& e) {
      r.divergence = Divergence{r.steps, std::move(want), {}, e.what()};
      return r;
    }
  }
  return r;
}

inline OracleResult run_with_oracle(const VariantConfig& cfg,
                                    std::span<const LogicalOp> ops) {
  MemoryBackend mem(cell_size_for(cfg.block_size));
  auto oram = make_oram(cfg, mem);
  return run_with_oracle(*oram, ops);
}

// ---------------------------------------------------------------------------
// skeletons

struct SkeletonRun {
  std::string role;
  AccessKind kind = AccessKind::Read;
  std::uint64_t count = 0;
  bool operator==(const SkeletonRun&) const = default;
};

/// steps[s] lists the runs of step s (step 0 is initialisation).
struct Skeleton {
  std::vector<std::vector<SkeletonRun>> steps;
  bool operator==(const Skeleton&) const = default;
};

inline Skeleton skeletonize(std::span<const TraceEvent> events,
                            const RoleRegistry& roles) {
  Skeleton sk;
  std::map<std::uint32_t, std::string> cache;
  for (const auto& e : events) {
    if (e.step >= sk.steps.size()) sk.steps.resize(e.step + 1);
    auto it = cache.find(e.addr.region.value);
    if (it == cache.end())
      it = cache.emplace(e.addr.region.value, roles.label(e.addr.region)).first;
    auto& runs = sk.steps[e.step];
    if (!runs.empty() && runs.back().role == it->second && runs.back().kind == e.kind)
      ++runs.back().count;
    else
      runs.push_back(SkeletonRun{it->second, e.kind, 1});
  }
  return sk;
}

inline bool skeletons_equal(const Skeleton& a, const Skeleton& b) { return a == b; }

/// First step whose runs differ, if any.
inline std::optional<std::uint64_t> first_mismatch(const Skeleton& a, const Skeleton& b) {
  const std::size_t common = std::min(a.steps.size(), b.steps.size());
  for (std::size_t s = 0; s < common; ++s)
    if (a.steps[s] != b.steps[s]) return s;
  if (a.steps.size() != b.steps.size()) return common;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// probe offsets

/// Offset of the first read of a region labelled `role` in each step.
inline std::vector<std::optional<PhysAddr>> first_reads(std::span<const TraceEvent> events,
                                                        const RoleRegistry& roles,
                                                        const std::string& role) {
  std::vector<std::optional<PhysAddr>> out;
  for (const auto& e : events) {
    if (e.step >= out.size()) out.resize(e.step + 1);
    if (out[e.step] || e.kind != AccessKind::Read) continue;
    if (roles.label(e.addr.region) == role) out[e.step] = e.addr;
  }
  return out;
}

/// Square-root no-repeat check: main-memory probes of steps inside one epoch
/// of `epoch_len` requests hit distinct cells. Returns the violating steps.
inline std::vector<std::uint64_t> repeated_main_probes(std::span<const TraceEvent> events,
                                                       const RoleRegistry& roles,
                                                       std::uint64_t epoch_len) {
  auto probes = first_reads(events, roles, "main");
  std::vector<std::uint64_t> bad;
  std::set<std::pair<std::uint32_t, std::uint64_t>> seen;
  std::uint64_t epoch = 0;
  for (std::uint64_t s = 1; s < probes.size(); ++s) {
    if ((s - 1) / epoch_len != epoch) {
      epoch = (s - 1) / epoch_len;
      seen.clear();
    }
    if (!probes[s]) continue;
    if (!seen.insert({probes[s]->region.value, probes[s]->offset}).second) bad.push_back(s);
  }
  return bad;
}

// ---------------------------------------------------------------------------
// chi-square

struct ChiSquare {
  double statistic = 0;
  unsigned dof = 0;
};

inline ChiSquare chi_square_uniform(std::span<const std::uint64_t> counts) {
  if (counts.size() < 2) throw ConfigError("chi-square needs at least two bins");
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  if (expected < 5.0) throw ConfigError("chi-square needs expected count >= 5 per bin");
  double stat = 0;
  for (auto c : counts) {
    double d = static_cast<double>(c) - expected;
    stat += d * d / expected;
  }
  return {stat, static_cast<unsigned>(counts.size() - 1)};
}

/// 99.9th percentile of chi-square with `dof` degrees of freedom: tabulated
/// for common dof, Wilson-Hilferty otherwise.
inline double chi_square_critical_999(unsigned dof) {
  switch (dof) {
    case 1: return 10.828;
    case 2: return 13.816;
    case 3: return 16.266;
    case 4: return 18.467;
    case 5: return 20.515;
    case 6: return 22.458;
    case 7: return 24.322;
    case 8: return 26.124;
    case 9: return 27.877;
    case 15: return 37.697;
    case 23: return 49.728;
    case 31: return 61.098;
    case 63: return 103.442;
    default: break;
  }
  if (dof == 0) throw ConfigError("chi-square needs at least one degree of freedom");
  const double z = 3.090232;
  const double k = dof;
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1.0 - a + z * std::sqrt(a), 3);
}

// ---------------------------------------------------------------------------
// overhead profiles

struct OverheadProfile {
  std::string variant;
  std::uint64_t n = 0;
  std::vector<std::uint64_t> counts;  // counts[i] belongs to step i + 1
  double mean = 0;
  std::uint64_t p50 = 0;
  std::uint64_t p99 = 0;
  std::uint64_t max = 0;
  std::uint64_t argmax = 0;  // step of the first maximum
  double max_over_mean = 0;
};

/// Nearest-rank percentile of an ascending vector.
inline std::uint64_t percentile(const std::vector<std::uint64_t>& sorted, double pct) {
  if (sorted.empty()) return 0;
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * sorted.size()));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline OverheadProfile summarize_counts(std::string variant, std::uint64_t n,
                                        std::vector<std::uint64_t> counts) {
  OverheadProfile p;
  p.variant = std::move(variant);
  p.n = n;
  p.counts = std::move(counts);
  if (p.counts.empty()) return p;
  double sum = 0;
  for (std::size_t i = 0; i < p.counts.size(); ++i) {
    sum += static_cast<double>(p.counts[i]);
    if (p.counts[i] > p.max) {
      p.max = p.counts[i];
      p.argmax = i + 1;
    }
  }
  p.mean = sum / static_cast<double>(p.counts.size());
  auto sorted = p.counts;
  std::sort(sorted.begin(), sorted.end());
  p.p50 = percentile(sorted, 50);
  p.p99 = percentile(sorted, 99);
  p.max_over_mean = p.mean > 0 ? static_cast<double>(p.max) / p.mean : 0;
  return p;
}

/// Per-step counts of steps 1.. from a recorder, checked against its totals.
inline std::vector<std::uint64_t> request_counts(const TraceRecorder& rec,
                                                 std::uint64_t steps) {
  const auto& per = rec.per_step_counts();
  std::uint64_t sum = 0;
  for (auto c : per) sum += c;
  if (sum != rec.total()) throw InvariantError("per-step counts do not reconcile");
  std::vector<std::uint64_t> out(steps, 0);
  for (std::uint64_t s = 1; s <= steps && s < per.size(); ++s) out[s - 1] = per[s];
  return out;
}

/// Runs the workload on a fresh in-memory store and profiles steps 1...
/// Each step's trace count must equal the ORAM's own accounting.
inline OverheadProfile profile_overhead(const VariantConfig& cfg,
                                        std::span<const LogicalOp> ops) {
  MemoryBackend mem(cell_size_for(cfg.block_size));
  TraceRecorder rec(false);
  TracedStore store(mem, rec);
  auto oram = make_oram(cfg, store);
  std::vector<std::uint64_t> own;
  own.reserve(ops.size());
  for (const auto& op : ops) {
    oram->access(op);
    own.push_back(oram->last_stats().total());
  }
  auto counts = request_counts(rec, ops.size());
  if (counts != own) throw InvariantError("trace counts disagree with access statistics");
  return summarize_counts(cfg.name(), cfg.n, std::move(counts));
}

// ---------------------------------------------------------------------------
// reports

struct Check {
  std::string name;
  bool exact = true;
  bool pass = false;
  std::string detail;
};

struct Report {
  std::string variant;
  std::uint64_t n = 0;
  nlohmann::json summary = nlohmann::json::object();
  std::vector<Check> checks;

  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["variant"] = variant;
    j["n"] = n;
    j["summary"] = summary;
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks)
      j["checks"].push_back({{"name", c.name},
                             {"kind", c.exact ? "exact" : "statistical"},
                             {"pass", c.pass},
                             {"detail", c.detail}});
    return j;
  }
};

inline nlohmann::json profile_json(const OverheadProfile& p) {
  return {{"variant", p.variant}, {"n", p.n},       {"steps", p.counts.size()},
          {"mean", p.mean},       {"p50", p.p50},   {"p99", p.p99},
          {"max", p.max},         {"argmax", p.argmax},
          {"max_over_mean", p.max_over_mean}};
}

// ---------------------------------------------------------------------------
// distinguisher battery

struct TracedRun {
  Skeleton skeleton;
  std::vector<TraceEvent> events;
  RoleRegistry roles;
  std::uint64_t retries = 0;
  std::string error;
};

inline TracedRun traced_run(const VariantConfig& cfg, std::span<const LogicalOp> ops) {
  MemoryBackend mem(cell_size_for(cfg.block_size));
  TraceRecorder rec;
  TracedStore store(mem, rec);
  TracedRun r;
  try {
    auto oram = make_oram(cfg, store);
    try {
      for (const auto& op : ops) oram->access(op);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.roles = oram->roles();
    r.retries = oram->retries();
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.events = rec.events();
  r.skeleton = skeletonize(r.events, r.roles);
  return r;
}

/// Requests per program: enough for several epochs or bottom-level merges.
inline std::uint64_t distinguish_program_length(const VariantConfig& cfg) {
  if (cfg.variant == Variant::Sqrt) return 4 * SqrtParams::for_capacity(cfg.n).k;
  return 2 * (1ULL << HierParams::for_config(cfg).L);
}

/// Skeleton equality over `pairs` equal-length program pairs, no-repeat
/// probing on every run, and first-probe uniformity over `seeds` fresh
/// structures. Pair 0 is fixed: one hot address against all-distinct ones.
inline Report distinguish(const VariantConfig& base, std::uint64_t pairs,
                          std::uint64_t seeds, const Rng& rng0) {
  Report rep;
  rep.variant = base.name();
  rep.n = base.n;
  const std::uint64_t len = distinguish_program_length(base);
  Rng prog_rng = rng0.fork("programs");
  Rng seed_rng = rng0.fork("seeds");

  std::uint64_t mismatches = 0, retry_runs = 0, repeat_runs = 0, errors = 0;
  std::vector<std::uint64_t> retry_pairs;
  std::string first_mismatch_detail, first_error;
  for (std::uint64_t i = 0; i < pairs; ++i) {
    std::vector<LogicalOp> a, b;
    if (i == 0) {
      for (std::uint64_t j = 0; j < len; ++j) {
        a.push_back(LogicalOp::read(0));
        b.push_back(LogicalOp::read(j % base.n));
      }
    } else {
      a = random_program(base.n, len, prog_rng, base.block_size);
      b = random_program(base.n, len, prog_rng, base.block_size);
    }
    VariantConfig cfg = base;
    cfg.seed = seed_rng.next_key().bytes;
    TracedRun ra = traced_run(cfg, a);
    TracedRun rb = traced_run(cfg, b);
    for (const TracedRun* r : {&ra, &rb}) {
      if (!r->error.empty()) {
        ++errors;
        if (first_error.empty()) first_error = r->error;
      }
      if (cfg.variant == Variant::Sqrt &&
          !repeated_main_probes(r->events, r->roles, SqrtParams::for_capacity(cfg.n).k)
               .empty())
        ++repeat_runs;
    }
    if (ra.retries > 0 || rb.retries > 0) {
      ++retry_runs;
      retry_pairs.push_back(i);
      continue;
    }
    if (auto s = first_mismatch(ra.skeleton, rb.skeleton)) {
      if (mismatches++ == 0)
        first_mismatch_detail = "pair " + std::to_string(i) + " differs at step " +
                                std::to_string(*s);
    }
  }
  rep.checks.push_back(
      {"skeleton-equality", true, mismatches == 0,
       mismatches == 0 ? std::to_string(pairs - retry_runs) + " retry-free pairs equal"
                       : std::to_string(mismatches) + " mismatching pairs; " +
                             first_mismatch_detail});
  rep.checks.push_back({"no-repeat-probing", true, repeat_runs == 0 && errors == 0,
                        errors ? std::to_string(errors) + " runs failed: " + first_error
                               : std::to_string(repeat_runs) + " runs with repeated probes"});

  // first-probe uniformity
  Check uni{"first-probe-uniformity", false, true, ""};
  if (seeds > 0) {
    MemoryBackend probe_mem(cell_size_for(base.block_size));
    auto site = make_oram(base, probe_mem)->first_probe_site();
    if (static_cast<double>(seeds) / static_cast<double>(site.bins) < 5.0) {
      uni.detail = "skipped: " + std::to_string(seeds) + " seeds for " +
                   std::to_string(site.bins) + " bins";
    } else {
      std::vector<std::uint64_t> hist(site.bins, 0);
      Rng uni_rng = rng0.fork("uniformity");
      for (std::uint64_t s = 0; s < seeds; ++s) {
        VariantConfig cfg = base;
        cfg.seed = uni_rng.next_key().bytes;
        MemoryBackend mem(cell_size_for(cfg.block_size));
        TraceRecorder rec;
        TracedStore store(mem, rec);
        auto oram = make_oram(cfg, store);
        oram->access(LogicalOp::read(0));
        auto probes = first_reads(rec.events(), oram->roles(), site.role);
        if (probes.size() > 1 && probes[1]) ++hist[probes[1]->offset / site.stride];
      }
      ChiSquare chi = chi_square_uniform(hist);
      double crit = chi_square_critical_999(chi.dof);
      uni.pass = chi.statistic < crit;
      uni.detail = "chi2=" + std::to_string(chi.statistic) + " dof=" +
                   std::to_string(chi.dof) + " crit=" + std::to_string(crit);
    }
  } else {
    uni.detail = "skipped: no seeds";
  }
  rep.checks.push_back(uni);

  rep.summary["pairs"] = pairs;
  rep.summary["program_length"] = len;
  rep.summary["retry_runs"] = retry_runs;
  rep.summary["retry_pairs"] = retry_pairs;
  rep.summary["seeds"] = seeds;
  return rep;
}

}  // namespace oramkit
