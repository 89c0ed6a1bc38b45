#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "oramkit/cuckoo.hpp"
#include "oramkit/obliv_sort.hpp"
#include "oramkit/oram.hpp"
#include "oramkit/pipeline.hpp"

/// @brief Hierarchical ORAM: a fully scanned top buffer over levels of
/// padded hash tables of geometrically growing size. Every request probes
/// each table instance once, for the target until it is found and for a
/// fresh dummy afterwards, then writes the block to the top buffer.
///
/// Amortized mode merges the top buffer and all levels below the destination
/// inline on the classic power-of-two cascade. Deamortized mode moves data
/// down in pairs: each half of the top buffer becomes a chunk table at the
/// first level, and the second table to arrive at any level starts a merge
/// of the pair into the next level. Every merge is a RebuildJob pumped with a
/// quota sized to finish exactly when its inputs are next needed.
namespace oramkit {

struct HierParams {
  std::uint64_t n = 0;
  unsigned L = 0;   // ceil(log2 n)
  unsigned l0 = 0;  // top level; the top buffer has 2^l0 slots
  std::uint64_t P = 0;

  static HierParams for_config(const VariantConfig& cfg) {
    if (cfg.n < 8) throw ConfigError("hierarchical ORAM needs n >= 8");
    HierParams p;
    p.n = cfg.n;
    p.L = log2_exact(cfg.n);
    p.l0 = cfg.top_level;
    if (p.l0 < 1 || p.l0 >= p.L)
      throw ConfigError("top level must satisfy 1 <= top level < ceil(log2 n)");
    p.P = 1ULL << p.l0;
    if (cfg.bucket_size < 2) throw ConfigError("bucket size must be >= 2");
    if (!(cfg.eps > 0.0)) throw ConfigError("cuckoo expansion must be positive");
    if (cfg.stash_size < 1) throw ConfigError("stash size must be >= 1");
    return p;
  }

  unsigned bottom() const { return L + 1; }

  /// Largest number of distinct items an instance at `level` can receive.
  std::uint64_t item_bound(unsigned level, Mode mode) const {
    if (level == bottom()) return n;
    return mode == Mode::Amortized ? 1ULL << (level - 1) : 1ULL << (level - 2);
  }

  /// Deamortized: accesses between arrivals of new instances at `level`.
  std::uint64_t arrival_period(unsigned level) const {
    return (P / 2) << (level - l0 - 1);
  }
};

class HierOram final : public Oram {
 public:
  HierOram(const VariantConfig& cfg, Backend& store)
      : Oram(cfg, store),
        p_(HierParams::for_config(cfg)),
        struct_rng_(Rng(cfg.seed).fork("struct")),
        levels_(p_.bottom() + 1) {
    store_.set_step(0);
    top_ = client_.store.alloc(p_.P);
    roles_.set(top_, "top");
    for (std::uint64_t s = 0; s < p_.P; ++s)
      client_.write_dummy(PhysAddr{top_, s}, s);
    top_valid_.assign(p_.P, false);
    top_time_.assign(p_.P, 0);
    if (cfg.table == TableKind::Cuckoo) {
      stash_ = std::make_unique<Stash>(client_, cfg.stash_size);
      roles_.set(stash_->region(), "stash");
    }
    probe_bufs_.assign(cfg.bucket_size, Bytes(client_.store.cell_size()));
    build_initial_bottom();
  }

  const HierParams& params() const { return p_; }
  bool deamortized() const { return cfg_.mode == Mode::Deamortized; }

  /// Probe-able instances per level index (0..bottom).
  std::vector<std::size_t> level_occupancy() const {
    std::vector<std::size_t> out;
    for (const auto& lv : levels_) out.push_back(lv.size());
    return out;
  }
  std::size_t live_jobs() const { return jobs_.size(); }
  /// Keys of every live table instance, top level first.
  std::vector<PrfKey> level_keys() const {
    std::vector<PrfKey> out;
    for (const auto& lv : levels_)
      for (const auto& inst : lv) {
        if (inst->kind == TableKind::Bucket) {
          out.push_back(inst->bucket.key);
        } else {
          out.push_back(inst->cuckoo.hash.k1);
          out.push_back(inst->cuckoo.hash.k2);
        }
      }
    return out;
  }
  /// Upper bound on probe reads per access implied by the level layout.
  std::uint64_t probe_read_bound() const {
    std::uint64_t per_table =
        cfg_.table == TableKind::Bucket ? cfg_.bucket_size : 2;
    std::uint64_t per_chain_level = (deamortized() ? 2 : 1) * per_table;
    return p_.P + (stash_ ? stash_->capacity() : 0) +
           per_chain_level * (p_.L - p_.l0) + per_table;
  }
  std::uint64_t private_retries() const { return private_retries_; }
  ProbeSite first_probe_site() const override {
    const unsigned b = p_.bottom();
    if (cfg_.table == TableKind::Bucket)
      return {level_label(b), p_.item_bound(b, cfg_.mode), cfg_.bucket_size};
    return {level_label(b) + ".t1", cuckoo_table_size(p_.item_bound(b, cfg_.mode), cfg_.eps), 1};
  }

 private:
  struct Instance {
    std::uint64_t id = 0;
    unsigned level = 0;
    TableKind kind = TableKind::Bucket;
    BucketTable bucket;
    CuckooTable cuckoo;
    std::set<std::uint64_t> probed;
    bool draining = false;

    std::uint64_t cells() const {
      return kind == TableKind::Bucket ? bucket.cells() : 2 * cuckoo.hash.size;
    }
  };
  using InstancePtr = std::unique_ptr<Instance>;

  struct SourceInfo {
    enum Kind { TopSlot, Table, StashSlot } kind;
    std::uint8_t priority = 0;
  };

  struct Job {
    unsigned dest = 0;
    std::uint64_t deadline = 0;  // access index at which it is installed
    std::vector<std::uint64_t> sources;
    std::vector<std::uint64_t> top_slots;
    std::unique_ptr<RebuildJob> job;
    BucketBuildPhase* bucket_build = nullptr;
    CuckooBuildPhase* cuckoo_build = nullptr;
    std::uint64_t planned = 0;
    std::uint64_t id = 0;
  };

  static std::uint64_t dummy_identity(std::uint64_t t) { return (1ULL << 63) | t; }

  std::string level_label(unsigned level) const {
    return "L" + std::to_string(level);
  }

  void build_initial_bottom() {
    const std::uint64_t n = p_.n;
    RegionId src = client_.store.alloc(n);
    const Bytes zero(cfg_.block_size, 0);
    for (std::uint64_t a = 0; a < n; ++a)
      client_.write_block(PhysAddr{src, a}, Block::real(a, zero));
    auto inst = std::make_unique<Instance>();
    inst->id = next_instance_++;
    inst->level = p_.bottom();
    inst->kind = cfg_.table;
    if (cfg_.table == TableKind::Bucket) {
      BucketBuildPhase b(client_, src, n, struct_rng_.next_key(),
                         p_.item_bound(p_.bottom(), cfg_.mode),
                         cfg_.bucket_size, kMaxBuildRetries);
      roles_.set(b.table().region, level_label(p_.bottom()));
      b.run(client_);
      note_retries(static_cast<std::uint64_t>(b.retries()));
      inst->bucket = b.table();
    } else {
      CuckooBuildPhase b(client_, src, n, p_.item_bound(p_.bottom(), cfg_.mode),
                         cfg_.eps, stash_.get(), inst->id);
      label_cuckoo(b.table(), p_.bottom());
      b.run(client_);
      private_retries_ += static_cast<std::uint64_t>(b.retries());
      inst->cuckoo = b.table();
    }
    client_.store.free(src);
    levels_[p_.bottom()].push_back(std::move(inst));
  }

  void label_cuckoo(const CuckooTable& t, unsigned level) {
    roles_.set(t.t1, level_label(level) + ".t1");
    roles_.set(t.t2, level_label(level) + ".t2");
  }

  Instance* find_instance(std::uint64_t id) {
    for (auto& lv : levels_)
      for (auto& inst : lv)
        if (inst->id == id) return inst.get();
    throw InvariantError("unknown table instance " + std::to_string(id));
  }

  // -------------------------------------------------------------------------
  // probing

  std::optional<Bytes> probe(Instance& inst, std::uint64_t x) {
    if (!inst.probed.insert(x).second)
      throw InvariantError("instance " + std::to_string(inst.id) +
                           " probed twice for one identity");
    std::optional<Bytes> hit;
    auto check = [&](PlainCell cell) {
      if (cell.is_real() && cell.id() == x) {
        auto p = cell.payload();
        hit = Bytes(p.begin(), p.end());
      }
    };
    if (inst.kind == TableKind::Bucket) {
      const BucketTable& t = inst.bucket;
      const std::uint64_t base = t.bucket_of(x) * t.bucket_size;
      for (std::uint64_t j = 0; j < t.bucket_size; ++j)
        check(client_.load(PhysAddr{t.region, base + j}, probe_bufs_[j]));
      for (std::uint64_t j = 0; j < t.bucket_size; ++j)
        client_.store_cell(PhysAddr{t.region, base + j}, probe_bufs_[j]);
      stats_.probe_reads += t.bucket_size;
      stats_.probe_writes += t.bucket_size;
    } else {
      const CuckooTable& t = inst.cuckoo;
      PhysAddr a1{t.t1, t.hash.h1(x)};
      PhysAddr a2{t.t2, t.hash.h2(x)};
      check(client_.load(a1, probe_bufs_[0]));
      check(client_.load(a2, probe_bufs_[1]));
      client_.store_cell(a1, probe_bufs_[0]);
      client_.store_cell(a2, probe_bufs_[1]);
      stats_.probe_reads += 2;
      stats_.probe_writes += 2;
    }
    return hit;
  }

  Bytes do_access(const LogicalOp& op) override {
    const std::uint64_t t = steps_;
    const std::uint64_t addr = op.addr.value;

    // (1) top buffer and stash scans
    std::optional<Bytes> found;
    std::uint64_t best = 0;
    for (std::uint64_t s = 0; s < p_.P; ++s) {
      PlainCell cell = client_.load(PhysAddr{top_, s}, client_.buf_a);
      ++stats_.probe_reads;
      if (top_valid_[s] && cell.is_real() && cell.id() == addr &&
          top_time_[s] >= best) {
        best = top_time_[s];
        auto p = cell.payload();
        found = Bytes(p.begin(), p.end());
      }
    }
    std::map<std::uint64_t, Bytes> stash_hits;
    if (stash_) {
      for (std::size_t s = 0; s < stash_->capacity(); ++s) {
        PlainCell cell =
            client_.load(PhysAddr{stash_->region(), s}, client_.buf_a);
        ++stats_.probe_reads;
        auto owner = stash_->owner(s);
        if (owner && cell.is_real() && cell.id() == addr) {
          auto p = cell.payload();
          stash_hits[*owner] = Bytes(p.begin(), p.end());
        }
      }
    }

    // (2) cascade over levels, newest instance first
    for (unsigned lv = p_.l0 + 1; lv <= p_.bottom(); ++lv) {
      for (auto& inst : levels_[lv]) {
        if (found) {
          probe(*inst, dummy_identity(t));
          continue;
        }
        found = probe(*inst, addr);
        if (!found) {
          auto it = stash_hits.find(inst->id);
          if (it != stash_hits.end()) found = it->second;
        }
      }
    }
    if (!found) throw InvariantError("address " + std::to_string(addr) +
                                     " not found in any level");

    // (3) top buffer write
    Bytes result = *found;
    const Bytes& next = op.kind == OpKind::Write ? op.value : result;
    const std::uint64_t slot = (t - 1) % p_.P;
    client_.write_block(PhysAddr{top_, slot}, Block::real(addr, next));
    ++stats_.probe_writes;
    top_valid_[slot] = true;
    top_time_[slot] = t;

    // (4) rebuild schedule
    if (deamortized())
      schedule_deamortized(t);
    else
      schedule_amortized(t);
    return result;
  }

  // -------------------------------------------------------------------------
  // merge jobs

  /// Gather sources, sort by (address, priority), drop stale copies, build
  /// the destination table.
  std::unique_ptr<Job> make_job(unsigned dest,
                                const std::vector<std::uint64_t>& top_slots,
                                const std::vector<std::uint64_t>& ids,
                                std::uint64_t deadline_delta) {
    auto job = std::make_unique<Job>();
    job->dest = dest;
    job->sources = ids;
    job->top_slots = top_slots;
    job->id = next_job_++;

    auto infos = std::make_shared<std::vector<SourceInfo>>();
    auto owner_prio = std::make_shared<std::map<std::uint64_t, std::uint8_t>>();
    std::vector<SourceRange> ranges;
    const auto nslots = static_cast<std::uint8_t>(top_slots.size());
    for (std::size_t j = 0; j < top_slots.size(); ++j) {
      ranges.push_back(SourceRange{top_, top_slots[j], 1,
                                   static_cast<int>(infos->size())});
      infos->push_back(
          SourceInfo{SourceInfo::TopSlot, static_cast<std::uint8_t>(nslots - 1 - j)});
    }
    bool any_cuckoo = false;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      Instance* inst = find_instance(ids[r]);
      auto prio = static_cast<std::uint8_t>(nslots + r);
      (*owner_prio)[inst->id] = prio;
      int tag = static_cast<int>(infos->size());
      infos->push_back(SourceInfo{SourceInfo::Table, prio});
      if (inst->kind == TableKind::Bucket) {
        ranges.push_back(SourceRange{inst->bucket.region, 0, inst->bucket.cells(), tag});
      } else {
        any_cuckoo = true;
        ranges.push_back(SourceRange{inst->cuckoo.t1, 0, inst->cuckoo.hash.size, tag});
        ranges.push_back(SourceRange{inst->cuckoo.t2, 0, inst->cuckoo.hash.size, tag});
      }
    }
    if (any_cuckoo) {
      for (std::size_t s = 0; s < stash_->capacity(); ++s) {
        ranges.push_back(SourceRange{stash_->region(), s, 1,
                                     static_cast<int>(infos->size())});
        infos->push_back(SourceInfo{SourceInfo::StashSlot, 0});
      }
    }
    std::uint64_t total = 0;
    for (const auto& r : ranges) total += r.count;
    const std::uint64_t x_len = next_power_of_two(std::max<std::uint64_t>(2, total));
    RegionId x = client_.store.alloc(x_len);

    auto pipe = std::make_unique<Pipeline>();
    Stash* stash = stash_.get();
    pipe->emplace<GatherPhase>(
        std::move(ranges), x, x_len,
        [infos, owner_prio, stash](std::uint64_t i, const SourceRange& src,
                                   PlainCell& cell) {
          const SourceInfo& info = (*infos)[src.tag];
          if (!cell.is_real()) {
            cell.make_dummy(i, dummy_class::kPlain);
            return;
          }
          if (info.kind == SourceInfo::StashSlot) {
            auto owner = stash->owner(src.offset);
            auto it = owner ? owner_prio->find(*owner) : owner_prio->end();
            if (it == owner_prio->end()) {
              cell.make_dummy(i, dummy_class::kPlain);
              return;
            }
            cell.set_aux(it->second);
            return;
          }
          cell.set_aux(info.priority);
        },
        [](std::uint64_t, PlainCell&) {});
    pipe->emplace<SortJob>(x, x_len, key_by_addr_then_priority());
    pipe->add(make_dedupe_phase(x, x_len));

    const std::uint64_t cap = p_.item_bound(dest, cfg_.mode);
    if (cfg_.table == TableKind::Bucket) {
      auto& b = pipe->emplace<BucketBuildPhase>(
          client_, x, x_len, struct_rng_.next_key(), cap, cfg_.bucket_size,
          kMaxBuildRetries);
      roles_.set(b.table().region, level_label(dest));
      job->bucket_build = &b;
    } else {
      auto& b = pipe->emplace<CuckooBuildPhase>(client_, x, x_len, cap, cfg_.eps,
                                                stash_.get(), next_instance_);
      label_cuckoo(b.table(), dest);
      job->cuckoo_build = &b;
    }
    ++next_instance_;
    pipe->emplace<ActionPhase>([x](Client& c) { c.store.free(x); });

    job->planned = pipe->total_work();
    job->deadline = steps_ + deadline_delta;
    job->job = std::make_unique<RebuildJob>(
        std::move(pipe), RebuildJob::quota_for(job->planned, deadline_delta));
    return job;
  }

  void install(Job& job) {
    if (!job.job->done()) stats_.rebuild_ops += job.job->finish(client_);
    track_retries(job);
    auto inst = std::make_unique<Instance>();
    inst->level = job.dest;
    inst->kind = cfg_.table;
    if (job.bucket_build) {
      inst->bucket = job.bucket_build->table();
      inst->id = next_instance_++;
    } else {
      inst->cuckoo = job.cuckoo_build->table();
      inst->id = inst->cuckoo.owner;
      private_retries_ += static_cast<std::uint64_t>(job.cuckoo_build->retries());
    }
    for (std::uint64_t id : job.sources) retire(id);
    for (std::uint64_t s : job.top_slots) top_valid_[s] = false;
    auto& lv = levels_[job.dest];
    lv.insert(lv.begin(), std::move(inst));
  }

  void retire(std::uint64_t id) {
    for (auto& lv : levels_) {
      for (auto it = lv.begin(); it != lv.end(); ++it) {
        if ((*it)->id != id) continue;
        Instance& inst = **it;
        if (inst.kind == TableKind::Bucket) {
          client_.store.free(inst.bucket.region);
        } else {
          client_.store.free(inst.cuckoo.t1);
          client_.store.free(inst.cuckoo.t2);
          stash_->release(inst.id);
        }
        lv.erase(it);
        return;
      }
    }
    throw InvariantError("retiring unknown instance " + std::to_string(id));
  }

  /// A bucket-build retry grows the remaining work; spread it over the
  /// pumps left before the deadline.
  void track_retries(Job& job) {
    std::uint64_t total = job.job->total_work();
    if (total == job.planned) return;
    note_retries(1);
    job.planned = total;
    if (job.deadline > steps_) {
      std::uint64_t left = job.deadline - steps_;
      job.job->set_quota(RebuildJob::quota_for(job.job->remaining(), left));
    }
  }

  void schedule_amortized(std::uint64_t t) {
    if (t % p_.P != 0) return;
    const unsigned v = static_cast<unsigned>(std::countr_zero(t)) - p_.l0;
    const unsigned d = std::min(p_.l0 + 1 + v, p_.bottom());
    std::vector<std::uint64_t> slots;
    for (std::uint64_t s = 0; s < p_.P; ++s) slots.push_back(s);
    std::vector<std::uint64_t> ids;
    for (unsigned lv = p_.l0 + 1; lv < d; ++lv)
      for (auto& inst : levels_[lv]) ids.push_back(inst->id);
    if (d == p_.bottom()) {
      for (auto& inst : levels_[d]) ids.push_back(inst->id);
    } else if (!levels_[d].empty()) {
      throw InvariantError("cascade destination level is occupied");
    }
    auto job = make_job(d, slots, ids, 1);
    stats_.rebuild_ops += job->job->finish(client_);
    install(*job);
  }

  void schedule_deamortized(std::uint64_t t) {
    for (auto& [dest, job] : jobs_) {
      stats_.rebuild_ops += job->job->pump(client_);
      track_retries(*job);
    }
    std::vector<unsigned> due;
    for (auto it = jobs_.rbegin(); it != jobs_.rend(); ++it)
      if (it->second->deadline == t) due.push_back(it->first);
    for (unsigned dest : due) {
      install(*jobs_.at(dest));
      jobs_.erase(dest);
    }
    const std::uint64_t half = p_.P / 2;
    if (t % half == 0) {
      const std::uint64_t h = (t / half - 1) % 2;
      std::vector<std::uint64_t> slots;
      for (std::uint64_t j = 0; j < half; ++j) slots.push_back(h * half + j);
      add_job(make_job(p_.l0 + 1, slots, {}, half));
    }
    for (unsigned lv = p_.l0 + 1; lv <= p_.L; ++lv) {
      auto& insts = levels_[lv];
      if (insts.size() > 2) throw InvariantError("more than two tables at a level");
      if (insts.size() < 2 || insts[0]->draining) continue;
      if (insts[1]->draining) throw InvariantError("draining pair is incomplete");
      insts[0]->draining = insts[1]->draining = true;
      std::vector<std::uint64_t> ids{insts[0]->id, insts[1]->id};
      if (lv + 1 == p_.bottom()) ids.push_back(levels_[p_.bottom()].front()->id);
      add_job(make_job(lv + 1, {}, ids, p_.arrival_period(lv)));
    }
  }

  void add_job(std::unique_ptr<Job> job) {
    unsigned dest = job->dest;
    if (!jobs_.emplace(dest, std::move(job)).second)
      throw InvariantError("second live job for level " + std::to_string(dest));
  }

  HierParams p_;
  Rng struct_rng_;
  RegionId top_;
  std::vector<bool> top_valid_;
  std::vector<std::uint64_t> top_time_;
  std::unique_ptr<Stash> stash_;
  std::vector<std::vector<InstancePtr>> levels_;
  std::map<unsigned, std::unique_ptr<Job>> jobs_;
  std::vector<Bytes> probe_bufs_;
  std::uint64_t next_instance_ = 1;
  std::uint64_t next_job_ = 0;
  std::uint64_t private_retries_ = 0;
};

}  // namespace oramkit
