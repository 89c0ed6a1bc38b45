#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <set>
#include <vector>

#include "oramkit/obliv_sort.hpp"
#include "oramkit/oram.hpp"
#include "oramkit/pipeline.hpp"

/// @brief Square-root ORAM. Main memory M holds the n blocks and 2k or more
/// dummies under a secret permutation; each request scans the shelter, probes
/// one never-before-probed slot of M and appends to the shelter. Every k
/// requests M is rebuilt from M and the shelter, either inline (amortized) or
/// by a job pumped with a fixed quota during the following epoch
/// (deamortized).
namespace oramkit {

struct SqrtParams {
  std::uint64_t n = 0;
  std::uint64_t k = 0;  // epoch length and shelter size
  std::uint64_t m = 0;  // main memory length

  static SqrtParams for_capacity(std::uint64_t n) {
    if (n < 4) throw ConfigError("square-root ORAM needs n >= 4");
    std::uint64_t k = 1;
    while (k * k < n) ++k;
    if (k >= 255) throw ConfigError("square-root ORAM supports n <= 64516");
    return SqrtParams{n, k, next_power_of_two(n + 2 * k)};
  }

  /// gather 3m+k, two sorts of 2m cells, dedupe and renumber passes 4m
  /// each, truncating copy 2m.
  std::uint64_t rebuild_work() const {
    return 13 * m + k + 8 * bitonic_comparator_count(2 * m);
  }
};

class SqrtOram final : public Oram {
 public:
  static constexpr std::uint8_t kMainPriority = 255;

  SqrtOram(const VariantConfig& cfg, Backend& store)
      : Oram(cfg, store),
        p_(SqrtParams::for_capacity(cfg.n)),
        struct_rng_(Rng(cfg.seed).fork("struct")) {
    store_.set_step(0);
    init_main();
    shelter_cur_ = alloc_shelter();
    if (deamortized()) {
      shelter_prev_ = alloc_shelter();
      job_ = make_rebuild(main_, shelter_prev_);
    }
  }

  ~SqrtOram() override = default;

  const SqrtParams& params() const { return p_; }
  bool deamortized() const { return cfg_.mode == Mode::Deamortized; }
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t epoch_position() const { return t_; }
  const std::vector<std::uint64_t>& position_map() const { return pos_; }
  const std::vector<std::uint64_t>& dummy_positions() const { return dpos_; }
  RegionId main_region() const { return main_; }
  /// Cell-ops of one epoch rebuild (identical for every epoch).
  std::uint64_t rebuild_work() const { return p_.rebuild_work(); }
  std::uint64_t quota() const {
    return RebuildJob::quota_for(p_.rebuild_work(), p_.k);
  }
  const RebuildJob* active_job() const { return job_ ? &job_->job : nullptr; }
  ProbeSite first_probe_site() const override { return {"main", p_.m, 1}; }

 private:
  struct Rebuild {
    Rebuild(std::unique_ptr<Phase> work, std::uint64_t quota)
        : job(std::move(work), quota) {}
    RebuildJob job;
    RegionId dest;
    std::vector<std::uint64_t> perm;
    std::shared_ptr<std::uint64_t> reals;  // counted by the renumbering pass
  };

  RegionId alloc_shelter() {
    RegionId s = client_.store.alloc(p_.k);
    roles_.set(s, "shelter");
    for (std::uint64_t i = 0; i < p_.k; ++i)
      client_.write_dummy(PhysAddr{s, i}, i);
    return s;
  }

  void init_main() {
    const std::uint64_t n = p_.n, m = p_.m;
    main_ = client_.store.alloc(m);
    roles_.set(main_, "main");
    const Bytes zero(cfg_.block_size, 0);
    std::vector<Block> blocks;
    blocks.reserve(m);
    for (std::uint64_t a = 0; a < n; ++a) blocks.push_back(Block::real(a, zero));
    for (std::uint64_t s = 0; s < m - n; ++s)
      blocks.push_back(Block::dummy(s, cfg_.block_size));
    for (std::uint64_t i = 0; i < m; ++i)
      client_.write_block(PhysAddr{main_, i}, blocks[i]);

    PrfKey key = struct_rng_.next_key();
    oblivious_shuffle(client_, main_, m, key);

    // The sort order is a function of the keys alone, so the client can
    // reproduce the resulting layout privately.
    KeyFn kf = key_by_prf_tag(key);
    Bytes buf(cell_size_for(cfg_.block_size));
    std::vector<std::pair<SortKey, std::uint64_t>> order;
    order.reserve(m);
    for (std::uint64_t i = 0; i < m; ++i) {
      PlainCell(buf).load(blocks[i]);
      order.emplace_back(kf(PlainCell(buf)), i);
    }
    std::sort(order.begin(), order.end());
    pos_.assign(n, 0);
    dpos_.assign(m - n, 0);
    for (std::uint64_t off = 0; off < m; ++off) {
      std::uint64_t i = order[off].second;
      if (i < n)
        pos_[i] = off;
      else
        dpos_[i - n] = off;
    }
  }

  /// Builds the next main memory from (M, S): gather, sort by (address,
  /// priority), suppress stale copies, renumber dummies, sort by a fresh
  /// private permutation, truncate to m.
  std::unique_ptr<Rebuild> make_rebuild(RegionId main, RegionId shelter) {
    const std::uint64_t n = p_.n, k = p_.k, m = p_.m;
    const std::uint64_t x_len = 2 * m;
    auto pipe = std::make_unique<Pipeline>();
    RegionId x = client_.store.alloc(x_len);
    RegionId dest = client_.store.alloc(m);
    roles_.set(dest, "main");
    auto perm = random_permutation(struct_rng_, m);
    auto counter = std::make_shared<std::uint64_t>(0);
    auto reals = std::make_shared<std::uint64_t>(0);

    pipe->emplace<GatherPhase>(
        std::vector<SourceRange>{SourceRange{shelter, 0, k, 1},
                                 SourceRange{main, 0, m, 0}},
        x, x_len,
        [k](std::uint64_t i, const SourceRange& src, PlainCell& cell) {
          if (!cell.is_real())
            cell.make_dummy(i, dummy_class::kPlain);
          else if (src.tag == 1)
            cell.set_aux(static_cast<std::uint8_t>(k - 1 - i));
          else
            cell.set_aux(kMainPriority);
        },
        [](std::uint64_t, PlainCell&) {});
    pipe->emplace<SortJob>(x, x_len, key_by_addr_then_priority());
    pipe->add(make_dedupe_phase(x, x_len));
    pipe->emplace<MapPhase>(
        x, x_len, [counter, reals, n, m](std::uint64_t, PlainCell& cell) {
          if (cell.is_real()) {
            cell.set_aux(0);
            ++*reals;
            return;
          }
          std::uint64_t c = (*counter)++;
          cell.make_dummy(c, c < m - n ? dummy_class::kPlain
                                       : dummy_class::kFiller);
        });
    pipe->emplace<SortJob>(
        x, x_len, key_by_dest([perm, n](const PlainCell& cell) -> std::uint64_t {
          if (cell.is_real()) return perm[cell.id()];
          if (cell.aux() == dummy_class::kPlain) return perm[n + cell.id()];
          return kKeyMax;
        }));
    pipe->emplace<GatherPhase>(
        std::vector<SourceRange>{SourceRange{x, 0, m, 0}}, dest, m,
        [](std::uint64_t, const SourceRange&, PlainCell&) {},
        [](std::uint64_t, PlainCell&) {});
    pipe->emplace<ActionPhase>([x](Client& c) { c.store.free(x); });

    std::uint64_t w = pipe->total_work();
    if (w != p_.rebuild_work()) throw InvariantError("rebuild work miscounted");
    auto r = std::make_unique<Rebuild>(std::move(pipe),
                                       RebuildJob::quota_for(w, k));
    r->dest = dest;
    r->perm = std::move(perm);
    r->reals = reals;
    return r;
  }

  void install(Rebuild& r) {
    if (!r.job.done()) throw InvariantError("rebuild unfinished at epoch end");
    if (*r.reals != p_.n)
      throw InvariantError("rebuild produced " + std::to_string(*r.reals) +
                           " real blocks, expected " + std::to_string(p_.n));
    client_.store.free(main_);
    main_ = r.dest;
    for (std::uint64_t a = 0; a < p_.n; ++a) pos_[a] = r.perm[a];
    for (std::uint64_t s = 0; s < dpos_.size(); ++s) dpos_[s] = r.perm[p_.n + s];
  }

  Bytes do_access(const LogicalOp& op) override {
    const std::uint64_t k = p_.k;
    const std::uint64_t addr = op.addr.value;

    // (1) shelter scan; later slots are fresher, the current shelter is
    // fresher than the previous one.
    std::optional<Bytes> found;
    auto scan = [&](RegionId s, std::uint64_t valid) {
      for (std::uint64_t i = 0; i < k; ++i) {
        PlainCell cell = client_.load(PhysAddr{s, i}, client_.buf_a);
        ++stats_.probe_reads;
        if (i < valid && cell.is_real() && cell.id() == addr) {
          auto p = cell.payload();
          found = Bytes(p.begin(), p.end());
        }
      }
    };
    if (deamortized()) scan(shelter_prev_, k);
    scan(shelter_cur_, t_);

    // (2) one main-memory probe
    Bytes value;
    const bool sheltered = found.has_value();
    if (!(sheltered && cfg_.leak_probe_choice)) {
      std::uint64_t off;
      if (sheltered) {
        if (d_ >= dpos_.size()) throw InvariantError("dummy budget exhausted");
        off = dpos_[d_++];
      } else {
        off = pos_[addr];
      }
      if (!probed_.insert(off).second)
        throw InvariantError("main offset " + std::to_string(off) +
                             " probed twice in one epoch");
      PhysAddr a{main_, off};
      PlainCell cell = client_.load(a, client_.buf_a);
      if (!sheltered) {
        if (!cell.is_real() || cell.id() != addr)
          throw InvariantError("position map points at the wrong block");
        auto p = cell.payload();
        value.assign(p.begin(), p.end());
      }
      client_.store_cell(a, client_.buf_a);
      ++stats_.probe_reads;
      ++stats_.probe_writes;
    }
    if (sheltered) value = std::move(*found);

    // (3) shelter append
    Bytes result = value;
    const Bytes& next = op.kind == OpKind::Write ? op.value : value;
    if (cfg_.skip_shelter_write_at_step != steps_) {
      client_.write_block(PhysAddr{shelter_cur_, t_}, Block::real(addr, next));
      ++stats_.probe_writes;
    }

    // (4) rebuild work
    if (deamortized()) stats_.rebuild_ops += job_->job.pump(client_);

    if (++t_ == k) end_epoch();
    return result;
  }

  void end_epoch() {
    if (deamortized()) {
      install(*job_);
      std::swap(shelter_prev_, shelter_cur_);
    } else {
      auto r = make_rebuild(main_, shelter_cur_);
      stats_.rebuild_ops += r->job.finish(client_);
      install(*r);
    }
    t_ = 0;
    d_ = 0;
    probed_.clear();
    ++epoch_;
    if (deamortized()) job_ = make_rebuild(main_, shelter_prev_);
  }

  SqrtParams p_;
  Rng struct_rng_;
  RegionId main_;
  RegionId shelter_cur_;
  RegionId shelter_prev_;
  std::vector<std::uint64_t> pos_;
  std::vector<std::uint64_t> dpos_;
  std::set<std::uint64_t> probed_;
  std::uint64_t t_ = 0;
  std::uint64_t d_ = 0;
  std::uint64_t epoch_ = 0;
  std::unique_ptr<Rebuild> job_;
};

}  // namespace oramkit
