#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "oramkit/core.hpp"
#include "oramkit/pipeline.hpp"
#include "oramkit/storage.hpp"

/// @brief Data-independent rearrangement on the server: the bitonic network,
/// resumable sort jobs, PRF-tag shuffles, duplicate suppression and padded
/// bucket-table construction.
namespace oramkit {

struct CompareExchange {
  std::uint64_t i = 0;
  std::uint64_t j = 0;
  bool ascending = true;
  bool operator==(const CompareExchange&) const = default;
};

/// m * lg(m) * (lg(m) + 1) / 4 comparators.
inline std::uint64_t bitonic_comparator_count(std::uint64_t m) {
  if (!is_power_of_two(m) || m < 2)
    throw ConfigError("bitonic length must be a power of two >= 2");
  std::uint64_t lg = log2_exact(m);
  return m / 2 * (lg * (lg + 1) / 2);
}

/// Walks the bitonic network in schedule order without materializing it.
class BitonicCursor {
 public:
  explicit BitonicCursor(std::uint64_t m)
      : m_(m), total_(bitonic_comparator_count(m)) {}

  bool done() const { return index_ >= total_; }
  std::uint64_t index() const { return index_; }
  std::uint64_t total() const { return total_; }

  CompareExchange current() const {
    std::uint64_t mask = j_ - 1;
    std::uint64_t i = ((p_ & ~mask) << 1) | (p_ & mask);
    return CompareExchange{i, i | j_, (i & k_) == 0};
  }

  void advance() {
    ++index_;
    if (++p_ == m_ / 2) {
      p_ = 0;
      j_ >>= 1;
      if (j_ == 0) {
        k_ <<= 1;
        j_ = k_ >> 1;
      }
    }
  }

 private:
  std::uint64_t m_;
  std::uint64_t total_;
  std::uint64_t index_ = 0;
  std::uint64_t k_ = 2;
  std::uint64_t j_ = 1;
  std::uint64_t p_ = 0;
};

inline std::vector<CompareExchange> bitonic_schedule(std::uint64_t m) {
  BitonicCursor cur(m);
  std::vector<CompareExchange> out;
  out.reserve(cur.total());
  for (; !cur.done(); cur.advance()) out.push_back(cur.current());
  return out;
}

// ---------------------------------------------------------------------------
// Sort keys

struct SortKey {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::uint64_t c = 0;
  auto operator<=>(const SortKey&) const = default;
};

inline constexpr std::uint64_t kKeyMax = std::numeric_limits<std::uint64_t>::max();

using KeyFn = std::function<SortKey(const PlainCell&)>;

/// Random order from PRF tags; ties are broken by the block identity.
inline KeyFn key_by_prf_tag(const PrfKey& key) {
  return [key](const PlainCell& c) {
    std::uint64_t kind = c.is_real() ? 0 : 1;
    std::uint64_t tag = prf_eval(key, kind == 0 ? "shf-r" : "shf-d", c.id());
    return SortKey{tag, kind, c.id()};
  };
}

/// Real blocks by (address, priority) with dummies last.
inline KeyFn key_by_addr_then_priority() {
  return [](const PlainCell& c) {
    if (c.is_real()) return SortKey{0, c.id(), c.aux()};
    return SortKey{1, c.id(), 0};
  };
}

/// Ascending destination index computed by the client for each cell.
inline KeyFn key_by_dest(std::function<std::uint64_t(const PlainCell&)> dest) {
  return [dest = std::move(dest)](const PlainCell& c) {
    return SortKey{dest(c), c.is_real() ? 0u : 1u, c.id()};
  };
}

/// One comparator: read(i), read(j), write(i), write(j), both re-sealed.
inline void compare_exchange(Client& c, RegionId region,
                             const CompareExchange& ce, const KeyFn& key) {
  SortKey ki = key(c.load(PhysAddr{region, ce.i}, c.buf_a));
  SortKey kj = key(c.load(PhysAddr{region, ce.j}, c.buf_b));
  bool swap = ce.ascending ? (kj < ki) : (ki < kj);
  if (swap) std::swap(c.buf_a, c.buf_b);
  c.store_cell(PhysAddr{region, ce.i}, c.buf_a);
  c.store_cell(PhysAddr{region, ce.j}, c.buf_b);
}

struct PumpResult {
  bool finished = false;
  std::uint64_t done_count = 0;  // comparators executed by this pump
};

/// A resumable bitonic sort of one region. Each comparator is four
/// micro-steps of one cell-op; the pair in flight is held client-side.
class SortJob final : public Phase, CellBuffers {
 public:
  SortJob(RegionId region, std::uint64_t m, KeyFn key)
      : region_(region), cursor_(m), key_(std::move(key)) {}

  /// Executes min(quota, remaining) whole comparators.
  PumpResult pump(Client& c, std::uint64_t quota) {
    if (quota == 0) throw Error("pump quota must be at least 1");
    PumpResult r;
    while (r.done_count < quota && !cursor_.done()) {
      std::uint64_t before = cursor_.index();
      while (cursor_.index() == before) step(c);
      ++r.done_count;
    }
    r.finished = cursor_.done();
    return r;
  }

  RegionId region() const { return region_; }
  std::uint64_t cursor() const { return cursor_.index(); }
  std::uint64_t comparators() const { return cursor_.total(); }

  std::uint64_t total_work() const override { return 4 * cursor_.total(); }
  std::uint64_t work_done() const override {
    return 4 * cursor_.index() + stage_;
  }
  bool done() const override { return cursor_.done(); }
  std::uint64_t next_cost() const override { return 1; }
  std::uint64_t step(Client& c) override {
    const CompareExchange ce = cursor_.current();
    switch (stage_) {
      case 0:
        ki_ = key_(c.load(PhysAddr{region_, ce.i}, buf(c, 0)));
        break;
      case 1: {
        SortKey kj = key_(c.load(PhysAddr{region_, ce.j}, buf(c, 1)));
        swap_ = ce.ascending ? (kj < ki_) : (ki_ < kj);
        break;
      }
      case 2:
        c.store_cell(PhysAddr{region_, ce.i}, buf(c, swap_ ? 1 : 0));
        break;
      default:
        c.store_cell(PhysAddr{region_, ce.j}, buf(c, swap_ ? 0 : 1));
        cursor_.advance();
        stage_ = 0;
        return 1;
    }
    ++stage_;
    return 1;
  }

 private:
  RegionId region_;
  BitonicCursor cursor_;
  KeyFn key_;
  int stage_ = 0;
  SortKey ki_;
  bool swap_ = false;
};

inline void oblivious_sort(Client& c, RegionId region, std::uint64_t m,
                           KeyFn key) {
  SortJob(region, m, std::move(key)).run(c);
}

/// Permutes a power-of-two region by sorting on PRF tags.
inline void oblivious_shuffle(Client& c, RegionId region, std::uint64_t m,
                              const PrfKey& key) {
  oblivious_sort(c, region, m, key_by_prf_tag(key));
}

/// Serial space for dummies created by duplicate suppression.
inline constexpr std::uint64_t kStaleSerialBase = 1ULL << 62;

/// Linear pass over a region sorted by (address, priority): within each run
/// of equal addresses every copy after the first becomes a dummy.
inline PhasePtr make_dedupe_phase(RegionId region, std::uint64_t m) {
  struct State {
    bool have = false;
    std::uint64_t prev = 0;
  };
  auto st = std::make_shared<State>();
  return std::make_unique<MapPhase>(
      region, m, [st](std::uint64_t idx, PlainCell& cell) {
        if (!cell.is_real()) return;
        if (st->have && cell.id() == st->prev) {
          cell.make_dummy(kStaleSerialBase | idx, dummy_class::kPlain);
        } else {
          st->have = true;
          st->prev = cell.id();
        }
      });
}

inline void suppress_duplicates(Client& c, RegionId region, std::uint64_t m) {
  make_dedupe_phase(region, m)->run(c);
}

// ---------------------------------------------------------------------------
// Bucket tables

inline std::uint64_t bucket_index(const PrfKey& key, std::uint64_t x,
                                  std::uint64_t buckets) {
  return prf_eval(key, "bkt", x) % buckets;
}

struct BucketTable {
  RegionId region;
  PrfKey key;
  std::uint64_t buckets = 0;
  std::uint64_t bucket_size = 0;

  std::uint64_t cells() const { return buckets * bucket_size; }
  std::uint64_t bucket_of(std::uint64_t x) const {
    return bucket_index(key, x, buckets);
  }
};

/// Builds a padded bucket table from `items_len` cells of `items` using only
/// oblivious passes: gather with bucket-labelled pads, sort by (bucket,
/// dummy flag), mark overflow, sort overflow and surplus pads to the tail,
/// truncate. With `max_retries == 0` an overflow raises OverflowError;
/// otherwise the build is redone under a fresh key up to `max_retries` times
/// before raising ConfigError.
class BucketBuildPhase final : public Phase {
 public:
  BucketBuildPhase(Client& c, RegionId items, std::uint64_t items_len,
                   const PrfKey& key, std::uint64_t buckets,
                   std::uint64_t bucket_size, int max_retries = 0)
      : items_(items),
        items_len_(items_len),
        max_retries_(max_retries),
        table_{RegionId{}, key, buckets, bucket_size} {
    if (buckets == 0 || bucket_size == 0)
      throw ConfigError("bucket table needs at least one bucket and slot");
    scratch_len_ = next_power_of_two(std::max<std::uint64_t>(
        2, items_len + buckets * bucket_size));
    scratch_ = c.store.alloc(scratch_len_);
    table_.region = c.store.alloc(table_.cells());
    attempt_ = make_attempt();
  }

  const BucketTable& table() const { return table_; }
  int retries() const { return retries_; }
  std::uint64_t scratch_len() const { return scratch_len_; }

  std::uint64_t total_work() const override {
    return spent_ + attempt_->total_work();
  }
  std::uint64_t work_done() const override {
    return spent_ + attempt_->work_done();
  }
  bool done() const override { return attempt_->done(); }
  std::uint64_t next_cost() const override { return attempt_->next_cost(); }
  std::uint64_t step(Client& c) override {
    std::uint64_t cost = attempt_->step(c);
    if (restart_) {
      restart_ = false;
      spent_ += attempt_->work_done();
      attempt_ = make_attempt();
    }
    return cost;
  }

 private:
  SortKey key_of(const PlainCell& cell) const {
    const std::uint64_t b = table_.bucket_size;
    if (cell.is_real()) return SortKey{table_.bucket_of(cell.id()), 0, cell.id()};
    if (cell.aux() == dummy_class::kPad)
      return SortKey{cell.id() / b, 1, cell.id()};
    return SortKey{kKeyMax, 2, cell.id()};
  }

  std::unique_ptr<Pipeline> make_attempt() {
    auto p = std::make_unique<Pipeline>();
    const std::uint64_t pads = table_.cells();
    const std::uint64_t nx = items_len_;

    std::vector<SourceRange> src;
    if (nx > 0) src.push_back(SourceRange{items_, 0, nx, 0});
    p->emplace<GatherPhase>(
        std::move(src), scratch_, scratch_len_,
        [](std::uint64_t i, const SourceRange&, PlainCell& cell) {
          if (cell.is_real())
            cell.set_aux(0);
          else
            cell.make_dummy(i, dummy_class::kFiller);
        },
        [nx, pads](std::uint64_t i, PlainCell& cell) {
          if (i - nx < pads)
            cell.make_dummy(i - nx, dummy_class::kPad);
          else
            cell.make_dummy(i, dummy_class::kFiller);
        });

    KeyFn key = [this](const PlainCell& cell) { return key_of(cell); };
    p->emplace<SortJob>(scratch_, scratch_len_, key);

    p->emplace<ActionPhase>([this](Client&) {
      mark_ = MarkState{};
    });
    p->emplace<MapPhase>(scratch_, scratch_len_,
                         [this](std::uint64_t, PlainCell& cell) { mark(cell); });
    p->emplace<ActionPhase>([this](Client& c) { check_overflow(c); });

    p->emplace<SortJob>(scratch_, scratch_len_, key);

    std::vector<SourceRange> out{SourceRange{scratch_, 0, pads, 0}};
    p->emplace<GatherPhase>(
        std::move(out), table_.region, pads,
        [](std::uint64_t, const SourceRange&, PlainCell&) {},
        [](std::uint64_t, PlainCell&) {});
    p->emplace<ActionPhase>([this](Client& c) { c.store.free(scratch_); });
    return p;
  }

  void mark(PlainCell& cell) {
    std::uint64_t bkt;
    if (cell.is_real())
      bkt = table_.bucket_of(cell.id());
    else if (cell.aux() == dummy_class::kPad)
      bkt = cell.id() / table_.bucket_size;
    else
      return;
    if (!mark_.have || bkt != mark_.bucket) {
      mark_.have = true;
      mark_.bucket = bkt;
      mark_.rank = 0;
    }
    if (mark_.rank >= table_.bucket_size) {
      if (cell.is_real()) {
        if (!mark_.overflow) mark_.overflow_bucket = bkt;
        mark_.overflow = true;
      } else {
        cell.make_dummy(cell.id(), dummy_class::kFiller);
      }
    }
    ++mark_.rank;
  }

  void check_overflow(Client& c) {
    if (!mark_.overflow) return;
    if (retries_ >= max_retries_) {
      c.store.free(scratch_);
      c.store.free(table_.region);
      if (max_retries_ == 0) throw OverflowError(mark_.overflow_bucket);
      throw ConfigError("bucket table build overflowed after " +
                        std::to_string(retries_) + " retries");
    }
    ++retries_;
    table_.key = c.rng.next_key();
    restart_ = true;
  }

  struct MarkState {
    bool have = false;
    std::uint64_t bucket = 0;
    std::uint64_t rank = 0;
    bool overflow = false;
    std::uint64_t overflow_bucket = 0;
  };

  RegionId items_;
  std::uint64_t items_len_;
  int max_retries_;
  BucketTable table_;
  RegionId scratch_;
  std::uint64_t scratch_len_ = 0;
  std::unique_ptr<Pipeline> attempt_;
  std::uint64_t spent_ = 0;
  bool restart_ = false;
  int retries_ = 0;
  MarkState mark_;
};

/// Single-shot build; throws OverflowError if any bucket receives more than
/// `bucket_size` real items.
inline BucketTable build_bucket_table(Client& c, RegionId items,
                                      std::uint64_t items_len,
                                      const PrfKey& key, std::uint64_t buckets,
                                      std::uint64_t bucket_size) {
  BucketBuildPhase phase(c, items, items_len, key, buckets, bucket_size, 0);
  phase.run(c);
  return phase.table();
}

}  // namespace oramkit
