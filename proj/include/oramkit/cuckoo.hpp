#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "oramkit/core.hpp"
#include "oramkit/obliv_sort.hpp"
#include "oramkit/pipeline.hpp"
#include "oramkit/storage.hpp"

/// @brief Two-table cuckoo hashing with a shared stash. The assignment is
/// computed in client memory; the server sees a fixed read-all/write-all
/// sequence.
namespace oramkit {

inline constexpr std::size_t kDefaultStashSize = 8;
inline constexpr int kMaxBuildRetries = 16;

inline std::uint64_t cuckoo_table_size(std::uint64_t capacity, double eps) {
  if (!(eps > 0.0)) throw ConfigError("cuckoo expansion must be positive");
  auto s = static_cast<std::uint64_t>(
      std::ceil((1.0 + eps) * static_cast<double>(capacity)));
  return std::max<std::uint64_t>(s, 1);
}

inline std::uint64_t cuckoo_max_kicks(std::uint64_t capacity) {
  return 64 * std::max<std::uint64_t>(1, log2_exact(std::max<std::uint64_t>(capacity, 2)));
}

struct CuckooHash {
  PrfKey k1;
  PrfKey k2;
  std::uint64_t size = 1;

  std::uint64_t h1(std::uint64_t x) const { return prf_eval(k1, "ck1", x) % size; }
  std::uint64_t h2(std::uint64_t x) const { return prf_eval(k2, "ck2", x) % size; }
};

/// Slot contents by item index (-1 = empty) and the items sent to the stash.
struct CuckooAssignment {
  std::vector<std::int64_t> t1;
  std::vector<std::int64_t> t2;
  std::vector<std::size_t> stash;
};

/// Random-walk insertion. Returns nullopt if more than `stash_cap` items
/// fail to place within `max_kicks` displacements each.
inline std::optional<CuckooAssignment> cuckoo_assign(
    const std::vector<std::uint64_t>& keys, const CuckooHash& h,
    std::size_t stash_cap, std::uint64_t max_kicks, Rng& rng) {
  CuckooAssignment a;
  a.t1.assign(h.size, -1);
  a.t2.assign(h.size, -1);
  for (std::size_t item = 0; item < keys.size(); ++item) {
    auto cur = static_cast<std::int64_t>(item);
    bool placed = false;
    for (std::uint64_t kick = 0; kick <= max_kicks; ++kick) {
      std::uint64_t p1 = h.h1(keys[cur]);
      if (a.t1[p1] < 0) {
        a.t1[p1] = cur;
        placed = true;
        break;
      }
      std::uint64_t p2 = h.h2(keys[cur]);
      if (a.t2[p2] < 0) {
        a.t2[p2] = cur;
        placed = true;
        break;
      }
      if (rng.uniform(2) == 0)
        std::swap(cur, a.t1[p1]);
      else
        std::swap(cur, a.t2[p2]);
    }
    if (!placed) {
      a.stash.push_back(static_cast<std::size_t>(cur));
      if (a.stash.size() > stash_cap) return std::nullopt;
    }
  }
  return a;
}

/// The always-scanned overflow region shared by all cuckoo tables of one
/// structure. Slot ownership is client state.
class Stash {
 public:
  Stash(Client& c, std::size_t capacity)
      : region_(c.store.alloc(capacity)), owners_(capacity) {
    for (std::size_t i = 0; i < capacity; ++i)
      c.write_dummy(PhysAddr{region_, i}, i);
  }

  RegionId region() const { return region_; }
  std::size_t capacity() const { return owners_.size(); }
  std::optional<std::uint64_t> owner(std::size_t slot) const {
    return owners_[slot];
  }

  std::optional<std::vector<std::size_t>> reserve(std::uint64_t owner,
                                                  std::size_t count) {
    std::vector<std::size_t> slots;
    for (std::size_t i = 0; i < owners_.size() && slots.size() < count; ++i)
      if (!owners_[i]) slots.push_back(i);
    if (slots.size() < count) return std::nullopt;
    for (auto s : slots) owners_[s] = owner;
    return slots;
  }

  void release(std::uint64_t owner) {
    for (auto& o : owners_)
      if (o == owner) o.reset();
  }

  std::size_t used() const {
    std::size_t u = 0;
    for (const auto& o : owners_) u += o.has_value();
    return u;
  }

 private:
  RegionId region_;
  std::vector<std::optional<std::uint64_t>> owners_;
};

struct CuckooTable {
  RegionId t1;
  RegionId t2;
  CuckooHash hash;
  std::uint64_t owner = 0;
  std::vector<std::size_t> stash_slots;
  std::vector<Block> stash_items;  // client copy, same order as stash_slots
};

/// Reads `items_len` cells, assigns the real ones privately, then writes T1,
/// T2 and (when a stash is given) every stash slot. The I/O sequence depends
/// only on (items_len, capacity, eps, stash size); key retries are private.
class CuckooBuildPhase final : public Phase {
 public:
  CuckooBuildPhase(Client& c, RegionId items, std::uint64_t items_len,
                   std::uint64_t capacity, double eps, Stash* stash,
                   std::uint64_t owner, int max_retries = kMaxBuildRetries)
      : stash_(stash), capacity_(capacity), max_retries_(max_retries) {
    table_.owner = owner;
    table_.hash.size = cuckoo_table_size(capacity, eps);
    table_.t1 = c.store.alloc(table_.hash.size);
    table_.t2 = c.store.alloc(table_.hash.size);

    const std::uint64_t s = table_.hash.size;
    if (items_len > 0)
      pipe_.emplace<ReadPhase>(items, items_len,
                               [this](std::uint64_t, PlainCell& cell) {
                                 if (cell.is_real())
                                   items_.push_back(cell.to_block());
                               });
    pipe_.emplace<ActionPhase>([this](Client& c) { compute(c); });
    pipe_.emplace<WritePhase>(
        table_.t1, s, [this](std::uint64_t i, PlainCell& cell) {
          if (assign_.t1[i] >= 0)
            cell.load(items_[assign_.t1[i]]);
          else
            cell.make_dummy(i, dummy_class::kPlain);
        });
    pipe_.emplace<WritePhase>(
        table_.t2, s, [this, s](std::uint64_t i, PlainCell& cell) {
          if (assign_.t2[i] >= 0)
            cell.load(items_[assign_.t2[i]]);
          else
            cell.make_dummy(s + i, dummy_class::kPlain);
        });
    if (stash_ != nullptr)
      pipe_.emplace<MapPhase>(
          stash_->region(), stash_->capacity(),
          [this](std::uint64_t slot, PlainCell& cell) {
            for (std::size_t k = 0; k < table_.stash_slots.size(); ++k)
              if (table_.stash_slots[k] == slot) cell.load(table_.stash_items[k]);
          });
  }

  const CuckooTable& table() const { return table_; }
  int retries() const { return retries_; }

  std::uint64_t total_work() const override { return pipe_.total_work(); }
  std::uint64_t work_done() const override { return pipe_.work_done(); }
  bool done() const override { return pipe_.done(); }
  std::uint64_t next_cost() const override { return pipe_.next_cost(); }
  std::uint64_t step(Client& c) override { return pipe_.step(c); }

 private:
  void compute(Client& c) {
    if (items_.size() > capacity_)
      throw ConfigError("cuckoo table input exceeds capacity");
    std::vector<std::uint64_t> keys;
    keys.reserve(items_.size());
    for (const auto& b : items_) keys.push_back(b.id);
    const std::size_t cap = stash_ ? stash_->capacity() : kDefaultStashSize;
    const std::uint64_t kicks = cuckoo_max_kicks(capacity_);
    for (;;) {
      table_.hash.k1 = c.rng.next_key();
      table_.hash.k2 = c.rng.next_key();
      auto a = cuckoo_assign(keys, table_.hash, cap, kicks, c.rng);
      if (a) {
        if (stash_ == nullptr) {
          for (std::size_t k = 0; k < a->stash.size(); ++k)
            table_.stash_slots.push_back(k);
          assign_ = std::move(*a);
          break;
        }
        if (auto slots = stash_->reserve(table_.owner, a->stash.size())) {
          table_.stash_slots = std::move(*slots);
          assign_ = std::move(*a);
          break;
        }
      }
      if (retries_ >= max_retries_)
        throw ConfigError("cuckoo build failed after " +
                          std::to_string(retries_) + " retries");
      ++retries_;
    }
    for (auto idx : assign_.stash) table_.stash_items.push_back(items_[idx]);
  }

  Stash* stash_;
  std::uint64_t capacity_;
  int max_retries_;
  int retries_ = 0;
  CuckooTable table_;
  std::vector<Block> items_;
  CuckooAssignment assign_;
  Pipeline pipe_;
};

/// Runs a complete cuckoo build.
inline CuckooTable cuckoo_build(Client& c, RegionId items,
                                std::uint64_t items_len, std::uint64_t capacity,
                                double eps, Stash* stash,
                                std::uint64_t owner = 0) {
  CuckooBuildPhase phase(c, items, items_len, capacity, eps, stash, owner);
  phase.run(c);
  return phase.table();
}

}  // namespace oramkit
