#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "oramkit/core.hpp"
#include "oramkit/storage.hpp"

/// @brief Resumable server-side work. A Phase is a sequence of micro-steps,
/// each a single cell-op or a client-only action, with its total known up
/// front; a Pipeline chains phases; a RebuildJob pumps a pipeline with a
/// fixed per-request quota.
namespace oramkit {

/// Everything a trusted client needs to touch the server: the store, the
/// sealing key, and the nonce/key RNG. `buf_a`/`buf_b` are scratch cells.
struct Client {
  Client(Backend& store, const PrfKey& seal_key, Rng rng)
      : store(store),
        sealer(seal_key, store.cell_size() - kNonceSize - kHeaderSize),
        rng(std::move(rng)),
        buf_a(store.cell_size()),
        buf_b(store.cell_size()) {}

  std::size_t block_size() const { return sealer.block_size(); }

  /// Reads and opens a cell into `buf`.
  PlainCell load(PhysAddr a, Bytes& buf) {
    store.read(a, buf);
    sealer.open(buf);
    return PlainCell(buf);
  }
  /// Re-seals `buf` under a fresh nonce and writes it.
  void store_cell(PhysAddr a, Bytes& buf) {
    sealer.close(buf, rng);
    store.write(a, std::span<const std::uint8_t>(buf));
  }
  void write_block(PhysAddr a, const Block& b) {
    PlainCell(buf_a).load(b);
    store_cell(a, buf_a);
  }
  Block read_block(PhysAddr a) { return load(a, buf_a).to_block(); }
  /// Writes `cls`-class dummy with the given serial.
  void write_dummy(PhysAddr a, std::uint64_t serial,
                   std::uint8_t cls = dummy_class::kPlain) {
    PlainCell(buf_a).make_dummy(serial, cls);
    store_cell(a, buf_a);
  }

  Backend& store;
  Sealer sealer;
  Rng rng;
  Bytes buf_a;
  Bytes buf_b;
};

class Phase {
 public:
  virtual ~Phase() = default;
  /// Planned cell-ops for the whole phase (may grow on retries).
  virtual std::uint64_t total_work() const = 0;
  virtual std::uint64_t work_done() const = 0;
  virtual bool done() const = 0;
  /// Cost of the next micro-step: 1, or 0 for client-only actions.
  virtual std::uint64_t next_cost() const = 0;
  /// Executes one micro-step and returns its cell-op cost.
  virtual std::uint64_t step(Client& c) = 0;

  void run(Client& c) {
    while (!done()) step(c);
  }
};

using PhasePtr = std::unique_ptr<Phase>;

/// Client-only work (allocation, bookkeeping, private computation).
class ActionPhase final : public Phase {
 public:
  explicit ActionPhase(std::function<void(Client&)> fn) : fn_(std::move(fn)) {}
  std::uint64_t total_work() const override { return 0; }
  std::uint64_t work_done() const override { return 0; }
  bool done() const override { return done_; }
  std::uint64_t next_cost() const override { return 0; }
  std::uint64_t step(Client& c) override {
    fn_(c);
    done_ = true;
    return 0;
  }

 private:
  std::function<void(Client&)> fn_;
  bool done_ = false;
};

/// Holds the cells a phase keeps in client memory between micro-steps.
class CellBuffers {
 protected:
  Bytes& buf(Client& c, int i = 0) {
    if (bufs_[i].size() != c.store.cell_size()) bufs_[i].assign(c.store.cell_size(), 0);
    return bufs_[i];
  }

 private:
  Bytes bufs_[2];
};

/// Reads, transforms and rewrites every cell of a region in order 0..len-1.
class MapPhase final : public Phase, CellBuffers {
 public:
  using Fn = std::function<void(std::uint64_t, PlainCell&)>;
  MapPhase(RegionId region, std::uint64_t len, Fn fn)
      : region_(region), len_(len), fn_(std::move(fn)) {}

  std::uint64_t total_work() const override { return 2 * len_; }
  std::uint64_t work_done() const override { return 2 * pos_ + holding_; }
  bool done() const override { return pos_ >= len_; }
  std::uint64_t next_cost() const override { return 1; }
  std::uint64_t step(Client& c) override {
    PhysAddr a{region_, pos_};
    Bytes& b = buf(c);
    if (!holding_) {
      PlainCell cell = c.load(a, b);
      fn_(pos_, cell);
      holding_ = true;
    } else {
      c.store_cell(a, b);
      holding_ = false;
      ++pos_;
    }
    return 1;
  }

 private:
  RegionId region_;
  std::uint64_t len_;
  Fn fn_;
  std::uint64_t pos_ = 0;
  bool holding_ = false;
};

struct SourceRange {
  RegionId region;
  std::uint64_t offset = 0;
  std::uint64_t count = 0;
  int tag = 0;
};

/// Copies the concatenation of `sources` into dest[0..), transforming each
/// cell; the remaining dest slots up to `dest_len` are filled by `fill`.
class GatherPhase final : public Phase, CellBuffers {
 public:
  using Transform = std::function<void(std::uint64_t dest_index,
                                       const SourceRange&, PlainCell&)>;
  using Fill = std::function<void(std::uint64_t dest_index, PlainCell&)>;

  GatherPhase(std::vector<SourceRange> sources, RegionId dest,
              std::uint64_t dest_len, Transform transform, Fill fill)
      : sources_(std::move(sources)),
        dest_(dest),
        dest_len_(dest_len),
        transform_(std::move(transform)),
        fill_(std::move(fill)) {
    for (const auto& s : sources_) source_total_ += s.count;
    if (source_total_ > dest_len_)
      throw InvariantError("gather sources exceed destination length");
    while (range_ < sources_.size() && sources_[range_].count == 0) ++range_;
  }

  std::uint64_t total_work() const override {
    return 2 * source_total_ + (dest_len_ - source_total_);
  }
  std::uint64_t work_done() const override {
    std::uint64_t done = pos_ <= source_total_
                             ? 2 * pos_
                             : 2 * source_total_ + (pos_ - source_total_);
    return done + holding_;
  }
  bool done() const override { return pos_ >= dest_len_; }
  std::uint64_t next_cost() const override { return 1; }

  std::uint64_t step(Client& c) override {
    Bytes& b = buf(c);
    if (pos_ < source_total_ && !holding_) {
      const SourceRange& s = sources_[range_];
      PlainCell cell = c.load(PhysAddr{s.region, s.offset + within_}, b);
      transform_(pos_, s, cell);
      if (++within_ == s.count) {
        within_ = 0;
        ++range_;
        while (range_ < sources_.size() && sources_[range_].count == 0)
          ++range_;
      }
      holding_ = true;
      return 1;
    }
    if (pos_ >= source_total_) {
      PlainCell cell(b);
      cell.make_dummy(pos_, dummy_class::kPlain);
      fill_(pos_, cell);
    }
    c.store_cell(PhysAddr{dest_, pos_}, b);
    holding_ = false;
    ++pos_;
    return 1;
  }

 private:
  std::vector<SourceRange> sources_;
  RegionId dest_;
  std::uint64_t dest_len_;
  Transform transform_;
  Fill fill_;
  std::uint64_t source_total_ = 0;
  std::uint64_t pos_ = 0;
  std::size_t range_ = 0;
  std::uint64_t within_ = 0;
  bool holding_ = false;
};

/// Reads every cell of a region in order, handing each to `fn`.
class ReadPhase final : public Phase, CellBuffers {
 public:
  using Fn = std::function<void(std::uint64_t, PlainCell&)>;
  ReadPhase(RegionId region, std::uint64_t len, Fn fn)
      : region_(region), len_(len), fn_(std::move(fn)) {}

  std::uint64_t total_work() const override { return len_; }
  std::uint64_t work_done() const override { return pos_; }
  bool done() const override { return pos_ >= len_; }
  std::uint64_t next_cost() const override { return 1; }
  std::uint64_t step(Client& c) override {
    PlainCell cell = c.load(PhysAddr{region_, pos_}, buf(c));
    fn_(pos_, cell);
    ++pos_;
    return 1;
  }

 private:
  RegionId region_;
  std::uint64_t len_;
  Fn fn_;
  std::uint64_t pos_ = 0;
};

/// Writes every cell of a region in order with content produced by `fn`.
class WritePhase final : public Phase, CellBuffers {
 public:
  using Fn = std::function<void(std::uint64_t, PlainCell&)>;
  WritePhase(RegionId region, std::uint64_t len, Fn fn)
      : region_(region), len_(len), fn_(std::move(fn)) {}

  std::uint64_t total_work() const override { return len_; }
  std::uint64_t work_done() const override { return pos_; }
  bool done() const override { return pos_ >= len_; }
  std::uint64_t next_cost() const override { return 1; }
  std::uint64_t step(Client& c) override {
    Bytes& b = buf(c);
    PlainCell cell(b);
    cell.make_dummy(pos_, dummy_class::kPlain);
    fn_(pos_, cell);
    c.store_cell(PhysAddr{region_, pos_}, b);
    ++pos_;
    return 1;
  }

 private:
  RegionId region_;
  std::uint64_t len_;
  Fn fn_;
  std::uint64_t pos_ = 0;
};

/// Sequential composition of phases; itself a Phase.
class Pipeline : public Phase {
 public:
  Pipeline() = default;
  explicit Pipeline(std::vector<PhasePtr> phases) : phases_(std::move(phases)) {}

  void add(PhasePtr p) { phases_.push_back(std::move(p)); }
  template <typename P, typename... Args>
  P& emplace(Args&&... args) {
    auto p = std::make_unique<P>(std::forward<Args>(args)...);
    P& ref = *p;
    phases_.push_back(std::move(p));
    return ref;
  }

  std::uint64_t total_work() const override {
    std::uint64_t w = 0;
    for (const auto& p : phases_) w += p->total_work();
    return w;
  }
  std::uint64_t work_done() const override {
    std::uint64_t w = 0;
    for (std::size_t i = 0; i < phases_.size() && i <= cur_; ++i)
      w += phases_[i]->work_done();
    return w;
  }
  bool done() const override {
    skip();
    return cur_ >= phases_.size();
  }
  std::uint64_t next_cost() const override {
    skip();
    return cur_ < phases_.size() ? phases_[cur_]->next_cost() : 0;
  }
  std::uint64_t step(Client& c) override {
    skip();
    if (cur_ >= phases_.size()) return 0;
    std::uint64_t cost = phases_[cur_]->step(c);
    skip();
    return cost;
  }

  std::size_t size() const { return phases_.size(); }

 private:
  void skip() const {
    while (cur_ < phases_.size() && phases_[cur_]->done()) ++cur_;
  }

  std::vector<PhasePtr> phases_;
  mutable std::size_t cur_ = 0;
};

/// A pipeline pumped by a fixed cell-op quota per logical request. Every
/// micro-step is one cell-op, so a pump executes exactly min(quota,
/// remaining) of them. Client-only steps run eagerly.
class RebuildJob {
 public:
  RebuildJob(std::unique_ptr<Phase> work, std::uint64_t quota)
      : work_(std::move(work)), quota_(quota) {}

  /// Quota such that the work completes within `deadline` pumps.
  static std::uint64_t quota_for(std::uint64_t total_work,
                                 std::uint64_t deadline) {
    if (deadline == 0) throw InvariantError("zero rebuild deadline");
    return (total_work + deadline - 1) / deadline;
  }

  /// Returns cell-ops executed by this pump.
  std::uint64_t pump(Client& c) {
    std::uint64_t executed = 0;
    while (!work_->done() && (executed < quota_ || work_->next_cost() == 0))
      executed += work_->step(c);
    executed_ += executed;
    ++pumps_;
    return executed;
  }

  /// Runs everything that remains; returns cell-ops executed.
  std::uint64_t finish(Client& c) {
    std::uint64_t executed = 0;
    while (!work_->done()) executed += work_->step(c);
    executed_ += executed;
    return executed;
  }

  bool done() const { return work_->done(); }
  std::uint64_t total_work() const { return work_->total_work(); }
  std::uint64_t executed() const { return executed_; }
  std::uint64_t remaining() const { return total_work() - work_->work_done(); }
  std::uint64_t quota() const { return quota_; }
  void set_quota(std::uint64_t q) { quota_ = q; }
  std::uint64_t pumps() const { return pumps_; }
  Phase& work() { return *work_; }

 private:
  std::unique_ptr<Phase> work_;
  std::uint64_t quota_;
  std::uint64_t executed_ = 0;
  std::uint64_t pumps_ = 0;
};

inline bool is_power_of_two(std::uint64_t x) { return x != 0 && (x & (x - 1)) == 0; }

inline std::uint64_t next_power_of_two(std::uint64_t x) {
  std::uint64_t p = 1;
  while (p < x) p <<= 1;
  return p;
}

inline unsigned log2_exact(std::uint64_t x) {
  unsigned l = 0;
  while ((1ULL << l) < x) ++l;
  return l;
}

}  // namespace oramkit
