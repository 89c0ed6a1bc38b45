#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "oramkit/core.hpp"
#include "oramkit/pipeline.hpp"
#include "oramkit/storage.hpp"

/// @brief The common ORAM surface: configuration, per-access statistics, the
/// region-role registry used by trace analysis, and the Oram base class.
namespace oramkit {

enum class Variant { Sqrt, Hier };
enum class Mode { Amortized, Deamortized };
enum class TableKind { Bucket, Cuckoo };

inline const char* to_string(Variant v) { return v == Variant::Sqrt ? "sqrt" : "hier"; }
inline const char* to_string(Mode m) {
  return m == Mode::Amortized ? "amortized" : "deamortized";
}
inline const char* to_string(TableKind t) {
  return t == TableKind::Bucket ? "bucket" : "cuckoo";
}

struct VariantConfig {
  Variant variant = Variant::Sqrt;
  Mode mode = Mode::Deamortized;
  TableKind table = TableKind::Bucket;
  std::uint64_t n = 16;
  std::size_t block_size = kDefaultBlockSize;
  Rng::Seed seed{};

  // hierarchical parameters
  unsigned top_level = 2;
  std::uint64_t bucket_size = 8;
  double eps = 0.5;
  std::size_t stash_size = 8;

  // debug knobs
  bool leak_probe_choice = false;
  std::optional<std::uint64_t> skip_shelter_write_at_step;

  std::string name() const {
    std::string s = to_string(variant);
    if (variant == Variant::Hier) s += std::string("-") + to_string(table);
    return s + "-" + to_string(mode);
  }
};

/// Cell-ops of the most recent access, split by purpose.
struct AccessStats {
  std::uint64_t probe_reads = 0;
  std::uint64_t probe_writes = 0;
  std::uint64_t rebuild_ops = 0;

  std::uint64_t probe_ops() const { return probe_reads + probe_writes; }
  std::uint64_t total() const { return probe_ops() + rebuild_ops; }
};

/// Maps region ids to role labels; unlisted regions are scratch space.
class RoleRegistry {
 public:
  void set(RegionId r, std::string label) { labels_[r.value] = std::move(label); }
  std::string label(RegionId r) const {
    auto it = labels_.find(r.value);
    return it == labels_.end() ? "scratch" : it->second;
  }
  const std::map<std::uint32_t, std::string>& labels() const { return labels_; }

 private:
  std::map<std::uint32_t, std::string> labels_;
};

/// Where the first probe of a fresh structure lands: reads of `role` at
/// step 1, offsets divided by `stride`, fall into `bins` equally likely bins.
struct ProbeSite {
  std::string role;
  std::uint64_t bins = 0;
  std::uint64_t stride = 1;
};

class Oram {
 public:
  Oram(const VariantConfig& cfg, Backend& store)
      : cfg_(cfg),
        store_(store),
        client_(store, Rng(cfg.seed).fork("seal").next_key(),
                Rng(cfg.seed).fork("client")) {
    if (store.cell_size() != cell_size_for(cfg.block_size))
      throw ConfigError("backend cell size " + std::to_string(store.cell_size()) +
                        " does not match block size " +
                        std::to_string(cfg.block_size));
  }
  virtual ~Oram() = default;
  Oram(const Oram&) = delete;
  Oram& operator=(const Oram&) = delete;

  /// Executes one logical request as step `steps() + 1`.
  Bytes access(const LogicalOp& op) {
    if (op.addr.value >= cfg_.n) throw Error("logical address out of range");
    if (op.kind == OpKind::Write && op.value.size() != cfg_.block_size)
      throw Error("write payload length does not match block size");
    ++steps_;
    store_.set_step(steps_);
    stats_ = AccessStats{};
    return do_access(op);
  }

  const VariantConfig& config() const { return cfg_; }
  std::uint64_t capacity() const { return cfg_.n; }
  std::uint64_t steps() const { return steps_; }
  const RoleRegistry& roles() const { return roles_; }
  const AccessStats& last_stats() const { return stats_; }
  /// Table-build retries so far (they change the server-visible pattern).
  std::uint64_t retries() const { return retries_; }
  /// Step indices whose pattern a retry may have changed.
  const std::vector<std::uint64_t>& retry_steps() const { return retry_steps_; }
  virtual ProbeSite first_probe_site() const = 0;

 protected:
  virtual Bytes do_access(const LogicalOp& op) = 0;

  void note_retries(std::uint64_t count) {
    if (count == 0) return;
    retries_ += count;
    retry_steps_.push_back(steps_);
  }

  VariantConfig cfg_;
  Backend& store_;
  Client client_;
  RoleRegistry roles_;
  AccessStats stats_;
  std::uint64_t steps_ = 0;
  std::uint64_t retries_ = 0;
  std::vector<std::uint64_t> retry_steps_;
};

/// Private Fisher-Yates permutation of [0, m).
inline std::vector<std::uint64_t> random_permutation(Rng& rng, std::uint64_t m) {
  std::vector<std::uint64_t> p(m);
  for (std::uint64_t i = 0; i < m; ++i) p[i] = i;
  for (std::uint64_t i = m; i > 1; --i) std::swap(p[i - 1], p[rng.uniform(i)]);
  return p;
}

}  // namespace oramkit
