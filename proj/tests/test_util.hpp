#pragma once

#include <memory>
#include <vector>

#include "oramkit/pipeline.hpp"
#include "oramkit/storage.hpp"

namespace testutil {

using namespace oramkit;

/// An in-memory store with a trace recorder and a client bound to it.
struct Rig {
  explicit Rig(std::uint64_t seed = 1, std::size_t block_size = kDefaultBlockSize)
      : mem(cell_size_for(block_size)),
        store(mem, rec),
        client(store, Rng::from_u64(seed).next_key(),
               Rng::from_u64(seed).fork("client")) {}

  RegionId load_region(const std::vector<Block>& blocks) {
    RegionId r = client.store.alloc(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i)
      client.write_block(PhysAddr{r, i}, blocks[i]);
    return r;
  }

  std::vector<Block> dump(RegionId r, std::uint64_t len) {
    std::vector<Block> out;
    for (std::uint64_t i = 0; i < len; ++i)
      out.push_back(client.read_block(PhysAddr{r, i}));
    return out;
  }

  /// (kind, offset) pairs of the events recorded since `from`.
  std::vector<std::pair<AccessKind, std::uint64_t>> pattern(std::size_t from = 0) const {
    std::vector<std::pair<AccessKind, std::uint64_t>> out;
    for (std::size_t i = from; i < rec.events().size(); ++i)
      out.emplace_back(rec.events()[i].kind, rec.events()[i].addr.offset);
    return out;
  }

  MemoryBackend mem;
  TraceRecorder rec;
  TracedStore store;
  Client client;
};

inline Bytes payload_of(std::uint64_t v, std::size_t n = kDefaultBlockSize) {
  Bytes b(n, 0);
  for (std::size_t i = 0; i < 8 && i < n; ++i)
    b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  return b;
}

}  // namespace testutil
