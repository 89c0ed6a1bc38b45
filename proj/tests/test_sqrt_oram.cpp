#include <gtest/gtest.h>

#include <set>

#include "oramkit/sqrt_oram.hpp"
#include "test_util.hpp"

using namespace oramkit;
using testutil::payload_of;

namespace {

VariantConfig sqrt_config(std::uint64_t n, Mode mode, std::uint64_t seed = 1) {
  VariantConfig c;
  c.variant = Variant::Sqrt;
  c.mode = mode;
  c.n = n;
  c.seed = Rng::from_u64(seed).next_key().bytes;
  return c;
}

struct SqrtRig {
  SqrtRig(const VariantConfig& cfg)
      : mem(cell_size_for(cfg.block_size)), store(mem, rec), oram(cfg, store) {}
  MemoryBackend mem;
  TraceRecorder rec;
  TracedStore store;
  SqrtOram oram;
};

void random_oracle_run(const VariantConfig& cfg, std::uint64_t ops, std::uint64_t seed) {
  SqrtRig rig(cfg);
  PlainRam ram(cfg.n, cfg.block_size);
  Rng rng = Rng::from_u64(seed);
  for (std::uint64_t i = 0; i < ops; ++i) {
    std::uint64_t a = rng.uniform(cfg.n);
    LogicalOp op = rng.uniform(2) == 0 ? LogicalOp::read(a)
                                       : LogicalOp::write(a, payload_of(rng.next_u64()));
    ASSERT_EQ(rig.oram.access(op), ram.apply(op)) << "step " << i + 1;
  }
}

}  // namespace

TEST(SqrtParams, Arithmetic) {
  auto p = SqrtParams::for_capacity(16);
  EXPECT_EQ(p.k, 4u);
  EXPECT_EQ(p.m, 32u);
  EXPECT_EQ(SqrtParams::for_capacity(17).k, 5u);
  EXPECT_EQ(SqrtParams::for_capacity(64).m, 128u);
  EXPECT_THROW(SqrtParams::for_capacity(3), ConfigError);
  EXPECT_EQ(p.rebuild_work(), 5796u);
}

TEST(Sqrt, ZeroAfterInit) {
  for (Mode mode : {Mode::Amortized, Mode::Deamortized}) {
    SqrtRig rig(sqrt_config(16, mode));
    for (std::uint64_t a = 0; a < 16; ++a)
      EXPECT_EQ(rig.oram.access(LogicalOp::read(a)), Bytes(16, 0));
  }
}

TEST(Sqrt, SameSeedSamePositionMap) {
  SqrtRig a(sqrt_config(64, Mode::Deamortized, 7));
  SqrtRig b(sqrt_config(64, Mode::Deamortized, 7));
  SqrtRig c(sqrt_config(64, Mode::Deamortized, 8));
  EXPECT_EQ(a.oram.position_map(), b.oram.position_map());
  EXPECT_NE(a.oram.position_map(), c.oram.position_map());
  std::set<std::uint64_t> offs(a.oram.position_map().begin(), a.oram.position_map().end());
  offs.insert(a.oram.dummy_positions().begin(), a.oram.dummy_positions().end());
  EXPECT_EQ(offs.size(), a.oram.params().m);
}

TEST(Sqrt, DeamortizedPerAccessCostIsConstant) {
  SqrtRig rig(sqrt_config(16, Mode::Deamortized));
  const std::uint64_t q = rig.oram.quota();
  EXPECT_EQ(q, 1449u);
  Rng rng = Rng::from_u64(3);
  for (int i = 0; i < 40; ++i) {
    rig.oram.access(LogicalOp::read(rng.uniform(16)));
    const AccessStats& s = rig.oram.last_stats();
    EXPECT_EQ(s.probe_reads, 9u);
    EXPECT_EQ(s.probe_writes, 2u);
    EXPECT_EQ(s.rebuild_ops, q);
    EXPECT_EQ(rig.rec.per_step_counts().at(i + 1), 8 + 2 + 1 + q);
  }
}

TEST(Sqrt, AmortizedBoundarySpike) {
  SqrtRig rig(sqrt_config(16, Mode::Amortized));
  for (int i = 0; i < 8; ++i) {
    rig.oram.access(LogicalOp::read(0));
    std::uint64_t expect = 4 + 2 + 1 + ((i % 4 == 3) ? 5796 : 0);
    EXPECT_EQ(rig.rec.per_step_counts().at(i + 1), expect) << i;
  }
}

TEST(Sqrt, RepeatReadServedFromShelter) {
  SqrtRig rig(sqrt_config(16, Mode::Deamortized));
  const std::uint64_t p5 = rig.oram.position_map()[5];
  RegionId main = rig.oram.main_region();
  auto main_probe = [&](std::uint64_t step) {
    for (const auto& e : rig.rec.events())
      if (e.step == step && e.addr.region == main && e.kind == AccessKind::Read)
        return e.addr.offset;
    return std::uint64_t{~0ULL};
  };
  rig.oram.access(LogicalOp::read(5));
  rig.oram.access(LogicalOp::read(5));
  EXPECT_EQ(main_probe(1), p5);
  EXPECT_NE(main_probe(2), p5);
  EXPECT_EQ(main_probe(2), rig.oram.dummy_positions()[0]);
}

TEST(Sqrt, OracleEquivalence) {
  for (Mode mode : {Mode::Amortized, Mode::Deamortized})
    for (std::uint64_t n : {4, 16, 30, 64})
      for (std::uint64_t seed = 0; seed < 3; ++seed)
        random_oracle_run(sqrt_config(n, mode, seed), 10 * n, seed + 100);
}

TEST(Sqrt, HotAddressStress) {
  for (Mode mode : {Mode::Amortized, Mode::Deamortized}) {
    SqrtRig rig(sqrt_config(16, mode));
    PlainRam ram(16, 16);
    for (std::uint64_t i = 0; i < 200; ++i) {
      LogicalOp op = i % 3 == 0 ? LogicalOp::write(i % 2, payload_of(i)) : LogicalOp::read(i % 2);
      ASSERT_EQ(rig.oram.access(op), ram.apply(op));
    }
  }
}

TEST(Sqrt, JobFinishesByEpochEnd) {
  SqrtRig rig(sqrt_config(64, Mode::Deamortized));
  const std::uint64_t k = rig.oram.params().k;
  for (std::uint64_t i = 0; i + 1 < k; ++i) rig.oram.access(LogicalOp::read(i));
  EXPECT_LE(rig.oram.active_job()->remaining(), rig.oram.quota());
  rig.oram.access(LogicalOp::read(0));
  EXPECT_EQ(rig.oram.epoch(), 1u);
}

TEST(Sqrt, OutOfRangeAndBadPayload) {
  SqrtRig rig(sqrt_config(16, Mode::Deamortized));
  EXPECT_THROW(rig.oram.access(LogicalOp::read(16)), Error);
  EXPECT_THROW(rig.oram.access(LogicalOp::write(1, Bytes(3))), Error);
}

TEST(Sqrt, CellSizeMismatchRejected) {
  MemoryBackend mem(40);
  EXPECT_THROW(SqrtOram(sqrt_config(16, Mode::Amortized), mem), ConfigError);
}
