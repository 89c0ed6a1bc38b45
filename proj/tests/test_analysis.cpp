#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oramkit/analysis.hpp"
#include "oramkit/workload.hpp"
#include "test_util.hpp"

using namespace oramkit;
using testutil::payload_of;

namespace {

VariantConfig config(Variant v, Mode m, std::uint64_t n, TableKind t = TableKind::Bucket,
                     std::uint64_t seed = 1) {
  VariantConfig c;
  c.variant = v;
  c.mode = m;
  c.table = t;
  c.n = n;
  c.seed = Rng::from_u64(seed).next_key().bytes;
  return c;
}

TraceEvent ev(std::uint64_t step, AccessKind k, std::uint32_t region, std::uint64_t off) {
  return TraceEvent{step, k, PhysAddr{RegionId{region}, off}};
}

}  // namespace

// --- oracle harness ---------------------------------------------------------

TEST(Oracle, RandomWorkloadsPass) {
  Rng rng = Rng::from_u64(5);
  for (Mode m : {Mode::Amortized, Mode::Deamortized}) {
    auto ops = random_program(16, 80, rng);
    EXPECT_TRUE(run_with_oracle(config(Variant::Sqrt, m, 16), ops).pass());
    auto hops = random_program(16, 64, rng);
    EXPECT_TRUE(run_with_oracle(config(Variant::Hier, m, 16, TableKind::Cuckoo), hops).pass());
  }
}

TEST(Oracle, EmptyWorkloadPasses) {
  auto r = run_with_oracle(config(Variant::Sqrt, Mode::Deamortized, 16),
                           std::vector<LogicalOp>{});
  EXPECT_TRUE(r.pass());
  EXPECT_EQ(r.steps, 0u);
}

TEST(Oracle, InjectedFaultReportsFirstDivergence) {
  // The skipped shelter write loses the update; the next read of address 3
  // misses the shelter and re-probes an offset already used this epoch.
  auto cfg = config(Variant::Sqrt, Mode::Deamortized, 16);
  cfg.skip_shelter_write_at_step = 1;
  std::vector<LogicalOp> ops{LogicalOp::write(3, payload_of(42)), LogicalOp::read(5),
                             LogicalOp::read(3), LogicalOp::read(3)};
  auto r = run_with_oracle(cfg, ops);
  ASSERT_FALSE(r.pass());
  EXPECT_EQ(r.divergence->step, 3u);
  EXPECT_EQ(r.divergence->expected, payload_of(42));
  EXPECT_NE(r.divergence->error.find("probed twice"), std::string::npos);
}

TEST(Oracle, FaultInLaterEpochIsAWrongValue) {
  // Skipped write in the last slot of epoch 0; the rebuild then carries the
  // stale value and the read in epoch 1 returns it.
  auto cfg = config(Variant::Sqrt, Mode::Amortized, 16);
  cfg.skip_shelter_write_at_step = 4;
  std::vector<LogicalOp> ops{LogicalOp::read(0), LogicalOp::read(1), LogicalOp::read(2),
                             LogicalOp::write(3, payload_of(9)), LogicalOp::read(3)};
  auto r = run_with_oracle(cfg, ops);
  ASSERT_FALSE(r.pass());
  EXPECT_EQ(r.divergence->step, 5u);
  EXPECT_TRUE(r.divergence->error.empty());
  EXPECT_EQ(r.divergence->got, Bytes(16, 0));
}

// --- skeletons --------------------------------------------------------------

TEST(Skeleton, RunsCollapseConsecutiveAccesses) {
  RoleRegistry roles;
  roles.set(RegionId{1}, "main");
  roles.set(RegionId{2}, "shelter");
  std::vector<TraceEvent> events{
      ev(1, AccessKind::Read, 2, 0),  ev(1, AccessKind::Read, 2, 1),
      ev(1, AccessKind::Read, 1, 7),  ev(1, AccessKind::Write, 1, 7),
      ev(1, AccessKind::Write, 2, 0), ev(2, AccessKind::Read, 9, 3),
      ev(2, AccessKind::Read, 9, 4),
  };
  Skeleton sk = skeletonize(events, roles);
  ASSERT_EQ(sk.steps.size(), 3u);
  EXPECT_TRUE(sk.steps[0].empty());
  std::vector<SkeletonRun> s1{{"shelter", AccessKind::Read, 2},
                              {"main", AccessKind::Read, 1},
                              {"main", AccessKind::Write, 1},
                              {"shelter", AccessKind::Write, 1}};
  EXPECT_EQ(sk.steps[1], s1);
  std::vector<SkeletonRun> s2{{"scratch", AccessKind::Read, 2}};
  EXPECT_EQ(sk.steps[2], s2);
}

TEST(Skeleton, OffsetsAreErasedButOrderMatters) {
  RoleRegistry roles;
  std::vector<TraceEvent> a{ev(1, AccessKind::Read, 1, 0), ev(1, AccessKind::Write, 1, 0)};
  std::vector<TraceEvent> b{ev(1, AccessKind::Read, 1, 5), ev(1, AccessKind::Write, 1, 9)};
  std::vector<TraceEvent> c{ev(1, AccessKind::Write, 1, 0), ev(1, AccessKind::Read, 1, 0)};
  EXPECT_TRUE(skeletons_equal(skeletonize(a, roles), skeletonize(b, roles)));
  EXPECT_FALSE(skeletons_equal(skeletonize(a, roles), skeletonize(c, roles)));
  EXPECT_EQ(first_mismatch(skeletonize(a, roles), skeletonize(c, roles)), 1u);
}

TEST(Skeleton, SameProgramSameSeedIsEqual) {
  auto cfg = config(Variant::Hier, Mode::Deamortized, 16, TableKind::Bucket);
  Rng rng = Rng::from_u64(3);
  auto ops = random_program(16, 40, rng);
  auto a = traced_run(cfg, ops);
  auto b = traced_run(cfg, ops);
  EXPECT_TRUE(a.error.empty());
  EXPECT_EQ(a.events, b.events);
  EXPECT_TRUE(skeletons_equal(a.skeleton, b.skeleton));
}

TEST(Skeleton, DifferentProgramsOnDeamortizedSqrtAreEqual) {
  auto cfg = config(Variant::Sqrt, Mode::Deamortized, 16);
  Rng rng = Rng::from_u64(4);
  for (int i = 0; i < 5; ++i) {
    auto a = traced_run(cfg, random_program(16, 24, rng));
    auto b = traced_run(cfg, random_program(16, 24, rng));
    EXPECT_TRUE(skeletons_equal(a.skeleton, b.skeleton)) << i;
  }
}

TEST(Skeleton, DifferentLengthsAreUnequal) {
  auto cfg = config(Variant::Sqrt, Mode::Deamortized, 16);
  Rng rng = Rng::from_u64(4);
  auto a = traced_run(cfg, random_program(16, 8, rng));
  auto b = traced_run(cfg, random_program(16, 9, rng));
  EXPECT_FALSE(skeletons_equal(a.skeleton, b.skeleton));
  EXPECT_EQ(first_mismatch(a.skeleton, b.skeleton), 9u);
}

// --- no-repeat probing ------------------------------------------------------

TEST(NoRepeat, SqrtRunsNeverRepeatWithinAnEpoch) {
  for (Mode m : {Mode::Amortized, Mode::Deamortized}) {
    auto cfg = config(Variant::Sqrt, m, 16);
    std::vector<LogicalOp> hot(40, LogicalOp::read(7));
    auto r = traced_run(cfg, hot);
    EXPECT_TRUE(repeated_main_probes(r.events, r.roles, 4).empty());
  }
}

TEST(NoRepeat, SyntheticRepeatIsFlagged) {
  RoleRegistry roles;
  roles.set(RegionId{1}, "main");
  std::vector<TraceEvent> events{ev(1, AccessKind::Read, 1, 3), ev(2, AccessKind::Read, 1, 4),
                                 ev(3, AccessKind::Read, 1, 3), ev(5, AccessKind::Read, 1, 3)};
  // epoch length 4: steps 1..4, then 5..8
  EXPECT_EQ(repeated_main_probes(events, roles, 4), std::vector<std::uint64_t>{3});
}

TEST(NoRepeat, LeakyVariantSkipsProbes) {
  auto cfg = config(Variant::Sqrt, Mode::Amortized, 16);
  cfg.leak_probe_choice = true;
  std::vector<LogicalOp> hot(3, LogicalOp::read(7));
  auto r = traced_run(cfg, hot);
  auto probes = first_reads(r.events, r.roles, "main");
  ASSERT_EQ(probes.size(), 4u);
  EXPECT_TRUE(probes[1].has_value());
  EXPECT_FALSE(probes[2].has_value());
}

// --- chi-square -------------------------------------------------------------

TEST(ChiSquare, HandArithmetic) {
  std::vector<std::uint64_t> flat{7, 7, 7, 7};
  EXPECT_DOUBLE_EQ(chi_square_uniform(flat).statistic, 0.0);
  EXPECT_EQ(chi_square_uniform(flat).dof, 3u);
  std::vector<std::uint64_t> two{10, 0};
  auto c = chi_square_uniform(two);
  EXPECT_DOUBLE_EQ(c.statistic, 10.0);
  EXPECT_EQ(c.dof, 1u);
  std::vector<std::uint64_t> sparse{3, 4};
  EXPECT_THROW(chi_square_uniform(sparse), ConfigError);
  std::vector<std::uint64_t> one{100};
  EXPECT_THROW(chi_square_uniform(one), ConfigError);
}

TEST(ChiSquare, CriticalValuesMatchStandardTables) {
  // 99.9th percentiles from standard chi-square tables
  EXPECT_NEAR(chi_square_critical_999(1), 10.828, 1e-3);
  EXPECT_NEAR(chi_square_critical_999(23), 49.728, 1e-3);
  EXPECT_NEAR(chi_square_critical_999(63), 103.442, 1e-3);
  const std::pair<unsigned, double> table[] = {
      {5, 20.515}, {9, 27.877}, {10, 29.588}, {20, 45.315},
      {30, 59.703}, {50, 86.661}, {100, 149.449}};
  for (auto [dof, want] : table)
    EXPECT_NEAR(chi_square_critical_999(dof), want, 0.01 * want) << dof;
}

TEST(ChiSquare, PrfModulo64IsUniform) {
  PrfKey key = Rng::from_u64(11).next_key();
  std::vector<std::uint64_t> bins(64, 0);
  for (std::uint64_t i = 0; i < 100000; ++i) ++bins[prf_eval(key, "bkt", i) % 64];
  auto c = chi_square_uniform(bins);
  EXPECT_LT(c.statistic, chi_square_critical_999(63));
}

TEST(ChiSquare, DetectsSkew) {
  std::vector<std::uint64_t> bins(64, 100);
  bins[0] = 300;
  auto c = chi_square_uniform(bins);
  EXPECT_GT(c.statistic, chi_square_critical_999(63));
}

// --- profiles ---------------------------------------------------------------

TEST(Profile, SummaryStatistics) {
  auto p = summarize_counts("x", 4, {1, 2, 3, 4, 100});
  EXPECT_DOUBLE_EQ(p.mean, 22.0);
  EXPECT_EQ(p.p50, 3u);
  EXPECT_EQ(p.p99, 100u);
  EXPECT_EQ(p.max, 100u);
  EXPECT_EQ(p.argmax, 5u);
  EXPECT_NEAR(p.max_over_mean, 100.0 / 22.0, 1e-12);
}

TEST(Profile, ConstantTraceHasRatioOne) {
  auto p = summarize_counts("x", 4, std::vector<std::uint64_t>(50, 17));
  EXPECT_DOUBLE_EQ(p.max_over_mean, 1.0);
  EXPECT_EQ(p.p50, 17u);
}

TEST(Profile, RecorderCountsReconcile) {
  TraceRecorder rec(false);
  rec.set_step(0);
  rec.record(AccessKind::Write, PhysAddr{RegionId{1}, 0});
  rec.set_step(1);
  rec.record(AccessKind::Read, PhysAddr{RegionId{1}, 0});
  rec.record(AccessKind::Write, PhysAddr{RegionId{1}, 0});
  rec.set_step(3);
  rec.record(AccessKind::Read, PhysAddr{RegionId{1}, 0});
  EXPECT_EQ(request_counts(rec, 3), (std::vector<std::uint64_t>{2, 0, 1}));
}

TEST(Profile, SqrtAmortizedSpikeSitsOnEpochBoundary) {
  auto cfg = config(Variant::Sqrt, Mode::Amortized, 64);
  Rng rng = Rng::from_u64(8);
  auto p = profile_overhead(cfg, random_program(64, 64, rng));
  EXPECT_GE(p.max_over_mean, 2.0);
  EXPECT_EQ(p.argmax % 8, 0u);
}

TEST(Profile, SqrtDeamortizedIsFlat) {
  auto cfg = config(Variant::Sqrt, Mode::Deamortized, 64);
  Rng rng = Rng::from_u64(8);
  auto p = profile_overhead(cfg, random_program(64, 64, rng));
  EXPECT_LE(p.max_over_mean, 4.0);
}

// --- battery and reports ----------------------------------------------------

TEST(Distinguish, SqrtDeamortizedPasses) {
  auto rep = distinguish(config(Variant::Sqrt, Mode::Deamortized, 16), 10, 200,
                         Rng::from_u64(1));
  EXPECT_TRUE(rep.pass());
  auto j = rep.to_json();
  EXPECT_EQ(j["variant"], "sqrt-deamortized");
  EXPECT_EQ(j["n"], 16);
  ASSERT_EQ(j["checks"].size(), 3u);
  EXPECT_EQ(j["checks"][0]["kind"], "exact");
  EXPECT_EQ(j["checks"][2]["kind"], "statistical");
}

TEST(Distinguish, LeakyVariantIsCaught) {
  auto cfg = config(Variant::Sqrt, Mode::Deamortized, 16);
  cfg.leak_probe_choice = true;
  auto rep = distinguish(cfg, 4, 0, Rng::from_u64(1));
  EXPECT_FALSE(rep.pass());
  EXPECT_FALSE(rep.checks[0].pass);
}

TEST(Distinguish, TooFewSeedsSkipsUniformity) {
  auto rep = distinguish(config(Variant::Sqrt, Mode::Deamortized, 16), 2, 10,
                         Rng::from_u64(1));
  EXPECT_TRUE(rep.checks[2].pass);
  EXPECT_NE(rep.checks[2].detail.find("skipped"), std::string::npos);
}

// --- workloads --------------------------------------------------------------

TEST(Workload, JsonLinesRoundTrip) {
  auto ops = generate_workload(16, 50, Distribution{}, Rng::from_u64(2));
  std::stringstream ss;
  write_workload(ss, ops);
  auto back = read_workload(ss, 16);
  ASSERT_EQ(back.size(), ops.size());
  for (std::size_t i = 0; i < ops.size(); ++i) {
    EXPECT_EQ(back[i].kind, ops[i].kind);
    EXPECT_EQ(back[i].addr.value, ops[i].addr.value);
    EXPECT_EQ(back[i].value, ops[i].value);
  }
}

TEST(Workload, RejectsMalformedLines) {
  const char* bad[] = {
      "{\"op\":\"read\"}",
      "{\"op\":\"read\",\"addr\":16}",
      "{\"op\":\"write\",\"addr\":1}",
      "{\"op\":\"write\",\"addr\":1,\"value\":\"00\"}",
      "{\"op\":\"erase\",\"addr\":1}",
      "not json",
  };
  for (const char* line : bad) {
    std::stringstream ss(line);
    EXPECT_THROW(read_workload(ss, 16), ConfigError) << line;
  }
}

TEST(Workload, DistributionParsing) {
  EXPECT_EQ(Distribution::parse("uniform").kind, Distribution::Uniform);
  auto z = Distribution::parse("zipf:0.99");
  EXPECT_EQ(z.kind, Distribution::Zipf);
  EXPECT_DOUBLE_EQ(z.theta, 0.99);
  EXPECT_THROW(Distribution::parse("zipf:"), ConfigError);
  EXPECT_THROW(Distribution::parse("zipf:-1"), ConfigError);
  EXPECT_THROW(Distribution::parse("zipf:1x"), ConfigError);
  EXPECT_THROW(Distribution::parse("normal"), ConfigError);
}

TEST(Workload, ZipfMatchesItsMass) {
  for (double theta : {0.8, 1.0, 1.5}) {
    const std::uint64_t n = 10, draws = 100000;
    ZipfSampler z(n, theta);
    Rng rng = Rng::from_u64(6);
    std::vector<double> obs(n, 0);
    for (std::uint64_t i = 0; i < draws; ++i) {
      auto k = z.sample(rng);
      ASSERT_GE(k, 1u);
      ASSERT_LE(k, n);
      obs[k - 1] += 1;
    }
    double norm = 0;
    for (std::uint64_t k = 1; k <= n; ++k) norm += std::pow(double(k), -theta);
    double stat = 0;
    for (std::uint64_t k = 1; k <= n; ++k) {
      double e = draws * std::pow(double(k), -theta) / norm;
      stat += (obs[k - 1] - e) * (obs[k - 1] - e) / e;
    }
    EXPECT_LT(stat, chi_square_critical_999(n - 1)) << theta;
  }
}

TEST(Workload, SameSeedSameWorkload) {
  auto d = Distribution::parse("zipf:1.1");
  auto a = generate_workload(64, 100, d, Rng::from_u64(3));
  auto b = generate_workload(64, 100, d, Rng::from_u64(3));
  std::stringstream sa, sb;
  write_workload(sa, a);
  write_workload(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
}
