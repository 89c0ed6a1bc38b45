#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "oramkit/storage.hpp"

using namespace oramkit;

namespace {

constexpr std::size_t kCell = 34;

Cell make_cell(std::uint8_t fill) { return Cell{Bytes(kCell, fill)}; }

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("oramkit-storage-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

template <typename F>
void for_each_backend(F f) {
  {
    MemoryBackend mem(kCell);
    f(mem);
  }
  {
    TempDir d;
    FileBackend file(d.path, kCell);
    f(file);
  }
}

}  // namespace

TEST(Storage, FreshSlotsReadAsZero) {
  for_each_backend([](Backend& b) {
    RegionId r = b.alloc(20);
    EXPECT_EQ(b.read(PhysAddr{r, 19}), Cell{Bytes(kCell, 0)});
  });
}

TEST(Storage, DistinctRegionIds) {
  for_each_backend([](Backend& b) {
    RegionId a = b.alloc(1);
    RegionId c = b.alloc(1);
    EXPECT_NE(a, c);
    b.free(a);
    EXPECT_NE(b.alloc(1), a);
  });
}

TEST(Storage, AllocZeroRejected) {
  for_each_backend([](Backend& b) { EXPECT_THROW(b.alloc(0), StorageError); });
}

TEST(Storage, ReadYourWrites) {
  for_each_backend([](Backend& b) {
    RegionId r = b.alloc(4);
    b.write(PhysAddr{r, 2}, make_cell(7));
    EXPECT_EQ(b.read(PhysAddr{r, 2}), make_cell(7));
    EXPECT_EQ(b.read(PhysAddr{r, 1}), make_cell(0));
  });
}

TEST(Storage, BoundsAndSizeChecks) {
  for_each_backend([](Backend& b) {
    RegionId r = b.alloc(4);
    EXPECT_THROW(b.read(PhysAddr{r, 4}), StorageError);
    EXPECT_THROW(b.write(PhysAddr{r, 0}, Cell{Bytes(kCell - 1)}), StorageError);
    EXPECT_THROW(b.read(PhysAddr{RegionId{999}, 0}), StorageError);
    b.free(r);
    EXPECT_THROW(b.read(PhysAddr{r, 0}), StorageError);
  });
}

TEST(Storage, MemoryCapacityExhausted) {
  MemoryBackend mem(kCell, 10);
  mem.alloc(6);
  EXPECT_THROW(mem.alloc(5), StorageError);
  EXPECT_NO_THROW(mem.alloc(4));
}

TEST(Storage, FileLayoutHeader) {
  TempDir d;
  FileBackend file(d.path, kCell);
  RegionId r = file.alloc(3);
  auto p = d.path / FileBackend::file_name(r);
  ASSERT_TRUE(std::filesystem::exists(p));
  EXPECT_EQ(std::filesystem::file_size(p), 18 + 3 * kCell);
  std::ifstream is(p, std::ios::binary);
  char hdr[18];
  is.read(hdr, 18);
  EXPECT_EQ(std::string(hdr, 4), "ORKT");
  EXPECT_EQ(static_cast<std::uint8_t>(hdr[4]), 1);
  EXPECT_EQ(static_cast<std::uint8_t>(hdr[6]), kCell);
  EXPECT_EQ(static_cast<std::uint8_t>(hdr[10]), 3);
  file.free(r);
  EXPECT_FALSE(std::filesystem::exists(p));
}

TEST(Trace, EventsPerCall) {
  MemoryBackend mem(kCell);
  TraceRecorder rec;
  TracedStore ts(mem, rec);
  RegionId r = ts.alloc(4);
  ts.set_step(5);
  ts.read(PhysAddr{r, 1});
  ts.write(PhysAddr{r, 2}, make_cell(1));
  ASSERT_EQ(rec.events().size(), 2u);
  EXPECT_EQ(rec.events()[0], (TraceEvent{5, AccessKind::Read, PhysAddr{r, 1}}));
  EXPECT_EQ(rec.events()[1], (TraceEvent{5, AccessKind::Write, PhysAddr{r, 2}}));
  EXPECT_THROW(ts.read(PhysAddr{r, 9}), StorageError);
  EXPECT_EQ(rec.events().size(), 2u);
  ts.free(r);
  EXPECT_EQ(rec.total(), 2u);
}

TEST(Trace, StepMonotone) {
  TraceRecorder rec;
  rec.set_step(5);
  EXPECT_NO_THROW(rec.set_step(5));
  EXPECT_THROW(rec.set_step(4), StorageError);
}

TEST(Trace, NonUniformCellLengthAborts) {
  MemoryBackend a(kCell);
  TraceRecorder rec;
  rec.check_write_length(kCell);
  EXPECT_THROW(rec.check_write_length(kCell + 1), StorageError);
}

TEST(Trace, CompletenessOverRandomOps) {
  MemoryBackend mem(kCell);
  TraceRecorder rec;
  TracedStore ts(mem, rec);
  Rng rng = Rng::from_u64(3);
  std::vector<RegionId> regions{ts.alloc(8), ts.alloc(16)};
  std::uint64_t reads = 0, writes = 0;
  for (std::uint64_t step = 0; step < 50; ++step) {
    ts.set_step(step);
    for (int k = 0; k < 20; ++k) {
      PhysAddr a{regions[rng.uniform(2)], rng.uniform(8)};
      if (rng.uniform(2) == 0) {
        ts.read(a);
        ++reads;
      } else {
        ts.write(a, make_cell(static_cast<std::uint8_t>(k)));
        ++writes;
      }
    }
  }
  EXPECT_EQ(rec.reads(), reads);
  EXPECT_EQ(rec.writes(), writes);
  EXPECT_EQ(rec.events().size(), reads + writes);
  std::uint64_t sum = 0;
  for (auto c : rec.per_step_counts()) sum += c;
  EXPECT_EQ(sum, reads + writes);
}

TEST(Trace, CsvAndJsonlRoundTrip) {
  std::vector<TraceEvent> ev{{0, AccessKind::Read, {RegionId{1}, 3}},
                             {2, AccessKind::Write, {RegionId{4}, 7}}};
  std::stringstream csv;
  write_trace_csv(csv, ev);
  EXPECT_EQ(csv.str(), "step,kind,region,offset\n0,read,1,3\n2,write,4,7\n");
  EXPECT_EQ(read_trace_csv(csv), ev);
  std::stringstream js;
  write_trace_jsonl(js, ev);
  EXPECT_EQ(read_trace_jsonl(js), ev);

  TempDir d;
  save_trace(d.path / "t.jsonl", ev);
  save_trace(d.path / "t.csv", ev);
  EXPECT_EQ(load_trace(d.path / "t.jsonl"), ev);
  EXPECT_EQ(load_trace(d.path / "t.csv"), ev);
}
