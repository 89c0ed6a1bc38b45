#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "oramkit/core.hpp"
#include "oramkit/error.hpp"

/// @brief The untrusted server side: region-addressed cell storage behind a
/// common Backend interface (memory, file, TCP) and the trace recorder that
/// materializes what the server observes.
namespace oramkit {

struct RegionId {
  std::uint32_t value = 0;
  auto operator<=>(const RegionId&) const = default;
};

struct PhysAddr {
  RegionId region;
  std::uint64_t offset = 0;
  auto operator<=>(const PhysAddr&) const = default;
};

enum class AccessKind : std::uint8_t { Read, Write };

inline const char* to_string(AccessKind k) {
  return k == AccessKind::Read ? "read" : "write";
}

struct TraceEvent {
  std::uint64_t step = 0;
  AccessKind kind = AccessKind::Read;
  PhysAddr addr;
  bool operator==(const TraceEvent&) const = default;
};

struct Trace {
  std::vector<TraceEvent> events;
  std::uint64_t n = 0;
  std::string variant;
};

/// Server API shared by every backend. Reads of never-written slots return
/// the canonical all-zero cell; freed regions are never reused.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::size_t cell_size() const = 0;
  virtual RegionId alloc(std::uint64_t length) = 0;
  virtual void read(PhysAddr addr, std::span<std::uint8_t> out) = 0;
  virtual void write(PhysAddr addr, std::span<const std::uint8_t> cell) = 0;
  virtual void free(RegionId region) = 0;
  virtual void set_step(std::uint64_t) {}

  Cell read(PhysAddr addr) {
    Cell c{Bytes(cell_size(), 0)};
    read(addr, c.bytes);
    return c;
  }
  void write(PhysAddr addr, const Cell& cell) { write(addr, cell.bytes); }
};

namespace detail {

inline void check_cell_length(std::size_t got, std::size_t want) {
  if (got != want) throw StorageError("cell size mismatch");
}

[[noreturn]] inline void out_of_bounds(PhysAddr a) {
  throw StorageError("offset " + std::to_string(a.offset) +
                     " out of bounds for region " +
                     std::to_string(a.region.value));
}

}  // namespace detail

class MemoryBackend final : public Backend {
 public:
  /// `max_cells` bounds the total number of live cell slots (0 = unbounded).
  explicit MemoryBackend(std::size_t cell_size, std::uint64_t max_cells = 0)
      : cell_size_(cell_size), max_cells_(max_cells) {}

  std::size_t cell_size() const override { return cell_size_; }

  RegionId alloc(std::uint64_t length) override {
    std::lock_guard lock(mu_);
    if (length == 0) throw StorageError("region length must be at least 1");
    if (max_cells_ != 0 && live_cells_ + length > max_cells_)
      throw StorageError("backend capacity exhausted");
    RegionId id{next_id_++};
    regions_.emplace(id.value, Region{length, Bytes(length * cell_size_, 0)});
    live_cells_ += length;
    return id;
  }

  void read(PhysAddr addr, std::span<std::uint8_t> out) override {
    detail::check_cell_length(out.size(), cell_size_);
    std::lock_guard lock(mu_);
    const Region& r = region(addr);
    std::memcpy(out.data(), r.data.data() + addr.offset * cell_size_,
                cell_size_);
  }

  void write(PhysAddr addr, std::span<const std::uint8_t> cell) override {
    detail::check_cell_length(cell.size(), cell_size_);
    std::lock_guard lock(mu_);
    Region& r = region(addr);
    std::memcpy(r.data.data() + addr.offset * cell_size_, cell.data(),
                cell_size_);
  }

  void free(RegionId id) override {
    std::lock_guard lock(mu_);
    auto it = regions_.find(id.value);
    if (it == regions_.end()) throw StorageError("unknown region");
    live_cells_ -= it->second.length;
    regions_.erase(it);
  }

  std::size_t live_regions() const {
    std::lock_guard lock(mu_);
    return regions_.size();
  }

 private:
  struct Region {
    std::uint64_t length;
    Bytes data;
  };

  Region& region(PhysAddr addr) {
    auto it = regions_.find(addr.region.value);
    if (it == regions_.end()) throw StorageError("unknown region");
    if (addr.offset >= it->second.length) detail::out_of_bounds(addr);
    return it->second;
  }

  std::size_t cell_size_;
  std::uint64_t max_cells_;
  std::uint64_t live_cells_ = 0;
  std::uint32_t next_id_ = 1;
  std::unordered_map<std::uint32_t, Region> regions_;
  mutable std::mutex mu_;
};

/// One file per region: 18-byte little-endian header ("ORKT", version u16,
/// cell size u32, length u64) followed by fixed-stride cells.
class FileBackend final : public Backend {
 public:
  static constexpr std::uint16_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 18;

  FileBackend(std::filesystem::path dir, std::size_t cell_size)
      : dir_(std::move(dir)), cell_size_(cell_size) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw StorageError("cannot create directory " + dir_.string());
  }

  ~FileBackend() override {
    for (auto& [id, f] : files_) ::close(f.fd);
  }

  FileBackend(const FileBackend&) = delete;
  FileBackend& operator=(const FileBackend&) = delete;

  std::size_t cell_size() const override { return cell_size_; }

  static std::string file_name(RegionId id) {
    return "region-" + std::to_string(id.value) + ".ork";
  }

  RegionId alloc(std::uint64_t length) override {
    std::lock_guard lock(mu_);
    if (length == 0) throw StorageError("region length must be at least 1");
    RegionId id{next_id_++};
    auto path = dir_ / file_name(id);
    int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw StorageError("cannot create " + path.string());
    std::array<std::uint8_t, kHeaderBytes> hdr{};
    std::memcpy(hdr.data(), "ORKT", 4);
    hdr[4] = kVersion & 0xFF;
    hdr[5] = kVersion >> 8;
    detail::store_le32(&hdr[6], static_cast<std::uint32_t>(cell_size_));
    detail::store_le64(&hdr[10], length);
    const off_t total =
        static_cast<off_t>(kHeaderBytes + length * cell_size_);
    if (::pwrite(fd, hdr.data(), hdr.size(), 0) !=
            static_cast<ssize_t>(hdr.size()) ||
        ::ftruncate(fd, total) != 0) {
      int err = errno;
      ::close(fd);
      std::filesystem::remove(path);
      throw StorageError(err == ENOSPC ? "backend capacity exhausted"
                                       : "cannot size region file");
    }
    files_.emplace(id.value, File{fd, length});
    return id;
  }

  void read(PhysAddr addr, std::span<std::uint8_t> out) override {
    detail::check_cell_length(out.size(), cell_size_);
    std::lock_guard lock(mu_);
    const File& f = file(addr);
    if (::pread(f.fd, out.data(), cell_size_, position(addr)) !=
        static_cast<ssize_t>(cell_size_))
      throw StorageError("short read");
  }

  void write(PhysAddr addr, std::span<const std::uint8_t> cell) override {
    detail::check_cell_length(cell.size(), cell_size_);
    std::lock_guard lock(mu_);
    const File& f = file(addr);
    if (::pwrite(f.fd, cell.data(), cell_size_, position(addr)) !=
        static_cast<ssize_t>(cell_size_))
      throw StorageError("short write");
  }

  void free(RegionId id) override {
    std::lock_guard lock(mu_);
    auto it = files_.find(id.value);
    if (it == files_.end()) throw StorageError("unknown region");
    ::close(it->second.fd);
    files_.erase(it);
    std::filesystem::remove(dir_ / file_name(id));
  }

 private:
  struct File {
    int fd;
    std::uint64_t length;
  };

  const File& file(PhysAddr addr) const {
    auto it = files_.find(addr.region.value);
    if (it == files_.end()) throw StorageError("unknown region");
    if (addr.offset >= it->second.length) detail::out_of_bounds(addr);
    return it->second;
  }

  off_t position(PhysAddr addr) const {
    return static_cast<off_t>(kHeaderBytes + addr.offset * cell_size_);
  }

  std::filesystem::path dir_;
  std::size_t cell_size_;
  std::uint32_t next_id_ = 1;
  std::unordered_map<std::uint32_t, File> files_;
  mutable std::mutex mu_;
};

/// Append-only recorder of the server's view. Per-step counts are always
/// kept; the full event log only when `keep_events` is set. A recorder belongs
/// to one session and is not shared between threads.
class TraceRecorder {
 public:
  explicit TraceRecorder(bool keep_events = true) : keep_events_(keep_events) {}

  void set_step(std::uint64_t step) {
    if (step < step_)
      throw StorageError("step regression: " + std::to_string(step) + " < " +
                         std::to_string(step_));
    step_ = step;
  }

  void record(AccessKind kind, PhysAddr addr) {
    if (keep_events_) events_.push_back({step_, kind, addr});
    if (per_step_.size() <= step_) per_step_.resize(step_ + 1, 0);
    ++per_step_[step_];
    ++(kind == AccessKind::Read ? reads_ : writes_);
  }

  /// Enforces one cell length across all traced writes.
  void check_write_length(std::size_t len) {
    if (!write_len_) write_len_ = len;
    if (*write_len_ != len)
      throw StorageError("non-uniform cell size in trace; aborting run");
  }

  std::uint64_t step() const {
    return step_;
  }
  bool keeps_events() const { return keep_events_; }
  const std::vector<TraceEvent>& events() const { return events_; }
  const std::vector<std::uint64_t>& per_step_counts() const {
    return per_step_;
  }
  std::uint64_t reads() const { return reads_; }
  std::uint64_t writes() const { return writes_; }
  std::uint64_t total() const { return reads_ + writes_; }

  Trace to_trace(std::uint64_t n, std::string variant) const {
    return Trace{events_, n, std::move(variant)};
  }

 private:
  bool keep_events_;
  std::uint64_t step_ = 0;
  std::vector<TraceEvent> events_;
  std::vector<std::uint64_t> per_step_;
  std::uint64_t reads_ = 0;
  std::uint64_t writes_ = 0;
  std::optional<std::size_t> write_len_;
};

/// Decorator that records one TraceEvent per successful read or write of the
/// wrapped backend. Failed calls record nothing; free records nothing.
class TracedStore final : public Backend {
 public:
  TracedStore(Backend& inner, TraceRecorder& recorder)
      : inner_(inner), rec_(recorder) {}

  std::size_t cell_size() const override { return inner_.cell_size(); }
  RegionId alloc(std::uint64_t length) override { return inner_.alloc(length); }

  void read(PhysAddr addr, std::span<std::uint8_t> out) override {
    inner_.read(addr, out);
    rec_.record(AccessKind::Read, addr);
  }

  void write(PhysAddr addr, std::span<const std::uint8_t> cell) override {
    rec_.check_write_length(cell.size());
    inner_.write(addr, cell);
    rec_.record(AccessKind::Write, addr);
  }

  void free(RegionId id) override { inner_.free(id); }

  void set_step(std::uint64_t step) override {
    rec_.set_step(step);
    inner_.set_step(step);
  }

  TraceRecorder& recorder() { return rec_; }

  using Backend::read;
  using Backend::write;

 private:
  Backend& inner_;
  TraceRecorder& rec_;
};

// ---------------------------------------------------------------------------
// Trace export / import

inline void write_trace_csv(std::ostream& os,
                            std::span<const TraceEvent> events) {
  os << "step,kind,region,offset\n";
  for (const auto& e : events)
    os << e.step << ',' << to_string(e.kind) << ',' << e.addr.region.value
       << ',' << e.addr.offset << '\n';
}

inline void write_trace_jsonl(std::ostream& os,
                              std::span<const TraceEvent> events) {
  for (const auto& e : events)
    os << "{\"step\":" << e.step << ",\"kind\":\"" << to_string(e.kind)
       << "\",\"region\":" << e.addr.region.value
       << ",\"offset\":" << e.addr.offset << "}\n";
}

namespace detail {

inline AccessKind parse_kind(std::string_view s) {
  if (s == "read") return AccessKind::Read;
  if (s == "write") return AccessKind::Write;
  throw Error("bad trace kind '" + std::string(s) + "'");
}

}  // namespace detail

inline std::vector<TraceEvent> read_trace_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "step,kind,region,offset")
    throw Error("trace CSV header mismatch");
  std::vector<TraceEvent> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string step, kind, region, offset;
    if (!std::getline(ls, step, ',') || !std::getline(ls, kind, ',') ||
        !std::getline(ls, region, ',') || !std::getline(ls, offset))
      throw Error("malformed trace CSV line: " + line);
    out.push_back({std::stoull(step), detail::parse_kind(kind),
                   {RegionId{static_cast<std::uint32_t>(std::stoul(region))},
                    std::stoull(offset)}});
  }
  return out;
}

inline std::vector<TraceEvent> read_trace_jsonl(std::istream& is) {
  std::vector<TraceEvent> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out.push_back({j.at("step").get<std::uint64_t>(),
                   detail::parse_kind(j.at("kind").get<std::string>()),
                   {RegionId{j.at("region").get<std::uint32_t>()},
                    j.at("offset").get<std::uint64_t>()}});
  }
  return out;
}

/// Writes CSV unless the path ends in ".jsonl".
inline void save_trace(const std::filesystem::path& path,
                       std::span<const TraceEvent> events) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string());
  if (path.extension() == ".jsonl")
    write_trace_jsonl(os, events);
  else
    write_trace_csv(os, events);
}

inline std::vector<TraceEvent> load_trace(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  return path.extension() == ".jsonl" ? read_trace_jsonl(is)
                                      : read_trace_csv(is);
}

}  // namespace oramkit
