#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "oramkit/storage.hpp"

/// @brief Length-prefixed binary protocol for a remote block store.
///
/// Frame: [len u32 LE, excluding itself][opcode u8][body]. Requests:
/// ALLOC(len u64), READ(region u32, offset u64), WRITE(region u32,
/// offset u64, cell), FREE(region u32), SETSTEP(step u64). Replies: ALLOCR
/// (region u32), READR(cell), OK, or ERR(utf8 message).
namespace oramkit::wire {

enum Opcode : std::uint8_t {
  kAlloc = 0x01,
  kRead = 0x02,
  kWrite = 0x03,
  kFree = 0x04,
  kSetStep = 0x05,
  kAllocR = 0x81,
  kReadR = 0x82,
  kOk = 0x83,
  kErr = 0xFF,
};

inline constexpr std::uint32_t kMaxFrame = 1u << 24;

struct Frame {
  std::uint8_t opcode = 0;
  Bytes body;
  bool operator==(const Frame&) const = default;
};

inline Bytes encode(const Frame& f) {
  Bytes out(4 + 1 + f.body.size());
  detail::store_le32(out.data(), static_cast<std::uint32_t>(1 + f.body.size()));
  out[4] = f.opcode;
  std::copy(f.body.begin(), f.body.end(), out.begin() + 5);
  return out;
}

/// Incremental decoder: returns a frame once `buf` holds a complete one and
/// erases the consumed bytes.
inline std::optional<Frame> try_decode(Bytes& buf) {
  if (buf.size() < 4) return std::nullopt;
  std::uint32_t len = detail::load_le32(buf.data());
  if (len == 0 || len > kMaxFrame) throw StorageError("bad frame length");
  if (buf.size() < 4 + static_cast<std::size_t>(len)) return std::nullopt;
  Frame f{buf[4], Bytes(buf.begin() + 5, buf.begin() + 4 + len)};
  buf.erase(buf.begin(), buf.begin() + 4 + len);
  return f;
}

namespace detail {

using oramkit::detail::load_le32;
using oramkit::detail::load_le64;
using oramkit::detail::store_le32;
using oramkit::detail::store_le64;

inline Frame u64_frame(std::uint8_t op, std::uint64_t v) {
  Frame f{op, Bytes(8)};
  store_le64(f.body.data(), v);
  return f;
}

inline Frame addr_frame(std::uint8_t op, PhysAddr a,
                        std::span<const std::uint8_t> extra = {}) {
  Frame f{op, Bytes(12 + extra.size())};
  store_le32(f.body.data(), a.region.value);
  store_le64(f.body.data() + 4, a.offset);
  std::copy(extra.begin(), extra.end(), f.body.begin() + 12);
  return f;
}

inline Frame err_frame(const std::string& msg) {
  return Frame{kErr, Bytes(msg.begin(), msg.end())};
}

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void send_all(int fd, std::span<const std::uint8_t> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    ssize_t r = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (r <= 0) throw StorageError("connection send failed");
    sent += static_cast<std::size_t>(r);
  }
}

inline void recv_exact(int fd, std::uint8_t* out, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, out + got, n - got, 0);
    if (r <= 0) throw StorageError("connection closed");
    got += static_cast<std::size_t>(r);
  }
}

inline void send_frame(int fd, const Frame& f) { send_all(fd, encode(f)); }

inline Frame recv_frame(int fd) {
  std::array<std::uint8_t, 4> hdr{};
  recv_exact(fd, hdr.data(), 4);
  std::uint32_t len = load_le32(hdr.data());
  if (len == 0 || len > kMaxFrame) throw StorageError("bad frame length");
  Bytes rest(len);
  recv_exact(fd, rest.data(), len);
  return Frame{rest[0], Bytes(rest.begin() + 1, rest.end())};
}

inline std::pair<std::string, std::string> split_host_port(
    const std::string& s) {
  auto colon = s.rfind(':');
  if (colon == std::string::npos || colon + 1 == s.size())
    throw ConfigError("expected HOST:PORT, got '" + s + "'");
  return {s.substr(0, colon), s.substr(colon + 1)};
}

}  // namespace detail

/// Client side of the protocol; one connection, synchronous request/reply.
class TcpBackend final : public Backend {
 public:
  TcpBackend(const std::string& host, const std::string& port,
             std::size_t cell_size)
      : cell_size_(cell_size) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0)
      throw StorageError("cannot resolve " + host + ":" + port);
    for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
      detail::Fd fd(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
      if (!fd) continue;
      if (::connect(fd.get(), p->ai_addr, p->ai_addrlen) == 0) {
        fd_ = std::move(fd);
        break;
      }
    }
    ::freeaddrinfo(res);
    if (!fd_) throw StorageError("cannot connect to " + host + ":" + port);
    int one = 1;
    ::setsockopt(fd_.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  static std::unique_ptr<TcpBackend> connect(const std::string& host_port,
                                             std::size_t cell_size) {
    auto [host, port] = detail::split_host_port(host_port);
    return std::make_unique<TcpBackend>(host, port, cell_size);
  }

  std::size_t cell_size() const override { return cell_size_; }

  RegionId alloc(std::uint64_t length) override {
    Frame r = call(detail::u64_frame(kAlloc, length), kAllocR);
    if (r.body.size() != 4) throw StorageError("malformed ALLOCR");
    return RegionId{detail::load_le32(r.body.data())};
  }

  void read(PhysAddr addr, std::span<std::uint8_t> out) override {
    oramkit::detail::check_cell_length(out.size(), cell_size_);
    Frame r = call(detail::addr_frame(kRead, addr), kReadR);
    if (r.body.size() != cell_size_) throw StorageError("cell size mismatch");
    std::copy(r.body.begin(), r.body.end(), out.begin());
  }

  void write(PhysAddr addr, std::span<const std::uint8_t> cell) override {
    oramkit::detail::check_cell_length(cell.size(), cell_size_);
    call(detail::addr_frame(kWrite, addr, cell), kOk);
  }

  void free(RegionId region) override {
    Frame f{kFree, Bytes(4)};
    detail::store_le32(f.body.data(), region.value);
    call(f, kOk);
  }

  void set_step(std::uint64_t step) override {
    call(detail::u64_frame(kSetStep, step), kOk);
  }

  /// Sends an arbitrary frame; used by protocol tests.
  Frame raw_call(const Frame& f) {
    detail::send_frame(fd_.get(), f);
    return detail::recv_frame(fd_.get());
  }

  using Backend::read;
  using Backend::write;

 private:
  Frame call(const Frame& req, std::uint8_t expect) {
    Frame r = raw_call(req);
    if (r.opcode == kErr)
      throw StorageError(std::string(r.body.begin(), r.body.end()));
    if (r.opcode != expect) throw StorageError("unexpected reply opcode");
    return r;
  }

  std::size_t cell_size_;
  detail::Fd fd_;
};

struct ServerOptions {
  /// When set, each session's trace is written to session-<k>.csv here.
  std::optional<std::filesystem::path> trace_dir;
  bool keep_events = true;
};

/// Serves one backend to any number of connections. Each connection is a
/// session with its own step counter and trace; the backend is shared.
class TcpServer {
 public:
  TcpServer(Backend& backend, const std::string& bind_addr,
            ServerOptions opts = {})
      : backend_(backend), opts_(std::move(opts)) {
    auto [host, port] = detail::split_host_port(bind_addr);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(),
                      &hints, &res) != 0)
      throw ConfigError("cannot resolve bind address " + bind_addr);
    for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
      detail::Fd fd(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
      if (!fd) continue;
      int one = 1;
      ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
      if (::bind(fd.get(), p->ai_addr, p->ai_addrlen) == 0 &&
          ::listen(fd.get(), 16) == 0) {
        listen_ = std::move(fd);
        break;
      }
    }
    ::freeaddrinfo(res);
    if (!listen_) throw StorageError("cannot bind " + bind_addr);
    sockaddr_storage ss{};
    socklen_t len = sizeof(ss);
    ::getsockname(listen_.get(), reinterpret_cast<sockaddr*>(&ss), &len);
    port_ = ss.ss_family == AF_INET6
                ? ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port)
                : ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  }

  ~TcpServer() {
    stop();
    join();
  }

  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  std::uint16_t port() const { return port_; }

  /// Accept loop; returns once stop() is called.
  void run() {
    while (!stopping_) {
      pollfd p{listen_.get(), POLLIN, 0};
      int r = ::poll(&p, 1, 100);
      if (r <= 0) continue;
      int c = ::accept(listen_.get(), nullptr, nullptr);
      if (c < 0) continue;
      int one = 1;
      ::setsockopt(c, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard lock(mu_);
      std::size_t id = next_session_++;
      sessions_.emplace_back([this, c, id] { session(detail::Fd(c), id); });
    }
    join_sessions();
  }

  void start() {
    thread_ = std::thread([this] { run(); });
  }
  void stop() { stopping_ = true; }
  void join() {
    if (thread_.joinable()) thread_.join();
  }

  std::size_t sessions_served() const { return next_session_; }

 private:
  void join_sessions() {
    std::list<std::thread> done;
    {
      std::lock_guard lock(mu_);
      done.swap(sessions_);
    }
    for (auto& t : done) t.join();
  }

  void session(detail::Fd fd, std::size_t id) {
    TraceRecorder rec(opts_.keep_events);
    TracedStore store(backend_, rec);
    try {
      for (;;) {
        pollfd p{fd.get(), POLLIN, 0};
        int r = ::poll(&p, 1, 100);
        if (stopping_) break;
        if (r <= 0) continue;
        Frame req = detail::recv_frame(fd.get());
        auto [reply, keep_open] = handle(store, req);
        detail::send_frame(fd.get(), reply);
        if (!keep_open) break;
      }
    } catch (const StorageError&) {
      // peer went away or sent garbage; only this session ends
    }
    if (opts_.trace_dir) {
      try {
        std::filesystem::create_directories(*opts_.trace_dir);
        save_trace(*opts_.trace_dir / ("session-" + std::to_string(id) +
                                       ".csv"),
                   rec.events());
      } catch (const std::exception&) {
      }
    }
  }

  std::pair<Frame, bool> handle(TracedStore& store, const Frame& req) {
    const Bytes& b = req.body;
    auto malformed = [] {
      return std::pair{detail::err_frame("malformed request"), false};
    };
    try {
      switch (req.opcode) {
        case kAlloc: {
          if (b.size() != 8) return malformed();
          RegionId id = store.alloc(detail::load_le64(b.data()));
          Frame f{kAllocR, Bytes(4)};
          detail::store_le32(f.body.data(), id.value);
          return {f, true};
        }
        case kRead: {
          if (b.size() != 12) return malformed();
          PhysAddr a{RegionId{detail::load_le32(b.data())},
                     detail::load_le64(b.data() + 4)};
          Frame f{kReadR, Bytes(store.cell_size())};
          store.read(a, std::span<std::uint8_t>(f.body));
          return {f, true};
        }
        case kWrite: {
          if (b.size() < 12) return malformed();
          PhysAddr a{RegionId{detail::load_le32(b.data())},
                     detail::load_le64(b.data() + 4)};
          store.write(a, std::span<const std::uint8_t>(b).subspan(12));
          return {Frame{kOk, {}}, true};
        }
        case kFree: {
          if (b.size() != 4) return malformed();
          store.free(RegionId{detail::load_le32(b.data())});
          return {Frame{kOk, {}}, true};
        }
        case kSetStep: {
          if (b.size() != 8) return malformed();
          store.set_step(detail::load_le64(b.data()));
          return {Frame{kOk, {}}, true};
        }
        default:
          return {detail::err_frame("unknown opcode"), false};
      }
    } catch (const Error& e) {
      return {detail::err_frame(e.what()), true};
    }
  }

  Backend& backend_;
  ServerOptions opts_;
  detail::Fd listen_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
  std::mutex mu_;
  std::list<std::thread> sessions_;
  std::atomic<std::size_t> next_session_{0};
};

/// Blocking convenience wrapper: serves until `stop` becomes true.
inline void serve_tcp(const std::string& bind_addr, Backend& backend,
                      const std::atomic<bool>& stop, ServerOptions opts = {}) {
  TcpServer server(backend, bind_addr, std::move(opts));
  server.start();
  while (!stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  server.join();
}

}  // namespace oramkit::wire
