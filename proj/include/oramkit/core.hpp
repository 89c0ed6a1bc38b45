#pragma once

#include <openssl/evp.h>
#include <sodium.h>

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "oramkit/error.hpp"

/// @brief Client-side primitives: logical addressing, blocks and their sealed
/// cell encoding, the keyed PRF, the deterministic RNG, and the plain RAM used
/// as the correctness oracle for every construction.
namespace oramkit {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::size_t kDefaultBlockSize = 16;
inline constexpr std::size_t kNonceSize = 8;
// kind byte, aux byte, 8-byte tag value
inline constexpr std::size_t kHeaderSize = 10;

/// Total sealed cell length for payload size `block_size`.
constexpr std::size_t cell_size_for(std::size_t block_size) {
  return kNonceSize + kHeaderSize + block_size;
}

namespace detail {

inline void store_le64(std::uint8_t* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint64_t load_le64(const std::uint8_t* in) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | in[i];
  return v;
}

inline void store_le32(std::uint8_t* out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint32_t load_le32(const std::uint8_t* in) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | in[i];
  return v;
}

inline void ensure_sodium() {
  static const bool ok = sodium_init() >= 0;
  if (!ok) throw Error("libsodium initialization failed");
}

inline int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace detail

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

/// Decodes an even-length hex string; throws ConfigError on bad input.
inline Bytes from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw ConfigError("hex string has odd length");
  Bytes out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = detail::hex_digit(hex[2 * i]);
    int lo = detail::hex_digit(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) throw ConfigError("invalid hex digit");
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return out;
}

struct LogicalAddr {
  std::uint64_t value = 0;
  auto operator<=>(const LogicalAddr&) const = default;
};

// ---------------------------------------------------------------------------
// PRF

struct PrfKey {
  std::array<std::uint8_t, 16> bytes{};

  static PrfKey from_words(std::uint64_t lo, std::uint64_t hi) {
    PrfKey k;
    detail::store_le64(k.bytes.data(), lo);
    detail::store_le64(k.bytes.data() + 8, hi);
    return k;
  }
  bool operator==(const PrfKey&) const = default;
};

inline constexpr std::size_t kMaxDomainLength = 16;

/// Keyed PRF: SipHash-2-4 over (len(domain) || domain || input_le).
inline std::uint64_t prf_eval(const PrfKey& key, std::string_view domain,
                              std::uint64_t input) {
  if (domain.size() > kMaxDomainLength)
    throw Error("prf domain longer than 16 bytes");
  detail::ensure_sodium();
  std::array<std::uint8_t, 1 + kMaxDomainLength + 8> msg{};
  msg[0] = static_cast<std::uint8_t>(domain.size());
  std::memcpy(msg.data() + 1, domain.data(), domain.size());
  detail::store_le64(msg.data() + 1 + domain.size(), input);
  std::array<std::uint8_t, crypto_shorthash_siphash24_BYTES> out{};
  crypto_shorthash_siphash24(out.data(), msg.data(), 1 + domain.size() + 8,
                             key.bytes.data());
  return detail::load_le64(out.data());
}

// ---------------------------------------------------------------------------
// Rng

/// Deterministic counter-mode generator. Identical (seed, counter) pairs yield
/// identical streams; copies advance independently.
class Rng {
 public:
  using Seed = std::array<std::uint8_t, 16>;

  Rng() = default;
  explicit Rng(const Seed& seed, std::uint64_t counter = 0)
      : seed_{seed}, counter_(counter) {}

  static Rng from_u64(std::uint64_t s) {
    return Rng(PrfKey::from_words(s, 0x6f72616d6b6974ULL).bytes);
  }

  /// Parses up to 32 hex digits, right-aligned into the 16-byte seed.
  static Rng from_hex(std::string_view hex) {
    if (hex.starts_with("0x") || hex.starts_with("0X")) hex.remove_prefix(2);
    if (hex.empty() || hex.size() > 32)
      throw ConfigError("seed must be 1 to 32 hex digits");
    std::string padded(32 - hex.size(), '0');
    padded.append(hex);
    Bytes raw = oramkit::from_hex(padded);
    Seed seed{};
    std::copy(raw.begin(), raw.end(), seed.begin());
    return Rng(seed);
  }

  std::uint64_t next_u64() {
    return prf_eval(PrfKey{seed_}, "rng", counter_++);
  }

  /// Uniform in [0, bound); bound must be positive.
  std::uint64_t uniform(std::uint64_t bound) {
    if (bound == 0) throw Error("uniform bound must be positive");
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      std::uint64_t x = next_u64();
      if (x >= threshold) return x % bound;
    }
  }

  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  PrfKey next_key() {
    std::uint64_t lo = next_u64();
    std::uint64_t hi = next_u64();
    return PrfKey::from_words(lo, hi);
  }

  /// Independent child stream labelled by `label` (at most 16 bytes).
  Rng fork(std::string_view label) const {
    PrfKey k{seed_};
    return Rng(PrfKey::from_words(prf_eval(k, label, 0), prf_eval(k, label, 1))
                   .bytes);
  }

  const Seed& seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Seed seed_{};
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Blocks and cells

enum class TagKind : std::uint8_t { Real = 0, Dummy = 1 };

/// Dummy classes carried in the aux byte of dummy blocks.
namespace dummy_class {
inline constexpr std::uint8_t kPlain = 0;
// bucket-labelled padding inside a bucket-table build
inline constexpr std::uint8_t kPad = 1;
// sorts after everything; dropped by truncation
inline constexpr std::uint8_t kFiller = 2;
}  // namespace dummy_class

/// The logical unit: a Real block carries its address, a Dummy its serial.
/// `aux` is the merge priority for Real blocks (lower is fresher) and the
/// dummy class for Dummy blocks.
struct Block {
  TagKind kind = TagKind::Dummy;
  std::uint64_t id = 0;
  std::uint8_t aux = 0;
  Bytes payload;

  static Block real(std::uint64_t addr, Bytes payload,
                    std::uint8_t priority = 0) {
    return Block{TagKind::Real, addr, priority, std::move(payload)};
  }
  static Block dummy(std::uint64_t serial, std::size_t block_size,
                     std::uint8_t cls = dummy_class::kPlain) {
    return Block{TagKind::Dummy, serial, cls, Bytes(block_size, 0)};
  }

  bool is_real() const { return kind == TagKind::Real; }
  bool is_dummy() const { return kind == TagKind::Dummy; }
  bool operator==(const Block&) const = default;
};

struct Cell {
  Bytes bytes;
  std::size_t size() const { return bytes.size(); }
  bool operator==(const Cell&) const = default;
};

/// Accessors over an opened (plaintext) cell buffer.
class PlainCell {
 public:
  explicit PlainCell(std::span<std::uint8_t> buf) : buf_(buf) {}

  TagKind kind() const {
    return buf_[kNonceSize] == 0 ? TagKind::Real : TagKind::Dummy;
  }
  bool is_real() const { return kind() == TagKind::Real; }
  std::uint8_t aux() const { return buf_[kNonceSize + 1]; }
  std::uint64_t id() const { return detail::load_le64(&buf_[kNonceSize + 2]); }
  std::span<std::uint8_t> payload() const {
    return buf_.subspan(kNonceSize + kHeaderSize);
  }

  void set_kind(TagKind k) {
    buf_[kNonceSize] = static_cast<std::uint8_t>(k);
  }
  void set_aux(std::uint8_t a) { buf_[kNonceSize + 1] = a; }
  void set_id(std::uint64_t v) { detail::store_le64(&buf_[kNonceSize + 2], v); }
  void make_dummy(std::uint64_t serial, std::uint8_t cls) {
    set_kind(TagKind::Dummy);
    set_aux(cls);
    set_id(serial);
    auto p = payload();
    std::fill(p.begin(), p.end(), 0);
  }
  void load(const Block& b) {
    set_kind(b.kind);
    set_aux(b.aux);
    set_id(b.id);
    std::copy(b.payload.begin(), b.payload.end(), payload().begin());
  }
  Block to_block() const {
    auto p = payload();
    return Block{kind(), id(), aux(), Bytes(p.begin(), p.end())};
  }

 private:
  std::span<std::uint8_t> buf_;
};

/// Probabilistic cell encoding: body = (kind, aux, id, payload) XOR an
/// AES-128 counter keystream keyed by a subkey of the sealing key and
/// indexed by the cell's 8-byte nonce. No integrity protection.
class Sealer {
 public:
  Sealer(const PrfKey& key, std::size_t block_size)
      : key_(key), block_size_(block_size) {
    init();
  }
  Sealer(const Sealer& o) : key_(o.key_), block_size_(o.block_size_) { init(); }
  Sealer& operator=(const Sealer& o) {
    if (this != &o) {
      key_ = o.key_;
      block_size_ = o.block_size_;
      init();
    }
    return *this;
  }
  Sealer(Sealer&&) noexcept = default;
  Sealer& operator=(Sealer&&) noexcept = default;

  std::size_t block_size() const { return block_size_; }
  std::size_t cell_size() const { return cell_size_for(block_size_); }
  const PrfKey& key() const { return key_; }

  /// XORs the body with the keystream of the stored nonce (sealed <-> plain).
  void open(std::span<std::uint8_t> cell) const {
    check_size(cell.size());
    apply_keystream(detail::load_le64(cell.data()),
                    cell.subspan(kNonceSize));
  }

  /// Re-seals a plaintext buffer under a fresh nonce drawn from `rng`.
  void close(std::span<std::uint8_t> cell, Rng& rng) const {
    check_size(cell.size());
    std::uint64_t nonce = rng.next_u64();
    detail::store_le64(cell.data(), nonce);
    apply_keystream(nonce, cell.subspan(kNonceSize));
  }

  Cell seal(Rng& rng, const Block& block) const {
    if (block.payload.size() != block_size_)
      throw Error("block payload length does not match block size");
    Cell c{Bytes(cell_size(), 0)};
    PlainCell(c.bytes).load(block);
    close(c.bytes, rng);
    return c;
  }

  Block unseal(const Cell& cell) const {
    if (cell.size() != cell_size()) throw StorageError("cell size mismatch");
    Bytes buf = cell.bytes;
    open(buf);
    return PlainCell(buf).to_block();
  }

 private:
  struct CtxDeleter {
    void operator()(EVP_CIPHER_CTX* c) const { EVP_CIPHER_CTX_free(c); }
  };

  void init() {
    cell_size_ = cell_size_for(block_size_);
    std::array<std::uint8_t, 16> aes_key{};
    detail::store_le64(aes_key.data(), prf_eval(key_, "seal-subkey", 0));
    detail::store_le64(aes_key.data() + 8, prf_eval(key_, "seal-subkey", 1));
    ctx_.reset(EVP_CIPHER_CTX_new());
    if (!ctx_ ||
        EVP_EncryptInit_ex(ctx_.get(), EVP_aes_128_ecb(), nullptr,
                           aes_key.data(), nullptr) != 1)
      throw Error("cipher initialization failed");
    EVP_CIPHER_CTX_set_padding(ctx_.get(), 0);
  }

  void check_size(std::size_t n) const {
    if (n != cell_size_) throw StorageError("cell size mismatch");
  }

  void apply_keystream(std::uint64_t nonce,
                       std::span<std::uint8_t> body) const {
    constexpr std::size_t kChunkBlocks = 4;
    std::array<std::uint8_t, 16 * kChunkBlocks> counters;
    std::array<std::uint8_t, 16 * kChunkBlocks> stream;
    std::uint64_t counter = 0;
    std::size_t pos = 0;
    while (pos < body.size()) {
      std::size_t remaining = body.size() - pos;
      std::size_t blocks = std::min(kChunkBlocks, (remaining + 15) / 16);
      for (std::size_t b = 0; b < blocks; ++b) {
        detail::store_le64(&counters[16 * b], nonce);
        detail::store_le64(&counters[16 * b + 8], counter++);
      }
      int len = 0;
      if (EVP_EncryptUpdate(ctx_.get(), stream.data(), &len, counters.data(),
                            static_cast<int>(16 * blocks)) != 1)
        throw Error("keystream generation failed");
      std::size_t take = std::min(remaining, 16 * blocks);
      std::uint8_t* out = body.data() + pos;
      std::size_t i = 0;
      for (; i + 8 <= take; i += 8) {
        std::uint64_t a, b;
        std::memcpy(&a, out + i, 8);
        std::memcpy(&b, stream.data() + i, 8);
        a ^= b;
        std::memcpy(out + i, &a, 8);
      }
      for (; i < take; ++i) out[i] ^= stream[i];
      pos += take;
    }
  }

  PrfKey key_;
  std::size_t block_size_;
  std::size_t cell_size_ = 0;
  std::unique_ptr<EVP_CIPHER_CTX, CtxDeleter> ctx_;
};

inline Cell seal(const PrfKey& key, Rng& rng, const Block& block) {
  return Sealer(key, block.payload.size()).seal(rng, block);
}

/// Block size is inferred from the cell length.
inline Block unseal(const PrfKey& key, const Cell& cell) {
  if (cell.size() < kNonceSize + kHeaderSize)
    throw StorageError("cell size mismatch");
  return Sealer(key, cell.size() - kNonceSize - kHeaderSize).unseal(cell);
}

// ---------------------------------------------------------------------------
// Logical operations and the plain RAM oracle

enum class OpKind : std::uint8_t { Read, Write };

struct LogicalOp {
  OpKind kind = OpKind::Read;
  LogicalAddr addr;
  Bytes value;  // write only

  static LogicalOp read(std::uint64_t a) { return {OpKind::Read, {a}, {}}; }
  static LogicalOp write(std::uint64_t a, Bytes v) {
    return {OpKind::Write, {a}, std::move(v)};
  }
  bool operator==(const LogicalOp&) const = default;
};

/// Applies `op` to a zero-initialized array of payloads. Reads return the
/// current payload; writes store and return the previous payload.
inline Bytes plain_ram_apply(std::vector<Bytes>& state, const LogicalOp& op) {
  if (op.addr.value >= state.size())
    throw Error("logical address out of range");
  Bytes& slot = state[op.addr.value];
  if (op.kind == OpKind::Read) return slot;
  if (op.value.size() != slot.size())
    throw Error("write payload length does not match block size");
  Bytes prev = slot;
  slot = op.value;
  return prev;
}

class PlainRam {
 public:
  PlainRam(std::uint64_t n, std::size_t block_size)
      : state_(n, Bytes(block_size, 0)) {}
  Bytes apply(const LogicalOp& op) { return plain_ram_apply(state_, op); }
  const std::vector<Bytes>& state() const { return state_; }

 private:
  std::vector<Bytes> state_;
};

}  // namespace oramkit
