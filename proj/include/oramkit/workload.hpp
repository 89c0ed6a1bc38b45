#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "oramkit/core.hpp"
#include "oramkit/error.hpp"

/// @brief Workload generation and the JSON Lines workload format:
/// {"op": "read"|"write", "addr": int, "value": hex (writes only)}.
namespace oramkit {

struct Distribution {
  enum Kind { Uniform, Zipf } kind = Uniform;
  double theta = 0;

  /// "uniform" or "zipf:THETA" with THETA > 0.
  static Distribution parse(const std::string& s) {
    if (s == "uniform") return {};
    if (s.rfind("zipf:", 0) == 0) {
      std::size_t used = 0;
      double t = 0;
      try {
        t = std::stod(s.substr(5), &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != s.size() - 5 || !(t > 0) || !std::isfinite(t))
        throw ConfigError("zipf exponent must be a positive number");
      return {Zipf, t};
    }
    throw ConfigError("distribution must be uniform or zipf:THETA");
  }
};

/// Rejection-inversion sampler for P(k) proportional to k^-theta on 1..n.
class ZipfSampler {
 public:
  ZipfSampler(std::uint64_t n, double theta) : n_(static_cast<double>(n)), q_(theta) {
    if (n == 0) throw ConfigError("zipf support must be non-empty");
    if (!(theta > 0)) throw ConfigError("zipf exponent must be positive");
    h_x1_ = big_h(1.5) - 1.0;
    h_n_ = big_h(n_ + 0.5);
    s_ = 2.0 - big_h_inv(big_h(2.5) - h(2.0));
  }

  std::uint64_t sample(Rng& rng) const {
    for (;;) {
      const double u = h_n_ + rng.uniform01() * (h_x1_ - h_n_);
      const double x = big_h_inv(u);
      double k = std::floor(x + 0.5);
      if (k < 1) k = 1;
      if (k > n_) k = n_;
      if (k - x <= s_ || u >= big_h(k + 0.5) - h(k)) return static_cast<std::uint64_t>(k);
    }
  }

 private:
  double h(double x) const { return std::exp(-q_ * std::log(x)); }
  double big_h(double x) const {
    const double lx = std::log(x);
    return helper2((1.0 - q_) * lx) * lx;
  }
  double big_h_inv(double x) const {
    double t = x * (1.0 - q_);
    if (t < -1.0) t = -1.0;
    return std::exp(helper1(t) * x);
  }
  // log1p(x)/x and expm1(x)/x, continuous at 0
  static double helper1(double x) {
    return std::abs(x) > 1e-8 ? std::log1p(x) / x : 1.0 - x * (0.5 - x * (1.0 / 3.0 - 0.25 * x));
  }
  static double helper2(double x) {
    return std::abs(x) > 1e-8 ? std::expm1(x) / x
                              : 1.0 + x * 0.5 * (1.0 + x / 3.0 * (1.0 + 0.25 * x));
  }

  double n_;
  double q_;
  double h_x1_ = 0;
  double h_n_ = 0;
  double s_ = 0;
};

/// Half reads, half writes; Zipf rank k maps to address k - 1.
inline std::vector<LogicalOp> generate_workload(std::uint64_t n, std::uint64_t ops,
                                                const Distribution& dist, Rng rng,
                                                std::size_t block_size = kDefaultBlockSize) {
  if (n == 0) throw ConfigError("n must be positive");
  std::optional<ZipfSampler> zipf;
  if (dist.kind == Distribution::Zipf) zipf.emplace(n, dist.theta);
  std::vector<LogicalOp> out;
  out.reserve(ops);
  for (std::uint64_t i = 0; i < ops; ++i) {
    std::uint64_t a = zipf ? zipf->sample(rng) - 1 : rng.uniform(n);
    if (rng.uniform(2) == 0) {
      out.push_back(LogicalOp::read(a));
      continue;
    }
    Bytes v(block_size);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng.uniform(256));
    out.push_back(LogicalOp::write(a, std::move(v)));
  }
  return out;
}

inline void write_workload(std::ostream& os, const std::vector<LogicalOp>& ops) {
  for (const auto& op : ops) {
    nlohmann::json j;
    j["op"] = op.kind == OpKind::Read ? "read" : "write";
    j["addr"] = op.addr.value;
    if (op.kind == OpKind::Write) j["value"] = to_hex(op.value);
    os << j.dump() << '\n';
  }
}

/// Parses and validates a workload against capacity `n` and block size.
inline std::vector<LogicalOp> read_workload(std::istream& is, std::uint64_t n,
                                            std::size_t block_size = kDefaultBlockSize) {
  std::vector<LogicalOp> ops;
  std::string line;
  std::uint64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      throw ConfigError("workload line " + std::to_string(lineno) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      fail("not valid JSON");
    }
    if (!j.is_object() || !j.contains("op") || !j["op"].is_string()) fail("missing op");
    if (!j.contains("addr") || !j["addr"].is_number_unsigned()) fail("missing addr");
    std::uint64_t a = j["addr"].get<std::uint64_t>();
    if (a >= n) fail("address out of range");
    const std::string kind = j["op"].get<std::string>();
    if (kind == "read") {
      ops.push_back(LogicalOp::read(a));
    } else if (kind == "write") {
      if (!j.contains("value") || !j["value"].is_string()) fail("write without value");
      const std::string hex = j["value"].get<std::string>();
      if (hex.size() != 2 * block_size) fail("value must be " + std::to_string(2 * block_size) +
                                             " hex digits");
      Bytes v;
      try {
        v = from_hex(hex);
      } catch (const std::exception&) {
        fail("value is not hex");
      }
      ops.push_back(LogicalOp::write(a, std::move(v)));
    } else {
      fail("op must be read or write");
    }
  }
  return ops;
}

}  // namespace oramkit
