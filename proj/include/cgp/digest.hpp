#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace cgp {

/// Incremental SHA-256, hex-encoded on finish.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::byte> bytes);
  Sha256& update(std::string_view text);
  Sha256& update(std::uint64_t value);
  Sha256& update(double value);
  Sha256& update(const Eigen::MatrixXd& m);
  Sha256& update(const Eigen::VectorXd& v);
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);

/// 64-bit FNV-1a. Used for token hashing and PRNG seed derivation, where a
/// short portable hash is needed.
constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

constexpr std::uint64_t fnv1a64(std::string_view text, std::uint64_t h = kFnvOffset) {
  for (char c : text) {
    h ^= static_cast<std::uint8_t>(c);
    h *= kFnvPrime;
  }
  return h;
}

}  // namespace cgp
