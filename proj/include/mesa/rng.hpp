#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "mesa/matrix.hpp"

namespace mesa {

// Philox4x32-10 counter-based generator (Salmon et al., Random123).
//
// Key   = 64-bit seed, split into two 32-bit words (low, high).
// Block = 128-bit counter: words 0..1 hold a 64-bit block index that
//         increments per draw, words 2..3 hold the 64-bit stream id.
// Two (seed, stream) pairs with different stream ids therefore never share a
// counter value, and output depends only on (seed, stream, position).
class Rng {
 public:
  static constexpr const char* kAlgorithm = "philox4x32-10";
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t position() const noexcept { return block_index_; }

  // Independent generator on another stream of the same seed.
  Rng split(std::uint64_t stream) const { return Rng(seed_, stream); }

  static Block philox(Block ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

  std::uint32_t next_u32() {
    if (lane_ == 4) refill();
    return buffer_[lane_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * normal();
    return m;
  }

 private:
  void refill() {
    const Block ctr = {static_cast<std::uint32_t>(block_index_),
                       static_cast<std::uint32_t>(block_index_ >> 32),
                       static_cast<std::uint32_t>(stream_),
                       static_cast<std::uint32_t>(stream_ >> 32)};
    const Key key = {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    buffer_ = philox(ctr, key);
    ++block_index_;
    lane_ = 0;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_index_ = 0;
  Block buffer_{};
  int lane_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stream ids are (purpose << 48) | index so that every (experiment, seed,
// purpose) triple draws from its own stream.
enum class StreamPurpose : std::uint64_t {
  kGeneric = 0,
  kInit = 1,
  kTrainData = 2,
  kEvalData = 3,
  kProbe = 4,
  kTuning = 5,
  kIcl = 6,
  kPrompt = 7,
  kVerify = 8,
  kDistill = 9,
};

inline std::uint64_t stream_id(StreamPurpose purpose, std::uint64_t index = 0) {
  return (static_cast<std::uint64_t>(purpose) << 48) | (index & 0xFFFFFFFFFFFFull);
}

}  // namespace mesa
