#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

namespace jempp {

/// Seeded 64-bit generator. All randomness in the library flows through
/// instances of this type; nothing reads ambient entropy.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double uniform01() { return uniform(0.0, 1.0); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  void fill_normal(std::span<double> out) {
    for (double& v : out) v = normal();
  }

  /// Seed for an independent child stream.
  std::uint64_t split() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

  /// Text form of the full generator state, including the cached normal.
  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_;
    return os.str();
  }

  void set_state(const std::string& text) {
    std::istringstream is(text);
    is >> engine_ >> normal_;
    if (!is) throw std::invalid_argument("malformed generator state");
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace jempp
