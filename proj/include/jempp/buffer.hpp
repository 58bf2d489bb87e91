#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "jempp/init.hpp"
#include "jempp/rng.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

enum class Origin { Buffer, Fresh };

struct Draw {
  Tensor x;
  Origin origin;
};

/// Fixed-capacity store of persistent chain states. Draws are with
/// replacement; once full, pushes overwrite a uniformly random slot.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, double rho, std::uint64_t seed) : capacity_(capacity), rho_(rho), rng_(seed) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("reinitialization frequency must lie in [0, 1]");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  double rho() const { return rho_; }
  const std::vector<Tensor>& slots() const { return slots_; }

  /// Each state independently comes from a random slot with probability
  /// 1 - rho, otherwise fresh from the initializer.
  std::vector<Draw> draw(const InformativeInit& init, std::size_t batch_size) {
    if (batch_size == 0) throw std::invalid_argument("draw batch size must be at least 1");
    std::vector<Draw> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const bool fresh = slots_.empty() || rng_.uniform01() < rho_;
      if (fresh) {
        out.push_back({sample_marginal(init, rng_).first, Origin::Fresh});
      } else {
        out.push_back({slots_[rng_.index(slots_.size())], Origin::Buffer});
      }
    }
    return out;
  }

  void push(std::span<const Tensor> states) {
    for (const Tensor& s : states) {
      if (!s.all_finite()) throw std::invalid_argument("refusing to store a non-finite chain state");
    }
    for (const Tensor& s : states) {
      if (slots_.size() < capacity_) {
        slots_.push_back(s);
      } else {
        slots_[rng_.index(capacity_)] = s;
      }
    }
  }

  /// Restores contents, e.g. from a checkpoint.
  void restore(std::vector<Tensor> slots) {
    if (slots.size() > capacity_) throw std::invalid_argument("restored buffer exceeds capacity");
    slots_ = std::move(slots);
  }

  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

 private:
  std::size_t capacity_;
  double rho_;
  Rng rng_;
  std::vector<Tensor> slots_;
};

}  // namespace jempp
