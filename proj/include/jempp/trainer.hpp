#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "jempp/buffer.hpp"
#include "jempp/data.hpp"
#include "jempp/energy.hpp"
#include "jempp/eval.hpp"
#include "jempp/init.hpp"
#include "jempp/network.hpp"
#include "jempp/rng.hpp"
#include "jempp/sampler.hpp"

namespace jempp {

enum class OptimizerKind { SGD, SGDMomentum, Adam };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::SGDMomentum: return "sgd_momentum";
    case OptimizerKind::Adam: return "adam";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "sgd_momentum") return OptimizerKind::SGDMomentum;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd, sgd_momentum or adam)");
}

struct DivergencePolicy {
  double x_bound = 10.0;           // |x|_inf limit for chain states: 10x the [-1, 1] domain radius
  int max_consecutive_skips = 50;  // consecutive skipped batches before aborting

  friend bool operator==(const DivergencePolicy&, const DivergencePolicy&) = default;
};

struct TrainConfig {
  int epochs = 150;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double lr_decay = 0.2;
  std::vector<int> decay_epochs{50, 100, 125};
  OptimizerKind optimizer = OptimizerKind::SGDMomentum;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  SamplerConfig sampler;
  double rho = 0.05;
  std::size_t buffer_capacity = 10000;
  DivergencePolicy divergence;
  JointStats joint_stats = JointStats::Shared;
  std::uint64_t seed = 1;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("lr must be >= 0");
    for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] <= decay_epochs[i - 1]) throw std::invalid_argument("decay_epochs must be strictly increasing");
    }
    sampler.validate();
  }

  /// lr * decay^(number of decay epochs <= epoch), epochs counted from 0.
  double lr_at(int epoch) const {
    const auto passed = std::count_if(decay_epochs.begin(), decay_epochs.end(), [&](int d) { return d <= epoch; });
    return lr * std::pow(lr_decay, static_cast<double>(passed));
  }
};

/// Rescales a schedule written for `reference_epochs` to `epochs`.
inline std::vector<int> scale_decay_epochs(const std::vector<int>& decay, int reference_epochs, int epochs) {
  std::vector<int> out;
  for (int d : decay) {
    const int s = static_cast<int>(std::lround(static_cast<double>(d) * epochs / reference_epochs));
    if (out.empty() || s > out.back()) out.push_back(s);
  }
  return out;
}

struct MetricsRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double ce_loss = 0.0;
  double mean_real_energy = 0.0;
  double mean_sample_energy = 0.0;
  double energy_gap = 0.0;
  double grad_norm = 0.0;
  std::uint64_t divergence_count = 0;
  std::uint64_t full_propagations_cumulative = 0;
  double sample_x_max_abs = 0.0;

  static void write_header(std::ostream& os) {
    os << "epoch,lr,train_acc,eval_acc,ce_loss,mean_real_energy,mean_sample_energy,energy_gap,grad_norm,"
          "divergence_count,full_propagations_cumulative,sample_x_max_abs\n";
  }

  void write_row(std::ostream& os) const {
    auto f = ChainTrace::fmt_double;
    os << epoch << ',' << f(lr) << ',' << f(train_acc) << ',' << f(eval_acc) << ',' << f(ce_loss) << ','
       << f(mean_real_energy) << ',' << f(mean_sample_energy) << ',' << f(energy_gap) << ',' << f(grad_norm) << ','
       << divergence_count << ',' << full_propagations_cumulative << ',' << f(sample_x_max_abs) << '\n';
  }
};

enum class GuardDecision { Continue, SkipBatch, Abort };

/// What the guard looks at after a chain batch or a gradient computation.
struct GuardInput {
  std::span<const double> energies;
  double x_max_abs = 0.0;
  bool values_finite = true;
};

/// Skips batches whose chains or gradients went bad and aborts after too
/// many consecutive skips.
class DivergenceGuard {
 public:
  explicit DivergenceGuard(DivergencePolicy policy = {}) : policy_(policy) {}

  GuardDecision inspect(const GuardInput& in) {
    bool bad = !in.values_finite || !std::isfinite(in.x_max_abs) || in.x_max_abs > policy_.x_bound;
    for (double e : in.energies) bad = bad || !std::isfinite(e);
    return bad ? skip() : GuardDecision::Continue;
  }

  /// Records a skip and reports whether training should stop.
  GuardDecision skip() {
    ++count_;
    ++consecutive_;
    return consecutive_ >= policy_.max_consecutive_skips ? GuardDecision::Abort : GuardDecision::SkipBatch;
  }

  void batch_completed() { consecutive_ = 0; }

  std::uint64_t count() const { return count_; }
  int consecutive() const { return consecutive_; }

 private:
  DivergencePolicy policy_;
  std::uint64_t count_ = 0;
  int consecutive_ = 0;
};

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter and gradient counts differ");
    if (state_a_.empty()) {
      for (Tensor* p : params) {
        state_a_.emplace_back(p->shape());
        state_b_.emplace_back(p->shape());
      }
    }
    ++t_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      Tensor& a = state_a_[k];
      Tensor& b = state_b_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * p[i];
        switch (cfg_.optimizer) {
          case OptimizerKind::SGD:
            p[i] -= lr * gi;
            break;
          case OptimizerKind::SGDMomentum:
            a[i] = cfg_.momentum * a[i] + gi;
            p[i] -= lr * a[i];
            break;
          case OptimizerKind::Adam: {
            a[i] = cfg_.adam_beta1 * a[i] + (1.0 - cfg_.adam_beta1) * gi;
            b[i] = cfg_.adam_beta2 * b[i] + (1.0 - cfg_.adam_beta2) * gi * gi;
            const double mhat = a[i] / (1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_)));
            const double vhat = b[i] / (1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_)));
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            break;
          }
        }
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<Tensor> state_a_;
  std::vector<Tensor> state_b_;
  std::uint64_t t_ = 0;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  bool aborted = false;
  std::uint64_t divergence_count = 0;
  std::uint64_t full_propagations = 0;
};

struct TrainHooks {
  std::function<void(const MetricsRecord&, const SplitNetwork&, const ReplayBuffer&)> on_epoch;
  std::function<void(const SplitNetwork&, const ReplayBuffer&)> on_abort;
};

/// The joint training loop: real minibatch, chain starts from the replay
/// buffer, PYLD refinement with frozen batch-norm statistics, joint
/// gradient step, push back. Running statistics update from real batches only.
inline TrainResult train(SplitNetwork& net, const Dataset& train_set, const Dataset* eval_set,
                         const InformativeInit& init, ReplayBuffer& buffer, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw std::invalid_argument("training set is empty");
  if (init.sample_shape != net.input_shape() || train_set.sample_shape != net.input_shape()) {
    throw ShapeError("network, dataset and initializer disagree on the input shape");
  }

  Rng rng(cfg.seed);
  Rng chain_rng(cfg.sampler.seed);
  Optimizer opt(cfg);
  DivergenceGuard guard(cfg.divergence);
  TrainResult result;
  const std::size_t N = train_set.size();
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double sum_ce = 0.0, sum_real = 0.0, sum_samp = 0.0, sum_gnorm = 0.0, x_max = 0.0;
    std::size_t batches = 0, correct = 0, seen = 0;

    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, N - start));
      const Tensor x_real = train_set.gather(idx);
      const std::vector<int> y_real = train_set.gather_labels(idx);

      std::vector<Tensor> starts;
      for (auto& d : buffer.draw(init, idx.size())) starts.push_back(std::move(d.x));
      const Tensor x0 = stack(starts);

      SampleResult chain;
      GuardDecision decision = GuardDecision::Continue;
      try {
        chain = pyld_sample(NetworkEnergy{net, BnMode::EvalRunningStats}, x0, cfg.sampler, chain_rng);
        result.full_propagations += chain.trace.full_propagations;
        decision = guard.inspect({{}, chain.x.max_abs(), chain.x.all_finite()});
      } catch (const ChainDiverged& e) {
        result.full_propagations += e.trace().full_propagations;
        decision = guard.skip();
      }

      JointGradient jg;
      if (decision == GuardDecision::Continue) {
        try {
          jg = param_grad_joint(net, x_real, y_real, chain.x, BnMode::TrainBatchStats, true, cfg.joint_stats);
          const std::vector<double> e{jg.real_energy, jg.sample_energy, jg.ce};
          decision = guard.inspect({e, chain.x.max_abs(), jg.grad.all_finite()});
        } catch (const DivergenceError&) {
          decision = guard.skip();
        }
      }

      if (decision == GuardDecision::Abort) {
        result.aborted = true;
        break;
      }
      if (decision == GuardDecision::SkipBatch) continue;

      opt.step(net.parameters(), std::as_const(jg.grad).tensors(), lr);
      net.update_running_stats(jg.real_tape);
      buffer.push(unstack(chain.x));
      guard.batch_completed();

      for (std::size_t r = 0; r < idx.size(); ++r) correct += detail::argmax(jg.real_tape.logits.row(r)) == y_real[r];
      seen += idx.size();
      sum_ce += jg.ce;
      sum_real += jg.real_energy;
      sum_samp += jg.sample_energy;
      sum_gnorm += jg.grad.norm();
      x_max = std::max(x_max, chain.x.max_abs());
      ++batches;
    }

    if (result.aborted) break;

    for (const Tensor& s : buffer.slots()) {
      if (!s.all_finite()) throw std::logic_error("non-finite state found in the replay buffer");
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double nb = static_cast<double>(batches);
    MetricsRecord m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : nan;
    m.eval_acc = eval_set ? accuracy(net, *eval_set) : nan;
    m.ce_loss = batches ? sum_ce / nb : nan;
    m.mean_real_energy = batches ? sum_real / nb : nan;
    m.mean_sample_energy = batches ? sum_samp / nb : nan;
    m.energy_gap = m.mean_real_energy - m.mean_sample_energy;
    m.grad_norm = batches ? sum_gnorm / nb : nan;
    m.divergence_count = guard.count();
    m.full_propagations_cumulative = result.full_propagations;
    m.sample_x_max_abs = x_max;
    result.metrics.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m, net, buffer);
  }

  result.divergence_count = guard.count();
  if (result.aborted && hooks.on_abort) hooks.on_abort(net, buffer);
  return result;
}

}  // namespace jempp
