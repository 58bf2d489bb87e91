#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "jempp/network.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

/// log(sum(exp(v))) with the max shifted out. Throws DivergenceError on
/// non-finite input instead of returning NaN.
inline double log_sum_exp(std::span<const double> v) {
  double m = -INFINITY;
  for (double x : v) {
    if (!std::isfinite(x)) throw DivergenceError("non-finite logit encountered");
    m = std::max(m, x);
  }
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline void softmax(std::span<const double> v, std::span<double> out) {
  const double lse = log_sum_exp(v);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i] - lse);
}

/// Logits f(x). A single sample yields shape (C); a batch yields (B, C).
inline Tensor forward_logits(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  bool single = false;
  const Tensor xb = net.to_batch(x, &single);
  Tape tape = net.forward(xb, mode);
  if (single) return tape.logits.reshaped({net.num_classes()});
  return tape.logits;
}

inline std::vector<double> energies_from_logits(const Tensor& logits) {
  std::vector<double> e(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) e[b] = -log_sum_exp(logits.row(b));
  return e;
}

/// E(x) = -LSE(f(x)) for every row of a batch (or the single sample).
inline std::vector<double> energies(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  return energies_from_logits(net.forward(x, mode).logits);
}

inline double energy(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  bool single = false;
  net.to_batch(x, &single);
  if (!single) throw ShapeError("energy() takes a single sample; use energies() for batches");
  return energies(net, x, mode).front();
}

/// dE/dlogits = -softmax(logits), row by row.
inline Tensor energy_grad_logits(const Tensor& logits) {
  Tensor g(logits.shape());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    auto out = g.row(b);
    softmax(logits.row(b), out);
    for (double& v : out) v = -v;
  }
  return g;
}

struct EnergyGrad {
  Tensor grad;                 // same shape as the input
  std::vector<double> energy;  // per row
};

/// Energies and their input gradient via a full backward pass. In
/// TrainBatchStats mode the gradient is that of the batch sum of energies.
inline EnergyGrad energy_and_grad(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  bool single = false;
  const Tensor xb = net.to_batch(x, &single);
  Tape tape = net.forward(xb, mode);
  EnergyGrad out;
  out.energy = energies_from_logits(tape.logits);
  const Tensor gfeat = net.backward_body(tape, energy_grad_logits(tape.logits));
  Tensor gx = net.backward_first(tape.input, gfeat);
  out.grad = gx.reshaped(x.shape());
  return out;
}

inline Tensor grad_energy_input(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  return energy_and_grad(net, x, mode).grad;
}

struct SlackResult {
  Tensor p;                    // dE/d f0(x), shape of the first-layer output
  std::vector<double> energy;  // energies at the point where p was taken
};

/// Gradient of the energy with respect to the first-layer output: one
/// forward pass and one backward pass through the body.
inline SlackResult slack_with_energy(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  bool single = false;
  const Tensor xb = net.to_batch(x, &single);
  Tape tape = net.forward(xb, mode);
  SlackResult out;
  out.energy = energies_from_logits(tape.logits);
  Tensor p = net.backward_body(tape, energy_grad_logits(tape.logits));
  if (single) {
    out.p = p.reshaped(net.feature_shape());
  } else {
    out.p = std::move(p);
  }
  return out;
}

inline Tensor slack(const SplitNetwork& net, const Tensor& x, BnMode mode) {
  return slack_with_energy(net, x, mode).p;
}

/// p^T J_{f0}(x): a VJP through the first layer only. The body is never
/// evaluated. `mode` is accepted for interface symmetry; the first layer
/// carries no batch-norm state.
inline Tensor grad_first_input(const SplitNetwork& net, const Tensor& x, const Tensor& p, BnMode /*mode*/) {
  bool single = false;
  const Tensor xb = net.to_batch(x, &single);
  Shape expected = net.feature_shape();
  if (!single) expected.insert(expected.begin(), xb.rows());
  if (p.shape() != expected) {
    throw ShapeError("slack shape " + shape_str(p.shape()) + " does not match first-layer output " + shape_str(expected));
  }
  Shape pb = net.feature_shape();
  pb.insert(pb.begin(), xb.rows());
  return net.backward_first(xb, p.reshaped(pb)).reshaped(x.shape());
}

struct JointGradient {
  NetworkGrad grad;
  double ce = 0.0;             // mean cross-entropy on the real batch
  double real_energy = 0.0;    // mean E(x_real)
  double sample_energy = 0.0;  // mean E(x_sampled)
  Tape real_tape;              // real-batch forward, for running stats and accuracy

  double loss() const { return ce + real_energy - sample_energy; }
  double energy_gap() const { return real_energy - sample_energy; }
};

namespace detail {

inline std::size_t check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw ShapeError("got " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " samples");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  return rows;
}

}  // namespace detail

/// How TrainBatchStats normalizes the two halves of the joint objective.
///   Shared:   one forward over real and sampled rows together, so sampled
///             states are normalized relative to the real data
///   Separate: two forwards, each half normalized by its own statistics
enum class JointStats { Shared, Separate };

/// Gradient of  mean CE(x_real, y) + mean E(x_real) - mean E(x_sampled).
/// Minimizing this maximizes log p(y|x) + log p(x) with a single-chain
/// estimate of the partition-function term. `real_tape` always comes from a
/// real-only forward, so running statistics never see sampled states.
inline JointGradient param_grad_joint(const SplitNetwork& net, const Tensor& x_real, std::span<const int> y_real,
                                      const Tensor& x_sampled, BnMode mode, bool want_grad = true,
                                      JointStats stats = JointStats::Shared) {
  const Tensor xr = net.to_batch(x_real);
  const Tensor xs = net.to_batch(x_sampled);
  const std::size_t Br = detail::check_labels(y_real, xr.rows(), net.num_classes());
  const std::size_t Bs = xs.rows();
  const bool shared = stats == JointStats::Shared && mode == BnMode::TrainBatchStats;

  JointGradient out;
  out.grad = net.zero_grad();
  out.real_tape = net.forward(xr, mode);
  Tape joint;
  if (shared) joint = net.forward(concat_rows(xr, xs), mode);
  const Tensor& lr = shared ? joint.logits : out.real_tape.logits;

  // d/dlogits of CE + E is (softmax - onehot) - softmax = -onehot.
  Tensor g_real(out.real_tape.logits.shape());
  for (std::size_t b = 0; b < Br; ++b) {
    const double lse = log_sum_exp(lr.row(b));
    out.ce += lse - lr.row(b)[y_real[b]];
    out.real_energy += -lse;
    g_real.row(b)[y_real[b]] = -1.0 / static_cast<double>(Br);
  }
  out.ce /= static_cast<double>(Br);
  out.real_energy /= static_cast<double>(Br);

  Tape ts;
  if (!shared) ts = net.forward(xs, mode);
  const Tensor& ls = shared ? joint.logits : ts.logits;
  const std::size_t off = shared ? Br : 0;
  Tensor g_samp({Bs, net.num_classes()});
  for (std::size_t b = 0; b < Bs; ++b) {
    auto row = g_samp.row(b);
    softmax(ls.row(off + b), row);
    for (double& v : row) v /= static_cast<double>(Bs);
    out.sample_energy += -log_sum_exp(ls.row(off + b));
  }
  out.sample_energy /= static_cast<double>(Bs);

  if (want_grad) {
    if (shared) {
      const Tensor g = concat_rows(g_real, g_samp);
      const Tensor gf = net.backward_body(joint, g, &out.grad);
      net.backward_first(joint.input, gf, &out.grad.first);
    } else {
      Tensor gf = net.backward_body(out.real_tape, g_real, &out.grad);
      net.backward_first(out.real_tape.input, gf, &out.grad.first);
      gf = net.backward_body(ts, g_samp, &out.grad);
      net.backward_first(ts.input, gf, &out.grad.first);
    }
  }
  return out;
}

struct LossValue {
  double ce = 0.0;
  double energy_gap = 0.0;
  double total() const { return ce + energy_gap; }
};

/// Scalar objective whose gradient param_grad_joint returns.
inline LossValue loss_value(const SplitNetwork& net, const Tensor& x_real, std::span<const int> y_real,
                            const Tensor& x_sampled, BnMode mode, JointStats stats = JointStats::Shared) {
  const Tensor xr = net.to_batch(x_real);
  const Tensor xs = net.to_batch(x_sampled);
  if (xr.rows() != xs.rows()) throw ShapeError("real and sampled batches differ in size");
  JointGradient j = param_grad_joint(net, x_real, y_real, x_sampled, mode, false, stats);
  return {j.ce, j.energy_gap()};
}

/// Adapter exposing a network as an energy model for the samplers.
struct NetworkEnergy {
  const SplitNetwork& net;
  BnMode mode = BnMode::EvalRunningStats;

  EnergyGrad energy_and_grad(const Tensor& x) const { return jempp::energy_and_grad(net, x, mode); }
  SlackResult slack(const Tensor& x) const { return slack_with_energy(net, x, mode); }
  Tensor grad_first(const Tensor& x, const Tensor& p) const { return grad_first_input(net, x, p, mode); }
  std::vector<double> energies(const Tensor& x) const { return jempp::energies(net, x, mode); }
  std::size_t chain_count(const Tensor& x) const { return x.shape() == net.input_shape() ? 1 : x.rows(); }
};

}  // namespace jempp
