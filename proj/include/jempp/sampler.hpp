#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jempp/energy.hpp"
#include "jempp/rng.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

struct SamplerConfig {
  double alpha = 0.2;    // step size
  double epsilon = 1.0;  // gradient clamp radius; +inf disables clamping
  int k_steps = 20;      // SGLD / proximal SGLD steps
  int m_steps = 10;      // PYLD outer iterations (full propagations)
  int n_steps = 5;       // PYLD inner iterations (first-layer VJPs)
  double noise_scale = 0.2;  // coefficient on the standard-normal noise; equal to alpha by default
  std::uint64_t seed = 1;
  bool record_states = false;
  bool record_energies = false;

  friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("sampler alpha must be finite and > 0");
    if (!(epsilon > 0.0)) throw std::invalid_argument("sampler epsilon must be > 0 (or +inf)");
    if (k_steps < 0 || m_steps < 0 || n_steps < 1) throw std::invalid_argument("sampler step counts out of range");
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) throw std::invalid_argument("noise_scale must be >= 0");
  }
};

enum class SamplerKind { SGLD, ProximalSGLD, PYLD };

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::SGLD: return "sgld";
    case SamplerKind::ProximalSGLD: return "proximal";
    case SamplerKind::PYLD: return "pyld";
  }
  return "?";
}

inline SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "sgld") return SamplerKind::SGLD;
  if (s == "proximal" || s == "psgld") return SamplerKind::ProximalSGLD;
  if (s == "pyld") return SamplerKind::PYLD;
  throw std::invalid_argument("unknown sampler kind '" + s + "' (expected sgld, proximal or pyld)");
}

struct TraceRow {
  int step = 0;
  double energy = 0.0;        // mean energy over chains at the start of the step
  double grad_max_abs = 0.0;  // largest unclamped gradient coordinate
  double x_max_abs = 0.0;     // largest state coordinate after the step
};

/// Exact work accounting for a chain batch. Counters are summed over chains
/// and do not depend on whether recording is enabled.
struct ChainTrace {
  std::uint64_t full_propagations = 0;
  std::uint64_t first_layer_props = 0;
  int steps = 0;  // sampler steps taken (outer iterations for PYLD)
  std::vector<Tensor> states;
  std::vector<TraceRow> rows;

  void merge(const ChainTrace& other) {
    full_propagations += other.full_propagations;
    first_layer_props += other.first_layer_props;
  }

  void write_csv(std::ostream& os) const {
    os << "step,energy,grad_max_abs,x_max_abs\n";
    for (const auto& r : rows) {
      os << r.step << ',' << fmt_double(r.energy) << ',' << fmt_double(r.grad_max_abs) << ',' << fmt_double(r.x_max_abs)
         << '\n';
    }
  }

  static std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

/// A chain produced a non-finite state or energy. Carries the work done so far.
class ChainDiverged : public DivergenceError {
 public:
  ChainDiverged(const std::string& what, ChainTrace trace) : DivergenceError(what), trace_(std::move(trace)) {}
  const ChainTrace& trace() const { return trace_; }

 private:
  ChainTrace trace_;
};

template <class M>
concept EnergyModel = requires(const M& m, const Tensor& x) {
  { m.energy_and_grad(x) } -> std::same_as<EnergyGrad>;
  { m.chain_count(x) } -> std::convertible_to<std::size_t>;
};

/// Models that expose the first-layer split needed by PYLD.
template <class M>
concept SplitEnergyModel = EnergyModel<M> && requires(const M& m, const Tensor& x, const Tensor& p) {
  { m.slack(x) } -> std::same_as<SlackResult>;
  { m.grad_first(x, p) } -> std::same_as<Tensor>;
};

/// Per-coordinate projection onto [-eps, eps].
inline Tensor clamp(const Tensor& v, double eps) {
  if (std::isinf(eps)) return v;
  Tensor out = v;
  for (double& x : out.data()) x = std::clamp(x, -eps, eps);
  return out;
}

struct SampleResult {
  Tensor x;
  ChainTrace trace;
};

namespace detail {

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// x - (alpha/2) * g, in place.
inline void descend(Tensor& x, const Tensor& g, double alpha) {
  const double h = alpha / 2.0;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = x[i] - h * g[i];
}

inline void add_noise(Tensor& x, double scale, Rng& rng) {
  if (scale == 0.0) return;
  for (double& v : x.data()) v = v + scale * rng.normal();
}

inline void check_state(const Tensor& x, const ChainTrace& trace) {
  if (!x.all_finite()) throw ChainDiverged("chain state became non-finite", trace);
}

template <EnergyModel M>
Tensor langevin_step(const M& model, const Tensor& x, const SamplerConfig& cfg, double eps, Rng& rng,
                     ChainTrace& trace) {
  const int step = trace.steps++;
  EnergyGrad eg;
  try {
    eg = model.energy_and_grad(x);
  } catch (const ChainDiverged&) {
    throw;
  } catch (const DivergenceError& e) {
    throw ChainDiverged(e.what(), trace);
  }
  trace.full_propagations += model.chain_count(x);
  Tensor next = x;
  descend(next, clamp(eg.grad, eps), cfg.alpha);
  add_noise(next, cfg.noise_scale, rng);
  if (cfg.record_energies) trace.rows.push_back({step, mean(eg.energy), eg.grad.max_abs(), next.max_abs()});
  if (cfg.record_states) trace.states.push_back(next);
  check_state(next, trace);
  return next;
}

}  // namespace detail

/// x - (alpha/2) dE/dx + noise_scale * N(0, I).
template <EnergyModel M>
Tensor sgld_step(const M& model, const Tensor& x, const SamplerConfig& cfg, Rng& rng, ChainTrace& trace) {
  return detail::langevin_step(model, x, cfg, std::numeric_limits<double>::infinity(), rng, trace);
}

/// As sgld_step with the gradient clamped to [-epsilon, epsilon] per
/// coordinate. The noise is not clamped.
template <EnergyModel M>
Tensor proximal_sgld_step(const M& model, const Tensor& x, const SamplerConfig& cfg, Rng& rng, ChainTrace& trace) {
  return detail::langevin_step(model, x, cfg, cfg.epsilon, rng, trace);
}

/// PYLD-M-N. Each outer iteration freezes the slack p (one full propagation)
/// and runs N clamped updates that only differentiate through the first
/// layer; noise is added once after the inner loop.
template <SplitEnergyModel M>
SampleResult pyld_sample(const M& model, const Tensor& x0, const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  SampleResult out;
  out.x = x0;
  ChainTrace& trace = out.trace;
  const std::size_t chains = model.chain_count(x0);
  detail::check_state(out.x, trace);
  for (int t = 0; t < cfg.m_steps; ++t) {
    SlackResult s;
    try {
      s = model.slack(out.x);
    } catch (const DivergenceError& e) {
      throw ChainDiverged(e.what(), trace);
    }
    trace.full_propagations += chains;
    ++trace.steps;
    double grad_max = 0.0;
    for (int k = 0; k < cfg.n_steps; ++k) {
      Tensor g = model.grad_first(out.x, s.p);
      trace.first_layer_props += chains;
      if (k == 0) grad_max = g.max_abs();
      detail::descend(out.x, clamp(g, cfg.epsilon), cfg.alpha);
    }
    detail::add_noise(out.x, cfg.noise_scale, rng);
    if (cfg.record_energies) trace.rows.push_back({t, detail::mean(s.energy), grad_max, out.x.max_abs()});
    if (cfg.record_states) trace.states.push_back(out.x);
    detail::check_state(out.x, trace);
  }
  return out;
}

/// Uniform driver: K steps of (proximal) SGLD, or PYLD-M-N.
template <SplitEnergyModel M>
SampleResult run_chain(const M& model, const Tensor& x0, const SamplerConfig& cfg, SamplerKind kind, Rng& rng) {
  cfg.validate();
  if (kind == SamplerKind::PYLD) return pyld_sample(model, x0, cfg, rng);
  SampleResult out;
  out.x = x0;
  for (int k = 0; k < cfg.k_steps; ++k) {
    out.x = kind == SamplerKind::SGLD ? sgld_step(model, out.x, cfg, rng, out.trace)
                                      : proximal_sgld_step(model, out.x, cfg, rng, out.trace);
  }
  return out;
}

template <SplitEnergyModel M>
SampleResult run_chain(const M& model, const Tensor& x0, const SamplerConfig& cfg, SamplerKind kind) {
  Rng rng(cfg.seed);
  return run_chain(model, x0, cfg, kind, rng);
}

}  // namespace jempp
