#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "jempp/data.hpp"
#include "jempp/energy.hpp"
#include "jempp/network.hpp"
#include "jempp/rng.hpp"

namespace jempp {

struct ScoredPrediction {
  double confidence = 0.0;  // max_y p(y|x)
  int predicted = 0;
  int truth = 0;
};

namespace detail {

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Calls fn(batch_indices) over the dataset in fixed-size chunks.
template <class Fn>
void for_each_chunk(std::size_t n, std::size_t chunk, Fn&& fn) {
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    fn(idx);
  }
}

}  // namespace detail

/// Softmax confidences and argmax predictions with eval-mode batch norm.
inline std::vector<ScoredPrediction> predict(const SplitNetwork& net, const Dataset& data) {
  std::vector<ScoredPrediction> out;
  out.reserve(data.size());
  detail::for_each_chunk(data.size(), 256, [&](const std::vector<std::size_t>& idx) {
    const Tensor logits = forward_logits(net, data.gather(idx), BnMode::EvalRunningStats);
    std::vector<double> p(net.num_classes());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      softmax(logits.row(r), p);
      const int k = detail::argmax(p);
      out.push_back({p[k], k, data.y[idx[r]]});
    }
  });
  return out;
}

inline double accuracy(const SplitNetwork& net, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (const auto& p : predict(net, data)) correct += p.predicted == p.truth;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Bucket m (1-based) holds confidences in ((m-1)/M, m/M]; confidence 0
/// goes to bucket 1.
inline std::size_t ece_bucket(double confidence, std::size_t buckets) {
  const double M = static_cast<double>(buckets);
  auto m = static_cast<std::size_t>(std::clamp(std::ceil(confidence * M), 1.0, M));
  while (m > 1 && confidence <= static_cast<double>(m - 1) / M) --m;
  while (m < buckets && confidence > static_cast<double>(m) / M) ++m;
  return m - 1;
}

/// Expected calibration error over equally spaced confidence buckets.
inline double ece(std::span<const ScoredPrediction> preds, std::size_t buckets = 20) {
  if (preds.empty()) throw std::invalid_argument("ece of an empty prediction set");
  if (buckets == 0) throw std::invalid_argument("ece needs at least one bucket");
  std::vector<double> conf(buckets, 0.0), hits(buckets, 0.0), count(buckets, 0.0);
  for (const auto& p : preds) {
    const std::size_t b = ece_bucket(p.confidence, buckets);
    conf[b] += p.confidence;
    hits[b] += p.predicted == p.truth ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  const double n = static_cast<double>(preds.size());
  double total = 0.0;
  for (std::size_t b = 0; b < buckets; ++b) {
    if (count[b] == 0.0) continue;
    total += count[b] / n * std::abs(hits[b] / count[b] - conf[b] / count[b]);
  }
  return total;
}

/// P(score_in > score_out) with ties counted one half, computed from
/// integer pair counts. auroc(a, b) + auroc(b, a) == 1 holds exactly.
inline double auroc(std::span<const double> scores_in, std::span<const double> scores_out) {
  if (scores_in.empty() || scores_out.empty()) throw std::invalid_argument("auroc needs non-empty score lists");
  std::vector<double> out(scores_out.begin(), scores_out.end());
  std::sort(out.begin(), out.end());
  std::uint64_t greater = 0, less = 0;
  for (double s : scores_in) {
    const auto lo = std::lower_bound(out.begin(), out.end(), s);
    const auto hi = std::upper_bound(lo, out.end(), s);
    greater += static_cast<std::uint64_t>(lo - out.begin());
    less += static_cast<std::uint64_t>(out.end() - hi);
  }
  const std::uint64_t pairs = static_cast<std::uint64_t>(scores_in.size()) * scores_out.size();
  const std::uint64_t ties = pairs - greater - less;
  // Numerators in half-pair units; the larger side is taken as a complement.
  const std::uint64_t num = 2 * greater + ties, other = 2 * less + ties;
  const double denom = 2.0 * static_cast<double>(pairs);
  if (num <= other) return static_cast<double>(num) / denom;
  return 1.0 - static_cast<double>(other) / denom;
}

enum class OodScore { LogDensity, MaxSoftmax };

/// LogDensity: -E(x), i.e. log p(x) up to the constant -log Z.
/// MaxSoftmax: max_y p(y|x).
inline std::vector<double> ood_scores(const SplitNetwork& net, const Dataset& data, OodScore kind) {
  if (data.size() == 0) throw std::invalid_argument("ood_scores of an empty dataset");
  std::vector<double> out;
  out.reserve(data.size());
  detail::for_each_chunk(data.size(), 256, [&](const std::vector<std::size_t>& idx) {
    const Tensor logits = forward_logits(net, data.gather(idx), BnMode::EvalRunningStats);
    std::vector<double> p(net.num_classes());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (kind == OodScore::LogDensity) {
        out.push_back(log_sum_exp(logits.row(r)));
      } else {
        softmax(logits.row(r), p);
        out.push_back(*std::max_element(p.begin(), p.end()));
      }
    }
  });
  return out;
}

enum class AttackNorm { Linf, L2 };

struct AttackConfig {
  AttackNorm norm = AttackNorm::Linf;
  double radius = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int steps = 40;
  bool random_start = true;
  double domain_lo = -1.0;
  double domain_hi = 1.0;
  std::uint64_t seed = 0;

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;

  void validate() const {
    if (!(radius >= 0.0)) throw std::invalid_argument("attack radius must be >= 0");
    if (steps < 1) throw std::invalid_argument("attack needs at least one step");
  }
};

namespace detail {

/// Gradient of CE(f(x), y) with respect to the input, eval-mode batch norm.
inline Tensor ce_input_grad(const SplitNetwork& net, const Tensor& xb, std::span<const int> y) {
  Tape tape = net.forward(xb, BnMode::EvalRunningStats);
  Tensor g(tape.logits.shape());
  for (std::size_t b = 0; b < xb.rows(); ++b) {
    auto row = g.row(b);
    softmax(tape.logits.row(b), row);
    row[y[b]] -= 1.0;
  }
  return net.backward_first(tape.input, net.backward_body(tape, g));
}

inline double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Moves `adv` onto the feasible set around `orig`: domain clip first, then
/// the ball, then ulp-level corrections so the returned point satisfies the
/// ball constraint when the difference is recomputed in floating point.
inline void project(std::span<double> adv, std::span<const double> orig, const AttackConfig& cfg) {
  for (double& v : adv) v = std::clamp(v, cfg.domain_lo, cfg.domain_hi);
  const double r = cfg.radius;
  if (cfg.norm == AttackNorm::Linf) {
    for (std::size_t i = 0; i < adv.size(); ++i) {
      adv[i] = std::clamp(adv[i], orig[i] - r, orig[i] + r);
      while (adv[i] - orig[i] > r) adv[i] = std::nextafter(adv[i], orig[i]);
      while (orig[i] - adv[i] > r) adv[i] = std::nextafter(adv[i], orig[i]);
    }
    return;
  }
  std::vector<double> delta(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) delta[i] = adv[i] - orig[i];
  const double n = l2(delta);
  if (n <= r) return;
  double scale = r / n;
  for (;;) {
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = orig[i] + delta[i] * scale;
    for (std::size_t i = 0; i < adv.size(); ++i) delta[i] = adv[i] - orig[i];
    if (l2(delta) <= r) return;
    scale = 1.0 - 1e-12;
  }
}

}  // namespace detail

/// White-box PGD on a batch (or a single sample) maximizing cross-entropy.
/// Linf steps follow sign(grad); L2 steps follow grad / ||grad||.
inline Tensor pgd_attack(const SplitNetwork& net, const Tensor& x, std::span<const int> y, const AttackConfig& cfg) {
  cfg.validate();
  const Tensor orig = net.to_batch(x);
  detail::check_labels(y, orig.rows(), net.num_classes());
  Rng rng(cfg.seed);
  Tensor adv = orig;
  if (cfg.random_start && cfg.radius > 0.0) {
    for (std::size_t b = 0; b < adv.rows(); ++b) {
      auto row = adv.row(b);
      if (cfg.norm == AttackNorm::Linf) {
        for (double& v : row) v += rng.uniform(-cfg.radius, cfg.radius);
      } else {
        std::vector<double> dir(row.size());
        rng.fill_normal(dir);
        const double n = detail::l2(dir);
        const double len = cfg.radius * std::pow(rng.uniform01(), 1.0 / static_cast<double>(row.size()));
        if (n > 0.0)
          for (std::size_t i = 0; i < row.size(); ++i) row[i] += dir[i] / n * len;
      }
      detail::project(row, orig.row(b), cfg);
    }
  }
  for (int s = 0; s < cfg.steps; ++s) {
    const Tensor g = detail::ce_input_grad(net, adv, y);
    for (std::size_t b = 0; b < adv.rows(); ++b) {
      auto row = adv.row(b);
      auto gr = g.row(b);
      if (cfg.norm == AttackNorm::Linf) {
        for (std::size_t i = 0; i < row.size(); ++i) {
          const double sgn = gr[i] > 0.0 ? 1.0 : (gr[i] < 0.0 ? -1.0 : 0.0);
          row[i] += cfg.step_size * sgn;
        }
      } else {
        const double n = detail::l2(gr);
        if (n > 0.0)
          for (std::size_t i = 0; i < row.size(); ++i) row[i] += cfg.step_size * gr[i] / n;
      }
      detail::project(row, orig.row(b), cfg);
    }
  }
  return adv.reshaped(x.shape());
}

/// Accuracy on PGD-perturbed inputs.
inline double robust_accuracy(const SplitNetwork& net, const Dataset& data, const AttackConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("robust_accuracy of an empty dataset");
  std::size_t correct = 0;
  detail::for_each_chunk(data.size(), 256, [&](const std::vector<std::size_t>& idx) {
    const Tensor xb = data.gather(idx);
    const std::vector<int> yb = data.gather_labels(idx);
    AttackConfig c = cfg;
    c.seed = cfg.seed + idx.front();
    const Tensor adv = pgd_attack(net, xb, yb, c);
    const Tensor logits = forward_logits(net, adv, BnMode::EvalRunningStats);
    for (std::size_t r = 0; r < idx.size(); ++r) correct += detail::argmax(logits.row(r)) == yb[r];
  });
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace jempp
