#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "jempp/data.hpp"
#include "jempp/rng.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

enum class CovarianceForm { Full, Diagonal };

struct InitOptions {
  CovarianceForm covariance = CovarianceForm::Full;
  /// Adds U[0, 2/256) to every coordinate before fitting: one pixel
  /// quantization step of a [0, 1] image, expressed in the [-1, 1] domain.
  bool dequantize = false;
  std::uint64_t dequantize_seed = 0;

  friend bool operator==(const InitOptions&, const InitOptions&) = default;
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-class Gaussian mixture used to start sampling chains.
///   pi[y]          class frequency
///   mu[y]          class mean (sample shape)
///   cov_factor[y]  full: lower-triangular L (d, d) with L L^T = Sigma + jitter I
///                  diagonal: (d) standard deviations sqrt(diag(Sigma) + jitter)
struct InformativeInit {
  Shape sample_shape;
  CovarianceForm form = CovarianceForm::Full;
  std::vector<double> pi;
  std::vector<Tensor> mu;
  std::vector<Tensor> cov_factor;
  std::vector<double> jitter;

  std::size_t num_classes() const { return pi.size(); }
  std::size_t dim() const { return shape_size(sample_shape); }
};

/// Lower Cholesky factor of a symmetric (d, d) matrix. Returns nullopt when
/// a pivot is not strictly positive.
inline std::optional<Tensor> cholesky(const Tensor& a) {
  const std::size_t d = a.shape().at(0);
  Tensor L({d, d});
  double* l = L.data().data();
  const double* m = a.data().data();
  for (std::size_t j = 0; j < d; ++j) {
    const double* lj = l + j * d;
    double s = m[j * d + j];
    for (std::size_t k = 0; k < j; ++k) s -= lj[k] * lj[k];
    if (!(s > 0.0) || !std::isfinite(s)) return std::nullopt;
    const double djj = std::sqrt(s);
    l[j * d + j] = djj;
    for (std::size_t i = j + 1; i < d; ++i) {
      const double* li = l + i * d;
      double t = m[i * d + j];
      for (std::size_t k = 0; k < j; ++k) t -= li[k] * lj[k];
      l[i * d + j] = t / djj;
    }
  }
  return L;
}

/// Fits class frequencies, means and population covariances (1/n). The
/// factorization adds jitter starting at 1e-6 * trace(Sigma) / d and grows
/// it tenfold up to six times.
inline InformativeInit fit_informative_init(const Dataset& data, const InitOptions& opts = {}) {
  if (data.size() == 0) throw FitError("cannot fit an initializer to an empty dataset");
  const std::size_t C = data.num_classes, d = data.dim();
  std::vector<std::vector<std::size_t>> members(C);
  for (std::size_t i = 0; i < data.size(); ++i) members.at(static_cast<std::size_t>(data.y[i])).push_back(i);
  for (std::size_t c = 0; c < C; ++c) {
    if (members[c].size() < 2) {
      throw FitError("class " + std::to_string(c) + " has " + std::to_string(members[c].size()) +
                     " samples; at least 2 are needed to fit a covariance");
    }
  }

  Tensor xs = data.x;
  if (opts.dequantize) {
    Rng rng(opts.dequantize_seed);
    for (double& v : xs.data()) v += rng.uniform(0.0, 2.0 / 256.0);
  }

  InformativeInit init;
  init.sample_shape = data.sample_shape;
  init.form = opts.covariance;
  for (std::size_t c = 0; c < C; ++c) {
    const auto& idx = members[c];
    const double n = static_cast<double>(idx.size());
    init.pi.push_back(n / static_cast<double>(data.size()));

    std::vector<double> mu(d, 0.0);
    for (std::size_t i : idx)
      for (std::size_t k = 0; k < d; ++k) mu[k] += xs.row(i)[k];
    for (double& v : mu) v /= n;

    std::vector<double> centered(idx.size() * d);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < d; ++k) centered[r * d + k] = xs.row(idx[r])[k] - mu[k];

    if (opts.covariance == CovarianceForm::Diagonal) {
      std::vector<double> var(d, 0.0);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t k = 0; k < d; ++k) var[k] += centered[r * d + k] * centered[r * d + k];
      double trace = 0.0;
      for (double& v : var) trace += (v /= n);
      double jitter = trace > 0.0 ? 1e-6 * trace / static_cast<double>(d) : 1e-6;
      Tensor sd({d});
      for (std::size_t k = 0; k < d; ++k) sd[k] = std::sqrt(var[k] + jitter);
      init.cov_factor.push_back(std::move(sd));
      init.jitter.push_back(jitter);
    } else {
      Tensor cov({d, d});
      double* s = cov.data().data();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* x = centered.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) {
          const double xi = x[i];
          if (xi == 0.0) continue;
          double* si = s + i * d;
          for (std::size_t j = 0; j <= i; ++j) si[j] += xi * x[j];
        }
      }
      double trace = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          s[i * d + j] /= n;
          s[j * d + i] = s[i * d + j];
        }
        trace += s[i * d + i];
      }
      // A class whose samples coincide has trace 0; an absolute floor keeps
      // the factor's diagonal strictly positive.
      double jitter = trace > 0.0 ? 1e-6 * trace / static_cast<double>(d) : 1e-6;
      std::optional<Tensor> L;
      for (int attempt = 0; attempt <= 6; ++attempt) {
        Tensor a = cov;
        for (std::size_t i = 0; i < d; ++i) a[i * d + i] += jitter;
        L = cholesky(a);
        if (L) break;
        if (attempt < 6) jitter *= 10.0;
      }
      if (!L) throw FitError("covariance of class " + std::to_string(c) + " is not positive definite after maximum jitter");
      init.cov_factor.push_back(std::move(*L));
      init.jitter.push_back(jitter);
    }
    init.mu.emplace_back(data.sample_shape, std::move(mu));
  }
  return init;
}

/// mu_y + L_y z with z ~ N(0, I).
inline Tensor sample_class(const InformativeInit& init, int y, Rng& rng) {
  if (y < 0 || static_cast<std::size_t>(y) >= init.num_classes()) {
    throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(init.num_classes()) + ")");
  }
  const std::size_t d = init.dim();
  const Tensor& L = init.cov_factor[y];
  std::vector<double> z(d);
  rng.fill_normal(z);
  Tensor x = init.mu[y];
  if (init.form == CovarianceForm::Diagonal) {
    for (std::size_t k = 0; k < d; ++k) x[k] += L[k] * z[k];
  } else {
    const double* l = L.data().data();
    for (std::size_t i = 0; i < d; ++i) {
      const double* li = l + i * d;
      double s = 0.0;
      for (std::size_t k = 0; k <= i; ++k) s += li[k] * z[k];
      x[i] += s;
    }
  }
  return x;
}

/// Draws y ~ Categorical(pi), then x ~ N(mu_y, Sigma_y).
inline std::pair<Tensor, int> sample_marginal(const InformativeInit& init, Rng& rng) {
  const double u = rng.uniform01();
  double cum = 0.0;
  int y = -1;
  for (std::size_t c = 0; c < init.num_classes(); ++c) {
    if (init.pi[c] <= 0.0) continue;
    y = static_cast<int>(c);
    cum += init.pi[c];
    if (u < cum) break;
  }
  if (y < 0) throw std::logic_error("initializer has no class with positive weight");
  return {sample_class(init, y, rng), y};
}

enum class GapReference { Informative, Uniform };

struct StatisticGap {
  double mean_gap = 0.0;  // average over features of |mean_init - mean_data|
  double var_gap = 0.0;   // average over features of |var_init - var_data|
};

/// Compares per-feature moments of a batch from the chosen initializer with
/// those of `data`. Uniform draws i.i.d. U[-1, 1] per coordinate.
inline StatisticGap statistic_gap(const InformativeInit& init, const Dataset& data, GapReference ref,
                                  std::size_t batch_size, Rng& rng) {
  if (data.size() == 0 || batch_size == 0) throw std::invalid_argument("statistic_gap needs non-empty data and batch");
  const std::size_t d = data.dim();
  if (d != init.dim()) throw ShapeError("initializer and dataset dimensions differ");
  auto moments = [d](auto&& row_at, std::size_t n) {
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = row_at(i);
      for (std::size_t k = 0; k < d; ++k) mean[k] += r[k];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = row_at(i);
      for (std::size_t k = 0; k < d; ++k) var[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
    }
    for (double& v : var) v /= static_cast<double>(n);
    return std::pair{mean, var};
  };
  std::vector<Tensor> draws;
  draws.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    if (ref == GapReference::Informative) {
      draws.push_back(sample_marginal(init, rng).first);
    } else {
      Tensor t(init.sample_shape);
      for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
      draws.push_back(std::move(t));
    }
  }
  auto [dm, dv] = moments([&](std::size_t i) { return data.x.row(i); }, data.size());
  auto [im, iv] = moments([&](std::size_t i) { return draws[i].data(); }, batch_size);
  StatisticGap gap;
  for (std::size_t k = 0; k < d; ++k) {
    gap.mean_gap += std::abs(im[k] - dm[k]);
    gap.var_gap += std::abs(iv[k] - dv[k]);
  }
  gap.mean_gap /= static_cast<double>(d);
  gap.var_gap /= static_cast<double>(d);
  return gap;
}

}  // namespace jempp
