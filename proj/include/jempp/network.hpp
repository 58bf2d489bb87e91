#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "jempp/rng.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

enum class LayerKind { Dense, Conv, BatchNorm, Relu };

/// TrainBatchStats normalizes with the statistics of the current batch;
/// EvalRunningStats uses the stored running estimates and touches no state.
enum class BnMode { TrainBatchStats, EvalRunningStats };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::Relu: return "relu";
  }
  return "?";
}

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// One layer of a split network. Parameter layout:
///   dense: weights (out, in), biases (out)
///   conv:  weights (cout, cin, 3, 3), biases (cout); stride 1, zero padding 1
///   bn:    weights = gamma (channels), biases = beta (channels)
///   relu:  no parameters
struct LayerParams {
  LayerKind kind = LayerKind::Relu;
  Shape in_shape;
  Shape out_shape;
  Tensor weights;
  Tensor biases;
  BatchNormState bn;

  std::size_t in_size() const { return shape_size(in_shape); }
  std::size_t out_size() const { return shape_size(out_shape); }
  bool has_params() const { return !weights.empty(); }
  std::size_t channels() const { return in_shape.front(); }
  std::size_t spatial() const { return in_size() / channels(); }
};

/// Architecture entry: a kind plus an output width for dense (units) or
/// conv (channels) layers.
struct LayerSpec {
  LayerKind kind;
  std::size_t width = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Parses "dense:64,bn,relu,dense:2". The first entry is the first layer.
inline std::vector<LayerSpec> parse_architecture(std::string_view text) {
  std::vector<LayerSpec> specs;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string item(text.substr(pos, end - pos));
    std::erase_if(item, [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
    if (item.empty()) throw std::invalid_argument("architecture: empty layer entry in '" + std::string(text) + "'");
    std::string kind = item;
    std::size_t width = 0;
    if (auto colon = item.find(':'); colon != std::string::npos) {
      kind = item.substr(0, colon);
      try {
        width = std::stoul(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw std::invalid_argument("architecture: bad width in '" + item + "'");
      }
    }
    if (kind == "dense" || kind == "conv") {
      if (width == 0) throw std::invalid_argument("architecture: '" + kind + "' needs a positive width");
      specs.push_back({kind == "dense" ? LayerKind::Dense : LayerKind::Conv, width});
    } else if (kind == "bn") {
      specs.push_back({LayerKind::BatchNorm, 0});
    } else if (kind == "relu") {
      specs.push_back({LayerKind::Relu, 0});
    } else {
      throw std::invalid_argument("architecture: unknown layer kind '" + kind + "'");
    }
    pos = end + 1;
  }
  return specs;
}

inline std::string format_architecture(std::span<const LayerSpec> specs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) os << ',';
    os << to_string(specs[i].kind);
    if (specs[i].width) os << ':' << specs[i].width;
  }
  return os.str();
}

inline LayerParams make_layer(const LayerSpec& spec, const Shape& in_shape, Rng& rng) {
  LayerParams layer;
  layer.kind = spec.kind;
  layer.in_shape = in_shape;
  switch (spec.kind) {
    case LayerKind::Dense: {
      const std::size_t fan_in = shape_size(in_shape);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      layer.out_shape = {spec.width};
      layer.weights = Tensor({spec.width, fan_in});
      layer.biases = Tensor({spec.width});
      for (double& w : layer.weights.data()) w = rng.uniform(-bound, bound);
      for (double& b : layer.biases.data()) b = rng.uniform(-bound, bound);
      break;
    }
    case LayerKind::Conv: {
      if (in_shape.size() != 3) throw ShapeError("conv layer needs (channels, height, width) input, got " + shape_str(in_shape));
      const std::size_t cin = in_shape[0];
      const double bound = 1.0 / std::sqrt(static_cast<double>(cin * 9));
      layer.out_shape = {spec.width, in_shape[1], in_shape[2]};
      layer.weights = Tensor({spec.width, cin, 3, 3});
      layer.biases = Tensor({spec.width});
      for (double& w : layer.weights.data()) w = rng.uniform(-bound, bound);
      for (double& b : layer.biases.data()) b = rng.uniform(-bound, bound);
      break;
    }
    case LayerKind::BatchNorm: {
      const std::size_t c = in_shape.front();
      layer.out_shape = in_shape;
      layer.weights = Tensor({c}, 1.0);
      layer.biases = Tensor({c}, 0.0);
      layer.bn.running_mean = Tensor({c}, 0.0);
      layer.bn.running_var = Tensor({c}, 1.0);
      break;
    }
    case LayerKind::Relu:
      layer.out_shape = in_shape;
      break;
  }
  return layer;
}

/// Intermediate values of one layer's forward pass, kept for backward.
struct LayerCache {
  Tensor input;
  Tensor xhat;                  // batch norm only
  std::vector<double> mean;     // batch norm: statistics used for normalization
  std::vector<double> var;
  std::vector<double> inv_std;
};

struct Tape {
  BnMode mode = BnMode::EvalRunningStats;
  Tensor input;
  Tensor features;  // first-layer output
  std::vector<LayerCache> body;
  Tensor logits;    // (batch, classes)
};

struct LayerGrad {
  Tensor weights;
  Tensor biases;
};

/// Parameter gradient mirroring the network's parameter layout.
struct NetworkGrad {
  LayerGrad first;
  std::vector<LayerGrad> body;

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    auto add = [&](LayerGrad& g) {
      if (!g.weights.empty()) out.push_back(&g.weights);
      if (!g.biases.empty()) out.push_back(&g.biases);
    };
    add(first);
    for (auto& g : body) add(g);
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (Tensor* t : const_cast<NetworkGrad*>(this)->tensors()) out.push_back(t);
    return out;
  }

  double norm() const {
    double s = 0.0;
    for (const Tensor* t : tensors())
      for (double v : t->data()) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const Tensor* t : tensors())
      if (!t->all_finite()) return false;
    return true;
  }
};

namespace detail {

inline LayerGrad zero_grad(const LayerParams& layer) {
  LayerGrad g;
  if (layer.has_params()) {
    g.weights = Tensor(layer.weights.shape());
    g.biases = Tensor(layer.biases.shape());
  }
  return g;
}

inline void require_rows(const Tensor& x, const LayerParams& layer) {
  if (x.size() != x.rows() * layer.in_size() || x.row_size() != layer.in_size()) {
    throw ShapeError("layer '" + std::string(to_string(layer.kind)) + "' expects per-sample shape " +
                     shape_str(layer.in_shape) + ", got batch " + shape_str(x.shape()));
  }
}

inline Shape batch_shape(std::size_t batch, const Shape& sample) {
  Shape s = sample;
  s.insert(s.begin(), batch);
  return s;
}

inline Tensor dense_forward(const LayerParams& l, const Tensor& x) {
  const std::size_t B = x.rows(), in = l.in_size(), out = l.out_size();
  Tensor y(batch_shape(B, l.out_shape));
  const double* W = l.weights.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = x.data().data() + b * in;
    double* yb = y.data().data() + b * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* w = W + o * in;
      double s = l.biases[o];
      for (std::size_t i = 0; i < in; ++i) s += w[i] * xb[i];
      yb[o] = s;
    }
  }
  return y;
}

inline Tensor dense_backward(const LayerParams& l, const Tensor& x, const Tensor& g, LayerGrad* pg) {
  const std::size_t B = g.rows(), in = l.in_size(), out = l.out_size();
  Tensor dx(batch_shape(B, l.in_shape));
  const double* W = l.weights.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* gb = g.data().data() + b * out;
    double* dxb = dx.data().data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double go = gb[o];
      if (go == 0.0) continue;
      const double* w = W + o * in;
      for (std::size_t i = 0; i < in; ++i) dxb[i] += go * w[i];
    }
  }
  if (pg) {
    double* dW = pg->weights.data().data();
    for (std::size_t b = 0; b < B; ++b) {
      const double* gb = g.data().data() + b * out;
      const double* xb = x.data().data() + b * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double go = gb[o];
        pg->biases[o] += go;
        if (go == 0.0) continue;
        double* dw = dW + o * in;
        for (std::size_t i = 0; i < in; ++i) dw[i] += go * xb[i];
      }
    }
  }
  return dx;
}

inline Tensor conv_forward(const LayerParams& l, const Tensor& x) {
  const std::size_t B = x.rows(), cin = l.in_shape[0], H = l.in_shape[1], Wd = l.in_shape[2];
  const std::size_t cout = l.out_shape[0], plane = H * Wd;
  Tensor y(batch_shape(B, l.out_shape));
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = x.data().data() + b * cin * plane;
    double* yb = y.data().data() + b * cout * plane;
    for (std::size_t co = 0; co < cout; ++co) {
      double* yp = yb + co * plane;
      for (std::size_t p = 0; p < plane; ++p) yp[p] = l.biases[co];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xp = xb + ci * plane;
        const double* k = l.weights.data().data() + (co * cin + ci) * 9;
        for (std::size_t r = 0; r < H; ++r) {
          for (std::size_t c = 0; c < Wd; ++c) {
            double s = 0.0;
            for (int dr = -1; dr <= 1; ++dr) {
              const long rr = static_cast<long>(r) + dr;
              if (rr < 0 || rr >= static_cast<long>(H)) continue;
              for (int dc = -1; dc <= 1; ++dc) {
                const long cc = static_cast<long>(c) + dc;
                if (cc < 0 || cc >= static_cast<long>(Wd)) continue;
                s += k[(dr + 1) * 3 + (dc + 1)] * xp[rr * Wd + cc];
              }
            }
            yp[r * Wd + c] += s;
          }
        }
      }
    }
  }
  return y;
}

inline Tensor conv_backward(const LayerParams& l, const Tensor& x, const Tensor& g, LayerGrad* pg) {
  const std::size_t B = g.rows(), cin = l.in_shape[0], H = l.in_shape[1], Wd = l.in_shape[2];
  const std::size_t cout = l.out_shape[0], plane = H * Wd;
  Tensor dx(batch_shape(B, l.in_shape));
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = x.data().data() + b * cin * plane;
    const double* gb = g.data().data() + b * cout * plane;
    double* dxb = dx.data().data() + b * cin * plane;
    for (std::size_t co = 0; co < cout; ++co) {
      const double* gp = gb + co * plane;
      if (pg)
        for (std::size_t p = 0; p < plane; ++p) pg->biases[co] += gp[p];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xp = xb + ci * plane;
        double* dxp = dxb + ci * plane;
        const std::size_t koff = (co * cin + ci) * 9;
        const double* k = l.weights.data().data() + koff;
        double* dk = pg ? pg->weights.data().data() + koff : nullptr;
        for (std::size_t r = 0; r < H; ++r) {
          for (std::size_t c = 0; c < Wd; ++c) {
            const double go = gp[r * Wd + c];
            if (go == 0.0) continue;
            for (int dr = -1; dr <= 1; ++dr) {
              const long rr = static_cast<long>(r) + dr;
              if (rr < 0 || rr >= static_cast<long>(H)) continue;
              for (int dc = -1; dc <= 1; ++dc) {
                const long cc = static_cast<long>(c) + dc;
                if (cc < 0 || cc >= static_cast<long>(Wd)) continue;
                const std::size_t ki = (dr + 1) * 3 + (dc + 1);
                dxp[rr * Wd + cc] += go * k[ki];
                if (dk) dk[ki] += go * xp[rr * Wd + cc];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

inline Tensor bn_forward(const LayerParams& l, const Tensor& x, BnMode mode, LayerCache& cache) {
  const std::size_t B = x.rows(), C = l.channels(), S = l.spatial();
  const double n = static_cast<double>(B * S);
  cache.mean.assign(C, 0.0);
  cache.var.assign(C, 0.0);
  cache.inv_std.assign(C, 0.0);
  auto at = [&](std::size_t b, std::size_t c, std::size_t s) { return (b * C + c) * S + s; };
  if (mode == BnMode::TrainBatchStats) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) m += x[at(b, c, s)];
      m /= n;
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) {
          const double d = x[at(b, c, s)] - m;
          v += d * d;
        }
      cache.mean[c] = m;
      cache.var[c] = v / n;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      cache.mean[c] = l.bn.running_mean[c];
      cache.var[c] = l.bn.running_var[c];
    }
  }
  for (std::size_t c = 0; c < C; ++c) cache.inv_std[c] = 1.0 / std::sqrt(cache.var[c] + l.bn.eps);
  cache.xhat = Tensor(x.shape());
  Tensor y(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = at(b, c, s);
        const double xh = (x[i] - cache.mean[c]) * cache.inv_std[c];
        cache.xhat[i] = xh;
        y[i] = l.weights[c] * xh + l.biases[c];
      }
  return y;
}

inline Tensor bn_backward(const LayerParams& l, const LayerCache& cache, BnMode mode, const Tensor& g,
                          LayerGrad* pg) {
  const std::size_t B = g.rows(), C = l.channels(), S = l.spatial();
  const double n = static_cast<double>(B * S);
  auto at = [&](std::size_t b, std::size_t c, std::size_t s) { return (b * C + c) * S + s; };
  Tensor dx(g.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = at(b, c, s);
        sum_g += g[i];
        sum_gx += g[i] * cache.xhat[i];
      }
    if (pg) {
      pg->weights[c] += sum_gx;
      pg->biases[c] += sum_g;
    }
    const double gamma = l.weights[c], inv = cache.inv_std[c];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = at(b, c, s);
        if (mode == BnMode::TrainBatchStats) {
          dx[i] = gamma * inv * (g[i] - sum_g / n - cache.xhat[i] * sum_gx / n);
        } else {
          dx[i] = gamma * inv * g[i];
        }
      }
  }
  return dx;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& g) {
  Tensor dx(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
  return dx;
}

}  // namespace detail

/// Batched forward through one layer. Stores what backward needs in `cache`.
inline Tensor layer_forward(const LayerParams& layer, const Tensor& x, BnMode mode, LayerCache& cache) {
  detail::require_rows(x, layer);
  cache.input = x;
  switch (layer.kind) {
    case LayerKind::Dense: return detail::dense_forward(layer, x);
    case LayerKind::Conv: return detail::conv_forward(layer, x);
    case LayerKind::BatchNorm: return detail::bn_forward(layer, x, mode, cache);
    case LayerKind::Relu: return detail::relu_forward(x);
  }
  return {};
}

/// Vector-Jacobian product through one layer; accumulates parameter
/// gradients into `pg` when it is non-null.
inline Tensor layer_backward(const LayerParams& layer, const LayerCache& cache, BnMode mode, const Tensor& grad_out,
                             LayerGrad* pg) {
  switch (layer.kind) {
    case LayerKind::Dense: return detail::dense_backward(layer, cache.input, grad_out, pg);
    case LayerKind::Conv: return detail::conv_backward(layer, cache.input, grad_out, pg);
    case LayerKind::BatchNorm: return detail::bn_backward(layer, cache, mode, grad_out, pg);
    case LayerKind::Relu: return detail::relu_backward(cache.input, grad_out);
  }
  return {};
}

/// Classifier f(x) = g(f0(x)) with an explicit boundary after the first layer.
class SplitNetwork {
 public:
  SplitNetwork() = default;

  SplitNetwork(Shape input_shape, std::span<const LayerSpec> specs, Rng& rng) : input_shape_(std::move(input_shape)) {
    if (specs.size() < 2) throw std::invalid_argument("split network needs a first layer and a non-empty body");
    if (specs.front().kind != LayerKind::Dense && specs.front().kind != LayerKind::Conv) {
      throw std::invalid_argument("first layer must be dense or conv");
    }
    first_ = make_layer(specs.front(), input_shape_, rng);
    Shape shape = first_.out_shape;
    for (std::size_t i = 1; i < specs.size(); ++i) {
      body_.push_back(make_layer(specs[i], shape, rng));
      shape = body_.back().out_shape;
    }
    specs_.assign(specs.begin(), specs.end());
    validate();
  }

  SplitNetwork(Shape input_shape, std::vector<LayerSpec> specs, LayerParams first, std::vector<LayerParams> body)
      : input_shape_(std::move(input_shape)), specs_(std::move(specs)), first_(std::move(first)), body_(std::move(body)) {
    validate();
  }

  const Shape& input_shape() const { return input_shape_; }
  const Shape& feature_shape() const { return first_.out_shape; }
  std::size_t num_classes() const { return body_.back().out_size(); }
  const std::vector<LayerSpec>& specs() const { return specs_; }

  const LayerParams& first_layer() const { return first_; }
  LayerParams& first_layer() { return first_; }
  const std::vector<LayerParams>& body() const { return body_; }
  std::vector<LayerParams>& body() { return body_; }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    auto add = [&](LayerParams& l) {
      if (l.has_params()) {
        out.push_back(&l.weights);
        out.push_back(&l.biases);
      }
    };
    add(first_);
    for (auto& l : body_) add(l);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Tensor* t : parameters()) n += t->size();
    return n;
  }

  NetworkGrad zero_grad() const {
    NetworkGrad g;
    g.first = detail::zero_grad(first_);
    for (const auto& l : body_) g.body.push_back(detail::zero_grad(l));
    return g;
  }

  /// Normalizes a sample or batch to batch form; throws on shape mismatch.
  Tensor to_batch(const Tensor& x, bool* was_single = nullptr) const {
    if (x.shape() == input_shape_) {
      if (was_single) *was_single = true;
      return as_batch(x);
    }
    if (x.rank() == input_shape_.size() + 1 && Shape(x.shape().begin() + 1, x.shape().end()) == input_shape_) {
      if (was_single) *was_single = false;
      return x;
    }
    throw ShapeError("network expects input " + shape_str(input_shape_) + " or a batch of it, got " + shape_str(x.shape()));
  }

  Tape forward(const Tensor& x, BnMode mode) const {
    Tape tape;
    tape.mode = mode;
    tape.input = to_batch(x);
    LayerCache first_cache;
    tape.features = layer_forward(first_, tape.input, mode, first_cache);
    tape.logits = forward_body(tape.features, mode, tape);
    return tape;
  }

  /// Runs only the body on given first-layer features, recording caches.
  Tensor forward_body(const Tensor& features, BnMode mode, Tape& tape) const {
    tape.body.assign(body_.size(), {});
    Tensor h = features;
    for (std::size_t i = 0; i < body_.size(); ++i) h = layer_forward(body_[i], h, mode, tape.body[i]);
    return h.reshaped({h.rows(), num_classes()});
  }

  /// Backward through the body only: d(loss)/d(features).
  Tensor backward_body(const Tape& tape, const Tensor& grad_logits, NetworkGrad* pg = nullptr) const {
    Tensor g = grad_logits.reshaped(detail::batch_shape(grad_logits.rows(), body_.back().out_shape));
    for (std::size_t i = body_.size(); i-- > 0;) {
      g = layer_backward(body_[i], tape.body[i], tape.mode, g, pg ? &pg->body[i] : nullptr);
    }
    return g;
  }

  /// Vector-Jacobian product through the first layer only.
  Tensor backward_first(const Tensor& x_batch, const Tensor& grad_features, LayerGrad* pg = nullptr) const {
    LayerCache cache;
    cache.input = x_batch;
    detail::require_rows(x_batch, first_);
    return layer_backward(first_, cache, BnMode::EvalRunningStats, grad_features, pg);
  }

  /// Folds the batch statistics recorded on `tape` into the running estimates.
  void update_running_stats(const Tape& tape) {
    if (tape.mode != BnMode::TrainBatchStats) return;
    const std::size_t B = tape.input.rows();
    for (std::size_t i = 0; i < body_.size(); ++i) {
      LayerParams& l = body_[i];
      if (l.kind != LayerKind::BatchNorm) continue;
      const LayerCache& c = tape.body[i];
      const double n = static_cast<double>(B * l.spatial());
      const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
      const double m = l.bn.momentum;
      for (std::size_t ch = 0; ch < l.channels(); ++ch) {
        l.bn.running_mean[ch] = (1.0 - m) * l.bn.running_mean[ch] + m * c.mean[ch];
        l.bn.running_var[ch] = (1.0 - m) * l.bn.running_var[ch] + m * c.var[ch] * unbias;
      }
    }
  }

 private:
  void validate() const {
    if (first_.in_shape != input_shape_) throw ShapeError("first layer input shape does not match network input");
    Shape shape = first_.out_shape;
    for (const auto& l : body_) {
      if (l.in_shape != shape) throw ShapeError("body layer input " + shape_str(l.in_shape) + " != previous output " + shape_str(shape));
      shape = l.out_shape;
    }
    if (body_.empty() || shape.size() != 1) throw ShapeError("body must end in a 1-D logit vector, got " + shape_str(shape));
  }

  Shape input_shape_;
  std::vector<LayerSpec> specs_;
  LayerParams first_;
  std::vector<LayerParams> body_;
};

}  // namespace jempp
