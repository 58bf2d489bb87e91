#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jempp/rng.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

/// Labeled samples stored as one batch tensor (N, sample_shape...).
struct Dataset {
  Shape sample_shape;
  std::size_t num_classes = 0;
  Tensor x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return shape_size(sample_shape); }

  Tensor sample(std::size_t i) const {
    auto r = x.row(i);
    return Tensor(sample_shape, std::vector<double>(r.begin(), r.end()));
  }

  /// Rows at the given indices, as a batch.
  Tensor gather(std::span<const std::size_t> idx) const {
    Shape s = sample_shape;
    s.insert(s.begin(), idx.size());
    std::vector<double> data;
    data.reserve(idx.size() * dim());
    for (std::size_t i : idx) {
      auto r = x.row(i);
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(std::move(s), std::move(data));
  }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(y[i]);
    return out;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.sample_shape = sample_shape;
    d.num_classes = num_classes;
    d.x = gather(idx);
    d.y = gather_labels(idx);
    return d;
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return subset(idx);
  }
};

namespace detail {

inline Dataset make_dataset(Shape sample_shape, std::size_t classes, std::vector<double> data, std::vector<int> labels) {
  if (labels.empty()) throw std::invalid_argument("dataset is empty");
  Dataset d;
  d.sample_shape = std::move(sample_shape);
  d.num_classes = classes;
  Shape s = d.sample_shape;
  s.insert(s.begin(), labels.size());
  d.x = Tensor(std::move(s), std::move(data));
  d.y = std::move(labels);
  return d;
}

}  // namespace detail

/// Two interleaved half circles, affinely mapped so the noiseless data spans
/// x in [-scale, scale], y in [-scale/2, scale/2]. Noise is added before the
/// mapping, in units of the unit-radius moons. The outer moon is class 0;
/// rows are shuffled.
inline Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> data;
  std::vector<int> labels;
  data.reserve(2 * n);
  const std::size_t n_outer = n / 2, n_inner = n - n_outer;
  for (std::size_t i = 0; i < n; ++i) {
    const bool outer = i < n_outer;
    const std::size_t k = outer ? i : i - n_outer;
    const std::size_t cnt = outer ? n_outer : n_inner;
    const double t = cnt > 1 ? std::numbers::pi * static_cast<double>(k) / static_cast<double>(cnt - 1) : 0.0;
    double px = outer ? std::cos(t) : 1.0 - std::cos(t);
    double py = outer ? std::sin(t) : 0.5 - std::sin(t);
    px += noise * rng.normal();
    py += noise * rng.normal();
    data.push_back(scale * (px - 0.5) / 1.5);
    data.push_back(scale * (py - 0.25) / 1.5);
    labels.push_back(outer ? 0 : 1);
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<double> sd(2 * n);
  std::vector<int> sl(n);
  for (std::size_t i = 0; i < n; ++i) {
    sd[2 * i] = data[2 * perm[i]];
    sd[2 * i + 1] = data[2 * perm[i] + 1];
    sl[i] = labels[perm[i]];
  }
  return detail::make_dataset({2}, 2, std::move(sd), std::move(sl));
}

/// k isotropic 2-D Gaussians with centers evenly spaced on a circle.
inline Dataset make_gaussian_mixture_2d(std::size_t k, std::size_t n, double radius, double stddev, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("gaussian mixture needs at least one component");
  Rng rng(seed);
  std::vector<double> data;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.index(k);
    const double a = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
    data.push_back(radius * std::cos(a) + stddev * rng.normal());
    data.push_back(radius * std::sin(a) + stddev * rng.normal());
    labels.push_back(static_cast<int>(c));
  }
  return detail::make_dataset({2}, k, std::move(data), std::move(labels));
}

/// i.i.d. U[lo, hi] samples, all labeled 0; used as an OOD reference.
inline Dataset make_uniform_noise(std::size_t n, Shape sample_shape, double lo, double hi, std::size_t classes,
                                  std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = shape_size(sample_shape);
  std::vector<double> data(n * d);
  for (double& v : data) v = rng.uniform(lo, hi);
  return detail::make_dataset(std::move(sample_shape), classes, std::move(data), std::vector<int>(n, 0));
}

/// Labeled CSV: comma-separated feature columns followed by an integer
/// label column. A first line whose fields are not all numeric is a header.
inline Dataset load_csv(const std::string& path, std::size_t num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
  std::vector<double> data;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    std::vector<double> vals;
    bool numeric = true;
    for (const auto& f : fields) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(f, &used));
        if (f.find_first_not_of(" \t", used) != std::string::npos) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (lineno == 1) continue;
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": non-numeric field");
    }
    if (vals.size() < 2) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": need features and a label");
    if (width == 0) width = vals.size();
    if (vals.size() != width) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": inconsistent column count");
    const double label = vals.back();
    if (label < 0 || label != std::floor(label)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label must be a non-negative integer");
    }
    labels.push_back(static_cast<int>(label));
    data.insert(data.end(), vals.begin(), vals.end() - 1);
  }
  if (labels.empty()) throw std::runtime_error("dataset file '" + path + "' has no rows");
  std::size_t classes = num_classes;
  for (int y : labels) classes = std::max(classes, static_cast<std::size_t>(y) + 1);
  return detail::make_dataset({width - 1}, classes, std::move(data), std::move(labels));
}

inline void write_csv(const Dataset& d, std::ostream& os) {
  char buf[64];
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.x.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << buf << ',';
    }
    os << d.y[i] << '\n';
  }
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated IDX header in '" + path + "'");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

}  // namespace detail

/// IDX image/label pair (ubyte). Pixels map linearly from [0, 255] to
/// [-1, 1]; samples have shape (1, rows, cols).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0) {
  std::ifstream im(images_path, std::ios::binary);
  if (!im) throw std::runtime_error("cannot open IDX images '" + images_path + "'");
  std::ifstream lb(labels_path, std::ios::binary);
  if (!lb) throw std::runtime_error("cannot open IDX labels '" + labels_path + "'");
  if (detail::read_be32(im, images_path) != 0x00000803) throw std::runtime_error("'" + images_path + "' is not an IDX3 ubyte file");
  if (detail::read_be32(lb, labels_path) != 0x00000801) throw std::runtime_error("'" + labels_path + "' is not an IDX1 ubyte file");
  std::size_t n = detail::read_be32(im, images_path);
  const std::size_t rows = detail::read_be32(im, images_path), cols = detail::read_be32(im, images_path);
  if (detail::read_be32(lb, labels_path) != n) throw std::runtime_error("IDX image and label counts differ");
  if (limit) n = std::min(n, limit);
  const std::size_t d = rows * cols;
  std::vector<unsigned char> pix(n * d), lab(n);
  if (!im.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size())))
    throw std::runtime_error("truncated IDX images '" + images_path + "'");
  if (!lb.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size())))
    throw std::runtime_error("truncated IDX labels '" + labels_path + "'");
  std::vector<double> data(n * d);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(pix[i]) / 255.0 * 2.0 - 1.0;
  std::vector<int> labels(lab.begin(), lab.end());
  std::size_t classes = 0;
  for (int y : labels) classes = std::max(classes, static_cast<std::size_t>(y) + 1);
  return detail::make_dataset({1, rows, cols}, classes, std::move(data), std::move(labels));
}

/// Builds a dataset from a descriptor string:
///   moons:n=1000,noise=0.1,seed=1[,scale=1]
///   gmm:k=4,n=800,radius=0.6,std=0.1,seed=1
///   uniform:n=500,dim=2,lo=-2,hi=2,classes=2,seed=1
///   csv:PATH
///   idx:IMAGES_PATH,LABELS_PATH[,limit]
inline Dataset load_dataset(const std::string& descriptor) {
  const auto colon = descriptor.find(':');
  const std::string kind = descriptor.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : descriptor.substr(colon + 1);
  if (kind == "csv") return load_csv(rest);
  if (kind == "idx") {
    std::vector<std::string> parts;
    std::stringstream ss(rest);
    for (std::string p; std::getline(ss, p, ',');) parts.push_back(p);
    if (parts.size() < 2) throw std::invalid_argument("idx descriptor needs IMAGES,LABELS paths");
    return load_idx(parts[0], parts[1], parts.size() > 2 ? std::stoul(parts[2]) : 0);
  }
  std::map<std::string, std::string> kv;
  std::stringstream ss(rest);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("bad dataset option '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  auto num = [&](const std::string& key, double def) { return kv.count(key) ? std::stod(kv.at(key)) : def; };
  auto cnt = [&](const std::string& key, std::size_t def) { return kv.count(key) ? std::stoul(kv.at(key)) : def; };
  auto seed = static_cast<std::uint64_t>(cnt("seed", 1));
  if (kind == "moons") return make_two_moons(cnt("n", 1000), num("noise", 0.1), seed, num("scale", 1.0));
  if (kind == "gmm") return make_gaussian_mixture_2d(cnt("k", 4), cnt("n", 1000), num("radius", 0.6), num("std", 0.1), seed);
  if (kind == "uniform") {
    return make_uniform_noise(cnt("n", 500), {cnt("dim", 2)}, num("lo", -1.0), num("hi", 1.0), cnt("classes", 2), seed);
  }
  throw std::invalid_argument("unknown dataset kind '" + kind + "'");
}

}  // namespace jempp
