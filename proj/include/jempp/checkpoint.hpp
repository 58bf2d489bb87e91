#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jempp/buffer.hpp"
#include "jempp/init.hpp"
#include "jempp/network.hpp"
#include "jempp/tensor.hpp"

namespace jempp {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic{'J', 'E', 'M', 'P', 'P', 'C', 'K', 'P'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BufferSnapshot {
  std::size_t capacity = 0;
  double rho = 0.0;
  std::string rng_state;
  std::vector<Tensor> slots;
};

struct Checkpoint {
  SplitNetwork net;
  std::optional<InformativeInit> init;
  std::optional<BufferSnapshot> buffer;
  std::int64_t epoch = -1;  // last completed epoch, -1 before training
};

inline BufferSnapshot snapshot(const ReplayBuffer& buf) {
  return {buf.capacity(), buf.rho(), buf.rng().state(), buf.slots()};
}

inline ReplayBuffer restore_buffer(const BufferSnapshot& s) {
  ReplayBuffer buf(s.capacity, s.rho, 0);
  buf.restore(s.slots);
  buf.rng().set_state(s.rng_state);
  return buf;
}

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void u8(std::uint8_t v) { os_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t e : s) u64(e);
  }
  void tensor(const Tensor& t) {
    shape(t.shape());
    for (double v : t.data()) f64(v);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint8_t u8() {
    const int c = is_.get();
    if (c == std::char_traits<char>::eof()) throw CheckpointError("checkpoint is truncated");
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{u8()} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{u8()} << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 20)) throw CheckpointError("checkpoint string field is implausibly long");
    std::string s(n, '\0');
    if (!is_.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint is truncated");
    return s;
  }
  Shape shape() {
    const std::uint32_t rank = u32();
    if (rank > 8) throw CheckpointError("checkpoint tensor rank " + std::to_string(rank) + " is out of range");
    Shape s(rank);
    for (auto& e : s) e = u64();
    return s;
  }
  Tensor tensor() {
    Shape s = shape();
    if (s.empty()) return {};
    std::vector<double> data(shape_size(s));
    for (double& v : data) v = f64();
    return Tensor(std::move(s), std::move(data));
  }

 private:
  std::istream& is_;
};

inline void write_layer(Writer& w, const LayerParams& l) {
  w.u8(static_cast<std::uint8_t>(l.kind));
  w.shape(l.in_shape);
  w.shape(l.out_shape);
  w.tensor(l.weights);
  w.tensor(l.biases);
  if (l.kind == LayerKind::BatchNorm) {
    w.tensor(l.bn.running_mean);
    w.tensor(l.bn.running_var);
    w.f64(l.bn.momentum);
    w.f64(l.bn.eps);
  }
}

inline LayerParams read_layer(Reader& r) {
  LayerParams l;
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(LayerKind::Relu)) throw CheckpointError("unknown layer kind in checkpoint");
  l.kind = static_cast<LayerKind>(kind);
  l.in_shape = r.shape();
  l.out_shape = r.shape();
  l.weights = r.tensor();
  l.biases = r.tensor();
  if (l.kind == LayerKind::BatchNorm) {
    l.bn.running_mean = r.tensor();
    l.bn.running_var = r.tensor();
    l.bn.momentum = r.f64();
    l.bn.eps = r.f64();
  }
  return l;
}

}  // namespace detail

/// Binary layout, all integers and IEEE-754 doubles little-endian:
///   magic "JEMPPCKP", u32 version, i64 epoch
///   str architecture, shape input
///   u32 layer count, layers (first layer, then body)
///   u8 has_init [, init]
///   u8 has_buffer [, buffer]
/// A shape is u32 rank + rank x u64; a tensor is its shape followed by the
/// values; a string is u64 length + bytes.
inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  detail::Writer w(os);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  w.u64(static_cast<std::uint64_t>(ck.epoch));
  w.str(format_architecture(ck.net.specs()));
  w.shape(ck.net.input_shape());
  w.u32(static_cast<std::uint32_t>(ck.net.body().size() + 1));
  detail::write_layer(w, ck.net.first_layer());
  for (const auto& l : ck.net.body()) detail::write_layer(w, l);

  w.u8(ck.init ? 1 : 0);
  if (ck.init) {
    const InformativeInit& in = *ck.init;
    w.shape(in.sample_shape);
    w.u8(in.form == CovarianceForm::Full ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(in.num_classes()));
    for (std::size_t c = 0; c < in.num_classes(); ++c) {
      w.f64(in.pi[c]);
      w.f64(in.jitter[c]);
      w.tensor(in.mu[c]);
      w.tensor(in.cov_factor[c]);
    }
  }

  w.u8(ck.buffer ? 1 : 0);
  if (ck.buffer) {
    w.u64(ck.buffer->capacity);
    w.f64(ck.buffer->rho);
    w.str(ck.buffer->rng_state);
    w.u64(ck.buffer->slots.size());
    for (const Tensor& t : ck.buffer->slots) w.tensor(t);
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  detail::Reader r(is);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.epoch = static_cast<std::int64_t>(r.u64());
  std::vector<LayerSpec> specs = parse_architecture(r.str());
  Shape input = r.shape();
  const std::uint32_t n = r.u32();
  if (n != specs.size()) throw CheckpointError("checkpoint layer count does not match its architecture");
  LayerParams first = detail::read_layer(r);
  std::vector<LayerParams> body;
  for (std::uint32_t i = 1; i < n; ++i) body.push_back(detail::read_layer(r));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if ((i == 0 ? first : body[i - 1]).kind != specs[i].kind) throw CheckpointError("checkpoint layer kinds do not match its architecture");
  }
  ck.net = SplitNetwork(std::move(input), std::move(specs), std::move(first), std::move(body));

  if (r.u8()) {
    InformativeInit in;
    in.sample_shape = r.shape();
    in.form = r.u8() == 0 ? CovarianceForm::Full : CovarianceForm::Diagonal;
    const std::uint32_t classes = r.u32();
    for (std::uint32_t c = 0; c < classes; ++c) {
      in.pi.push_back(r.f64());
      in.jitter.push_back(r.f64());
      in.mu.push_back(r.tensor());
      in.cov_factor.push_back(r.tensor());
    }
    ck.init = std::move(in);
  }

  if (r.u8()) {
    BufferSnapshot b;
    b.capacity = r.u64();
    b.rho = r.f64();
    b.rng_state = r.str();
    const std::uint64_t count = r.u64();
    if (count > b.capacity) throw CheckpointError("checkpoint buffer holds more states than its capacity");
    for (std::uint64_t i = 0; i < count; ++i) b.slots.push_back(r.tensor());
    ck.buffer = std::move(b);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  try {
    return read_checkpoint(is);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace jempp
