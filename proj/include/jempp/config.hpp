#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "jempp/eval.hpp"
#include "jempp/init.hpp"
#include "jempp/network.hpp"
#include "jempp/sampler.hpp"
#include "jempp/trainer.hpp"

namespace jempp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything needed to reproduce a run. All generator seeds derive from
/// `seed`; dataset descriptors carry their own generator seeds because they
/// identify the data rather than the run.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::string train_data = "moons:n=1000,noise=0.1,seed=1";
  std::string eval_data = "moons:n=500,noise=0.1,seed=2";
  std::string ood_data;
  double eval_fraction = 0.0;  // used only when eval_data is empty
  std::string input_shape;     // e.g. "2" or "1x28x28"; empty means taken from the data
  std::size_t classes = 0;     // 0 means taken from the data

  std::string architecture = "dense:64,bn,relu,dense:64,bn,relu,dense:2";

  SamplerKind sampler_kind = SamplerKind::PYLD;
  TrainConfig train;
  InitOptions init;
  AttackConfig attack;
  OodScore ood_score = OodScore::LogDensity;

  std::string out_dir = "runs/default";
  int checkpoint_every = 10;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// splitmix64 finalizer; gives each consumer its own stream from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Pushes the experiment seed into every component config.
inline void apply_seed(ExperimentConfig& c) {
  c.train.seed = derive_seed(c.seed, 0);
  c.train.sampler.seed = derive_seed(c.seed, 1);
  c.init.dequantize_seed = derive_seed(c.seed, 2);
  c.attack.seed = derive_seed(c.seed, 3);
}

inline std::uint64_t buffer_seed(const ExperimentConfig& c) { return derive_seed(c.seed, 4); }
inline std::uint64_t network_seed(const ExperimentConfig& c) { return derive_seed(c.seed, 5); }
inline std::uint64_t split_seed(const ExperimentConfig& c) { return derive_seed(c.seed, 6); }

inline Shape parse_shape(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, 'x');) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || p != part.data() + part.size() || v == 0) throw ConfigError("bad shape '" + text + "'");
    s.push_back(v);
  }
  if (s.empty()) throw ConfigError("bad shape '" + text + "'");
  return s;
}

inline std::string format_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

namespace detail {

/// Shortest representation that parses back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_number(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("'" + s + "' is not a number");
  return v;
}

template <class Int>
Int parse_int(const std::string& s) {
  Int v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("'" + s + "' is not an integer");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("'" + s + "' is not a boolean (true or false)");
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_int<int>(item));
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  auto num = [](const char* s, const char* k, auto get_ref) {
    return Field{s, k, [get_ref](const C& c) { return format_number(get_ref(const_cast<C&>(c))); },
                 [get_ref](C& c, const std::string& v) { get_ref(c) = parse_number(v); }};
  };
  auto integer = [](const char* s, const char* k, auto get_ref) {
    return Field{s, k, [get_ref](const C& c) { return std::to_string(get_ref(const_cast<C&>(c))); },
                 [get_ref](C& c, const std::string& v) {
                   using T = std::remove_reference_t<decltype(get_ref(c))>;
                   get_ref(c) = parse_int<T>(v);
                 }};
  };
  auto text = [](const char* s, const char* k, auto get_ref) {
    return Field{s, k, [get_ref](const C& c) { return get_ref(const_cast<C&>(c)); },
                 [get_ref](C& c, const std::string& v) { get_ref(c) = v; }};
  };
  auto flag = [](const char* s, const char* k, auto get_ref) {
    return Field{s, k, [get_ref](const C& c) { return std::string(get_ref(const_cast<C&>(c)) ? "true" : "false"); },
                 [get_ref](C& c, const std::string& v) { get_ref(c) = parse_bool(v); }};
  };

  static const std::vector<Field> table = {
      integer("experiment", "seed", [](C& c) -> auto& { return c.seed; }),

      text("dataset", "train", [](C& c) -> auto& { return c.train_data; }),
      text("dataset", "eval", [](C& c) -> auto& { return c.eval_data; }),
      text("dataset", "ood", [](C& c) -> auto& { return c.ood_data; }),
      num("dataset", "eval_fraction", [](C& c) -> auto& { return c.eval_fraction; }),
      text("dataset", "input_shape", [](C& c) -> auto& { return c.input_shape; }),
      integer("dataset", "classes", [](C& c) -> auto& { return c.classes; }),

      text("arch", "layers", [](C& c) -> auto& { return c.architecture; }),

      Field{"sampler", "kind", [](const C& c) { return to_string(c.sampler_kind); },
            [](C& c, const std::string& v) {
              try {
                c.sampler_kind = parse_sampler_kind(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
              }
            }},
      num("sampler", "alpha", [](C& c) -> auto& { return c.train.sampler.alpha; }),
      num("sampler", "epsilon", [](C& c) -> auto& { return c.train.sampler.epsilon; }),
      integer("sampler", "k_steps", [](C& c) -> auto& { return c.train.sampler.k_steps; }),
      integer("sampler", "m_steps", [](C& c) -> auto& { return c.train.sampler.m_steps; }),
      integer("sampler", "n_steps", [](C& c) -> auto& { return c.train.sampler.n_steps; }),
      num("sampler", "noise_scale", [](C& c) -> auto& { return c.train.sampler.noise_scale; }),

      integer("train", "epochs", [](C& c) -> auto& { return c.train.epochs; }),
      integer("train", "batch_size", [](C& c) -> auto& { return c.train.batch_size; }),
      num("train", "lr", [](C& c) -> auto& { return c.train.lr; }),
      num("train", "lr_decay", [](C& c) -> auto& { return c.train.lr_decay; }),
      Field{"train", "decay_epochs", [](const C& c) { return format_int_list(c.train.decay_epochs); },
            [](C& c, const std::string& v) { c.train.decay_epochs = parse_int_list(v); }},
      Field{"train", "optimizer", [](const C& c) { return to_string(c.train.optimizer); },
            [](C& c, const std::string& v) {
              try {
                c.train.optimizer = parse_optimizer(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
              }
            }},
      num("train", "momentum", [](C& c) -> auto& { return c.train.momentum; }),
      num("train", "weight_decay", [](C& c) -> auto& { return c.train.weight_decay; }),
      num("train", "adam_beta1", [](C& c) -> auto& { return c.train.adam_beta1; }),
      num("train", "adam_beta2", [](C& c) -> auto& { return c.train.adam_beta2; }),
      num("train", "adam_eps", [](C& c) -> auto& { return c.train.adam_eps; }),
      num("train", "rho", [](C& c) -> auto& { return c.train.rho; }),
      integer("train", "buffer_capacity", [](C& c) -> auto& { return c.train.buffer_capacity; }),
      Field{"train", "joint_stats", [](const C& c) { return std::string(c.train.joint_stats == JointStats::Shared ? "shared" : "separate"); },
            [](C& c, const std::string& v) {
              if (v == "shared") c.train.joint_stats = JointStats::Shared;
              else if (v == "separate") c.train.joint_stats = JointStats::Separate;
              else throw ConfigError("joint_stats must be shared or separate, got '" + v + "'");
            }},
      num("train", "x_bound", [](C& c) -> auto& { return c.train.divergence.x_bound; }),
      integer("train", "max_consecutive_skips", [](C& c) -> auto& { return c.train.divergence.max_consecutive_skips; }),

      Field{"init", "covariance", [](const C& c) { return std::string(c.init.covariance == CovarianceForm::Full ? "full" : "diagonal"); },
            [](C& c, const std::string& v) {
              if (v == "full") c.init.covariance = CovarianceForm::Full;
              else if (v == "diagonal") c.init.covariance = CovarianceForm::Diagonal;
              else throw ConfigError("covariance must be full or diagonal, got '" + v + "'");
            }},
      flag("init", "dequantize", [](C& c) -> auto& { return c.init.dequantize; }),

      Field{"attack", "norm", [](const C& c) { return std::string(c.attack.norm == AttackNorm::Linf ? "linf" : "l2"); },
            [](C& c, const std::string& v) {
              if (v == "linf") c.attack.norm = AttackNorm::Linf;
              else if (v == "l2") c.attack.norm = AttackNorm::L2;
              else throw ConfigError("attack norm must be linf or l2, got '" + v + "'");
            }},
      num("attack", "radius", [](C& c) -> auto& { return c.attack.radius; }),
      num("attack", "step_size", [](C& c) -> auto& { return c.attack.step_size; }),
      integer("attack", "steps", [](C& c) -> auto& { return c.attack.steps; }),
      flag("attack", "random_start", [](C& c) -> auto& { return c.attack.random_start; }),
      num("attack", "domain_lo", [](C& c) -> auto& { return c.attack.domain_lo; }),
      num("attack", "domain_hi", [](C& c) -> auto& { return c.attack.domain_hi; }),

      Field{"ood", "score", [](const C& c) { return std::string(c.ood_score == OodScore::LogDensity ? "log_density" : "max_softmax"); },
            [](C& c, const std::string& v) {
              if (v == "log_density") c.ood_score = OodScore::LogDensity;
              else if (v == "max_softmax") c.ood_score = OodScore::MaxSoftmax;
              else throw ConfigError("ood score must be log_density or max_softmax, got '" + v + "'");
            }},

      text("output", "dir", [](C& c) -> auto& { return c.out_dir; }),
      integer("output", "checkpoint_every", [](C& c) -> auto& { return c.checkpoint_every; }),
  };
  return table;
}

}  // namespace detail

/// Sections in table order, one "key = value" per line.
inline void write_config(std::ostream& os, const ExperimentConfig& c) {
  std::string section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
}

inline std::string to_config_string(const ExperimentConfig& c) {
  std::ostringstream os;
  write_config(os, c);
  return os.str();
}

/// Reads "key = value" lines grouped under [section] headers. Lines starting
/// with '#' or ';' are comments. Missing keys keep their defaults; unknown
/// sections or keys are errors. `origin` prefixes diagnostics. Component
/// seeds are derived from [experiment] seed on return.
inline ExperimentConfig parse_config(std::istream& is, const std::string& origin = "config") {
  ExperimentConfig c;
  std::map<std::string, const detail::Field*> index;
  for (const auto& f : detail::fields()) index[std::string(f.section) + "." + f.key] = &f;
  std::map<std::string, bool> seen;
  std::string section, line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = detail::trim(line);
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header '" + t + "'");
      section = detail::trim(t.substr(1, t.size() - 2));
      bool known = false;
      for (const auto& f : detail::fields()) known = known || section == f.section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + t + "'");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    const std::string full = section + "." + key;
    const auto it = index.find(full);
    if (it == index.end()) throw ConfigError(where + "unknown key '" + key + "' in section [" + section + "]");
    if (seen[full]) throw ConfigError(where + "duplicate key '" + full + "'");
    seen[full] = true;
    try {
      it->second->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + full + ": " + e.what());
    }
  }
  apply_seed(c);
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(is, path);
}

}  // namespace jempp
