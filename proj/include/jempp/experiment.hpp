#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "jempp/buffer.hpp"
#include "jempp/config.hpp"
#include "jempp/data.hpp"
#include "jempp/init.hpp"
#include "jempp/network.hpp"
#include "jempp/trainer.hpp"

namespace jempp {

/// Loads a dataset and applies the [dataset] shape and class-count declarations.
inline Dataset load_checked(const std::string& descriptor, const ExperimentConfig& c, const std::string& role) {
  if (descriptor.empty()) throw std::runtime_error("no " + role + " dataset configured");
  Dataset d = load_dataset(descriptor);
  if (!c.input_shape.empty() && parse_shape(c.input_shape) != d.sample_shape) {
    throw std::runtime_error(role + " dataset '" + descriptor + "' has sample shape " + shape_str(d.sample_shape) +
                             " but [dataset] input_shape is " + c.input_shape);
  }
  if (c.classes) {
    if (d.num_classes > c.classes) {
      throw std::runtime_error(role + " dataset '" + descriptor + "' has labels beyond [dataset] classes = " +
                               std::to_string(c.classes));
    }
    d.num_classes = c.classes;
  }
  return d;
}

struct Splits {
  Dataset train;
  std::optional<Dataset> eval;
};

/// Train and eval data. Without an eval descriptor, eval_fraction of the
/// training rows is held out using the split seed.
inline Splits load_splits(const ExperimentConfig& c) {
  Splits s{load_checked(c.train_data, c, "train"), std::nullopt};
  if (!c.eval_data.empty()) {
    s.eval = load_checked(c.eval_data, c, "eval");
  } else if (c.eval_fraction > 0.0) {
    std::vector<std::size_t> order(s.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(split_seed(c));
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto n_eval = static_cast<std::size_t>(c.eval_fraction * static_cast<double>(order.size()));
    const std::span<const std::size_t> all(order);
    s.eval = s.train.subset(all.first(n_eval));
    s.train = s.train.subset(all.subspan(n_eval));
  }
  return s;
}

inline void check_compatible(const SplitNetwork& net, const Dataset& d, const std::string& what) {
  if (d.sample_shape != net.input_shape()) {
    throw std::runtime_error(what + " samples have shape " + shape_str(d.sample_shape) + " but the model expects " +
                             shape_str(net.input_shape()));
  }
  if (d.num_classes > net.num_classes()) {
    throw std::runtime_error(what + " has " + std::to_string(d.num_classes) + " classes but the model outputs " +
                             std::to_string(net.num_classes()));
  }
}

/// Everything a training run starts from, built from one config.
struct Experiment {
  Splits data;
  SplitNetwork net;
  InformativeInit init;
  ReplayBuffer buffer;

  TrainResult run(const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    return train(net, data.train, data.eval ? &*data.eval : nullptr, init, buffer, cfg, hooks);
  }
};

inline Experiment make_experiment(const ExperimentConfig& c) {
  Splits data = load_splits(c);
  Rng net_rng(network_seed(c));
  SplitNetwork net(data.train.sample_shape, parse_architecture(c.architecture), net_rng);
  check_compatible(net, data.train, "train dataset");
  if (data.eval) check_compatible(net, *data.eval, "eval dataset");
  InformativeInit init = fit_informative_init(data.train, c.init);
  ReplayBuffer buffer(c.train.buffer_capacity, c.train.rho, buffer_seed(c));
  return {std::move(data), std::move(net), std::move(init), std::move(buffer)};
}

}  // namespace jempp
