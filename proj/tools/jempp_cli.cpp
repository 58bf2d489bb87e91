// jempp: command-line driver for training, sampling and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "jempp/jempp.hpp"

namespace fs = std::filesystem;
using namespace jempp;

namespace {

constexpr int kExitError = 1;
constexpr int kExitAbort = 3;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig c = g.config_path.empty() ? parse_config_string("") : load_config(g.config_path);
  if (g.seed) {
    c.seed = *g.seed;
    apply_seed(c);
  }
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  return c;
}

/// First of stem.ext, stem-1.ext, stem-2.ext, ... that does not exist yet.
fs::path fresh_path(const fs::path& dir, const std::string& stem, const std::string& ext) {
  fs::path p = dir / (stem + ext);
  for (int i = 1; fs::exists(p); ++i) p = dir / (stem + "-" + std::to_string(i) + ext);
  return p;
}

std::ofstream open_output(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot create output file '" + p.string() + "'");
  return os;
}

void write_resolved_config(const ExperimentConfig& c, const fs::path& dir) {
  auto os = open_output(fresh_path(dir, "config.resolved", ".ini"));
  write_config(os, c);
}

int cmd_train(const ExperimentConfig& c) {
  Experiment ex = make_experiment(c);
  const InformativeInit& init = ex.init;

  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  write_resolved_config(c, dir);
  auto metrics = open_output(fresh_path(dir, "metrics", ".csv"));
  MetricsRecord::write_header(metrics);

  auto save = [&](const std::string& stem, const SplitNetwork& n, const ReplayBuffer& b, std::int64_t epoch) {
    Checkpoint ck{n, init, snapshot(b), epoch};
    const fs::path p = fresh_path(dir, stem, ".ckpt");
    save_checkpoint(p.string(), ck);
    return p;
  };

  std::int64_t last_epoch = -1;
  TrainHooks hooks;
  hooks.on_epoch = [&](const MetricsRecord& m, const SplitNetwork& n, const ReplayBuffer& b) {
    last_epoch = m.epoch;
    m.write_row(metrics);
    metrics.flush();
    std::fprintf(stderr, "epoch %d  lr %.4g  train_acc %.4f  eval_acc %.4f  gap %.4f  skips %llu\n", m.epoch, m.lr,
                 m.train_acc, m.eval_acc, m.energy_gap, static_cast<unsigned long long>(m.divergence_count));
    if (c.checkpoint_every > 0 && (m.epoch + 1) % c.checkpoint_every == 0) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "checkpoint-e%04d", m.epoch + 1);
      save(stem, n, b, m.epoch);
    }
  };
  hooks.on_abort = [&](const SplitNetwork& n, const ReplayBuffer& b) {
    const fs::path p = save("checkpoint-abort", n, b, last_epoch);
    std::fprintf(stderr, "training aborted after repeated divergence; state saved to %s\n", p.string().c_str());
  };

  const TrainResult r = ex.run(c.train, hooks);
  if (r.aborted) return kExitAbort;
  const fs::path p = save("model", ex.net, ex.buffer, last_epoch);
  std::cout << "trained " << r.metrics.size() << " epochs; model written to " << p.string() << '\n';
  return 0;
}

struct SampleOptions {
  std::string checkpoint;
  std::size_t n = 64;
  std::string kind;
  std::string start = "init";
};

int cmd_sample(const ExperimentConfig& c, const SampleOptions& o) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  const SamplerKind kind = o.kind.empty() ? c.sampler_kind : parse_sampler_kind(o.kind);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  auto samples = open_output(fresh_path(dir, "samples", ".csv"));
  auto trace_os = open_output(fresh_path(dir, "trace", ".csv"));
  auto counters = open_output(fresh_path(dir, "counters", ".csv"));

  const std::size_t d = shape_size(ck.net.input_shape());
  for (std::size_t k = 0; k < d; ++k) samples << 'x' << k << ',';
  samples << "energy\n";

  ChainTrace trace;
  if (o.n > 0) {
    Rng rng(c.train.sampler.seed);
    std::vector<Tensor> starts;
    if (o.start == "buffer") {
      if (!ck.buffer || ck.buffer->slots.empty()) throw std::runtime_error("checkpoint has no replay buffer states");
      for (std::size_t i = 0; i < o.n; ++i) starts.push_back(ck.buffer->slots[rng.index(ck.buffer->slots.size())]);
    } else if (o.start == "init") {
      if (!ck.init) throw std::runtime_error("checkpoint has no fitted initializer");
      for (std::size_t i = 0; i < o.n; ++i) starts.push_back(sample_marginal(*ck.init, rng).first);
    } else {
      throw std::runtime_error("--start must be init or buffer, got '" + o.start + "'");
    }
    SamplerConfig scfg = c.train.sampler;
    scfg.record_energies = true;
    const NetworkEnergy model{ck.net, BnMode::EvalRunningStats};
    const SampleResult r = run_chain(model, stack(starts), scfg, kind, rng);
    trace = r.trace;
    const std::vector<double> e = model.energies(r.x);
    for (std::size_t i = 0; i < r.x.rows(); ++i) {
      for (double v : r.x.row(i)) samples << ChainTrace::fmt_double(v) << ',';
      samples << ChainTrace::fmt_double(e[i]) << '\n';
    }
  }
  trace.write_csv(trace_os);
  counters << "sampler,chains,steps,full_propagations,first_layer_props\n"
           << to_string(kind) << ',' << o.n << ',' << trace.steps << ',' << trace.full_propagations << ','
           << trace.first_layer_props << '\n';
  std::cout << "wrote " << o.n << " samples (" << to_string(kind) << ", full_propagations " << trace.full_propagations
            << ")\n";
  return 0;
}

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string ood;
  std::vector<double> radii;
};

int cmd_eval(const ExperimentConfig& c, const EvalOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset d = load_checked(o.data.empty() ? c.eval_data : o.data, c, "eval");
  check_compatible(ck.net, d, "eval dataset");
  const auto preds = predict(ck.net, d);
  std::size_t correct = 0;
  for (const auto& p : preds) correct += p.predicted == p.truth;
  const double acc = static_cast<double>(correct) / static_cast<double>(preds.size());
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  auto os = open_output(fresh_path(dir, "eval", ".csv"));
  os << "n,accuracy,ece\n"
     << preds.size() << ',' << ChainTrace::fmt_double(acc) << ',' << ChainTrace::fmt_double(ece(preds, 20)) << '\n';
  std::cout << "accuracy " << acc << '\n';
  return 0;
}

int cmd_ood(const ExperimentConfig& c, const EvalOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset in = load_checked(o.data.empty() ? c.eval_data : o.data, c, "in-distribution");
  const Dataset out = load_checked(o.ood.empty() ? c.ood_data : o.ood, c, "out-of-distribution");
  check_compatible(ck.net, in, "in-distribution dataset");
  if (out.sample_shape != ck.net.input_shape()) throw std::runtime_error("out-of-distribution samples do not match the model input shape");
  const auto si = ood_scores(ck.net, in, c.ood_score);
  const auto so = ood_scores(ck.net, out, c.ood_score);
  const double a = auroc(si, so);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  auto report = open_output(fresh_path(dir, "ood", ".csv"));
  report << "score,n_in,n_out,auroc\n"
         << (c.ood_score == OodScore::LogDensity ? "log_density" : "max_softmax") << ',' << si.size() << ','
         << so.size() << ',' << ChainTrace::fmt_double(a) << '\n';
  auto dump = open_output(fresh_path(dir, "ood_scores", ".csv"));
  dump << "score,split\n";
  for (double s : si) dump << ChainTrace::fmt_double(s) << ",in\n";
  for (double s : so) dump << ChainTrace::fmt_double(s) << ",out\n";
  std::cout << "auroc " << a << '\n';
  return 0;
}

int cmd_attack(const ExperimentConfig& c, const EvalOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset d = load_checked(o.data.empty() ? c.eval_data : o.data, c, "attack");
  check_compatible(ck.net, d, "attack dataset");
  const std::vector<double> radii = o.radii.empty() ? std::vector<double>{c.attack.radius} : o.radii;
  const double clean = accuracy(ck.net, d);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  auto os = open_output(fresh_path(dir, "attack", ".csv"));
  os << "norm,radius,step_size,steps,clean_accuracy,robust_accuracy\n";
  for (double r : radii) {
    AttackConfig a = c.attack;
    a.radius = r;
    if (!o.radii.empty()) a.step_size = r / 4.0;
    const double robust = robust_accuracy(ck.net, d, a);
    os << (a.norm == AttackNorm::Linf ? "linf" : "l2") << ',' << ChainTrace::fmt_double(r) << ','
       << ChainTrace::fmt_double(a.step_size) << ',' << a.steps << ',' << ChainTrace::fmt_double(clean) << ','
       << ChainTrace::fmt_double(robust) << '\n';
    std::cout << "radius " << r << "  robust accuracy " << robust << '\n';
  }
  return 0;
}

int cmd_fit_init(const ExperimentConfig& c, const std::string& data) {
  const Dataset d = load_checked(data.empty() ? c.train_data : data, c, "train");
  const InformativeInit init = fit_informative_init(d, c.init);
  Rng net_rng(network_seed(c));
  SplitNetwork net(d.sample_shape, parse_architecture(c.architecture), net_rng);
  check_compatible(net, d, "train dataset");
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  save_checkpoint(fresh_path(dir, "init", ".ckpt").string(), Checkpoint{net, init, std::nullopt, -1});
  auto os = open_output(fresh_path(dir, "init_summary", ".csv"));
  os << "class,pi,jitter\n";
  for (std::size_t k = 0; k < init.num_classes(); ++k) {
    os << k << ',' << ChainTrace::fmt_double(init.pi[k]) << ',' << ChainTrace::fmt_double(init.jitter[k]) << '\n';
  }
  std::cout << "fitted " << init.num_classes() << " class components\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint energy-based model training with proximal Langevin sampling"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Overrides [experiment] seed");
  app.add_option("--out", g.out_dir, "Overrides [output] dir");

  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
  train_cmd->fallthrough();

  SampleOptions so;
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint");
  sample_cmd->fallthrough();
  sample_cmd->add_option("--checkpoint", so.checkpoint)->required();
  sample_cmd->add_option("-n,--count", so.n, "Number of chains");
  sample_cmd->add_option("--kind", so.kind, "sgld, proximal or pyld (default from config)");
  sample_cmd->add_option("--start", so.start, "Chain starts: init or buffer");

  EvalOptions eo;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy and calibration on a dataset");
  auto* ood_cmd = app.add_subcommand("ood", "Out-of-distribution detection AUROC");
  auto* attack_cmd = app.add_subcommand("attack", "PGD robust accuracy");
  for (auto* cmd : {eval_cmd, ood_cmd, attack_cmd}) {
    cmd->fallthrough();
    cmd->add_option("--checkpoint", eo.checkpoint)->required();
    cmd->add_option("--data", eo.data, "Dataset descriptor (default [dataset] eval)");
  }
  ood_cmd->add_option("--ood-data", eo.ood, "Out-of-distribution descriptor (default [dataset] ood)");
  attack_cmd->add_option("--radius", eo.radii, "Radii to sweep; step size becomes radius/4");

  std::string fit_data;
  auto* fit_cmd = app.add_subcommand("fit-init", "Fit the class-conditional Gaussian initializer");
  fit_cmd->fallthrough();
  fit_cmd->add_option("--data", fit_data, "Dataset descriptor (default [dataset] train)");

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig c = resolve_config(g);
    if (*train_cmd) return cmd_train(c);
    if (*sample_cmd) return cmd_sample(c, so);
    if (*eval_cmd) return cmd_eval(c, eo);
    if (*ood_cmd) return cmd_ood(c, eo);
    if (*attack_cmd) return cmd_attack(c, eo);
    if (*fit_cmd) return cmd_fit_init(c, fit_data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
