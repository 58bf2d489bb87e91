#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "jempp/jempp.hpp"
#include "oracles.hpp"

using namespace jempp;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("jempp_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string error_of(const std::string& text) {
  try {
    (void)parse_config_string(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace

TEST(ConfigFile, DefaultsRoundTrip) {
  const ExperimentConfig c = parse_config_string("");
  EXPECT_EQ(parse_config_string(to_config_string(c)), c);
  EXPECT_EQ(c.train.sampler.alpha, 0.2);
  EXPECT_EQ(c.train.sampler.epsilon, 1.0);
  EXPECT_EQ(c.train.sampler.m_steps, 10);
  EXPECT_EQ(c.train.sampler.n_steps, 5);
  EXPECT_EQ(c.train.rho, 0.05);
  EXPECT_EQ(c.train.buffer_capacity, 10000u);
}

TEST(ConfigFile, EditedValuesRoundTrip) {
  ExperimentConfig c = parse_config_string("");
  c.seed = 12345678901234ULL;
  c.train_data = "moons:n=1000,noise=0.1,seed=1,scale=10";
  c.ood_data = "uniform:n=500,dim=2,lo=-20,hi=20,seed=9";
  c.input_shape = "1x28x28";
  c.classes = 10;
  c.architecture = "conv:4,bn,relu,dense:10";
  c.sampler_kind = SamplerKind::ProximalSGLD;
  c.train.sampler.epsilon = std::numeric_limits<double>::infinity();
  c.train.sampler.alpha = 0.1 + 0.2;  // not exactly representable as typed
  c.train.lr = 1.0 / 3.0;
  c.train.decay_epochs = {3, 7};
  c.train.optimizer = OptimizerKind::Adam;
  c.train.joint_stats = JointStats::Separate;
  c.train.divergence.x_bound = 100.0;
  c.init.covariance = CovarianceForm::Diagonal;
  c.init.dequantize = true;
  c.attack.norm = AttackNorm::L2;
  c.attack.radius = 8.0 / 255.0;
  c.ood_score = OodScore::MaxSoftmax;
  c.out_dir = "runs/x y";
  c.checkpoint_every = 0;
  apply_seed(c);
  const std::string text = to_config_string(c);
  const ExperimentConfig back = parse_config_string(text);
  EXPECT_EQ(back, c);
  EXPECT_EQ(to_config_string(back), text);
}

TEST(ConfigFile, FailsLoudly) {
  EXPECT_NE(error_of("[train]\nlr = 0.1\nlearning_rate = 2\n").find("config:3: unknown key 'learning_rate'"),
            std::string::npos);
  EXPECT_NE(error_of("[model]\n").find("unknown section [model]"), std::string::npos);
  EXPECT_NE(error_of("[train]\nlr = 1\nlr = 2\n").find("duplicate key 'train.lr'"), std::string::npos);
  EXPECT_NE(error_of("lr = 1\n").find("outside of any section"), std::string::npos);
  EXPECT_NE(error_of("[train]\nlr = fast\n").find("train.lr"), std::string::npos);
  EXPECT_NE(error_of("[train]\noptimizer = rmsprop\n"), "");
  EXPECT_NE(error_of("[sampler]\nkind = hmc\n"), "");
  EXPECT_NE(error_of("[train]\nepochs\n").find("expected 'key = value'"), std::string::npos);
  EXPECT_EQ(error_of("# comment\n; other\n\n[train]\n  lr   =   0.5  \n"), "");
  EXPECT_THROW(load_config("/nonexistent/dir/cfg.ini"), ConfigError);
}

TEST(ConfigFile, SeedsDeriveFromExperimentSeed) {
  const ExperimentConfig a = parse_config_string("[experiment]\nseed = 7\n");
  const ExperimentConfig b = parse_config_string("[experiment]\nseed = 8\n");
  EXPECT_NE(a.train.seed, b.train.seed);
  EXPECT_NE(a.train.sampler.seed, b.train.sampler.seed);
  const std::vector<std::uint64_t> streams{a.train.seed, a.train.sampler.seed, a.init.dequantize_seed, a.attack.seed,
                                           buffer_seed(a), network_seed(a), split_seed(a)};
  for (std::size_t i = 0; i < streams.size(); ++i)
    for (std::size_t j = i + 1; j < streams.size(); ++j) EXPECT_NE(streams[i], streams[j]);
  EXPECT_EQ(parse_config_string("[experiment]\nseed = 7\n"), a);
}

TEST(ConfigFile, Shapes) {
  EXPECT_EQ(parse_shape("1x28x28"), (Shape{1, 28, 28}));
  EXPECT_EQ(parse_shape("2"), (Shape{2}));
  EXPECT_EQ(format_shape({1, 28, 28}), "1x28x28");
  EXPECT_THROW(parse_shape("1x0"), std::exception);
  EXPECT_THROW(parse_shape("axb"), std::exception);
}

TEST(Checkpoint, RoundTripsEverything) {
  SplitNetwork net = oracle::random_net({2}, "dense:8,bn,relu,dense:8,bn,relu,dense:2", 3);
  const Dataset d = make_two_moons(100, 0.1, 1);
  const InformativeInit init = fit_informative_init(d);
  ReplayBuffer buf(50, 0.05, 9);
  std::vector<Tensor> states;
  for (std::size_t i = 0; i < 30; ++i) states.push_back(d.sample(i));
  buf.push(states);
  (void)buf.draw(init, 7);

  std::stringstream ss;
  write_checkpoint(ss, Checkpoint{net, init, snapshot(buf), 41});
  const Checkpoint back = read_checkpoint(ss);
  EXPECT_EQ(back.epoch, 41);
  EXPECT_EQ(back.net.specs(), net.specs());
  EXPECT_EQ(back.net.input_shape(), net.input_shape());
  SplitNetwork copy = back.net;
  const auto pa = net.parameters(), pb = copy.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
  for (std::size_t i = 0; i < net.body().size(); ++i) {
    EXPECT_EQ(back.net.body()[i].bn.running_mean, net.body()[i].bn.running_mean);
    EXPECT_EQ(back.net.body()[i].bn.running_var, net.body()[i].bn.running_var);
  }
  EXPECT_EQ(forward_logits(back.net, d.x, BnMode::EvalRunningStats), forward_logits(net, d.x, BnMode::EvalRunningStats));

  ASSERT_TRUE(back.init.has_value());
  EXPECT_EQ(back.init->pi, init.pi);
  EXPECT_EQ(back.init->mu, init.mu);
  EXPECT_EQ(back.init->cov_factor, init.cov_factor);
  EXPECT_EQ(back.init->jitter, init.jitter);

  ASSERT_TRUE(back.buffer.has_value());
  ReplayBuffer restored = restore_buffer(*back.buffer);
  EXPECT_EQ(restored.slots(), buf.slots());
  // The restored generator continues the original stream.
  const auto da = buf.draw(init, 20), db = restored.draw(init, 20);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(da[i].x, db[i].x);
}

TEST(Checkpoint, OptionalPartsMayBeAbsent) {
  const SplitNetwork net = oracle::random_net({1, 4, 4}, "conv:2,bn,relu,dense:3", 5);
  std::stringstream ss;
  write_checkpoint(ss, Checkpoint{net, std::nullopt, std::nullopt, -1});
  const Checkpoint back = read_checkpoint(ss);
  EXPECT_FALSE(back.init.has_value());
  EXPECT_FALSE(back.buffer.has_value());
  EXPECT_EQ(back.epoch, -1);
  EXPECT_EQ(back.net.first_layer().weights, net.first_layer().weights);
}

TEST(Checkpoint, HeaderLayoutAndVersionCheck) {
  const SplitNetwork net = oracle::random_net({2}, "dense:3,relu,dense:2", 1);
  std::stringstream ss;
  write_checkpoint(ss, Checkpoint{net, std::nullopt, std::nullopt, 5});
  std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "JEMPPCKP");
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x01\x00\x00\x00", 4));
  EXPECT_EQ(bytes.substr(12, 8), std::string("\x05\x00\x00\x00\x00\x00\x00\x00", 8));

  bytes[8] = 2;
  std::istringstream bad(bytes);
  try {
    (void)read_checkpoint(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("version 2"), std::string::npos);
    EXPECT_NE(msg.find("expected 1"), std::string::npos);
  }
  std::istringstream magic("NOTACKPT");
  EXPECT_THROW(read_checkpoint(magic), CheckpointError);
  std::istringstream truncated(ss.str().substr(0, 40));
  EXPECT_THROW(read_checkpoint(truncated), CheckpointError);
}

TEST(Checkpoint, FileErrorsNameThePath) {
  const fs::path dir = temp_dir("ckpt");
  const std::string p = (dir / "broken.ckpt").string();
  std::ofstream(p) << "JEMPPCKP\x07";
  try {
    (void)load_checkpoint(p);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find(p), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
}

TEST(Datasets, CsvRoundTrip) {
  const fs::path dir = temp_dir("csv");
  const Dataset d = make_gaussian_mixture_2d(3, 50, 1.0, 0.2, 4);
  {
    std::ofstream os(dir / "g.csv");
    os << "x0,x1,label\n";
    write_csv(d, os);
  }
  const Dataset back = load_dataset("csv:" + (dir / "g.csv").string());
  EXPECT_EQ(back.sample_shape, (Shape{2}));
  EXPECT_EQ(back.num_classes, 3u);
  EXPECT_EQ(back.y, d.y);
  EXPECT_EQ(back.x, d.x);
}

TEST(Datasets, CsvErrors) {
  const fs::path dir = temp_dir("csv_err");
  std::ofstream(dir / "ragged.csv") << "1,2,0\n3,1\n";
  std::ofstream(dir / "label.csv") << "1,2,0.5\n";
  std::ofstream(dir / "text.csv") << "1,2,0\nx,2,1\n";
  for (const char* f : {"ragged.csv", "label.csv", "text.csv"}) {
    EXPECT_THROW(load_csv((dir / f).string()), std::runtime_error) << f;
  }
  try {
    (void)load_dataset("csv:" + (dir / "nope.csv").string());
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("nope.csv"), std::string::npos);
  }
}

TEST(Datasets, IdxBitExact) {
  const fs::path dir = temp_dir("idx");
  {
    std::ofstream im(dir / "im", std::ios::binary);
    write_be32(im, 0x803);
    write_be32(im, 2);
    write_be32(im, 2);
    write_be32(im, 3);
    const unsigned char px[12] = {0, 255, 128, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    im.write(reinterpret_cast<const char*>(px), 12);
    std::ofstream lb(dir / "lb", std::ios::binary);
    write_be32(lb, 0x801);
    write_be32(lb, 2);
    lb.put(3);
    lb.put(1);
  }
  const Dataset d = load_idx((dir / "im").string(), (dir / "lb").string());
  EXPECT_EQ(d.sample_shape, (Shape{1, 2, 3}));
  EXPECT_EQ(d.y, (std::vector<int>{3, 1}));
  EXPECT_EQ(d.num_classes, 4u);
  EXPECT_EQ(d.x[0], -1.0);
  EXPECT_EQ(d.x[1], 1.0);
  EXPECT_EQ(d.x[2], 128.0 / 255.0 * 2.0 - 1.0);
  EXPECT_EQ(load_idx((dir / "im").string(), (dir / "lb").string(), 1).size(), 1u);
  EXPECT_THROW(load_idx((dir / "lb").string(), (dir / "im").string()), std::runtime_error);
}

TEST(Datasets, BundledMnistSubset) {
  const std::string base = JEMPP_DATA_DIR;
  const Dataset d = load_dataset("idx:" + base + "/mnist2k-images-idx3-ubyte," + base + "/mnist2k-labels-idx1-ubyte");
  EXPECT_EQ(d.size(), 2000u);
  EXPECT_EQ(d.sample_shape, (Shape{1, 28, 28}));
  EXPECT_EQ(d.num_classes, 10u);
  std::vector<int> counts(10, 0);
  for (int y : d.y) ++counts[y];
  for (int c : counts) EXPECT_EQ(c, 200);
  for (double v : d.x.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Datasets, GeneratorsAreSeeded) {
  EXPECT_EQ(make_two_moons(50, 0.1, 3).x, make_two_moons(50, 0.1, 3).x);
  EXPECT_NE(make_two_moons(50, 0.1, 3).x, make_two_moons(50, 0.1, 4).x);
  const Dataset m = make_two_moons(400, 0.0, 1, 10.0);
  EXPECT_LE(m.x.max_abs(), 10.0 + 1e-12);
  std::size_t ones = 0;
  for (int y : m.y) ones += y == 1;
  EXPECT_EQ(ones, 200u);
  const Dataset u = load_dataset("uniform:n=100,dim=3,lo=-2,hi=2,seed=4");
  EXPECT_EQ(u.sample_shape, (Shape{3}));
  EXPECT_LE(u.x.max_abs(), 2.0);
  EXPECT_THROW(load_dataset("spiral:n=3"), std::invalid_argument);
  EXPECT_THROW(load_dataset("moons:n"), std::invalid_argument);
}
