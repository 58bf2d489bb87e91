#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "jempp/jempp.hpp"
#include "oracles.hpp"

using namespace jempp;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

SamplerConfig quiet(double alpha, double eps) {
  SamplerConfig c;
  c.alpha = alpha;
  c.epsilon = eps;
  c.noise_scale = 0.0;
  return c;
}

// Fails on the third full propagation.
struct Exploding : oracle::Quadratic {
  mutable int calls = 0;
  SlackResult slack(const Tensor& x) const {
    if (++calls == 3) throw DivergenceError("boom");
    return Quadratic::slack(x);
  }
};

}  // namespace

TEST(Clamp, Examples) {
  const Tensor c = clamp(Tensor::vector({2, -0.5, -3}), 1.0);
  EXPECT_EQ(c, Tensor::vector({1, -0.5, -1}));
  EXPECT_EQ(clamp(c, 1.0), c);
  const Tensor v = Tensor::vector({1e300, -1e300});
  EXPECT_EQ(clamp(v, kInf), v);
}

TEST(Sgld, QuadraticStepWithoutNoise) {
  Rng rng(1);
  ChainTrace tr;
  const Tensor x = sgld_step(oracle::Quadratic{}, Tensor::vector({1, 1}), quiet(0.2, 1.0), rng, tr);
  EXPECT_DOUBLE_EQ(x[0], 0.9);
  EXPECT_DOUBLE_EQ(x[1], 0.9);
  EXPECT_EQ(tr.full_propagations, 1u);
}

TEST(ProximalSgld, ClampsGradientNotNoise) {
  Rng rng(1);
  ChainTrace tr;
  // grad = x = (2, -0.5) clamps to (1, -0.5); step alpha/2 = 1.
  const Tensor x = proximal_sgld_step(oracle::Quadratic{}, Tensor::vector({2, -0.5}), quiet(2.0, 1.0), rng, tr);
  EXPECT_DOUBLE_EQ(x[0], 1.0);
  EXPECT_DOUBLE_EQ(x[1], 0.0);

  SamplerConfig c = quiet(0.2, 1e-3);
  c.noise_scale = 5.0;
  Rng a(9), b(9);
  const Tensor y = proximal_sgld_step(oracle::Quadratic{}, Tensor::vector({0.0}), c, a, tr);
  EXPECT_DOUBLE_EQ(y[0], 5.0 * b.normal());
}

TEST(ProximalSgld, InfiniteRadiusIsBitwiseSgld) {
  const SplitNetwork net = oracle::random_net({3}, "dense:8,bn,relu,dense:3", 4);
  const NetworkEnergy m{net};
  SamplerConfig c;
  c.epsilon = kInf;
  c.k_steps = 30;
  Rng init(2);
  const Tensor x0 = oracle::random_tensor({5, 3}, init);
  const auto a = run_chain(m, x0, c, SamplerKind::SGLD);
  const auto b = run_chain(m, x0, c, SamplerKind::ProximalSGLD);
  EXPECT_EQ(a.x, b.x);
}

TEST(Pyld, SingleInnerStepMatchesProximalSgld) {
  const SplitNetwork net = oracle::random_net({1, 3, 3}, "conv:2,bn,relu,dense:3", 7);
  const NetworkEnergy m{net};
  Rng init(3);
  const Tensor x0 = oracle::random_tensor({4, 1, 3, 3}, init);
  for (int M : {1, 5, 20}) {
    SamplerConfig c;
    c.m_steps = M;
    c.k_steps = M;
    c.n_steps = 1;
    c.epsilon = 0.05;
    const auto a = run_chain(m, x0, c, SamplerKind::PYLD);
    const auto b = run_chain(m, x0, c, SamplerKind::ProximalSGLD);
    for (std::size_t i = 0; i < a.x.size(); ++i) EXPECT_NEAR(a.x[i], b.x[i], 1e-10);
  }
}

TEST(Pyld, InnerLoopWithFrozenSlackThenNoise) {
  SamplerConfig c = quiet(0.2, 0.5);
  c.m_steps = 3;
  c.n_steps = 4;
  c.noise_scale = 0.3;
  Rng rng(17);
  const Tensor x0 = Tensor::vector({3.0, -0.2});
  const auto r = pyld_sample(oracle::Quadratic{}, x0, c, rng);

  // The quadratic's first-layer VJP returns p unchanged, so every inner
  // step repeats the same clamped move.
  Rng noise(17);
  std::vector<double> x{3.0, -0.2};
  for (int t = 0; t < 3; ++t) {
    const std::vector<double> p = x;
    for (int k = 0; k < 4; ++k)
      for (int i = 0; i < 2; ++i) x[i] -= 0.1 * std::clamp(p[i], -0.5, 0.5);
    for (double& v : x) v += 0.3 * noise.normal();
  }
  EXPECT_DOUBLE_EQ(r.x[0], x[0]);
  EXPECT_DOUBLE_EQ(r.x[1], x[1]);
}

TEST(Pyld, PropagationCounters) {
  Rng init(5);
  const Tensor x0 = oracle::random_tensor({7, 2}, init);
  for (int M : {5, 10, 20})
    for (int N : {5, 10, 20}) {
      SamplerConfig c;
      c.m_steps = M;
      c.n_steps = N;
      Rng rng(1);
      const auto r = pyld_sample(oracle::Quadratic{}, x0, c, rng);
      EXPECT_EQ(r.trace.full_propagations, 7u * M);
      EXPECT_EQ(r.trace.first_layer_props, 7u * M * N);
      EXPECT_EQ(r.trace.steps, M);
    }
}

TEST(Pyld, CountersIndependentOfRecording) {
  SamplerConfig c;
  Rng a(1), b(1);
  const auto r1 = pyld_sample(oracle::Quadratic{}, Tensor::vector({1, 2}), c, a);
  c.record_states = c.record_energies = true;
  const auto r2 = pyld_sample(oracle::Quadratic{}, Tensor::vector({1, 2}), c, b);
  EXPECT_EQ(r1.trace.full_propagations, r2.trace.full_propagations);
  EXPECT_EQ(r1.trace.first_layer_props, r2.trace.first_layer_props);
  EXPECT_EQ(r1.x, r2.x);
  EXPECT_EQ(r2.trace.states.size(), 10u);
  EXPECT_EQ(r2.trace.rows.size(), 10u);
  EXPECT_TRUE(r1.trace.rows.empty());
}

TEST(Chain, ZeroStepsReturnStart) {
  SamplerConfig c;
  c.k_steps = 0;
  c.m_steps = 0;
  const Tensor x0 = Tensor::vector({0.5, -4});
  for (SamplerKind k : {SamplerKind::SGLD, SamplerKind::ProximalSGLD, SamplerKind::PYLD}) {
    const auto r = run_chain(oracle::Quadratic{}, x0, c, k);
    EXPECT_EQ(r.x, x0);
    EXPECT_EQ(r.trace.full_propagations, 0u);
    EXPECT_EQ(r.trace.first_layer_props, 0u);
  }
}

TEST(Chain, NoiseFreeEnergyDecreasesOnQuadratic) {
  for (SamplerKind k : {SamplerKind::SGLD, SamplerKind::ProximalSGLD, SamplerKind::PYLD}) {
    SamplerConfig c = quiet(0.2, 1.0);
    c.k_steps = c.m_steps = 25;
    c.n_steps = 2;
    c.record_energies = true;
    const auto r = run_chain(oracle::Quadratic{}, Tensor::vector({3, -2, 0.5}), c, k);
    ASSERT_EQ(r.trace.rows.size(), 25u);
    for (std::size_t i = 1; i < r.trace.rows.size(); ++i) EXPECT_LT(r.trace.rows[i].energy, r.trace.rows[i - 1].energy);
  }
}

TEST(Chain, SameSeedSameTrajectory) {
  const SplitNetwork net = oracle::random_net({2}, "dense:8,relu,dense:2", 3);
  SamplerConfig c;
  c.seed = 42;
  const Tensor x0 = Tensor({3, 2}, std::vector<double>{0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
  for (SamplerKind k : {SamplerKind::SGLD, SamplerKind::ProximalSGLD, SamplerKind::PYLD}) {
    EXPECT_EQ(run_chain(NetworkEnergy{net}, x0, c, k).x, run_chain(NetworkEnergy{net}, x0, c, k).x);
  }
  SamplerConfig d = c;
  d.seed = 43;
  EXPECT_NE(run_chain(NetworkEnergy{net}, x0, c, SamplerKind::PYLD).x,
            run_chain(NetworkEnergy{net}, x0, d, SamplerKind::PYLD).x);
}

TEST(Chain, DivergenceCarriesWorkDone) {
  SamplerConfig c;
  Rng rng(1);
  try {
    (void)pyld_sample(Exploding{}, Tensor({4, 2}), c, rng);
    FAIL() << "expected ChainDiverged";
  } catch (const ChainDiverged& e) {
    EXPECT_EQ(e.trace().full_propagations, 8u);
    EXPECT_EQ(e.trace().first_layer_props, 8u * 5u);
  }
  EXPECT_THROW((void)pyld_sample(oracle::Quadratic{}, Tensor::vector({NAN, 0}), c, rng), ChainDiverged);
}

TEST(SamplerConfig, Validation) {
  SamplerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.epsilon = kInf;
  EXPECT_NO_THROW(c.validate());
  c.n_steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.noise_scale = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_sampler_kind("pyld"), SamplerKind::PYLD);
  EXPECT_THROW(parse_sampler_kind("hmc"), std::invalid_argument);
}

TEST(ChainTrace, CsvFormat) {
  ChainTrace t;
  t.rows.push_back({0, 1.5, 0.25, 2.0});
  std::ostringstream os;
  t.write_csv(os);
  EXPECT_EQ(os.str(), "step,energy,grad_max_abs,x_max_abs\n0,1.5,0.25,2\n");
}
