#include <gtest/gtest.h>

#include <cmath>

#include "jempp/jempp.hpp"
#include "oracles.hpp"

using namespace jempp;

namespace {

// logits = W x + b through a dense first layer and an identity body layer.
SplitNetwork linear_model(const std::vector<double>& W, const std::vector<double>& b, std::size_t in) {
  const std::size_t C = b.size();
  Rng rng(1);
  SplitNetwork net({in}, parse_architecture("dense:" + std::to_string(C) + ",dense:" + std::to_string(C)), rng);
  net.first_layer().weights = Tensor({C, in}, W);
  net.first_layer().biases = Tensor({C}, b);
  Tensor I({C, C});
  for (std::size_t k = 0; k < C; ++k) I[k * C + k] = 1.0;
  net.body()[0].weights = I;
  net.body()[0].biases = Tensor({C});
  return net;
}

Dataset labeled(const Tensor& x, std::vector<int> y, std::size_t classes) {
  Dataset d;
  d.sample_shape = Shape(x.shape().begin() + 1, x.shape().end());
  d.num_classes = classes;
  d.x = x;
  d.y = std::move(y);
  return d;
}

std::vector<ScoredPrediction> random_preds(Rng& rng, std::size_t n) {
  std::vector<ScoredPrediction> p(n);
  for (auto& s : p) {
    // Mix exact bucket edges in with continuous values.
    s.confidence = rng.uniform01() < 0.2 ? static_cast<double>(rng.index(21)) / 20.0 : rng.uniform01();
    s.predicted = static_cast<int>(rng.index(3));
    s.truth = static_cast<int>(rng.index(3));
  }
  return p;
}

}  // namespace

TEST(Accuracy, Examples) {
  const SplitNetwork net = linear_model({1, 0, -1, 0}, {0, 0}, 2);
  const Tensor x({4, 2}, std::vector<double>{1, 0, 2, 5, -1, 0, -3, 1});
  EXPECT_EQ(accuracy(net, labeled(x, {0, 0, 1, 1}, 2)), 1.0);
  const SplitNetwork constant = linear_model({0, 0, 0, 0}, {1, 0}, 2);
  EXPECT_EQ(accuracy(constant, labeled(x, {0, 1, 0, 1}, 2)), 0.5);
  for (const auto& p : predict(constant, labeled(x, {0, 1, 0, 1}, 2))) {
    EXPECT_GE(p.confidence, 0.5);
    EXPECT_LE(p.confidence, 1.0);
  }
}

TEST(Ece, Examples) {
  std::vector<ScoredPrediction> all_right(10, {1.0, 1, 1});
  EXPECT_EQ(ece(all_right), 0.0);
  std::vector<ScoredPrediction> half(10, {1.0, 1, 1});
  for (int i = 0; i < 5; ++i) half[i].truth = 0;
  EXPECT_DOUBLE_EQ(ece(half), 0.5);
  EXPECT_THROW(ece(std::vector<ScoredPrediction>{}), std::invalid_argument);
}

TEST(Ece, BucketEdges) {
  EXPECT_EQ(ece_bucket(0.0, 20), 0u);
  EXPECT_EQ(ece_bucket(0.05, 20), 0u);
  EXPECT_EQ(ece_bucket(std::nextafter(0.05, 1.0), 20), 1u);
  EXPECT_EQ(ece_bucket(0.1, 20), 1u);
  EXPECT_EQ(ece_bucket(0.15, 20), 2u);
  EXPECT_EQ(ece_bucket(1.0, 20), 19u);
  for (int m = 1; m <= 20; ++m) EXPECT_EQ(ece_bucket(m / 20.0, 20), static_cast<std::size_t>(m - 1));
}

TEST(Ece, MatchesDoubleLoopOracle) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_preds(rng, 1 + rng.index(1000));
    const std::size_t M = t % 4 == 0 ? 20 : 1 + rng.index(30);
    const double e = ece(p, M);
    EXPECT_NEAR(e, oracle::ece(p, M), 1e-12);
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
  }
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{1, 2, 3}, std::vector<double>{-1, 0}), 1.0);
  const std::vector<double> s{0.3, 0.1, 0.7, 0.7};
  EXPECT_EQ(auroc(s, s), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{}, s), std::invalid_argument);
}

TEST(Auroc, MatchesPairwiseOracleAndIsAntisymmetric) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(1 + rng.index(500)), b(1 + rng.index(500));
    // Coarse grids force ties.
    const bool coarse = t % 2 == 0;
    for (double& v : a) v = coarse ? static_cast<double>(rng.index(10)) : rng.normal() + 0.5;
    for (double& v : b) v = coarse ? static_cast<double>(rng.index(10)) : rng.normal();
    EXPECT_NEAR(auroc(a, b), oracle::auroc(a, b), 1e-12);
    EXPECT_EQ(auroc(a, b) + auroc(b, a), 1.0);
  }
}

TEST(Auroc, InvariantUnderIncreasingTransform) {
  Rng rng(3);
  std::vector<double> a(300), b(200);
  for (double& v : a) v = rng.normal() + 1.0;
  for (double& v : b) v = rng.normal();
  auto f = [](std::vector<double> v) {
    for (double& x : v) x = std::exp(0.5 * x) + 3.0;
    return v;
  };
  EXPECT_EQ(auroc(a, b), auroc(f(a), f(b)));
}

TEST(OodScores, Examples) {
  Rng rng(4);
  const Tensor x = oracle::random_tensor({6, 3}, rng);
  const Dataset d = labeled(x, std::vector<int>(6, 0), 10);
  const SplitNetwork flat = linear_model(std::vector<double>(30, 0.0), std::vector<double>(10, 0.0), 3);
  for (double s : ood_scores(flat, d, OodScore::MaxSoftmax)) EXPECT_NEAR(s, 0.1, 1e-15);

  std::vector<double> W(6);
  for (double& w : W) w = rng.normal();
  const SplitNetwork a = linear_model(W, {0.0, 0.0}, 3), b = linear_model(W, {2.5, 2.5}, 3);
  const auto sa = ood_scores(a, d, OodScore::LogDensity), sb = ood_scores(b, d, OodScore::LogDensity);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(sb[i] - sa[i], 2.5, 1e-12);
    EXPECT_NEAR(sa[i], -energy(a, Tensor({3}, std::vector<double>(x.row(i).begin(), x.row(i).end())),
                               BnMode::EvalRunningStats), 1e-15);
  }
  const Dataset other = labeled(oracle::random_tensor({5, 3}, rng, -3, 3), std::vector<int>(5, 0), 10);
  EXPECT_EQ(auroc(sa, ood_scores(a, other, OodScore::LogDensity)), auroc(sb, ood_scores(b, other, OodScore::LogDensity)));
}

TEST(Pgd, RadiusZeroIsIdentity) {
  const SplitNetwork net = oracle::random_net({4}, "dense:6,relu,dense:3", 2);
  Rng rng(1);
  const Tensor x = oracle::random_tensor({5, 4}, rng, -0.5, 0.5);
  const std::vector<int> y{0, 1, 2, 0, 1};
  for (AttackNorm n : {AttackNorm::Linf, AttackNorm::L2}) {
    AttackConfig c;
    c.norm = n;
    c.radius = 0.0;
    EXPECT_EQ(pgd_attack(net, x, y, c), x);
  }
}

TEST(Pgd, BallConstraintHoldsExactly) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const SplitNetwork net = oracle::random_net({1, 3, 3}, "conv:2,bn,relu,dense:3", 50 + t);
    const Tensor x = oracle::random_tensor({6, 1, 3, 3}, rng, -0.9, 0.9);
    std::vector<int> y(6);
    for (int& v : y) v = static_cast<int>(rng.index(3));
    for (AttackNorm n : {AttackNorm::Linf, AttackNorm::L2}) {
      AttackConfig c;
      c.norm = n;
      c.radius = rng.uniform(1e-3, 0.7);
      c.step_size = c.radius / 3.0;
      c.steps = 10;
      c.seed = static_cast<std::uint64_t>(t);
      const Tensor adv = pgd_attack(net, x, y, c);
      for (std::size_t b = 0; b < 6; ++b) {
        double linf = 0.0, l2 = 0.0;
        for (std::size_t i = 0; i < 9; ++i) {
          const double d = adv.row(b)[i] - x.row(b)[i];
          linf = std::max(linf, std::abs(d));
          l2 += d * d;
          EXPECT_GE(adv.row(b)[i], c.domain_lo);
          EXPECT_LE(adv.row(b)[i], c.domain_hi);
        }
        if (n == AttackNorm::Linf) {
          EXPECT_LE(linf, c.radius);
        } else {
          EXPECT_LE(std::sqrt(l2), c.radius);
        }
      }
    }
  }
}

TEST(Pgd, OneStepLinfIsFgsmOnLinearModel) {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> W(2 * 5);
    for (double& w : W) w = rng.normal();
    const SplitNetwork net = linear_model(W, {rng.normal(), rng.normal()}, 5);
    const Tensor x = oracle::random_tensor({5}, rng, -0.5, 0.5);
    const int y = static_cast<int>(rng.index(2));
    AttackConfig c;
    c.radius = 0.1;
    c.step_size = 0.1;
    c.steps = 1;
    c.random_start = false;
    const Tensor adv = pgd_attack(net, x, std::vector<int>{y}, c);
    for (std::size_t i = 0; i < 5; ++i) {
      const double dir = W[(1 - y) * 5 + i] - W[y * 5 + i];
      EXPECT_DOUBLE_EQ(adv[i], x[i] + 0.1 * (dir > 0 ? 1.0 : -1.0));
    }
  }
}

TEST(Pgd, RejectsBadConfig) {
  const SplitNetwork net = oracle::random_net({2}, "dense:3,relu,dense:2", 1);
  AttackConfig c;
  c.steps = 0;
  EXPECT_THROW(pgd_attack(net, Tensor::vector({0, 0}), std::vector<int>{0}, c), std::invalid_argument);
  c = {};
  c.radius = -1.0;
  EXPECT_THROW(pgd_attack(net, Tensor::vector({0, 0}), std::vector<int>{0}, c), std::invalid_argument);
}

TEST(RobustAccuracy, RadiusZeroEqualsClean) {
  const Dataset d = make_two_moons(200, 0.1, 3);
  const SplitNetwork net = oracle::random_net({2}, "dense:8,bn,relu,dense:2", 3);
  AttackConfig c;
  c.radius = 0.0;
  EXPECT_EQ(robust_accuracy(net, d, c), accuracy(net, d));
}

TEST(RobustAccuracy, SuccessIsMonotoneInRadius) {
  // Linear model with a single fixed-sign gradient direction: without a
  // random start each larger ball reaches at least as far along it.
  const SplitNetwork net = linear_model({1.0, 0.5, -1.0, -0.5}, {0, 0}, 2);
  Rng rng(5);
  const Tensor x = oracle::random_tensor({200, 2}, rng, -0.6, 0.6);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) y[i] = x.row(i)[0] + 0.5 * x.row(i)[1] > 0 ? 0 : 1;
  const Dataset d = labeled(x, y, 2);
  std::vector<bool> prev(200, false);
  for (double r : {0.0, 0.05, 0.1, 0.2, 0.4}) {
    AttackConfig c;
    c.radius = r;
    c.step_size = r / 4.0;
    c.steps = 8;
    c.random_start = false;
    const Tensor adv = pgd_attack(net, x, y, c);
    const Tensor logits = forward_logits(net, adv, BnMode::EvalRunningStats);
    for (std::size_t i = 0; i < 200; ++i) {
      const bool fooled = (logits.row(i)[0] > logits.row(i)[1] ? 0 : 1) != y[i];
      if (prev[i]) {
        EXPECT_TRUE(fooled) << "radius " << r << " sample " << i;
      }
      prev[i] = fooled;
    }
  }
}
