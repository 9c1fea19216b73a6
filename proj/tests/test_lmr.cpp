#include <gtest/gtest.h>

#include <cmath>

#include "qdr/lmr.hpp"
#include "qdr/optim.hpp"
#include "qdr/rng.hpp"

using namespace qdr;

namespace {

LmrState seeded(double g_rec, double g_kd, LmrOptions opt = {}) {
  return lmr_init_from_norms({g_rec}, {g_kd}, opt);
}

}  // namespace

TEST(LmrInit, SymmetricNormsGiveEqualHalfWeights) {
  for (double g : {1e-6, 0.3, 1.0, 250.0}) {
    const auto st = seeded(g, g);
    EXPECT_EQ(st.alpha, std::log(0.5));
    EXPECT_EQ(st.beta, std::log(0.5));
    const auto w = lmr_weights(st);
    EXPECT_EQ(w.r, 1.0);
    EXPECT_NEAR(w.s, 1.0, 1e-11 / g);
  }
  // s(0) = sqrt(g / (g + eps)) sits within eps / 2g of one.
  EXPECT_LE(std::abs(lmr_weights(seeded(2.0, 2.0)).s - 1.0), 1e-12 / 4 + 1e-16);
}

TEST(LmrInit, InverseWeighting) {
  const auto st = seeded(3.0, 1.0);
  EXPECT_NEAR(st.alpha, std::log(0.25), 1e-15);
  EXPECT_NEAR(st.beta, std::log(0.75), 1e-15);
  EXPECT_NEAR(st.lambda_rec() / st.lambda_kd(), 1.0 / 3.0, 1e-15);
  EXPECT_LT(st.lambda_rec(), st.lambda_kd());
}

TEST(LmrInit, MeansOverBatches) {
  std::vector<std::pair<double, double>> norms{{1, 4}, {3, 2}, {2, 3}};
  const auto st = lmr_init([&](int i) { return norms[i]; }, 3, {});
  EXPECT_DOUBLE_EQ(st.ema_g_rec, 2.0);
  EXPECT_DOUBLE_EQ(st.ema_g_kd, 3.0);
  EXPECT_EQ(st.norm_computations, 3);
  EXPECT_EQ(st.options.calibration_batches, 3);
}

TEST(LmrInit, BadNormNamesBatch) {
  for (double bad : {0.0, -1.0, std::nan(""), HUGE_VAL}) {
    try {
      lmr_init_from_norms({1, bad, 1}, {1, 1, 1}, {});
      FAIL();
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find("batch 1"), std::string::npos) << e.what();
    }
    if (bad == 0.0) continue;
    EXPECT_THROW(lmr_init_from_norms({1, 1, 1}, {1, bad, 1}, {}), Error) << bad;
  }
  EXPECT_THROW(lmr_init([](int) { return std::pair{1.0, 1.0}; }, 0, {}), Error);
}

// L_rec = 1/2 theta^T A theta - b^T theta and L_kd = |theta - c|^2 at the
// calibration points theta_i; norms are checked against the closed forms.
TEST(LmrInit, QuadraticToyNorms) {
  const double A[2][2] = {{3, 1}, {1, 2}}, b[2] = {1, -1}, c[2] = {0.5, 2};
  const std::vector<std::array<double, 2>> thetas{{0, 0}, {1, 2}, {-1.5, 0.25}};
  Param<double> theta("theta", Shape{2, 1, 1, 1});
  auto norms = [&](int i) {
    theta.value[0] = thetas[i][0];
    theta.value[1] = thetas[i][1];
    ParamRefs<double> ps{&theta};
    for (int k = 0; k < 2; ++k)
      theta.grad[k] = A[k][0] * theta.value[0] + A[k][1] * theta.value[1] - b[k];
    const double g_rec = grad_norm(ps);
    for (int k = 0; k < 2; ++k) theta.grad[k] = 2 * (theta.value[k] - c[k]);
    return std::pair{g_rec, grad_norm(ps)};
  };
  double sr = 0, sk = 0;
  for (const auto& t : thetas) {
    const double r0 = 3 * t[0] + t[1] - 1, r1 = t[0] + 2 * t[1] + 1;
    sr += std::sqrt(r0 * r0 + r1 * r1);
    sk += 2 * std::sqrt((t[0] - 0.5) * (t[0] - 0.5) + (t[1] - 2) * (t[1] - 2));
  }
  const auto st = lmr_init(norms, 3, {});
  EXPECT_NEAR(st.ema_g_rec, sr / 3, 1e-6);
  EXPECT_NEAR(st.ema_g_kd, sk / 3, 1e-6);
  EXPECT_NEAR(st.alpha, std::log(st.ema_g_kd / (st.ema_g_rec + st.ema_g_kd)), 1e-15);
}

TEST(LmrRefresh, Examples) {
  LmrOptions opt;
  opt.mu = 0;
  auto st = seeded(1, 1, opt);
  EXPECT_TRUE(lmr_refresh(st, 0.7, 5.0));
  EXPECT_EQ(st.ema_g_rec, 0.7);
  EXPECT_EQ(st.ema_g_kd, 5.0);

  st = seeded(1, 1);
  lmr_refresh(st, 2, 2);
  EXPECT_NEAR(st.ema_g_rec, 1.1, 1e-15);
  EXPECT_NEAR(st.ema_g_kd, 1.1, 1e-15);
}

TEST(LmrRefresh, ClosedFormGeometricConvergence) {
  const double g0 = 0.2, g = 3.5, mu = 0.9;
  auto st = seeded(g0, g0);
  for (int k = 1; k <= 300; ++k) {
    lmr_refresh(st, g, g);
    const double closed = g + std::pow(mu, k) * (g0 - g);
    ASSERT_NEAR(st.ema_g_rec, closed, 1e-12) << k;
    ASSERT_NEAR(st.ema_g_kd, closed, 1e-12) << k;
  }
  EXPECT_NEAR(st.ema_g_rec, g, 1e-12);
}

TEST(LmrRefresh, NonFiniteNormKeepsBuffers) {
  auto st = seeded(1.5, 2.5);
  for (double bad : {std::nan(""), HUGE_VAL, 0.0, -2.0}) {
    EXPECT_FALSE(lmr_refresh(st, 1.0, bad));
    EXPECT_EQ(st.ema_g_rec, 1.5);
    EXPECT_EQ(st.ema_g_kd, 2.5);
  }
  EXPECT_EQ(st.skipped_refreshes, 4);
  EXPECT_EQ(st.refreshes, 0);
}

TEST(LmrRefresh, CadenceIsOneBasedMultiplesOfInterval) {
  auto st = seeded(1, 1);
  int due = 0;
  for (long t = 1; t <= 1234; ++t) {
    const bool d = lmr_refresh_due(st, t);
    EXPECT_EQ(d, t % 50 == 0);
    due += d;
  }
  EXPECT_EQ(due, 1234 / 50);
}

TEST(LmrCombine, Examples) {
  auto st = seeded(2, 2);
  auto c = lmr_combine(st, 0.3, 0.7);
  EXPECT_NEAR(c.total, 1.0, 1e-12);

  LmrOptions opt;
  opt.epsilon = 1e-300;
  st = seeded(1, 4, opt);
  st.alpha = st.beta = -0.2;
  c = lmr_combine(st, 0.5, 0.25);
  EXPECT_DOUBLE_EQ(c.weights.s, 2.0);
  EXPECT_DOUBLE_EQ(c.total, 0.5 / 2 + 2 * 0.25);

  LmrState blank;
  EXPECT_THROW(lmr_combine(blank, 1, 1), Error);
  st = seeded(1, 1);
  EXPECT_THROW(lmr_combine(st, -1, 1), Error);
  EXPECT_THROW(lmr_combine(st, 1, std::nan("")), Error);
}

TEST(LmrCombine, GradientsMatchFiniteDifferences) {
  auto st = seeded(0.8, 1.7);
  st.alpha = -0.4;
  st.beta = -1.1;
  const double lr = 0.37, lk = 1.9, h = 1e-6;
  lmr_combine(st, lr, lk);
  const double ga = st.grad_alpha, gb = st.grad_beta;
  auto total = [&](double a, double b) {
    LmrState s = st;
    s.alpha = a;
    s.beta = b;
    return lmr_combine(s, lr, lk).total;
  };
  EXPECT_NEAR(ga, (total(-0.4 + h, -1.1) - total(-0.4 - h, -1.1)) / (2 * h), 1e-8);
  EXPECT_NEAR(gb, (total(-0.4, -1.1 + h) - total(-0.4, -1.1 - h)) / (2 * h), 1e-8);
}

TEST(LmrCombine, ScaleResponseIsSqrtTwo) {
  auto st = seeded(1.3, 0.6);
  st.alpha = -0.3;
  const auto w0 = lmr_weights(st);
  st.ema_g_kd *= 2;
  const auto w1 = lmr_weights(st);
  EXPECT_NEAR(w1.w_kd / w0.w_kd, std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(w0.w_rec / w1.w_rec, std::sqrt(2.0), 1e-12);
}

TEST(LmrPostStep, FloorClipAndZeroGradient) {
  auto st = seeded(1, 1);
  st.alpha = -50;
  st.beta = -0.1;
  lmr_post_step(st);
  EXPECT_EQ(st.alpha, std::log(1e-4));
  EXPECT_EQ(st.beta, -0.1);
  EXPECT_EQ(st.step, 1);

  st.grad_alpha = 3;
  st.grad_beta = -4;
  lmr_clip_grads(st);
  EXPECT_NEAR(std::hypot(st.grad_alpha, st.grad_beta), 1.0, 1e-15);
  EXPECT_NEAR(st.grad_alpha, 0.6, 1e-15);

  st.grad_alpha = 0.1;
  st.grad_beta = 0.2;
  lmr_clip_grads(st);
  EXPECT_EQ(st.grad_alpha, 0.1);

  ScalarAdam adam(2, {.lr = 1e-2});
  const double a = st.alpha, b = st.beta;
  adam.step({&st.alpha, &st.beta}, {0.0, 0.0});
  EXPECT_EQ(st.alpha, a);
  EXPECT_EQ(st.beta, b);
}

TEST(LmrPostStep, HugeKdGradientStaysPositiveAndFinite) {
  auto st = seeded(1, 1);
  ScalarAdam adam(2, {.lr = 1e-3});
  for (int i = 0; i < 100; ++i) {
    lmr_combine(st, 0.1, 1e6);
    lmr_clip_grads(st);
    adam.step({&st.alpha, &st.beta}, {st.grad_alpha, st.grad_beta});
    lmr_post_step(st);
    ASSERT_TRUE(std::isfinite(st.lambda_kd()));
    ASSERT_GT(st.lambda_kd(), 0.0);
    ASSERT_GE(st.beta, std::log(1e-4));
  }
}

// Long run with random losses, adversarial spikes and corrupted norms.
TEST(LmrStress, InvariantsHoldOverFiveThousandSteps) {
  Rng rng(2024);
  auto st = seeded(0.5, 2.0);
  ScalarAdam adam(2, {.lr = 5e-2});
  const double fl = std::log(1e-4);
  long refresh_calls = 0;
  for (long t = 1; t <= 5000; ++t) {
    double lr = rng.uniform(0, 1), lk = rng.uniform(0, 1);
    if (t % 97 == 0) lk *= 1e6;
    if (t % 131 == 0) lr *= 1e6;
    if (lmr_refresh_due(st, t)) {
      ++refresh_calls;
      double gr = rng.uniform(1e-3, 10), gk = rng.uniform(1e-3, 10);
      if (t % 450 == 0) gk = 1e6;
      if (t % 700 == 0) gr = std::nan("");
      lmr_refresh(st, gr, gk);
    }
    const auto c = lmr_combine(st, lr, lk);
    ASSERT_NEAR(c.weights.w_rec * c.weights.w_kd, 1.0, 1e-12) << t;
    lmr_clip_grads(st);
    ASSERT_LE(std::hypot(st.grad_alpha, st.grad_beta), 1.0 + 1e-12);
    adam.step({&st.alpha, &st.beta}, {st.grad_alpha, st.grad_beta});
    lmr_post_step(st);
    ASSERT_GE(st.alpha, fl);
    ASSERT_GE(st.beta, fl);
    ASSERT_GT(st.lambda_rec(), 0.0);
    ASSERT_GT(st.lambda_kd(), 0.0);
    ASSERT_TRUE(std::isfinite(st.alpha) && std::isfinite(st.beta));
    ASSERT_GT(st.ema_g_rec, 0.0);
    ASSERT_GT(st.ema_g_kd, 0.0);
  }
  EXPECT_EQ(refresh_calls, 100);
  EXPECT_EQ(st.norm_computations, 1 + 100);
  EXPECT_EQ(st.step, 5000);
}

TEST(Gor, RawLambdasCanFlipSign) {
  GorState g;
  EXPECT_DOUBLE_EQ(g.combine(0.5, 0.25), 0.75);
  // One plain gradient step on the raw coefficient walks through zero,
  // which the log-space parameterization rules out.
  g.combine(3.0, 0.01);
  EXPECT_NEAR(g.grad_rec, 3.0 - 0.01, 1e-15);
  g.lambda_rec -= 0.5 * g.grad_rec;
  EXPECT_LT(g.lambda_rec, 0.0);
  EXPECT_LT(g.w_rec(), 0.0);

  auto st = seeded(1, 1);
  lmr_combine(st, 3.0, 0.01);
  st.alpha -= 0.5 * st.grad_alpha;
  lmr_post_step(st);
  EXPECT_GT(st.lambda_rec(), 0.0);
}

TEST(LmrInit, ZeroDistillationNormStaysReconstructionOnly) {
  auto st = lmr_init_from_norms({2, 3}, {0, 0}, {});
  EXPECT_TRUE(st.kd_inactive);
  const auto c = lmr_combine(st, 0.7, 0.4);
  EXPECT_EQ(c.weights.w_rec, 1.0);
  EXPECT_EQ(c.weights.w_kd, 0.0);
  EXPECT_EQ(c.total, 0.7);
  EXPECT_EQ(st.grad_alpha, 0.0);
  EXPECT_EQ(st.grad_beta, 0.0);
  // One zero among positive norms is an ordinary calibration.
  EXPECT_FALSE(lmr_init_from_norms({1, 1}, {0, 2}, {}).kd_inactive);
}
