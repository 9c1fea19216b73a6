#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "qdr/degrade.hpp"
#include "qdr/losses.hpp"
#include "qdr/metrics.hpp"

using namespace qdr;

namespace {

Tensor<double> noise_image(Shape s, std::uint64_t seed, double lo = 0, double hi = 1) {
  Rng rng(seed);
  Tensor<double> t(s);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Direct 2D-window SSIM, written independently of the separable version.
double ssim_reference(const Tensor<double>& a, const Tensor<double>& b) {
  const int k = 11;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double w[k][k], wsum = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
      wsum += w[i][j];
    }
  const Shape s = a.shape();
  double total = 0;
  long count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y + k <= s.h; ++y)
        for (int x = 0; x + k <= s.w; ++x) {
          double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const double ww = w[i][j] / wsum;
              const double p = a(n, c, y + i, x + j), q = b(n, c, y + i, x + j);
              mx += ww * p;
              my += ww * q;
              xx += ww * p * p;
              yy += ww * q * q;
              xy += ww * p * q;
            }
          const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
          total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return total / count;
}

EvalReport report_with(double db, int n = 64) {
  EvalReport r;
  r.psnr_db = db;
  r.n_samples = n;
  return r;
}

}  // namespace

TEST(Psnr, ClosedForms) {
  const Shape s{1, 3, 8, 8};
  EXPECT_NEAR(psnr(Tensor<double>(s, 0.0), Tensor<double>(s, 1.0)).db, 0.0, 1e-12);
  EXPECT_NEAR(psnr(Tensor<double>(s, 0.4), Tensor<double>(s, 0.5)).db, 20.0, 1e-9);
  EXPECT_NEAR(psnr(Tensor<double>(s, 0.0), Tensor<double>(s, 0.5), 255.0).db,
              10 * std::log10(255.0 * 255.0 / 0.25), 1e-9);
  const auto img = noise_image(s, 1);
  const auto v = psnr(img, img);
  EXPECT_TRUE(v.infinite);
  EXPECT_TRUE(std::isinf(v.db));
}

TEST(Psnr, MatchesBruteForce) {
  const auto a = noise_image(Shape{2, 3, 5, 7}, 2), b = noise_image(Shape{2, 3, 5, 7}, 3);
  double sq = 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 7; ++x) sq += std::pow(a(n, c, y, x) - b(n, c, y, x), 2);
  EXPECT_NEAR(psnr(a, b).db, 10 * std::log10(1.0 / (sq / 210)), 1e-10);
}

TEST(Psnr, DecreasesWithNoiseLevel) {
  const auto img = procedural_texture(64, 5);
  double prev = HUGE_VAL;
  for (double sigma : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    DegradationSpec s;
    s.kind = DegradationKind::gaussian_noise;
    s.sigma = sigma;
    s.seed = 3;
    const double db = psnr(apply_degradation(img, s), img).db;
    EXPECT_LT(db, prev) << sigma;
    prev = db;
  }
}

TEST(Ssim, SelfIsOneAndMatchesReference) {
  const auto a = noise_image(Shape{2, 2, 20, 17}, 4);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  auto b = a;
  Rng rng(5);
  for (auto& v : b.values()) v = std::clamp(v + 0.1 * rng.normal(), 0.0, 1.0);
  EXPECT_NEAR(ssim(a, b), ssim_reference(a, b), 1e-12);
  EXPECT_LT(ssim(a, b), 1.0);
}

TEST(Ssim, ConstantImagesClosedForm) {
  const Shape s{1, 1, 16, 16};
  for (auto [p, q] : {std::pair{0.2, 0.7}, std::pair{0.5, 0.5}, std::pair{0.0, 1.0}}) {
    const double c1 = 1e-4;
    EXPECT_NEAR(ssim(Tensor<double>(s, p), Tensor<double>(s, q)),
                (2 * p * q + c1) / (p * p + q * q + c1), 1e-12);
  }
}

TEST(Ssim, SymmetryFlipsAndInverse) {
  const auto a = noise_image(Shape{1, 3, 24, 24}, 6), b = noise_image(Shape{1, 3, 24, 24}, 7);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
  auto flip = [](const Tensor<double>& t) {
    Tensor<double> f(t.shape());
    const Shape s = t.shape();
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) f(0, c, y, x) = t(0, c, y, s.w - 1 - x);
    return f;
  };
  EXPECT_NEAR(ssim(flip(a), flip(b)), ssim(a, b), 1e-12);
  // Structure is anti-correlated with the inverted image.
  Tensor<double> inv = a;
  for (auto& v : inv.values()) v = 1 - v;
  EXPECT_LT(ssim(a, inv), 0.0);
}

TEST(Ssim, SmallerThanWindowIsAnError) {
  EXPECT_THROW(ssim(Tensor<double>(Shape{1, 1, 8, 8}), Tensor<double>(Shape{1, 1, 8, 8})), Error);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  auto a = noise_image(Shape{1, 2, 14, 13}, 8);
  const auto b = noise_image(Shape{1, 2, 14, 13}, 9);
  const auto [value, grad] = ssim_with_grad(a, b);
  EXPECT_NEAR(value, ssim(a, b), 1e-14);
  for (std::size_t i : qdr::testing::sample_indices(a.size(), 60, 1)) {
    // Border pixels sit under few windows, so their gradients are tiny and the
    // difference quotient's roundoff (~1e-10) needs an absolute allowance.
    const double fd = qdr::testing::central_diff(a, i, [&] { return ssim(a, b); });
    EXPECT_NEAR(grad[i], fd, 1e-6 * std::abs(fd) + 1e-9) << i;
  }
}

TEST(ReconstructionLoss, L1PlusSsimGradient) {
  auto a = noise_image(Shape{1, 3, 12, 12}, 10);
  const auto b = noise_image(Shape{1, 3, 12, 12}, 11);
  const auto lv = reconstruction_loss(a, b, ReconLoss::l1_plus_ssim);
  double l1 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) l1 += std::abs(a[i] - b[i]);
  EXPECT_NEAR(lv.value, l1 / a.size() + 1 - ssim(a, b), 1e-12);
  for (std::size_t i : qdr::testing::sample_indices(a.size(), 30, 2)) {
    const double fd = qdr::testing::central_diff(
        a, i, [&] { return reconstruction_loss(a, b, ReconLoss::l1_plus_ssim).value; });
    EXPECT_LT(qdr::testing::rel_err(lv.grad[i], fd), 1e-6) << i;
  }
  Tensor<double> bad = a;
  bad[3] = std::nan("");
  EXPECT_THROW(reconstruction_loss(bad, b, ReconLoss::l1), Error);
}

TEST(Recovery, ReportedRatio) {
  EXPECT_NEAR(recovery(report_with(28.60), report_with(29.64)), 96.49, 0.005);
  EXPECT_DOUBLE_EQ(recovery(report_with(30), report_with(30)), 100.0);
  EXPECT_THROW(recovery(report_with(28.6, 10), report_with(29.64, 64)), Error);
}

TEST(EvalAccumulator, MeanOverImagesAndIdenticalCount) {
  const Shape s{1, 3, 16, 16};
  EvalAccumulator acc;
  acc.add(Tensor<double>(s, 0.4), Tensor<double>(s, 0.5));
  acc.add(Tensor<double>(s, 0.49), Tensor<double>(s, 0.5));
  auto r = acc.report();
  EXPECT_NEAR(r.psnr_db, 30.0, 1e-9);
  EXPECT_EQ(r.n_samples, 2);
  EXPECT_FALSE(r.psnr_infinite);

  EvalAccumulator same;
  const auto img = noise_image(Shape{3, 3, 16, 16}, 12);
  same.add(img, img);
  r = same.report();
  EXPECT_TRUE(r.psnr_infinite);
  EXPECT_EQ(r.n_identical, 3);
  EXPECT_NEAR(r.ssim, 1.0, 1e-12);
}

TEST(EvalAccumulator, LumaMode) {
  const Shape s{1, 3, 16, 16};
  Tensor<double> a(s, 0.5), b(s, 0.5);
  for (int i = 0; i < 256; ++i) b.plane(0, 2)[i] = 0.6;  // blue carries 0.114 of luma
  EvalAccumulator acc(true);
  acc.add(a, b);
  EXPECT_NEAR(acc.report().psnr_db, 10 * std::log10(1 / std::pow(0.0114, 2)), 1e-6);
}
