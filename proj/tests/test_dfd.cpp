#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "qdr/dfd.hpp"

using namespace qdr;

namespace {

EfmConfig desk_config() {
  EfmConfig cfg;
  cfg.scale_factor = 0.25;
  return cfg;
}

Tensor<float> probe(int n, int side, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x(Shape{n, 3, side, side});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  return x;
}

EfmTrace<double> trace_with_bottleneck(Tensor<double> b) {
  EfmTrace<double> t;
  t.bottleneck = std::move(b);
  return t;
}

std::vector<float> snapshot(Efm<float>& m) {
  std::vector<float> out;
  for (auto* p : m.parameters()) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  m.for_each_bn([&](auto& bn) {
    for (double v : bn.running_mean()) out.push_back(static_cast<float>(v));
    for (double v : bn.running_var()) out.push_back(static_cast<float>(v));
  });
  return out;
}

}  // namespace

TEST(KdLoss, Examples) {
  const Shape s{1, 1, 1, 4};
  const Tensor<double> ft(s, std::vector<double>{0.5, -1.0, 2.0, 0.25});
  EXPECT_EQ(kd_loss(trace_with_bottleneck(ft), trace_with_bottleneck(ft), DistillSite::bottleneck()),
            0.0);
  Tensor<double> shifted = ft;
  for (auto& v : shifted.values()) v += 0.3;
  EXPECT_NEAR(kd_loss(trace_with_bottleneck(shifted), trace_with_bottleneck(ft),
                      DistillSite::bottleneck()),
              0.09, 1e-15);
  const Tensor<double> fs(s, std::vector<double>{1.0, 0.0, -2.0, 0.75});
  const double brute = (0.25 + 1.0 + 16.0 + 0.25) / 4.0;
  EXPECT_DOUBLE_EQ(
      kd_loss(trace_with_bottleneck(fs), trace_with_bottleneck(ft), DistillSite::bottleneck()),
      brute);
}

TEST(KdLoss, ShapeMismatchIsAnError) {
  EXPECT_THROW(kd_loss(trace_with_bottleneck(Tensor<double>(Shape{1, 2, 2, 2})),
                       trace_with_bottleneck(Tensor<double>(Shape{1, 4, 2, 2})),
                       DistillSite::bottleneck()),
               Error);
}

TEST(KdLoss, GradientClosedFormMatchesFiniteDifferences) {
  const auto fs0 = qdr::testing::projection(Shape{2, 3, 2, 2}, 1);
  const auto ft = qdr::testing::projection(Shape{2, 3, 2, 2}, 2);
  const auto lv = mse_loss(fs0, ft);
  const double n = static_cast<double>(fs0.size());
  Tensor<double> fs = fs0;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    EXPECT_NEAR(lv.grad[i], 2 * (fs0[i] - ft[i]) / n, 1e-15);
    const double fd = qdr::testing::central_diff(fs, i, [&] { return mse_loss(fs, ft).value; });
    EXPECT_LT(qdr::testing::rel_err(lv.grad[i], fd), 1e-7);
  }
}

TEST(DistillSite, ParseAndFeatures) {
  EXPECT_EQ(parse_distill_site("bottleneck"), DistillSite::bottleneck());
  EXPECT_EQ(parse_distill_site("decoder_2"), DistillSite::decoder(2));
  EXPECT_EQ(DistillSite::decoder(3).str(), "decoder_3");
  EXPECT_THROW(parse_distill_site("decoder_4"), Error);
  EXPECT_THROW(parse_distill_site("encoder"), Error);
}

TEST(Teacher, SelfTeacherGivesZeroKdWithQuantizationOff) {
  Efm<float> student(desk_config(), 7);
  auto teacher = make_teacher(Efm<float>(student), student.config());
  attach_quantizers(student, QuantConfig{});
  student.set_quant_enabled(false);
  const auto x = probe(2, 32, 1);
  for (int k = 0; k < 3; ++k) {
    const auto ts = teacher.forward(x);
    const auto ss = student.forward(x, ForwardContext::eval());
    EXPECT_EQ(kd_loss(ss, ts, DistillSite::bottleneck()), 0.0);
    for (int l = 1; l <= 3; ++l) EXPECT_EQ(kd_loss(ss, ts, DistillSite::decoder(l)), 0.0);
  }
  // Batch statistics on both sides also agree exactly.
  teacher.set_eval_mode(false);
  EXPECT_EQ(kd_loss(student.forward(x, ForwardContext::frozen_batch_stats()), teacher.forward(x),
                    DistillSite::bottleneck()),
            0.0);
  EXPECT_EQ(teacher.forward_count(), 4);
}

TEST(Teacher, ArchitectureMismatchNamesShapes) {
  Efm<float> other(EfmConfig{.scale_factor = 0.5}, 1);
  try {
    make_teacher(std::move(other), desk_config());
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("w=32,48,64,128"), std::string::npos) << msg;
    EXPECT_NE(msg.find("w=16,24,32,64"), std::string::npos) << msg;
  }
  TeacherOptions opt;
  opt.mode = TeacherMode::heterogeneous;
  try {
    make_teacher(Efm<float>(EfmConfig{.scale_factor = 0.5}, 1), desk_config(), opt);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(N,128,H,W)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(N,64,H,W)"), std::string::npos) << msg;
  }
  opt.with_adapter = true;
  auto t = make_teacher(Efm<float>(EfmConfig{.scale_factor = 0.5}, 1), desk_config(), opt);
  ASSERT_TRUE(t.adapter().has_value());
  EXPECT_EQ(t.adapter()->in_channels(), 128);
  EXPECT_EQ(t.adapter()->out_channels(), 64);
}

TEST(Teacher, ForwardLeavesTeacherUntouched) {
  Efm<float> model(desk_config(), 3);
  const auto before = snapshot(model);
  auto teacher = make_teacher(Efm<float>(model), model.config(), {.eval_mode = false});
  const auto x = probe(2, 32, 2);
  const auto a = teacher.forward(x).output;
  const auto b = teacher.forward(x).output;
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
  EXPECT_EQ(snapshot(teacher.model()), before);
}

TEST(Teacher, LoadedTwiceIsDeterministic) {
  Efm<float> model(desk_config(), 5);
  auto t1 = make_teacher(Efm<float>(model), model.config());
  auto t2 = make_teacher(Efm<float>(model), model.config());
  const auto x = probe(1, 32, 3);
  const auto a = t1.forward(x).output, b = t2.forward(x).output;
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Alignment, IdenticalModelsAlignPerfectly) {
  Efm<float> model(desk_config(), 4);
  Efm<float> copy(model);
  const auto sites = alignment_report(model, copy, probe(2, 32, 4));
  ASSERT_EQ(sites.size(), 4u);
  EXPECT_EQ(sites[0].site, "bottleneck");
  EXPECT_EQ(sites[3].site, "decoder_1");
  for (const auto& s : sites) {
    EXPECT_NEAR(s.divergence, 0.0, 1e-15) << s.site;
    EXPECT_NEAR(s.correlation, 1.0, 1e-12) << s.site;
    EXPECT_EQ(s.rms_deviation, 0.0);
    EXPECT_EQ(s.bin_edges.size(), 65u);
  }
}

TEST(Alignment, EmptyProbeIsAnError) {
  Efm<float> a(desk_config(), 1), b(desk_config(), 1);
  EXPECT_THROW(alignment_report(a, b, Tensor<float>{}), Error);
}

TEST(Alignment, CoarserGridDivergesMore) {
  Efm<float> fp32(desk_config(), 6);
  const auto x = probe(4, 32, 5);
  std::vector<double> div;
  for (int bits : {8, 2}) {
    Efm<float> q(fp32);
    QuantConfig qc;
    qc.bits = bits;
    qc.calibration_batches = 1;
    attach_quantizers(q, qc);
    q.forward(x, ForwardContext::calibrate());
    div.push_back(alignment_report(q, fp32, x)[0].divergence);
  }
  EXPECT_GT(div[1], div[0]);
}

TEST(Alignment, SymmetricKlReference) {
  const std::vector<long> a{3, 1, 0, 0}, b{1, 1, 1, 1};
  const double e = 1e-8, norm = 1 + 4 * e;
  double ref = 0;
  const double pa[4] = {0.75, 0.25, 0, 0};
  for (int i = 0; i < 4; ++i) {
    const double p = (pa[i] + e) / norm, q = (0.25 + e) / norm;
    ref += p * std::log(p / q) + q * std::log(q / p);
  }
  EXPECT_NEAR(symmetric_kl(a, b), ref, 1e-12);
  EXPECT_EQ(symmetric_kl(a, a), 0.0);
}
