#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "qdr/trainer.hpp"

using namespace qdr;

namespace {

// Tiny enough that a step takes a few milliseconds.
TrainConfig tiny(Regime r) {
  TrainConfig c;
  c.regime = r;
  c.scale_factor = 0.125;
  c.patch = 16;
  c.batch = 2;
  c.corpus_size = 4;
  c.eval_corpus_size = 2;
  c.image_size = 32;
  c.eval_patches = 4;
  c.steps = 6;
  c.lr = 1e-3;
  c.calibration_batches = 2;
  c.lmr.calibration_batches = 2;
  if (r == Regime::qdr) c.balancer = Balancer::lmr;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class TrainerTest : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("qdr_trainer_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    auto c = tiny(Regime::fp32);
    c.steps = 4;
    train(c, root_ / "teacher");
    teacher_ = root_ / "teacher" / "checkpoints" / "final.ckpt";
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path dir(const std::string& name) { return root_ / name; }

  static inline fs::path root_;
  static inline fs::path teacher_;
};

}  // namespace

TEST(TrainConfig, UnknownKeyNamesTheKey) {
  TrainConfig c;
  try {
    c.set("learning_rate", "1e-4");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "learning_rate");
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(c.set("bits", "eight"), ConfigError);
  EXPECT_THROW(c.set("init", "random"), ConfigError);
}

TEST(TrainConfig, KeyValuesRoundTrip) {
  TrainConfig a = tiny(Regime::qdr);
  a.set("lr", "3.3e-5");
  a.set("task", "rain_streaks");
  a.set("distill_site", "decoder_2");
  a.set("init", "scratch");
  TrainConfig b;
  b.apply(a.to_key_values());
  EXPECT_EQ(b.to_key_values(), a.to_key_values());
  EXPECT_EQ(b.lr, 3.3e-5);
  EXPECT_EQ(b.distill_site, DistillSite::decoder(2));
  EXPECT_FALSE(b.init_from_teacher);
  EXPECT_EQ(train_config_from_json(to_json(a)).to_key_values(), a.to_key_values());
}

TEST(TrainConfig, RegimeAndBalancerRules) {
  auto c = tiny(Regime::qdr);
  c.balancer = Balancer::fixed;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Regime::qat);
  c.balancer = Balancer::fixed;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Regime::qat);
  c.quant_enabled = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Regime::fp32);
  c.patch = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Regime::qat_kd_fixed);
  c.balancer = Balancer::lmr;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(tiny(Regime::qdr).validate());
}

TEST_F(TrainerTest, MissingTeacherIsAConfigError) {
  try {
    train(tiny(Regime::ptq), dir("no_teacher"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "teacher");
  }
}

TEST_F(TrainerTest, ZeroStepRunWritesArtifacts) {
  auto c = tiny(Regime::fp32);
  c.steps = 0;
  const auto r = train(c, dir("zero"));
  EXPECT_TRUE(r.trace.empty());
  EXPECT_TRUE(fs::exists(dir("zero") / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir("zero") / "checkpoints" / "final.ckpt"));
  EXPECT_EQ(r.manifest["status"], "completed");
  EXPECT_EQ(r.manifest["counters"]["gradient_updates"], 0);
  EXPECT_EQ(r.report.n_samples, 4);
}

TEST_F(TrainerTest, RegimesOnlyDoWhatTheyClaim) {
  const auto ptq = train(tiny(Regime::ptq), dir("ptq"), teacher_);
  EXPECT_EQ(ptq.manifest["counters"]["gradient_updates"], 0);
  EXPECT_EQ(ptq.manifest["counters"]["calibration_batches"], 2);
  EXPECT_EQ(ptq.manifest["counters"]["teacher_forwards"], 0);
  EXPECT_TRUE(ptq.trace.empty());

  const auto qat = train(tiny(Regime::qat), dir("qat"), teacher_);
  EXPECT_EQ(qat.manifest["counters"]["teacher_forwards"], 0);
  EXPECT_EQ(qat.manifest["counters"]["gradient_updates"], 6);
  for (const auto& t : qat.trace) EXPECT_EQ(t.l_kd, 0.0);

  const auto fixed = train(tiny(Regime::qat_kd_fixed), dir("kd_fixed"), teacher_);
  EXPECT_EQ(fixed.manifest["counters"]["teacher_forwards"], 6);
  EXPECT_EQ(fixed.manifest["counters"]["norm_computations"], 0);
}

TEST_F(TrainerTest, QdrRefreshCadence) {
  auto c = tiny(Regime::qdr);
  c.steps = 120;
  c.lr = 1e-4;
  const auto r = train(c, dir("cadence"), teacher_);
  EXPECT_EQ(r.manifest["counters"]["norm_computations"], 2 + 120 / 50);
  ASSERT_EQ(r.trace.size(), 120u);
  for (std::size_t i = 0; i < r.trace.size(); ++i) {
    const auto& t = r.trace[i];
    EXPECT_EQ(t.refreshed, t.step % 50 == 0) << t.step;
    if (i > 0 && !t.refreshed) {
      EXPECT_EQ(t.ema_g_rec, r.trace[i - 1].ema_g_rec) << t.step;
      EXPECT_EQ(t.ema_g_kd, r.trace[i - 1].ema_g_kd) << t.step;
    }
    // Weights follow the balancer's closed form.
    EXPECT_NEAR(t.w_rec, t.r / t.s, 1e-12 * t.w_rec);
    EXPECT_NEAR(t.w_rec * t.w_kd, 1.0, 1e-12);
  }
  // The trace file carries the same rows.
  std::ifstream csv(dir("cadence") / "trace.csv");
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 120);
}

TEST_F(TrainerTest, SelfTeacherWithoutQuantizationHasZeroKd) {
  auto c = tiny(Regime::qdr);
  c.quant_enabled = false;
  c.teacher_eval_mode = false;
  c.steps = 3;
  const auto r = train(c, dir("self"), teacher_);
  ASSERT_EQ(r.trace.size(), 3u);
  EXPECT_EQ(r.trace[0].l_kd, 0.0);
  // No distillation signal at calibration, so the balancer keeps only L_QR.
  EXPECT_TRUE(r.manifest["lmr"]["kd_inactive"].get<bool>());
  for (const auto& t : r.trace) {
    EXPECT_EQ(t.w_kd, 0.0);
    EXPECT_EQ(t.total, t.l_qr);
  }
}

TEST_F(TrainerTest, NonFiniteGradientAbortsWithLastGoodCheckpoint) {
  auto c = tiny(Regime::qdr);
  c.eval_every = 2;
  TrainHooks hooks;
  hooks.perturb_kd_grad = [](long step, Tensor<float>& g) {
    if (step == 3) g[0] = std::numeric_limits<float>::quiet_NaN();
  };
  try {
    train(c, dir("nan"), teacher_, hooks);
    FAIL();
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.step(), 3);
    EXPECT_EQ(e.last_good_checkpoint().filename(), "step_000002.ckpt");
    EXPECT_TRUE(fs::exists(e.last_good_checkpoint()));
    EXPECT_NO_THROW(load_checkpoint<float>(e.last_good_checkpoint()));
  }
  std::ifstream in(dir("nan") / "abort.json");
  ASSERT_TRUE(in);
  const auto j = json::parse(in);
  EXPECT_EQ(j["status"], "aborted");
  EXPECT_EQ(j["step"], 3);
  EXPECT_FALSE(fs::exists(dir("nan") / "manifest.json"));
}

TEST_F(TrainerTest, DeterministicAndRerunnable) {
  auto c = tiny(Regime::qdr);
  const std::string before = slurp(teacher_);
  const auto a = train(c, dir("det_a"), teacher_);
  const auto b = train(c, dir("det_b"), teacher_);
  EXPECT_EQ(slurp(dir("det_a") / "trace.csv"), slurp(dir("det_b") / "trace.csv"));
  EXPECT_EQ(a.report.psnr_db, b.report.psnr_db);
  const auto again = rerun_from_manifest(dir("det_a") / "manifest.json", dir("det_c"));
  EXPECT_EQ(again.report.psnr_db, a.report.psnr_db);
  EXPECT_EQ(slurp(teacher_), before);
}

TEST_F(TrainerTest, ExportListsEveryConvolution) {
  const auto r = train(tiny(Regime::ptq), dir("export"), teacher_);
  std::ifstream in(dir("export") / "quant_export.json");
  const auto j = json::parse(in);
  ASSERT_EQ(j["layers"].size(), 42u);
  for (const auto& l : j["layers"]) {
    EXPECT_EQ(l["bits"], 8);
    EXPECT_TRUE(l["activation"]["frozen"].get<bool>()) << l["layer_name"];
    EXPECT_GT(l["scales"].size(), 0u);
  }
  EXPECT_EQ(j["gate_maps"].size(), 3u);
}

TEST_F(TrainerTest, RecoveryReportedAgainstTeacher) {
  const auto r = train(tiny(Regime::ptq), dir("recovery"), teacher_);
  ASSERT_TRUE(r.manifest.contains("fp32_reference_metrics"));
  const double fp = r.manifest["fp32_reference_metrics"]["psnr_db"].get<double>();
  EXPECT_NEAR(r.report.fp32_recovery_pct, 100 * r.report.psnr_db / fp, 1e-9);
}

TEST_F(TrainerTest, OverflowingActivationsAbort) {
  auto c = tiny(Regime::qat);
  c.lr = 1e20;
  c.steps = 20;
  EXPECT_THROW(train(c, dir("overflow"), teacher_), TrainingAborted);
  EXPECT_TRUE(fs::exists(dir("overflow") / "abort.json"));
}
