#pragma once

// Training orchestration: FP32 teacher training, PTQ, QAT, QAT with fixed
// distillation weights, and QDR (QAT + bottleneck self-distillation + LMR).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "qdr/archive.hpp"
#include "qdr/config.hpp"
#include "qdr/degrade.hpp"
#include "qdr/dfd.hpp"
#include "qdr/efm.hpp"
#include "qdr/image_io.hpp"
#include "qdr/lmr.hpp"
#include "qdr/losses.hpp"
#include "qdr/metrics.hpp"
#include "qdr/optim.hpp"

namespace qdr {

namespace fs = std::filesystem;

enum class Regime { fp32, ptq, qat, qat_kd_fixed, qdr };
enum class Balancer { none, fixed, gor, lmr };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::fp32: return "fp32";
    case Regime::ptq: return "ptq";
    case Regime::qat: return "qat";
    case Regime::qat_kd_fixed: return "qat_kd_fixed";
    case Regime::qdr: return "qdr";
  }
  return "?";
}
inline const char* to_string(Balancer b) {
  switch (b) {
    case Balancer::none: return "none";
    case Balancer::fixed: return "fixed";
    case Balancer::gor: return "gor";
    case Balancer::lmr: return "lmr";
  }
  return "?";
}
inline Regime parse_regime(const std::string& s) {
  for (auto r : {Regime::fp32, Regime::ptq, Regime::qat, Regime::qat_kd_fixed, Regime::qdr})
    if (s == to_string(r)) return r;
  throw Error("unknown regime '" + s + "'");
}
inline Balancer parse_balancer(const std::string& s) {
  for (auto b : {Balancer::none, Balancer::fixed, Balancer::gor, Balancer::lmr})
    if (s == to_string(b)) return b;
  throw Error("unknown balancer '" + s + "'");
}

struct TrainConfig {
  Regime regime = Regime::fp32;
  // model
  double scale_factor = 0.25;
  SkipMode skip_mode = SkipMode::ldg;
  FusionForm fusion = FusionForm::main;
  bool zero_init_output = false;
  // quantization
  int bits = 8;
  int calibration_batches = 16;
  bool quantize_gate_maps = true;
  /// Fake quantization switched on for quantized regimes. Turning it off is
  /// only meaningful for diagnostics such as the self-distillation null test.
  bool quant_enabled = true;
  // distillation
  DistillSite distill_site = DistillSite::bottleneck();
  TeacherMode teacher_mode = TeacherMode::self;
  bool teacher_eval_mode = true;
  Balancer balancer = Balancer::none;
  double fixed_lambda = 1.0;
  LmrOptions lmr;
  // optimization
  ReconLoss recon_loss = ReconLoss::l1_plus_ssim;
  double lr = 1e-5;
  int steps = 2000;
  int batch = 8;
  int patch = 64;
  std::uint64_t seed = 0;
  int eval_every = 0;  // 0: evaluate only at the end
  bool init_from_teacher = true;
  int log_every = 0;
  // data
  DegradationSpec degradation{DegradationKind::gaussian_noise};
  int corpus_size = 32;
  int eval_corpus_size = 16;
  int image_size = 96;
  int eval_patches = 64;
  std::string data_dir;
  std::string eval_dir;
  bool eval_luma = false;

  bool quantized() const { return regime != Regime::fp32; }
  bool distills() const { return regime == Regime::qat_kd_fixed || regime == Regime::qdr; }
  bool needs_teacher() const {
    return regime == Regime::ptq || distills() || (regime == Regime::qat && init_from_teacher);
  }

  EfmConfig model_config() const {
    EfmConfig c;
    c.scale_factor = scale_factor;
    c.skip_mode = skip_mode;
    c.fusion = fusion;
    c.zero_init_output = zero_init_output;
    return c;
  }
  QuantConfig quant_config() const {
    QuantConfig q;
    q.bits = bits;
    q.calibration_batches = calibration_batches;
    q.quantize_gate_maps = quantize_gate_maps;
    return q;
  }

  void set(const std::string& key, const std::string& v) {
    try {
      set_impl(key, v);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(key, "config key '" + key + "': " + e.what());
    }
  }

  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }

  /// Every key with its current value; `apply` of the result reproduces the
  /// configuration exactly.
  KeyValues to_key_values() const {
    auto num = [](double d) {
      std::ostringstream os;
      os << std::setprecision(17) << d;
      return os.str();
    };
    auto b = [](bool x) { return std::string(x ? "true" : "false"); };
    const auto& d = degradation;
    return {
        {"regime", to_string(regime)},
        {"scale_factor", num(scale_factor)},
        {"skip_mode", to_string(skip_mode)},
        {"fusion", to_string(fusion)},
        {"zero_init_output", b(zero_init_output)},
        {"bits", std::to_string(bits)},
        {"calibration_batches", std::to_string(calibration_batches)},
        {"quantize_gate_maps", b(quantize_gate_maps)},
        {"quant_enabled", b(quant_enabled)},
        {"distill_site", distill_site.str()},
        {"teacher_mode", teacher_mode == TeacherMode::self ? "self" : "heterogeneous"},
        {"teacher_eval_mode", b(teacher_eval_mode)},
        {"balancer", to_string(balancer)},
        {"fixed_lambda", num(fixed_lambda)},
        {"lmr_mu", num(lmr.mu)},
        {"lmr_epsilon", num(lmr.epsilon)},
        {"lmr_refresh_interval", std::to_string(lmr.refresh_interval)},
        {"lmr_clip_norm", num(lmr.clip_norm)},
        {"lmr_calibration_batches", std::to_string(lmr.calibration_batches)},
        {"lmr_lr_multiplier", num(lmr.lr_multiplier)},
        {"lmr_calibrate_quantized", b(lmr.calibrate_quantized)},
        {"recon_loss", to_string(recon_loss)},
        {"lr", num(lr)},
        {"steps", std::to_string(steps)},
        {"batch", std::to_string(batch)},
        {"patch", std::to_string(patch)},
        {"seed", std::to_string(seed)},
        {"eval_every", std::to_string(eval_every)},
        {"init", init_from_teacher ? "teacher" : "scratch"},
        {"log_every", std::to_string(log_every)},
        {"task", to_string(d.kind)},
        {"sigma", num(d.sigma)},
        {"gamma", num(d.gamma)},
        {"gain", num(d.gain)},
        {"read_noise", num(d.read_noise)},
        {"rain_density", num(d.density)},
        {"streak_length", std::to_string(d.streak_length)},
        {"angle_deg", num(d.angle_deg)},
        {"rain_intensity", num(d.intensity)},
        {"haze_beta", num(d.haze_beta)},
        {"airlight", num(d.airlight)},
        {"degradation_seed", std::to_string(d.seed)},
        {"corpus_size", std::to_string(corpus_size)},
        {"eval_corpus_size", std::to_string(eval_corpus_size)},
        {"image_size", std::to_string(image_size)},
        {"eval_patches", std::to_string(eval_patches)},
        {"data_dir", data_dir},
        {"eval_dir", eval_dir},
        {"eval_luma", b(eval_luma)},
    };
  }

  void validate() const {
    quant_config().validate();
    lmr.validate();
    model_config().validate();
    auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key, msg); };
    if (steps < 0) fail("steps", "steps must be >= 0");
    if (batch < 1) fail("batch", "batch must be >= 1");
    if (patch < 8 || patch % 8 != 0) fail("patch", "patch must be a positive multiple of 8");
    if (!(lr > 0)) fail("lr", "lr must be positive");
    if (eval_every < 0) fail("eval_every", "eval_every must be >= 0");
    if (eval_patches < 1) fail("eval_patches", "eval_patches must be >= 1");
    if (regime == Regime::fp32 && balancer != Balancer::none)
      fail("balancer", "regime fp32 uses no balancer");
    if (regime == Regime::qdr && balancer != Balancer::lmr)
      fail("balancer", "regime qdr requires balancer lmr");
    if (regime == Regime::qat_kd_fixed && balancer == Balancer::lmr)
      fail("balancer", "regime qat_kd_fixed cannot use lmr; use regime qdr");
    if ((regime == Regime::ptq || regime == Regime::qat) && balancer != Balancer::none)
      fail("balancer", std::string("regime ") + to_string(regime) + " has no distillation term");
    if (!quant_enabled && regime != Regime::qdr && regime != Regime::qat_kd_fixed)
      fail("quant_enabled", "quant_enabled=false is only accepted for distillation regimes");
  }

private:
  void set_impl(const std::string& k, const std::string& v) {
    auto& d = degradation;
    if (k == "regime") regime = parse_regime(v);
    else if (k == "scale_factor") scale_factor = parse_double(k, v);
    else if (k == "skip_mode") skip_mode = parse_skip_mode(v);
    else if (k == "fusion") fusion = parse_fusion_form(v);
    else if (k == "zero_init_output") zero_init_output = parse_bool(k, v);
    else if (k == "bits") bits = parse_int(k, v);
    else if (k == "calibration_batches") calibration_batches = parse_int(k, v);
    else if (k == "quantize_gate_maps") quantize_gate_maps = parse_bool(k, v);
    else if (k == "quant_enabled") quant_enabled = parse_bool(k, v);
    else if (k == "distill_site") distill_site = parse_distill_site(v);
    else if (k == "teacher_mode") {
      if (v == "self") teacher_mode = TeacherMode::self;
      else if (v == "heterogeneous") teacher_mode = TeacherMode::heterogeneous;
      else throw Error("expected self or heterogeneous, got '" + v + "'");
    }
    else if (k == "teacher_eval_mode") teacher_eval_mode = parse_bool(k, v);
    else if (k == "balancer") balancer = parse_balancer(v);
    else if (k == "fixed_lambda") fixed_lambda = parse_double(k, v);
    else if (k == "lmr_mu") lmr.mu = parse_double(k, v);
    else if (k == "lmr_epsilon") lmr.epsilon = parse_double(k, v);
    else if (k == "lmr_refresh_interval") lmr.refresh_interval = parse_int(k, v);
    else if (k == "lmr_clip_norm") lmr.clip_norm = parse_double(k, v);
    else if (k == "lmr_calibration_batches") lmr.calibration_batches = parse_int(k, v);
    else if (k == "lmr_lr_multiplier") lmr.lr_multiplier = parse_double(k, v);
    else if (k == "lmr_calibrate_quantized") lmr.calibrate_quantized = parse_bool(k, v);
    else if (k == "recon_loss") recon_loss = parse_recon_loss(v);
    else if (k == "lr") lr = parse_double(k, v);
    else if (k == "steps") steps = parse_int(k, v);
    else if (k == "batch") batch = parse_int(k, v);
    else if (k == "patch") patch = parse_int(k, v);
    else if (k == "seed") seed = parse_u64(k, v);
    else if (k == "eval_every") eval_every = parse_int(k, v);
    else if (k == "init") {
      if (v == "teacher") init_from_teacher = true;
      else if (v == "scratch") init_from_teacher = false;
      else throw Error("expected teacher or scratch, got '" + v + "'");
    }
    else if (k == "log_every") log_every = parse_int(k, v);
    else if (k == "task") d.kind = parse_degradation_kind(v);
    else if (k == "sigma") d.sigma = parse_double(k, v);
    else if (k == "gamma") d.gamma = parse_double(k, v);
    else if (k == "gain") d.gain = parse_double(k, v);
    else if (k == "read_noise") d.read_noise = parse_double(k, v);
    else if (k == "rain_density") d.density = parse_double(k, v);
    else if (k == "streak_length") d.streak_length = parse_int(k, v);
    else if (k == "angle_deg") d.angle_deg = parse_double(k, v);
    else if (k == "rain_intensity") d.intensity = parse_double(k, v);
    else if (k == "haze_beta") d.haze_beta = parse_double(k, v);
    else if (k == "airlight") d.airlight = parse_double(k, v);
    else if (k == "degradation_seed") d.seed = parse_u64(k, v);
    else if (k == "corpus_size") corpus_size = parse_int(k, v);
    else if (k == "eval_corpus_size") eval_corpus_size = parse_int(k, v);
    else if (k == "image_size") image_size = parse_int(k, v);
    else if (k == "eval_patches") eval_patches = parse_int(k, v);
    else if (k == "data_dir") data_dir = v;
    else if (k == "eval_dir") eval_dir = v;
    else if (k == "eval_luma") eval_luma = parse_bool(k, v);
    else throw ConfigError(k, "unknown config key '" + k + "'");
  }
};

inline json to_json(const TrainConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : c.to_key_values()) j[k] = v;
  return j;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------
// Data

/// Loads `<root>/degraded/<name>.png` + `<root>/clean/<name>.png` pairs.
inline std::vector<NamedPair> load_paired_directory(const fs::path& root) {
  const fs::path deg = root / "degraded", cln = root / "clean";
  if (!fs::is_directory(deg) || !fs::is_directory(cln))
    throw Error("paired directory '" + root.string() + "' needs degraded/ and clean/ subdirectories");
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(deg))
    if (e.path().extension() == ".png") names.push_back(e.path().filename());
  std::sort(names.begin(), names.end());
  std::vector<NamedPair> out;
  for (const auto& n : names) {
    if (!fs::exists(cln / n)) throw Error("no clean image for '" + (deg / n).string() + "'");
    out.push_back({n.stem().string(), read_png(deg / n), read_png(cln / n)});
  }
  if (out.empty()) throw Error("paired directory '" + root.string() + "' contains no PNG pairs");
  return out;
}

/// Streams derive every seed from the config seed; `tag` separates uses.
inline PatchStream make_train_stream(const TrainConfig& c, std::uint64_t tag) {
  if (!c.data_dir.empty())
    return PatchStream(load_paired_directory(c.data_dir), c.patch, c.batch, mix_seed(c.seed, tag));
  return PatchStream(procedural_corpus(c.corpus_size, c.image_size, mix_seed(c.seed, 1)),
                     {c.degradation}, c.patch, c.batch, mix_seed(c.seed, tag));
}

inline std::vector<PatchBatch> make_eval_set(const TrainConfig& c) {
  std::optional<PatchStream> s;
  const std::uint64_t seed = mix_seed(c.seed, 2);
  if (!c.data_dir.empty()) {
    const std::string dir = c.eval_dir.empty() ? c.data_dir : c.eval_dir;
    s.emplace(load_paired_directory(dir), c.patch, c.batch, seed);
  } else {
    // Held-out textures: a disjoint seed from the training corpus.
    s.emplace(procedural_corpus(c.eval_corpus_size, c.image_size, mix_seed(c.seed, 0x5eed)),
              std::vector<DegradationSpec>{c.degradation}, c.patch, c.batch, seed);
  }
  std::vector<PatchBatch> out;
  for (int have = 0; have < c.eval_patches; have += c.batch) out.push_back(s->next());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation and export

template <typename T>
EvalReport evaluate(Efm<T>& model, const std::vector<PatchBatch>& eval_set, bool luma = false) {
  EvalAccumulator acc(luma);
  for (const auto& b : eval_set) {
    Tensor<T> x = b.degraded.template cast<T>();
    auto tr = model.forward(x, ForwardContext::eval());
    Tensor<T> pred = tr.output;
    for (auto& v : pred.values()) v = std::clamp(v, T{0}, T{1});
    acc.add(pred, b.clean.template cast<T>());
  }
  return acc.report();
}

inline json to_json(const EvalReport& r) {
  json j{{"psnr_db", r.psnr_infinite ? json("inf") : json(r.psnr_db)},
         {"psnr_infinite", r.psnr_infinite},
         {"ssim", r.ssim},
         {"n_samples", r.n_samples},
         {"n_identical", r.n_identical}};
  j["fp32_recovery_pct"] = std::isnan(r.fp32_recovery_pct) ? json(nullptr) : json(r.fp32_recovery_pct);
  return j;
}

/// One entry per convolution / transposed convolution with the per-channel
/// weight scales computed from the current weights and the frozen input
/// activation scale.
template <typename T>
json export_quantization(Efm<T>& model) {
  if (!model.quant_config()) throw Error("export: model has no quantizers attached");
  const QuantConfig q = *model.quant_config();
  json layers = json::array();
  model.for_each_conv([&](auto& layer) {
    const auto& qs = layer.quantizers();
    const int axis = qs.weight->channel_axis();
    const QuantParams wp = calibrate_max(layer.weight().value, true, axis, q.bits);
    layers.push_back({{"layer_name", layer.name()},
                      {"bits", q.bits},
                      {"scheme", to_string(q.weight_scheme)},
                      {"channel_axis", axis},
                      {"scales", wp.scales},
                      {"activation",
                       {{"scheme", to_string(q.activation_scheme)},
                        {"scale", qs.input->current_params().scales.at(0)},
                        {"frozen", qs.input->frozen()}}}});
  });
  json gates = json::array();
  if (q.quantize_gate_maps && model.config().skip_mode != SkipMode::plain)
    for (int l = 1; l <= 3; ++l)
      gates.push_back({{"layer_name", "ldg" + std::to_string(l) + ".map"},
                       {"bits", q.bits},
                       {"scheme", "fixed_range"},
                       {"scales", {1.0 / qmax_for_bits(q.bits)}}});
  return {{"rounding", "half_to_even"},
          {"integer_range", "symmetric"},
          {"quant", to_json(q)},
          {"layers", layers},
          {"gate_maps", gates}};
}

// ---------------------------------------------------------------------------
// Training

/// Raised when training produced a non-finite loss.
class TrainingAborted : public Error {
public:
  TrainingAborted(long step, fs::path last_good, const std::string& what)
      : Error(what), step_(step), last_good_(std::move(last_good)) {}
  long step() const { return step_; }
  const fs::path& last_good_checkpoint() const { return last_good_; }

private:
  long step_;
  fs::path last_good_;
};

struct StepRecord {
  long step = 0;
  double l_qr = 0;
  double l_kd = 0;
  double total = 0;
  double alpha = 0;
  double beta = 0;
  double s = 1;
  double r = 1;
  double w_rec = 1;
  double w_kd = 0;
  double ema_g_rec = 0;
  double ema_g_kd = 0;
  bool refreshed = false;
};

struct TrainHooks {
  /// Called after each optimizer step with the step record and the student.
  std::function<void(const StepRecord&, Efm<float>&, const PatchBatch&)> on_step;
  /// Test-only: overrides the KD loss gradient (e.g. adversarial injection).
  std::function<void(long step, Tensor<float>& kd_grad)> perturb_kd_grad;
};

struct RunResult {
  json manifest;
  Efm<float> model;
  EvalReport report;
  std::vector<StepRecord> trace;
};

inline json environment_fingerprint() {
  json j;
#if defined(__clang__)
  j["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  j["compiler"] = std::string("gcc ") + __VERSION__;
#endif
  j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
               "." + std::to_string(EIGEN_MINOR_VERSION);
#if defined(__x86_64__)
  j["arch"] = "x86_64";
#elif defined(__aarch64__)
  j["arch"] = "aarch64";
#endif
#if defined(__AVX2__)
  j["simd"] = "avx2";
#endif
  j["float_model"] = "float32 parameters, float64 accumulators for losses";
  return j;
}

namespace detail {

inline void write_trace_header(std::ostream& os) {
  os << "step,l_qr,l_kd,total,alpha,beta,s,r,w_rec,w_kd,ema_g_rec,ema_g_kd,refreshed\n";
}
inline void write_trace_row(std::ostream& os, const StepRecord& t) {
  os << std::setprecision(10) << t.step << ',' << t.l_qr << ',' << t.l_kd << ',' << t.total << ','
     << t.alpha << ',' << t.beta << ',' << t.s << ',' << t.r << ',' << t.w_rec << ',' << t.w_kd
     << ',' << t.ema_g_rec << ',' << t.ema_g_kd << ',' << (t.refreshed ? 1 : 0) << '\n';
}

}  // namespace detail

/// Runs one training configuration and writes its artifacts under
/// `out_dir`. `teacher_ckpt` is required by ptq, qat (initialized from the
/// teacher) and the distillation regimes.
inline RunResult train(const TrainConfig& cfg, const fs::path& out_dir,
                       const std::optional<fs::path>& teacher_ckpt = std::nullopt,
                       const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.needs_teacher() && !teacher_ckpt)
    throw ConfigError("teacher", std::string("regime ") + to_string(cfg.regime) +
                                     " requires a teacher checkpoint");
  const auto t_start = std::chrono::steady_clock::now();
  fs::create_directories(out_dir / "checkpoints");
  const EfmConfig mcfg = cfg.model_config();

  // Teacher and student construction.
  std::optional<Efm<float>> teacher_model;
  if (teacher_ckpt && cfg.needs_teacher()) teacher_model = load_checkpoint<float>(*teacher_ckpt).model;

  Efm<float> student;
  if (teacher_model && cfg.init_from_teacher) {
    if (teacher_model->config().architecture_hash() != mcfg.architecture_hash())
      throw ConfigError("init", "cannot initialize the student from a teacher with a different "
                                "architecture: " + teacher_model->config().architecture_signature() +
                                " vs " + mcfg.architecture_signature());
    student = *teacher_model;
    student.detach_quantizers();
  } else {
    student = Efm<float>(mcfg, mix_seed(cfg.seed, 4));
  }

  std::optional<Teacher<float>> teacher;
  if (cfg.distills()) {
    TeacherOptions to;
    to.mode = cfg.teacher_mode;
    to.eval_mode = cfg.teacher_eval_mode;
    to.site = cfg.distill_site;
    to.with_adapter = cfg.teacher_mode == TeacherMode::heterogeneous;
    to.adapter_seed = mix_seed(cfg.seed, 6);
    teacher.emplace(make_teacher(*teacher_model, mcfg, to));
  }

  if (cfg.quantized()) {
    attach_quantizers(student, cfg.quant_config());
    student.set_quant_enabled(cfg.quant_enabled);
  }

  PatchStream stream = make_train_stream(cfg, 3);
  const std::vector<PatchBatch> eval_set = make_eval_set(cfg);

  ParamRefs<float> params = student.parameters();
  if (teacher && teacher->adapter()) teacher->adapter()->collect(params);
  AdamOptions aopt;
  aopt.lr = cfg.lr;
  Adam<float> opt(params, aopt);
  AdamOptions sopt = aopt;
  sopt.lr = cfg.lr * cfg.lmr.lr_multiplier;
  ScalarAdam scalar_opt(2, sopt);

  json counters{{"teacher_forwards", 0}, {"gradient_updates", 0}, {"norm_computations", 0},
                {"calibration_batches", 0}};
  std::vector<StepRecord> trace;
  std::ofstream trace_csv(out_dir / "trace.csv");
  detail::write_trace_header(trace_csv);
  std::ofstream metrics_csv(out_dir / "metrics.csv");
  metrics_csv << "step,psnr_db,ssim,n_samples,psnr_infinite\n";
  json checkpoints = json::array();
  fs::path last_good = out_dir / "checkpoints" / "initial.ckpt";

  auto ckpt_extra = [&](long step) {
    return json{{"step", step}, {"regime", to_string(cfg.regime)}};
  };
  save_checkpoint(last_good, student, ckpt_extra(0));
  checkpoints.push_back(fs::relative(last_good, out_dir).string());

  // Loss pieces shared by all regimes. Returns {L_QR, grad wrt output}.
  auto recon = [&](const EfmTrace<float>& tr, const PatchBatch& b) {
    return reconstruction_loss(tr.output, b.clean, cfg.recon_loss);
  };
  struct KdTerm {
    double value = 0;
    Tensor<float> grad;  // d L_KD / d F_student
    Tensor<float> teacher_site;
  };
  auto kd = [&](const EfmTrace<float>& st, const Tensor<float>& x) {
    KdTerm k;
    auto tt = teacher->forward(x);
    const Tensor<float>& fs = site_features(st, cfg.distill_site);
    Tensor<float> ft = site_features(tt, cfg.distill_site);
    if (teacher->adapter()) ft = teacher->adapter()->forward(ft);
    if (!(fs.shape() == ft.shape()))
      throw Error("kd_loss: student features " + fs.shape().str() + " and teacher features " +
                  ft.shape().str() + " differ at site " + cfg.distill_site.str());
    auto l = mse_loss(fs, ft);
    k.value = l.value;
    k.grad = std::move(l.grad);
    k.teacher_site = std::move(ft);
    return k;
  };
  // Backward of (w_rec * L_QR + w_kd * L_KD) into the student (and adapter).
  auto backward = [&](const Tensor<float>& g_rec, double w_rec, const KdTerm* k, double w_kd) {
    Tensor<float> go;
    if (w_rec != 0) {
      go = g_rec;
      go *= static_cast<float>(w_rec);
    }
    SiteGrads<float> sg;
    if (k && w_kd != 0) {
      Tensor<float> g = k->grad;
      g *= static_cast<float>(w_kd);
      if (teacher->adapter()) {
        Tensor<float> ga = g;
        ga *= -1.0f;
        teacher->adapter()->backward(ga);
      }
      inject_site_grad(sg, go, cfg.distill_site, std::move(g));
    }
    student.backward(go, sg);
  };
  auto zero_all = [&] {
    for (auto* p : params) p->zero_grad();
  };

  // ---- PTQ: calibration only.
  if (cfg.regime == Regime::ptq) {
    for (int i = 0; i < cfg.calibration_batches; ++i) {
      const PatchBatch b = stream.next();
      student.forward(b.degraded, ForwardContext::calibrate());
    }
    counters["calibration_batches"] = cfg.calibration_batches;
  }

  // ---- LMR initialization (gradient-norm calibration).
  std::optional<LmrState> lmr;
  GorState gor;
  if (cfg.balancer == Balancer::lmr) {
    PatchStream cal = make_train_stream(cfg, 5);
    const bool q_on = cfg.quant_enabled && cfg.lmr.calibrate_quantized;
    student.set_quant_enabled(q_on);
    lmr = lmr_init(
        [&](int) {
          const PatchBatch b = cal.next();
          auto tr = student.forward(b.degraded, ForwardContext::frozen_batch_stats());
          auto lr_ = recon(tr, b);
          auto k = kd(tr, b.degraded);
          zero_all();
          backward(lr_.grad, 1.0, nullptr, 0.0);
          const double g_rec = grad_norm(params);
          zero_all();
          backward(Tensor<float>(), 0.0, &k, 1.0);
          const double g_kd = grad_norm(params);
          zero_all();
          return std::pair{g_rec, g_kd};
        },
        cfg.lmr.calibration_batches, cfg.lmr);
    student.set_quant_enabled(cfg.quant_enabled);
  }

  // ---- Main loop.
  const bool trains = cfg.regime != Regime::ptq;
  auto run_eval = [&](long step) {
    EvalReport r = evaluate(student, eval_set, cfg.eval_luma);
    metrics_csv << step << ',' << std::setprecision(10) << r.psnr_db << ',' << r.ssim << ','
                << r.n_samples << ',' << (r.psnr_infinite ? 1 : 0) << '\n';
    metrics_csv.flush();
    return r;
  };

  auto abort_run = [&](long t) {
    json m{{"status", "aborted"}, {"step", t}, {"last_good_checkpoint", last_good.string()}};
    std::ofstream(out_dir / "abort.json") << m.dump(2);
    throw TrainingAborted(t, last_good,
                          "non-finite loss at step " + std::to_string(t) +
                              "; last good checkpoint " + last_good.string());
  };

  for (long t = 1; trains && t <= cfg.steps; ++t) {
    try {
      const PatchBatch b = stream.next();
      auto tr = student.forward(b.degraded, ForwardContext::train());
      if (!all_finite(std::span<const float>(tr.output.values()))) abort_run(t);
      auto rl = recon(tr, b);
      StepRecord rec;
      rec.step = t;
      rec.l_qr = rl.value;
      std::optional<KdTerm> k;
      if (teacher) {
        k = kd(tr, b.degraded);
        if (hooks.perturb_kd_grad) hooks.perturb_kd_grad(t, k->grad);
        rec.l_kd = k->value;
      }

      double w_rec = 1, w_kd = 0;
      switch (cfg.balancer) {
        case Balancer::none:
          w_kd = teacher ? 1.0 : 0.0;
          break;
        case Balancer::fixed: w_kd = cfg.fixed_lambda; break;
        case Balancer::gor: {
          rec.total = gor.combine(rec.l_qr, rec.l_kd);
          w_rec = gor.w_rec();
          w_kd = gor.w_kd();
          rec.alpha = gor.lambda_rec;
          rec.beta = gor.lambda_kd;
          break;
        }
        case Balancer::lmr: {
          if (lmr_refresh_due(*lmr, t)) {
            // Two extra backward passes on the current batch.
            zero_all();
            backward(rl.grad, 1.0, nullptr, 0.0);
            const double g_rec = grad_norm(params);
            zero_all();
            backward(Tensor<float>(), 0.0, &*k, 1.0);
            const double g_kd = grad_norm(params);
            rec.refreshed = lmr_refresh(*lmr, g_rec, g_kd);
          }
          const auto c = lmr_combine(*lmr, rec.l_qr, rec.l_kd);
          rec.total = c.total;
          w_rec = c.weights.w_rec;
          w_kd = c.weights.w_kd;
          rec.s = c.weights.s;
          rec.r = c.weights.r;
          break;
        }
      }
      if (cfg.balancer != Balancer::lmr && cfg.balancer != Balancer::gor)
        rec.total = w_rec * rec.l_qr + w_kd * rec.l_kd;
      rec.w_rec = w_rec;
      rec.w_kd = w_kd;

      if (!std::isfinite(rec.total)) abort_run(t);

      zero_all();
      backward(rl.grad, w_rec, k ? &*k : nullptr, w_kd);
      opt.step();
      // Quantized forwards reject non-finite weights, so catch them here.
      for (auto* p : params)
        if (!all_finite(std::span<const float>(p->value.values()))) abort_run(t);

      if (cfg.balancer == Balancer::lmr) {
        lmr_clip_grads(*lmr);
        scalar_opt.step({&lmr->alpha, &lmr->beta}, {lmr->grad_alpha, lmr->grad_beta});
        lmr_post_step(*lmr);
        rec.alpha = lmr->alpha;
        rec.beta = lmr->beta;
        rec.ema_g_rec = lmr->ema_g_rec;
        rec.ema_g_kd = lmr->ema_g_kd;
      } else if (cfg.balancer == Balancer::gor) {
        scalar_opt.step({&gor.lambda_rec, &gor.lambda_kd}, {gor.grad_rec, gor.grad_kd});
      }

      detail::write_trace_row(trace_csv, rec);
      trace.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec, student, b);
      if (cfg.log_every > 0 && t % cfg.log_every == 0)
        std::fprintf(stderr, "[%s] step %ld  L_QR %.5f  L_KD %.6f  total %.5f\n",
                     to_string(cfg.regime), t, rec.l_qr, rec.l_kd, rec.total);

      if (cfg.eval_every > 0 && t % cfg.eval_every == 0 && t < cfg.steps) {
        run_eval(t);
        char name[48];
        std::snprintf(name, sizeof name, "step_%06ld.ckpt", t);
        last_good = out_dir / "checkpoints" / name;
        save_checkpoint(last_good, student, ckpt_extra(t));
        checkpoints.push_back(fs::relative(last_good, out_dir).string());
      }
    } catch (const NonFiniteError&) {
      abort_run(t);
    }
  }
  trace_csv.flush();

  const long steps_done = trains ? cfg.steps : 0;
  EvalReport report = run_eval(steps_done);
  std::optional<EvalReport> fp32_report;
  if (teacher_model && cfg.quantized() && teacher_model->config().architecture_hash() ==
                                              mcfg.architecture_hash()) {
    Efm<float> ref = *teacher_model;
    ref.detach_quantizers();
    fp32_report = evaluate(ref, eval_set, cfg.eval_luma);
    if (fp32_report->psnr_db != 0 && !report.psnr_infinite && !fp32_report->psnr_infinite)
      report.fp32_recovery_pct = recovery(report, *fp32_report);
  }

  const fs::path final_ckpt = out_dir / "checkpoints" / "final.ckpt";
  save_checkpoint(final_ckpt, student, ckpt_extra(steps_done));
  checkpoints.push_back(fs::relative(final_ckpt, out_dir).string());

  counters["teacher_forwards"] = teacher ? teacher->forward_count() : 0;
  counters["gradient_updates"] = opt.steps();
  counters["norm_computations"] = lmr ? lmr->norm_computations : 0;

  json manifest;
  manifest["status"] = "completed";
  manifest["config"] = to_json(cfg);
  manifest["model"] = to_json(mcfg);
  manifest["parameter_count"] = student.parameter_count();
  manifest["environment"] = environment_fingerprint();
  manifest["teacher_checkpoint"] =
      teacher_ckpt && cfg.needs_teacher() ? json(fs::absolute(*teacher_ckpt).string()) : json(nullptr);
  manifest["checkpoints"] = checkpoints;
  manifest["final_checkpoint"] = fs::relative(final_ckpt, out_dir).string();
  manifest["trace"] = "trace.csv";
  manifest["metrics_csv"] = "metrics.csv";
  manifest["final_metrics"] = to_json(report);
  if (fp32_report) manifest["fp32_reference_metrics"] = to_json(*fp32_report);
  manifest["counters"] = counters;
  manifest["data"] = {{"train_stream_seed", mix_seed(cfg.seed, 3)},
                      {"eval_seed", mix_seed(cfg.seed, 2)},
                      {"source", cfg.data_dir.empty() ? "procedural" : "paired_directory"},
                      {"degradation", to_json(cfg.degradation)}};
  manifest["recon_loss"] = to_string(cfg.recon_loss);
  manifest["rounding"] = "half_to_even";
  if (lmr)
    manifest["lmr"] = {{"alpha", lmr->alpha},         {"beta", lmr->beta},
                       {"ema_g_rec", lmr->ema_g_rec}, {"ema_g_kd", lmr->ema_g_kd},
                       {"refreshes", lmr->refreshes}, {"skipped_refreshes", lmr->skipped_refreshes},
                       {"kd_inactive", lmr->kd_inactive}};
  if (cfg.quantized()) {
    std::ofstream(out_dir / "quant_export.json") << export_quantization(student).dump(2);
    manifest["quant_export"] = "quant_export.json";
  }
  manifest["wall_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  std::ofstream(out_dir / "manifest.json") << manifest.dump(2);

  return {manifest, std::move(student), report, std::move(trace)};
}

/// Re-runs a completed run from its manifest into `out_dir`.
inline RunResult rerun_from_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
  std::ifstream in(manifest_path);
  if (!in) throw Error("cannot read manifest '" + manifest_path.string() + "'");
  const json m = json::parse(in);
  const TrainConfig cfg = train_config_from_json(m.at("config"));
  std::optional<fs::path> teacher;
  if (m.contains("teacher_checkpoint") && !m["teacher_checkpoint"].is_null())
    teacher = m["teacher_checkpoint"].get<std::string>();
  return train(cfg, out_dir, teacher);
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationCell {
  std::string name;
  TrainConfig config;
};

struct AblationRow {
  std::string name;
  EvalReport report;
  fs::path run_dir;
};

/// Trains every cell into `<out_dir>/<cell>` and writes `<out_dir>/ablation.csv`.
inline std::vector<AblationRow> ablate(const std::vector<AblationCell>& cells, const fs::path& out_dir,
                                       const std::optional<fs::path>& teacher_ckpt) {
  fs::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (const auto& c : cells) {
    const fs::path dir = out_dir / c.name;
    auto r = train(c.config, dir, teacher_ckpt);
    rows.push_back({c.name, r.report, dir});
  }
  std::ofstream csv(out_dir / "ablation.csv");
  csv << "cell,psnr_db,ssim,n_samples\n";
  for (const auto& r : rows)
    csv << r.name << ',' << std::setprecision(10) << r.report.psnr_db << ',' << r.report.ssim << ','
        << r.report.n_samples << '\n';
  return rows;
}

/// Builds one cell per value of `key`, all other settings shared.
inline std::vector<AblationCell> ablation_axis(const TrainConfig& base, const std::string& key,
                                               const std::vector<std::string>& values) {
  std::vector<AblationCell> cells;
  for (const auto& v : values) {
    TrainConfig c = base;
    c.set(key, v);
    cells.push_back({key + "=" + v, c});
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Alignment report files

inline void write_alignment(const fs::path& dir, const std::vector<SiteAlignment>& sites) {
  fs::create_directories(dir);
  json summary = json::array();
  for (const auto& s : sites) {
    std::ofstream csv(dir / (s.site + ".csv"));
    csv << "bin_lo,bin_hi,student_count,teacher_count,divergence\n";
    for (std::size_t i = 0; i < s.student_counts.size(); ++i)
      csv << std::setprecision(10) << s.bin_edges[i] << ',' << s.bin_edges[i + 1] << ','
          << s.student_counts[i] << ',' << s.teacher_counts[i] << ',' << s.divergence << '\n';
    plot_histograms(dir / (s.site + ".png"), s.student_counts, s.teacher_counts);
    summary.push_back({{"site", s.site},
                       {"divergence", s.divergence},
                       {"correlation", s.correlation},
                       {"mean_abs_deviation", s.mean_abs_deviation},
                       {"rms_deviation", s.rms_deviation},
                       {"relative_deviation", s.relative_deviation}});
  }
  std::ofstream(dir / "summary.json") << summary.dump(2);
}

}  // namespace qdr
