#pragma once

// Self-distillation from a frozen full-precision copy of the student, with
// the feature loss applied at a single site (the bottleneck by default).

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qdr/efm.hpp"
#include "qdr/losses.hpp"

namespace qdr {

struct DistillSite {
  enum class Kind { bottleneck, decoder, output };
  Kind kind = Kind::bottleneck;
  int level = 0;  // 1..3 for decoder sites

  static DistillSite bottleneck() { return {Kind::bottleneck, 0}; }
  static DistillSite decoder(int level) {
    if (level < 1 || level > 3) throw Error("decoder site level must be 1, 2 or 3");
    return {Kind::decoder, level};
  }
  static DistillSite output() { return {Kind::output, 0}; }

  std::string str() const {
    switch (kind) {
      case Kind::bottleneck: return "bottleneck";
      case Kind::decoder: return "decoder_" + std::to_string(level);
      case Kind::output: return "output";
    }
    return "?";
  }
  bool operator==(const DistillSite&) const = default;
};

inline DistillSite parse_distill_site(const std::string& s) {
  if (s == "bottleneck") return DistillSite::bottleneck();
  if (s == "output") return DistillSite::output();
  if (s.rfind("decoder_", 0) == 0 && s.size() == 9 && s[8] >= '1' && s[8] <= '3')
    return DistillSite::decoder(s[8] - '0');
  throw Error("unknown distillation site '" + s + "'");
}

template <typename T>
const Tensor<T>& site_features(const EfmTrace<T>& trace, const DistillSite& site) {
  switch (site.kind) {
    case DistillSite::Kind::bottleneck: return trace.bottleneck;
    case DistillSite::Kind::decoder:
      return trace.decoder_features.at(static_cast<std::size_t>(site.level - 1));
    case DistillSite::Kind::output: return trace.output;
  }
  throw Error("invalid site");
}

/// Places a feature gradient at `site` for Efm::backward. Output-site
/// gradients are returned through `grad_output` instead.
template <typename T>
void inject_site_grad(SiteGrads<T>& grads, Tensor<T>& grad_output, const DistillSite& site,
                      Tensor<T> g) {
  switch (site.kind) {
    case DistillSite::Kind::bottleneck: grads.bottleneck = std::move(g); break;
    case DistillSite::Kind::decoder:
      grads.decoder.at(static_cast<std::size_t>(site.level - 1)) = std::move(g);
      break;
    case DistillSite::Kind::output:
      if (grad_output.empty())
        grad_output = std::move(g);
      else
        grad_output += g;
      break;
  }
}

/// mean((F_s - F_t)^2) at `site`.
template <typename T>
double kd_loss(const EfmTrace<T>& student, const EfmTrace<T>& teacher, const DistillSite& site) {
  const auto& fs = site_features(student, site);
  const auto& ft = site_features(teacher, site);
  if (!(fs.shape() == ft.shape()))
    throw Error("kd_loss: student features " + fs.shape().str() + " and teacher features " +
                ft.shape().str() + " differ at site " + site.str());
  return mse(fs, ft);
}

/// Teacher-to-student 1x1 channel adapter for heterogeneous distillation.
template <typename T>
class FeatureAdapter {
public:
  FeatureAdapter(int teacher_channels, int student_channels, std::uint64_t seed)
      : conv_("adapter", teacher_channels, student_channels, 1, 1, true) {
    Rng rng(seed);
    conv_.init(rng);
  }
  Tensor<T> forward(const Tensor<T>& f) { return conv_.forward(f, ForwardContext::eval()); }
  void backward(const Tensor<T>& g) { conv_.backward(g); }
  void collect(ParamRefs<T>& out) { conv_.collect(out); }
  int in_channels() const { return conv_.in_channels(); }
  int out_channels() const { return conv_.out_channels(); }

private:
  Conv2d<T> conv_;
};

enum class TeacherMode { self, heterogeneous };

/// Frozen full-precision teacher. Forward passes never touch its stored
/// statistics, and no gradient is ever propagated into it.
template <typename T>
class Teacher {
public:
  Teacher(Efm<T> model, TeacherMode mode, bool eval_mode)
      : model_(std::move(model)), mode_(mode), eval_mode_(eval_mode) {
    model_.detach_quantizers();
  }

  EfmTrace<T> forward(const Tensor<T>& x) {
    ++forward_count_;
    return model_.forward(x, eval_mode_ ? ForwardContext::eval()
                                        : ForwardContext::frozen_batch_stats());
  }

  Efm<T>& model() { return model_; }
  TeacherMode mode() const { return mode_; }
  bool eval_mode() const { return eval_mode_; }
  void set_eval_mode(bool on) { eval_mode_ = on; }
  long forward_count() const { return forward_count_; }

  std::optional<FeatureAdapter<T>>& adapter() { return adapter_; }

private:
  Efm<T> model_;
  TeacherMode mode_;
  bool eval_mode_;
  long forward_count_ = 0;
  std::optional<FeatureAdapter<T>> adapter_;
};

struct TeacherOptions {
  TeacherMode mode = TeacherMode::self;
  bool eval_mode = true;
  DistillSite site = DistillSite::bottleneck();
  /// Heterogeneous mode only: add a trainable 1x1 adapter when the site
  /// widths differ.
  bool with_adapter = false;
  std::uint64_t adapter_seed = 0;
};

/// Channel count of `site` for a model with config `cfg`.
inline int site_channels(const EfmConfig& cfg, const DistillSite& site) {
  const auto w = cfg.widths();
  switch (site.kind) {
    case DistillSite::Kind::bottleneck: return w[3];
    case DistillSite::Kind::decoder: return w[static_cast<std::size_t>(site.level - 1)];
    case DistillSite::Kind::output: return cfg.in_channels;
  }
  return 0;
}

/// Wraps a loaded full-precision model as a teacher for `student_cfg`.
template <typename T>
Teacher<T> make_teacher(Efm<T> model, const EfmConfig& student_cfg, const TeacherOptions& opt = {}) {
  const EfmConfig& tc = model.config();
  if (opt.mode == TeacherMode::self) {
    if (tc.architecture_hash() != student_cfg.architecture_hash())
      throw Error("self-distillation requires identical architectures: teacher " +
                  tc.architecture_signature() + " vs student " +
                  student_cfg.architecture_signature() +
                  " (request heterogeneous mode explicitly)");
    return Teacher<T>(std::move(model), opt.mode, opt.eval_mode);
  }
  const int tch = site_channels(tc, opt.site), sch = site_channels(student_cfg, opt.site);
  Teacher<T> t(std::move(model), opt.mode, opt.eval_mode);
  if (tch != sch) {
    if (!opt.with_adapter)
      throw Error("heterogeneous teacher has " + std::to_string(tch) +
                  " channels at site " + opt.site.str() + " but the student has " +
                  std::to_string(sch) + "; teacher shape (N," + std::to_string(tch) +
                  ",H,W) vs student shape (N," + std::to_string(sch) +
                  ",H,W) requires an adapter");
    t.adapter().emplace(tch, sch, opt.adapter_seed);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Alignment statistics

struct SiteAlignment {
  std::string site;
  std::vector<double> bin_edges;  // 65 edges
  std::vector<long> student_counts;
  std::vector<long> teacher_counts;
  double divergence = 0;      // symmetrized KL of the smoothed histograms
  double correlation = 0;     // Pearson correlation of flattened features
  double mean_abs_deviation = 0;
  double rms_deviation = 0;
  /// rms_deviation divided by the RMS of the teacher features.
  double relative_deviation = 0;
};

inline constexpr int kAlignmentBins = 64;
inline constexpr double kHistogramSmoothing = 1e-8;

/// Symmetrized KL divergence of two count histograms after normalization
/// and additive smoothing.
inline double symmetric_kl(const std::vector<long>& a, const std::vector<long>& b) {
  if (a.size() != b.size()) throw Error("histograms differ in size");
  double na = 0, nb = 0;
  for (long v : a) na += static_cast<double>(v);
  for (long v : b) nb += static_cast<double>(v);
  if (na == 0 || nb == 0) throw Error("empty histogram");
  const double norm = 1.0 + kHistogramSmoothing * static_cast<double>(a.size());
  double kl = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double p = (a[i] / na + kHistogramSmoothing) / norm;
    const double q = (b[i] / nb + kHistogramSmoothing) / norm;
    kl += (p - q) * (std::log(p) - std::log(q));
  }
  return kl;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 && syy == 0) return 1.0;
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Histograms over a fixed 64-bin range taken from the teacher features;
/// student values outside it fall into the end bins.
template <typename T>
SiteAlignment compare_features(const std::string& site, const Tensor<T>& student,
                               const Tensor<T>& teacher) {
  if (!(student.shape() == teacher.shape()))
    throw Error("alignment: feature shapes differ at " + site + ": " + student.shape().str() +
                " vs " + teacher.shape().str());
  SiteAlignment r;
  r.site = site;
  double lo = teacher[0], hi = teacher[0];
  for (T v : teacher.values()) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  if (hi <= lo) hi = lo + 1e-12;
  const double width = (hi - lo) / kAlignmentBins;
  r.bin_edges.resize(kAlignmentBins + 1);
  for (int i = 0; i <= kAlignmentBins; ++i) r.bin_edges[i] = lo + i * width;
  r.student_counts.assign(kAlignmentBins, 0);
  r.teacher_counts.assign(kAlignmentBins, 0);
  auto bin = [&](double v) {
    const int b = static_cast<int>(std::floor((v - lo) / width));
    return std::clamp(b, 0, kAlignmentBins - 1);
  };
  std::vector<double> xs(student.size()), ys(teacher.size());
  double abs_dev = 0, sq_dev = 0, sq_ref = 0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    xs[i] = student[i];
    ys[i] = teacher[i];
    ++r.student_counts[static_cast<std::size_t>(bin(xs[i]))];
    ++r.teacher_counts[static_cast<std::size_t>(bin(ys[i]))];
    const double d = xs[i] - ys[i];
    abs_dev += std::abs(d);
    sq_dev += d * d;
    sq_ref += ys[i] * ys[i];
  }
  r.divergence = symmetric_kl(r.student_counts, r.teacher_counts);
  r.correlation = pearson(xs, ys);
  r.mean_abs_deviation = abs_dev / static_cast<double>(xs.size());
  r.rms_deviation = std::sqrt(sq_dev / static_cast<double>(xs.size()));
  r.relative_deviation = sq_ref > 0 ? std::sqrt(sq_dev / sq_ref) : 0.0;
  return r;
}

/// Alignment of student vs teacher at the bottleneck and every decoder level
/// (ordered bottleneck, decoder_3, decoder_2, decoder_1, i.e. by depth).
template <typename T>
std::vector<SiteAlignment> alignment_report(Efm<T>& student, Efm<T>& teacher,
                                            const Tensor<T>& probe_batch) {
  if (probe_batch.empty() || probe_batch.shape().n == 0)
    throw Error("alignment_report: probe batch is empty");
  const auto ts = teacher.forward(probe_batch, ForwardContext::eval());
  const auto ss = student.forward(probe_batch, ForwardContext::eval());
  std::vector<SiteAlignment> out;
  out.push_back(compare_features("bottleneck", ss.bottleneck, ts.bottleneck));
  for (int l = 3; l >= 1; --l)
    out.push_back(compare_features("decoder_" + std::to_string(l),
                                   ss.decoder_features[static_cast<std::size_t>(l - 1)],
                                   ts.decoder_features[static_cast<std::size_t>(l - 1)]));
  return out;
}

}  // namespace qdr
