#pragma once

// Edge-friendly encoder/bottleneck/decoder restoration network.
//
//   stem 3x3 (3 -> c0)
//   encoder l = 1..3 : ResBlockSE(c_l), degradation map G_l, 3x3/2 conv c_l -> c_{l+1}
//   bottleneck       : 2 x ResBlockSE(c_4)
//   decoder l = 3..1 : 2x2/2 transposed conv c_{l+1} -> c_l, gated skip fusion,
//                      ResBlockSE(c_l) for l = 3, 2
//   output           : Conv1x1(ReLU(F_dec_1)) + x
//
// with c = (64, 96, 128, 256) at width 1.0.

#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qdr/nn.hpp"

namespace qdr {

/// How encoder features enter the decoder.
enum class SkipMode {
  plain,   // F_dec = Up + F_enc
  degmap,  // F_dec = Up + F_enc * (1 + G), scalars fixed at 1
  ldg,     // F_dec = Up + a_l * F_enc * (a_deg + G), scalars learnable
};

/// Algebraic form of the learnable gating (only used with SkipMode::ldg).
enum class FusionForm {
  main,  // Up + a_l * F_enc * (a_deg + G)
  supp,  // Up + a_l * F_enc * (a_l + G)
};

inline const char* to_string(SkipMode m) {
  switch (m) {
    case SkipMode::plain: return "plain";
    case SkipMode::degmap: return "degmap";
    case SkipMode::ldg: return "ldg";
  }
  return "?";
}
inline const char* to_string(FusionForm f) { return f == FusionForm::main ? "main" : "supp"; }

inline SkipMode parse_skip_mode(const std::string& s) {
  if (s == "plain") return SkipMode::plain;
  if (s == "degmap") return SkipMode::degmap;
  if (s == "ldg") return SkipMode::ldg;
  throw Error("unknown skip mode '" + s + "'");
}
inline FusionForm parse_fusion_form(const std::string& s) {
  if (s == "main") return FusionForm::main;
  if (s == "supp") return FusionForm::supp;
  throw Error("unknown fusion form '" + s + "'");
}

struct EfmConfig {
  int in_channels = 3;
  int stem_channels = 64;
  std::array<int, 3> encoder_channels{64, 96, 128};
  int bottleneck_channels = 256;
  int se_reduction = 16;
  int ldg_reduction = 8;
  double bn_momentum = 0.8;
  /// Width multiplier applied to every channel count.
  double scale_factor = 1.0;
  SkipMode skip_mode = SkipMode::ldg;
  FusionForm fusion = FusionForm::main;
  bool zero_init_output = false;

  int scaled(int c) const {
    const long v = std::lround(c * scale_factor);
    return v < 1 ? 1 : static_cast<int>(v);
  }
  /// Widths after scaling: [level1, level2, level3, bottleneck].
  std::array<int, 4> widths() const {
    return {scaled(encoder_channels[0]), scaled(encoder_channels[1]), scaled(encoder_channels[2]),
            scaled(bottleneck_channels)};
  }
  int se_hidden(int c) const { return reduced(c, se_reduction); }
  int ldg_hidden(int c) const { return reduced(c, ldg_reduction); }

  void validate() const {
    if (in_channels != 3) throw Error("EFM expects 3 input channels");
    if (stem_channels != encoder_channels[0])
      throw Error("stem_channels must equal the first encoder width");
    if (stem_channels <= 0 || bottleneck_channels <= 0 || encoder_channels[1] <= 0 ||
        encoder_channels[2] <= 0)
      throw Error("channel counts must be positive");
    if (se_reduction <= 0 || ldg_reduction <= 0) throw Error("reductions must be positive");
    if (!(scale_factor > 0)) throw Error("scale_factor must be positive");
    if (!(bn_momentum >= 0 && bn_momentum < 1)) throw Error("bn_momentum must be in [0, 1)");
    // The unscaled plan must be divisible; scaled widths round up instead.
    if (scale_factor == 1.0) {
      const auto w = widths();
      for (int c : w) {
        if (c % se_reduction != 0)
          throw Error("channel count " + std::to_string(c) + " is not divisible by se_reduction " +
                      std::to_string(se_reduction));
      }
      for (int i = 0; i < 3; ++i)
        if (w[i] % ldg_reduction != 0)
          throw Error("channel count " + std::to_string(w[i]) +
                      " is not divisible by ldg_reduction " + std::to_string(ldg_reduction));
    }
  }

  /// Canonical description of everything that determines parameter shapes
  /// and forward semantics.
  std::string architecture_signature() const {
    std::ostringstream os;
    const auto w = widths();
    os << "efm:in=" << in_channels << ":w=" << w[0] << ',' << w[1] << ',' << w[2] << ',' << w[3]
       << ":se=" << se_reduction << ":ldg=" << ldg_reduction << ":skip=" << to_string(skip_mode)
       << ":fusion=" << to_string(fusion);
    return os.str();
  }
  std::uint64_t architecture_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : architecture_signature()) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    return h;
  }

private:
  static int reduced(int c, int r) {
    const int v = (c + r - 1) / r;
    return v < 1 ? 1 : v;
  }
};

/// Per-level degradation map and gated skip fusion.
template <typename T>
class DegradationGate {
public:
  DegradationGate() = default;
  DegradationGate(const std::string& name, int channels, int hidden, double bn_momentum,
                  SkipMode mode, FusionForm form)
      : name_(name), mode_(mode), form_(form),
        proj_down_(name + ".proj_down", channels, hidden, 1, 1, false),
        bn_(name + ".bn", hidden, bn_momentum),
        proj_map_(name + ".proj_map", hidden, 1, 3, 1, true),
        alpha_deg_(name + ".alpha_deg", Shape{1, 1, 1, 1}),
        alpha_level_(name + ".alpha_level", Shape{1, 1, 1, 1}) {
    alpha_deg_.value[0] = T{1};
    alpha_level_.value[0] = T{1};
  }

  void init(Rng& rng) {
    proj_down_.init(rng);
    proj_map_.init(rng);
  }

  bool has_map() const { return mode_ != SkipMode::plain; }

  /// G = sigmoid(Conv3x3(ReLU(BN(Conv1x1(F_enc))))), shape (N, 1, H, W).
  Tensor<T> map(const Tensor<T>& f_enc, const ForwardContext& ctx) {
    hidden_ = relu(bn_.forward(proj_down_.forward(f_enc, ctx), ctx));
    g_raw_ = sigmoid(proj_map_.forward(hidden_, ctx));
    if (gate_quant_ && quant_enabled_) return gate_quant_->apply(g_raw_);
    return g_raw_;
  }

  Tensor<T> map_backward(const Tensor<T>& g_gate) {
    Tensor<T> g = g_gate;
    if (gate_quant_ && quant_enabled_) gate_quant_->backward_inplace(g);
    return proj_down_.backward(bn_.backward(relu_backward(
        proj_map_.backward(sigmoid_backward(g, g_raw_)), hidden_)));
  }

  Tensor<T> fuse(const Tensor<T>& f_enc, const Tensor<T>& gate, const Tensor<T>& up) {
    up.check_same(f_enc, (name_ + " fusion").c_str());
    f_enc_ = f_enc;
    gate_ = gate;
    Tensor<T> out = up;
    if (mode_ == SkipMode::plain) {
      out += f_enc;
      return out;
    }
    const Shape s = f_enc.shape();
    if (gate.shape() != Shape{s.n, 1, s.h, s.w})
      throw Error(name_ + ": gate shape " + gate.shape().str() + " does not match " + s.str());
    const T level = level_scale(), offset = gate_offset();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      const T* g = gate.plane(n, 0);
      for (int c = 0; c < s.c; ++c) {
        const T* f = f_enc.plane(n, c);
        T* o = out.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) o[i] += level * f[i] * (offset + g[i]);
      }
    }
    return out;
  }

  struct FuseGrads {
    Tensor<T> up;
    Tensor<T> enc;
    Tensor<T> gate;  // empty in plain mode
  };

  FuseGrads fuse_backward(const Tensor<T>& gy) {
    FuseGrads r{gy, Tensor<T>(gy.shape()), {}};
    if (mode_ == SkipMode::plain) {
      r.enc = gy;
      return r;
    }
    const Shape s = gy.shape();
    r.gate = Tensor<T>(Shape{s.n, 1, s.h, s.w});
    const T level = level_scale(), offset = gate_offset();
    const std::size_t plane = s.plane();
    double d_level = 0, d_offset = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* g = gate_.plane(n, 0);
      T* gg = r.gate.plane(n, 0);
      for (int c = 0; c < s.c; ++c) {
        const T* f = f_enc_.plane(n, c);
        const T* dy = gy.plane(n, c);
        T* de = r.enc.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const T gated = offset + g[i];
          de[i] = dy[i] * level * gated;
          gg[i] += dy[i] * level * f[i];
          d_level += static_cast<double>(dy[i]) * f[i] * gated;
          d_offset += static_cast<double>(dy[i]) * level * f[i];
        }
      }
    }
    if (mode_ == SkipMode::ldg) {
      if (form_ == FusionForm::main) {
        alpha_level_.grad[0] += static_cast<T>(d_level);
        alpha_deg_.grad[0] += static_cast<T>(d_offset);
      } else {
        alpha_level_.grad[0] += static_cast<T>(d_level + d_offset);
      }
    }
    return r;
  }

  void collect(ParamRefs<T>& out) {
    if (mode_ == SkipMode::plain) return;
    proj_down_.collect(out);
    bn_.collect(out);
    proj_map_.collect(out);
    if (mode_ == SkipMode::ldg) {
      if (form_ == FusionForm::main) out.push_back(&alpha_deg_);
      out.push_back(&alpha_level_);
    }
  }

  template <typename Fn>
  void for_each_conv(Fn&& fn) {
    if (mode_ == SkipMode::plain) return;
    fn(proj_down_);
    fn(proj_map_);
  }
  template <typename Fn>
  void for_each_bn(Fn&& fn) {
    if (mode_ != SkipMode::plain) fn(bn_);
  }

  void inventory(std::vector<LayerInfo>& out, const std::string& fuse_name) const {
    if (mode_ != SkipMode::plain) {
      out.push_back({name_ + ".proj_down", LayerKind::conv});
      out.push_back({name_ + ".bn", LayerKind::batchnorm});
      out.push_back({name_ + ".relu", LayerKind::relu});
      out.push_back({name_ + ".proj_map", LayerKind::conv});
      out.push_back({name_ + ".sigmoid", LayerKind::sigmoid});
      out.push_back({fuse_name + ".gate", LayerKind::mul});
    }
    out.push_back({fuse_name + ".add", LayerKind::add});
  }

  void attach_gate_quantizer(int bits) {
    gate_quant_.emplace(bits);
    quant_enabled_ = true;
  }
  void detach_gate_quantizer() { gate_quant_.reset(); }
  void set_quant_enabled(bool on) { quant_enabled_ = on; }
  const std::optional<FixedRangeQuantizer<T>>& gate_quantizer() const { return gate_quant_; }

  Param<T>& alpha_deg() { return alpha_deg_; }
  Param<T>& alpha_level() { return alpha_level_; }
  Conv2d<T>& proj_down() { return proj_down_; }
  Conv2d<T>& proj_map() { return proj_map_; }
  SkipMode mode() const { return mode_; }

private:
  T level_scale() const { return mode_ == SkipMode::ldg ? alpha_level_.value[0] : T{1}; }
  T gate_offset() const {
    if (mode_ != SkipMode::ldg) return T{1};
    return form_ == FusionForm::main ? alpha_deg_.value[0] : alpha_level_.value[0];
  }

  std::string name_;
  SkipMode mode_ = SkipMode::ldg;
  FusionForm form_ = FusionForm::main;
  Conv2d<T> proj_down_;
  BatchNorm2d<T> bn_;
  Conv2d<T> proj_map_;
  Param<T> alpha_deg_;
  Param<T> alpha_level_;
  std::optional<FixedRangeQuantizer<T>> gate_quant_;
  bool quant_enabled_ = true;
  Tensor<T> hidden_, g_raw_, f_enc_, gate_;
};

/// Intermediate results of one forward pass. Level-indexed arrays hold
/// level 1 (full resolution) at index 0.
template <typename T>
struct EfmTrace {
  Tensor<T> output;
  Tensor<T> bottleneck;
  std::array<Tensor<T>, 3> deg_maps;
  std::array<Tensor<T>, 3> skip_features;
  std::array<Tensor<T>, 3> decoder_features;
};

/// Extra gradients injected at internal sites during backward.
template <typename T>
struct SiteGrads {
  std::optional<Tensor<T>> bottleneck;
  std::array<std::optional<Tensor<T>>, 3> decoder;
};

template <typename T>
class Efm {
public:
  Efm() = default;
  explicit Efm(const EfmConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const auto w = cfg_.widths();
    const double m = cfg_.bn_momentum;
    stem_ = Conv2d<T>("stem", cfg_.in_channels, w[0], 3, 1, true);
    for (int l = 0; l < 3; ++l) {
      const std::string e = "enc" + std::to_string(l + 1);
      enc_[l] = ResBlockSE<T>(e + ".block", w[l], cfg_.se_hidden(w[l]), m);
      gate_[l] = DegradationGate<T>("ldg" + std::to_string(l + 1), w[l], cfg_.ldg_hidden(w[l]), m,
                                    cfg_.skip_mode, cfg_.fusion);
      down_[l] = Conv2d<T>(e + ".down", w[l], w[l + 1], 3, 2, true);
      up_[l] = ConvTranspose2d<T>("dec" + std::to_string(l + 1) + ".up", w[l + 1], w[l], 2);
    }
    for (int b = 0; b < 2; ++b)
      bottleneck_[b] = ResBlockSE<T>("bottleneck.block" + std::to_string(b + 1), w[3],
                                     cfg_.se_hidden(w[3]), m);
    for (int l = 1; l < 3; ++l)
      dec_[l] = ResBlockSE<T>("dec" + std::to_string(l + 1) + ".block", w[l], cfg_.se_hidden(w[l]),
                              m);
    out_ = Conv2d<T>("out", w[0], cfg_.in_channels, 1, 1, true);

    Rng rng(seed);
    stem_.init(rng);
    for (int l = 0; l < 3; ++l) {
      enc_[l].init(rng);
      gate_[l].init(rng);
      down_[l].init(rng);
    }
    for (auto& b : bottleneck_) b.init(rng);
    for (int l = 2; l >= 0; --l) {
      up_[l].init(rng);
      if (l > 0) dec_[l].init(rng);
    }
    out_.init(rng);
    if (cfg_.zero_init_output) {
      out_.weight().value.zero();
      out_.bias()->value.zero();
    }
  }

  const EfmConfig& config() const { return cfg_; }

  EfmTrace<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    const Shape s = x.shape();
    if (s.c != cfg_.in_channels)
      throw Error("EFM input must have " + std::to_string(cfg_.in_channels) + " channels, got " +
                  s.str());
    if (s.h % 8 != 0 || s.w % 8 != 0)
      throw Error("EFM input height and width must be divisible by 8, got " + s.str() +
                  "; pad the image to a multiple of 8");
    EfmTrace<T> tr;
    Tensor<T> h = stem_.forward(x, ctx);
    for (int l = 0; l < 3; ++l) {
      h = enc_[l].forward(h, ctx);
      tr.skip_features[l] = h;
      if (gate_[l].has_map()) tr.deg_maps[l] = gate_[l].map(h, ctx);
      h = down_[l].forward(h, ctx);
    }
    for (auto& b : bottleneck_) h = b.forward(h, ctx);
    tr.bottleneck = h;
    for (int l = 2; l >= 0; --l) {
      Tensor<T> up = up_[l].forward(h, ctx);
      h = gate_[l].fuse(tr.skip_features[l], tr.deg_maps[l], up);
      if (l > 0) h = dec_[l].forward(h, ctx);
      tr.decoder_features[l] = h;
    }
    final_act_ = relu(h);
    tr.output = out_.forward(final_act_, ctx);
    tr.output += x;
    return tr;
  }

  /// Backpropagates `grad_output` (may be empty) plus any injected site
  /// gradients, accumulating into parameter gradients.
  void backward(const Tensor<T>& grad_output, const SiteGrads<T>& extra = {}) {
    std::optional<Tensor<T>> g;
    if (!grad_output.empty()) g = relu_backward(out_.backward(grad_output), final_act_);
    std::array<std::optional<Tensor<T>>, 3> skip_grad;
    for (int l = 0; l < 3; ++l) {
      add_into(g, extra.decoder[l]);
      if (!g) continue;
      if (l > 0) *g = dec_[l].backward(*g);
      auto fg = gate_[l].fuse_backward(*g);
      if (gate_[l].has_map()) fg.enc += gate_[l].map_backward(fg.gate);
      skip_grad[l] = std::move(fg.enc);
      g = up_[l].backward(fg.up);
    }
    add_into(g, extra.bottleneck);
    if (!g) return;
    for (int b = 1; b >= 0; --b) *g = bottleneck_[b].backward(*g);
    for (int l = 2; l >= 0; --l) {
      *g = down_[l].backward(*g);
      add_into(g, skip_grad[l]);
      *g = enc_[l].backward(*g);
    }
    stem_.backward(*g);
  }

  ParamRefs<T> parameters() {
    ParamRefs<T> ps;
    stem_.collect(ps);
    for (int l = 0; l < 3; ++l) {
      enc_[l].collect(ps);
      gate_[l].collect(ps);
      down_[l].collect(ps);
    }
    for (auto& b : bottleneck_) b.collect(ps);
    for (int l = 2; l >= 0; --l) {
      up_[l].collect(ps);
      if (l > 0) dec_[l].collect(ps);
    }
    out_.collect(ps);
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Visits every convolution (Conv2d&) and transposed convolution
  /// (ConvTranspose2d&) in forward order.
  template <typename Fn>
  void for_each_conv(Fn&& fn) {
    fn(stem_);
    for (int l = 0; l < 3; ++l) {
      enc_[l].for_each_conv(fn);
      gate_[l].for_each_conv(fn);
      fn(down_[l]);
    }
    for (auto& b : bottleneck_) b.for_each_conv(fn);
    for (int l = 2; l >= 0; --l) {
      fn(up_[l]);
      if (l > 0) dec_[l].for_each_conv(fn);
    }
    fn(out_);
  }

  template <typename Fn>
  void for_each_bn(Fn&& fn) {
    for (int l = 0; l < 3; ++l) {
      enc_[l].for_each_bn(fn);
      gate_[l].for_each_bn(fn);
    }
    for (auto& b : bottleneck_) b.for_each_bn(fn);
    for (int l = 2; l >= 1; --l) dec_[l].for_each_bn(fn);
  }

  std::vector<LayerInfo> layer_inventory() const {
    std::vector<LayerInfo> inv;
    inv.push_back({"stem", LayerKind::conv});
    for (int l = 0; l < 3; ++l) {
      enc_[l].inventory(inv);
      inv.push_back({"enc" + std::to_string(l + 1) + ".down", LayerKind::conv});
    }
    for (const auto& b : bottleneck_) b.inventory(inv);
    for (int l = 2; l >= 0; --l) {
      const std::string d = "dec" + std::to_string(l + 1);
      inv.push_back({d + ".up", LayerKind::conv_transpose});
      gate_[l].inventory(inv, d + ".fuse");
      if (l > 0) dec_[l].inventory(inv);
    }
    inv.push_back({"out.relu", LayerKind::relu});
    inv.push_back({"out", LayerKind::conv});
    inv.push_back({"global_residual", LayerKind::add});
    return inv;
  }

  /// Inserts fake quantizers at every conv/transposed-conv (weights per
  /// channel, inputs per tensor) and on the degradation maps.
  void attach_quantizers(const QuantConfig& qc) {
    qc.validate();
    for_each_conv([&](auto& layer) { layer.attach_quantizers(qc); });
    for (auto& gate : gate_) {
      if (qc.quantize_gate_maps)
        gate.attach_gate_quantizer(qc.bits);
      else
        gate.detach_gate_quantizer();
    }
    quant_ = qc;
  }
  void detach_quantizers() {
    for_each_conv([](auto& layer) { layer.detach_quantizers(); });
    for (auto& gate : gate_) gate.detach_gate_quantizer();
    quant_.reset();
  }
  /// Keeps calibration state but switches fake quantization on or off.
  void set_quant_enabled(bool on) {
    for_each_conv([&](auto& layer) { layer.quantizers().enabled = on; });
    for (auto& gate : gate_) gate.set_quant_enabled(on);
  }
  const std::optional<QuantConfig>& quant_config() const { return quant_; }

  DegradationGate<T>& gate(int level) { return gate_.at(static_cast<std::size_t>(level - 1)); }
  ResBlockSE<T>& encoder_block(int level) { return enc_.at(static_cast<std::size_t>(level - 1)); }
  ResBlockSE<T>& bottleneck_block(int i) { return bottleneck_.at(static_cast<std::size_t>(i)); }
  ResBlockSE<T>& decoder_block(int level) { return dec_.at(static_cast<std::size_t>(level - 1)); }
  Conv2d<T>& stem() { return stem_; }
  Conv2d<T>& output_conv() { return out_; }
  Conv2d<T>& downsample(int level) { return down_.at(static_cast<std::size_t>(level - 1)); }
  ConvTranspose2d<T>& upsample(int level) { return up_.at(static_cast<std::size_t>(level - 1)); }

private:
  static void add_into(std::optional<Tensor<T>>& acc, const std::optional<Tensor<T>>& g) {
    if (!g) return;
    if (acc)
      *acc += *g;
    else
      acc = *g;
  }

  EfmConfig cfg_;
  Conv2d<T> stem_;
  std::array<ResBlockSE<T>, 3> enc_;
  std::array<DegradationGate<T>, 3> gate_;
  std::array<Conv2d<T>, 3> down_;
  std::array<ResBlockSE<T>, 2> bottleneck_;
  std::array<ConvTranspose2d<T>, 3> up_;
  std::array<ResBlockSE<T>, 3> dec_;  // index 0 unused
  Conv2d<T> out_;
  std::optional<QuantConfig> quant_;
  Tensor<T> final_act_;
};

/// Layers that can carry fake quantizers under the conv protocol. Anything
/// else with weights is rejected by attach_quantizers.
inline bool is_quantizable(LayerKind k) {
  return k != LayerKind::linear;
}

inline void check_quantizable(const std::vector<LayerInfo>& inventory) {
  std::string bad;
  for (const auto& l : inventory)
    if (!is_quantizable(l.kind)) bad += (bad.empty() ? "" : ", ") + l.name + " (" + to_string(l.kind) + ")";
  if (!bad.empty()) throw Error("layer not quantizable: " + bad);
}

/// Checks the layer inventory, then inserts fake quantizers.
template <typename Model>
void attach_quantizers(Model& model, const QuantConfig& qc) {
  check_quantizable(model.layer_inventory());
  model.attach_quantizers(qc);
}

/// Converts a model to another scalar type (used for double-precision
/// gradient checks of a float model).
template <typename To, typename From>
Efm<To> convert_model(Efm<From>& src) {
  Efm<To> dst(src.config());
  auto sp = src.parameters();
  auto dp = dst.parameters();
  for (std::size_t i = 0; i < sp.size(); ++i) dp[i]->value = sp[i]->value.template cast<To>();
  std::vector<BatchNorm2d<From>*> sbn;
  std::vector<BatchNorm2d<To>*> dbn;
  src.for_each_bn([&](auto& b) { sbn.push_back(&b); });
  dst.for_each_bn([&](auto& b) { dbn.push_back(&b); });
  for (std::size_t i = 0; i < sbn.size(); ++i) {
    dbn[i]->running_mean() = sbn[i]->running_mean();
    dbn[i]->running_var() = sbn[i]->running_var();
  }
  return dst;
}

}  // namespace qdr
