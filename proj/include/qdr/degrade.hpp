#pragma once

// Synthetic corruptions standing in for the four restoration tasks, a
// procedural clean-image corpus, and seeded patch streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qdr/rng.hpp"
#include "qdr/tensor.hpp"

namespace qdr {

enum class DegradationKind { identity, gaussian_noise, low_light, rain_streaks, haze };

inline const char* to_string(DegradationKind k) {
  switch (k) {
    case DegradationKind::identity: return "identity";
    case DegradationKind::gaussian_noise: return "gaussian_noise";
    case DegradationKind::low_light: return "low_light";
    case DegradationKind::rain_streaks: return "rain_streaks";
    case DegradationKind::haze: return "haze";
  }
  return "?";
}

inline DegradationKind parse_degradation_kind(const std::string& s) {
  for (auto k : {DegradationKind::identity, DegradationKind::gaussian_noise,
                 DegradationKind::low_light, DegradationKind::rain_streaks, DegradationKind::haze})
    if (s == to_string(k)) return k;
  throw Error("unknown degradation kind '" + s + "'");
}

struct DegradationSpec {
  DegradationKind kind = DegradationKind::identity;
  // gaussian_noise
  double sigma = 0.1;
  // low_light: out = gain * in^gamma + N(0, read_noise)
  double gamma = 2.2;
  double gain = 0.45;
  double read_noise = 0.02;
  // rain_streaks: sparse seeds convolved with an oriented line kernel
  double density = 0.004;
  int streak_length = 9;
  double angle_deg = 70.0;
  double intensity = 0.6;
  // haze: I = J t + A (1 - t), t = exp(-beta d)
  double haze_beta = 1.5;
  double airlight = 0.85;
  std::uint64_t seed = 0;

  bool operator==(const DegradationSpec&) const = default;
};

inline nlohmann::json to_json(const DegradationSpec& s) {
  nlohmann::json j{{"kind", to_string(s.kind)}, {"seed", s.seed}};
  switch (s.kind) {
    case DegradationKind::gaussian_noise: j["sigma"] = s.sigma; break;
    case DegradationKind::low_light:
      j["gamma"] = s.gamma;
      j["gain"] = s.gain;
      j["read_noise"] = s.read_noise;
      break;
    case DegradationKind::rain_streaks:
      j["density"] = s.density;
      j["streak_length"] = s.streak_length;
      j["angle_deg"] = s.angle_deg;
      j["intensity"] = s.intensity;
      break;
    case DegradationKind::haze:
      j["haze_beta"] = s.haze_beta;
      j["airlight"] = s.airlight;
      break;
    case DegradationKind::identity: break;
  }
  return j;
}

namespace detail {

template <typename T>
void clamp_unit(Tensor<T>& t) {
  for (auto& v : t.values()) v = std::clamp(v, T{0}, T{1});
}

template <typename T>
void add_rain(Tensor<T>& img, int n, const DegradationSpec& s, Rng& rng) {
  const Shape sh = img.shape();
  const std::size_t plane = sh.plane();
  std::vector<double> seeds(plane, 0.0);
  for (auto& v : seeds)
    if (rng.uniform() < s.density) v = rng.uniform(0.5, 1.0);
  const double th = s.angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(th), dy = std::sin(th);
  const int half = s.streak_length / 2;
  std::vector<double> streak(plane, 0.0);
  for (int y = 0; y < sh.h; ++y)
    for (int x = 0; x < sh.w; ++x) {
      const double v = seeds[static_cast<std::size_t>(y) * sh.w + x];
      if (v == 0) continue;
      for (int t = -half; t <= half; ++t) {
        const int yy = y + static_cast<int>(std::lround(t * dy));
        const int xx = x + static_cast<int>(std::lround(t * dx));
        if (yy < 0 || yy >= sh.h || xx < 0 || xx >= sh.w) continue;
        auto& o = streak[static_cast<std::size_t>(yy) * sh.w + xx];
        o = std::max(o, v);
      }
    }
  for (int c = 0; c < sh.c; ++c) {
    T* p = img.plane(n, c);
    for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<T>(p[i] + s.intensity * streak[i]);
  }
}

}  // namespace detail

/// Applies `spec` to every sample of `clean` (values in [0,1]). The result is
/// clamped to [0,1] and depends only on (clean, spec).
template <typename T>
Tensor<T> apply_degradation(const Tensor<T>& clean, const DegradationSpec& spec) {
  Tensor<T> out = clean;
  const Shape sh = clean.shape();
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(spec.kind)));
  switch (spec.kind) {
    case DegradationKind::identity: return out;
    case DegradationKind::gaussian_noise:
      if (spec.sigma == 0) return out;
      for (auto& v : out.values()) v = static_cast<T>(v + spec.sigma * rng.normal());
      break;
    case DegradationKind::low_light:
      for (auto& v : out.values())
        v = static_cast<T>(spec.gain * std::pow(std::max<double>(v, 0.0), spec.gamma) +
                           spec.read_noise * rng.normal());
      break;
    case DegradationKind::rain_streaks:
      for (int n = 0; n < sh.n; ++n) detail::add_rain(out, n, spec, rng);
      break;
    case DegradationKind::haze:
      for (int n = 0; n < sh.n; ++n)
        for (int c = 0; c < sh.c; ++c) {
          T* p = out.plane(n, c);
          for (int y = 0; y < sh.h; ++y)
            for (int x = 0; x < sh.w; ++x) {
              const double d = 0.7 * (sh.h > 1 ? 1.0 - double(y) / (sh.h - 1) : 0.0) +
                               0.3 * (sh.w > 1 ? double(x) / (sh.w - 1) : 0.0);
              const double t = std::exp(-spec.haze_beta * d);
              auto& v = p[static_cast<std::size_t>(y) * sh.w + x];
              v = static_cast<T>(v * t + spec.airlight * (1 - t));
            }
        }
      break;
  }
  detail::clamp_unit(out);
  return out;
}

// ---------------------------------------------------------------------------
// Clean image sources

struct NamedImage {
  std::string name;
  Tensor<float> image;  // (1, 3, H, W) in [0,1]
};

/// Procedurally generated RGB texture: a colour gradient overlaid with
/// shapes, stripes, checkers and smooth value noise.
inline Tensor<float> procedural_texture(int size, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> img(Shape{1, 3, size, size});
  auto color = [&] { return std::array<double, 3>{rng.uniform(), rng.uniform(), rng.uniform()}; };
  const auto c0 = color(), c1 = color();
  const double gdir = rng.uniform(0, 2 * std::numbers::pi);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = 0.5 + 0.5 * std::sin(gdir) * (2.0 * y / size - 1) * 0.7 +
                       0.5 * std::cos(gdir) * (2.0 * x / size - 1) * 0.7;
      for (int c = 0; c < 3; ++c) img(0, c, y, x) = static_cast<float>(c0[c] * (1 - t) + c1[c] * t);
    }
  const int shapes = 6 + static_cast<int>(rng.below(10));
  for (int k = 0; k < shapes; ++k) {
    const int type = static_cast<int>(rng.below(4));
    const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    const double rx = rng.uniform(size * 0.05, size * 0.35), ry = rng.uniform(size * 0.05, size * 0.35);
    const auto ca = color(), cb = color();
    const double freq = rng.uniform(0.15, 0.9), ang = rng.uniform(0, std::numbers::pi);
    const int cell = 2 + static_cast<int>(rng.below(8));
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x - cx) / rx, v = (y - cy) / ry;
        const bool inside = (type == 0) ? (std::abs(u) < 1 && std::abs(v) < 1) : (u * u + v * v < 1);
        if (!inside) continue;
        double mixw = 0;
        if (type == 2) mixw = 0.5 + 0.5 * std::sin(freq * (x * std::cos(ang) + y * std::sin(ang)));
        if (type == 3) mixw = ((x / cell + y / cell) % 2) ? 1.0 : 0.0;
        for (int c = 0; c < 3; ++c)
          img(0, c, y, x) = static_cast<float>(ca[c] * (1 - mixw) + cb[c] * mixw);
      }
  }
  // Smooth value noise on a coarse lattice, bilinearly interpolated.
  const int grid = 8;
  std::vector<double> lattice(static_cast<std::size_t>((grid + 1) * (grid + 1) * 3));
  for (auto& v : lattice) v = rng.uniform(-0.08, 0.08);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double gy = double(y) * grid / size, gx = double(x) * grid / size;
      const int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
      const double fy = gy - iy, fx = gx - ix;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](int a, int b) {
          return lattice[static_cast<std::size_t>(((a * (grid + 1)) + b) * 3 + c)];
        };
        const double v = at(iy, ix) * (1 - fy) * (1 - fx) + at(iy, ix + 1) * (1 - fy) * fx +
                         at(iy + 1, ix) * fy * (1 - fx) + at(iy + 1, ix + 1) * fy * fx;
        float& p = img(0, c, y, x);
        p = std::clamp(static_cast<float>(p + v), 0.0f, 1.0f);
      }
    }
  return img;
}

inline std::vector<NamedImage> procedural_corpus(int count, int size, std::uint64_t seed) {
  std::vector<NamedImage> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back({"texture_" + std::to_string(i),
                   procedural_texture(size, mix_seed(seed, static_cast<std::uint64_t>(i)))});
  return out;
}

/// Aligned degraded/clean pair loaded from disk.
struct NamedPair {
  std::string name;
  Tensor<float> degraded;
  Tensor<float> clean;
};

// ---------------------------------------------------------------------------
// Patch streams

struct PatchBatch {
  Tensor<float> degraded;  // (B, 3, P, P)
  Tensor<float> clean;
  std::vector<DegradationSpec> specs;
  /// Seed actually used for each sample's corruption (mixed with spec.seed).
  std::vector<std::uint64_t> sample_seeds;
};

/// Infinite, deterministic stream of random crops with on-the-fly
/// corruption (synthetic) or aligned crops of stored pairs (paired).
class PatchStream {
public:
  PatchStream(std::vector<NamedImage> images, std::vector<DegradationSpec> specs, int patch,
              int batch, std::uint64_t seed)
      : images_(std::move(images)), specs_(std::move(specs)), patch_(patch), batch_(batch),
        rng_(seed) {
    validate_common();
    if (specs_.empty()) throw Error("patch stream needs at least one degradation spec");
    for (const auto& im : images_) check_size(im.name, im.image.shape());
  }

  PatchStream(std::vector<NamedPair> pairs, int patch, int batch, std::uint64_t seed)
      : pairs_(std::move(pairs)), patch_(patch), batch_(batch), rng_(seed) {
    validate_common();
    for (const auto& p : pairs_) {
      if (!(p.degraded.shape() == p.clean.shape()))
        throw Error("paired image '" + p.name + "' has mismatched degraded/clean sizes");
      check_size(p.name, p.clean.shape());
    }
  }

  PatchBatch next() {
    std::vector<Tensor<float>> deg, cln;
    PatchBatch b;
    for (int i = 0; i < batch_; ++i) {
      if (!pairs_.empty()) {
        const auto& p = pairs_[rng_.below(pairs_.size())];
        const auto [y, x] = offset(p.clean.shape());
        cln.push_back(crop(p.clean, y, x));
        deg.push_back(crop(p.degraded, y, x));
        b.specs.push_back({});
        b.sample_seeds.push_back(0);
        continue;
      }
      const auto& im = images_[rng_.below(images_.size())];
      const auto [y, x] = offset(im.image.shape());
      Tensor<float> c = crop(im.image, y, x);
      const auto& spec = specs_[rng_.below(specs_.size())];
      const std::uint64_t sample_seed = rng_.next();
      DegradationSpec applied = spec;
      applied.seed = mix_seed(spec.seed, sample_seed);
      deg.push_back(apply_degradation(c, applied));
      cln.push_back(std::move(c));
      b.specs.push_back(spec);
      b.sample_seeds.push_back(sample_seed);
    }
    b.degraded = stack(deg);
    b.clean = stack(cln);
    return b;
  }

  int patch() const { return patch_; }
  int batch() const { return batch_; }

private:
  void validate_common() const {
    if (patch_ <= 0 || patch_ % 8 != 0)
      throw Error("patch size must be a positive multiple of 8, got " + std::to_string(patch_));
    if (batch_ <= 0) throw Error("batch size must be positive");
    if (images_.empty() && pairs_.empty()) throw Error("image source is empty");
  }
  void check_size(const std::string& name, const Shape& s) const {
    if (s.h < patch_ || s.w < patch_)
      throw Error("image '" + name + "' (" + std::to_string(s.h) + "x" + std::to_string(s.w) +
                  ") is smaller than the patch size " + std::to_string(patch_));
  }
  std::pair<int, int> offset(const Shape& s) {
    const int y = static_cast<int>(rng_.below(static_cast<std::uint64_t>(s.h - patch_ + 1)));
    const int x = static_cast<int>(rng_.below(static_cast<std::uint64_t>(s.w - patch_ + 1)));
    return {y, x};
  }
  Tensor<float> crop(const Tensor<float>& img, int y0, int x0) const {
    Tensor<float> out(Shape{1, img.shape().c, patch_, patch_});
    for (int c = 0; c < img.shape().c; ++c)
      for (int y = 0; y < patch_; ++y)
        std::copy_n(img.plane(0, c) + static_cast<std::size_t>(y0 + y) * img.shape().w + x0,
                    patch_, out.plane(0, c) + static_cast<std::size_t>(y) * patch_);
    return out;
  }

  std::vector<NamedImage> images_;
  std::vector<NamedPair> pairs_;
  std::vector<DegradationSpec> specs_;
  int patch_;
  int batch_;
  Rng rng_;
};

/// FNV-1a over the raw bytes of a tensor; used for determinism checks.
template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace qdr
