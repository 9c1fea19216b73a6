#pragma once

// Checkpoint archive: an 8-byte magic, a little-endian u64 header length, a
// JSON header (config, tensor directory, BN statistics, activation-quantizer
// state) and the float32 parameter payload.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qdr/efm.hpp"

namespace qdr {

using json = nlohmann::json;

inline constexpr char kArchiveMagic[8] = {'Q', 'D', 'R', 'C', 'K', 'P', 'T', '1'};

inline json to_json(const EfmConfig& c) {
  return {{"in_channels", c.in_channels},
          {"stem_channels", c.stem_channels},
          {"encoder_channels", c.encoder_channels},
          {"bottleneck_channels", c.bottleneck_channels},
          {"se_reduction", c.se_reduction},
          {"ldg_reduction", c.ldg_reduction},
          {"bn_momentum", c.bn_momentum},
          {"scale_factor", c.scale_factor},
          {"skip_mode", to_string(c.skip_mode)},
          {"fusion", to_string(c.fusion)},
          {"zero_init_output", c.zero_init_output},
          {"signature", c.architecture_signature()}};
}

inline EfmConfig efm_config_from_json(const json& j) {
  EfmConfig c;
  c.in_channels = j.at("in_channels");
  c.stem_channels = j.at("stem_channels");
  c.encoder_channels = j.at("encoder_channels").get<std::array<int, 3>>();
  c.bottleneck_channels = j.at("bottleneck_channels");
  c.se_reduction = j.at("se_reduction");
  c.ldg_reduction = j.at("ldg_reduction");
  c.bn_momentum = j.at("bn_momentum");
  c.scale_factor = j.at("scale_factor");
  c.skip_mode = parse_skip_mode(j.at("skip_mode"));
  c.fusion = parse_fusion_form(j.at("fusion"));
  c.zero_init_output = j.value("zero_init_output", false);
  return c;
}

inline json to_json(const QuantConfig& q) {
  return {{"bits", q.bits},
          {"weight_scheme", to_string(q.weight_scheme)},
          {"activation_scheme", to_string(q.activation_scheme)},
          {"calibration", to_string(q.calibration)},
          {"calibration_batches", q.calibration_batches},
          {"quantize_gate_maps", q.quantize_gate_maps},
          {"rounding", "half_to_even"}};
}

inline QuantConfig quant_config_from_json(const json& j) {
  QuantConfig q;
  q.bits = j.at("bits");
  q.calibration_batches = j.at("calibration_batches");
  q.quantize_gate_maps = j.value("quantize_gate_maps", true);
  q.validate();
  return q;
}

template <typename T>
struct Checkpoint {
  Efm<T> model;
  json extra;
};

/// Writes `model` (parameters as float32) plus an arbitrary `extra` object.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, Efm<T>& model, const json& extra = {}) {
  json header;
  header["config"] = to_json(model.config());
  if (model.quant_config()) header["quant"] = to_json(*model.quant_config());
  json dir = json::array();
  std::vector<float> payload;
  for (auto* p : model.parameters()) {
    const Shape s = p->value.shape();
    dir.push_back({{"name", p->name},
                   {"shape", {s.n, s.c, s.h, s.w}},
                   {"dtype", "float32"},
                   {"offset", payload.size()}});
    for (T v : p->value.values()) payload.push_back(static_cast<float>(v));
  }
  header["tensors"] = dir;
  json bn = json::array();
  model.for_each_bn([&](auto& b) {
    bn.push_back({{"name", b.name()}, {"mean", b.running_mean()}, {"var", b.running_var()}});
  });
  header["batchnorm"] = bn;
  json aq = json::array();
  model.for_each_conv([&](auto& layer) {
    const auto& q = layer.quantizers();
    if (!q.input) return;
    aq.push_back({{"name", layer.name()},
                  {"running_max", q.input->running_max()},
                  {"batches_seen", q.input->batches_seen()},
                  {"frozen", q.input->frozen()}});
  });
  header["activation_quantizers"] = aq;
  header["extra"] = extra;

  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(kArchiveMagic, 8);
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw Error("short write to checkpoint '" + path.string() + "'");
}

inline json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kArchiveMagic, 8) != 0)
    throw Error("'" + path.string() + "' is not a checkpoint archive");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string hs(len, '\0');
  if (!in.read(hs.data(), static_cast<std::streamsize>(len)))
    throw Error("truncated checkpoint header in '" + path.string() + "'");
  return json::parse(hs);
}

template <typename T = float>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  const json header = read_checkpoint_header(in, path);
  const auto start = in.tellg();
  in.seekg(0, std::ios::end);
  const std::size_t floats = static_cast<std::size_t>(in.tellg() - start) / sizeof(float);
  in.seekg(start);
  std::vector<float> payload(floats);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(floats * sizeof(float)));

  Checkpoint<T> ck{Efm<T>(efm_config_from_json(header.at("config"))), header.value("extra", json{})};
  auto params = ck.model.parameters();
  const auto& dir = header.at("tensors");
  if (dir.size() != params.size())
    throw Error("checkpoint '" + path.string() + "' has " + std::to_string(dir.size()) +
                " tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& e = dir[i];
    const auto sh = e.at("shape").get<std::array<int, 4>>();
    if (e.at("name") != p.name || !(Shape{sh[0], sh[1], sh[2], sh[3]} == p.value.shape()))
      throw Error("checkpoint tensor '" + e.at("name").get<std::string>() +
                  "' does not match model parameter '" + p.name + "' " + p.value.shape().str());
    const std::size_t off = e.at("offset");
    if (off + p.value.size() > payload.size()) throw Error("checkpoint payload is truncated");
    for (std::size_t k = 0; k < p.value.size(); ++k) p.value[k] = static_cast<T>(payload[off + k]);
  }
  std::size_t b = 0;
  const auto& bn = header.at("batchnorm");
  ck.model.for_each_bn([&](auto& layer) {
    layer.running_mean() = bn.at(b).at("mean").template get<std::vector<double>>();
    layer.running_var() = bn.at(b).at("var").template get<std::vector<double>>();
    ++b;
  });
  if (header.contains("quant")) {
    ck.model.attach_quantizers(quant_config_from_json(header.at("quant")));
    std::size_t k = 0;
    const auto& aq = header.at("activation_quantizers");
    ck.model.for_each_conv([&](auto& layer) {
      const auto& e = aq.at(k++);
      if (e.at("name") != layer.name())
        throw Error("activation quantizer state does not match layer " + layer.name());
      layer.quantizers().input->restore(e.at("running_max"), e.at("batches_seen"), e.at("frozen"));
    });
  }
  return ck;
}

}  // namespace qdr
