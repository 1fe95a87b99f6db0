#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "segkd/errors.hpp"

namespace segkd {

enum class LayerKind {
  conv,
  batch_norm,
  relu,
  sigmoid,
  max_pool,
  transpose_conv,
  bottleneck_block,
  attention_gate,
  concat,
  bilinear_resize,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::transpose_conv: return "transpose_conv";
    case LayerKind::bottleneck_block: return "bottleneck_block";
    case LayerKind::attention_gate: return "attention_gate";
    case LayerKind::concat: return "concat";
    case LayerKind::bilinear_resize: return "bilinear_resize";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  static const std::map<std::string, LayerKind> m = {
      {"conv", LayerKind::conv},
      {"batch_norm", LayerKind::batch_norm},
      {"relu", LayerKind::relu},
      {"sigmoid", LayerKind::sigmoid},
      {"max_pool", LayerKind::max_pool},
      {"transpose_conv", LayerKind::transpose_conv},
      {"bottleneck_block", LayerKind::bottleneck_block},
      {"attention_gate", LayerKind::attention_gate},
      {"concat", LayerKind::concat},
      {"bilinear_resize", LayerKind::bilinear_resize},
  };
  auto it = m.find(s);
  if (it == m.end()) throw ValidationError("unknown layer kind: " + s);
  return it->second;
}

/// One node in the declarative layer graph. `inputs` names producer layers;
/// a layer with no inputs consumes the network input. `out_scale_log2` gives
/// the output spatial size as input_resolution * 2^out_scale_log2, which is
/// what the FLOP counter needs.
///
/// Kind-specific extras: bottleneck_block uses mid_channels and
/// has_projection; attention_gate uses gate_channels and inter_channels
/// (inputs are [skip, gate]).
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  std::vector<std::string> inputs;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  bool has_bias = false;
  int mid_channels = 0;
  bool has_projection = false;
  int gate_channels = 0;
  int inter_channels = 0;
  int out_scale_log2 = 0;
};

struct ArchSpec {
  int input_channels = 3;
  std::vector<LayerSpec> layers;
};

/// Checks that channel counts chain consistently along every edge of the
/// graph and that composite blocks are internally coherent.
inline void validate(const ArchSpec& spec) {
  std::map<std::string, const LayerSpec*> by_name;
  for (const auto& l : spec.layers) {
    if (l.name.empty()) throw ValidationError("layer with empty name");
    if (!by_name.emplace(l.name, &l).second)
      throw ValidationError("duplicate layer name: " + l.name);
  }
  auto producer = [&](const LayerSpec& l, const std::string& ref) -> const LayerSpec& {
    auto it = by_name.find(ref);
    if (it == by_name.end())
      throw ValidationError("layer " + l.name + " references unknown input " + ref);
    return *it->second;
  };
  for (const auto& l : spec.layers) {
    const int fed = l.inputs.empty() ? spec.input_channels : 0;
    switch (l.kind) {
      case LayerKind::concat: {
        int sum = 0;
        for (const auto& r : l.inputs) sum += producer(l, r).out_channels;
        if (l.inputs.empty()) sum = spec.input_channels;
        if (sum != l.in_channels)
          throw ValidationError("layer " + l.name + ": concat inputs provide " +
                                std::to_string(sum) + " channels, declared " +
                                std::to_string(l.in_channels));
        if (l.out_channels != l.in_channels)
          throw ValidationError("layer " + l.name + ": concat must preserve channel total");
        break;
      }
      case LayerKind::attention_gate: {
        if (l.inputs.size() != 2)
          throw ValidationError("layer " + l.name + ": attention_gate expects [skip, gate]");
        const auto& skip = producer(l, l.inputs[0]);
        const auto& gate = producer(l, l.inputs[1]);
        if (skip.out_channels != l.in_channels)
          throw ValidationError("layer " + l.name + ": skip provides " +
                                std::to_string(skip.out_channels) + " channels, declared " +
                                std::to_string(l.in_channels));
        if (gate.out_channels != l.gate_channels)
          throw ValidationError("layer " + l.name + ": gate provides " +
                                std::to_string(gate.out_channels) + " channels, declared " +
                                std::to_string(l.gate_channels));
        if (l.out_channels != l.in_channels)
          throw ValidationError("layer " + l.name + ": gate output must match skip channels");
        if (l.inter_channels < 1)
          throw ValidationError("layer " + l.name + ": inter_channels must be >= 1");
        break;
      }
      case LayerKind::bottleneck_block: {
        if (l.inputs.size() != 1)
          throw ValidationError("layer " + l.name + ": expects one input");
        const int in = fed ? fed : producer(l, l.inputs[0]).out_channels;
        if (in != l.in_channels)
          throw ValidationError("layer " + l.name + ": input provides " + std::to_string(in) +
                                " channels, declared " + std::to_string(l.in_channels));
        if (l.mid_channels <= 0 || l.mid_channels * 4 != l.out_channels)
          throw ValidationError("layer " + l.name +
                                ": bottleneck must expand 1x1 reduce -> 3x3 -> 1x1 to 4x mid");
        break;
      }
      default: {
        if (l.inputs.size() > 1)
          throw ValidationError("layer " + l.name + ": expects at most one input");
        const int in = l.inputs.empty() ? fed : producer(l, l.inputs[0]).out_channels;
        if (in != l.in_channels)
          throw ValidationError("layer " + l.name + ": input provides " + std::to_string(in) +
                                " channels, declared " + std::to_string(l.in_channels));
        break;
      }
    }
  }
}

inline nlohmann::json to_json(const ArchSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j{{"kind", to_string(l.kind)},
                     {"name", l.name},
                     {"inputs", l.inputs},
                     {"in_channels", l.in_channels},
                     {"out_channels", l.out_channels},
                     {"kernel", l.kernel},
                     {"stride", l.stride},
                     {"padding", l.padding},
                     {"has_bias", l.has_bias},
                     {"out_scale_log2", l.out_scale_log2}};
    if (l.kind == LayerKind::bottleneck_block) {
      j["mid_channels"] = l.mid_channels;
      j["has_projection"] = l.has_projection;
    }
    if (l.kind == LayerKind::attention_gate) {
      j["gate_channels"] = l.gate_channels;
      j["inter_channels"] = l.inter_channels;
    }
    layers.push_back(std::move(j));
  }
  return nlohmann::json{{"input_channels", spec.input_channels}, {"layers", layers}};
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec spec;
  spec.input_channels = j.at("input_channels").get<int>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
    l.name = lj.at("name").get<std::string>();
    l.inputs = lj.at("inputs").get<std::vector<std::string>>();
    l.in_channels = lj.at("in_channels").get<int>();
    l.out_channels = lj.at("out_channels").get<int>();
    l.kernel = lj.at("kernel").get<int>();
    l.stride = lj.at("stride").get<int>();
    l.padding = lj.at("padding").get<int>();
    l.has_bias = lj.at("has_bias").get<bool>();
    l.out_scale_log2 = lj.at("out_scale_log2").get<int>();
    l.mid_channels = lj.value("mid_channels", 0);
    l.has_projection = lj.value("has_projection", false);
    l.gate_channels = lj.value("gate_channels", 0);
    l.inter_channels = lj.value("inter_channels", 0);
    spec.layers.push_back(std::move(l));
  }
  return spec;
}

/// Stable FNV-1a hash of the canonical JSON encoding; used to tie checkpoint
/// blobs to the architecture that produced them.
inline std::uint64_t arch_hash(const ArchSpec& spec) {
  const std::string dump = to_json(spec).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace segkd
