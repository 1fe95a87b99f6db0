#pragma once

#include <cstdint>
#include <string>

#include "segkd/arch.hpp"
#include "segkd/models.hpp"

namespace segkd {

struct ComplexityReport {
  std::int64_t params = 0;
  double size_mib = 0;  // params * 4 bytes / 2^20, 32-bit weights
  double gflops = 0;    // multiply-accumulates / 1e9 at the stated resolution
};

namespace detail {

inline std::int64_t layer_params(const LayerSpec& l) {
  const auto conv_params = [](std::int64_t cin, std::int64_t cout, std::int64_t k, bool bias) {
    return k * k * cin * cout + (bias ? cout : 0);
  };
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::transpose_conv:
      return conv_params(l.in_channels, l.out_channels, l.kernel, l.has_bias);
    case LayerKind::batch_norm:
      return 2l * l.out_channels;
    case LayerKind::bottleneck_block: {
      const std::int64_t mid = l.mid_channels;
      std::int64_t p = conv_params(l.in_channels, mid, 1, false) + 2 * mid +
                       conv_params(mid, mid, 3, false) + 2 * mid +
                       conv_params(mid, l.out_channels, 1, false) + 2l * l.out_channels;
      if (l.has_projection)
        p += conv_params(l.in_channels, l.out_channels, 1, false) + 2l * l.out_channels;
      return p;
    }
    case LayerKind::attention_gate:
      return conv_params(l.gate_channels, l.inter_channels, 1, true) +
             conv_params(l.in_channels, l.inter_channels, 1, true) +
             conv_params(l.inter_channels, 1, 1, true);
    default:
      return 0;  // pooling, activations, concat, resize
  }
}

inline std::int64_t scaled_res(const LayerSpec& l, std::int64_t resolution, int extra_up = 0) {
  const int down = -(l.out_scale_log2 + extra_up);
  if (down <= 0) return resolution << (l.out_scale_log2 + extra_up);
  const std::int64_t div = std::int64_t(1) << down;
  if (resolution % div != 0)
    throw ConfigError("resolution " + std::to_string(resolution) +
                      " is not divisible as required by layer " + l.name);
  return resolution / div;
}

/// Multiply-accumulates of one layer at the given input resolution. Weighted
/// layers are charged kernel * C_in * C_out per output pixel (transposed
/// convolutions analogously, over their upsampled output); normalization,
/// activations, pooling and resampling are free.
inline std::int64_t layer_macs(const LayerSpec& l, std::int64_t resolution) {
  const auto hw = [&](std::int64_t r) { return r * r; };
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::transpose_conv: {
      const std::int64_t out_hw = hw(scaled_res(l, resolution));
      return static_cast<std::int64_t>(l.kernel) * l.kernel * l.in_channels * l.out_channels *
             out_hw;
    }
    case LayerKind::bottleneck_block: {
      const std::int64_t out_hw = hw(scaled_res(l, resolution));
      const std::int64_t in_hw = hw(scaled_res(l, resolution, l.stride == 2 ? 1 : 0));
      const std::int64_t mid = l.mid_channels;
      std::int64_t m = l.in_channels * mid * in_hw;          // 1x1 reduce at input size
      m += 9 * mid * mid * out_hw;                           // 3x3 carries the stride
      m += mid * static_cast<std::int64_t>(l.out_channels) * out_hw;  // 1x1 expand
      if (l.has_projection) m += static_cast<std::int64_t>(l.in_channels) * l.out_channels * out_hw;
      return m;
    }
    case LayerKind::attention_gate: {
      const std::int64_t out_hw = hw(scaled_res(l, resolution));
      return (static_cast<std::int64_t>(l.gate_channels) * l.inter_channels +
              static_cast<std::int64_t>(l.in_channels) * l.inter_channels + l.inter_channels) *
             out_hw;
    }
    default:
      return 0;
  }
}

}  // namespace detail

/// Exact trainable-parameter count of a validated layer graph.
inline std::int64_t count_params(const ArchSpec& spec) {
  validate(spec);
  std::int64_t total = 0;
  for (const auto& l : spec.layers) total += detail::layer_params(l);
  return total;
}

/// Analytic forward-pass GFLOPs (1 MAC = 1 FLOP) at a square input
/// resolution.
inline double count_flops(const ArchSpec& spec, std::int64_t resolution) {
  validate(spec);
  std::int64_t total = 0;
  for (const auto& l : spec.layers) total += detail::layer_macs(l, resolution);
  return static_cast<double>(total) / 1e9;
}

inline ComplexityReport analyze(const ArchSpec& spec, std::int64_t resolution) {
  ComplexityReport r;
  r.params = count_params(spec);
  r.size_mib = static_cast<double>(r.params) * 4.0 / (1024.0 * 1024.0);
  r.gflops = count_flops(spec, resolution);
  return r;
}

/// The plain encoder-decoder baseline used for calibration: widths 64..1024,
/// double convs with batch norm, 2x2 max pooling, 3x3 stride-2 transposed
/// convolutions, 1x1 output conv.
inline ArchSpec make_unet_reference_spec(int in_channels = 3, int out_channels = 1) {
  ArchSpec a;
  a.input_channels = in_channels;
  const int widths[5] = {64, 128, 256, 512, 1024};
  std::vector<std::string> skips;
  std::string cur = detail::emit_double_conv(a, "enc0", {}, in_channels, widths[0], widths[0], 0);
  for (int i = 1; i < 5; ++i) {
    skips.push_back(cur);
    cur = detail::emit_simple(a, LayerKind::max_pool, "pool" + std::to_string(i - 1), {cur},
                              widths[i - 1], widths[i - 1], -i, 2, 2, 0);
    cur = detail::emit_double_conv(a, "enc" + std::to_string(i), {cur}, widths[i - 1], widths[i],
                                   widths[i], -i);
  }
  for (int i = 0; i < 4; ++i) {
    const int scale = -(3 - i);
    const int hi = widths[4 - i], lo = widths[3 - i];
    const std::string p = "up" + std::to_string(i);
    const std::string up = detail::emit_tconv(a, p + ".tconv", cur, hi, lo, scale);
    const std::string cat = detail::emit_simple(a, LayerKind::concat, p + ".concat",
                                                {up, skips[static_cast<std::size_t>(3 - i)]},
                                                2 * lo, 2 * lo, scale);
    cur = detail::emit_double_conv(a, p + ".dconv", {cat}, 2 * lo, lo, lo, scale);
  }
  detail::emit_conv(a, "out.conv", {cur}, widths[0], out_channels, 1, 1, 0, true, 0);
  return a;
}

/// Built-in model names understood by the analyze command.
inline ArchSpec named_arch(const std::string& name) {
  if (name == "unet_reference") return make_unet_reference_spec();
  if (name == "teacher") return teacher_arch(TeacherConfig{});
  if (name == "student") return student_arch(StudentConfig{});
  throw ConfigError("unknown model name: " + name +
                    " (expected unet_reference, teacher or student)");
}

}  // namespace segkd
