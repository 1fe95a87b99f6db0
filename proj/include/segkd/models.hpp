#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "segkd/layers.hpp"

namespace segkd {

enum class Role { benign_teacher, malignant_teacher, student };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::benign_teacher: return "benign_teacher";
    case Role::malignant_teacher: return "malignant_teacher";
    case Role::student: return "student";
  }
  return "?";
}

inline Role role_from_string(const std::string& s) {
  if (s == "benign_teacher") return Role::benign_teacher;
  if (s == "malignant_teacher") return Role::malignant_teacher;
  if (s == "student") return Role::student;
  throw ValidationError("unknown role: " + s);
}

// ---------------------------------------------------------------------------
// Attention gate
// ---------------------------------------------------------------------------

struct AttentionGateSpec {
  int skip_channels = 0;
  int gate_channels = 0;
  int inter_channels = 0;
};

/// Skip-connection gate: 1x1 projections of the gating signal and the skip
/// features are summed, rectified, reduced to one channel and squashed; the
/// resulting per-pixel coefficients in (0,1) scale the skip features. The
/// gating projection is resampled to the skip resolution when the two
/// disagree.
template <typename T>
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(const AttentionGateSpec& spec, Rng& rng)
      : spec_(spec),
        wg_(spec.gate_channels, spec.inter_channels, 1, 1, 0, true, rng),
        wx_(spec.skip_channels, spec.inter_channels, 1, 1, 0, true, rng),
        psi_(spec.inter_channels, 1, 1, 1, 0, true, rng) {
    if (spec.inter_channels < 1) throw ConfigError("attention gate: inter_channels must be >= 1");
  }

  Var<T> forward(const Var<T>& g, const Var<T>& x_l) const {
    check_inputs(g, x_l);
    const Var<T> coeff = coefficients(g, x_l);
    return mul(x_l, coeff);
  }

  /// The coefficient map alone (N,1,H,W), for inspection.
  Var<T> coefficients(const Var<T>& g, const Var<T>& x_l) const {
    check_inputs(g, x_l);
    Var<T> pg = wg_.forward(g);
    if (g.value().dim(2) != x_l.value().dim(2) || g.value().dim(3) != x_l.value().dim(3))
      pg = bilinear_resize(pg, x_l.value().dim(2), x_l.value().dim(3));
    const Var<T> px = wx_.forward(x_l);
    if (!pg.value().same_shape(px.value()))
      throw ShapeError("attention gate: projections disagree after resampling, " +
                       shape_str(pg.value().shape) + " vs " + shape_str(px.value().shape));
    return sigmoid(psi_.forward(relu(add(pg, px))));
  }

  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    wg_.collect(p + ".wg", out);
    wx_.collect(p + ".wx", out);
    psi_.collect(p + ".psi", out);
  }

  const AttentionGateSpec& spec() const { return spec_; }
  Conv2d<T>& wg() { return wg_; }
  Conv2d<T>& wx() { return wx_; }
  Conv2d<T>& psi() { return psi_; }

 private:
  void check_inputs(const Var<T>& g, const Var<T>& x_l) const {
    const Tensor<T>& gv = g.value();
    const Tensor<T>& xv = x_l.value();
    if (gv.rank() != 4 || xv.rank() != 4)
      throw ShapeError("attention gate: expected NCHW inputs");
    if (gv.dim(0) != xv.dim(0))
      throw ShapeError("attention gate: batch mismatch " + shape_str(gv.shape) + " vs " +
                       shape_str(xv.shape));
    if (gv.dim(1) != spec_.gate_channels)
      throw ShapeError("attention gate: gating signal has " + std::to_string(gv.dim(1)) +
                       " channels, spec expects " + std::to_string(spec_.gate_channels));
    if (xv.dim(1) != spec_.skip_channels)
      throw ShapeError("attention gate: skip has " + std::to_string(xv.dim(1)) +
                       " channels, spec expects " + std::to_string(spec_.skip_channels));
    if (!gv.all_finite() || !xv.all_finite())
      throw NumericError("attention gate: non-finite input");
  }

  AttentionGateSpec spec_;
  Conv2d<T> wg_, wx_, psi_;
};

template <typename T>
Var<T> attention_gate_forward(const AttentionGate<T>& gate, const Var<T>& g, const Var<T>& x_l) {
  return gate.forward(g, x_l);
}

// ---------------------------------------------------------------------------
// Soft attention rule
// ---------------------------------------------------------------------------

enum class SoftAttentionMode { sigmoid_binary, softmax_multiclass };

/// Per-channel weighting of a context feature map followed by either a
/// per-element squash (binary segmentation) or a channel softmax
/// (multi-class). The gate above uses the binary branch; the softmax branch
/// is wired up but unused by the bundled networks.
template <typename T>
Var<T> soft_attention_rule(const Var<T>& d, const std::vector<T>& channel_weights,
                           SoftAttentionMode mode) {
  const Tensor<T>& dv = d.value();
  if (dv.rank() != 4) throw ShapeError("soft_attention_rule: expected NCHW");
  if (static_cast<std::int64_t>(channel_weights.size()) != dv.dim(1))
    throw ShapeError("soft_attention_rule: weight count " +
                     std::to_string(channel_weights.size()) + " vs " +
                     std::to_string(dv.dim(1)) + " channels");
  Tensor<T> w(dv.shape);
  const std::int64_t N = dv.dim(0), C = dv.dim(1), HW = dv.dim(2) * dv.dim(3);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      T* p = &w.data[static_cast<std::size_t>((n * C + c) * HW)];
      for (std::int64_t i = 0; i < HW; ++i) p[i] = channel_weights[static_cast<std::size_t>(c)];
    }
  const Var<T> scores = mul(d, constant(std::move(w)));
  return mode == SoftAttentionMode::sigmoid_binary ? sigmoid(scores) : softmax_channels(scores);
}

// ---------------------------------------------------------------------------
// Network configurations and declarative descriptions
// ---------------------------------------------------------------------------

struct TeacherConfig {
  int in_channels = 3;
  int out_channels = 1;
  int stem_width = 64;
  std::array<int, 4> stage_blocks{3, 4, 23, 3};
  std::array<int, 4> stage_widths{256, 512, 1024, 2048};
  std::array<int, 4> decoder_widths{1024, 512, 256, 64};
  std::uint64_t seed = 42;
};

struct StudentConfig {
  int in_channels = 3;
  int out_channels = 1;
  std::vector<int> widths{16, 32, 64, 128, 256};
  std::uint64_t seed = 42;
};

namespace detail {

inline std::string emit_layer(ArchSpec& a, LayerSpec l) {
  a.layers.push_back(l);
  return l.name;
}

inline std::string emit_simple(ArchSpec& a, LayerKind kind, const std::string& name,
                               std::vector<std::string> inputs, int cin, int cout, int out_scale,
                               int kernel = 0, int stride = 1, int pad = 0) {
  LayerSpec l;
  l.kind = kind;
  l.name = name;
  l.inputs = std::move(inputs);
  l.in_channels = cin;
  l.out_channels = cout;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = pad;
  l.out_scale_log2 = out_scale;
  a.layers.push_back(std::move(l));
  return name;
}

inline std::string emit_conv(ArchSpec& a, const std::string& name,
                             std::vector<std::string> inputs, int cin, int cout, int k, int stride,
                             int pad, bool bias, int out_scale) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.name = name;
  l.inputs = std::move(inputs);
  l.in_channels = cin;
  l.out_channels = cout;
  l.kernel = k;
  l.stride = stride;
  l.padding = pad;
  l.has_bias = bias;
  l.out_scale_log2 = out_scale;
  a.layers.push_back(std::move(l));
  return name;
}

inline std::string emit_tconv(ArchSpec& a, const std::string& name, const std::string& input,
                              int cin, int cout, int out_scale) {
  LayerSpec l;
  l.kind = LayerKind::transpose_conv;
  l.name = name;
  l.inputs = {input};
  l.in_channels = cin;
  l.out_channels = cout;
  l.kernel = 3;
  l.stride = 2;
  l.padding = 1;
  l.has_bias = true;
  l.out_scale_log2 = out_scale;
  a.layers.push_back(std::move(l));
  return name;
}

inline std::string emit_double_conv(ArchSpec& a, const std::string& p,
                                    std::vector<std::string> inputs, int cin, int mid, int cout,
                                    int out_scale) {
  std::string cur =
      emit_conv(a, p + ".conv1", std::move(inputs), cin, mid, 3, 1, 1, true, out_scale);
  cur = emit_simple(a, LayerKind::batch_norm, p + ".bn1", {cur}, mid, mid, out_scale);
  cur = emit_simple(a, LayerKind::relu, p + ".relu1", {cur}, mid, mid, out_scale);
  cur = emit_conv(a, p + ".conv2", {cur}, mid, cout, 3, 1, 1, true, out_scale);
  cur = emit_simple(a, LayerKind::batch_norm, p + ".bn2", {cur}, cout, cout, out_scale);
  return emit_simple(a, LayerKind::relu, p + ".relu2", {cur}, cout, cout, out_scale);
}

}  // namespace detail

/// Declarative description of the teacher; shares its wiring constants with
/// TeacherNet and is cheap to build (no weights are allocated).
inline ArchSpec teacher_arch(const TeacherConfig& cfg) {
  for (int w : cfg.stage_widths)
    if (w % 4 != 0) throw ConfigError("teacher stage widths must be divisible by 4");
  ArchSpec a;
  a.input_channels = cfg.in_channels;
  std::string cur =
      detail::emit_conv(a, "stem.conv", {}, cfg.in_channels, cfg.stem_width, 7, 2, 3, false, -1);
  cur = detail::emit_simple(a, LayerKind::batch_norm, "stem.bn", {cur}, cfg.stem_width,
                            cfg.stem_width, -1);
  cur = detail::emit_simple(a, LayerKind::relu, "stem.relu", {cur}, cfg.stem_width,
                            cfg.stem_width, -1);
  const std::string s0 = cur;
  cur = detail::emit_simple(a, LayerKind::max_pool, "stem.pool", {cur}, cfg.stem_width,
                            cfg.stem_width, -2, 3, 2, 1);
  std::array<std::string, 4> stage_out;
  int prev = cfg.stem_width;
  int scale = -2;
  for (int s = 0; s < 4; ++s) {
    if (s > 0) scale -= 1;
    const int width = cfg.stage_widths[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg.stage_blocks[static_cast<std::size_t>(s)]; ++b) {
      LayerSpec l;
      l.kind = LayerKind::bottleneck_block;
      l.name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      l.inputs = {cur};
      l.in_channels = prev;
      l.out_channels = width;
      l.mid_channels = width / 4;
      l.kernel = 3;
      l.stride = (b == 0 && s > 0) ? 2 : 1;
      l.padding = 1;
      l.has_projection = (l.stride != 1 || prev != width);
      l.out_scale_log2 = scale;
      cur = detail::emit_layer(a, std::move(l));
      prev = width;
    }
    stage_out[static_cast<std::size_t>(s)] = cur;
  }
  const std::array<std::string, 4> skips{stage_out[2], stage_out[1], stage_out[0], s0};
  const std::array<int, 4> skip_ch{cfg.stage_widths[2], cfg.stage_widths[1], cfg.stage_widths[0],
                                   cfg.stem_width};
  scale = -5;
  for (int i = 0; i < 4; ++i) {
    scale += 1;
    const std::string p = "up" + std::to_string(i + 1);
    const int d = cfg.decoder_widths[static_cast<std::size_t>(i)];
    const int sc = skip_ch[static_cast<std::size_t>(i)];
    const std::string up = detail::emit_tconv(a, p + ".tconv", cur, prev, d, scale);
    LayerSpec g;
    g.kind = LayerKind::attention_gate;
    g.name = p + ".gate";
    g.inputs = {skips[static_cast<std::size_t>(i)], up};
    g.in_channels = sc;
    g.out_channels = sc;
    g.gate_channels = d;
    g.inter_channels = std::max(1, sc / 2);
    g.has_bias = true;
    g.out_scale_log2 = scale;
    const std::string gated = detail::emit_layer(a, std::move(g));
    const std::string cat = detail::emit_simple(a, LayerKind::concat, p + ".concat", {up, gated},
                                                d + sc, d + sc, scale);
    cur = detail::emit_double_conv(a, p + ".dconv", {cat}, d + sc, d, d, scale);
    prev = d;
  }
  cur = detail::emit_conv(a, "out.conv", {cur}, prev, cfg.out_channels, 1, 1, 0, true, -1);
  detail::emit_simple(a, LayerKind::bilinear_resize, "out.resize", {cur}, cfg.out_channels,
                      cfg.out_channels, 0);
  return a;
}

/// Declarative description of the student.
inline ArchSpec student_arch(const StudentConfig& cfg) {
  if (cfg.widths.size() < 2) throw ConfigError("student needs at least two levels");
  ArchSpec a;
  a.input_channels = cfg.in_channels;
  const int depth = static_cast<int>(cfg.widths.size());
  std::vector<std::string> skips;
  std::string cur =
      detail::emit_double_conv(a, "enc0", {}, cfg.in_channels, cfg.widths[0], cfg.widths[0], 0);
  for (int i = 1; i < depth; ++i) {
    skips.push_back(cur);
    const int c = cfg.widths[static_cast<std::size_t>(i - 1)];
    const int w = cfg.widths[static_cast<std::size_t>(i)];
    cur = detail::emit_simple(a, LayerKind::max_pool, "pool" + std::to_string(i - 1), {cur}, c, c,
                              -i, 2, 2, 0);
    cur = detail::emit_double_conv(a, "enc" + std::to_string(i), {cur}, c, w, w, -i);
  }
  for (int i = 0; i < depth - 1; ++i) {
    const int scale = -(depth - 2 - i);
    const int hi = cfg.widths[static_cast<std::size_t>(depth - 1 - i)];
    const int lo = cfg.widths[static_cast<std::size_t>(depth - 2 - i)];
    const std::string p = "up" + std::to_string(i);
    const std::string up = detail::emit_tconv(a, p + ".tconv", cur, hi, lo, scale);
    const std::string cat =
        detail::emit_simple(a, LayerKind::concat, p + ".concat",
                            {up, skips[skips.size() - 1 - static_cast<std::size_t>(i)]}, 2 * lo,
                            2 * lo, scale);
    cur = detail::emit_double_conv(a, p + ".dconv", {cat}, 2 * lo, lo, lo, scale);
  }
  detail::emit_conv(a, "out.conv", {cur}, cfg.widths[0], cfg.out_channels, 1, 1, 0, true, 0);
  return a;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

template <typename T>
class NetBase {
 public:
  virtual ~NetBase() = default;
  virtual Var<T> forward(const Var<T>& x) = 0;
  virtual void collect(std::vector<ParamRef<T>>& out) = 0;
  virtual void collect_buffers(std::vector<BufferRef<T>>& out) = 0;
  virtual void set_training(bool on) = 0;
  virtual int input_divisor() const = 0;
  virtual int in_channels() const = 0;
  virtual ArchSpec arch() const = 0;
};

/// Bottleneck-encoder attention U-Net. The encoder is a stride-2 stem plus
/// four bottleneck stages (five downsamplings in total); each decoder block
/// upsamples with a 3x3 stride-2 transposed convolution, gates the matching
/// encoder skip on the upsampled signal, concatenates and refines with a
/// double conv. A final 1x1 conv produces one logit channel which is resized
/// back to the input resolution.
template <typename T>
class TeacherNet : public NetBase<T> {
 public:
  explicit TeacherNet(const TeacherConfig& cfg) : cfg_(cfg) {
    for (int w : cfg.stage_widths)
      if (w % 4 != 0) throw ConfigError("teacher stage widths must be divisible by 4");
    Rng rng(cfg.seed);
    stem_ = Conv2d<T>(cfg.in_channels, cfg.stem_width, 7, 2, 3, false, rng);
    stem_bn_ = BatchNorm2d<T>(cfg.stem_width);
    int prev = cfg.stem_width;
    for (int s = 0; s < 4; ++s) {
      const int width = cfg.stage_widths[static_cast<std::size_t>(s)];
      const int mid = width / 4;
      std::vector<Bottleneck<T>> stage;
      for (int b = 0; b < cfg.stage_blocks[static_cast<std::size_t>(s)]; ++b) {
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        stage.emplace_back(prev, mid, width, stride, rng);
        prev = width;
      }
      stages_[static_cast<std::size_t>(s)] = std::move(stage);
    }
    const std::array<int, 4> skip_ch{cfg.stage_widths[2], cfg.stage_widths[1],
                                     cfg.stage_widths[0], cfg.stem_width};
    for (int i = 0; i < 4; ++i) {
      const int d = cfg.decoder_widths[static_cast<std::size_t>(i)];
      ups_[static_cast<std::size_t>(i)] = ConvTranspose2d<T>(prev, d, 3, 2, 1, 1, rng);
      const int sc = skip_ch[static_cast<std::size_t>(i)];
      gates_[static_cast<std::size_t>(i)] = AttentionGate<T>({sc, d, std::max(1, sc / 2)}, rng);
      dconvs_[static_cast<std::size_t>(i)] = DoubleConv<T>(d + sc, d, d, rng);
      prev = d;
    }
    out_conv_ = Conv2d<T>(prev, cfg.out_channels, 1, 1, 0, true, rng);
  }

  Var<T> forward(const Var<T>& x) override {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 4 || xv.dim(1) != cfg_.in_channels)
      throw ShapeError("teacher: expected (N," + std::to_string(cfg_.in_channels) +
                       ",H,W), got " + shape_str(xv.shape));
    if (xv.dim(2) % 32 != 0 || xv.dim(3) % 32 != 0)
      throw ConfigError("teacher: input resolution " + std::to_string(xv.dim(2)) + "x" +
                        std::to_string(xv.dim(3)) + " must be divisible by 32");
    encoder_trace_.clear();

    Var<T> s0 = relu(stem_bn_.forward(stem_.forward(x)));
    trace(s0);
    Var<T> cur = max_pool2d(s0, 3, 2, 1);
    for (auto& b : stages_[0]) cur = b.forward(cur);
    Var<T> s1 = cur;
    trace(s1);
    for (auto& b : stages_[1]) cur = b.forward(cur);
    Var<T> s2 = cur;
    trace(s2);
    for (auto& b : stages_[2]) cur = b.forward(cur);
    Var<T> s3 = cur;
    trace(s3);
    for (auto& b : stages_[3]) cur = b.forward(cur);
    trace(cur);

    const std::array<Var<T>, 4> skips{s3, s2, s1, s0};
    for (std::size_t i = 0; i < 4; ++i) {
      const Var<T> up = ups_[i].forward(cur);
      const Var<T> gated = gates_[i].forward(up, skips[i]);
      cur = dconvs_[i].forward(concat_channels<T>({up, gated}));
    }
    const Var<T> logits = out_conv_.forward(cur);
    return bilinear_resize(logits, xv.dim(2), xv.dim(3));
  }

  void collect(std::vector<ParamRef<T>>& out) override {
    stem_.collect("stem.conv", out);
    stem_bn_.collect("stem.bn", out);
    for (int s = 0; s < 4; ++s)
      for (std::size_t b = 0; b < stages_[static_cast<std::size_t>(s)].size(); ++b)
        stages_[static_cast<std::size_t>(s)][b].collect(
            "stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
    for (int i = 0; i < 4; ++i) {
      const std::string p = "up" + std::to_string(i + 1);
      ups_[static_cast<std::size_t>(i)].collect(p + ".tconv", out);
      gates_[static_cast<std::size_t>(i)].collect(p + ".gate", out);
      dconvs_[static_cast<std::size_t>(i)].collect(p + ".dconv", out);
    }
    out_conv_.collect("out.conv", out);
  }

  void collect_buffers(std::vector<BufferRef<T>>& out) override {
    stem_bn_.collect_buffers("stem.bn", out);
    for (int s = 0; s < 4; ++s)
      for (std::size_t b = 0; b < stages_[static_cast<std::size_t>(s)].size(); ++b)
        stages_[static_cast<std::size_t>(s)][b].collect_buffers(
            "stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
    for (int i = 0; i < 4; ++i)
      dconvs_[static_cast<std::size_t>(i)].collect_buffers(
          "up" + std::to_string(i + 1) + ".dconv", out);
  }

  void set_training(bool on) override {
    stem_bn_.set_training(on);
    for (auto& stage : stages_)
      for (auto& b : stage) b.set_training(on);
    for (auto& d : dconvs_) d.set_training(on);
  }

  int input_divisor() const override { return 32; }
  int in_channels() const override { return cfg_.in_channels; }
  ArchSpec arch() const override { return teacher_arch(cfg_); }

  /// Spatial heights recorded after each encoder downsampling of the last
  /// forward pass.
  const std::vector<std::int64_t>& encoder_trace() const { return encoder_trace_; }

  const TeacherConfig& config() const { return cfg_; }

 private:
  void trace(const Var<T>& v) { encoder_trace_.push_back(v.value().dim(2)); }

  TeacherConfig cfg_;
  Conv2d<T> stem_;
  BatchNorm2d<T> stem_bn_;
  std::array<std::vector<Bottleneck<T>>, 4> stages_;
  std::array<ConvTranspose2d<T>, 4> ups_;
  std::array<AttentionGate<T>, 4> gates_;
  std::array<DoubleConv<T>, 4> dconvs_;
  Conv2d<T> out_conv_;
  std::vector<std::int64_t> encoder_trace_;
};

/// Slim symmetric U-Net: double conv per level, 2x2 max pooling down, 3x3
/// stride-2 transposed conv up, plain skip concatenation, 1x1 output conv.
template <typename T>
class StudentNet : public NetBase<T> {
 public:
  explicit StudentNet(const StudentConfig& cfg) : cfg_(cfg) {
    if (cfg.widths.size() < 2) throw ConfigError("student needs at least two levels");
    Rng rng(cfg.seed);
    const int depth = static_cast<int>(cfg.widths.size());
    encs_.emplace_back(cfg.in_channels, cfg.widths[0], cfg.widths[0], rng);
    for (int i = 1; i < depth; ++i)
      encs_.emplace_back(cfg.widths[static_cast<std::size_t>(i - 1)],
                         cfg.widths[static_cast<std::size_t>(i)],
                         cfg.widths[static_cast<std::size_t>(i)], rng);
    for (int i = depth - 2; i >= 0; --i) {
      const int hi = cfg.widths[static_cast<std::size_t>(i + 1)];
      const int lo = cfg.widths[static_cast<std::size_t>(i)];
      ups_.emplace_back(hi, lo, 3, 2, 1, 1, rng);
      decs_.emplace_back(2 * lo, lo, lo, rng);
    }
    out_conv_ = Conv2d<T>(cfg.widths[0], cfg.out_channels, 1, 1, 0, true, rng);
  }

  Var<T> forward(const Var<T>& x) override {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 4 || xv.dim(1) != cfg_.in_channels)
      throw ShapeError("student: expected (N," + std::to_string(cfg_.in_channels) +
                       ",H,W), got " + shape_str(xv.shape));
    const int div = input_divisor();
    if (xv.dim(2) % div != 0 || xv.dim(3) % div != 0)
      throw ConfigError("student: input resolution " + std::to_string(xv.dim(2)) + "x" +
                        std::to_string(xv.dim(3)) + " must be divisible by " +
                        std::to_string(div));

    std::vector<Var<T>> skips;
    Var<T> cur = encs_[0].forward(x);
    for (std::size_t i = 1; i < encs_.size(); ++i) {
      skips.push_back(cur);
      cur = encs_[i].forward(max_pool2d(cur, 2, 2, 0));
    }
    for (std::size_t i = 0; i < ups_.size(); ++i) {
      const Var<T> up = ups_[i].forward(cur);
      cur = decs_[i].forward(concat_channels<T>({up, skips[skips.size() - 1 - i]}));
    }
    return out_conv_.forward(cur);
  }

  void collect(std::vector<ParamRef<T>>& out) override {
    for (std::size_t i = 0; i < encs_.size(); ++i)
      encs_[i].collect("enc" + std::to_string(i), out);
    for (std::size_t i = 0; i < ups_.size(); ++i) {
      ups_[i].collect("up" + std::to_string(i) + ".tconv", out);
      decs_[i].collect("up" + std::to_string(i) + ".dconv", out);
    }
    out_conv_.collect("out.conv", out);
  }

  void collect_buffers(std::vector<BufferRef<T>>& out) override {
    for (std::size_t i = 0; i < encs_.size(); ++i)
      encs_[i].collect_buffers("enc" + std::to_string(i), out);
    for (std::size_t i = 0; i < decs_.size(); ++i)
      decs_[i].collect_buffers("up" + std::to_string(i) + ".dconv", out);
  }

  void set_training(bool on) override {
    for (auto& e : encs_) e.set_training(on);
    for (auto& d : decs_) d.set_training(on);
  }

  int input_divisor() const override { return 1 << (static_cast<int>(cfg_.widths.size()) - 1); }
  int in_channels() const override { return cfg_.in_channels; }
  ArchSpec arch() const override { return student_arch(cfg_); }

  const StudentConfig& config() const { return cfg_; }

 private:
  StudentConfig cfg_;
  std::vector<DoubleConv<T>> encs_;
  std::vector<ConvTranspose2d<T>> ups_;
  std::vector<DoubleConv<T>> decs_;
  Conv2d<T> out_conv_;
};

// ---------------------------------------------------------------------------
// Handles
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TeacherConfig& c) {
  return {{"in_channels", c.in_channels},   {"out_channels", c.out_channels},
          {"stem_width", c.stem_width},     {"stage_blocks", c.stage_blocks},
          {"stage_widths", c.stage_widths}, {"decoder_widths", c.decoder_widths},
          {"seed", c.seed}};
}

inline TeacherConfig teacher_config_from_json(const nlohmann::json& j) {
  TeacherConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.stem_width = j.at("stem_width").get<int>();
  c.stage_blocks = j.at("stage_blocks").get<std::array<int, 4>>();
  c.stage_widths = j.at("stage_widths").get<std::array<int, 4>>();
  c.decoder_widths = j.at("decoder_widths").get<std::array<int, 4>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json to_json(const StudentConfig& c) {
  return {{"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"widths", c.widths},
          {"seed", c.seed}};
}

inline StudentConfig student_config_from_json(const nlohmann::json& j) {
  StudentConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

/// A constructed network plus its declarative description. The description
/// comes from the same wiring constants as the weights; the analyzer's
/// parameter count is cross-checked against the instantiated weights in the
/// test suite.
template <typename T>
struct NetworkHandle {
  Role role = Role::student;
  ArchSpec arch;
  std::shared_ptr<NetBase<T>> net;
  nlohmann::json model_config;

  std::vector<ParamRef<T>> params() const {
    std::vector<ParamRef<T>> out;
    net->collect(out);
    return out;
  }
  std::vector<BufferRef<T>> buffers() const {
    std::vector<BufferRef<T>> out;
    net->collect_buffers(out);
    return out;
  }

  std::int64_t num_parameters() const {
    std::int64_t n = 0;
    for (const auto& p : params()) n += p.var->value().numel();
    return n;
  }
};

template <typename T = float>
NetworkHandle<T> build_teacher(const TeacherConfig& cfg, Role role = Role::benign_teacher) {
  if (role == Role::student) throw ConfigError("teacher handle cannot have student role");
  NetworkHandle<T> h;
  h.role = role;
  h.net = std::make_shared<TeacherNet<T>>(cfg);
  h.arch = h.net->arch();
  validate(h.arch);
  h.model_config = {{"kind", "teacher"}, {"teacher", to_json(cfg)}};
  return h;
}

template <typename T = float>
NetworkHandle<T> build_student(const StudentConfig& cfg) {
  NetworkHandle<T> h;
  h.role = Role::student;
  h.net = std::make_shared<StudentNet<T>>(cfg);
  h.arch = h.net->arch();
  validate(h.arch);
  h.model_config = {{"kind", "student"}, {"student", to_json(cfg)}};
  return h;
}

template <typename T>
NetworkHandle<T> build_from_config_json(const nlohmann::json& j, Role role) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "teacher") return build_teacher<T>(teacher_config_from_json(j.at("teacher")), role);
  if (kind == "student") return build_student<T>(student_config_from_json(j.at("student")));
  throw ValidationError("unknown model kind: " + kind);
}

/// Runs a batch through the network, returning pre-sigmoid logits.
template <typename T>
Var<T> forward(NetworkHandle<T>& h, const Tensor<T>& batch) {
  if (batch.rank() != 4 || batch.dim(1) != h.net->in_channels())
    throw ShapeError("forward: batch " + shape_str(batch.shape) + " does not match network (" +
                     std::to_string(h.net->in_channels()) + " input channels)");
  return h.net->forward(constant(batch));
}

}  // namespace segkd
