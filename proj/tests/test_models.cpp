#include <catch2/catch_amalgamated.hpp>

#include "segkd/complexity.hpp"
#include "segkd/models.hpp"
#include "support.hpp"

using namespace segkd;
using testutil::max_rel_grad_error;
using testutil::random_tensor;

namespace {

template <typename T>
void set_identity_1x1(Conv2d<T>& conv, T w) {
  conv.weight().value().fill(w);
  conv.bias().value().fill(T(0));
}

TeacherConfig tiny_teacher_config() {
  TeacherConfig cfg;
  cfg.stem_width = 8;
  cfg.stage_blocks = {1, 1, 1, 1};
  cfg.stage_widths = {8, 16, 32, 64};
  cfg.decoder_widths = {16, 8, 8, 8};
  cfg.seed = 3;
  return cfg;
}

Var<float> const_input(std::int64_t n, std::int64_t c, std::int64_t s, float v) {
  return constant(Tensor<float>({n, c, s, s}, v));
}

}  // namespace

TEST_CASE("attention gate scalar oracle") {
  Rng rng(1);
  AttentionGate<double> gate({1, 1, 1}, rng);
  set_identity_1x1(gate.wg(), 1.0);
  set_identity_1x1(gate.wx(), 1.0);
  set_identity_1x1(gate.psi(), 1.0);

  Var<double> g = constant(Tensor<double>({1, 1, 1, 1}, 2.0));
  Var<double> x = constant(Tensor<double>({1, 1, 1, 1}, 2.0));
  const double coeff = gate.coefficients(g, x).value()[0];
  const double out = gate.forward(g, x).value()[0];
  CHECK(coeff == Catch::Approx(0.98201).margin(1e-5));
  CHECK(out == Catch::Approx(1.96403).margin(1e-5));
}

TEST_CASE("attention gate saturates to pass-through and to zero") {
  Rng rng(2);
  AttentionGate<float> gate({1, 1, 1}, rng);
  set_identity_1x1(gate.wg(), 1.0f);
  set_identity_1x1(gate.wx(), 1.0f);
  Var<float> g = const_input(1, 1, 4, 1.0f);
  Var<float> x = const_input(1, 1, 4, 1.0f);

  gate.psi().weight().value().fill(1000.0f);
  gate.psi().bias().value().fill(0.0f);
  Var<float> pass = gate.forward(g, x);
  for (std::int64_t i = 0; i < pass.value().numel(); ++i)
    CHECK(pass.value()[i] == Catch::Approx(1.0f).margin(1e-6));

  gate.psi().weight().value().fill(-1000.0f);
  Var<float> zero = gate.forward(g, x);
  for (std::int64_t i = 0; i < zero.value().numel(); ++i)
    CHECK(zero.value()[i] == Catch::Approx(0.0f).margin(1e-6));
}

TEST_CASE("attention gate coefficients stay in (0,1) and damp the skip") {
  Rng rng(3);
  AttentionGate<float> gate({4, 6, 2}, rng);
  Var<float> g(testutil::random_tensor_t<float>({2, 6, 8, 8}, 7, -2, 2));
  Var<float> x(testutil::random_tensor_t<float>({2, 4, 8, 8}, 8, -2, 2));
  Var<float> coeff = gate.coefficients(g, x);
  Var<float> out = gate.forward(g, x);
  REQUIRE(out.value().shape == x.value().shape);
  for (std::int64_t i = 0; i < coeff.value().numel(); ++i) {
    CHECK(coeff.value()[i] > 0.0f);
    CHECK(coeff.value()[i] < 1.0f);
  }
  for (std::int64_t i = 0; i < out.value().numel(); ++i)
    CHECK(std::abs(out.value()[i]) <= std::abs(x.value()[i]));
}

TEST_CASE("attention gate resamples a coarser gating signal") {
  Rng rng(4);
  AttentionGate<float> gate({3, 5, 2}, rng);
  Var<float> g(testutil::random_tensor_t<float>({1, 5, 4, 4}, 9, -1, 1));
  Var<float> x(testutil::random_tensor_t<float>({1, 3, 8, 8}, 10, -1, 1));
  Var<float> out = gate.forward(g, x);
  REQUIRE(out.value().shape == x.value().shape);
}

TEST_CASE("attention gate rejects bad inputs") {
  Rng rng(5);
  AttentionGate<float> gate({3, 5, 2}, rng);
  Var<float> g(testutil::random_tensor_t<float>({1, 5, 4, 4}, 11, -1, 1));
  Var<float> x(testutil::random_tensor_t<float>({1, 3, 8, 8}, 12, -1, 1));

  Var<float> bad_channels(testutil::random_tensor_t<float>({1, 4, 8, 8}, 13, -1, 1));
  CHECK_THROWS_AS(gate.forward(g, bad_channels), ShapeError);
  Var<float> bad_batch(testutil::random_tensor_t<float>({2, 5, 4, 4}, 14, -1, 1));
  CHECK_THROWS_AS(gate.forward(bad_batch, x), ShapeError);

  Tensor<float> nan_t({1, 5, 4, 4}, 0.0f);
  nan_t[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(gate.forward(constant(nan_t), x), NumericError);
}

TEST_CASE("attention gate gradients match finite differences") {
  Rng rng(6);
  AttentionGate<double> gate({1, 1, 1}, rng);
  Var<double> g(random_tensor({1, 1, 2, 2}, 15, -1, 1), true);
  Var<double> x(random_tensor({1, 1, 2, 2}, 16, -1, 1), true);
  std::vector<Var<double>*> leaves{&g,
                                   &x,
                                   &gate.wg().weight(),
                                   &gate.wg().bias(),
                                   &gate.wx().weight(),
                                   &gate.wx().bias(),
                                   &gate.psi().weight(),
                                   &gate.psi().bias()};
  std::int64_t scalars = 0;
  for (auto* l : leaves) scalars += l->value().numel();
  REQUIRE(scalars <= 16);
  auto fn = [&] { return mean_all(mul(gate.forward(g, x), gate.forward(g, x))); };
  CHECK(max_rel_grad_error(fn, leaves, 1e-5) < 1e-3);
}

TEST_CASE("soft attention rule branches") {
  Var<float> d(testutil::random_tensor_t<float>({2, 4, 3, 3}, 17, -2, 2));
  const std::vector<float> weights{0.5f, -1.0f, 2.0f, 0.25f};

  Var<float> sig = soft_attention_rule(d, weights, SoftAttentionMode::sigmoid_binary);
  for (std::int64_t i = 0; i < sig.value().numel(); ++i) {
    CHECK(sig.value()[i] > 0.0f);
    CHECK(sig.value()[i] < 1.0f);
  }

  Var<float> sm = soft_attention_rule(d, weights, SoftAttentionMode::softmax_multiclass);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < 9; ++i) {
      float s = 0;
      for (std::int64_t c = 0; c < 4; ++c) s += sm.value()[(n * 4 + c) * 9 + i];
      CHECK(s == Catch::Approx(1.0f).epsilon(1e-5));
    }
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

TEST_CASE("student parameter count matches the analyzer exactly") {
  StudentConfig cfg;
  NetworkHandle<float> h = build_student<float>(cfg);
  const std::int64_t analyzed = count_params(h.arch);
  CHECK(h.num_parameters() == analyzed);
  CHECK(analyzed == 2161649);
  CHECK(std::abs(analyzed / 1e6 - 2.2) / 2.2 < 0.15);
}

TEST_CASE("student forward maps (1,3,64,64) to (1,1,64,64)") {
  NetworkHandle<float> h = build_student<float>(StudentConfig{});
  NoGradGuard ng;
  h.net->set_training(false);
  Var<float> out = forward(h, Tensor<float>({1, 3, 64, 64}, 0.5f));
  REQUIRE(out.value().shape == std::vector<std::int64_t>{1, 1, 64, 64});
  CHECK(out.value().all_finite());
}

TEST_CASE("student output resolution equals input resolution") {
  NetworkHandle<float> h = build_student<float>(StudentConfig{});
  NoGradGuard ng;
  h.net->set_training(false);
  for (int s : {32, 48, 96}) {
    Var<float> out = forward(h, Tensor<float>({1, 3, s, s}, 0.3f));
    CHECK(out.value().dim(2) == s);
    CHECK(out.value().dim(3) == s);
  }
}

TEST_CASE("student rejects resolutions that do not divide") {
  NetworkHandle<float> h = build_student<float>(StudentConfig{});
  NoGradGuard ng;
  CHECK_THROWS_AS(forward(h, Tensor<float>({1, 3, 72, 72}, 0.0f)), ConfigError);
  CHECK_THROWS_AS(forward(h, Tensor<float>({1, 2, 64, 64}, 0.0f)), ShapeError);
}

TEST_CASE("zero final conv yields all-0.5 probabilities") {
  StudentConfig cfg;
  cfg.widths = {8, 16};
  NetworkHandle<float> h = build_student<float>(cfg);
  for (const auto& p : h.params()) {
    if (p.name == "out.conv.weight" || p.name == "out.conv.bias") p.var->value().fill(0.0f);
  }
  NoGradGuard ng;
  h.net->set_training(false);
  Var<float> logits = forward(h, testutil::random_tensor_t<float>({2, 3, 16, 16}, 19, 0, 1));
  for (std::int64_t i = 0; i < logits.value().numel(); ++i) {
    REQUIRE(logits.value()[i] == 0.0f);
    CHECK(1.0f / (1.0f + std::exp(-logits.value()[i])) == 0.5f);
  }
}

TEST_CASE("inference is deterministic and batch axis carries through") {
  StudentConfig cfg;
  cfg.widths = {8, 16, 32};
  NetworkHandle<float> h = build_student<float>(cfg);
  NoGradGuard ng;
  h.net->set_training(false);
  Tensor<float> batch = testutil::random_tensor_t<float>({3, 3, 32, 32}, 20, 0, 1);
  Var<float> a = forward(h, batch);
  Var<float> b = forward(h, batch);
  REQUIRE(a.value().dim(0) == 3);
  for (std::int64_t i = 0; i < a.value().numel(); ++i) REQUIRE(a.value()[i] == b.value()[i]);

  NetworkHandle<float> h2 = build_student<float>(cfg);
  h2.net->set_training(false);
  Var<float> c = forward(h2, batch);
  for (std::int64_t i = 0; i < a.value().numel(); ++i)
    REQUIRE(a.value()[i] == c.value()[i]);  // same seed, same weights
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

TEST_CASE("teacher budgets match the reference figures within 15%") {
  const ArchSpec arch = teacher_arch(TeacherConfig{});
  const std::int64_t params = count_params(arch);
  CHECK(std::abs(params / 1e6 - 106.1) / 106.1 < 0.15);
  const double gflops = count_flops(arch, 512);
  CHECK(std::abs(gflops - 205.98) / 205.98 < 0.15);
}

TEST_CASE("scaled teacher instantiation matches the analyzer exactly") {
  NetworkHandle<float> h = build_teacher<float>(tiny_teacher_config());
  CHECK(h.num_parameters() == count_params(h.arch));
}

TEST_CASE("teacher forward halves the resolution five times and restores it") {
  NetworkHandle<float> h = build_teacher<float>(tiny_teacher_config());
  NoGradGuard ng;
  h.net->set_training(false);
  Var<float> out = forward(h, Tensor<float>({1, 3, 128, 128}, 0.4f));
  REQUIRE(out.value().shape == std::vector<std::int64_t>{1, 1, 128, 128});
  auto* teacher = dynamic_cast<TeacherNet<float>*>(h.net.get());
  REQUIRE(teacher != nullptr);
  CHECK(teacher->encoder_trace() == std::vector<std::int64_t>{64, 32, 16, 8, 4});

  CHECK_THROWS_AS(forward(h, Tensor<float>({1, 3, 48, 48}, 0.0f)), ConfigError);
}

TEST_CASE("full-size teacher instantiates with the analyzed parameter count", "[slow]") {
  TeacherConfig cfg;
  NetworkHandle<float> h = build_teacher<float>(cfg, Role::malignant_teacher);
  CHECK(h.num_parameters() == count_params(h.arch));
  CHECK(h.num_parameters() == 106085925);
}

TEST_CASE("full-size teacher forward contract at 512", "[slow]") {
  NetworkHandle<float> h = build_teacher<float>(TeacherConfig{});
  NoGradGuard ng;
  h.net->set_training(false);
  Var<float> out = forward(h, testutil::random_tensor_t<float>({2, 3, 512, 512}, 21, 0, 1));
  REQUIRE(out.value().shape == std::vector<std::int64_t>{2, 1, 512, 512});
  CHECK(out.value().all_finite());
  auto* teacher = dynamic_cast<TeacherNet<float>*>(h.net.get());
  CHECK(teacher->encoder_trace() == std::vector<std::int64_t>{256, 128, 64, 32, 16});
}

TEST_CASE("arch specs serialize through JSON") {
  const ArchSpec a = student_arch(StudentConfig{});
  const ArchSpec b = arch_from_json(to_json(a));
  validate(b);
  CHECK(arch_hash(a) == arch_hash(b));
  CHECK(count_params(a) == count_params(b));
  CHECK(count_flops(a, 64) == count_flops(b, 64));
}

TEST_CASE("arch validation catches inconsistent channel chains") {
  ArchSpec a = student_arch(StudentConfig{});
  a.layers[3].in_channels += 1;
  CHECK_THROWS_AS(validate(a), ValidationError);
}
