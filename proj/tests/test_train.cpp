#include <catch2/catch_amalgamated.hpp>

#include "segkd/config.hpp"
#include "segkd/train.hpp"
#include "support.hpp"

using namespace segkd;

namespace {

StudentConfig tiny_student() {
  StudentConfig cfg;
  cfg.widths = {4, 8};
  return cfg;
}

TeacherConfig tiny_teacher() {
  TeacherConfig cfg;
  cfg.stem_width = 8;
  cfg.stage_blocks = {1, 1, 1, 1};
  cfg.stage_widths = {8, 16, 32, 64};
  cfg.decoder_widths = {16, 8, 8, 8};
  return cfg;
}

TrainConfig quick_cfg(int epochs, std::uint64_t seed = 42) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = seed;
  return cfg;
}

std::vector<SegSample> mixed_set(int per_class, int res, std::uint64_t seed) {
  auto set = synth_generate(per_class, ClassLabel::benign, res, mix_seed(seed, 1));
  auto mal = synth_generate(per_class, ClassLabel::malignant, res, mix_seed(seed, 2));
  set.insert(set.end(), mal.begin(), mal.end());
  return set;
}

std::vector<float> snapshot(const NetworkHandle<float>& h) {
  std::vector<float> out;
  for (const auto& p : h.params())
    out.insert(out.end(), p.var->value().data.begin(), p.var->value().data.end());
  for (const auto& b : h.buffers()) out.insert(out.end(), b.buf->begin(), b.buf->end());
  return out;
}

}  // namespace

TEST_CASE("plateau free function drops after three stagnant epochs") {
  CHECK(lr_plateau_step({1.0, 1.0, 1.0, 1.0}, 1e-3, 3, 0.1) == Catch::Approx(1e-4));
  CHECK(lr_plateau_step({1.0, 0.9, 0.8, 0.7}, 1e-3, 3, 0.1) == Catch::Approx(1e-3));
  CHECK(lr_plateau_step({1.0, 1.0, 1.0, 1.0}, 1e-5, 3, 0.1) == Catch::Approx(1e-6));
  CHECK(lr_plateau_step({1.0, 1.0, 1.0}, 1e-3, 3, 0.1) == Catch::Approx(1e-3));  // only 2 stagnant
  CHECK_THROWS_AS(lr_plateau_step({1.0}, 1e-3, 0, 0.1), ConfigError);
}

TEST_CASE("plateau scheduler drops exactly after patience and respects the floor") {
  PlateauScheduler sched(1e-3, 3, 0.1);
  CHECK(sched.step(1.0) == Catch::Approx(1e-3));  // best set
  CHECK(sched.step(1.0) == Catch::Approx(1e-3));  // stagnant 1
  CHECK(sched.step(1.0) == Catch::Approx(1e-3));  // stagnant 2
  CHECK(sched.step(1.0) == Catch::Approx(1e-4));  // stagnant 3 -> drop
  // repeated plateaus bottom out at the floor
  for (int i = 0; i < 40; ++i) sched.step(1.0);
  CHECK(sched.lr() == Catch::Approx(1e-6));
}

TEST_CASE("plateau scheduler holds while the loss improves") {
  PlateauScheduler sched(1e-3, 3, 0.1);
  double loss = 1.0;
  for (int i = 0; i < 10; ++i) {
    CHECK(sched.step(loss) == Catch::Approx(1e-3));
    loss *= 0.9;
  }
}

TEST_CASE("training history records a x0.1 drop once the loss stagnates") {
  auto samples = mixed_set(2, 32, 7);
  TrainConfig cfg = quick_cfg(5);
  // An impossible improvement threshold forces every epoch to count as
  // stagnant, pinning the drop at epoch patience+1.
  cfg.plateau_rel_threshold = 1.0;
  NetworkHandle<float> net = build_student<float>(tiny_student());
  const TrainHistory h = train_hard(net, samples, cfg);
  REQUIRE(h.rows.size() == 5);
  CHECK(h.rows[0].lr == Catch::Approx(1e-3));
  CHECK(h.rows[3].lr == Catch::Approx(1e-3));
  CHECK(h.rows[4].lr == Catch::Approx(1e-4));
  for (std::size_t i = 1; i < h.rows.size(); ++i) {
    CHECK(h.rows[i].lr <= h.rows[i - 1].lr);          // lr non-increasing
    CHECK(h.rows[i].epoch == h.rows[i - 1].epoch + 1);  // epochs strictly increasing
  }
}

TEST_CASE("one small step on a single sample decreases its loss") {
  const auto samples = mixed_set(1, 32, 9);
  NetworkHandle<float> net = build_student<float>(tiny_student());
  auto [images, masks] = make_batch(samples, {0});

  auto compute_loss = [&] {
    net.net->set_training(true);
    return weight_balance_loss(sigmoid(forward(net, images)), masks);
  };
  Var<float> loss = compute_loss();
  const double before = loss.value()[0];
  for (const auto& p : net.params()) p.var->zero_grad();
  backward(loss);
  Adam<float> opt;
  opt.step(net.params(), 1e-5, 0.0);
  const double after = compute_loss().value()[0];
  CHECK(after < before);
}

TEST_CASE("identically seeded runs produce identical histories") {
  const auto samples = mixed_set(3, 32, 11);
  NetworkHandle<float> a = build_student<float>(tiny_student());
  NetworkHandle<float> b = build_student<float>(tiny_student());
  const TrainHistory ha = train_hard(a, samples, quick_cfg(3, 5));
  const TrainHistory hb = train_hard(b, samples, quick_cfg(3, 5));
  REQUIRE(ha.rows.size() == hb.rows.size());
  for (std::size_t i = 0; i < ha.rows.size(); ++i) {
    CHECK(std::abs(ha.rows[i].total - hb.rows[i].total) <= 1e-6);
    CHECK(ha.rows[i].total == hb.rows[i].total);  // exact on one device
    CHECK(ha.rows[i].lr == hb.rows[i].lr);
  }
  CHECK(ha.to_csv() == hb.to_csv());

  const TrainHistory hc = train_hard(a, samples, quick_cfg(3, 6));
  CHECK(ha.rows[0].total != hc.rows[0].total);  // different seed, different run
}

TEST_CASE("train_teacher uses only its class and rejects an empty subset") {
  const auto samples = mixed_set(2, 32, 13);
  TrainConfig cfg = quick_cfg(1);
  auto [net, history] = train_teacher(Role::benign_teacher, samples, tiny_teacher(), cfg);
  CHECK(net.role == Role::benign_teacher);
  REQUIRE(history.rows.size() == 1);

  const auto benign_only = synth_generate(2, ClassLabel::benign, 32, 17);
  CHECK_THROWS_AS(train_teacher(Role::malignant_teacher, benign_only, tiny_teacher(), cfg),
                  ConfigError);
  CHECK_THROWS_AS(train_teacher(Role::student, samples, tiny_teacher(), cfg), ConfigError);
}

TEST_CASE("zero teacher weights reproduce the supervised trajectory exactly") {
  const auto samples = mixed_set(3, 32, 19);
  TrainConfig cfg = quick_cfg(2, 21);

  auto [tb, _h1] = train_teacher(Role::benign_teacher, samples, tiny_teacher(), quick_cfg(1));
  auto [tm, _h2] = train_teacher(Role::malignant_teacher, samples, tiny_teacher(), quick_cfg(1));

  auto [sup, hist_sup] = train_student_supervised(tiny_student(), samples, cfg);
  auto [dis, hist_dis] =
      distill_student(tiny_student(), &tb, &tm, samples, LossWeights{1.0, 0.0, 0.0}, cfg);
  REQUIRE(hist_sup.rows.size() == hist_dis.rows.size());
  for (std::size_t i = 0; i < hist_sup.rows.size(); ++i)
    CHECK(hist_sup.rows[i].total == hist_dis.rows[i].total);
  CHECK(snapshot(sup) == snapshot(dis));
}

TEST_CASE("frozen teachers are bit-identical before and after distillation") {
  const auto samples = mixed_set(3, 32, 23);
  auto [tb, h1] = train_teacher(Role::benign_teacher, samples, tiny_teacher(), quick_cfg(1));
  auto [tm, h2] = train_teacher(Role::malignant_teacher, samples, tiny_teacher(), quick_cfg(1));
  const std::vector<float> before_b = snapshot(tb);
  const std::vector<float> before_m = snapshot(tm);

  TrainConfig cfg = quick_cfg(2, 29);
  cfg.teacher_mode = TeacherMode::frozen;
  auto [student, hist] =
      distill_student(tiny_student(), &tb, &tm, samples, LossWeights::double_teacher(), cfg);
  CHECK(snapshot(tb) == before_b);
  CHECK(snapshot(tm) == before_m);
  CHECK(hist.rows.back().kl_benign > 0.0);
  CHECK(hist.rows.back().kl_malignant > 0.0);
}

TEST_CASE("cofinetune mode updates teacher parameters") {
  const auto samples = mixed_set(3, 32, 31);
  auto [tb, h1] = train_teacher(Role::benign_teacher, samples, tiny_teacher(), quick_cfg(1));
  auto [tm, h2] = train_teacher(Role::malignant_teacher, samples, tiny_teacher(), quick_cfg(1));
  const std::vector<float> before_b = snapshot(tb);

  TrainConfig cfg = quick_cfg(1, 33);
  cfg.teacher_mode = TeacherMode::cofinetune;
  auto [student, hist] =
      distill_student(tiny_student(), &tb, &tm, samples, LossWeights::double_teacher(), cfg);
  CHECK(snapshot(tb) != before_b);
}

TEST_CASE("missing teachers with nonzero weights are rejected") {
  const auto samples = mixed_set(2, 32, 37);
  CHECK_THROWS_AS(distill_student(tiny_student(), nullptr, nullptr, samples,
                                  LossWeights::double_teacher(), quick_cfg(1)),
                  ConfigError);
}

TEST_CASE("evaluate is deterministic, counts images, and rejects empty sets") {
  const auto samples = mixed_set(3, 32, 41);
  NetworkHandle<float> net = build_student<float>(tiny_student());
  const MetricsReport a = evaluate(net, samples);
  const MetricsReport b = evaluate(net, samples);
  CHECK(a.dice == b.dice);
  CHECK(a.miou == b.miou);
  CHECK(a.n_images == 6);
  CHECK_THROWS_AS(evaluate(net, {}), ConfigError);
}

TEST_CASE("a memorized single-image set evaluates nearly perfectly") {
  auto samples = synth_generate(1, ClassLabel::benign, 32, 43);
  NetworkHandle<float> net = build_student<float>(StudentConfig{3, 1, {8, 16, 32}, 1});
  TrainConfig cfg = quick_cfg(200, 44);
  cfg.batch_size = 1;
  cfg.stop_at_train_dice = 0.995;
  const TrainHistory h = train_hard(net, samples, cfg);
  const MetricsReport m = evaluate(net, samples);
  CHECK(m.dice >= 0.99);
  CHECK(m.precision >= 0.99);
  CHECK(m.recall >= 0.99);
  CHECK(m.miou >= 0.99);
  CHECK(m.accuracy >= 0.99);
  CHECK(h.rows.size() < 200);  // early stop fired
}

TEST_CASE("smoothed distillation loss decreases over an overfit run") {
  const auto samples = mixed_set(4, 32, 47);
  auto [tb, h1] = train_teacher(Role::benign_teacher, samples, tiny_teacher(), quick_cfg(2));
  auto [tm, h2] = train_teacher(Role::malignant_teacher, samples, tiny_teacher(), quick_cfg(2));
  TrainConfig cfg = quick_cfg(14, 51);
  auto [student, hist] = distill_student(tiny_student(), &tb, &tm, samples,
                                         LossWeights::double_teacher(), cfg);
  auto window_mean = [&](std::size_t start) {
    double s = 0;
    for (std::size_t i = start; i < start + 5; ++i) s += hist.rows[i].total;
    return s / 5.0;
  };
  CHECK(window_mean(hist.rows.size() - 5) <= window_mean(0));
}

TEST_CASE("checkpoints round-trip through disk") {
  namespace fss = std::filesystem;
  const fss::path dir = fss::temp_directory_path() / "segkd_ckpt_test";
  fss::create_directories(dir);

  const auto samples = mixed_set(2, 32, 53);
  auto [tb, hist] = train_teacher(Role::benign_teacher, samples, tiny_teacher(), quick_cfg(1));
  const MetricsReport before = evaluate(tb, samples);
  const std::string prefix = (dir / "teacher_b").string();
  save_checkpoint(tb, prefix, 1, 42, {{"note", "test"}});

  nlohmann::json side;
  NetworkHandle<float> loaded = load_checkpoint(prefix, &side);
  CHECK(side.at("role") == "benign_teacher");
  CHECK(side.at("epoch") == 1);
  CHECK(side.at("seed") == 42);
  CHECK(side.at("note") == "test");
  CHECK(loaded.role == Role::benign_teacher);
  CHECK(snapshot(loaded) == snapshot(tb));
  const MetricsReport after = evaluate(loaded, samples);
  CHECK(after.dice == before.dice);
  CHECK(after.accuracy == before.accuracy);

  fss::remove_all(dir);
}

TEST_CASE("history csv carries the fixed schema") {
  CHECK(TrainHistory::csv_header() == "epoch,total,wb,kl_benign,kl_malignant,lr,dice,miou");
  TrainHistory h;
  EpochRecord r;
  r.epoch = 1;
  r.total = 0.5;
  r.lr = 1e-3;
  h.rows.push_back(r);
  const std::string csv = h.to_csv();
  CHECK(csv.find("epoch,total") == 0);
  CHECK(csv.find("\n1,0.5") != std::string::npos);
}
