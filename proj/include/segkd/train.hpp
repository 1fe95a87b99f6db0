#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "segkd/data.hpp"
#include "segkd/losses.hpp"
#include "segkd/metrics.hpp"
#include "segkd/models.hpp"

namespace segkd {

enum class TeacherMode { frozen, cofinetune };

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  int batch_size = 8;
  int epochs = 20;
  int plateau_patience = 3;
  double plateau_factor = 0.1;
  double plateau_min_lr = 1e-6;
  double plateau_rel_threshold = 1e-4;
  std::uint64_t seed = 42;
  TeacherMode teacher_mode = TeacherMode::frozen;
  bool augment = false;
  // Early stop: when > 0, stop once the train-set Dice reaches this value.
  double stop_at_train_dice = 0.0;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1))
      throw ConfigError("plateau_factor must be in (0,1)");
  }
};

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef<T>>& params, double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& p : params) {
      Tensor<T>& value = p.var->value();
      Tensor<T>& grad = p.var->grad();
      State& s = state_[p.name];
      if (s.m.numel() != value.numel()) {
        s.m = Tensor<T>::zeros(value.shape);
        s.v = Tensor<T>::zeros(value.shape);
      }
      const T wd = p.decay ? static_cast<T>(weight_decay) : T(0);
      for (std::int64_t i = 0; i < value.numel(); ++i) {
        const T g = grad[i] + wd * value[i];
        s.m[i] = static_cast<T>(beta1_) * s.m[i] + static_cast<T>(1.0 - beta1_) * g;
        s.v[i] = static_cast<T>(beta2_) * s.v[i] + static_cast<T>(1.0 - beta2_) * g * g;
        const double mhat = static_cast<double>(s.m[i]) / bc1;
        const double vhat = static_cast<double>(s.v[i]) / bc2;
        value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  struct State {
    Tensor<T> m, v;
  };
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, State> state_;
};

/// Reduce-on-plateau: when the monitored loss fails to improve on the best
/// seen value by a relative margin for `patience` consecutive epochs, the
/// learning rate is multiplied by `factor`, never dropping below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, int patience, double factor, double rel_threshold = 1e-4,
                   double min_lr = 1e-6)
      : lr_(lr), patience_(patience), factor_(factor), rel_threshold_(rel_threshold),
        min_lr_(min_lr) {}

  double step(double loss) {
    if (std::isinf(best_)) {
      best_ = loss;  // first observation
    } else if (loss < best_ * (1.0 - rel_threshold_)) {
      best_ = loss;
      bad_epochs_ = 0;
    } else {
      ++bad_epochs_;
      if (bad_epochs_ >= patience_) {
        lr_ = std::max(lr_ * factor_, min_lr_);
        bad_epochs_ = 0;
      }
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  double rel_threshold_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

/// Stateless view of the same rule over a loss history: returns the rate to
/// use after the given epochs, dropping once if the tail shows `patience`
/// consecutive non-improving epochs.
inline double lr_plateau_step(const std::vector<double>& losses, double current_lr, int patience,
                              double factor, double rel_threshold = 1e-4, double floor = 1e-6) {
  if (patience < 1) throw ConfigError("lr_plateau_step: patience must be >= 1");
  double best = std::numeric_limits<double>::infinity();
  int bad = 0;
  for (double loss : losses) {
    if (std::isinf(best)) {
      best = loss;
    } else if (loss < best * (1.0 - rel_threshold)) {
      best = loss;
      bad = 0;
    } else {
      ++bad;
    }
  }
  if (bad >= patience) return std::max(current_lr * factor, floor);
  return current_lr;
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double total = 0;
  double wb = 0;
  double kl_benign = 0;
  double kl_malignant = 0;
  double lr = 0;
  bool has_val = false;
  MetricsReport val;
};

struct TrainHistory {
  std::vector<EpochRecord> rows;

  static std::string csv_header() {
    return "epoch,total,wb,kl_benign,kl_malignant,lr,dice,miou";
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << csv_header() << "\n";
    os.setf(std::ios::fixed);
    for (const auto& r : rows) {
      os.precision(8);
      os << r.epoch << "," << r.total << "," << r.wb << "," << r.kl_benign << ","
         << r.kl_malignant << "," << r.lr << ",";
      if (r.has_val) {
        os.precision(6);
        os << r.val.dice << "," << r.val.miou;
      } else {
        os << ",";
      }
      os << "\n";
    }
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write history: " + path);
    out << to_csv();
  }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Inference-mode pass over all samples; per-image metrics, unweighted mean.
inline MetricsReport evaluate(NetworkHandle<float>& net, const std::vector<SegSample>& samples,
                              int batch_size = 8) {
  if (samples.empty()) throw ConfigError("evaluate: empty sample set");
  NoGradGuard ng;
  net.net->set_training(false);
  std::vector<MetricsReport> reports;
  reports.reserve(samples.size());
  std::vector<std::size_t> idxs;
  for (std::size_t start = 0; start < samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    idxs.clear();
    for (std::size_t i = start;
         i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idxs.push_back(i);
    auto [images, masks] = make_batch(samples, idxs);
    const Var<float> probs = sigmoid(forward(net, images));
    const std::int64_t hw = masks.dim(2) * masks.dim(3);
    for (std::size_t b = 0; b < idxs.size(); ++b) {
      Tensor<float> p({1, 1, masks.dim(2), masks.dim(3)});
      Tensor<float> y({1, 1, masks.dim(2), masks.dim(3)});
      std::copy_n(probs.value().data.begin() + static_cast<std::ptrdiff_t>(b * hw), hw,
                  p.data.begin());
      std::copy_n(masks.data.begin() + static_cast<std::ptrdiff_t>(b * hw), hw, y.data.begin());
      reports.push_back(compute_metrics(confusion(p, y)));
    }
  }
  return mean_report(reports);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<SegSample> filter_by_class(const std::vector<SegSample>& samples,
                                              ClassLabel label) {
  std::vector<SegSample> out;
  for (const auto& s : samples)
    if (s.label == label) out.push_back(s);
  return out;
}

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
};

inline BatchPlan plan_epoch(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x9000 + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  BatchPlan plan;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(start),
                               order.begin() +
                                   static_cast<std::ptrdiff_t>(
                                       std::min(n, start + static_cast<std::size_t>(batch_size))));
    plan.batches.push_back(std::move(b));
  }
  return plan;
}

inline std::vector<SegSample> maybe_augment(const std::vector<SegSample>& samples,
                                            const std::vector<std::size_t>& idxs,
                                            const TrainConfig& cfg, int epoch) {
  std::vector<SegSample> out;
  out.reserve(idxs.size());
  for (std::size_t k = 0; k < idxs.size(); ++k) {
    const SegSample& s = samples[idxs[k]];
    if (cfg.augment)
      out.push_back(augment(s, mix_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 24) ^
                                                      (idxs[k] + 1))));
    else
      out.push_back(s);
  }
  return out;
}

inline std::vector<std::size_t> iota_idx(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

/// Supervised training of an already-built network on the hard loss alone.
inline TrainHistory train_hard(NetworkHandle<float>& net, const std::vector<SegSample>& samples,
                               const TrainConfig& cfg,
                               const std::vector<SegSample>* val_samples = nullptr) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("train_hard: no samples");
  Adam<float> opt;
  PlateauScheduler sched(cfg.lr, cfg.plateau_patience, cfg.plateau_factor,
                         cfg.plateau_rel_threshold, cfg.plateau_min_lr);
  TrainHistory history;

  double lr = cfg.lr;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    net.net->set_training(true);
    const auto plan = detail::plan_epoch(samples.size(), cfg.batch_size, cfg.seed, epoch);
    double loss_sum = 0;
    for (const auto& bidx : plan.batches) {
      const auto batch_samples = detail::maybe_augment(samples, bidx, cfg, epoch);
      auto [images, masks] = make_batch(batch_samples, detail::iota_idx(batch_samples.size()));
      const Var<float> probs = sigmoid(forward(net, images));
      const Var<float> loss = weight_balance_loss(probs, masks);
      for (const auto& p : net.params()) p.var->zero_grad();
      backward(loss);
      opt.step(net.params(), lr, cfg.weight_decay);
      loss_sum += static_cast<double>(loss.value()[0]);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.total = rec.wb = loss_sum / static_cast<double>(plan.batches.size());
    rec.lr = lr;
    if (val_samples && !val_samples->empty()) {
      rec.val = evaluate(net, *val_samples, cfg.batch_size);
      rec.has_val = true;
    }
    bool stop = false;
    if (cfg.stop_at_train_dice > 0) {
      const MetricsReport train_m = evaluate(net, samples, cfg.batch_size);
      if (!rec.has_val) {
        rec.val = train_m;
        rec.has_val = true;
      }
      stop = train_m.dice >= cfg.stop_at_train_dice;
    }
    history.rows.push_back(rec);
    lr = sched.step(rec.total);
    if (stop) break;
  }
  return history;
}

/// Trains one class-specialized teacher from scratch on the ground-truth
/// (hard) loss alone. Samples of other classes are filtered out; an empty
/// result is a configuration error.
inline std::pair<NetworkHandle<float>, TrainHistory> train_teacher(
    Role role, const std::vector<SegSample>& samples, const TeacherConfig& model_cfg,
    const TrainConfig& cfg, const std::vector<SegSample>* val_samples = nullptr) {
  cfg.validate();
  if (role == Role::student) throw ConfigError("train_teacher: role must be a teacher");
  const ClassLabel cls =
      role == Role::benign_teacher ? ClassLabel::benign : ClassLabel::malignant;
  std::vector<SegSample> subset = detail::filter_by_class(samples, cls);
  if (subset.empty())
    throw ConfigError(std::string("train_teacher: no ") + to_string(cls) + " samples");

  TeacherConfig mc = model_cfg;
  mc.seed = cfg.seed;
  NetworkHandle<float> net = build_teacher<float>(mc, role);
  TrainHistory history = train_hard(net, subset, cfg, val_samples);
  return {std::move(net), std::move(history)};
}

/// Distills a fresh student against ground truth plus the provided teachers'
/// soft predictions. Teachers run in inference mode to produce soft maps and
/// receive no gradient from the student's objective; in cofinetune mode each
/// teacher additionally takes its own hard-loss steps on the batch items of
/// its class, while frozen mode leaves them untouched.
inline std::pair<NetworkHandle<float>, TrainHistory> distill_student(
    const StudentConfig& student_cfg, NetworkHandle<float>* benign_teacher,
    NetworkHandle<float>* malignant_teacher, const std::vector<SegSample>& samples,
    const LossWeights& w, const TrainConfig& cfg, double temperature = 1.0,
    const std::vector<SegSample>* val_samples = nullptr) {
  cfg.validate();
  w.validate();
  if (samples.empty()) throw ConfigError("distill_student: no samples");
  if (w.benign > 0 && !benign_teacher)
    throw ConfigError("distill_student: benign weight is set but no benign teacher given");
  if (w.malignant > 0 && !malignant_teacher)
    throw ConfigError("distill_student: malignant weight is set but no malignant teacher given");

  StudentConfig sc = student_cfg;
  sc.seed = cfg.seed;
  NetworkHandle<float> net = build_student<float>(sc);
  Adam<float> opt;
  Adam<float> opt_benign, opt_malignant;
  PlateauScheduler sched(cfg.lr, cfg.plateau_patience, cfg.plateau_factor,
                         cfg.plateau_rel_threshold, cfg.plateau_min_lr);
  TrainHistory history;

  const bool use_b = w.benign > 0;
  const bool use_m = w.malignant > 0;

  double lr = cfg.lr;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto plan = detail::plan_epoch(samples.size(), cfg.batch_size, cfg.seed, epoch);
    double total_sum = 0, wb_sum = 0, klb_sum = 0, klm_sum = 0;
    for (const auto& bidx : plan.batches) {
      const auto batch_samples = detail::maybe_augment(samples, bidx, cfg, epoch);
      auto [images, y] = make_batch(batch_samples, detail::iota_idx(batch_samples.size()));

      // Teacher soft maps: inference mode, cut off from the graph.
      std::optional<Tensor<float>> soft_b, soft_m;
      {
        NoGradGuard ng;
        if (use_b) {
          benign_teacher->net->set_training(false);
          soft_b = sigmoid(forward(*benign_teacher, images)).value();
        }
        if (use_m) {
          malignant_teacher->net->set_training(false);
          soft_m = sigmoid(forward(*malignant_teacher, images)).value();
        }
      }

      net.net->set_training(true);
      const Var<float> probs = sigmoid(forward(net, images));
      Var<float> total = constant(Tensor<float>::scalar(0.0f));
      double wb_v = 0, klb_v = 0, klm_v = 0;
      if (w.hard > 0) {
        const Var<float> wb = weight_balance_loss(probs, y);
        wb_v = static_cast<double>(wb.value()[0]);
        total = add(total, mul_scalar(wb, static_cast<float>(w.hard)));
      }
      if (use_b) {
        const Var<float> kl = kl_divergence(*soft_b, probs, static_cast<float>(temperature));
        klb_v = static_cast<double>(kl.value()[0]);
        total = add(total, mul_scalar(kl, static_cast<float>(w.benign)));
      }
      if (use_m) {
        const Var<float> kl = kl_divergence(*soft_m, probs, static_cast<float>(temperature));
        klm_v = static_cast<double>(kl.value()[0]);
        total = add(total, mul_scalar(kl, static_cast<float>(w.malignant)));
      }
      for (const auto& p : net.params()) p.var->zero_grad();
      backward(total);
      opt.step(net.params(), lr, cfg.weight_decay);
      total_sum += static_cast<double>(total.value()[0]);
      wb_sum += wb_v;
      klb_sum += klb_v;
      klm_sum += klm_v;

      // Collaborative fine-tuning: each teacher trains on its own class
      // items against ground truth.
      if (cfg.teacher_mode == TeacherMode::cofinetune) {
        auto finetune = [&](NetworkHandle<float>& teacher, ClassLabel cls, Adam<float>& topt) {
          std::vector<std::size_t> sub;
          for (std::size_t k = 0; k < batch_samples.size(); ++k)
            if (batch_samples[k].label == cls) sub.push_back(k);
          if (sub.empty()) return;
          auto [timg, tmask] = make_batch(batch_samples, sub);
          teacher.net->set_training(true);
          const Var<float> tp = sigmoid(forward(teacher, timg));
          const Var<float> tl = weight_balance_loss(tp, tmask);
          for (const auto& p : teacher.params()) p.var->zero_grad();
          backward(tl);
          topt.step(teacher.params(), lr, cfg.weight_decay);
        };
        if (use_b) finetune(*benign_teacher, ClassLabel::benign, opt_benign);
        if (use_m) finetune(*malignant_teacher, ClassLabel::malignant, opt_malignant);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    const double nb = static_cast<double>(plan.batches.size());
    rec.total = total_sum / nb;
    rec.wb = wb_sum / nb;
    rec.kl_benign = klb_sum / nb;
    rec.kl_malignant = klm_sum / nb;
    rec.lr = lr;
    if (val_samples && !val_samples->empty()) {
      rec.val = evaluate(net, *val_samples, cfg.batch_size);
      rec.has_val = true;
    }
    bool stop = false;
    if (cfg.stop_at_train_dice > 0) {
      const MetricsReport train_m = evaluate(net, samples, cfg.batch_size);
      if (!rec.has_val) {
        rec.val = train_m;
        rec.has_val = true;
      }
      stop = train_m.dice >= cfg.stop_at_train_dice;
    }
    history.rows.push_back(rec);
    lr = sched.step(rec.total);
    if (stop) break;
  }
  return {std::move(net), std::move(history)};
}

/// Plain supervised student training: the same loop with hard loss only.
inline std::pair<NetworkHandle<float>, TrainHistory> train_student_supervised(
    const StudentConfig& student_cfg, const std::vector<SegSample>& samples,
    const TrainConfig& cfg, const std::vector<SegSample>* val_samples = nullptr) {
  return distill_student(student_cfg, nullptr, nullptr, samples, LossWeights::supervised(), cfg,
                         1.0, val_samples);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr std::uint32_t kCheckpointMagic = 0x53474b44;  // "SGKD"
}

/// Writes `<prefix>.bin` (raw little-endian float32 weights and norm
/// statistics in collection order) and `<prefix>.json` (arch hash, role,
/// epoch, seed, model config plus any extra fields).
inline void save_checkpoint(const NetworkHandle<float>& h, const std::string& prefix, int epoch,
                            std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write checkpoint: " + prefix + ".bin");
  auto write_u64 = [&](std::uint64_t v) {
    bin.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  std::uint32_t magic = detail::kCheckpointMagic;
  bin.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
  const auto params = h.params();
  const auto buffers = h.buffers();
  write_u64(params.size());
  for (const auto& p : params) {
    write_u64(static_cast<std::uint64_t>(p.var->value().numel()));
    bin.write(reinterpret_cast<const char*>(p.var->value().data.data()),
              static_cast<std::streamsize>(p.var->value().data.size() * sizeof(float)));
  }
  write_u64(buffers.size());
  for (const auto& b : buffers) {
    write_u64(static_cast<std::uint64_t>(b.buf->size()));
    bin.write(reinterpret_cast<const char*>(b.buf->data()),
              static_cast<std::streamsize>(b.buf->size() * sizeof(float)));
  }
  if (!bin) throw IoError("failed writing checkpoint: " + prefix + ".bin");

  nlohmann::json side = extra;
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(arch_hash(h.arch)));
  side["arch_hash"] = std::string(hash_hex);
  side["role"] = to_string(h.role);
  side["epoch"] = epoch;
  side["seed"] = seed;
  side["model_config"] = h.model_config;
  std::ofstream js(prefix + ".json");
  if (!js) throw IoError("cannot write checkpoint sidecar: " + prefix + ".json");
  js << side.dump(2) << "\n";
}

inline NetworkHandle<float> load_checkpoint(const std::string& prefix,
                                            nlohmann::json* sidecar_out = nullptr) {
  std::ifstream js(prefix + ".json");
  if (!js) throw IoError("cannot read checkpoint sidecar: " + prefix + ".json");
  nlohmann::json side;
  js >> side;
  const Role role = role_from_string(side.at("role").get<std::string>());
  NetworkHandle<float> h = build_from_config_json<float>(side.at("model_config"), role);
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(arch_hash(h.arch)));
  if (side.at("arch_hash").get<std::string>() != hash_hex)
    throw ValidationError("checkpoint arch hash mismatch for " + prefix);

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot read checkpoint: " + prefix + ".bin");
  auto read_u64 = [&]() {
    std::uint64_t v = 0;
    bin.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
  };
  std::uint32_t magic = 0;
  bin.read(reinterpret_cast<char*>(&magic), sizeof(magic));
  if (magic != detail::kCheckpointMagic)
    throw ValidationError("not a checkpoint file: " + prefix + ".bin");
  const auto params = h.params();
  if (read_u64() != params.size())
    throw ValidationError("checkpoint parameter tensor count mismatch: " + prefix);
  for (const auto& p : params) {
    const std::uint64_t n = read_u64();
    if (n != static_cast<std::uint64_t>(p.var->value().numel()))
      throw ValidationError("checkpoint tensor size mismatch at " + p.name);
    bin.read(reinterpret_cast<char*>(p.var->value().data.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
  }
  const auto buffers = h.buffers();
  if (read_u64() != buffers.size())
    throw ValidationError("checkpoint buffer count mismatch: " + prefix);
  for (const auto& b : buffers) {
    const std::uint64_t n = read_u64();
    if (n != b.buf->size())
      throw ValidationError("checkpoint buffer size mismatch at " + b.name);
    bin.read(reinterpret_cast<char*>(b.buf->data()),
             static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!bin) throw IoError("failed reading checkpoint: " + prefix + ".bin");
  if (sidecar_out) *sidecar_out = side;
  return h;
}

}  // namespace segkd
