#pragma once

#include <optional>
#include <vector>

#include "segkd/ops.hpp"

namespace segkd {

/// Probabilities are clamped into [kProbEps, 1-kProbEps] before any log.
inline constexpr double kProbEps = 1e-7;
/// Additive smoothing for overlap-ratio denominators.
inline constexpr double kOverlapSmooth = 1e-6;

/// A per-pixel foreground probability map, shape (N,1,H,W).
template <typename T>
using PixelDistribution = Var<T>;

template <typename T>
void require_binary_mask(const Tensor<T>& y) {
  for (const T& v : y.data)
    if (v != T(0) && v != T(1))
      throw ValidationError("mask contains values outside {0,1}");
}

namespace detail {
template <typename T>
Tensor<T> one_minus_tensor(const Tensor<T>& t) {
  Tensor<T> out = t;
  for (auto& v : out.data) v = T(1) - v;
  return out;
}
}  // namespace detail

/// Mean binary cross-entropy of predicted probabilities against a one-hot
/// target: -mean(y ln q + (1-y) ln(1-q)).
template <typename T>
Var<T> cross_entropy(const Var<T>& q, const Tensor<T>& y) {
  require_same_shape(q.value(), y, "cross_entropy");
  require_binary_mask(y);
  const Var<T> qc = clamp(q, T(kProbEps), T(1) - T(kProbEps));
  const Var<T> pos = mul(vlog(qc), constant(y));
  const Var<T> neg = mul(vlog(affine(qc, T(-1), T(1))), constant(detail::one_minus_tensor(y)));
  return mul_scalar(mean_all(add(pos, neg)), T(-1));
}

/// Per-class overlap terms for the soft Dice score. Two classes (foreground,
/// background) with equal weights 1/K.
template <typename T>
struct DiceTerms {
  std::vector<Var<T>> class_probs;     // P(k, .)
  std::vector<Tensor<T>> class_targets;  // g(k, .), one-hot
  T smooth = T(kOverlapSmooth);

  int num_classes() const { return static_cast<int>(class_probs.size()); }
};

template <typename T>
DiceTerms<T> make_dice_terms(const Var<T>& q, const Tensor<T>& y, T smooth = T(kOverlapSmooth)) {
  require_same_shape(q.value(), y, "dice_loss");
  require_binary_mask(y);
  DiceTerms<T> terms;
  terms.smooth = smooth;
  terms.class_probs = {q, affine(q, T(-1), T(1))};
  terms.class_targets = {y, detail::one_minus_tensor(y)};
  return terms;
}

/// 1 - sum_k w_k * 2 sum_i P(k,i) g(k,i) / (sum_i P^2 + sum_i g^2 + smooth),
/// with w_k = 1/K.
template <typename T>
Var<T> dice_loss(const DiceTerms<T>& terms) {
  const T w = T(1) / static_cast<T>(terms.num_classes());
  Var<T> acc = constant(Tensor<T>::scalar(T(0)));
  for (int k = 0; k < terms.num_classes(); ++k) {
    const Var<T>& p = terms.class_probs[static_cast<std::size_t>(k)];
    const Tensor<T>& g = terms.class_targets[static_cast<std::size_t>(k)];
    const Var<T> num = mul_scalar(sum_all(mul(p, constant(g))), T(2) * w);
    T g_sq = T(0);
    for (const T& v : g.data) g_sq += v * v;
    const Var<T> den = affine(sum_all(mul(p, p)), T(1), g_sq + terms.smooth);
    acc = add(acc, div(num, den));
  }
  return affine(acc, T(-1), T(1));
}

template <typename T>
Var<T> dice_loss(const Var<T>& q, const Tensor<T>& y, T smooth = T(kOverlapSmooth)) {
  return dice_loss(make_dice_terms(q, y, smooth));
}

/// -ln of the soft intersection-over-union: I = sum q*y,
/// U = sum q + sum y - I, loss = -ln((I+s)/(U+s)).
template <typename T>
Var<T> iou_loss(const Var<T>& q, const Tensor<T>& y, T smooth = T(kOverlapSmooth)) {
  require_same_shape(q.value(), y, "iou_loss");
  require_binary_mask(y);
  const Var<T> inter = sum_all(mul(q, constant(y)));
  const Var<T> uni = sub(affine(sum_all(q), T(1), y.sum()), inter);
  return sub(vlog(affine(uni, T(1), smooth)), vlog(affine(inter, T(1), smooth)));
}

/// The foreground/background balance remedy: 2 * cross-entropy + Dice + IoU.
template <typename T>
Var<T> weight_balance_loss(const Var<T>& q, const Tensor<T>& y) {
  return add(mul_scalar(cross_entropy(q, y), T(2)), add(dice_loss(q, y), iou_loss(q, y)));
}

namespace detail {
// Temperature-softened probability, teacher side (plain tensor math).
template <typename T>
Tensor<T> soften_const(const Tensor<T>& p, T temperature) {
  Tensor<T> out = p;
  for (auto& v : out.data) {
    const T c = std::min(T(1) - T(kProbEps), std::max(T(kProbEps), v));
    const T z = std::log(c / (T(1) - c)) / temperature;
    v = T(1) / (T(1) + std::exp(-z));
  }
  return out;
}
}  // namespace detail

/// Two-point KL divergence, mean over pixels, between a (detached) teacher
/// probability map and the student's. Temperature > 1 softens both maps.
/// Gradient flows into the student side only.
template <typename T>
Var<T> kl_divergence(const Tensor<T>& p_teacher, const Var<T>& q_student, T temperature = T(1)) {
  if (!(temperature > T(0))) throw ConfigError("kl_divergence: temperature must be positive");
  require_same_shape(p_teacher, q_student.value(), "kl_divergence");

  Var<T> q = clamp(q_student, T(kProbEps), T(1) - T(kProbEps));
  if (temperature != T(1)) {
    const Var<T> logit = sub(vlog(q), vlog(affine(q, T(-1), T(1))));
    q = clamp(sigmoid(mul_scalar(logit, T(1) / temperature)), T(kProbEps), T(1) - T(kProbEps));
  }
  Tensor<T> p = detail::soften_const(p_teacher, temperature);

  Tensor<T> p_neg = detail::one_minus_tensor(p);
  Tensor<T> entropy(p.shape);  // p ln p + (1-p) ln(1-p), constant
  for (std::int64_t i = 0; i < p.numel(); ++i)
    entropy[i] = p[i] * std::log(p[i]) + p_neg[i] * std::log(p_neg[i]);

  const Var<T> cross = add(mul(vlog(q), constant(std::move(p))),
                           mul(vlog(affine(q, T(-1), T(1))), constant(std::move(p_neg))));
  return mean_all(sub(constant(std::move(entropy)), cross));
}

/// Mixing weights of the distillation objective: hard loss plus one KL term
/// per teacher.
struct LossWeights {
  double hard = 1.0;       // ground-truth term
  double benign = 0.0;     // KL against the benign teacher
  double malignant = 0.0;  // KL against the malignant teacher

  static LossWeights supervised() { return {1.0, 0.0, 0.0}; }
  static LossWeights single_teacher() { return {0.3, 0.7, 0.0}; }
  static LossWeights double_teacher() { return {0.3, 0.5, 0.2}; }

  void validate() const {
    if (hard < 0 || benign < 0 || malignant < 0)
      throw ConfigError("loss weights must be nonnegative");
  }
};

/// Student prediction with optional teacher soft maps and the ground truth.
/// Teacher maps are plain tensors: constants with respect to the graph.
template <typename T>
struct PredictionBundle {
  Var<T> student;
  std::optional<Tensor<T>> benign;
  std::optional<Tensor<T>> malignant;
  Tensor<T> target;
};

/// w.hard * L_WB(y, S) + w.benign * KL(B, S) + w.malignant * KL(M, S).
/// Terms with zero weight are skipped entirely.
template <typename T>
Var<T> total_loss(const PredictionBundle<T>& bundle, const LossWeights& w,
                  T temperature = T(1)) {
  w.validate();
  if (w.benign > 0 && !bundle.benign)
    throw ConfigError("total_loss: benign teacher weight is set but no benign prediction given");
  if (w.malignant > 0 && !bundle.malignant)
    throw ConfigError(
        "total_loss: malignant teacher weight is set but no malignant prediction given");

  Var<T> acc = constant(Tensor<T>::scalar(T(0)));
  if (w.hard > 0)
    acc = add(acc, mul_scalar(weight_balance_loss(bundle.student, bundle.target),
                              static_cast<T>(w.hard)));
  if (w.benign > 0)
    acc = add(acc, mul_scalar(kl_divergence(*bundle.benign, bundle.student, temperature),
                              static_cast<T>(w.benign)));
  if (w.malignant > 0)
    acc = add(acc, mul_scalar(kl_divergence(*bundle.malignant, bundle.student, temperature),
                              static_cast<T>(w.malignant)));
  return acc;
}

}  // namespace segkd
