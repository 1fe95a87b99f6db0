#pragma once

// Shared test utilities: finite-difference gradient checks (double
// precision), random tensor makers, and independent brute-force oracles.

#include <cmath>
#include <functional>
#include <vector>

#include "segkd/autograd.hpp"
#include "segkd/metrics.hpp"
#include "segkd/rng.hpp"
#include "segkd/tensor.hpp"

namespace testutil {

inline segkd::Tensor<double> random_tensor(std::vector<std::int64_t> shape, std::uint64_t seed,
                                           double lo = -1.0, double hi = 1.0) {
  segkd::Rng rng(seed);
  segkd::Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline segkd::Tensor<double> random_mask(std::vector<std::int64_t> shape, std::uint64_t seed,
                                         double p = 0.5) {
  segkd::Rng rng(seed);
  segkd::Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

template <typename T>
segkd::Tensor<T> random_tensor_t(std::vector<std::int64_t> shape, std::uint64_t seed, double lo,
                                 double hi) {
  segkd::Rng rng(seed);
  segkd::Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Max relative error between analytic gradients and central finite
/// differences over every element of every leaf. `fn` must rebuild the graph
/// from the leaves' current values each call and return a scalar.
inline double max_rel_grad_error(const std::function<segkd::Var<double>()>& fn,
                                 const std::vector<segkd::Var<double>*>& leaves,
                                 double h = 1e-6, double denom_floor = 1e-4) {
  segkd::Var<double> loss = fn();
  for (auto* leaf : leaves) leaf->zero_grad();
  segkd::backward(loss);
  std::vector<segkd::Tensor<double>> analytic;
  for (auto* leaf : leaves) analytic.push_back(leaf->grad());

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    segkd::Tensor<double>& value = leaves[li]->value();
    for (std::int64_t i = 0; i < value.numel(); ++i) {
      const double keep = value[i];
      value[i] = keep + h;
      const double fp = fn().value()[0];
      value[i] = keep - h;
      const double fm = fn().value()[0];
      value[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double ga = analytic[li][i];
      const double denom = std::max({std::abs(ga), std::abs(fd), denom_floor});
      worst = std::max(worst, std::abs(ga - fd) / denom);
    }
  }
  return worst;
}

/// Pixel-loop metrics oracle, independent of the library implementation.
struct BruteMetrics {
  double dice, precision, recall, miou, accuracy;
};

template <typename T>
BruteMetrics brute_force_metrics(const segkd::Tensor<T>& probs, const segkd::Tensor<T>& mask,
                                 double threshold = 0.5) {
  long long tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::int64_t i = 0; i < probs.numel(); ++i) {
    const bool p = static_cast<double>(probs[i]) >= threshold;
    const bool t = mask[i] != T(0);
    if (p && t)
      ++tp;
    else if (p)
      ++fp;
    else if (t)
      ++fn;
    else
      ++tn;
  }
  auto safe = [](long long num, long long den, bool other_empty) {
    if (den > 0) return double(num) / double(den);
    return other_empty ? 1.0 : 0.0;
  };
  BruteMetrics m{};
  m.dice = safe(2 * tp, 2 * tp + fp + fn, true);
  m.precision = safe(tp, tp + fp, tp + fn == 0);
  m.recall = safe(tp, tp + fn, tp + fp == 0);
  m.miou = 0.5 * (safe(tp, tp + fp + fn, true) + safe(tn, tn + fp + fn, true));
  m.accuracy = double(tp + tn) / double(tp + fp + fn + tn);
  return m;
}

/// 4-connected component count of a binary (1,S,S) mask.
inline int connected_components(const segkd::Tensor<float>& mask) {
  const int H = static_cast<int>(mask.dim(1)), W = static_cast<int>(mask.dim(2));
  std::vector<char> seen(static_cast<std::size_t>(H * W), 0);
  int components = 0;
  std::vector<int> stack;
  for (int start = 0; start < H * W; ++start) {
    if (seen[static_cast<std::size_t>(start)] || mask.data[static_cast<std::size_t>(start)] < 0.5f)
      continue;
    ++components;
    stack.push_back(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      const int h = cur / W, w = cur % W;
      const int nbrs[4][2] = {{h - 1, w}, {h + 1, w}, {h, w - 1}, {h, w + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[0] >= H || nb[1] < 0 || nb[1] >= W) continue;
        const int idx = nb[0] * W + nb[1];
        if (!seen[static_cast<std::size_t>(idx)] &&
            mask.data[static_cast<std::size_t>(idx)] >= 0.5f) {
          seen[static_cast<std::size_t>(idx)] = 1;
          stack.push_back(idx);
        }
      }
    }
  }
  return components;
}

}  // namespace testutil
