#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "segkd/errors.hpp"
#include "segkd/tensor.hpp"

namespace segkd {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

/// Pixel counts of thresholded predictions against a binary mask. The
/// threshold is inclusive: probability >= threshold predicts foreground.
template <typename T>
ConfusionCounts confusion(const Tensor<T>& pred_probs, const Tensor<T>& y,
                          double threshold = 0.5) {
  require_same_shape(pred_probs, y, "confusion");
  ConfusionCounts c;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const bool p = static_cast<double>(pred_probs[i]) >= threshold;
    const bool t = y[i] != T(0);
    if (p && t)
      ++c.tp;
    else if (p && !t)
      ++c.fp;
    else if (!p && t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

struct MetricsReport {
  double dice = 0;
  double precision = 0;
  double recall = 0;
  double miou = 0;
  double accuracy = 0;
  int n_images = 1;

  static std::string csv_header() { return "dice,precision,recall,miou,accuracy,n_images"; }

  std::string csv_row() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << dice << "," << precision << "," << recall << "," << miou << "," << accuracy << ","
       << n_images;
    return os.str();
  }
};

/// Dice, precision, recall, mIoU (foreground and background averaged) and
/// pixel accuracy from pooled counts. A ratio with an empty denominator set
/// scores 1 when the opposing set is also empty and 0 otherwise.
inline MetricsReport compute_metrics(const ConfusionCounts& c) {
  if (c.total() <= 0) throw ConfigError("compute_metrics: no pixels");
  auto ratio = [](std::int64_t num, std::int64_t den, bool other_empty) {
    if (den > 0) return static_cast<double>(num) / static_cast<double>(den);
    return other_empty ? 1.0 : 0.0;
  };
  MetricsReport r;
  r.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, true);
  r.precision = ratio(c.tp, c.tp + c.fp, c.tp + c.fn == 0);
  r.recall = ratio(c.tp, c.tp + c.fn, c.tp + c.fp == 0);
  const double iou_fg = ratio(c.tp, c.tp + c.fp + c.fn, true);
  const double iou_bg = ratio(c.tn, c.tn + c.fp + c.fn, true);
  r.miou = 0.5 * (iou_fg + iou_bg);
  r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  r.n_images = 1;
  return r;
}

/// Unweighted mean of per-image reports (the dataset-level convention).
inline MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ConfigError("mean_report: empty report list");
  MetricsReport r;
  for (const auto& x : reports) {
    r.dice += x.dice;
    r.precision += x.precision;
    r.recall += x.recall;
    r.miou += x.miou;
    r.accuracy += x.accuracy;
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  r.dice *= inv;
  r.precision *= inv;
  r.recall *= inv;
  r.miou *= inv;
  r.accuracy *= inv;
  r.n_images = static_cast<int>(reports.size());
  return r;
}

}  // namespace segkd
