#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "segkd/errors.hpp"
#include "segkd/rng.hpp"
#include "segkd/tensor.hpp"

namespace segkd {

namespace fs = std::filesystem;

enum class ClassLabel { benign, malignant, normal };
enum class Split { train, test };

inline const char* to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::benign: return "benign";
    case ClassLabel::malignant: return "malignant";
    case ClassLabel::normal: return "normal";
  }
  return "?";
}

inline ClassLabel class_from_string(const std::string& s) {
  if (s == "benign") return ClassLabel::benign;
  if (s == "malignant") return ClassLabel::malignant;
  if (s == "normal") return ClassLabel::normal;
  throw ValidationError("unknown class label: " + s);
}

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split: " + s);
}

struct DatasetRecord {
  std::string image_path;
  std::vector<std::string> mask_paths;
  ClassLabel label = ClassLabel::benign;
  Split split = Split::train;
};

struct ScanResult {
  std::vector<DatasetRecord> records;
  std::vector<std::string> rejects;  // images found without any mask
};

/// Directory naming of a dataset on disk. The default matches the public
/// breast-ultrasound layout: one subdirectory per class, images named
/// "<class> (<n>).png" with masks "<class> (<n>)_mask.png" plus optional
/// "_mask_1.png", "_mask_2.png", ...
struct LayoutDescriptor {
  std::map<std::string, std::string> class_dirs = {
      {"benign", "benign"}, {"malignant", "malignant"}, {"normal", "normal"}};
  std::string image_extension = ".png";
  std::string mask_suffix = "_mask";
};

struct BusiScanOptions {
  bool include_normal = false;
};

/// Enumerates image/mask records under one class-per-directory layout.
/// Records come back in lexicographic path order, so downstream shuffles
/// depend only on their seed.
inline ScanResult scan_layout(const std::string& root, const LayoutDescriptor& layout,
                              bool include_normal = false) {
  if (!fs::is_directory(root)) throw IoError("dataset root does not exist: " + root);
  ScanResult result;
  for (const auto& [class_name, dir_name] : layout.class_dirs) {
    const ClassLabel label = class_from_string(class_name);
    if (label == ClassLabel::normal && !include_normal) continue;
    const fs::path dir = fs::path(root) / dir_name;
    if (!fs::is_directory(dir)) continue;

    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == layout.image_extension)
        files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());

    std::map<std::string, std::vector<std::string>> masks_by_stem;
    std::vector<std::string> images;
    for (const auto& f : files) {
      const std::string stem = fs::path(f).stem().string();
      const auto pos = stem.rfind(layout.mask_suffix);
      if (pos != std::string::npos) {
        // "<stem><suffix>" or "<stem><suffix>_<k>"
        const std::string tail = stem.substr(pos + layout.mask_suffix.size());
        const bool numbered = tail.size() >= 2 && tail[0] == '_' &&
                              std::all_of(tail.begin() + 1, tail.end(),
                                          [](char c) { return std::isdigit(c) != 0; });
        if (tail.empty() || numbered) {
          masks_by_stem[stem.substr(0, pos)].push_back((dir / f).string());
          continue;
        }
      }
      images.push_back(f);
    }

    for (const auto& f : images) {
      const std::string stem = fs::path(f).stem().string();
      auto it = masks_by_stem.find(stem);
      if (it == masks_by_stem.end() || it->second.empty()) {
        result.rejects.push_back((dir / f).string());
        continue;
      }
      DatasetRecord rec;
      rec.image_path = (dir / f).string();
      rec.mask_paths = it->second;
      rec.label = label;
      result.records.push_back(std::move(rec));
    }
  }
  std::sort(result.records.begin(), result.records.end(),
            [](const DatasetRecord& a, const DatasetRecord& b) {
              return a.image_path < b.image_path;
            });
  std::sort(result.rejects.begin(), result.rejects.end());
  return result;
}

inline ScanResult scan_busi(const std::string& root, const BusiScanOptions& opts = {}) {
  return scan_layout(root, LayoutDescriptor{}, opts.include_normal);
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One normalized training example: image (3,S,S) in [0,1] and an exactly
/// binary mask (1,S,S).
struct SegSample {
  Tensor<float> image;
  Tensor<float> mask;
  ClassLabel label = ClassLabel::benign;
};

namespace detail {

inline Tensor<float> mat_to_chw(const cv::Mat& m) {
  // m: float32, 1 or 3 channels, values already scaled
  const int H = m.rows, W = m.cols, C = m.channels();
  Tensor<float> t({3, H, W});
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      if (C == 1) {
        const float v = m.at<float>(h, w);
        t.data[static_cast<std::size_t>(0 * H * W + h * W + w)] = v;
        t.data[static_cast<std::size_t>(1 * H * W + h * W + w)] = v;
        t.data[static_cast<std::size_t>(2 * H * W + h * W + w)] = v;
      } else {
        const cv::Vec3f v = m.at<cv::Vec3f>(h, w);
        for (int c = 0; c < 3; ++c)
          t.data[static_cast<std::size_t>(c * H * W + h * W + w)] = v[static_cast<int>(c)];
      }
    }
  return t;
}

inline cv::Mat channel_to_mat(const Tensor<float>& t, int c) {
  const int H = static_cast<int>(t.dim(1)), W = static_cast<int>(t.dim(2));
  cv::Mat m(H, W, CV_32F);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      m.at<float>(h, w) = t.data[static_cast<std::size_t>((c * H + h) * W + w)];
  return m;
}

}  // namespace detail

/// Loads and normalizes one record: image resized bilinearly to S x S,
/// grayscale replicated to 3 channels, values scaled to [0,1]; masks resized
/// nearest-neighbor, merged by pixel-wise union and binarized at 0.5.
inline SegSample load_sample(const DatasetRecord& record, int resolution) {
  cv::Mat img = cv::imread(record.image_path, cv::IMREAD_UNCHANGED);
  if (img.empty()) throw IoError("cannot read image: " + record.image_path);
  if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2BGR);
  cv::Mat imgf;
  img.convertTo(imgf, img.channels() == 1 ? CV_32F : CV_32FC3, 1.0 / 255.0);
  cv::resize(imgf, imgf, cv::Size(resolution, resolution), 0, 0, cv::INTER_LINEAR);

  cv::Mat merged = cv::Mat::zeros(resolution, resolution, CV_32F);
  for (const auto& mp : record.mask_paths) {
    cv::Mat mask = cv::imread(mp, cv::IMREAD_GRAYSCALE);
    if (mask.empty()) throw IoError("cannot read mask: " + mp);
    cv::Mat maskf;
    mask.convertTo(maskf, CV_32F, 1.0 / 255.0);
    cv::resize(maskf, maskf, cv::Size(resolution, resolution), 0, 0, cv::INTER_NEAREST);
    cv::max(merged, maskf, merged);
  }

  SegSample s;
  s.image = detail::mat_to_chw(imgf);
  for (auto& v : s.image.data) v = std::min(1.0f, std::max(0.0f, v));
  s.mask = Tensor<float>({1, resolution, resolution});
  for (int h = 0; h < resolution; ++h)
    for (int w = 0; w < resolution; ++w)
      s.mask.data[static_cast<std::size_t>(h * resolution + w)] =
          merged.at<float>(h, w) >= 0.5f ? 1.0f : 0.0f;
  s.label = record.label;
  return s;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitPlan {
  std::set<ClassLabel> train_classes{ClassLabel::benign, ClassLabel::malignant};
  std::set<ClassLabel> test_classes{ClassLabel::benign, ClassLabel::malignant};
  double train_fraction = 0.8;
  std::uint64_t seed = 42;
};

/// Stratified-by-class partition followed by class filtering, over item
/// indices. The partition is computed over all items first, so any two plans
/// with the same seed and fraction share it and filtered train/test sets can
/// never leak into each other.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> make_split_indices(
    const std::vector<ClassLabel>& labels, const SplitPlan& plan) {
  if (!(plan.train_fraction > 0.0 && plan.train_fraction < 1.0))
    throw ConfigError("train_fraction must be in (0,1)");

  std::map<ClassLabel, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  auto require_present = [&](const std::set<ClassLabel>& classes, const char* which) {
    for (ClassLabel c : classes)
      if (by_class.find(c) == by_class.end() || by_class[c].empty())
        throw ConfigError(std::string("requested ") + which + " class " + to_string(c) +
                          " has no records");
  };
  require_present(plan.train_classes, "train");
  require_present(plan.test_classes, "test");

  std::vector<std::size_t> train, test;
  for (auto& [label, idxs] : by_class) {
    Rng rng(mix_seed(plan.seed, static_cast<std::uint64_t>(label)));
    rng.shuffle(idxs);
    const auto n_train = static_cast<std::size_t>(
        std::llround(plan.train_fraction * static_cast<double>(idxs.size())));
    for (std::size_t i = 0; i < idxs.size(); ++i) {
      const bool in_train = i < n_train;
      if (in_train && plan.train_classes.count(label))
        train.push_back(idxs[i]);
      else if (!in_train && plan.test_classes.count(label))
        test.push_back(idxs[i]);
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

inline std::pair<std::vector<DatasetRecord>, std::vector<DatasetRecord>> make_splits(
    const std::vector<DatasetRecord>& records, const SplitPlan& plan) {
  std::vector<ClassLabel> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(r.label);
  auto [train_idx, test_idx] = make_split_indices(labels, plan);
  std::vector<DatasetRecord> train, test;
  for (std::size_t i : train_idx) {
    DatasetRecord r = records[i];
    r.split = Split::train;
    train.push_back(std::move(r));
  }
  for (std::size_t i : test_idx) {
    DatasetRecord r = records[i];
    r.split = Split::test;
    test.push_back(std::move(r));
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;   // uniform in +-10 when drawn
  double brightness = 1.0;  // uniform in [0.9, 1.1] when drawn
};

inline AugmentParams draw_augment_params(Rng& rng) {
  AugmentParams p;
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-10.0, 10.0);
  p.brightness = rng.uniform(0.9, 1.1);
  return p;
}

namespace detail {

inline void flip_chw(Tensor<float>& t, bool horizontal) {
  const std::int64_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  if (horizontal) {
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W / 2; ++w)
          std::swap(t.data[static_cast<std::size_t>((c * H + h) * W + w)],
                    t.data[static_cast<std::size_t>((c * H + h) * W + (W - 1 - w))]);
  } else {
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H / 2; ++h)
        for (std::int64_t w = 0; w < W; ++w)
          std::swap(t.data[static_cast<std::size_t>((c * H + h) * W + w)],
                    t.data[static_cast<std::size_t>((c * H + (H - 1 - h)) * W + w)]);
  }
}

inline void rotate_chw(Tensor<float>& t, double angle_deg) {
  const std::int64_t C = t.dim(0);
  const int H = static_cast<int>(t.dim(1)), W = static_cast<int>(t.dim(2));
  const cv::Mat rot = cv::getRotationMatrix2D(
      cv::Point2f(static_cast<float>(W) / 2.0f, static_cast<float>(H) / 2.0f), angle_deg, 1.0);
  for (std::int64_t c = 0; c < C; ++c) {
    cv::Mat m = channel_to_mat(t, static_cast<int>(c));
    cv::Mat out;
    cv::warpAffine(m, out, rot, m.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar(0));
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        t.data[static_cast<std::size_t>((c * H + h) * W + w)] = out.at<float>(h, w);
  }
}

}  // namespace detail

/// Applies one geometric+photometric draw. The identical geometric transform
/// runs on image and mask (same interpolation and border rules); the mask is
/// re-binarized at 0.5 afterwards. Brightness touches the image only.
inline SegSample augment_with_params(const SegSample& sample, const AugmentParams& p) {
  SegSample out = sample;
  if (p.hflip) {
    detail::flip_chw(out.image, true);
    detail::flip_chw(out.mask, true);
  }
  if (p.vflip) {
    detail::flip_chw(out.image, false);
    detail::flip_chw(out.mask, false);
  }
  if (p.angle_deg != 0.0) {
    detail::rotate_chw(out.image, p.angle_deg);
    detail::rotate_chw(out.mask, p.angle_deg);
  }
  if (p.brightness != 1.0) {
    for (auto& v : out.image.data)
      v = std::min(1.0f, std::max(0.0f, v * static_cast<float>(p.brightness)));
  }
  for (auto& v : out.mask.data) v = v >= 0.5f ? 1.0f : 0.0f;
  return out;
}

inline SegSample augment(const SegSample& sample, std::uint64_t seed) {
  Rng rng(seed);
  return augment_with_params(sample, draw_augment_params(rng));
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace detail {

inline bool point_in_polygon(double x, double y, const std::vector<cv::Point2d>& poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const bool cross = (poly[i].y > y) != (poly[j].y > y);
    if (cross) {
      const double t = (y - poly[i].y) / (poly[j].y - poly[i].y);
      if (x < poly[i].x + t * (poly[j].x - poly[i].x)) inside = !inside;
    }
  }
  return inside;
}

}  // namespace detail

/// Desk-scale stand-in for the two lesion regimes. Benign: one ellipse with
/// a sharp boundary over mild background noise. Malignant: an irregular star
/// polygon whose image rendering is blurred and speckled; the mask stays the
/// exact generating shape. Sampling ranges keep the foreground fraction of
/// every mask inside (0.02, 0.5).
inline std::vector<SegSample> synth_generate(int n, ClassLabel kind, int resolution,
                                             std::uint64_t seed) {
  if (n < 1) throw ConfigError("synth_generate: n must be >= 1");
  if (kind == ClassLabel::normal)
    throw ConfigError("synth_generate: only benign/malignant supported");
  const int S = resolution;
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  Rng rng(seed);

  for (int idx = 0; idx < n; ++idx) {
    Tensor<float> mask({1, S, S});
    double area_frac = 0.0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      mask.fill(0.0f);
      const double cx = rng.uniform(0.38, 0.62) * S;
      const double cy = rng.uniform(0.38, 0.62) * S;
      if (kind == ClassLabel::benign) {
        const double a = rng.uniform(0.10, 0.22) * S;
        const double b = rng.uniform(0.10, 0.22) * S;
        const double theta = rng.uniform(0.0, 3.14159265358979323846);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int h = 0; h < S; ++h)
          for (int w = 0; w < S; ++w) {
            const double dx = w - cx, dy = h - cy;
            const double u = (dx * ct + dy * st) / a;
            const double v = (-dx * st + dy * ct) / b;
            if (u * u + v * v <= 1.0)
              mask.data[static_cast<std::size_t>(h * S + w)] = 1.0f;
          }
      } else {
        const int spikes = 7 + static_cast<int>(rng.uniform_int(5));
        std::vector<cv::Point2d> poly;
        const double phase = rng.uniform(0.0, 6.28318530717958647692);
        for (int k = 0; k < 2 * spikes; ++k) {
          const double r = (k % 2 == 0 ? rng.uniform(0.18, 0.28) : rng.uniform(0.10, 0.14)) * S;
          const double ang = phase + 3.14159265358979323846 * k / spikes;
          poly.emplace_back(cx + r * std::cos(ang), cy + r * std::sin(ang));
        }
        for (int h = 0; h < S; ++h)
          for (int w = 0; w < S; ++w)
            if (detail::point_in_polygon(w + 0.0, h + 0.0, poly))
              mask.data[static_cast<std::size_t>(h * S + w)] = 1.0f;
      }
      area_frac = static_cast<double>(mask.sum()) / static_cast<double>(S * S);
      if (area_frac > 0.02 && area_frac < 0.5) break;
    }
    if (!(area_frac > 0.02 && area_frac < 0.5))
      throw NumericError("synth_generate: could not place a lesion in range");

    cv::Mat img(S, S, CV_32F);
    if (kind == ClassLabel::benign) {
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w) {
          const bool fg = mask.data[static_cast<std::size_t>(h * S + w)] > 0.5f;
          const double base = fg ? 0.18 : 0.58;
          const double noise = rng.normal(0.0, fg ? 0.02 : 0.04);
          img.at<float>(h, w) = static_cast<float>(base + noise);
        }
    } else {
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w) {
          const bool fg = mask.data[static_cast<std::size_t>(h * S + w)] > 0.5f;
          const double base = fg ? 0.26 : 0.55;
          img.at<float>(h, w) = static_cast<float>(base + rng.normal(0.0, 0.10));
        }
      cv::GaussianBlur(img, img, cv::Size(0, 0), 2.5);  // fuzzy boundary
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w)
          img.at<float>(h, w) += static_cast<float>(rng.normal(0.0, 0.06));
    }

    SegSample s;
    s.label = kind;
    s.mask = std::move(mask);
    s.image = Tensor<float>({3, S, S});
    for (int h = 0; h < S; ++h)
      for (int w = 0; w < S; ++w) {
        const float v = std::min(1.0f, std::max(0.0f, img.at<float>(h, w)));
        for (int c = 0; c < 3; ++c)
          s.image.data[static_cast<std::size_t>((c * S + h) * S + w)] = v;
      }
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes samples to disk in the class-per-directory layout so a synthetic
/// dataset can be scanned and loaded like a real one.
inline void write_busi_layout(const std::string& dir, const std::vector<SegSample>& samples) {
  std::map<ClassLabel, int> counters;
  for (const auto& s : samples) {
    const std::string cls = to_string(s.label);
    const fs::path d = fs::path(dir) / cls;
    fs::create_directories(d);
    const int i = ++counters[s.label];
    const int S = static_cast<int>(s.image.dim(1));
    cv::Mat img(S, S, CV_8U), mask(S, S, CV_8U);
    for (int h = 0; h < S; ++h)
      for (int w = 0; w < S; ++w) {
        img.at<std::uint8_t>(h, w) = static_cast<std::uint8_t>(
            std::lround(s.image.data[static_cast<std::size_t>(h * S + w)] * 255.0f));
        mask.at<std::uint8_t>(h, w) =
            s.mask.data[static_cast<std::size_t>(h * S + w)] > 0.5f ? 255 : 0;
      }
    const std::string stem = cls + " (" + std::to_string(i) + ")";
    if (!cv::imwrite((d / (stem + ".png")).string(), img))
      throw IoError("cannot write " + (d / (stem + ".png")).string());
    if (!cv::imwrite((d / (stem + "_mask.png")).string(), mask))
      throw IoError("cannot write " + (d / (stem + "_mask.png")).string());
  }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

inline void write_manifest(const std::string& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  for (const auto& r : records) {
    nlohmann::json j{{"image", r.image_path},
                     {"masks", r.mask_paths},
                     {"class", to_string(r.label)},
                     {"split", to_string(r.split)}};
    out << j.dump() << "\n";
  }
}

inline std::vector<DatasetRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest: " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    DatasetRecord r;
    r.image_path = j.at("image").get<std::string>();
    r.mask_paths = j.at("masks").get<std::vector<std::string>>();
    r.label = class_from_string(j.at("class").get<std::string>());
    r.split = split_from_string(j.at("split").get<std::string>());
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<SegSample>& samples,
                                                          const std::vector<std::size_t>& idxs) {
  if (idxs.empty()) throw ConfigError("make_batch: empty index list");
  const std::int64_t C = samples[idxs[0]].image.dim(0);
  const std::int64_t H = samples[idxs[0]].image.dim(1);
  const std::int64_t W = samples[idxs[0]].image.dim(2);
  Tensor<float> images({static_cast<std::int64_t>(idxs.size()), C, H, W});
  Tensor<float> masks({static_cast<std::int64_t>(idxs.size()), 1, H, W});
  for (std::size_t b = 0; b < idxs.size(); ++b) {
    const SegSample& s = samples[idxs[b]];
    if (s.image.dim(1) != H || s.image.dim(2) != W)
      throw ShapeError("make_batch: inconsistent sample resolutions");
    std::copy(s.image.data.begin(), s.image.data.end(),
              images.data.begin() + static_cast<std::ptrdiff_t>(b * static_cast<std::size_t>(C * H * W)));
    std::copy(s.mask.data.begin(), s.mask.data.end(),
              masks.data.begin() + static_cast<std::ptrdiff_t>(b * static_cast<std::size_t>(H * W)));
  }
  return {std::move(images), std::move(masks)};
}

}  // namespace segkd
