#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "segkd/arch.hpp"
#include "segkd/ops.hpp"
#include "segkd/rng.hpp"

namespace segkd {

template <typename T>
struct ParamRef {
  std::string name;
  Var<T>* var;
  bool decay;  // norm parameters are exempt from weight decay
};

template <typename T>
struct BufferRef {
  std::string name;
  std::vector<T>* buf;
};

namespace detail {
template <typename T>
Tensor<T> kaiming_normal(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}
}  // namespace detail

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng)
      : cin_(cin), cout_(cout), k_(k), stride_(stride), pad_(pad), has_bias_(bias) {
    w_ = parameter(detail::kaiming_normal<T>({cout, cin, k, k},
                                             static_cast<std::int64_t>(cin) * k * k, rng));
    if (bias) b_ = parameter(Tensor<T>::zeros({cout}));
  }

  Var<T> forward(const Var<T>& x) const { return conv2d(x, w_, b_, stride_, pad_); }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &w_, true});
    if (has_bias_) out.push_back({prefix + ".bias", &b_, true});
  }

  int out_channels() const { return cout_; }
  Var<T>& weight() { return w_; }
  Var<T>& bias() { return b_; }

 private:
  int cin_ = 0, cout_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
  Var<T> w_, b_;
};

template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int cin, int cout, int k, int stride, int pad, int output_padding, Rng& rng)
      : cin_(cin), cout_(cout), k_(k), stride_(stride), pad_(pad), opad_(output_padding) {
    w_ = parameter(detail::kaiming_normal<T>({cin, cout, k, k},
                                             static_cast<std::int64_t>(cin) * k * k, rng));
    b_ = parameter(Tensor<T>::zeros({cout}));
  }

  Var<T> forward(const Var<T>& x) const {
    return conv_transpose2d(x, w_, b_, stride_, pad_, opad_);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &w_, true});
    out.push_back({prefix + ".bias", &b_, true});
  }

  int out_channels() const { return cout_; }

 private:
  int cin_ = 0, cout_ = 0, k_ = 0, stride_ = 2, pad_ = 0, opad_ = 0;
  Var<T> w_, b_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : channels_(channels),
        running_mean_(static_cast<std::size_t>(channels), T(0)),
        running_var_(static_cast<std::size_t>(channels), T(1)) {
    gamma_ = parameter(Tensor<T>::ones({channels}));
    beta_ = parameter(Tensor<T>::zeros({channels}));
  }

  Var<T> forward(const Var<T>& x) {
    if (!training_) return batch_norm_eval(x, gamma_, beta_, running_mean_, running_var_, eps_);
    std::vector<T> bm, bv;
    Var<T> y = batch_norm_train(x, gamma_, beta_, eps_, &bm, &bv);
    const std::int64_t m = x.value().dim(0) * x.value().dim(2) * x.value().dim(3);
    const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
    for (std::size_t c = 0; c < running_mean_.size(); ++c) {
      running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * bm[c];
      running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * bv[c] * unbias;
    }
    return y;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &gamma_, false});
    out.push_back({prefix + ".bias", &beta_, false});
  }

  void collect_buffers(const std::string& prefix, std::vector<BufferRef<T>>& out) {
    out.push_back({prefix + ".running_mean", &running_mean_});
    out.push_back({prefix + ".running_var", &running_var_});
  }

  void set_training(bool on) { training_ = on; }

 private:
  int channels_ = 0;
  Var<T> gamma_, beta_;
  std::vector<T> running_mean_, running_var_;
  T momentum_ = T(0.1);
  T eps_ = T(1e-5);
  bool training_ = true;
};

/// Two (conv 3x3, batch norm, relu) stages; the standard U-Net block.
template <typename T>
class DoubleConv {
 public:
  DoubleConv() = default;
  DoubleConv(int cin, int mid, int cout, Rng& rng)
      : conv1_(cin, mid, 3, 1, 1, true, rng),
        bn1_(mid),
        conv2_(mid, cout, 3, 1, 1, true, rng),
        bn2_(cout) {}

  Var<T> forward(const Var<T>& x) {
    return relu(bn2_.forward(conv2_.forward(relu(bn1_.forward(conv1_.forward(x))))));
  }

  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    conv1_.collect(p + ".conv1", out);
    bn1_.collect(p + ".bn1", out);
    conv2_.collect(p + ".conv2", out);
    bn2_.collect(p + ".bn2", out);
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    bn1_.collect_buffers(p + ".bn1", out);
    bn2_.collect_buffers(p + ".bn2", out);
  }
  void set_training(bool on) {
    bn1_.set_training(on);
    bn2_.set_training(on);
  }

  int out_channels() const { return conv2_.out_channels(); }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
};

/// Residual unit: 1x1 reduce, 3x3 (carries the stride), 1x1 expand, with a
/// projection shortcut when shape changes. Convolutions are bias-free; the
/// norms carry the shift.
template <typename T>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(int cin, int mid, int cout, int stride, Rng& rng)
      : conv1_(cin, mid, 1, 1, 0, false, rng),
        bn1_(mid),
        conv2_(mid, mid, 3, stride, 1, false, rng),
        bn2_(mid),
        conv3_(mid, cout, 1, 1, 0, false, rng),
        bn3_(cout),
        has_projection_(stride != 1 || cin != cout) {
    if (has_projection_) {
      proj_ = Conv2d<T>(cin, cout, 1, stride, 0, false, rng);
      proj_bn_ = BatchNorm2d<T>(cout);
    }
  }

  Var<T> forward(const Var<T>& x) {
    Var<T> y = relu(bn1_.forward(conv1_.forward(x)));
    y = relu(bn2_.forward(conv2_.forward(y)));
    y = bn3_.forward(conv3_.forward(y));
    Var<T> shortcut = has_projection_ ? proj_bn_.forward(proj_.forward(x)) : x;
    return relu(add(y, shortcut));
  }

  void collect(const std::string& p, std::vector<ParamRef<T>>& out) {
    conv1_.collect(p + ".conv1", out);
    bn1_.collect(p + ".bn1", out);
    conv2_.collect(p + ".conv2", out);
    bn2_.collect(p + ".bn2", out);
    conv3_.collect(p + ".conv3", out);
    bn3_.collect(p + ".bn3", out);
    if (has_projection_) {
      proj_.collect(p + ".proj", out);
      proj_bn_.collect(p + ".proj_bn", out);
    }
  }
  void collect_buffers(const std::string& p, std::vector<BufferRef<T>>& out) {
    bn1_.collect_buffers(p + ".bn1", out);
    bn2_.collect_buffers(p + ".bn2", out);
    bn3_.collect_buffers(p + ".bn3", out);
    if (has_projection_) proj_bn_.collect_buffers(p + ".proj_bn", out);
  }
  void set_training(bool on) {
    bn1_.set_training(on);
    bn2_.set_training(on);
    bn3_.set_training(on);
    if (has_projection_) proj_bn_.set_training(on);
  }

  int out_channels() const { return conv3_.out_channels(); }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  Conv2d<T> conv3_;
  BatchNorm2d<T> bn3_;
  bool has_projection_ = false;
  Conv2d<T> proj_;
  BatchNorm2d<T> proj_bn_;
};

}  // namespace segkd
