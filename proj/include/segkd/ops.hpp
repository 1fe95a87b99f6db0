#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "segkd/autograd.hpp"
#include "segkd/blas.hpp"
#include "segkd/errors.hpp"
#include "segkd/tensor.hpp"

namespace segkd {

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& n) {
    for (int p = 0; p < 2; ++p) {
      if (!n.parents[p]->requires_grad) continue;
      Tensor<T>& g = n.parents[p]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

/// y = scale * x + shift, with scalar constants.
template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
  Tensor<T> out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = scale * out[i] + shift;
  return make_op<T>(std::move(out), {x.node()}, [scale](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += scale * n.grad[i];
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& x, T scale) {
  return affine(x, scale, T(0));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, mul_scalar(b, T(-1)));
}

/// Elementwise product. Shapes must match except that either side may have a
/// single channel against the other's C channels (NCHW broadcast), which is
/// how attention coefficient maps scale multi-channel features.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const bool same = av.same_shape(bv);
  const bool bcast_b = !same && av.rank() == 4 && bv.rank() == 4 && bv.dim(1) == 1 &&
                       av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3);
  const bool bcast_a = !same && !bcast_b && av.rank() == 4 && bv.rank() == 4 && av.dim(1) == 1 &&
                       av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3);
  if (!same && !bcast_a && !bcast_b)
    throw ShapeError("mul: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  if (bcast_a) return mul(b, a);

  Tensor<T> out = av;
  if (same) {
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  } else {
    const std::int64_t N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T* bp = &bv.data[static_cast<std::size_t>(n * HW)];
        T* op = &out.data[static_cast<std::size_t>((n * C + c) * HW)];
        for (std::int64_t i = 0; i < HW; ++i) op[i] *= bp[i];
      }
  }
  return make_op<T>(std::move(out), {a.node(), b.node()}, [same](Node<T>& n) {
    const Tensor<T>& av = n.parents[0]->value;
    const Tensor<T>& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<T>& ga = n.parents[0]->ensure_grad();
      if (same) {
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * bv[i];
      } else {
        const std::int64_t N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
        for (std::int64_t nn = 0; nn < N; ++nn)
          for (std::int64_t c = 0; c < C; ++c) {
            const T* bp = &bv.data[static_cast<std::size_t>(nn * HW)];
            const T* gp = &n.grad.data[static_cast<std::size_t>((nn * C + c) * HW)];
            T* gap = &ga.data[static_cast<std::size_t>((nn * C + c) * HW)];
            for (std::int64_t i = 0; i < HW; ++i) gap[i] += gp[i] * bp[i];
          }
      }
    }
    if (n.parents[1]->requires_grad) {
      Tensor<T>& gb = n.parents[1]->ensure_grad();
      if (same) {
        for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] += n.grad[i] * av[i];
      } else {
        const std::int64_t N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
        for (std::int64_t nn = 0; nn < N; ++nn)
          for (std::int64_t c = 0; c < C; ++c) {
            const T* ap = &av.data[static_cast<std::size_t>((nn * C + c) * HW)];
            const T* gp = &n.grad.data[static_cast<std::size_t>((nn * C + c) * HW)];
            T* gbp = &gb.data[static_cast<std::size_t>(nn * HW)];
            for (std::int64_t i = 0; i < HW; ++i) gbp[i] += gp[i] * ap[i];
          }
      }
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor<T> out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
  return make_op<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& n) {
    const Tensor<T>& av = n.parents[0]->value;
    const Tensor<T>& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<T>& ga = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor<T>& gb = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < gb.numel(); ++i)
        gb[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
  return make_op<T>(std::move(out), {x.node()}, [](Node<T>& n) {
    const Tensor<T>& xv = n.parents[0]->value;
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (xv[i] > T(0)) g[i] += n.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
  return make_op<T>(std::move(out), {x.node()}, [](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const T y = n.value[i];
      g[i] += n.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Var<T> vlog(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return make_op<T>(std::move(out), {x.node()}, [](Node<T>& n) {
    const Tensor<T>& xv = n.parents[0]->value;
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / xv[i];
  });
}

/// Clamp with zero gradient outside [lo, hi].
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
  return make_op<T>(std::move(out), {x.node()}, [lo, hi](Node<T>& n) {
    const Tensor<T>& xv = n.parents[0]->value;
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) g[i] += n.grad[i];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out = Tensor<T>::scalar(x.value().sum());
  return make_op<T>(std::move(out), {x.node()}, [](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->ensure_grad();
    const T seed = n.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const T inv = T(1) / static_cast<T>(x.value().numel());
  Tensor<T> out = Tensor<T>::scalar(x.value().sum() * inv);
  return make_op<T>(std::move(out), {x.node()}, [inv](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->ensure_grad();
    const T seed = n.grad[0] * inv;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed;
  });
}

/// Channel concatenation of NCHW tensors.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const std::int64_t N = xs[0].value().dim(0), H = xs[0].value().dim(2), W = xs[0].value().dim(3);
  std::int64_t C = 0;
  for (const auto& x : xs) {
    if (x.value().rank() != 4 || x.value().dim(0) != N || x.value().dim(2) != H ||
        x.value().dim(3) != W)
      throw ShapeError("concat: incompatible input " + shape_str(x.value().shape));
    C += x.value().dim(1);
  }
  Tensor<T> out({N, C, H, W});
  const std::int64_t HW = H * W;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::int64_t coff = 0;
  for (const auto& x : xs) {
    const std::int64_t Ci = x.value().dim(1);
    for (std::int64_t n = 0; n < N; ++n)
      std::memcpy(&out.data[static_cast<std::size_t>((n * C + coff) * HW)],
                  &x.value().data[static_cast<std::size_t>(n * Ci * HW)],
                  static_cast<std::size_t>(Ci * HW) * sizeof(T));
    coff += Ci;
    parents.push_back(x.node());
  }
  return make_op<T>(std::move(out), std::move(parents), [N, C, HW](Node<T>& n) {
    std::int64_t coff = 0;
    for (auto& p : n.parents) {
      const std::int64_t Ci = p->value.dim(1);
      if (p->requires_grad) {
        Tensor<T>& g = p->ensure_grad();
        for (std::int64_t nn = 0; nn < N; ++nn) {
          const T* src = &n.grad.data[static_cast<std::size_t>((nn * C + coff) * HW)];
          T* dst = &g.data[static_cast<std::size_t>(nn * Ci * HW)];
          for (std::int64_t i = 0; i < Ci * HW; ++i) dst[i] += src[i];
        }
      }
      coff += Ci;
    }
  });
}

/// Softmax across the channel axis, per pixel.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("softmax_channels: expected NCHW");
  const std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor<T> out(xv.shape);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) {
      T mx = xv[(n * C) * HW + i];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, xv[(n * C + c) * HW + i]);
      T z = T(0);
      for (std::int64_t c = 0; c < C; ++c) {
        const T e = std::exp(xv[(n * C + c) * HW + i] - mx);
        out[(n * C + c) * HW + i] = e;
        z += e;
      }
      for (std::int64_t c = 0; c < C; ++c) out[(n * C + c) * HW + i] /= z;
    }
  return make_op<T>(std::move(out), {x.node()}, [N, C, HW](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t nn = 0; nn < N; ++nn)
      for (std::int64_t i = 0; i < HW; ++i) {
        T dot = T(0);
        for (std::int64_t c = 0; c < C; ++c)
          dot += n.grad[(nn * C + c) * HW + i] * n.value[(nn * C + c) * HW + i];
        for (std::int64_t c = 0; c < C; ++c) {
          const T y = n.value[(nn * C + c) * HW + i];
          g[(nn * C + c) * HW + i] += y * (n.grad[(nn * C + c) * HW + i] - dot);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, int k, int stride, int pad,
            std::int64_t Ho, std::int64_t Wo, T* col) {
  for (std::int64_t c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(row + oh * Wo, row + (oh + 1) * Wo, T(0));
            continue;
          }
          const T* xr = x + (c * H + ih) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t iw = ow * stride - pad + kj;
            row[oh * Wo + ow] = (iw >= 0 && iw < W) ? xr[iw] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, int k, int stride,
                int pad, std::int64_t Ho, std::int64_t Wo, T* x) {
  for (std::int64_t c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* xr = x + (c * H + ih) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) xr[iw] += row[oh * Wo + ow];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution, NCHW x (Cout,Cin,k,k) -> NCHW. `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: expected rank-4 tensors");
  const std::int64_t N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t Cout = wv.dim(0);
  const int k = static_cast<int>(wv.dim(2));
  if (wv.dim(1) != Cin)
    throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels, weight expects " +
                     std::to_string(wv.dim(1)));
  const std::int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: output would be empty");
  const std::int64_t ckk = Cin * k * k, howo = Ho * Wo;
  const bool has_bias = bias.defined();

  Tensor<T> out({N, Cout, Ho, Wo});
  std::vector<T> col(static_cast<std::size_t>(ckk * howo));
  for (std::int64_t n = 0; n < N; ++n) {
    detail::im2col(&xv.data[static_cast<std::size_t>(n * Cin * H * W)], Cin, H, W, k, stride, pad,
                   Ho, Wo, col.data());
    gemm(false, false, Cout, howo, ckk, T(1), wv.data.data(), ckk, col.data(), howo, T(0),
         &out.data[static_cast<std::size_t>(n * Cout * howo)], howo);
    if (has_bias)
      for (std::int64_t c = 0; c < Cout; ++c) {
        T* o = &out.data[static_cast<std::size_t>((n * Cout + c) * howo)];
        const T b = bias.value()[c];
        for (std::int64_t i = 0; i < howo; ++i) o[i] += b;
      }
  }

  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_op<T>(
      std::move(out), std::move(parents),
      [N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, ckk, howo, has_bias](Node<T>& nd) {
        const Tensor<T>& xv = nd.parents[0]->value;
        const Tensor<T>& wv = nd.parents[1]->value;
        const bool need_x = nd.parents[0]->requires_grad;
        const bool need_w = nd.parents[1]->requires_grad;
        const bool need_b = has_bias && nd.parents[2]->requires_grad;
        std::vector<T> col(static_cast<std::size_t>(ckk * howo));
        for (std::int64_t n = 0; n < N; ++n) {
          const T* gy = &nd.grad.data[static_cast<std::size_t>(n * Cout * howo)];
          if (need_w) {
            detail::im2col(&xv.data[static_cast<std::size_t>(n * Cin * H * W)], Cin, H, W, k,
                           stride, pad, Ho, Wo, col.data());
            gemm(false, true, Cout, ckk, howo, T(1), gy, howo, col.data(), howo, T(1),
                 nd.parents[1]->ensure_grad().data.data(), ckk);
          }
          if (need_x) {
            gemm(true, false, ckk, howo, Cout, T(1), wv.data.data(), ckk, gy, howo, T(0),
                 col.data(), howo);
            detail::col2im_add(col.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                               &nd.parents[0]->ensure_grad().data[static_cast<std::size_t>(
                                   n * Cin * H * W)]);
          }
          if (need_b) {
            Tensor<T>& gb = nd.parents[2]->ensure_grad();
            for (std::int64_t c = 0; c < Cout; ++c) {
              T acc = T(0);
              for (std::int64_t i = 0; i < howo; ++i) acc += gy[c * howo + i];
              gb[c] += acc;
            }
          }
        }
      });
}

/// Transposed 2-D convolution, weight layout (Cin,Cout,k,k).
/// H_out = (H-1)*stride - 2*pad + k + output_padding.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad,
                        int output_padding) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4)
    throw ShapeError("conv_transpose2d: expected rank-4 tensors");
  const std::int64_t N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t Cout = wv.dim(1);
  const int k = static_cast<int>(wv.dim(2));
  if (wv.dim(0) != Cin)
    throw ShapeError("conv_transpose2d: input has " + std::to_string(Cin) +
                     " channels, weight expects " + std::to_string(wv.dim(0)));
  const std::int64_t Ho = (H - 1) * stride - 2 * pad + k + output_padding;
  const std::int64_t Wo = (W - 1) * stride - 2 * pad + k + output_padding;
  const std::int64_t ckk = Cout * k * k, hw = H * W;
  const bool has_bias = bias.defined();

  Tensor<T> out({N, Cout, Ho, Wo});
  std::vector<T> col(static_cast<std::size_t>(ckk * hw));
  for (std::int64_t n = 0; n < N; ++n) {
    // col = W^T (ckk x Cin) * x_n (Cin x HW)
    gemm(true, false, ckk, hw, Cin, T(1), wv.data.data(), ckk,
         &xv.data[static_cast<std::size_t>(n * Cin * hw)], hw, T(0), col.data(), hw);
    T* y = &out.data[static_cast<std::size_t>(n * Cout * Ho * Wo)];
    for (std::int64_t c = 0; c < Cout; ++c)
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          const T* row = col.data() + ((c * k + ki) * k + kj) * hw;
          for (std::int64_t h = 0; h < H; ++h) {
            const std::int64_t oh = h * stride - pad + ki;
            if (oh < 0 || oh >= Ho) continue;
            T* yr = y + (c * Ho + oh) * Wo;
            for (std::int64_t ww = 0; ww < W; ++ww) {
              const std::int64_t ow = ww * stride - pad + kj;
              if (ow >= 0 && ow < Wo) yr[ow] += row[h * W + ww];
            }
          }
        }
    if (has_bias)
      for (std::int64_t c = 0; c < Cout; ++c) {
        T* o = y + c * Ho * Wo;
        const T b = bias.value()[c];
        for (std::int64_t i = 0; i < Ho * Wo; ++i) o[i] += b;
      }
  }

  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_op<T>(
      std::move(out), std::move(parents),
      [N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, ckk, hw, has_bias](Node<T>& nd) {
        const Tensor<T>& xv = nd.parents[0]->value;
        const Tensor<T>& wv = nd.parents[1]->value;
        const bool need_x = nd.parents[0]->requires_grad;
        const bool need_w = nd.parents[1]->requires_grad;
        const bool need_b = has_bias && nd.parents[2]->requires_grad;
        std::vector<T> colg(static_cast<std::size_t>(ckk * hw));
        for (std::int64_t n = 0; n < N; ++n) {
          const T* gy = &nd.grad.data[static_cast<std::size_t>(n * Cout * Ho * Wo)];
          // Gather dY back into column form (transpose of the forward scatter).
          for (std::int64_t c = 0; c < Cout; ++c)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                T* row = colg.data() + ((c * k + ki) * k + kj) * hw;
                for (std::int64_t h = 0; h < H; ++h) {
                  const std::int64_t oh = h * stride - pad + ki;
                  const T* gr = (oh >= 0 && oh < Ho) ? gy + (c * Ho + oh) * Wo : nullptr;
                  for (std::int64_t ww = 0; ww < W; ++ww) {
                    const std::int64_t ow = ww * stride - pad + kj;
                    row[h * W + ww] = (gr && ow >= 0 && ow < Wo) ? gr[ow] : T(0);
                  }
                }
              }
          if (need_x)
            gemm(false, false, Cin, hw, ckk, T(1), wv.data.data(), ckk, colg.data(), hw, T(1),
                 &nd.parents[0]->ensure_grad().data[static_cast<std::size_t>(n * Cin * hw)], hw);
          if (need_w)
            gemm(false, true, Cin, ckk, hw, T(1),
                 &xv.data[static_cast<std::size_t>(n * Cin * hw)], hw, colg.data(), hw, T(1),
                 nd.parents[1]->ensure_grad().data.data(), ckk);
          if (need_b) {
            Tensor<T>& gb = nd.parents[2]->ensure_grad();
            for (std::int64_t c = 0; c < Cout; ++c) {
              T acc = T(0);
              for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += gy[c * Ho * Wo + i];
              gb[c] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling, normalization, resampling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int k, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("max_pool2d: expected NCHW");
  const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<T> out({N, C, Ho, Wo});
  const bool track = grad_enabled() && x.requires_grad();
  std::vector<std::int64_t> argmax(track ? static_cast<std::size_t>(out.numel()) : 0);
  std::int64_t oi = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* xc = &xv.data[static_cast<std::size_t>((n * C + c) * H * W)];
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_idx = -1;
          for (int ki = 0; ki < k; ++ki) {
            const std::int64_t ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= H) continue;
            for (int kj = 0; kj < k; ++kj) {
              const std::int64_t iw = ow * stride - pad + kj;
              if (iw < 0 || iw >= W) continue;
              const T v = xc[ih * W + iw];
              if (v > best) {
                best = v;
                best_idx = (n * C + c) * H * W + ih * W + iw;
              }
            }
          }
          out[oi] = best;
          if (track) argmax[static_cast<std::size_t>(oi)] = best_idx;
        }
    }
  return make_op<T>(std::move(out), {x.node()}, [argmax = std::move(argmax)](Node<T>& n) {
    Tensor<T>& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      if (argmax[static_cast<std::size_t>(i)] >= 0) g[argmax[static_cast<std::size_t>(i)]] += n.grad[i];
  });
}

/// Batch normalization over (N,H,W) per channel, training statistics.
/// Batch mean/var are written to the out-params so callers can maintain
/// running estimates.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        std::vector<T>* batch_mean_out, std::vector<T>* batch_var_out) {
  const Tensor<T>& xv = x.value();
  const std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const std::int64_t m = N * HW;
  std::vector<T> mean(static_cast<std::size_t>(C), T(0)), invstd(static_cast<std::size_t>(C));
  std::vector<T> var(static_cast<std::size_t>(C), T(0));
  for (std::int64_t c = 0; c < C; ++c) {
    T acc = T(0);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* p = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
      for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
    }
    mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
    T vacc = T(0);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* p = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
      for (std::int64_t i = 0; i < HW; ++i) {
        const T d = p[i] - mean[static_cast<std::size_t>(c)];
        vacc += d * d;
      }
    }
    var[static_cast<std::size_t>(c)] = vacc / static_cast<T>(m);
    invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  }
  if (batch_mean_out) *batch_mean_out = mean;
  if (batch_var_out) *batch_var_out = var;

  Tensor<T> out(xv.shape);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
      T* o = &out.data[static_cast<std::size_t>((n * C + c) * HW)];
      const T mu = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
      const T g = gamma.value()[c], b = beta.value()[c];
      for (std::int64_t i = 0; i < HW; ++i) o[i] = (p[i] - mu) * is * g + b;
    }

  return make_op<T>(
      std::move(out), {x.node(), gamma.node(), beta.node()},
      [N, C, HW, m, mean = std::move(mean), invstd = std::move(invstd)](Node<T>& nd) {
        const Tensor<T>& xv = nd.parents[0]->value;
        const Tensor<T>& gam = nd.parents[1]->value;
        const bool need_x = nd.parents[0]->requires_grad;
        const bool need_g = nd.parents[1]->requires_grad;
        const bool need_b = nd.parents[2]->requires_grad;
        for (std::int64_t c = 0; c < C; ++c) {
          const T mu = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::int64_t n = 0; n < N; ++n) {
            const T* xp = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
            const T* gp = &nd.grad.data[static_cast<std::size_t>((n * C + c) * HW)];
            for (std::int64_t i = 0; i < HW; ++i) {
              sum_dy += gp[i];
              sum_dy_xhat += gp[i] * (xp[i] - mu) * is;
            }
          }
          if (need_b) nd.parents[2]->ensure_grad()[c] += sum_dy;
          if (need_g) nd.parents[1]->ensure_grad()[c] += sum_dy_xhat;
          if (need_x) {
            Tensor<T>& gx = nd.parents[0]->ensure_grad();
            const T g = gam[c];
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::int64_t n = 0; n < N; ++n) {
              const T* xp = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
              const T* gp = &nd.grad.data[static_cast<std::size_t>((n * C + c) * HW)];
              T* gxp = &gx.data[static_cast<std::size_t>((n * C + c) * HW)];
              for (std::int64_t i = 0; i < HW; ++i) {
                const T xhat = (xp[i] - mu) * is;
                gxp[i] += g * is * (gp[i] - inv_m * (sum_dy + xhat * sum_dy_xhat));
              }
            }
          }
        }
      });
}

/// Batch normalization with fixed (running) statistics, inference mode.
template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       const std::vector<T>& running_mean, const std::vector<T>& running_var,
                       T eps) {
  const Tensor<T>& xv = x.value();
  const std::int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  std::vector<T> invstd(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c)
    invstd[static_cast<std::size_t>(c)] =
        T(1) / std::sqrt(running_var[static_cast<std::size_t>(c)] + eps);
  Tensor<T> out(xv.shape);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
      T* o = &out.data[static_cast<std::size_t>((n * C + c) * HW)];
      const T mu = running_mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T g = gamma.value()[c], b = beta.value()[c];
      for (std::int64_t i = 0; i < HW; ++i) o[i] = (p[i] - mu) * is * g + b;
    }
  return make_op<T>(
      std::move(out), {x.node(), gamma.node(), beta.node()},
      [N, C, HW, invstd, running_mean](Node<T>& nd) {
        const Tensor<T>& xv = nd.parents[0]->value;
        const Tensor<T>& gam = nd.parents[1]->value;
        for (std::int64_t c = 0; c < C; ++c) {
          const T is = invstd[static_cast<std::size_t>(c)];
          const T mu = running_mean[static_cast<std::size_t>(c)];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::int64_t n = 0; n < N; ++n) {
            const T* xp = &xv.data[static_cast<std::size_t>((n * C + c) * HW)];
            const T* gp = &nd.grad.data[static_cast<std::size_t>((n * C + c) * HW)];
            for (std::int64_t i = 0; i < HW; ++i) {
              sum_dy += gp[i];
              sum_dy_xhat += gp[i] * (xp[i] - mu) * is;
            }
          }
          if (nd.parents[2]->requires_grad) nd.parents[2]->ensure_grad()[c] += sum_dy;
          if (nd.parents[1]->requires_grad) nd.parents[1]->ensure_grad()[c] += sum_dy_xhat;
          if (nd.parents[0]->requires_grad) {
            Tensor<T>& gx = nd.parents[0]->ensure_grad();
            const T scale = gam[c] * is;
            for (std::int64_t n = 0; n < N; ++n) {
              const T* gp = &nd.grad.data[static_cast<std::size_t>((n * C + c) * HW)];
              T* gxp = &gx.data[static_cast<std::size_t>((n * C + c) * HW)];
              for (std::int64_t i = 0; i < HW; ++i) gxp[i] += scale * gp[i];
            }
          }
        }
      });
}

/// Bilinear resize to (Ho, Wo); half-pixel source mapping, edges clamped.
/// Resizing to the same size is an exact identity.
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t Ho, std::int64_t Wo) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("bilinear_resize: expected NCHW");
  const std::int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  struct Taps {
    std::int64_t lo, hi;
    T t;
  };
  auto make_taps = [](std::int64_t in, std::int64_t out) {
    std::vector<Taps> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
      double f = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (f < 0) f = 0;
      std::int64_t lo = static_cast<std::int64_t>(f);
      if (lo > in - 1) lo = in - 1;
      const std::int64_t hi = std::min<std::int64_t>(lo + 1, in - 1);
      taps[static_cast<std::size_t>(o)] = {lo, hi, static_cast<T>(f - static_cast<double>(lo))};
    }
    return taps;
  };
  const auto th = make_taps(H, Ho);
  const auto tw = make_taps(W, Wo);

  Tensor<T> out({N, C, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* xc = &xv.data[static_cast<std::size_t>((n * C + c) * H * W)];
      T* oc = &out.data[static_cast<std::size_t>((n * C + c) * Ho * Wo)];
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        const auto& a = th[static_cast<std::size_t>(oh)];
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          const auto& b = tw[static_cast<std::size_t>(ow)];
          const T v00 = xc[a.lo * W + b.lo], v01 = xc[a.lo * W + b.hi];
          const T v10 = xc[a.hi * W + b.lo], v11 = xc[a.hi * W + b.hi];
          oc[oh * Wo + ow] = (T(1) - a.t) * ((T(1) - b.t) * v00 + b.t * v01) +
                             a.t * ((T(1) - b.t) * v10 + b.t * v11);
        }
      }
    }
  return make_op<T>(std::move(out), {x.node()}, [N, C, H, W, Ho, Wo, th, tw](Node<T>& nd) {
    Tensor<T>& g = nd.parents[0]->ensure_grad();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        T* gc = &g.data[static_cast<std::size_t>((n * C + c) * H * W)];
        const T* go = &nd.grad.data[static_cast<std::size_t>((n * C + c) * Ho * Wo)];
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const auto& a = th[static_cast<std::size_t>(oh)];
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const auto& b = tw[static_cast<std::size_t>(ow)];
            const T gv = go[oh * Wo + ow];
            gc[a.lo * W + b.lo] += (T(1) - a.t) * (T(1) - b.t) * gv;
            gc[a.lo * W + b.hi] += (T(1) - a.t) * b.t * gv;
            gc[a.hi * W + b.lo] += a.t * (T(1) - b.t) * gv;
            gc[a.hi * W + b.hi] += a.t * b.t * gv;
          }
        }
      }
  });
}

}  // namespace segkd
