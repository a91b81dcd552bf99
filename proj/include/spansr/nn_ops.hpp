#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

#include "spansr/tensor.hpp"

namespace spansr {

// Intra-op worker count. 1 (the default) is the deterministic serial order;
// higher counts partition output rows deterministically, so results stay
// bit-stable at a fixed thread count.
inline int& thread_count() {
  static int threads = 1;
  return threads;
}
inline void set_thread_count(int t) { thread_count() = std::max(1, t); }

namespace detail {

template <typename Fn>
void parallel_rows(index_t rows, Fn&& fn) {
  const int threads = std::min<index_t>(thread_count(), rows);
  if (threads <= 1) {
    fn(index_t{0}, rows);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  const index_t chunk = (rows + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const index_t lo = t * chunk;
    const index_t hi = std::min(rows, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

// C(MxN) += A(MxK) * B(KxN), all row-major. ikj order with a k-block keeps
// B rows hot and lets the inner j loop vectorize.
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, index_t M, index_t K, index_t N) {
  constexpr index_t kBlock = 64;
  parallel_rows(M, [&](index_t i_lo, index_t i_hi) {
    for (index_t k0 = 0; k0 < K; k0 += kBlock) {
      const index_t k1 = std::min(K, k0 + kBlock);
      for (index_t i = i_lo; i < i_hi; ++i) {
        T* c_row = C + i * N;
        for (index_t k = k0; k < k1; ++k) {
          const T a = A[i * K + k];
          const T* b_row = B + k * N;
          for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
      }
    }
  });
}

// C(MxK) += A(MxN) * B(KxN)^T : inner dot products over N. Eight explicit
// partial accumulators give the compiler a fixed reassociation to vectorize
// (a single serial reduction stays scalar without -ffast-math).
template <typename T>
void gemm_abt_acc(const T* A, const T* B, T* C, index_t M, index_t N, index_t K) {
  constexpr index_t kLanes = 8;
  parallel_rows(M, [&](index_t i_lo, index_t i_hi) {
    for (index_t i = i_lo; i < i_hi; ++i) {
      const T* a_row = A + i * N;
      for (index_t k = 0; k < K; ++k) {
        const T* b_row = B + k * N;
        T lanes[kLanes] = {};
        const index_t n_vec = N - N % kLanes;
        for (index_t j = 0; j < n_vec; j += kLanes)
          for (index_t u = 0; u < kLanes; ++u) lanes[u] += a_row[j + u] * b_row[j + u];
        T acc = T(0);
        for (index_t u = 0; u < kLanes; ++u) acc += lanes[u];
        for (index_t j = n_vec; j < N; ++j) acc += a_row[j] * b_row[j];
        C[i * K + k] += acc;
      }
    }
  });
}

// C(KxN) += A(MxK)^T * B(MxN)
template <typename T>
void gemm_atb_acc(const T* A, const T* B, T* C, index_t M, index_t K, index_t N) {
  parallel_rows(K, [&](index_t k_lo, index_t k_hi) {
    for (index_t m = 0; m < M; ++m) {
      const T* b_row = B + m * N;
      for (index_t k = k_lo; k < k_hi; ++k) {
        const T a = A[m * K + k];
        T* c_row = C + k * N;
        for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
      }
    }
  });
}

// Unfold one batch image into a (in_c*kh*kw) x (out_h*out_w) column matrix.
template <typename T>
void im2col(const T* img, index_t in_c, index_t h, index_t w, index_t k, index_t pad,
            index_t out_h, index_t out_w, T* col) {
  const index_t plane = h * w;
  index_t row = 0;
  for (index_t c = 0; c < in_c; ++c) {
    for (index_t ki = 0; ki < k; ++ki) {
      for (index_t kj = 0; kj < k; ++kj, ++row) {
        T* dst = col + row * out_h * out_w;
        for (index_t y = 0; y < out_h; ++y) {
          const index_t sy = y + ki - pad;
          if (sy < 0 || sy >= h) {
            for (index_t x = 0; x < out_w; ++x) dst[y * out_w + x] = T(0);
            continue;
          }
          const T* src = img + c * plane + sy * w;
          for (index_t x = 0; x < out_w; ++x) {
            const index_t sx = x + kj - pad;
            dst[y * out_w + x] = (sx >= 0 && sx < w) ? src[sx] : T(0);
          }
        }
      }
    }
  }
}

// Fold a column-matrix gradient back onto the padded input (accumulating).
template <typename T>
void col2im_acc(const T* col, index_t in_c, index_t h, index_t w, index_t k, index_t pad,
                index_t out_h, index_t out_w, T* img) {
  const index_t plane = h * w;
  index_t row = 0;
  for (index_t c = 0; c < in_c; ++c) {
    for (index_t ki = 0; ki < k; ++ki) {
      for (index_t kj = 0; kj < k; ++kj, ++row) {
        const T* src = col + row * out_h * out_w;
        for (index_t y = 0; y < out_h; ++y) {
          const index_t sy = y + ki - pad;
          if (sy < 0 || sy >= h) continue;
          T* dst = img + c * plane + sy * w;
          for (index_t x = 0; x < out_w; ++x) {
            const index_t sx = x + kj - pad;
            if (sx >= 0 && sx < w) dst[sx] += src[y * out_w + x];
          }
        }
      }
    }
  }
}

}  // namespace detail

// One convolution layer's parameters. Weights are (out_c, in_c, k, k) in the
// tensor's natural layout; bias is kept as a (1, out_c, 1, 1) tensor so every
// parameter in the model is a Tensor4.
template <typename T>
struct ConvKernel {
  Tensor4<T> weights;  // shape (out_c, in_c, k, k)
  Tensor4<T> bias;     // shape (1, out_c, 1, 1)

  ConvKernel() = default;
  ConvKernel(Tensor4<T> w, Tensor4<T> b) : weights(std::move(w)), bias(std::move(b)) {}
  ConvKernel(index_t out_c, index_t in_c, index_t k)
      : weights(Shape4{out_c, in_c, k, k}), bias(Shape4{1, out_c, 1, 1}) {
    if (k != 1 && k != 3) throw std::invalid_argument("ConvKernel: kernel size must be 1 or 3");
  }

  index_t out_c() const { return weights.n(); }
  index_t in_c() const { return weights.c(); }
  index_t k() const { return weights.h(); }
};

template <typename T>
struct ConvGrad {
  Tensor4<T> d_input;
  Tensor4<T> d_weights;
  Tensor4<T> d_bias;
};

// Cross-correlation (deep-learning convention, no kernel flip) with zero
// padding. pad = (k-1)/2 gives the "same" spatial size SPAN uses throughout.
template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvKernel<T>& k, index_t pad) {
  if (x.c() != k.in_c()) {
    throw std::invalid_argument("conv2d_forward: input channels " + std::to_string(x.c()) +
                                " != kernel in_c " + std::to_string(k.in_c()));
  }
  if (pad < 0) throw std::invalid_argument("conv2d_forward: negative padding");
  const index_t ks = k.k();
  const index_t out_h = x.h() + 2 * pad - ks + 1;
  const index_t out_w = x.w() + 2 * pad - ks + 1;
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("conv2d_forward: output collapses");

  Tensor4<T> out(Shape4{x.n(), k.out_c(), out_h, out_w});
  const index_t K = k.in_c() * ks * ks;
  const index_t spatial = out_h * out_w;
  std::vector<T> col(static_cast<std::size_t>(K * spatial));
  for (index_t n = 0; n < x.n(); ++n) {
    detail::im2col(x.data() + n * x.c() * x.h() * x.w(), x.c(), x.h(), x.w(), ks, pad, out_h,
                   out_w, col.data());
    T* dst = out.data() + n * k.out_c() * spatial;
    for (index_t o = 0; o < k.out_c(); ++o) {
      const T b = k.bias[o];
      for (index_t i = 0; i < spatial; ++i) dst[o * spatial + i] = b;
    }
    detail::gemm_acc(k.weights.data(), col.data(), dst, k.out_c(), K, spatial);
  }
  return out;
}

// Direct quadruple loop; the reference path the im2col route is checked against.
template <typename T>
Tensor4<T> conv2d_forward_direct(const Tensor4<T>& x, const ConvKernel<T>& k, index_t pad) {
  if (x.c() != k.in_c()) throw std::invalid_argument("conv2d_forward_direct: channel mismatch");
  const index_t ks = k.k();
  const index_t out_h = x.h() + 2 * pad - ks + 1;
  const index_t out_w = x.w() + 2 * pad - ks + 1;
  Tensor4<T> out(Shape4{x.n(), k.out_c(), out_h, out_w});
  for (index_t n = 0; n < x.n(); ++n)
    for (index_t o = 0; o < k.out_c(); ++o)
      for (index_t y = 0; y < out_h; ++y)
        for (index_t xw = 0; xw < out_w; ++xw) {
          T acc = k.bias[o];
          for (index_t c = 0; c < x.c(); ++c)
            for (index_t ki = 0; ki < ks; ++ki)
              for (index_t kj = 0; kj < ks; ++kj) {
                const index_t sy = y + ki - pad;
                const index_t sx = xw + kj - pad;
                if (sy < 0 || sy >= x.h() || sx < 0 || sx >= x.w()) continue;
                acc += x.at(n, c, sy, sx) * k.weights.at(o, c, ki, kj);
              }
          out.at(n, o, y, xw) = acc;
        }
  return out;
}

template <typename T>
ConvGrad<T> conv2d_backward(const Tensor4<T>& x, const ConvKernel<T>& k, const Tensor4<T>& d_out,
                            index_t pad) {
  const index_t ks = k.k();
  const index_t out_h = x.h() + 2 * pad - ks + 1;
  const index_t out_w = x.w() + 2 * pad - ks + 1;
  const Shape4 want{x.n(), k.out_c(), out_h, out_w};
  if (!(d_out.shape() == want)) {
    throw std::invalid_argument("conv2d_backward: d_out shape " + d_out.shape().str() +
                                " != forward output " + want.str());
  }

  ConvGrad<T> g;
  g.d_input = Tensor4<T>::zeros(x.shape());
  g.d_weights = Tensor4<T>::zeros(k.weights.shape());
  g.d_bias = Tensor4<T>::zeros(k.bias.shape());

  const index_t K = k.in_c() * ks * ks;
  const index_t spatial = out_h * out_w;
  std::vector<T> col(static_cast<std::size_t>(K * spatial));
  std::vector<T> col_t(static_cast<std::size_t>(K * spatial));
  std::vector<T> col_grad(static_cast<std::size_t>(K * spatial));
  for (index_t n = 0; n < x.n(); ++n) {
    const T* dout_n = d_out.data() + n * k.out_c() * spatial;
    // bias: plain channel sums
    for (index_t o = 0; o < k.out_c(); ++o) {
      T acc = T(0);
      for (index_t i = 0; i < spatial; ++i) acc += dout_n[o * spatial + i];
      g.d_bias[o] += acc;
    }
    detail::im2col(x.data() + n * x.c() * x.h() * x.w(), x.c(), x.h(), x.w(), ks, pad, out_h,
                   out_w, col.data());
    // dW += d_out * col^T, via an explicit transpose so the accumulating GEMM
    // keeps its vector-friendly contiguous inner loop
    for (index_t r = 0; r < K; ++r)
      for (index_t s = 0; s < spatial; ++s) col_t[s * K + r] = col[r * spatial + s];
    detail::gemm_acc(dout_n, col_t.data(), g.d_weights.data(), k.out_c(), spatial, K);
    // d_col = W^T * d_out, folded back into d_input
    std::fill(col_grad.begin(), col_grad.end(), T(0));
    detail::gemm_atb_acc(k.weights.data(), dout_n, col_grad.data(), k.out_c(), K, spatial);
    detail::col2im_acc(col_grad.data(), x.c(), x.h(), x.w(), ks, pad, out_h, out_w,
                       g.d_input.data() + n * x.c() * x.h() * x.w());
  }
  return g;
}

template <typename T>
T logistic(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
Tensor4<T> act_silu(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape());
  for (index_t i = 0; i < x.size(); ++i) out[i] = x[i] * logistic(x[i]);
  return out;
}

template <typename T>
Tensor4<T> act_silu_backward(const Tensor4<T>& x, const Tensor4<T>& d_out) {
  detail::require_same_shape(x.shape(), d_out.shape(), "act_silu_backward");
  Tensor4<T> d_in(x.shape());
  for (index_t i = 0; i < x.size(); ++i) {
    const T s = logistic(x[i]);
    d_in[i] = d_out[i] * s * (T(1) + x[i] * (T(1) - s));
  }
  return d_in;
}

template <typename T>
Tensor4<T> act_leaky_relu(const Tensor4<T>& x, T slope = T(0.05)) {
  Tensor4<T> out(x.shape());
  for (index_t i = 0; i < x.size(); ++i) out[i] = x[i] >= T(0) ? x[i] : slope * x[i];
  return out;
}

template <typename T>
Tensor4<T> act_leaky_relu_backward(const Tensor4<T>& x, const Tensor4<T>& d_out, T slope = T(0.05)) {
  detail::require_same_shape(x.shape(), d_out.shape(), "act_leaky_relu_backward");
  Tensor4<T> d_in(x.shape());
  for (index_t i = 0; i < x.size(); ++i) d_in[i] = d_out[i] * (x[i] >= T(0) ? T(1) : slope);
  return d_in;
}

// Attention activation b*(logistic(a*x) - 1/2): odd, bounded in (-b/2, b/2),
// strictly increasing. a and b are optional trainable scalars, default 1.
template <typename T>
Tensor4<T> act_attention(const Tensor4<T>& x, T a = T(1), T b = T(1)) {
  if (!(a > T(0)) || !(b > T(0)) || !std::isfinite(a) || !std::isfinite(b)) {
    throw std::invalid_argument("act_attention: a and b must be finite and positive");
  }
  Tensor4<T> out(x.shape());
  for (index_t i = 0; i < x.size(); ++i) out[i] = b * (logistic(a * x[i]) - T(0.5));
  return out;
}

// Elementwise derivative d/dx = a*b*s*(1-s), s = logistic(a*x). Positive everywhere.
template <typename T>
Tensor4<T> act_attention_deriv(const Tensor4<T>& x, T a = T(1), T b = T(1)) {
  Tensor4<T> out(x.shape());
  for (index_t i = 0; i < x.size(); ++i) {
    const T s = logistic(a * x[i]);
    out[i] = a * b * s * (T(1) - s);
  }
  return out;
}

template <typename T>
struct AttentionGrad {
  Tensor4<T> d_input;
  T d_a = T(0);
  T d_b = T(0);
};

template <typename T>
AttentionGrad<T> act_attention_backward(const Tensor4<T>& x, const Tensor4<T>& d_out, T a = T(1),
                                        T b = T(1)) {
  detail::require_same_shape(x.shape(), d_out.shape(), "act_attention_backward");
  AttentionGrad<T> g;
  g.d_input = Tensor4<T>(x.shape());
  for (index_t i = 0; i < x.size(); ++i) {
    const T s = logistic(a * x[i]);
    const T sp = s * (T(1) - s);
    g.d_input[i] = d_out[i] * a * b * sp;
    g.d_a += d_out[i] * b * x[i] * sp;
    g.d_b += d_out[i] * (s - T(0.5));
  }
  return g;
}

// out[n, c, r*i+di, r*j+dj] = x[n, c*r^2 + di*r + dj, i, j]
template <typename T>
Tensor4<T> pixel_shuffle(const Tensor4<T>& x, index_t r) {
  if (r < 1) throw std::invalid_argument("pixel_shuffle: r must be >= 1");
  if (x.c() % (r * r) != 0) {
    throw std::invalid_argument("pixel_shuffle: channels " + std::to_string(x.c()) +
                                " not divisible by r^2=" + std::to_string(r * r));
  }
  const index_t out_c = x.c() / (r * r);
  Tensor4<T> out(Shape4{x.n(), out_c, r * x.h(), r * x.w()});
  for (index_t n = 0; n < x.n(); ++n)
    for (index_t c = 0; c < out_c; ++c)
      for (index_t di = 0; di < r; ++di)
        for (index_t dj = 0; dj < r; ++dj)
          for (index_t i = 0; i < x.h(); ++i)
            for (index_t j = 0; j < x.w(); ++j)
              out.at(n, c, r * i + di, r * j + dj) = x.at(n, c * r * r + di * r + dj, i, j);
  return out;
}

template <typename T>
Tensor4<T> pixel_unshuffle(const Tensor4<T>& y, index_t r) {
  if (r < 1) throw std::invalid_argument("pixel_unshuffle: r must be >= 1");
  if (y.h() % r != 0 || y.w() % r != 0) {
    throw std::invalid_argument("pixel_unshuffle: spatial dims not divisible by r");
  }
  const index_t in_h = y.h() / r;
  const index_t in_w = y.w() / r;
  Tensor4<T> out(Shape4{y.n(), y.c() * r * r, in_h, in_w});
  for (index_t n = 0; n < y.n(); ++n)
    for (index_t c = 0; c < y.c(); ++c)
      for (index_t di = 0; di < r; ++di)
        for (index_t dj = 0; dj < r; ++dj)
          for (index_t i = 0; i < in_h; ++i)
            for (index_t j = 0; j < in_w; ++j)
              out.at(n, c * r * r + di * r + dj, i, j) = y.at(n, c, r * i + di, r * j + dj);
  return out;
}

}  // namespace spansr
