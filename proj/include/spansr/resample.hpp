#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "spansr/tensor.hpp"

namespace spansr {
namespace detail {

// Keys cubic, a = -0.5 (the Catmull-Rom member).
inline double keys_cubic(double t) {
  t = std::fabs(t);
  if (t < 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
  if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
  return 0.0;
}

struct ResampleTap {
  index_t src;
  double weight;
};

// Precomputed taps for one output coordinate axis. `scale` = out/in. For
// downscaling the kernel is stretched by 1/scale (antialiasing); weights are
// renormalized so constants pass through exactly. Edges clamp.
inline std::vector<std::vector<ResampleTap>> resample_taps(index_t in_len, index_t out_len) {
  const double scale = static_cast<double>(out_len) / static_cast<double>(in_len);
  const double stretch = scale < 1.0 ? 1.0 / scale : 1.0;
  const double radius = 2.0 * stretch;
  std::vector<std::vector<ResampleTap>> taps(static_cast<std::size_t>(out_len));
  for (index_t i = 0; i < out_len; ++i) {
    const double center = (static_cast<double>(i) + 0.5) / scale - 0.5;
    const index_t lo = static_cast<index_t>(std::ceil(center - radius));
    const index_t hi = static_cast<index_t>(std::floor(center + radius));
    auto& row = taps[static_cast<std::size_t>(i)];
    double sum = 0.0;
    for (index_t k = lo; k <= hi; ++k) {
      const double w = keys_cubic((static_cast<double>(k) - center) / stretch);
      if (w == 0.0) continue;
      const index_t clamped = std::min(in_len - 1, std::max<index_t>(0, k));
      row.push_back({clamped, w});
      sum += w;
    }
    for (auto& t : row) t.weight /= sum;
  }
  return taps;
}

template <typename T>
Tensor4<T> resample_axis(const Tensor4<T>& x, index_t out_len, bool horizontal) {
  const auto taps = resample_taps(horizontal ? x.w() : x.h(), out_len);
  Shape4 os = horizontal ? Shape4{x.n(), x.c(), x.h(), out_len}
                         : Shape4{x.n(), x.c(), out_len, x.w()};
  Tensor4<T> out(os);
  for (index_t n = 0; n < os.n; ++n)
    for (index_t c = 0; c < os.c; ++c)
      for (index_t y = 0; y < os.h; ++y)
        for (index_t xw = 0; xw < os.w; ++xw) {
          const auto& row = taps[static_cast<std::size_t>(horizontal ? xw : y)];
          double acc = 0.0;
          for (const auto& t : row) {
            acc += t.weight * (horizontal ? x.at(n, c, y, t.src) : x.at(n, c, t.src, xw));
          }
          out.at(n, c, y, xw) = static_cast<T>(acc);
        }
  return out;
}

}  // namespace detail

// Separable antialiased Keys bicubic reduction by integer factor r.
template <typename T>
Tensor4<T> bicubic_downscale(const Tensor4<T>& hr, index_t r) {
  if (r < 1) throw std::invalid_argument("bicubic_downscale: r must be >= 1");
  if (hr.h() % r != 0 || hr.w() % r != 0) {
    throw std::invalid_argument("bicubic_downscale: dimensions " + hr.shape().str() +
                                " not divisible by r=" + std::to_string(r));
  }
  if (r == 1) return hr;
  Tensor4<T> tmp = detail::resample_axis(hr, hr.w() / r, /*horizontal=*/true);
  return detail::resample_axis(tmp, hr.h() / r, /*horizontal=*/false);
}

// Separable Keys bicubic interpolation to (r*h, r*w).
template <typename T>
Tensor4<T> bicubic_upscale(const Tensor4<T>& lr, index_t r) {
  if (r < 1) throw std::invalid_argument("bicubic_upscale: r must be >= 1");
  if (r == 1) return lr;
  Tensor4<T> tmp = detail::resample_axis(lr, lr.w() * r, /*horizontal=*/true);
  return detail::resample_axis(tmp, lr.h() * r, /*horizontal=*/false);
}

}  // namespace spansr
