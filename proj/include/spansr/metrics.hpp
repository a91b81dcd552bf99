#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "spansr/model.hpp"
#include "spansr/resample.hpp"
#include "spansr/tensor.hpp"

namespace spansr {

// BT.601 studio-swing luma from RGB in [0,1]; output in [16, 235].
template <typename T>
Tensor4<T> rgb_to_y(const Tensor4<T>& img) {
  if (img.c() != 3) {
    throw std::invalid_argument("rgb_to_y: expected 3 channels, got " + std::to_string(img.c()));
  }
  Tensor4<T> out(Shape4{img.n(), 1, img.h(), img.w()});
  for (index_t n = 0; n < img.n(); ++n)
    for (index_t y = 0; y < img.h(); ++y)
      for (index_t x = 0; x < img.w(); ++x) {
        out.at(n, 0, y, x) = static_cast<T>(65.481 * img.at(n, 0, y, x) +
                                            128.553 * img.at(n, 1, y, x) +
                                            24.966 * img.at(n, 2, y, x) + 16.0);
      }
  return out;
}

namespace detail {

template <typename T>
Tensor4<T> crop_border(const Tensor4<T>& x, index_t border) {
  if (border == 0) return x;
  if (2 * border >= x.h() || 2 * border >= x.w()) {
    throw std::invalid_argument("crop_border: border too large for image " + x.shape().str());
  }
  Tensor4<T> out(Shape4{x.n(), x.c(), x.h() - 2 * border, x.w() - 2 * border});
  for (index_t n = 0; n < out.n(); ++n)
    for (index_t c = 0; c < out.c(); ++c)
      for (index_t y = 0; y < out.h(); ++y)
        for (index_t xw = 0; xw < out.w(); ++xw)
          out.at(n, c, y, xw) = x.at(n, c, y + border, xw + border);
  return out;
}

template <typename T>
Tensor4<T> to_luma(const Tensor4<T>& img) {
  return img.c() == 3 ? rgb_to_y(img) : scaled(img, T(255));
}

inline std::vector<double> gaussian_window(int radius, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += w[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable valid-mode Gaussian filter on an (h,w) plane stored row-major.
inline std::vector<double> gauss_valid(const std::vector<double>& img, index_t h, index_t w,
                                       const std::vector<double>& win, index_t& oh, index_t& ow) {
  const index_t k = static_cast<index_t>(win.size());
  oh = h - k + 1;
  ow = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h * ow));
  for (index_t y = 0; y < h; ++y)
    for (index_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (index_t i = 0; i < k; ++i) acc += win[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y * w + x + i)];
      tmp[static_cast<std::size_t>(y * ow + x)] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (index_t y = 0; y < oh; ++y)
    for (index_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (index_t i = 0; i < k; ++i) acc += win[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>((y + i) * ow + x)];
      out[static_cast<std::size_t>(y * ow + x)] = acc;
    }
  return out;
}

}  // namespace detail

// PSNR in dB on the BT.601 luma channel after cropping `border` pixels per
// side. RGB inputs in [0,1]; single-channel inputs are treated as [0,1] and
// rescaled to [0,255]. Identical inputs report +infinity.
template <typename T>
double psnr(const Tensor4<T>& a, const Tensor4<T>& b, index_t border) {
  detail::require_same_shape(a.shape(), b.shape(), "psnr");
  Tensor4<T> ya = detail::crop_border(detail::to_luma(a), border);
  Tensor4<T> yb = detail::crop_border(detail::to_luma(b), border);
  double mse = 0.0;
  for (index_t i = 0; i < ya.size(); ++i) {
    const double d = static_cast<double>(ya[i]) - static_cast<double>(yb[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(ya.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

// Mean local SSIM on luma: 11x11 Gaussian window sigma=1.5,
// C1=(0.01*255)^2, C2=(0.03*255)^2, valid-window aggregation.
template <typename T>
double ssim(const Tensor4<T>& a, const Tensor4<T>& b, index_t border) {
  detail::require_same_shape(a.shape(), b.shape(), "ssim");
  Tensor4<T> ya = detail::crop_border(detail::to_luma(a), border);
  Tensor4<T> yb = detail::crop_border(detail::to_luma(b), border);
  if (ya.h() < 11 || ya.w() < 11) {
    throw std::invalid_argument("ssim: cropped image smaller than the 11x11 window");
  }
  const auto win = detail::gaussian_window(5, 1.5);
  constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);

  double total = 0.0;
  index_t count = 0;
  const index_t h = ya.h(), w = ya.w();
  std::vector<double> pa(static_cast<std::size_t>(h * w)), pb(pa.size()), paa(pa.size()),
      pbb(pa.size()), pab(pa.size());
  for (index_t n = 0; n < ya.n(); ++n) {
    const T* da = ya.data() + n * h * w;
    const T* db = yb.data() + n * h * w;
    for (index_t i = 0; i < h * w; ++i) {
      pa[static_cast<std::size_t>(i)] = da[i];
      pb[static_cast<std::size_t>(i)] = db[i];
      paa[static_cast<std::size_t>(i)] = static_cast<double>(da[i]) * da[i];
      pbb[static_cast<std::size_t>(i)] = static_cast<double>(db[i]) * db[i];
      pab[static_cast<std::size_t>(i)] = static_cast<double>(da[i]) * db[i];
    }
    index_t oh = 0, ow = 0;
    auto mu_a = detail::gauss_valid(pa, h, w, win, oh, ow);
    auto mu_b = detail::gauss_valid(pb, h, w, win, oh, ow);
    auto m_aa = detail::gauss_valid(paa, h, w, win, oh, ow);
    auto m_bb = detail::gauss_valid(pbb, h, w, win, oh, ow);
    auto m_ab = detail::gauss_valid(pab, h, w, win, oh, ow);
    for (index_t i = 0; i < oh * ow; ++i) {
      const std::size_t s = static_cast<std::size_t>(i);
      const double va = m_aa[s] - mu_a[s] * mu_a[s];
      const double vb = m_bb[s] - mu_b[s] * mu_b[s];
      const double cov = m_ab[s] - mu_a[s] * mu_b[s];
      total += ((2.0 * mu_a[s] * mu_b[s] + c1) * (2.0 * cov + c2)) /
               ((mu_a[s] * mu_a[s] + mu_b[s] * mu_b[s] + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---- evaluation -------------------------------------------------------------------

struct ImageScore {
  std::string name;
  double psnr_db = 0.0;
  double ssim_val = 0.0;
  double bicubic_psnr_db = 0.0;
  double bicubic_ssim = 0.0;
  double wallclock_ms = 0.0;
};

struct EvalReport {
  std::vector<ImageScore> images;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double mean_bicubic_psnr = 0.0;
  double mean_bicubic_ssim = 0.0;
  index_t border = 0;
};

template <typename T>
struct EvalPair {
  std::string name;
  Tensor4<T> lr;
  Tensor4<T> hr;
};

template <typename T>
Tensor4<T> clamp01(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape());
  for (index_t i = 0; i < x.size(); ++i) out[i] = std::min(T(1), std::max(T(0), x[i]));
  return out;
}

// Whole-image forward per pair, clamp to [0,1], score against HR plus the
// bicubic baseline. Pairs whose HR size is not exactly r * LR are skipped.
template <typename T>
EvalReport evaluate(const SpanModel<T>& model, const std::vector<EvalPair<T>>& pairs, int scale) {
  if (model.cfg.scale != scale) {
    throw std::invalid_argument("evaluate: model scale " + std::to_string(model.cfg.scale) +
                                " != requested " + std::to_string(scale));
  }
  EvalReport report;
  report.border = scale;
  for (const auto& pair : pairs) {
    if (pair.hr.h() != pair.lr.h() * scale || pair.hr.w() != pair.lr.w() * scale ||
        pair.hr.c() != pair.lr.c()) {
      std::fprintf(stderr, "evaluate: %s LR %s does not match HR %s at scale %d, skipped\n",
                   pair.name.c_str(), pair.lr.shape().str().c_str(),
                   pair.hr.shape().str().c_str(), scale);
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Tensor4<T> sr = clamp01(span_forward(pair.lr, model, RunMode::kInfer).output);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    Tensor4<T> bi = clamp01(bicubic_upscale(pair.lr, scale));
    ImageScore score;
    score.name = pair.name;
    score.psnr_db = psnr(sr, pair.hr, report.border);
    score.ssim_val = ssim(sr, pair.hr, report.border);
    score.bicubic_psnr_db = psnr(bi, pair.hr, report.border);
    score.bicubic_ssim = ssim(bi, pair.hr, report.border);
    score.wallclock_ms = ms;
    report.images.push_back(score);
  }
  if (!report.images.empty()) {
    for (const auto& s : report.images) {
      report.mean_psnr += s.psnr_db;
      report.mean_ssim += s.ssim_val;
      report.mean_bicubic_psnr += s.bicubic_psnr_db;
      report.mean_bicubic_ssim += s.bicubic_ssim;
    }
    const double n = static_cast<double>(report.images.size());
    report.mean_psnr /= n;
    report.mean_ssim /= n;
    report.mean_bicubic_psnr /= n;
    report.mean_bicubic_ssim /= n;
  }
  return report;
}

}  // namespace spansr
