#pragma once

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "spansr/image_io.hpp"
#include "spansr/metrics.hpp"
#include "spansr/resample.hpp"
#include "spansr/tensor.hpp"

namespace spansr {

// Directory convention: root/HR/*.png holds the references; root/LR/Xr/*.png
// (matching filename stems) holds pre-degraded inputs. Without an LR
// directory, LR images are produced on the fly by bicubic downscaling.
struct DatasetSpec {
  std::string root;
  std::string hr_subdir = "HR";
  std::string lr_subdir = "LR";  // scale directory "X<r>" appended
  std::string extension = ".png";
};

namespace detail {

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir,
                                                      const std::string& ext) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("dataset: directory not found: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ext) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw std::runtime_error("dataset: no " + ext + " files in " + dir.string());
  }
  return files;
}

}  // namespace detail

template <typename T = float>
std::vector<Tensor4<T>> load_hr_images(const DatasetSpec& spec) {
  std::vector<Tensor4<T>> images;
  for (const auto& path :
       detail::list_images(std::filesystem::path(spec.root) / spec.hr_subdir, spec.extension)) {
    images.push_back(load_png<T>(path.string()));
  }
  return images;
}

// HR images are cropped to the largest size divisible by the scale so the
// on-the-fly degradation is well defined.
template <typename T = float>
std::vector<EvalPair<T>> load_eval_pairs(const DatasetSpec& spec, int scale) {
  const auto hr_dir = std::filesystem::path(spec.root) / spec.hr_subdir;
  const auto lr_dir =
      std::filesystem::path(spec.root) / spec.lr_subdir / ("X" + std::to_string(scale));
  const bool paired = std::filesystem::is_directory(lr_dir);

  std::vector<EvalPair<T>> pairs;
  for (const auto& path : detail::list_images(hr_dir, spec.extension)) {
    EvalPair<T> pair;
    pair.name = path.stem().string();
    Tensor4<T> hr = load_png<T>(path.string());
    if (paired) {
      const auto lr_path = lr_dir / path.filename();
      if (!std::filesystem::exists(lr_path)) {
        throw std::runtime_error("dataset: missing LR counterpart " + lr_path.string());
      }
      pair.hr = std::move(hr);
      pair.lr = load_png<T>(lr_path.string());
    } else {
      const index_t ch = hr.h() - hr.h() % scale;
      const index_t cw = hr.w() - hr.w() % scale;
      Tensor4<T> cropped(Shape4{1, hr.c(), ch, cw});
      for (index_t c = 0; c < hr.c(); ++c)
        for (index_t y = 0; y < ch; ++y)
          for (index_t x = 0; x < cw; ++x) cropped.at(0, c, y, x) = hr.at(0, c, y, x);
      pair.lr = bicubic_downscale(cropped, scale);
      pair.hr = std::move(cropped);
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace spansr
