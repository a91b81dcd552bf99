#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spansr/model.hpp"
#include "spansr/resample.hpp"
#include "spansr/tensor.hpp"

namespace spansr {

enum class LossKind : std::uint8_t { kL1 = 0, kL2 = 1 };

struct TrainConfig {
  index_t batch_size = 64;
  index_t patch_size = 256;  // HR patch edge; must be divisible by the scale
  double base_lr = 5e-4;
  index_t lr_halve_period = 200000;
  index_t iterations = 1000000;
  LossKind loss = LossKind::kL1;
  std::uint64_t seed = 0;
  int stages = 1;
  index_t log_every = 50;

  void validate(int scale) const {
    if (batch_size < 1 || patch_size < 1 || iterations < 0 || lr_halve_period < 1 ||
        stages < 1 || log_every < 1 || !(base_lr > 0.0)) {
      throw std::invalid_argument("TrainConfig: all fields must be positive");
    }
    if (patch_size % scale != 0) {
      throw std::invalid_argument("TrainConfig: patch_size must be divisible by the scale");
    }
  }
};

// ---- losses -----------------------------------------------------------------

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor4<T> d_pred;
};

// mean |pred - target|; subgradient at 0 is 0.
template <typename T>
LossResult<T> l1_loss(const Tensor4<T>& pred, const Tensor4<T>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "l1_loss");
  LossResult<T> res;
  res.d_pred = Tensor4<T>(pred.shape());
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  for (index_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    res.value += std::abs(static_cast<double>(d));
    res.d_pred[i] = d > T(0) ? static_cast<T>(inv_n) : (d < T(0) ? static_cast<T>(-inv_n) : T(0));
  }
  res.value *= inv_n;
  return res;
}

template <typename T>
LossResult<T> l2_loss(const Tensor4<T>& pred, const Tensor4<T>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "l2_loss");
  LossResult<T> res;
  res.d_pred = Tensor4<T>(pred.shape());
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  for (index_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    res.value += d * d;
    res.d_pred[i] = static_cast<T>(2.0 * d * inv_n);
  }
  res.value *= inv_n;
  return res;
}

template <typename T>
LossResult<T> compute_loss(LossKind kind, const Tensor4<T>& pred, const Tensor4<T>& target) {
  return kind == LossKind::kL1 ? l1_loss(pred, target) : l2_loss(pred, target);
}

// ---- Adam ---------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<Tensor4<T>> m;
  std::vector<Tensor4<T>> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const std::vector<ParamRef<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Tensor4<T>::zeros(p.tensor->shape()));
      s.v.push_back(Tensor4<T>::zeros(p.tensor->shape()));
    }
    return s;
  }
};

template <typename T>
void adam_step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads,
               AdamState<T>& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient/state arity mismatch");
  }
  for (const auto& g : grads) {
    if (!g.tensor->all_finite()) {
      throw std::runtime_error("adam_step: non-finite gradient in " + g.name);
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor4<T>& w = *params[p].tensor;
    const Tensor4<T>& g = *grads[p].tensor;
    Tensor4<T>& m = state.m[p];
    Tensor4<T>& v = state.v[p];
    for (index_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) -
                            lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps));
    }
  }
}

// Step decay: base * 0.5^floor(iteration / period).
inline double lr_at(index_t iteration, const TrainConfig& cfg) {
  if (iteration < 0) throw std::invalid_argument("lr_at: negative iteration");
  return cfg.base_lr * std::pow(0.5, static_cast<double>(iteration / cfg.lr_halve_period));
}

// ---- augmentation ---------------------------------------------------------------

// Code map: 0 identity, 1 rot90 cw, 2 rot180, 3 rot270 cw, 4 flip-h,
// 5 flip-v, 6 transpose, 7 anti-transpose. Inverse codes: {0,3,2,1,4,5,6,7}.
inline int dihedral_inverse(int code) {
  static constexpr int inv[8] = {0, 3, 2, 1, 4, 5, 6, 7};
  if (code < 0 || code > 7) throw std::invalid_argument("dihedral_inverse: code out of range");
  return inv[code];
}

template <typename T>
Tensor4<T> dihedral_augment(const Tensor4<T>& x, int code) {
  if (code < 0 || code > 7) throw std::invalid_argument("dihedral_augment: code out of range");
  const bool needs_square = code == 1 || code == 2 || code == 3 || code == 6 || code == 7;
  if (needs_square && x.h() != x.w()) {
    throw std::invalid_argument("dihedral_augment: rotation/transpose codes need square patches");
  }
  if (code == 0) return x;
  const index_t h = x.h(), w = x.w();
  Tensor4<T> out(x.shape());
  for (index_t n = 0; n < x.n(); ++n)
    for (index_t c = 0; c < x.c(); ++c)
      for (index_t i = 0; i < h; ++i)
        for (index_t j = 0; j < w; ++j) {
          T v;
          switch (code) {
            case 1: v = x.at(n, c, h - 1 - j, i); break;
            case 2: v = x.at(n, c, h - 1 - i, w - 1 - j); break;
            case 3: v = x.at(n, c, j, w - 1 - i); break;
            case 4: v = x.at(n, c, i, w - 1 - j); break;
            case 5: v = x.at(n, c, h - 1 - i, j); break;
            case 6: v = x.at(n, c, j, i); break;
            default: v = x.at(n, c, h - 1 - j, w - 1 - i); break;
          }
          out.at(n, c, i, j) = v;
        }
  return out;
}

// ---- batch sampling ----------------------------------------------------------------

template <typename T>
struct Batch {
  Tensor4<T> lr;
  Tensor4<T> hr;
};

// Deterministic function of (cfg.seed, step): image choice, r-aligned crop
// offsets and dihedral code come from a fresh per-step stream, so resumed
// runs replay the identical batch sequence.
template <typename T>
Batch<T> sample_batch(const std::vector<Tensor4<T>>& dataset, const TrainConfig& cfg, int scale,
                      index_t step) {
  const index_t ps = cfg.patch_size;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].h() >= ps && dataset[i].w() >= ps) {
      usable.push_back(i);
    } else {
      std::fprintf(stderr, "sample_batch: image %zu (%lldx%lld) smaller than patch %lld, skipped\n",
                   i, static_cast<long long>(dataset[i].h()),
                   static_cast<long long>(dataset[i].w()), static_cast<long long>(ps));
    }
  }
  if (usable.empty()) throw std::runtime_error("sample_batch: no usable image >= patch size");

  Xoshiro256pp rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
  std::vector<Tensor4<T>> hr_patches;
  hr_patches.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (index_t b = 0; b < cfg.batch_size; ++b) {
    const auto& img = dataset[usable[rng.below(usable.size())]];
    // Offsets are multiples of r so the LR crop sits on integer LR pixels.
    const index_t max_y = (img.h() - ps) / scale;
    const index_t max_x = (img.w() - ps) / scale;
    const index_t oy = static_cast<index_t>(rng.below(static_cast<std::uint64_t>(max_y + 1))) * scale;
    const index_t ox = static_cast<index_t>(rng.below(static_cast<std::uint64_t>(max_x + 1))) * scale;
    const int code = static_cast<int>(rng.below(8));

    Tensor4<T> patch(Shape4{1, img.c(), ps, ps});
    for (index_t c = 0; c < img.c(); ++c)
      for (index_t y = 0; y < ps; ++y)
        for (index_t x = 0; x < ps; ++x) patch.at(0, c, y, x) = img.at(0, c, oy + y, ox + x);
    hr_patches.push_back(dihedral_augment(patch, code));
  }

  Batch<T> batch;
  batch.hr = Tensor4<T>(Shape4{cfg.batch_size, hr_patches[0].c(), ps, ps});
  batch.lr = Tensor4<T>(Shape4{cfg.batch_size, hr_patches[0].c(), ps / scale, ps / scale});
  for (index_t b = 0; b < cfg.batch_size; ++b) {
    const auto& hp = hr_patches[static_cast<std::size_t>(b)];
    Tensor4<T> lp = bicubic_downscale(hp, scale);
    const index_t hr_sz = hp.size();
    const index_t lr_sz = lp.size();
    for (index_t i = 0; i < hr_sz; ++i) batch.hr[b * hr_sz + i] = hp[i];
    for (index_t i = 0; i < lr_sz; ++i) batch.lr[b * lr_sz + i] = lp[i];
  }
  return batch;
}

// ---- training loop ----------------------------------------------------------------

struct TrainLogEntry {
  index_t iteration;
  double loss;
  double lr;
  double wallclock_ms;
  int stage = 0;
};

struct TrainReport {
  std::vector<TrainLogEntry> log;
  double final_loss = 0.0;
};

// Optional observer, called on every logged step (CSV writing lives in the CLI).
template <typename T>
using TrainObserver = std::function<void(const TrainLogEntry&, const SpanModel<T>&)>;

template <typename T>
TrainReport train(SpanModel<T>& model, const std::vector<Tensor4<T>>& dataset,
                  const TrainConfig& cfg, const TrainObserver<T>& observer = {},
                  AdamState<T>* resume_state = nullptr, int start_stage = 0,
                  index_t start_iteration = 0) {
  cfg.validate(model.cfg.scale);
  TrainReport report;
  auto params = parameters(model);
  AdamState<T> local_state = AdamState<T>::like(params);
  AdamState<T>& state = resume_state ? *resume_state : local_state;
  const auto t0 = std::chrono::steady_clock::now();

  for (int stage = start_stage; stage < cfg.stages; ++stage) {
    // Each stage restarts the LR schedule, optimizer moments and data order.
    TrainConfig stage_cfg = cfg;
    stage_cfg.seed = derive_seed(cfg.seed, 0xabcd0000ull + static_cast<std::uint64_t>(stage));
    if (stage > start_stage) {
      state = AdamState<T>::like(params);
      start_iteration = 0;
    }
    for (index_t it = start_iteration; it < cfg.iterations; ++it) {
      const double lr = lr_at(it, stage_cfg);
      Batch<T> batch = sample_batch(dataset, stage_cfg, model.cfg.scale, it);
      ForwardResult<T> fwd = span_forward(batch.lr, model, RunMode::kTrain);
      LossResult<T> loss = compute_loss(cfg.loss, fwd.output, batch.hr);
      if (!std::isfinite(loss.value)) {
        throw std::runtime_error("train: non-finite loss at stage " + std::to_string(stage) +
                                 " iteration " + std::to_string(it));
      }
      SpanModel<T> grads = span_backward(*fwd.tape, loss.d_pred, model);
      adam_step(params, parameters(grads), state, lr);
      report.final_loss = loss.value;

      if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations) {
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        TrainLogEntry entry{it + 1, loss.value, lr, ms, stage};
        report.log.push_back(entry);
        if (observer) observer(entry, model);
      }
    }
  }
  return report;
}

}  // namespace spansr
