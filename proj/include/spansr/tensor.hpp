#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "spansr/rng.hpp"

namespace spansr {

using index_t = std::int64_t;

// Batch, channel, row, column extents. All strictly positive.
struct Shape4 {
  index_t n = 1;
  index_t c = 1;
  index_t h = 1;
  index_t w = 1;

  Shape4() = default;
  Shape4(index_t n_, index_t c_, index_t h_, index_t w_) : n(n_), c(c_), h(h_), w(w_) {
    validate();
  }

  void validate() const {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
      throw std::invalid_argument("Shape4: all extents must be >= 1, got " + str());
    }
    // Overflow check without __int128: divide the max through step by step.
    index_t budget = std::numeric_limits<index_t>::max();
    for (index_t e : {n, c, h, w}) {
      if (e > budget) {
        throw std::invalid_argument("Shape4: element count overflows index type: " + str());
      }
      budget /= e;
    }
  }

  index_t elems() const { return n * c * h * w; }

  bool operator==(const Shape4& o) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

// Dense rank-4 array in contiguous n->c->h->w row-major order.
// Immutable by convention once handed to an operation: every public op
// returns a fresh tensor and never writes through its inputs.
template <typename T>
class Tensor4 {
  static_assert(std::is_floating_point_v<T>, "Tensor4 requires a real scalar type");

 public:
  using value_type = T;

  Tensor4() : shape_{1, 1, 1, 1}, data_(1, T(0)) {}
  explicit Tensor4(Shape4 shape, T fill = T(0))
      : shape_(shape), data_(static_cast<std::size_t>(shape.elems()), fill) {}

  static Tensor4 zeros(Shape4 s) { return Tensor4(s, T(0)); }
  static Tensor4 ones(Shape4 s) { return Tensor4(s, T(1)); }
  static Tensor4 full(Shape4 s, T v) { return Tensor4(s, v); }

  const Shape4& shape() const { return shape_; }
  index_t n() const { return shape_.n; }
  index_t c() const { return shape_.c; }
  index_t h() const { return shape_.h; }
  index_t w() const { return shape_.w; }
  index_t size() const { return shape_.elems(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](index_t i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](index_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(index_t n, index_t c, index_t h, index_t w) {
    return data_[static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + h) * shape_.w + w)];
  }
  T at(index_t n, index_t c, index_t h, index_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + h) * shape_.w + w)];
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    for (index_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

namespace detail {
inline void require_same_shape(const Shape4& a, const Shape4& b, const char* op) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}
}  // namespace detail

template <typename T>
Tensor4<T> elementwise_add(const Tensor4<T>& a, const Tensor4<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "elementwise_add");
  Tensor4<T> out(a.shape());
  for (index_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor4<T> elementwise_mul(const Tensor4<T>& a, const Tensor4<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "elementwise_mul");
  Tensor4<T> out(a.shape());
  for (index_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
void add_inplace(Tensor4<T>& dst, const Tensor4<T>& src) {
  detail::require_same_shape(dst.shape(), src.shape(), "add_inplace");
  for (index_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor4<T> scaled(const Tensor4<T>& a, T factor) {
  Tensor4<T> out(a.shape());
  for (index_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
  return out;
}

template <typename T>
Tensor4<T> concat_channels(const std::vector<Tensor4<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty part list");
  const Shape4& ref = parts.front().shape();
  index_t total_c = 0;
  for (const auto& p : parts) {
    if (p.n() != ref.n || p.h() != ref.h || p.w() != ref.w) {
      throw std::invalid_argument("concat_channels: n/h/w mismatch " + ref.str() + " vs " +
                                  p.shape().str());
    }
    total_c += p.c();
  }
  Tensor4<T> out(Shape4{ref.n, total_c, ref.h, ref.w});
  const index_t plane = ref.h * ref.w;
  for (index_t n = 0; n < ref.n; ++n) {
    index_t c_off = 0;
    for (const auto& p : parts) {
      const T* src = p.data() + n * p.c() * plane;
      T* dst = out.data() + (n * total_c + c_off) * plane;
      for (index_t i = 0; i < p.c() * plane; ++i) dst[i] = src[i];
      c_off += p.c();
    }
  }
  return out;
}

template <typename T>
Tensor4<T> slice_channels(const Tensor4<T>& x, index_t from, index_t count) {
  if (from < 0 || count < 1 || from + count > x.c()) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(from) + "," +
                                std::to_string(from + count) + ") out of bounds for c=" +
                                std::to_string(x.c()));
  }
  Tensor4<T> out(Shape4{x.n(), count, x.h(), x.w()});
  const index_t plane = x.h() * x.w();
  for (index_t n = 0; n < x.n(); ++n) {
    const T* src = x.data() + (n * x.c() + from) * plane;
    T* dst = out.data() + n * count * plane;
    for (index_t i = 0; i < count * plane; ++i) dst[i] = src[i];
  }
  return out;
}

struct UniformDist {
  double lo = 0.0;
  double hi = 1.0;
};
struct NormalDist {
  double mean = 0.0;
  double stddev = 1.0;
};
using Dist = std::variant<UniformDist, NormalDist>;

// Deterministic for fixed (shape, seed, dist); the stream is xoshiro256++
// with splitmix64 seeding, so fixtures reproduce bit-exactly everywhere.
template <typename T>
Tensor4<T> fill_random(Shape4 shape, std::uint64_t seed, const Dist& dist) {
  if (const auto* u = std::get_if<UniformDist>(&dist)) {
    if (!(u->lo < u->hi)) throw std::invalid_argument("fill_random: uniform requires lo < hi");
  } else if (const auto* g = std::get_if<NormalDist>(&dist)) {
    if (!(g->stddev > 0.0)) throw std::invalid_argument("fill_random: normal requires stddev > 0");
  }
  Xoshiro256pp rng(seed);
  Tensor4<T> out(shape);
  for (index_t i = 0; i < out.size(); ++i) {
    double v = std::holds_alternative<UniformDist>(dist)
                   ? rng.uniform(std::get<UniformDist>(dist).lo, std::get<UniformDist>(dist).hi)
                   : rng.normal(std::get<NormalDist>(dist).mean, std::get<NormalDist>(dist).stddev);
    out[i] = static_cast<T>(v);
  }
  return out;
}

template <typename T>
T max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = T(0);
  for (index_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace spansr
