#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the kernels it checks.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "hres/tensor.hpp"

namespace hres::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = dist(rng);
  return t;
}

template <class T>
BasicTensor<T> random_tensor_t(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  BasicTensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

/// Direct-summation cross-correlation with explicit zero padding.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& s) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t oh = (h + s.padding.top + s.padding.bottom - s.kernel) / s.stride + 1;
  const std::size_t ow = (wd + s.padding.left + s.padding.right - s.kernel) / s.stride + 1;
  Tensor y({n, s.out_channels, oh, ow});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b[o];
          for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t ky = 0; ky < s.kernel; ++ky) {
              for (std::size_t kx = 0; kx < s.kernel; ++kx) {
                const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding.top);
                const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding.left);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += static_cast<double>(x.at(i, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) *
                       static_cast<double>(w.at(o, ci, ky, kx));
              }
            }
          }
          y.at(i, o, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

/// Central-difference gradient of a scalar function over every element of `x`.
template <class T>
std::vector<double> finite_difference(BasicTensor<T> x, const std::function<double(const BasicTensor<T>&)>& f,
                                      double eps) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = static_cast<T>(saved + eps);
    const double plus = f(x);
    x[i] = static_cast<T>(saved - eps);
    const double minus = f(x);
    x[i] = saved;
    g[i] = (plus - minus) / (2.0 * eps);
  }
  return g;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace hres::testing
