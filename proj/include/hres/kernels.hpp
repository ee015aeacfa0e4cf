#pragma once

// Raw forward/backward kernels for the differentiable ops. Inner products
// accumulate in double and are stored back in T.

#include <algorithm>
#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/tensor.hpp"

namespace hres::kernels {

inline constexpr std::size_t kColumnChunk = 256;

inline void validate_conv(const Shape& x, const Shape& w, const Shape& b, const Conv2dSpec& spec) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("conv2d: " + what); };
  if (spec.kernel < 1) fail("kernel size must be >= 1");
  if (spec.stride < 1) fail("stride must be >= 1");
  if (x.size() != 4) fail("input must be rank 4 (NxCxHxW), got " + shape_string(x));
  if (x[1] != spec.in_channels) {
    fail("input channel dimension is " + std::to_string(x[1]) + ", expected in_channels=" +
         std::to_string(spec.in_channels));
  }
  if (w != spec.weight_shape()) {
    fail("weight shape " + shape_string(w) + " does not match expected " + shape_string(spec.weight_shape()));
  }
  if (b.size() != 1 || b[0] != spec.out_channels) {
    fail("bias shape " + shape_string(b) + " does not match out_channels=" + std::to_string(spec.out_channels));
  }
  if (x[2] + spec.padding.top + spec.padding.bottom < spec.kernel) {
    fail("padded input height " + std::to_string(x[2] + spec.padding.top + spec.padding.bottom) +
         " is smaller than kernel " + std::to_string(spec.kernel));
  }
  if (x[3] + spec.padding.left + spec.padding.right < spec.kernel) {
    fail("padded input width " + std::to_string(x[3] + spec.padding.left + spec.padding.right) +
         " is smaller than kernel " + std::to_string(spec.kernel));
  }
}

namespace detail {

struct ConvGeometry {
  std::size_t c, h, w;      // input plane
  std::size_t oh, ow;       // output plane
  std::size_t rows;         // c*k*k
  std::size_t cols;         // oh*ow
};

inline ConvGeometry geometry(const Shape& x, const Conv2dSpec& spec) {
  ConvGeometry g{};
  g.c = x[1];
  g.h = x[2];
  g.w = x[3];
  g.oh = spec.out_height(g.h);
  g.ow = spec.out_width(g.w);
  g.rows = g.c * spec.kernel * spec.kernel;
  g.cols = g.oh * g.ow;
  return g;
}

// Unfolds one C×H×W image into a rows×cols patch matrix (zero outside the image).
template <class T>
void im2col(const T* img, const ConvGeometry& g, const Conv2dSpec& spec, T* col) {
  const std::size_t k = spec.kernel;
  const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>(spec.padding.top);
  const std::ptrdiff_t pl = static_cast<std::ptrdiff_t>(spec.padding.left);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(spec.stride);
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* plane = img + c * g.h * g.w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* out = col + ((c * k + ky) * k + kx) * g.cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - pt;
          T* row = out + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(row, row + g.ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + static_cast<std::ptrdiff_t>(kx) - pl;
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// y = conv(x, w) + b, cross-correlation, no kernel flip.
template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                              const Conv2dSpec& spec) {
  validate_conv(x.shape(), w.shape(), b.shape(), spec);
  const auto g = detail::geometry(x.shape(), spec);
  const std::size_t n = x.dim(0);
  const std::size_t oc = spec.out_channels;
  BasicTensor<T> y({n, oc, g.oh, g.ow});

  std::vector<T> col(g.rows * g.cols);
  std::array<double, kColumnChunk> acc{};
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(x.data() + i * g.c * g.h * g.w, g, spec, col.data());
    T* out = y.data() + i * oc * g.cols;
    for (std::size_t p0 = 0; p0 < g.cols; p0 += kColumnChunk) {
      const std::size_t pc = std::min(kColumnChunk, g.cols - p0);
      for (std::size_t o = 0; o < oc; ++o) {
        std::fill(acc.begin(), acc.begin() + pc, static_cast<double>(b[o]));
        const T* wrow = w.data() + o * g.rows;
        for (std::size_t r = 0; r < g.rows; ++r) {
          const double wv = wrow[r];
          const T* c = col.data() + r * g.cols + p0;
          for (std::size_t j = 0; j < pc; ++j) acc[j] += wv * static_cast<double>(c[j]);
        }
        T* dst = out + o * g.cols + p0;
        for (std::size_t j = 0; j < pc; ++j) dst[j] = static_cast<T>(acc[j]);
      }
    }
  }
  return y;
}

/// Gradients of conv2d. Any of dx/dw/db may be null to skip that gradient.
/// Results are accumulated (+=) into the provided tensors.
template <class T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const Conv2dSpec& spec,
                     const BasicTensor<T>& dy, BasicTensor<T>* dx, BasicTensor<T>* dw, BasicTensor<T>* db) {
  const auto g = detail::geometry(x.shape(), spec);
  const std::size_t n = x.dim(0);
  const std::size_t oc = spec.out_channels;
  const std::size_t k = spec.kernel;

  std::vector<T> col;
  std::vector<double> dw_acc;
  std::vector<double> dx_acc;
  if (dw) {
    col.resize(g.rows * g.cols);
    dw_acc.assign(g.rows * oc, 0.0);
  }
  if (dx) dx_acc.resize(g.c * g.h * g.w);
  std::vector<double> db_acc(oc, 0.0);
  std::array<double, kColumnChunk> acc{};

  for (std::size_t i = 0; i < n; ++i) {
    const T* gy = dy.data() + i * oc * g.cols;

    if (db) {
      for (std::size_t o = 0; o < oc; ++o) {
        double s = 0.0;
        const T* row = gy + o * g.cols;
#pragma omp simd reduction(+ : s)
        for (std::size_t p = 0; p < g.cols; ++p) s += static_cast<double>(row[p]);
        db_acc[o] += s;
      }
    }

    if (dw) {
      detail::im2col(x.data() + i * g.c * g.h * g.w, g, spec, col.data());
      for (std::size_t p0 = 0; p0 < g.cols; p0 += kColumnChunk) {
        const std::size_t pc = std::min(kColumnChunk, g.cols - p0);
        for (std::size_t o = 0; o < oc; ++o) {
          const T* gr = gy + o * g.cols + p0;
          double* dwo = dw_acc.data() + o * g.rows;
          for (std::size_t r = 0; r < g.rows; ++r) {
            const T* c = col.data() + r * g.cols + p0;
            double s = 0.0;
#pragma omp simd reduction(+ : s)
            for (std::size_t j = 0; j < pc; ++j) s += static_cast<double>(gr[j]) * static_cast<double>(c[j]);
            dwo[r] += s;
          }
        }
      }
    }

    if (dx) {
      std::fill(dx_acc.begin(), dx_acc.end(), 0.0);
      const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>(spec.padding.top);
      const std::ptrdiff_t pl = static_cast<std::ptrdiff_t>(spec.padding.left);
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(spec.stride);
      for (std::size_t p0 = 0; p0 < g.cols; p0 += kColumnChunk) {
        const std::size_t pc = std::min(kColumnChunk, g.cols - p0);
        for (std::size_t r = 0; r < g.rows; ++r) {
          std::fill(acc.begin(), acc.begin() + pc, 0.0);
          for (std::size_t o = 0; o < oc; ++o) {
            const double wv = w[o * g.rows + r];
            const T* gr = gy + o * g.cols + p0;
            for (std::size_t j = 0; j < pc; ++j) acc[j] += wv * static_cast<double>(gr[j]);
          }
          const std::size_t c = r / (k * k);
          const std::ptrdiff_t ky = static_cast<std::ptrdiff_t>((r / k) % k);
          const std::ptrdiff_t kx = static_cast<std::ptrdiff_t>(r % k);
          double* plane = dx_acc.data() + c * g.h * g.w;
          std::size_t oy = p0 / g.ow;
          std::size_t ox = p0 % g.ow;
          for (std::size_t j = 0; j < pc; ++j) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + ky - pt;
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + kx - pl;
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(g.w)) {
              plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += acc[j];
            }
            if (++ox == g.ow) {
              ox = 0;
              ++oy;
            }
          }
        }
      }
      T* dst = dx->data() + i * g.c * g.h * g.w;
      for (std::size_t j = 0; j < dx_acc.size(); ++j) dst[j] += static_cast<T>(dx_acc[j]);
    }
  }

  if (dw) {
    for (std::size_t j = 0; j < dw_acc.size(); ++j) (*dw)[j] += static_cast<T>(dw_acc[j]);
  }
  if (db) {
    for (std::size_t o = 0; o < oc; ++o) (*db)[o] += static_cast<T>(db_acc[o]);
  }
}

/// y = x·w + b with x: N×D, w: D×K, b: K.
template <class T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  if (x.rank() != 2) throw std::invalid_argument("dense: input must be rank 2 (NxD), got " + shape_string(x.shape()));
  if (w.rank() != 2) throw std::invalid_argument("dense: weights must be rank 2 (DxK), got " + shape_string(w.shape()));
  if (x.dim(1) != w.dim(0)) {
    throw std::invalid_argument("dense: inner dimension mismatch, input D=" + std::to_string(x.dim(1)) +
                                " but weights D=" + std::to_string(w.dim(0)));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw std::invalid_argument("dense: bias shape " + shape_string(b.shape()) + " does not match K=" +
                                std::to_string(w.dim(1)));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
  BasicTensor<T> y({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = b[j];
      for (std::size_t t = 0; t < d; ++t) s += static_cast<double>(x[i * d + t]) * static_cast<double>(w[t * k + j]);
      y[i * k + j] = static_cast<T>(s);
    }
  }
  return y;
}

template <class T>
void dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy, BasicTensor<T>* dx,
                    BasicTensor<T>* dw, BasicTensor<T>* db) {
  const std::size_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
  if (dx) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < d; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += static_cast<double>(dy[i * k + j]) * static_cast<double>(w[t * k + j]);
        (*dx)[i * d + t] += static_cast<T>(s);
      }
    }
  }
  if (dw) {
    for (std::size_t t = 0; t < d; ++t) {
      for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i * d + t]) * static_cast<double>(dy[i * k + j]);
        (*dw)[t * k + j] += static_cast<T>(s);
      }
    }
  }
  if (db) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(dy[i * k + j]);
      (*db)[j] += static_cast<T>(s);
    }
  }
}

}  // namespace hres::kernels
