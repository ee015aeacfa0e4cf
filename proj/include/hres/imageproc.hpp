#pragma once

// Patch preprocessing: bilinear resize, HSV / CIELAB channel extraction,
// 7-plane assembly, separable Gaussian denoising and CLAHE on the RGB planes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/tensor.hpp"

namespace hres {

inline constexpr std::size_t kPatchSize = 100;
inline constexpr std::size_t kNumPlanes = 7;

enum Plane : std::size_t { kRed = 0, kGreen, kBlue, kHue, kSaturation, kLightness, kGreenRed };

/// Round half away from zero and clamp into [0,255].
inline std::uint8_t to_u8(double v) {
  const double r = v < 0.0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

/// 8-bit RGB image, interleaved row-major.
struct RgbPatch {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbPatch() = default;
  RgbPatch(std::size_t w, std::size_t h, std::vector<std::uint8_t> px) : width(w), height(h), pixels(std::move(px)) {
    if (w == 0 || h == 0) throw std::invalid_argument("RgbPatch: dimensions must be >= 1");
    if (pixels.size() != w * h * 3) {
      throw std::invalid_argument("RgbPatch: expected " + std::to_string(w * h * 3) + " bytes, got " +
                                  std::to_string(pixels.size()));
    }
  }
  static RgbPatch filled(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> rgb) {
    RgbPatch p(w, h, std::vector<std::uint8_t>(w * h * 3));
    for (std::size_t i = 0; i < w * h; ++i) std::copy(rgb.begin(), rgb.end(), p.pixels.begin() + i * 3);
    return p;
  }

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const RgbPatch&, const RgbPatch&) = default;
};

/// Planes [R,G,B,H,S,L*,a*], each in [0,1], stored as a 7×H×W tensor.
struct MultiChannelImage {
  std::size_t width = 0;
  std::size_t height = 0;
  Tensor planes;

  MultiChannelImage() = default;
  MultiChannelImage(std::size_t w, std::size_t h) : width(w), height(h), planes({kNumPlanes, h, w}) {}

  std::span<float> plane(std::size_t c) { return planes.values().subspan(c * width * height, width * height); }
  std::span<const float> plane(std::size_t c) const {
    return planes.values().subspan(c * width * height, width * height);
  }

  friend bool operator==(const MultiChannelImage& a, const MultiChannelImage& b) {
    return a.width == b.width && a.height == b.height && a.planes == b.planes;
  }
};

// ---------------------------------------------------------------------------
// Resize

/// Bilinear resize with corner-aligned sampling (output corners hit input corners).
inline RgbPatch resize_bilinear(const RgbPatch& patch, std::size_t target_width, std::size_t target_height) {
  if (target_width == 0 || target_height == 0) {
    throw std::invalid_argument("resize_bilinear: target dimensions must be >= 1, got " + std::to_string(target_width) +
                                "x" + std::to_string(target_height));
  }
  RgbPatch out(target_width, target_height, std::vector<std::uint8_t>(target_width * target_height * 3));
  auto scale = [](std::size_t in, std::size_t outn) {
    return outn > 1 ? static_cast<double>(in - 1) / static_cast<double>(outn - 1) : 0.0;
  };
  const double sx = scale(patch.width, target_width);
  const double sy = scale(patch.height, target_height);
  for (std::size_t y = 0; y < target_height; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), patch.height - 1);
    const std::size_t y1 = std::min(y0 + 1, patch.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_width; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), patch.width - 1);
      const std::size_t x1 = std::min(x0 + 1, patch.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1.0 - wx) * patch.at(x0, y0, c) + wx * patch.at(x1, y0, c);
        const double bottom = (1.0 - wx) * patch.at(x0, y1, c) + wx * patch.at(x1, y1, c);
        out.at(x, y, c) = to_u8((1.0 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Colour spaces

struct Hsv {
  double h;  // degrees in [0,360)
  double s;
  double v;
};

inline Hsv rgb_to_hsv_pixel(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0.0;
  if (delta > 0.0) {
    if (mx == r) {
      h = 60.0 * std::fmod((g - b) / delta, 6.0);
    } else if (mx == g) {
      h = 60.0 * ((b - r) / delta + 2.0);
    } else {
      h = 60.0 * ((r - g) / delta + 4.0);
    }
    if (h < 0.0) h += 360.0;
  }
  const double s = mx > 0.0 ? delta / mx : 0.0;
  return {h, s, mx};
}

/// Inverse of rgb_to_hsv_pixel; returns 8-bit channels.
inline std::array<std::uint8_t, 3> hsv_to_rgb_pixel(const Hsv& hsv) {
  const double c = hsv.v * hsv.s;
  const double hp = std::fmod(hsv.h, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = hsv.v - c;
  return {to_u8((r + m) * 255.0), to_u8((g + m) * 255.0), to_u8((b + m) * 255.0)};
}

struct Lab {
  double l;
  double a;
  double b;
};

/// sRGB (D65) → CIELAB.
inline Lab rgb_to_lab_pixel(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  auto linear = [](std::uint8_t v) {
    const double c = v / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const double r = linear(r8), g = linear(g8), b = linear(b8);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  constexpr double xn = 0.95047, yn = 1.0, zn = 1.08883;
  constexpr double delta = 6.0 / 29.0;
  auto f = [](double t) {
    return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
  };
  const double fx = f(x / xn), fy = f(y / yn), fz = f(z / zn);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

struct PlanePair {
  std::vector<float> first;
  std::vector<float> second;
};

/// H as degrees/360 and S, both in [0,1]; achromatic pixels get H = 0.
inline PlanePair rgb_to_hsv(const RgbPatch& patch) {
  PlanePair out{std::vector<float>(patch.width * patch.height), std::vector<float>(patch.width * patch.height)};
  for (std::size_t i = 0; i < patch.width * patch.height; ++i) {
    const Hsv hsv = rgb_to_hsv_pixel(patch.pixels[i * 3], patch.pixels[i * 3 + 1], patch.pixels[i * 3 + 2]);
    out.first[i] = static_cast<float>(hsv.h / 360.0);
    out.second[i] = static_cast<float>(hsv.s);
  }
  return out;
}

/// L* / 100 and (a* + 128) / 255, clamped into [0,1].
inline PlanePair rgb_to_lab(const RgbPatch& patch) {
  PlanePair out{std::vector<float>(patch.width * patch.height), std::vector<float>(patch.width * patch.height)};
  for (std::size_t i = 0; i < patch.width * patch.height; ++i) {
    const Lab lab = rgb_to_lab_pixel(patch.pixels[i * 3], patch.pixels[i * 3 + 1], patch.pixels[i * 3 + 2]);
    out.first[i] = static_cast<float>(std::clamp(lab.l / 100.0, 0.0, 1.0));
    out.second[i] = static_cast<float>(std::clamp((lab.a + 128.0) / 255.0, 0.0, 1.0));
  }
  return out;
}

inline MultiChannelImage assemble_seven_channel(const RgbPatch& patch) {
  if (patch.width != kPatchSize || patch.height != kPatchSize) {
    throw std::invalid_argument("assemble_seven_channel: expected a 100x100 patch, got " + std::to_string(patch.width) +
                                "x" + std::to_string(patch.height));
  }
  MultiChannelImage img(patch.width, patch.height);
  const std::size_t n = patch.width * patch.height;
  for (std::size_t c = 0; c < 3; ++c) {
    auto plane = img.plane(c);
    for (std::size_t i = 0; i < n; ++i) plane[i] = static_cast<float>(patch.pixels[i * 3 + c] / 255.0);
  }
  const PlanePair hsv = rgb_to_hsv(patch);
  const PlanePair lab = rgb_to_lab(patch);
  std::copy(hsv.first.begin(), hsv.first.end(), img.plane(kHue).begin());
  std::copy(hsv.second.begin(), hsv.second.end(), img.plane(kSaturation).begin());
  std::copy(lab.first.begin(), lab.first.end(), img.plane(kLightness).begin());
  std::copy(lab.second.begin(), lab.second.end(), img.plane(kGreenRed).begin());
  return img;
}

// ---------------------------------------------------------------------------
// Gaussian denoising

struct GaussianKernel {
  double sigma = 1.0;
  std::size_t radius = 2;
  std::vector<double> taps;
};

/// Sampled 1-D Gaussian, normalised to unit sum.
inline GaussianKernel make_gaussian_kernel(double sigma, std::size_t radius) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian kernel: sigma must be > 0");
  if (radius < 1) throw std::invalid_argument("gaussian kernel: radius must be >= 1");
  GaussianKernel k{sigma, radius, std::vector<double>(2 * radius + 1)};
  double sum = 0.0;
  for (std::size_t i = 0; i < k.taps.size(); ++i) {
    const double x = static_cast<double>(i) - static_cast<double>(radius);
    k.taps[i] = std::exp(-(x * x) / (2.0 * sigma * sigma));
    sum += k.taps[i];
  }
  for (double& t : k.taps) t /= sum;
  return k;
}

/// Reflect-101 index: -1 → 1, n → n-2.
inline std::size_t reflect101(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= m) i = i < 0 ? -i : 2 * (m - 1) - i;
  return static_cast<std::size_t>(i);
}

/// Horizontal then vertical pass; the intermediate stays in double.
inline std::vector<float> blur_plane(std::span<const float> plane, std::size_t width, std::size_t height,
                                     const GaussianKernel& kernel) {
  if (kernel.radius >= width || kernel.radius >= height) {
    throw std::invalid_argument("gaussian_blur: kernel radius " + std::to_string(kernel.radius) +
                                " must be smaller than the plane dimensions " + std::to_string(width) + "x" +
                                std::to_string(height));
  }
  const auto r = static_cast<std::ptrdiff_t>(kernel.radius);
  std::vector<double> tmp(width * height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -r; d <= r; ++d) {
        s += kernel.taps[static_cast<std::size_t>(d + r)] *
             plane[y * width + reflect101(static_cast<std::ptrdiff_t>(x) + d, width)];
      }
      tmp[y * width + x] = s;
    }
  }
  std::vector<float> out(width * height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -r; d <= r; ++d) {
        s += kernel.taps[static_cast<std::size_t>(d + r)] *
             tmp[reflect101(static_cast<std::ptrdiff_t>(y) + d, height) * width + x];
      }
      out[y * width + x] = static_cast<float>(s);
    }
  }
  return out;
}

inline MultiChannelImage gaussian_blur(const MultiChannelImage& image, const GaussianKernel& kernel) {
  MultiChannelImage out(image.width, image.height);
  for (std::size_t c = 0; c < image.planes.dim(0); ++c) {
    const auto blurred = blur_plane(image.plane(c), image.width, image.height, kernel);
    std::copy(blurred.begin(), blurred.end(), out.plane(c).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// CLAHE

struct ClaheConfig {
  std::size_t tile_rows = 8;
  std::size_t tile_cols = 8;
  /// Multiple of the mean per-bin count; infinity disables clipping.
  double clip_limit = 2.0;
  static constexpr std::size_t bins = 256;
};

inline std::size_t quantize(float v) { return to_u8(static_cast<double>(v) * 255.0); }

/// Contrast-limited equalisation mapping for one tile histogram; lut[i] in [0,1].
/// A tile holding a single grey level maps through the identity.
inline std::array<float, ClaheConfig::bins> tile_mapping(const std::array<double, ClaheConfig::bins>& hist,
                                                         double clip_limit) {
  constexpr std::size_t bins = ClaheConfig::bins;
  std::array<float, bins> lut{};
  double total = 0.0;
  std::size_t occupied = 0;
  for (double h : hist) {
    total += h;
    occupied += h > 0.0 ? 1 : 0;
  }
  if (occupied <= 1) {
    for (std::size_t i = 0; i < bins; ++i) lut[i] = static_cast<float>(i / 255.0);
    return lut;
  }
  std::array<double, bins> h = hist;
  if (std::isfinite(clip_limit)) {
    const double limit = clip_limit * total / static_cast<double>(bins);
    double excess = 0.0;
    for (double& v : h) {
      if (v > limit) {
        excess += v - limit;
        v = limit;
      }
    }
    const double share = excess / static_cast<double>(bins);
    for (double& v : h) v += share;
  }
  std::array<double, bins> cdf{};
  double run = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    run += h[i];
    cdf[i] = run;
  }
  // g = H(f) with H normalised by the tile's total count.
  for (std::size_t i = 0; i < bins; ++i) lut[i] = static_cast<float>(std::clamp(cdf[i] / run, 0.0, 1.0));
  return lut;
}

namespace detail {

struct TileAxis {
  std::vector<std::size_t> begin;  // tile start, size = tiles + 1 (last entry = extent)
  std::vector<double> center;
};

inline TileAxis tile_axis(std::size_t extent, std::size_t tiles) {
  TileAxis a;
  const std::size_t step = extent / tiles;
  for (std::size_t t = 0; t < tiles; ++t) a.begin.push_back(t * step);
  a.begin.push_back(extent);
  for (std::size_t t = 0; t < tiles; ++t) {
    a.center.push_back((static_cast<double>(a.begin[t]) + static_cast<double>(a.begin[t + 1]) - 1.0) / 2.0);
  }
  return a;
}

// Neighbouring tiles and interpolation weight of the second one for coordinate p.
inline void locate(const TileAxis& a, double p, std::size_t& t0, std::size_t& t1, double& w) {
  const std::size_t n = a.center.size();
  if (p <= a.center.front()) {
    t0 = t1 = 0;
    w = 0.0;
    return;
  }
  if (p >= a.center.back()) {
    t0 = t1 = n - 1;
    w = 0.0;
    return;
  }
  std::size_t t = 0;
  while (a.center[t + 1] <= p) ++t;
  t0 = t;
  t1 = t + 1;
  w = (p - a.center[t]) / (a.center[t + 1] - a.center[t]);
}

}  // namespace detail

/// CLAHE on one plane of values in [0,1].
inline std::vector<float> clahe_plane(std::span<const float> plane, std::size_t width, std::size_t height,
                                      const ClaheConfig& cfg) {
  if (cfg.tile_rows < 1 || cfg.tile_cols < 1) throw std::invalid_argument("clahe: tile grid must be at least 1x1");
  if (cfg.tile_rows > height || cfg.tile_cols > width) {
    throw std::invalid_argument("clahe: tile grid " + std::to_string(cfg.tile_rows) + "x" +
                                std::to_string(cfg.tile_cols) + " exceeds plane " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  if (!(cfg.clip_limit > 1.0)) throw std::invalid_argument("clahe: clip limit must be > 1");
  const auto rows = detail::tile_axis(height, cfg.tile_rows);
  const auto cols = detail::tile_axis(width, cfg.tile_cols);
  if (std::isfinite(cfg.clip_limit)) {
    const double smallest = static_cast<double>((height / cfg.tile_rows) * (width / cfg.tile_cols));
    if (cfg.clip_limit * smallest / static_cast<double>(ClaheConfig::bins) < 1.0) {
      throw std::invalid_argument("clahe: clip limit times mean bin count is below 1 for the tile size");
    }
  }

  std::vector<std::uint8_t> q(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) q[i] = static_cast<std::uint8_t>(quantize(plane[i]));

  std::vector<std::array<float, ClaheConfig::bins>> luts;
  luts.reserve(cfg.tile_rows * cfg.tile_cols);
  for (std::size_t ty = 0; ty < cfg.tile_rows; ++ty) {
    for (std::size_t tx = 0; tx < cfg.tile_cols; ++tx) {
      std::array<double, ClaheConfig::bins> hist{};
      for (std::size_t y = rows.begin[ty]; y < rows.begin[ty + 1]; ++y) {
        for (std::size_t x = cols.begin[tx]; x < cols.begin[tx + 1]; ++x) hist[q[y * width + x]] += 1.0;
      }
      luts.push_back(tile_mapping(hist, cfg.clip_limit));
    }
  }

  std::vector<float> out(plane.size());
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t r0, r1;
    double wy;
    detail::locate(rows, static_cast<double>(y), r0, r1, wy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t c0, c1;
      double wx;
      detail::locate(cols, static_cast<double>(x), c0, c1, wx);
      const std::uint8_t v = q[y * width + x];
      const double top = (1.0 - wx) * luts[r0 * cfg.tile_cols + c0][v] + wx * luts[r0 * cfg.tile_cols + c1][v];
      const double bottom = (1.0 - wx) * luts[r1 * cfg.tile_cols + c0][v] + wx * luts[r1 * cfg.tile_cols + c1][v];
      out[y * width + x] = static_cast<float>((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

/// CLAHE on planes R, G, B only; the other planes are copied through untouched.
inline MultiChannelImage clahe_rgb(const MultiChannelImage& image, const ClaheConfig& cfg) {
  MultiChannelImage out = image;
  for (std::size_t c = kRed; c <= kBlue; ++c) {
    const auto enhanced = clahe_plane(image.plane(c), image.width, image.height, cfg);
    std::copy(enhanced.begin(), enhanced.end(), out.plane(c).begin());
  }
  return out;
}

/// resize → 7-plane assembly → blur (all planes) → CLAHE (RGB).
inline MultiChannelImage preprocess_patch(const RgbPatch& patch, const GaussianKernel& kernel, const ClaheConfig& cfg) {
  const RgbPatch resized = resize_bilinear(patch, kPatchSize, kPatchSize);
  return clahe_rgb(gaussian_blur(assemble_seven_channel(resized), kernel), cfg);
}

}  // namespace hres
