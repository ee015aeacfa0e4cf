#pragma once

// Grad-CAM: class-discriminative heatmaps from the gradient of a class logit
// with respect to a convolutional layer's feature maps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/colormap.hpp"
#include "hres/imageproc.hpp"
#include "hres/model.hpp"
#include "hres/tape.hpp"

namespace hres {

struct Heatmap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;  // row-major
};

inline const std::string kLastConv = "last_conv";

/// Resolves a selector to a conv layer name. "last_conv" is the final serial
/// convolution before pooling.
inline std::string select_layer(const Network& net, const std::string& selector) {
  if (selector == kLastConv) return "block" + std::to_string(net.config().num_residual_blocks) + ".conv3";
  std::string available;
  for (const auto& l : net.convs()) {
    if (l.name == selector) return l.name;
    available += (available.empty() ? "" : ", ") + l.name;
  }
  throw std::invalid_argument("gradcam: unknown layer '" + selector + "'; convolutional layers: " + available +
                              " (or last_conv)");
}

/// Bilinear resize of a float map with corner-aligned sampling (no quantisation).
inline std::vector<float> upsample_bilinear(std::span<const float> src, std::size_t sw, std::size_t sh, std::size_t dw,
                                            std::size_t dh) {
  std::vector<float> out(dw * dh);
  const double sx = dw > 1 ? static_cast<double>(sw - 1) / static_cast<double>(dw - 1) : 0.0;
  const double sy = dh > 1 ? static_cast<double>(sh - 1) / static_cast<double>(dh - 1) : 0.0;
  for (std::size_t y = 0; y < dh; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), sh - 1);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), sw - 1);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1.0 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1];
      const double bottom = (1.0 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1];
      out[y * dw + x] = static_cast<float>((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

/// Min-max scaling into [0,1]. A flat map (including all zeros) becomes all
/// zeros: it carries no localisation and 0/0 must not leak out.
inline void normalize_heatmap(std::vector<float>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(v.begin(), v.end(), 0.0f);
    return;
  }
  for (float& x : v) x = static_cast<float>(std::clamp((x - mn) / (mx - mn), 0.0, 1.0));
}

/// ReLU(Σ_c α_c A_c) at the layer's own resolution, before upsampling and
/// normalisation. α_c is the spatial mean of ∂logit/∂A_c.
inline Heatmap gradcam_raw(const Network& net, const Tensor& image, std::size_t target_class, const std::string& layer) {
  if (target_class >= net.config().num_classes) {
    throw std::invalid_argument("gradcam: class index " + std::to_string(target_class) + " is not 0 or 1");
  }
  if (image.rank() != 3) throw std::invalid_argument("gradcam: image must be CxHxW, got " + shape_string(image.shape()));
  const std::string name = select_layer(net, layer);

  GradTape tape(true);
  const auto tr = trace_forward(net, tape, tape.constant(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})));
  Tensor seed({1, net.config().num_classes});
  seed[target_class] = 1.0f;
  tape.backward(tr.logits, seed);

  const Var a = tr.activations.at(name);
  const Tensor& act = tape.value(a);
  const Tensor& grad = tape.grad(a);
  const std::size_t c = act.dim(1), h = act.dim(2), w = act.dim(3), hw = h * w;

  Heatmap m{w, h, std::vector<float>(hw, 0.0f)};
  std::vector<double> acc(hw, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += grad[ch * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) acc[i] += alpha * act[ch * hw + i];
  }
  for (std::size_t i = 0; i < hw; ++i) m.values[i] = static_cast<float>(std::max(0.0, acc[i]));
  return m;
}

/// Normalised heatmap at the image resolution.
inline Heatmap gradcam(const Network& net, const Tensor& image, std::size_t target_class,
                       const std::string& layer = kLastConv) {
  const Heatmap raw = gradcam_raw(net, image, target_class, layer);
  Heatmap out{image.dim(2), image.dim(1), upsample_bilinear(raw.values, raw.width, raw.height, image.dim(2), image.dim(1))};
  normalize_heatmap(out.values);
  return out;
}

inline Heatmap gradcam(const Network& net, const MultiChannelImage& image, std::size_t target_class,
                       const std::string& layer = kLastConv) {
  return gradcam(net, image.planes, target_class, layer);
}

/// out = (1−α)·source + α·colormap(heat), per channel, rounded half away from zero.
inline RgbPatch overlay(const Heatmap& heat, const RgbPatch& source, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("overlay: alpha must be in [0,1]");
  if (heat.width != source.width || heat.height != source.height) {
    throw std::invalid_argument("overlay: heatmap " + std::to_string(heat.width) + "x" + std::to_string(heat.height) +
                                " does not match source " + std::to_string(source.width) + "x" +
                                std::to_string(source.height));
  }
  RgbPatch out = source;
  for (std::size_t i = 0; i < heat.values.size(); ++i) {
    const auto& cm = kJetColormap[to_u8(static_cast<double>(heat.values[i]) * 255.0)];
    for (std::size_t c = 0; c < 3; ++c) {
      out.pixels[i * 3 + c] = to_u8((1.0 - alpha) * source.pixels[i * 3 + c] + alpha * cm[c]);
    }
  }
  return out;
}

/// 8-bit rendering of the heatmap (0 → black, 1 → white).
inline std::vector<std::uint8_t> heatmap_gray(const Heatmap& heat) {
  std::vector<std::uint8_t> out(heat.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_u8(static_cast<double>(heat.values[i]) * 255.0);
  return out;
}

/// The R, G, B planes of a preprocessed image back as an 8-bit patch.
inline RgbPatch rgb_from_planes(const MultiChannelImage& image) {
  RgbPatch out(image.width, image.height, std::vector<std::uint8_t>(image.width * image.height * 3));
  for (std::size_t c = 0; c < 3; ++c) {
    const auto p = image.plane(c);
    for (std::size_t i = 0; i < p.size(); ++i) out.pixels[i * 3 + c] = to_u8(static_cast<double>(p[i]) * 255.0);
  }
  return out;
}

}  // namespace hres
