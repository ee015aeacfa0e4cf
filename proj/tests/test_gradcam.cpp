#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hres/gradcam.hpp"
#include "test_support.hpp"

using namespace hres;
using hres::testing::random_tensor;

namespace {

// One block, one channel everywhere: the last conv's map is a single plane.
Network toy_network(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.num_residual_blocks = 1;
  cfg.kernel_size = 2;
  cfg.stage_widths = {1};
  cfg.stem_width = 1;
  Network net = build_network(cfg, seed);
  net.conv("block1.shortcut").bias[0] = 5.0f;  // keeps the post-add ReLU open everywhere
  net.head_weight()[1] = 0.7f;                  // affected logit reads the single channel positively
  return net;
}

std::vector<double> bilinear_oracle(const std::vector<double>& src, std::size_t sw, std::size_t sh, std::size_t dw,
                                    std::size_t dh) {
  std::vector<double> out(dw * dh);
  for (std::size_t y = 0; y < dh; ++y) {
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = x * (sw - 1.0) / (dw - 1.0), fy = y * (sh - 1.0) / (dh - 1.0);
      const auto x0 = static_cast<std::size_t>(std::floor(fx)), y0 = static_cast<std::size_t>(std::floor(fy));
      const std::size_t x1 = std::min(x0 + 1, sw - 1), y1 = std::min(y0 + 1, sh - 1);
      const double ax = fx - x0, ay = fy - y0;
      out[y * dw + x] = (1 - ay) * ((1 - ax) * src[y0 * sw + x0] + ax * src[y0 * sw + x1]) +
                        ay * ((1 - ax) * src[y1 * sw + x0] + ax * src[y1 * sw + x1]);
    }
  }
  return out;
}

}  // namespace

TEST(SelectLayer, NamesAndErrors) {
  const Network net(ModelConfig{});
  EXPECT_EQ(select_layer(net, "last_conv"), "block4.conv3");
  EXPECT_EQ(select_layer(net, "stem"), "stem");
  EXPECT_EQ(select_layer(net, "block2.shortcut"), "block2.shortcut");
  try {
    select_layer(net, "head");
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("block4.conv3"), std::string::npos);
    EXPECT_NE(msg.find("stem"), std::string::npos);
  }
}

TEST(GradCam, SingleChannelClosedForm) {
  const Network net = toy_network(3);
  std::mt19937_64 rng(4);
  const Tensor image = random_tensor({7, 20, 20}, rng, 0.0f, 1.0f);

  GradTape tape(false);
  const auto tr = trace_forward(net, tape, tape.constant(image.reshaped({1, 7, 20, 20})));
  const Tensor& a = tape.value(tr.activations.at("block1.conv3"));
  const std::size_t h = a.dim(2), w = a.dim(3);

  // With the ReLU open everywhere, ∂z/∂A = w_head / (h·w) and the map is ReLU(α·A), α > 0.
  std::vector<double> closed(h * w);
  for (std::size_t i = 0; i < h * w; ++i) closed[i] = std::max(0.0, static_cast<double>(a[i]));
  auto up = bilinear_oracle(closed, w, h, 20, 20);
  const auto [lo, hi] = std::minmax_element(up.begin(), up.end());
  const double mn = *lo, mx = *hi;
  ASSERT_GT(mx, mn);
  for (double& v : up) v = (v - mn) / (mx - mn);

  const Heatmap heat = gradcam(net, image, kAffected);
  ASSERT_EQ(heat.values.size(), 400u);
  for (std::size_t i = 0; i < 400; ++i) ASSERT_NEAR(heat.values[i], up[i], 1e-6);

  const Heatmap raw = gradcam_raw(net, image, kAffected, "last_conv");
  const double alpha = 0.7 / static_cast<double>(h * w);
  for (std::size_t i = 0; i < h * w; ++i) ASSERT_NEAR(raw.values[i], alpha * closed[i], 1e-7);
}

TEST(GradCam, NegativeContributionsGiveZeroMap) {
  Network net = toy_network(5);
  net.head_weight()[1] = -0.7f;
  net.conv("block1.conv3").bias[0] = 10.0f;  // A > 0 everywhere, so α·A < 0 everywhere
  std::mt19937_64 rng(6);
  const Heatmap heat = gradcam(net, random_tensor({7, 12, 12}, rng, 0.0f, 1.0f), kAffected);
  for (float v : heat.values) ASSERT_EQ(v, 0.0f);
}

TEST(GradCam, RangeScaleInvarianceAndImmutability) {
  ModelConfig cfg;
  cfg.num_residual_blocks = 2;
  cfg.kernel_size = 3;
  cfg.stage_widths = {4, 6};
  cfg.stem_width = 4;
  Network net = build_network(cfg, 9);
  std::mt19937_64 rng(10);
  for (int t = 0; t < 5; ++t) {
    MultiChannelImage img(100, 100);
    img.planes = random_tensor({7, 100, 100}, rng, 0.0f, 1.0f);
    const Network before = net;
    for (std::size_t cls : {kNormal, kAffected}) {
      for (const char* layer : {"last_conv", "stem", "block1.conv2", "block2.shortcut"}) {
        const Heatmap h = gradcam(net, img, cls, layer);
        ASSERT_EQ(h.width, 100u);
        bool any = false;
        for (float v : h.values) {
          ASSERT_GE(v, 0.0f);
          ASSERT_LE(v, 1.0f);
          any = any || v > 0.0f;
        }
        if (any) {
          EXPECT_EQ(*std::max_element(h.values.begin(), h.values.end()), 1.0f);
          EXPECT_EQ(*std::min_element(h.values.begin(), h.values.end()), 0.0f);
        }
      }
    }
    EXPECT_EQ(net, before);

    const Heatmap base = gradcam(net, img, kAffected);
    Network scaled = net;
    for (float& v : scaled.head_weight().values()) v *= 3.0f;
    const Heatmap s = gradcam(scaled, img, kAffected);
    for (std::size_t i = 0; i < base.values.size(); ++i) ASSERT_NEAR(base.values[i], s.values[i], 1e-5);
  }
}

TEST(GradCam, InvalidClassRejected) {
  const Network net = toy_network(1);
  EXPECT_THROW(gradcam(net, Tensor({7, 10, 10}), 2), std::invalid_argument);
  EXPECT_THROW(gradcam(net, Tensor({7, 10, 10}), 0, "nope"), std::invalid_argument);
}

TEST(Normalize, FlatMapsBecomeZero) {
  std::vector<float> zeros(10, 0.0f), flat(10, 0.3f), ramp{0.0f, 2.0f, 4.0f};
  normalize_heatmap(zeros);
  normalize_heatmap(flat);
  normalize_heatmap(ramp);
  for (float v : zeros) EXPECT_EQ(v, 0.0f);
  for (float v : flat) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(ramp, (std::vector<float>{0.0f, 0.5f, 1.0f}));
}

TEST(Overlay, BlendRules) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<std::uint8_t> px(4 * 3 * 3);
  for (auto& p : px) p = static_cast<std::uint8_t>(d(rng));
  const RgbPatch src(4, 3, px);
  Heatmap heat{4, 3, std::vector<float>(12)};
  for (std::size_t i = 0; i < 12; ++i) heat.values[i] = static_cast<float>(i) / 11.0f;

  EXPECT_EQ(overlay(heat, src, 0.0), src);

  const Heatmap zero{4, 3, std::vector<float>(12, 0.0f)};
  const RgbPatch full = overlay(zero, src, 1.0);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(full.pixels[i * 3 + c], kJetColormap[0][c]);
  }

  const RgbPatch mid = overlay(heat, src, 0.4);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto idx = static_cast<std::size_t>(std::floor(heat.values[i] * 255.0 + 0.5));
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = 0.6 * src.pixels[i * 3 + c] + 0.4 * kJetColormap[idx][c];
      ASSERT_EQ(mid.pixels[i * 3 + c], static_cast<int>(std::floor(v + 0.5)));
    }
  }

  EXPECT_THROW(overlay(heat, src, 1.5), std::invalid_argument);
  EXPECT_THROW(overlay(heat, RgbPatch(3, 4, px), 0.5), std::invalid_argument);
}

TEST(Colormap, EndpointsRunBlueToRed) {
  EXPECT_EQ(kJetColormap[0][2], 128);
  EXPECT_EQ(kJetColormap[0][0], 0);
  EXPECT_EQ(kJetColormap[255][0], 128);
  EXPECT_EQ(kJetColormap[255][2], 0);
  EXPECT_EQ(kJetColormap[128][1], 255);
}
