#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hres/grad_check.hpp"
#include "hres/model.hpp"
#include "hres/tape.hpp"
#include "test_support.hpp"

using namespace hres;
using hres::testing::finite_difference;
using hres::testing::naive_conv2d;
using hres::testing::random_tensor;
using hres::testing::random_tensor_t;
using hres::testing::relative_error;

namespace {

Tensor run_conv(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& spec) {
  GradTape tape(false);
  const Var y = conv2d(tape, tape.constant(x), tape.constant(w), tape.constant(b), spec);
  return tape.value(y);
}

}  // namespace

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
}

TEST(Conv2dTest, IdentityKernel) {
  Tensor x({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Conv2dSpec spec{1, 1, 1, 1, {}};
  const Tensor y = run_conv(x, Tensor({1, 1, 1, 1}, 1.0f), Tensor({1}), spec);
  EXPECT_EQ(y, x);
}

TEST(Conv2dTest, DiagonalKernelDirectSum) {
  Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor w({1, 1, 2, 2}, std::vector<float>{1, 0, 0, 1});
  Conv2dSpec spec{2, 1, 1, 1, {}};
  const Tensor y = run_conv(x, w, Tensor({1}), spec);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y[0], 5.0f);
  EXPECT_FLOAT_EQ(naive_conv2d(x, w, Tensor({1}), spec)[0], 5.0f);
}

TEST(Conv2dTest, ParameterCountMatchesKernelFormula) {
  Conv2dSpec spec{4, 7, 32, 1, {}};
  EXPECT_EQ(spec.weight_count(), 3584u);
  EXPECT_EQ(spec.parameter_count(), 3584u + 32u);
  for (std::size_t k = 2; k <= 7; ++k) {
    for (std::size_t fin : {1u, 3u, 7u}) {
      for (std::size_t fout : {1u, 8u, 64u}) {
        Conv2dSpec s{k, fin, fout, 1, {}};
        EXPECT_EQ(s.weight_count(), k * k * fin * fout);
        EXPECT_EQ(s.bias_count(), fout);
      }
    }
  }
}

TEST(Conv2dTest, OutputSizeFormula) {
  Conv2dSpec s{4, 1, 1, 2, {1, 1, 1, 1}};
  EXPECT_EQ(s.out_height(100), (100 + 2 - 4) / 2 + 1);
  const Padding p = same_padding(100, 100, 4, 2);
  Conv2dSpec same{4, 1, 1, 2, p};
  EXPECT_EQ(same.out_height(100), 50u);
  const Padding p1 = same_padding(25, 25, 4, 1);
  EXPECT_EQ(p1.top + p1.bottom, 3u);
  EXPECT_EQ(p1.top, 1u);
}

TEST(Conv2dTest, MatchesNaiveOracleOnRandomShapes) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> nd(1, 2), cd(1, 8), hd(4, 16), kd(1, 5), sd(1, 3), pd(0, 3);
  for (int trial = 0; trial < 40; ++trial) {
    Conv2dSpec spec;
    spec.kernel = kd(rng);
    spec.in_channels = cd(rng);
    spec.out_channels = cd(rng);
    spec.stride = sd(rng);
    spec.padding = {pd(rng), pd(rng), pd(rng), pd(rng)};
    const std::size_t h = std::max(hd(rng), spec.kernel), w = std::max(hd(rng), spec.kernel);
    const Tensor x = random_tensor({nd(rng), spec.in_channels, h, w}, rng);
    const Tensor wt = random_tensor(spec.weight_shape(), rng);
    const Tensor b = random_tensor({spec.out_channels}, rng);
    const Tensor got = run_conv(x, wt, b, spec);
    const Tensor want = naive_conv2d(x, wt, b, spec);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(hres::testing::max_abs_diff(got, want), 1e-5) << "trial " << trial;
  }
}

TEST(Conv2dTest, RejectsShapeMismatchNamingDimension) {
  Conv2dSpec spec{3, 2, 4, 1, {}};
  GradTape tape(false);
  const Var x = tape.constant(Tensor({1, 3, 8, 8}));
  const Var w = tape.constant(Tensor(spec.weight_shape()));
  const Var b = tape.constant(Tensor({4}));
  try {
    conv2d(tape, x, w, b, spec);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
  const Var x2 = tape.constant(Tensor({1, 2, 2, 8}));
  try {
    conv2d(tape, x2, w, b, spec);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos) << e.what();
  }
  const Var bad_w = tape.constant(Tensor({4, 2, 2, 2}));
  EXPECT_THROW(conv2d(tape, tape.constant(Tensor({1, 2, 8, 8})), bad_w, b, spec), std::invalid_argument);
}

TEST(Conv2dTest, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Conv2dSpec spec{3, 2, 3, 2, {1, 1, 1, 1}};
  const auto x = random_tensor_t<double>({2, 2, 7, 6}, rng);
  const auto w = random_tensor_t<double>(spec.weight_shape(), rng);
  const auto b = random_tensor_t<double>({3}, rng);
  const auto probe = random_tensor_t<double>({2, 3, 4, 3}, rng);  // loss = <probe, conv(x)>

  auto loss = [&](const BasicTensor<double>& xi, const BasicTensor<double>& wi, const BasicTensor<double>& bi) {
    BasicGradTape<double> t(false);
    const auto y = t.value(conv2d(t, t.constant(xi), t.constant(wi), t.constant(bi), spec));
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };

  BasicGradTape<double> tape;
  const Var vx = tape.parameter(x, "x"), vw = tape.parameter(w, "w"), vb = tape.parameter(b, "b");
  const Var y = conv2d(tape, vx, vw, vb, spec);
  tape.backward(y, probe);

  const auto gx = finite_difference<double>(x, [&](const auto& v) { return loss(v, w, b); }, 1e-6);
  const auto gw = finite_difference<double>(w, [&](const auto& v) { return loss(x, v, b); }, 1e-6);
  const auto gb = finite_difference<double>(b, [&](const auto& v) { return loss(x, w, v); }, 1e-6);
  for (std::size_t i = 0; i < gx.size(); ++i) EXPECT_LT(relative_error(tape.grad(vx)[i], gx[i]), 1e-6);
  for (std::size_t i = 0; i < gw.size(); ++i) EXPECT_LT(relative_error(tape.grad(vw)[i], gw[i]), 1e-6);
  for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_LT(relative_error(tape.grad(vb)[i], gb[i]), 1e-6);
}

TEST(EluTest, Values) {
  GradTape tape(false);
  const Var y = elu(tape, tape.constant(Tensor({3}, std::vector<float>{0.0f, 1.0f, -1.0f})), 1.0);
  EXPECT_EQ(tape.value(y)[0], 0.0f);
  EXPECT_EQ(tape.value(y)[1], 1.0f);
  EXPECT_NEAR(tape.value(y)[2], std::exp(-1.0) - 1.0, 1e-7);
  EXPECT_NEAR(tape.value(y)[2], -0.6321, 1e-4);
  EXPECT_THROW(elu(tape, y, 0.0), std::invalid_argument);
}

TEST(EluTest, GradientIsOutputPlusAlphaOnNegativeSide) {
  BasicGradTape<double> tape;
  const Var x = tape.parameter(BasicTensor<double>({3}, std::vector<double>{-2.0, -0.5, 3.0}), "x");
  const Var y = elu(tape, x, 0.7);
  tape.backward(y, BasicTensor<double>({3}, 1.0));
  const auto g = tape.grad(x);
  EXPECT_NEAR(g[0], 0.7 * std::exp(-2.0), 1e-12);
  EXPECT_NEAR(g[1], 0.7 * std::exp(-0.5), 1e-12);
  EXPECT_EQ(g[2], 1.0);
}

TEST(ReluTest, ValuesAndGradient) {
  GradTape tape;
  const Var x = tape.parameter(Tensor({3}, std::vector<float>{-1, 0, 2}), "x");
  const Var y = relu(tape, x);
  EXPECT_EQ(tape.value(y), Tensor({3}, std::vector<float>({0, 0, 2})));
  tape.backward(y, Tensor({3}, 1.0f));
  // Subgradient at exactly 0 is 0.
  EXPECT_EQ(tape.grad(x), Tensor({3}, std::vector<float>({0, 0, 1})));

  GradTape t2(false);
  const Var neg = relu(t2, t2.constant(Tensor({2, 2}, -3.0f)));
  EXPECT_EQ(t2.value(neg), Tensor({2, 2}, 0.0f));
}

TEST(ReluTest, GradientOfSumMatchesFiniteDifference) {
  BasicTensor<double> x({2}, std::vector<double>{-1.0, 2.0});
  BasicGradTape<double> tape;
  const Var v = tape.parameter(x, "x");
  tape.backward(relu(tape, v), BasicTensor<double>({2}, 1.0));
  const auto fd = finite_difference<double>(
      x,
      [](const BasicTensor<double>& t) {
        double s = 0;
        for (double e : t.values()) s += std::max(e, 0.0);
        return s;
      },
      1e-4);
  EXPECT_NEAR(tape.grad(v)[0], 0.0, 1e-12);
  EXPECT_NEAR(tape.grad(v)[1], 1.0, 1e-12);
  EXPECT_NEAR(fd[0], 0.0, 1e-9);
  EXPECT_NEAR(fd[1], 1.0, 1e-9);
}

TEST(AddTest, ValuesGradientAndErrors) {
  GradTape tape;
  const Var a = tape.parameter(Tensor({2}, std::vector<float>{1, 2}), "a");
  const Var b = tape.parameter(Tensor({2}, std::vector<float>{3, 4}), "b");
  const Var y = add(tape, a, b);
  EXPECT_EQ(tape.value(y), Tensor({2}, std::vector<float>({4, 6})));
  tape.backward(y, Tensor({2}, 1.0f));
  EXPECT_EQ(tape.grad(a), Tensor({2}, 1.0f));
  EXPECT_EQ(tape.grad(b), Tensor({2}, 1.0f));

  const Var z = tape.constant(Tensor({2}));
  EXPECT_EQ(tape.value(add(tape, a, z)), tape.value(a));
  EXPECT_THROW(add(tape, a, tape.constant(Tensor({3}))), std::invalid_argument);
}

TEST(GlobalAvgPoolTest, ValuesAndGradient) {
  GradTape tape;
  const Var x = tape.parameter(Tensor({1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, 7, 7, 7, 7}), "x");
  const Var y = global_avg_pool(tape, x);
  EXPECT_FLOAT_EQ(tape.value(y)[0], 2.5f);
  EXPECT_FLOAT_EQ(tape.value(y)[1], 7.0f);
  tape.backward(y, Tensor({1, 2}, 1.0f));
  for (float g : tape.grad(x).values()) EXPECT_FLOAT_EQ(g, 0.25f);

  BasicTensor<double> xd({1, 1, 3, 5});
  std::mt19937_64 rng(2);
  xd = random_tensor_t<double>({1, 1, 3, 5}, rng);
  const auto fd = finite_difference<double>(
      xd,
      [](const BasicTensor<double>& t) {
        BasicGradTape<double> tp(false);
        return tp.value(global_avg_pool(tp, tp.constant(t)))[0];
      },
      1e-5);
  for (double g : fd) EXPECT_NEAR(g, 1.0 / 15.0, 1e-9);
}

TEST(DenseTest, ValuesAndErrors) {
  GradTape tape(false);
  const Var x = tape.constant(Tensor({1, 2}, std::vector<float>{1, 2}));
  const Var w = tape.constant(Tensor({2, 1}, std::vector<float>{1, 1}));
  const Var b = tape.constant(Tensor({1}, 0.5f));
  EXPECT_FLOAT_EQ(tape.value(dense(tape, x, w, b))[0], 3.5f);

  const Var eye = tape.constant(Tensor({2, 2}, std::vector<float>{1, 0, 0, 1}));
  EXPECT_EQ(tape.value(dense(tape, x, eye, tape.constant(Tensor({2})))), tape.value(x));
  EXPECT_THROW(dense(tape, x, tape.constant(Tensor({3, 1})), b), std::invalid_argument);
}

TEST(DenseTest, GradientCheck) {
  std::mt19937_64 rng(9);
  Fragment<double> f;
  f.names = {"w", "b"};
  f.params = {random_tensor_t<double>({4, 3}, rng), random_tensor_t<double>({3}, rng)};
  const std::vector<std::size_t> labels = {0, 2};
  f.loss = [&](BasicGradTape<double>& t, Var in, std::span<const Var> p) {
    return softmax_cross_entropy(t, dense(t, in, p[0], p[1]), labels);
  };
  const auto report = grad_check(f, random_tensor_t<double>({2, 4}, rng), 1e-3);
  EXPECT_LT(report.max_relative_error, 1e-5) << report.worst_parameter;
  EXPECT_EQ(report.checked, 15u);
}

TEST(SoftmaxCrossEntropyTest, Values) {
  GradTape tape(false);
  const std::vector<std::size_t> one = {1};
  const Var eq = softmax_cross_entropy(tape, tape.constant(Tensor({1, 2}, 0.3f)), one);
  EXPECT_NEAR(tape.value(eq)[0], std::log(2.0), 1e-7);
  const Var sat = softmax_cross_entropy(tape, tape.constant(Tensor({1, 2}, std::vector<float>{0, 50})), one);
  EXPECT_LT(tape.value(sat)[0], 1e-8);
  const std::vector<std::size_t> bad = {2};
  EXPECT_THROW(softmax_cross_entropy(tape, tape.constant(Tensor({1, 2})), bad), std::invalid_argument);
}

TEST(SoftmaxCrossEntropyTest, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(4);
  const auto logits = random_tensor_t<double>({3, 2}, rng, -3, 3);
  const std::vector<std::size_t> labels = {0, 1, 1};
  BasicGradTape<double> tape;
  const Var z = tape.parameter(logits, "z");
  tape.backward(softmax_cross_entropy(tape, z, labels));
  const auto fd = finite_difference<double>(
      logits,
      [&](const BasicTensor<double>& t) {
        BasicGradTape<double> tp(false);
        return tp.value(softmax_cross_entropy(tp, tp.constant(t), labels))[0];
      },
      1e-5);
  for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_LT(relative_error(tape.grad(z)[i], fd[i]), 1e-4);
}

TEST(GradCheckTest, LinearLayer) {
  std::mt19937_64 rng(21);
  Fragment<double> f;
  f.names = {"w", "b"};
  f.params = {random_tensor_t<double>({5, 2}, rng), random_tensor_t<double>({2}, rng)};
  f.loss = [](BasicGradTape<double>& t, Var in, std::span<const Var> p) {
    const std::vector<std::size_t> labels = {1, 0, 1};
    return softmax_cross_entropy(t, dense(t, in, p[0], p[1]), labels);
  };
  EXPECT_LT(grad_check(f, random_tensor_t<double>({3, 5}, rng), 1e-3).max_relative_error, 1e-5);
  EXPECT_THROW(grad_check(f, random_tensor_t<double>({3, 5}, rng), 0.1), std::invalid_argument);
}

TEST(GradCheckTest, ConvPlusRelu) {
  std::mt19937_64 rng(22);
  Conv2dSpec spec{3, 2, 3, 1, {1, 1, 1, 1}};
  Fragment<double> f;
  f.names = {"w", "b"};
  f.params = {random_tensor_t<double>(spec.weight_shape(), rng), random_tensor_t<double>({3}, rng)};
  auto input = random_tensor_t<double>({1, 2, 5, 5}, rng);
  // Keep every pre-activation well away from the ReLU kink.
  {
    BasicGradTape<double> t(false);
    const auto pre = t.value(conv2d(t, t.constant(input), t.constant(f.params[0]), t.constant(f.params[1]), spec));
    for (std::size_t o = 0; o < 3; ++o) {
      double nearest = 1e9;
      for (std::size_t j = 0; j < 25; ++j) nearest = std::min(nearest, std::abs(pre[o * 25 + j]));
      if (nearest < 0.05) f.params[1][o] += 0.1;
    }
  }
  f.loss = [spec](BasicGradTape<double>& t, Var in, std::span<const Var> p) {
    const Var h = relu(t, conv2d(t, in, p[0], p[1], spec));
    const Var pooled = global_avg_pool(t, h);
    const std::vector<std::size_t> labels = {1};
    BasicTensor<double> w({3, 2}, std::vector<double>{0.5, -0.3, 0.2, 0.9, -0.7, 0.1});
    return softmax_cross_entropy(t, dense(t, pooled, t.constant(w), t.constant(BasicTensor<double>({2}))), labels);
  };
  EXPECT_LT(grad_check(f, input, 1e-3).max_relative_error, 1e-3);
}

TEST(GradCheckTest, TinyResidualBlock) {
  ModelConfig cfg;
  cfg.num_residual_blocks = 1;
  cfg.kernel_size = 2;
  cfg.stage_widths = {3};
  cfg.stem_width = 2;
  const auto net = build_network(cfg, 3).cast<double>();
  std::mt19937_64 rng(8);
  const auto input = random_tensor_t<double>({1, 7, 6, 6}, rng);
  const auto report = grad_check(network_fragment(net, {1}), input, 1e-3);
  EXPECT_LT(report.max_relative_error, 1e-3) << report.worst_parameter << "[" << report.worst_index << "]";
  EXPECT_EQ(report.checked, net.parameter_count());
}

TEST(GradCheckTest, ReportsNonFiniteWithOperationName) {
  Fragment<double> f;
  f.names = {"x"};
  f.params = {BasicTensor<double>({1, 1, 1, 1}, 800.0)};
  f.loss = [](BasicGradTape<double>& t, Var, std::span<const Var> p) {
    // 800 * 1e306 overflows the dense output.
    const Var pooled = global_avg_pool(t, p[0]);
    BasicTensor<double> w({1, 2}, std::vector<double>{1e306, -1e306});
    const std::vector<std::size_t> labels = {0};
    return softmax_cross_entropy(t, dense(t, pooled, t.constant(w), t.constant(BasicTensor<double>({2}))), labels);
  };
  try {
    grad_check(f, BasicTensor<double>({1}), 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("dense"), std::string::npos) << e.what();
  }
}

TEST(PropertyTest, ElementwiseOpsPreserveShape) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> d(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape shape = {d(rng), d(rng), d(rng), d(rng)};
    GradTape tape(false);
    const Var a = tape.constant(random_tensor(shape, rng));
    const Var b = tape.constant(random_tensor(shape, rng));
    EXPECT_EQ(tape.value(add(tape, a, b)).shape(), shape);
    EXPECT_EQ(tape.value(relu(tape, a)).shape(), shape);
    EXPECT_EQ(tape.value(elu(tape, a)).shape(), shape);
    EXPECT_EQ(tape.value(global_avg_pool(tape, a)).shape(), (Shape{shape[0], shape[1]}));
  }
}

TEST(PropertyTest, ForwardAndBackwardAreBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(1234);
    Conv2dSpec spec{3, 3, 4, 2, {1, 1, 1, 1}};
    GradTape tape;
    const Var x = tape.parameter(random_tensor({2, 3, 9, 9}, rng), "x");
    const Var w = tape.parameter(random_tensor(spec.weight_shape(), rng), "w");
    const Var b = tape.parameter(random_tensor({4}, rng), "b");
    const Var h = elu(tape, conv2d(tape, x, w, b, spec));
    const Var p = global_avg_pool(tape, relu(tape, add(tape, h, h)));
    const std::vector<std::size_t> labels = {0, 3};
    const Var loss = softmax_cross_entropy(tape, p, labels);
    tape.backward(loss);
    return std::vector<Tensor>{tape.value(loss), tape.grad(x), tape.grad(w), tape.grad(b)};
  };
  EXPECT_EQ(run(), run());
}
