#pragma once

// Residual classifier: stem conv → N residual blocks → global average pool →
// dense head. Each block runs three serial ELU convolutions (the first with
// stride 2) next to a stride-2 shortcut convolution without activation, adds
// the two paths and applies ReLU.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <array>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/grad_check.hpp"
#include "hres/imageproc.hpp"
#include "hres/tape.hpp"
#include "hres/tensor.hpp"

namespace hres {

inline constexpr std::size_t kNormal = 0;
inline constexpr std::size_t kAffected = 1;

struct ModelConfig {
  std::size_t num_residual_blocks = 4;
  std::size_t kernel_size = 4;
  std::vector<std::size_t> stage_widths = {32, 64, 128, 256};
  std::size_t stem_width = 32;
  /// 0 means "same as kernel_size".
  std::size_t shortcut_kernel = 0;
  std::size_t num_classes = 2;
  double elu_alpha = 1.0;
  std::size_t in_channels = kNumPlanes;

  std::size_t effective_shortcut_kernel() const { return shortcut_kernel == 0 ? kernel_size : shortcut_kernel; }

  /// 32, 64, 128, ... doubling per block.
  static std::vector<std::size_t> default_widths(std::size_t blocks) {
    std::vector<std::size_t> w;
    for (std::size_t i = 0; i < blocks; ++i) w.push_back(std::size_t{32} << i);
    return w;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (num_residual_blocks < 1 || num_residual_blocks > 5) {
      fail("num_residual_blocks=" + std::to_string(num_residual_blocks) + " outside [1,5]");
    }
    if (kernel_size < 2 || kernel_size > 7) fail("kernel_size=" + std::to_string(kernel_size) + " outside [2,7]");
    if (stage_widths.size() != num_residual_blocks) {
      fail("stage_widths has " + std::to_string(stage_widths.size()) + " entries, expected " +
           std::to_string(num_residual_blocks));
    }
    for (std::size_t w : stage_widths) {
      if (w < 1) fail("stage widths must be >= 1");
    }
    if (stem_width < 1) fail("stem_width must be >= 1");
    if (shortcut_kernel > 7) fail("shortcut_kernel=" + std::to_string(shortcut_kernel) + " outside [0,7]");
    if (num_classes != 2) fail("num_classes must be 2");
    if (!(elu_alpha > 0.0)) fail("elu_alpha must be > 0");
    if (in_channels != kNumPlanes) fail("in_channels must be 7");
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "model.blocks=" << num_residual_blocks << '\n' << "model.kernel=" << kernel_size << '\n' << "model.widths=";
    for (std::size_t i = 0; i < stage_widths.size(); ++i) os << (i ? "," : "") << stage_widths[i];
    os << '\n'
       << "model.stem_width=" << stem_width << '\n'
       << "model.shortcut_kernel=" << shortcut_kernel << '\n'
       << "model.elu_alpha=" << elu_alpha << '\n';
    return os.str();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ConvRole { stem, serial, shortcut };

template <class T>
struct ConvLayer {
  std::string name;
  ConvRole role = ConvRole::serial;
  std::size_t kernel = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride = 1;
  bool activated = true;  // ELU after the convolution
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Conv2dSpec spec_for(std::size_t in_h, std::size_t in_w) const {
    return Conv2dSpec{kernel, in_channels, out_channels, stride, same_padding(in_h, in_w, kernel, stride)};
  }
};

template <class T>
struct NamedParam {
  std::string name;
  BasicTensor<T>* tensor;
};

template <class T>
class BasicNetwork {
 public:
  BasicNetwork() = default;

  /// Allocates zero-valued parameters for cfg.
  explicit BasicNetwork(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    auto push = [&](std::string name, ConvRole role, std::size_t k, std::size_t in, std::size_t out, std::size_t stride,
                    bool act) {
      ConvLayer<T> l;
      l.name = std::move(name);
      l.role = role;
      l.kernel = k;
      l.in_channels = in;
      l.out_channels = out;
      l.stride = stride;
      l.activated = act;
      l.weight = BasicTensor<T>({out, in, k, k});
      l.bias = BasicTensor<T>({out});
      convs_.push_back(std::move(l));
    };
    const std::size_t k = cfg_.kernel_size;
    push("stem", ConvRole::stem, k, cfg_.in_channels, cfg_.stem_width, 1, true);
    std::size_t width = cfg_.stem_width;
    for (std::size_t b = 0; b < cfg_.num_residual_blocks; ++b) {
      const std::string prefix = "block" + std::to_string(b + 1) + ".";
      const std::size_t out = cfg_.stage_widths[b];
      push(prefix + "conv1", ConvRole::serial, k, width, out, 2, true);
      push(prefix + "conv2", ConvRole::serial, k, out, out, 1, true);
      push(prefix + "conv3", ConvRole::serial, k, out, out, 1, true);
      push(prefix + "shortcut", ConvRole::shortcut, cfg_.effective_shortcut_kernel(), width, out, 2, false);
      width = out;
    }
    head_weight_ = BasicTensor<T>({width, cfg_.num_classes});
    head_bias_ = BasicTensor<T>({cfg_.num_classes});
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<ConvLayer<T>>& convs() noexcept { return convs_; }
  const std::vector<ConvLayer<T>>& convs() const noexcept { return convs_; }
  BasicTensor<T>& head_weight() noexcept { return head_weight_; }
  const BasicTensor<T>& head_weight() const noexcept { return head_weight_; }
  BasicTensor<T>& head_bias() noexcept { return head_bias_; }
  const BasicTensor<T>& head_bias() const noexcept { return head_bias_; }

  ConvLayer<T>& conv(const std::string& name) { return find_conv(*this, name); }
  const ConvLayer<T>& conv(const std::string& name) const { return find_conv(*this, name); }

  /// Parameters in their canonical order (serialization, optimizer state).
  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    visit_params(*this, [&](std::string name, BasicTensor<T>& t) { out.push_back({std::move(name), &t}); });
    return out;
  }

  std::vector<std::pair<std::string, BasicTensor<T>>> snapshot() const {
    std::vector<std::pair<std::string, BasicTensor<T>>> out;
    visit_params(*this, [&](std::string name, const BasicTensor<T>& t) { out.emplace_back(std::move(name), t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_params(*this, [&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
  }

  template <class U>
  BasicNetwork<U> cast() const {
    BasicNetwork<U> out(cfg_);
    auto dst = out.parameters();
    std::size_t i = 0;
    visit_params(*this, [&](const std::string&, const BasicTensor<T>& t) { *dst[i++].tensor = t.template cast<U>(); });
    return out;
  }

  friend bool operator==(const BasicNetwork& a, const BasicNetwork& b) {
    return a.cfg_ == b.cfg_ && a.snapshot() == b.snapshot();
  }

 private:
  template <class Self, class F>
  static void visit_params(Self& self, F&& f) {
    for (auto& l : self.convs_) {
      f(l.name + ".weight", l.weight);
      f(l.name + ".bias", l.bias);
    }
    f(std::string("head.weight"), self.head_weight_);
    f(std::string("head.bias"), self.head_bias_);
  }

  template <class Self>
  static auto& find_conv(Self& self, const std::string& name) {
    for (auto& l : self.convs_) {
      if (l.name == name) return l;
    }
    throw std::invalid_argument("network has no convolution named '" + name + "'");
  }

  ModelConfig cfg_;
  std::vector<ConvLayer<T>> convs_;
  BasicTensor<T> head_weight_;
  BasicTensor<T> head_bias_;
};

using Network = BasicNetwork<float>;

/// Standard normal draws via Box–Muller over mt19937_64, so the stream is
/// identical across standard libraries.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

 private:
  double uniform_open() { return (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53; }

  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Builds the network with He-normal weights (std = sqrt(2 / fan_in)) and zero biases.
inline Network build_network(const ModelConfig& cfg, std::uint64_t seed) {
  Network net(cfg);
  NormalStream normal(seed);
  for (auto& l : net.convs()) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(l.in_channels * l.kernel * l.kernel));
    for (float& w : l.weight.values()) w = static_cast<float>(normal.next() * std_dev);
  }
  const double head_std = std::sqrt(2.0 / static_cast<double>(net.head_weight().dim(0)));
  for (float& w : net.head_weight().values()) w = static_cast<float>(normal.next() * head_std);
  return net;
}

/// Handles produced by one traced forward pass.
struct ForwardTrace {
  Var input;
  Var logits;
  std::vector<Var> params;                // same order as Network::parameters()
  std::map<std::string, Var> activations;  // conv layer name → its (activated) output
};

/// Pushes the network's parameters onto the tape, in canonical order.
template <class T>
std::vector<Var> push_parameters(const BasicNetwork<T>& net, BasicGradTape<T>& tape) {
  std::vector<Var> out;
  for (auto& [name, tensor] : net.snapshot()) out.push_back(tape.parameter(std::move(tensor), name));
  return out;
}

/// Records the forward graph using `params` (canonical order) as the weights;
/// `net` only supplies the architecture.
template <class T>
ForwardTrace trace_forward(const BasicNetwork<T>& net, BasicGradTape<T>& tape, Var input, std::span<const Var> params) {
  const BasicTensor<T>& x = tape.value(input);
  if (x.rank() != 4) throw std::invalid_argument("forward: batch must be rank 4 (Nx7xHxW), got " + shape_string(x.shape()));
  if (x.dim(1) != net.config().in_channels) {
    throw std::invalid_argument("forward: batch has " + std::to_string(x.dim(1)) + " channels, expected " +
                                std::to_string(net.config().in_channels));
  }
  const std::size_t nconv = net.convs().size();
  if (params.size() != 2 * nconv + 2) throw std::invalid_argument("forward: wrong number of parameter nodes");
  ForwardTrace tr;
  tr.input = input;
  tr.params.assign(params.begin(), params.end());
  const Var hw = params[2 * nconv];
  const Var hb = params[2 * nconv + 1];

  const double alpha = net.config().elu_alpha;
  auto apply = [&](std::size_t idx, Var in) {
    const auto& l = net.convs()[idx];
    const auto& s = tape.value(in).shape();
    Var out = conv2d(tape, in, params[2 * idx], params[2 * idx + 1], l.spec_for(s[2], s[3]));
    if (l.activated) out = elu(tape, out, alpha);
    tr.activations[l.name] = out;
    return out;
  };

  Var h = apply(0, input);
  for (std::size_t b = 0; b < net.config().num_residual_blocks; ++b) {
    const std::size_t base = 1 + 4 * b;
    const Var a1 = apply(base, h);
    const Var a2 = apply(base + 1, a1);
    const Var a3 = apply(base + 2, a2);
    const Var sc = apply(base + 3, h);
    h = relu(tape, add(tape, a3, sc));
  }
  const Var pooled = global_avg_pool(tape, h);
  tr.logits = dense(tape, pooled, hw, hb);
  return tr;
}

template <class T>
ForwardTrace trace_forward(const BasicNetwork<T>& net, BasicGradTape<T>& tape, Var input) {
  const auto params = push_parameters(net, tape);
  return trace_forward(net, tape, input, params);
}

/// Inference-only forward: N×7×H×W → N×2 logits.
template <class T>
BasicTensor<T> forward(const BasicNetwork<T>& net, const BasicTensor<T>& batch) {
  BasicGradTape<T> tape(false);
  const auto tr = trace_forward(net, tape, tape.constant(batch));
  return tape.value(tr.logits);
}

/// Softmax probabilities [normal, affected] for a single C×H×W image.
template <class T>
std::array<double, 2> predict_proba(const BasicNetwork<T>& net, const BasicTensor<T>& image) {
  if (image.rank() != 3) throw std::invalid_argument("predict_proba: image must be rank 3 (CxHxW)");
  const auto logits = forward(net, image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}));
  const auto p = softmax_row(logits.values());
  return {p[0], p[1]};
}

inline std::array<double, 2> predict_proba(const Network& net, const MultiChannelImage& image) {
  if (image.width != kPatchSize || image.height != kPatchSize) {
    throw std::invalid_argument("predict_proba: expected a 100x100x7 image");
  }
  return predict_proba(net, image.planes);
}

/// Ties resolve to class 0 (normal).
inline std::size_t predicted_class(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

/// Loss fragment over the whole network for grad_check.
template <class T>
Fragment<T> network_fragment(const BasicNetwork<T>& net, std::vector<std::size_t> labels) {
  Fragment<T> f;
  for (auto& [name, tensor] : net.snapshot()) {
    f.names.push_back(name);
    f.params.push_back(tensor);
  }
  f.loss = [net, labels = std::move(labels)](BasicGradTape<T>& tape, Var input, std::span<const Var> params) {
    const auto tr = trace_forward(net, tape, input, params);
    return softmax_cross_entropy(tape, tr.logits, labels);
  };
  return f;
}

// ---------------------------------------------------------------------------
// Complexity summary

struct LayerCost {
  std::string name;
  std::size_t kernel = 0;
  std::size_t f_in = 0;
  std::size_t f_out = 0;
  std::size_t d_in = 0;
  std::uint64_t rho = 0;    // k·k·f_in·f_out
  std::uint64_t kappa = 0;  // rho·d_in²
  std::uint64_t bias = 0;
};

struct LayerSummary {
  std::vector<LayerCost> layers;
  std::uint64_t total_rho = 0;
  std::uint64_t total_kappa = 0;
  std::uint64_t total_bias = 0;
  std::uint64_t total_parameters = 0;
};

/// Per-layer parameter complexity and computational cost for a square input of
/// side input_spatial. The dense head is reported as a 1×1 layer on a 1×1 map.
inline LayerSummary summarize(const ModelConfig& cfg, std::size_t input_spatial) {
  cfg.validate();
  const Network shape_only(cfg);
  LayerSummary s;
  auto add_row = [&](std::string name, std::size_t k, std::size_t fin, std::size_t fout, std::size_t d) {
    LayerCost c{std::move(name), k, fin, fout, d};
    c.rho = static_cast<std::uint64_t>(k) * k * fin * fout;
    c.kappa = c.rho * d * d;
    c.bias = fout;
    s.total_rho += c.rho;
    s.total_kappa += c.kappa;
    s.total_bias += c.bias;
    s.layers.push_back(std::move(c));
  };
  std::size_t d = input_spatial;
  const auto& convs = shape_only.convs();
  add_row(convs[0].name, convs[0].kernel, convs[0].in_channels, convs[0].out_channels, d);
  for (std::size_t b = 0; b < cfg.num_residual_blocks; ++b) {
    const std::size_t base = 1 + 4 * b;
    const std::size_t down = (d + 1) / 2;
    const auto& c1 = convs[base];
    const auto& c2 = convs[base + 1];
    const auto& c3 = convs[base + 2];
    const auto& sc = convs[base + 3];
    add_row(c1.name, c1.kernel, c1.in_channels, c1.out_channels, d);
    add_row(c2.name, c2.kernel, c2.in_channels, c2.out_channels, down);
    add_row(c3.name, c3.kernel, c3.in_channels, c3.out_channels, down);
    add_row(sc.name, sc.kernel, sc.in_channels, sc.out_channels, d);
    d = down;
  }
  add_row("head", 1, shape_only.head_weight().dim(0), shape_only.head_weight().dim(1), 1);
  s.total_parameters = s.total_rho + s.total_bias;
  return s;
}

}  // namespace hres
