#pragma once

// Reverse-mode autodiff over BasicTensor. A tape is a Wengert list: every op
// appends a node holding its value and a backward rule; backward() replays the
// rules in reverse order of execution. References returned by value()/grad()
// stay valid for the lifetime of the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hres/kernels.hpp"
#include "hres/tensor.hpp"

namespace hres {

/// Handle to a node on a tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

template <class T>
class BasicGradTape {
 public:
  using Backward = std::function<void(BasicGradTape&, Var self, const BasicTensor<T>& upstream)>;

  explicit BasicGradTape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(BasicTensor<T> value, std::string name = "input") {
    return push(std::move(name), std::move(value), false, nullptr);
  }

  Var parameter(BasicTensor<T> value, std::string name) {
    return push(std::move(name), std::move(value), recording_, nullptr);
  }

  /// Appends the result of an op. The node requires grad iff recording and any input does.
  Var record(std::string op, BasicTensor<T> value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    if (recording_) {
      for (Var v : inputs) needs = needs || node(v).requires_grad;
    }
    return push(std::move(op), std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const BasicTensor<T>& value(Var v) const { return node(v).value; }
  const std::string& op_name(Var v) const { return node(v).op; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Gradient accumulated for v; zeros when nothing flowed into it.
  const BasicTensor<T>& grad(Var v) { return grad_buffer(v); }

  /// Accumulation buffer for v, allocated on first use. Used by backward rules.
  BasicTensor<T>& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(Var root) {
    if (node(root).value.size() != 1) {
      throw std::invalid_argument("backward: root '" + node(root).op + "' is not a scalar, shape " +
                                  shape_string(node(root).value.shape()));
    }
    backward(root, BasicTensor<T>(node(root).value.shape(), T{1}));
  }

  void backward(Var root, BasicTensor<T> seed) {
    if (!recording_) throw std::logic_error("backward: tape was created without recording");
    if (seed.shape() != node(root).value.shape()) {
      throw std::invalid_argument("backward: seed shape " + shape_string(seed.shape()) + " does not match " +
                                  shape_string(node(root).value.shape()));
    }
    grad_buffer(root) = std::move(seed);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, Var{i}, n.grad);
    }
  }

  /// Throws NumericError naming the op where a non-finite value first appears:
  /// earliest forward value, else latest gradient (gradients flow backwards).
  void check_finite() const {
    for (const Node& n : nodes_) {
      if (!n.value.all_finite()) throw NumericError("non-finite value produced by '" + n.op + "'");
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->grad.empty() && !it->grad.all_finite()) {
        throw NumericError("non-finite gradient flowing into '" + it->op + "'");
      }
    }
  }

 private:
  struct Node {
    std::string op;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(std::string op, BasicTensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(op), std::move(value), {}, requires_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: invalid variable handle");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: invalid variable handle");
    return nodes_[v.id];
  }

  bool recording_;
  std::deque<Node> nodes_;  // stable references across push_back
};

using GradTape = BasicGradTape<float>;

// ---------------------------------------------------------------------------
// Differentiable ops

template <class T>
Var conv2d(BasicGradTape<T>& tape, Var x, Var w, Var b, const Conv2dSpec& spec) {
  BasicTensor<T> y = kernels::conv2d_forward(tape.value(x), tape.value(w), tape.value(b), spec);
  const Var inputs[] = {x, w, b};
  return tape.record("conv2d", std::move(y), inputs, [x, w, b, spec](BasicGradTape<T>& t, Var, const BasicTensor<T>& gy) {
    BasicTensor<T>* dx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
    BasicTensor<T>* dw = t.requires_grad(w) ? &t.grad_buffer(w) : nullptr;
    BasicTensor<T>* db = t.requires_grad(b) ? &t.grad_buffer(b) : nullptr;
    kernels::conv2d_backward(t.value(x), t.value(w), spec, gy, dx, dw, db);
  });
}

template <class T>
Var elu(BasicGradTape<T>& tape, Var x, double alpha = 1.0) {
  if (!(alpha > 0.0)) throw std::invalid_argument("elu: alpha must be > 0");
  const BasicTensor<T>& in = tape.value(x);
  BasicTensor<T> y(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    y[i] = v > T{0} ? v : static_cast<T>(alpha * std::expm1(static_cast<double>(v)));
  }
  const Var inputs[] = {x};
  return tape.record("elu", std::move(y), inputs, [x, alpha](BasicGradTape<T>& t, Var self, const BasicTensor<T>& gy) {
    const BasicTensor<T>& in = t.value(x);
    const BasicTensor<T>& out = t.value(self);
    BasicTensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const T d = in[i] > T{0} ? T{1} : static_cast<T>(static_cast<double>(out[i]) + alpha);
      gx[i] += gy[i] * d;
    }
  });
}

template <class T>
Var relu(BasicGradTape<T>& tape, Var x) {
  const BasicTensor<T>& in = tape.value(x);
  BasicTensor<T> y(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > T{0} ? in[i] : T{0};
  const Var inputs[] = {x};
  return tape.record("relu", std::move(y), inputs, [x](BasicGradTape<T>& t, Var, const BasicTensor<T>& gy) {
    const BasicTensor<T>& in = t.value(x);
    BasicTensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] > T{0}) gx[i] += gy[i];
    }
  });
}

template <class T>
Var add(BasicGradTape<T>& tape, Var a, Var b) {
  const BasicTensor<T>& va = tape.value(a);
  const BasicTensor<T>& vb = tape.value(b);
  if (va.shape() != vb.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_string(va.shape()) + " vs " + shape_string(vb.shape()));
  }
  BasicTensor<T> y(va.shape());
  for (std::size_t i = 0; i < va.size(); ++i) y[i] = va[i] + vb[i];
  const Var inputs[] = {a, b};
  return tape.record("add", std::move(y), inputs, [a, b](BasicGradTape<T>& t, Var, const BasicTensor<T>& gy) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      BasicTensor<T>& g = t.grad_buffer(v);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

/// N×C×H×W → N×C spatial mean.
template <class T>
Var global_avg_pool(BasicGradTape<T>& tape, Var x) {
  const BasicTensor<T>& in = tape.value(x);
  if (in.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be rank 4, got " + shape_string(in.shape()));
  const std::size_t n = in.dim(0), c = in.dim(1), hw = in.dim(2) * in.dim(3);
  BasicTensor<T> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const T* p = in.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) s += static_cast<double>(p[j]);
    y[i] = static_cast<T>(s / static_cast<double>(hw));
  }
  const Var inputs[] = {x};
  return tape.record("global_avg_pool", std::move(y), inputs, [x, n, c, hw](BasicGradTape<T>& t, Var, const BasicTensor<T>& gy) {
    BasicTensor<T>& gx = t.grad_buffer(x);
    const double scale = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = static_cast<T>(static_cast<double>(gy[i]) * scale);
      T* p = gx.data() + i * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] += g;
    }
  });
}

template <class T>
Var dense(BasicGradTape<T>& tape, Var x, Var w, Var b) {
  BasicTensor<T> y = kernels::dense_forward(tape.value(x), tape.value(w), tape.value(b));
  const Var inputs[] = {x, w, b};
  return tape.record("dense", std::move(y), inputs, [x, w, b](BasicGradTape<T>& t, Var, const BasicTensor<T>& gy) {
    BasicTensor<T>* dx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
    BasicTensor<T>* dw = t.requires_grad(w) ? &t.grad_buffer(w) : nullptr;
    BasicTensor<T>* db = t.requires_grad(b) ? &t.grad_buffer(b) : nullptr;
    kernels::dense_backward(t.value(x), t.value(w), gy, dx, dw, db);
  });
}

/// Row-wise softmax computed in double.
template <class T>
std::vector<double> softmax_row(std::span<const T> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (T v : logits) m = std::max(m, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    p[j] = std::exp(static_cast<double>(logits[j]) - m);
    z += p[j];
  }
  for (double& v : p) v /= z;
  return p;
}

/// -log softmax(logits)[label] for one row, computed stably in double.
template <class T>
double cross_entropy_row(std::span<const T> logits, std::size_t label) {
  double m = -std::numeric_limits<double>::infinity();
  for (T v : logits) m = std::max(m, static_cast<double>(v));
  double z = 0.0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - m);
  return std::log(z) + m - static_cast<double>(logits[label]);
}

/// Mean cross-entropy of N×K logits against class indices; returns a 1-element node.
template <class T>
Var softmax_cross_entropy(BasicGradTape<T>& tape, Var logits, std::span<const std::size_t> labels) {
  const BasicTensor<T>& z = tape.value(logits);
  if (z.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be rank 2, got " + shape_string(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels.size() != n) {
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                                  std::to_string(i) + " is outside [0," + std::to_string(k) + ")");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cross_entropy_row(std::span<const T>(z.data() + i * k, k), labels[i]);
  BasicTensor<T> loss({1}, static_cast<T>(total / static_cast<double>(n)));
  std::vector<std::size_t> kept(labels.begin(), labels.end());
  const Var inputs[] = {logits};
  return tape.record("softmax_cross_entropy", std::move(loss), inputs,
                     [logits, kept = std::move(kept), n, k](BasicGradTape<T>& t, Var, const BasicTensor<T>& gy) {
                       const BasicTensor<T>& z = t.value(logits);
                       BasicTensor<T>& gz = t.grad_buffer(logits);
                       const double up = static_cast<double>(gy[0]) / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                         const auto p = softmax_row(std::span<const T>(z.data() + i * k, k));
                         for (std::size_t j = 0; j < k; ++j) {
                           const double onehot = j == kept[i] ? 1.0 : 0.0;
                           gz[i * k + j] += static_cast<T>((p[j] - onehot) * up);
                         }
                       }
                     });
}

}  // namespace hres
