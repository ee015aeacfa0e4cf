#pragma once

// Dataset splitting, RMSprop, early stopping and the epoch loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hres/model.hpp"
#include "hres/tape.hpp"
#include "hres/tensor.hpp"

namespace hres {

// ---------------------------------------------------------------------------
// Splits

/// `train` counts the whole training pool; `val` is carved out of it.
struct SplitSpec {
  std::size_t total = 0;
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
  std::uint64_t seed = 0;

  /// test = round(total·test_fraction); val = round(train·val_fraction).
  static SplitSpec from_fractions(std::size_t total, double test_fraction, double val_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("split: test fraction must be in (0,1)");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("split: val fraction must be in (0,1)");
    SplitSpec s;
    s.total = total;
    s.test = static_cast<std::size_t>(std::llround(static_cast<double>(total) * test_fraction));
    s.train = total - s.test;
    s.val = static_cast<std::size_t>(std::llround(static_cast<double>(s.train) * val_fraction));
    s.seed = seed;
    return s;
  }
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Fisher–Yates driven by mt19937_64, so the permutation is identical across
/// standard libraries (std::shuffle is not).
inline void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Shuffles indices, then takes test first, validation next and the rest as training.
inline Splits split_dataset(std::span<const std::size_t> labels, const SplitSpec& spec) {
  if (spec.total != labels.size()) {
    throw std::invalid_argument("split: spec total " + std::to_string(spec.total) + " does not match " +
                                std::to_string(labels.size()) + " labels");
  }
  if (spec.train + spec.test != spec.total) {
    throw std::invalid_argument("split: train " + std::to_string(spec.train) + " + test " + std::to_string(spec.test) +
                                " != total " + std::to_string(spec.total));
  }
  if (spec.val >= spec.train) {
    throw std::invalid_argument("split: val " + std::to_string(spec.val) + " must be smaller than train " +
                                std::to_string(spec.train));
  }
  if (spec.test == 0) throw std::invalid_argument("split: test set is empty");
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  seeded_shuffle(idx, spec.seed);
  Splits s;
  auto it = idx.begin();
  s.test.assign(it, it + static_cast<std::ptrdiff_t>(spec.test));
  it += static_cast<std::ptrdiff_t>(spec.test);
  s.val.assign(it, it + static_cast<std::ptrdiff_t>(spec.val));
  it += static_cast<std::ptrdiff_t>(spec.val);
  s.train.assign(it, idx.end());
  return s;
}

// ---------------------------------------------------------------------------
// RMSprop

struct RmsPropConfig {
  double learning_rate = 1e-3;
  double rho = 0.9;
  double epsilon = 1e-7;
};

template <class T>
struct BasicOptimizerState {
  RmsPropConfig cfg;
  std::vector<BasicTensor<T>> mean_square;  // one per parameter, lazily shaped on first step
};

using OptimizerState = BasicOptimizerState<float>;

/// v ← ρv + (1−ρ)g²;  θ ← θ − lr·g / (√v + ε). Arithmetic in double per element.
template <class T>
void rmsprop_step(BasicOptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                  std::span<const BasicTensor<T>* const> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("rmsprop: parameter and gradient counts differ");
  if (state.mean_square.empty()) {
    for (const auto* p : params) state.mean_square.emplace_back(p->shape());
  }
  if (state.mean_square.size() != params.size()) throw std::invalid_argument("rmsprop: state does not match parameters");
  const double lr = state.cfg.learning_rate, rho = state.cfg.rho, eps = state.cfg.epsilon;
  for (std::size_t i = 0; i < params.size(); ++i) {
    BasicTensor<T>& p = *params[i];
    const BasicTensor<T>& g = *grads[i];
    BasicTensor<T>& v = state.mean_square[i];
    if (p.shape() != g.shape() || p.shape() != v.shape()) {
      throw std::invalid_argument("rmsprop: shape mismatch at parameter " + std::to_string(i) + ": " +
                                  shape_string(p.shape()) + " vs grad " + shape_string(g.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double vj = rho * static_cast<double>(v[j]) + (1.0 - rho) * gj * gj;
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * gj / (std::sqrt(vj) + eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Early stopping

/// Monitors validation loss. An epoch improves when it beats the best loss by
/// at least min_delta; training stops after `patience` epochs without one.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience, double min_delta = 1e-6) : patience_(patience), min_delta_(min_delta) {
    if (patience < 1) throw std::invalid_argument("early stopping: patience must be >= 1");
  }

  /// Returns true when this epoch is a new best.
  bool observe(std::size_t epoch, double val_loss) {
    if (!std::isfinite(best_loss_) || best_loss_ - val_loss >= min_delta_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch;
      since_improve_ = 0;
      return true;
    }
    ++since_improve_;
    return false;
  }

  bool should_stop() const noexcept { return since_improve_ >= patience_; }
  double best_loss() const noexcept { return best_loss_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::size_t epochs_since_improve() const noexcept { return since_improve_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t since_improve_ = 0;
};

// ---------------------------------------------------------------------------
// Data and evaluation

/// Images stacked as N×C×H×W with one label per image.
struct SampleSet {
  Tensor images;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  Tensor gather(std::span<const std::size_t> idx) const {
    const std::size_t per = images.size() / images.dim(0);
    Tensor out({idx.size(), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw std::out_of_range("sample index " + std::to_string(idx[i]) + " out of range");
      std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
    }
    return out;
  }
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline constexpr std::size_t kEvalBatch = 32;

/// Mean cross-entropy and argmax accuracy. Indices are visited in sorted order,
/// so the result does not depend on how the caller ordered them.
inline EvalResult evaluate_loss(const Network& net, std::span<const std::size_t> indices, const SampleSet& data) {
  if (indices.empty()) throw std::invalid_argument("evaluate_loss: empty index set");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::sort(idx.begin(), idx.end());
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += kEvalBatch) {
    const std::size_t end = std::min(idx.size(), start + kEvalBatch);
    const std::span<const std::size_t> chunk(idx.data() + start, end - start);
    const Tensor logits = forward(net, data.gather(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const std::span<const float> row(logits.data() + i * 2, 2);
      const std::size_t label = data.labels[chunk[i]];
      loss += cross_entropy_row(row, label);
      const auto p = softmax_row(row);
      correct += predicted_class(p) == label ? 1 : 0;
    }
  }
  return {loss / static_cast<double>(idx.size()), static_cast<double>(correct) / static_cast<double>(idx.size())};
}

/// Affected-class probability for each index, in the given order.
inline std::vector<double> predict_scores(const Network& net, std::span<const std::size_t> indices,
                                          const SampleSet& data) {
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
    const std::size_t end = std::min(indices.size(), start + kEvalBatch);
    const Tensor logits = forward(net, data.gather(indices.subspan(start, end - start)));
    for (std::size_t i = 0; i < end - start; ++i) out.push_back(softmax_row(std::span<const float>(logits.data() + i * 2, 2))[1]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double min_delta = 1e-6;
  RmsPropConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
    if (!(optimizer.learning_rate >= 0.0)) throw std::invalid_argument("train: learning rate must be >= 0");
    if (!(optimizer.rho >= 0.0 && optimizer.rho < 1.0)) throw std::invalid_argument("train: rho must be in [0,1)");
    if (!(optimizer.epsilon > 0.0)) throw std::invalid_argument("train: epsilon must be > 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

struct FitCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the network right after a new best validation loss.
  std::function<void(const Network&, const EpochRecord&)> on_improve;
  /// Replaces the validation pass (default: evaluate_loss over splits.val).
  std::function<EvalResult(const Network&, std::size_t epoch)> validate;
};

/// Trains in place. On return `net` holds the weights of the best validation epoch.
inline FitResult fit(Network& net, const SampleSet& data, const Splits& splits, const TrainConfig& cfg,
                     const FitCallbacks& callbacks = {}) {
  cfg.validate();
  if (splits.train.empty()) throw std::invalid_argument("fit: empty training set");
  if (splits.val.empty()) throw std::invalid_argument("fit: empty validation set");

  OptimizerState opt{cfg.optimizer, {}};
  EarlyStopper stopper(cfg.patience, cfg.min_delta);
  std::vector<std::pair<std::string, Tensor>> best = net.snapshot();
  FitResult result;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order = splits.train;
    seeded_shuffle(order, cfg.seed + epoch);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch = 1; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(data.labels[i]);

      GradTape tape(true);
      const auto tr = trace_forward(net, tape, tape.constant(data.gather(idx)));
      const Var loss = softmax_cross_entropy(tape, tr.logits, labels);
      const float lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch));
      }
      const Tensor& logits = tape.value(tr.logits);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::span<const float> row(logits.data() + i * 2, 2);
        loss_sum += cross_entropy_row(row, labels[i]);
        correct += predicted_class(softmax_row(row)) == labels[i] ? 1 : 0;
      }
      tape.backward(loss);

      auto params = net.parameters();
      std::vector<Tensor*> ptrs;
      std::vector<const Tensor*> grads;
      for (std::size_t p = 0; p < params.size(); ++p) {
        ptrs.push_back(params[p].tensor);
        grads.push_back(&tape.grad(tr.params[p]));
        if (!grads.back()->all_finite()) {
          throw NumericError("non-finite gradient for " + params[p].name + " at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch));
        }
      }
      rmsprop_step<float>(opt, ptrs, grads);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    const EvalResult val =
        callbacks.validate ? callbacks.validate(net, epoch) : evaluate_loss(net, splits.val, data);
    rec.val_loss = val.loss;
    rec.val_accuracy = val.accuracy;
    if (!std::isfinite(rec.val_loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.history.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);

    if (stopper.observe(epoch, rec.val_loss)) {
      best = net.snapshot();
      if (callbacks.on_improve) callbacks.on_improve(net, rec);
    }
    if (stopper.should_stop()) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }

  auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) *params[p].tensor = std::move(best[p].second);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

}  // namespace hres
