#pragma once

// Confusion matrix, per-class scores, ROC curve and AUROC. "Positive" is the
// affected class throughout.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/model.hpp"

namespace hres {

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline void check_scores(std::span<const double> scores, std::span<const std::size_t> labels, const char* who) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(scores.size()) + " scores but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t l : labels) {
    if (l > 1) throw std::invalid_argument(std::string(who) + ": label " + std::to_string(l) + " is not 0 or 1");
  }
}

/// Predicts affected iff score >= threshold.
inline ConfusionMatrix confusion_matrix(std::span<const double> scores, std::span<const std::size_t> labels,
                                        double threshold = 0.5) {
  check_scores(scores, labels, "confusion_matrix");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("confusion_matrix: threshold must be in [0,1]");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool pos = labels[i] == kAffected;
    if (pred && pos) ++cm.tp;
    else if (pred) ++cm.fp;
    else if (pos) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

struct ClassScores {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  ClassScores affected;
  ClassScores normal;
  /// Set when some ratio had a zero denominator and was reported as 0.
  bool degenerate = false;
};

namespace detail {

inline double ratio(std::uint64_t num, std::uint64_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

inline ClassScores scores_for(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn, std::uint64_t fn, bool& degenerate) {
  ClassScores s;
  s.accuracy = ratio(tp + tn, tp + fp + tn + fn, degenerate);
  s.precision = ratio(tp, tp + fp, degenerate);
  s.recall = ratio(tp, tp + fn, degenerate);
  s.specificity = ratio(tn, tn + fp, degenerate);
  const double pr = s.precision + s.recall;
  if (pr > 0.0) {
    s.f1 = 2.0 * s.precision * s.recall / pr;
  } else {
    s.f1 = 0.0;
    degenerate = true;
  }
  return s;
}

}  // namespace detail

/// The normal row swaps roles: its positives are the true negatives.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("compute_metrics: confusion matrix is empty");
  MetricsReport r;
  r.affected = detail::scores_for(cm.tp, cm.fp, cm.tn, cm.fn, r.degenerate);
  r.normal = detail::scores_for(cm.tn, cm.fn, cm.tp, cm.fp, r.degenerate);
  return r;
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // lowest admitted score; +inf for the (0,0) point
};

struct RocCurve {
  std::vector<RocPoint> points;
};

namespace detail {

inline std::pair<std::uint64_t, std::uint64_t> class_counts(std::span<const std::size_t> labels, const char* who) {
  std::uint64_t pos = 0;
  for (std::size_t l : labels) pos += l == kAffected ? 1 : 0;
  const std::uint64_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument(std::string(who) + ": both classes must be present");
  return {pos, neg};
}

struct CountPoint {
  std::uint64_t fp;
  std::uint64_t tp;
  double threshold;
};

// Cumulative (fp, tp) after admitting every score >= each distinct threshold, descending.
inline std::vector<CountPoint> sweep(std::span<const double> scores, std::span<const std::size_t> labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<CountPoint> out;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (labels[order[i]] == kAffected) ++tp;
      else ++fp;
    }
    out.push_back({fp, tp, s});
  }
  return out;
}

}  // namespace detail

/// (0,0), then one point per distinct score in descending order; the lowest
/// score admits everything, so the curve ends at (1,1).
inline RocCurve roc_curve(std::span<const double> scores, std::span<const std::size_t> labels) {
  check_scores(scores, labels, "roc_curve");
  const auto [pos, neg] = detail::class_counts(labels, "roc_curve");
  RocCurve c;
  c.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  for (const auto& p : detail::sweep(scores, labels)) {
    c.points.push_back({static_cast<double>(p.fp) / static_cast<double>(neg),
                        static_cast<double>(p.tp) / static_cast<double>(pos), p.threshold});
  }
  return c;
}

/// Trapezoidal area under the ROC curve. Tied scores form one diagonal
/// segment, which is the half-credit convention of the Mann–Whitney statistic.
/// Summed on integer counts so the only rounding is the final division.
inline double auroc(std::span<const double> scores, std::span<const std::size_t> labels) {
  check_scores(scores, labels, "auroc");
  const auto [pos, neg] = detail::class_counts(labels, "auroc");
  std::uint64_t twice_area = 0, prev_tp = 0, prev_fp = 0;
  for (const auto& p : detail::sweep(scores, labels)) {
    twice_area += (p.fp - prev_fp) * (p.tp + prev_tp);
    prev_tp = p.tp;
    prev_fp = p.fp;
  }
  return static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

// ---------------------------------------------------------------------------
// Reporting

/// 2×2 grid, rows = actual, columns = predicted, normal first.
inline std::string format_confusion(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << std::setw(18) << "" << std::setw(12) << "pred normal" << std::setw(14) << "pred affected" << '\n';
  os << std::setw(18) << std::left << "actual normal" << std::right << std::setw(12) << cm.tn << std::setw(14) << cm.fp
     << '\n';
  os << std::setw(18) << std::left << "actual affected" << std::right << std::setw(12) << cm.fn << std::setw(14)
     << cm.tp << '\n';
  return os.str();
}

/// Class rows with accuracy, precision, recall, specificity and F1 to 4 decimals.
inline std::string format_metrics(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(10) << "class" << std::right << std::setw(10) << "accuracy" << std::setw(11)
     << "precision" << std::setw(9) << "recall" << std::setw(13) << "specificity" << std::setw(9) << "f1" << '\n';
  auto row = [&](const char* name, const ClassScores& s) {
    os << std::left << std::setw(10) << name << std::right << std::setw(10) << s.accuracy << std::setw(11)
       << s.precision << std::setw(9) << s.recall << std::setw(13) << s.specificity << std::setw(9) << s.f1 << '\n';
  };
  row("normal", r.normal);
  row("affected", r.affected);
  if (r.degenerate) os << "note: some ratios had zero denominators and are reported as 0\n";
  return os.str();
}

inline void write_metrics_csv(std::ostream& os, const MetricsReport& r) {
  os << "class,accuracy,precision,recall,specificity,f1\n" << std::setprecision(17);
  auto row = [&](const char* name, const ClassScores& s) {
    os << name << ',' << s.accuracy << ',' << s.precision << ',' << s.recall << ',' << s.specificity << ',' << s.f1
       << '\n';
  };
  row("normal", r.normal);
  row("affected", r.affected);
}

inline void write_roc_csv(std::ostream& os, const RocCurve& c) {
  os << "fpr,tpr,threshold\n" << std::setprecision(17);
  for (const auto& p : c.points) os << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
}

}  // namespace hres
