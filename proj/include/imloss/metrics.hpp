#pragma once

// Hard-label segmentation metrics and the statistics used to compare losses.

#include <cstdint>
#include <span>
#include <vector>

#include "imloss/numerics.hpp"

namespace imloss {

struct ClassCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

struct ConfusionCounts {
  std::int64_t elements = 0;
  std::vector<ClassCounts> per_class;
};

struct ClassMetrics {
  double dsc = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
};

struct SegMetrics {
  std::vector<ClassMetrics> per_class;
};

ConfusionCounts confusion_from_labels(std::span<const int> pred, std::span<const int> truth, int num_classes);

template <typename Scalar>
ConfusionCounts confusion(const OneHotMask<Scalar>& pred, const OneHotMask<Scalar>& truth) {
  if (pred.shape() != truth.shape()) {
    throw ValidationError("confusion: shape mismatch " + shape_string(pred.shape()) + " vs " +
                          shape_string(truth.shape()));
  }
  const auto p = argmax(pred.tensor());
  const auto t = argmax(truth.tensor());
  return confusion_from_labels({p.data().data(), static_cast<std::size_t>(p.size())},
                               {t.data().data(), static_cast<std::size_t>(t.size())},
                               static_cast<int>(pred.tensor().classes()));
}

/// A ratio with a zero denominator scores 1 when the class is absent from both
/// prediction and truth, 0 otherwise.
ClassMetrics class_metrics(const ClassCounts& counts);
SegMetrics compute_metrics(const ConfusionCounts& counts);

/// Two-sided Wilcoxon rank-sum p-value. Exact permutation distribution when
/// the pooled size is at most 20, normal approximation with tie correction
/// and continuity correction above.
double wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b);
double wilcoxon_rank_sum_exact(std::span<const double> a, std::span<const double> b);
double wilcoxon_rank_sum_normal(std::span<const double> a, std::span<const double> b);

/// Average ranks (1-based) of the pooled sample a ++ b.
std::vector<double> pooled_ranks(std::span<const double> a, std::span<const double> b);

struct MeanCI {
  double mean = 0;
  double half_width = 0;
};

/// Mean and 1.96 * s / sqrt(n) with the (n - 1) sample standard deviation.
MeanCI mean_ci(std::span<const double> values);

}  // namespace imloss
