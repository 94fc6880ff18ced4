#include "imloss/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace imloss {

ConfusionCounts confusion_from_labels(std::span<const int> pred, std::span<const int> truth, int num_classes) {
  if (pred.size() != truth.size()) throw ValidationError("confusion: label count mismatch");
  if (num_classes < 1) throw ValidationError("confusion: num_classes must be positive");
  ConfusionCounts out;
  out.elements = static_cast<std::int64_t>(pred.size());
  out.per_class.assign(static_cast<std::size_t>(num_classes), {});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i];
    const int t = truth[i];
    if (p < 0 || p >= num_classes || t < 0 || t >= num_classes) {
      throw ValidationError("confusion: label out of range at element " + std::to_string(i));
    }
    if (p == t) {
      out.per_class[p].tp++;
    } else {
      out.per_class[p].fp++;
      out.per_class[t].fn++;
    }
  }
  for (auto& c : out.per_class) c.tn = out.elements - c.tp - c.fp - c.fn;
  return out;
}

ClassMetrics class_metrics(const ClassCounts& c) {
  const bool absent = c.tp == 0 && c.fp == 0 && c.fn == 0;
  auto ratio = [absent](double num, double den) { return den > 0 ? num / den : (absent ? 1.0 : 0.0); };
  ClassMetrics m;
  m.dsc = ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn);
  m.iou = ratio(c.tp, static_cast<double>(c.tp + c.fp + c.fn));
  m.precision = ratio(c.tp, static_cast<double>(c.tp + c.fp));
  m.recall = ratio(c.tp, static_cast<double>(c.tp + c.fn));
  return m;
}

SegMetrics compute_metrics(const ConfusionCounts& counts) {
  SegMetrics out;
  out.per_class.reserve(counts.per_class.size());
  for (const auto& c : counts.per_class) out.per_class.push_back(class_metrics(c));
  return out;
}

std::vector<double> pooled_ranks(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size() + b.size();
  std::vector<double> values(a.begin(), a.end());
  values.insert(values.end(), b.begin(), b.end());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return values[i] < values[j]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

namespace {

void check_samples(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ValidationError("wilcoxon_rank_sum: both samples must be nonempty");
}

}  // namespace

double wilcoxon_rank_sum_exact(std::span<const double> a, std::span<const double> b) {
  check_samples(a, b);
  const auto ranks = pooled_ranks(a, b);
  const std::size_t n1 = a.size();
  const std::size_t n = ranks.size();
  // Ranks are multiples of 1/2, so doubled ranks are integers and the null
  // distribution of the doubled rank sum is a subset-sum count.
  std::vector<int> r2(n);
  for (std::size_t i = 0; i < n; ++i) r2[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
  const int max_sum = std::accumulate(r2.begin(), r2.end(), 0);
  // ways[k][s]: number of k-subsets of the first i items with doubled sum s.
  std::vector<std::vector<double>> ways(n1 + 1, std::vector<double>(max_sum + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = std::min(i + 1, n1); k >= 1; --k) {
      for (int s = max_sum; s >= r2[i]; --s) ways[k][s] += ways[k - 1][s - r2[i]];
    }
  }
  int observed = 0;
  for (std::size_t i = 0; i < n1; ++i) observed += r2[i];
  double total = 0;
  double lower = 0;
  double upper = 0;
  for (int s = 0; s <= max_sum; ++s) {
    total += ways[n1][s];
    if (s <= observed) lower += ways[n1][s];
    if (s >= observed) upper += ways[n1][s];
  }
  return std::min(1.0, 2.0 * std::min(lower, upper) / total);
}

double wilcoxon_rank_sum_normal(std::span<const double> a, std::span<const double> b) {
  check_samples(a, b);
  const auto ranks = pooled_ranks(a, b);
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  const double n = n1 + n2;
  double w = 0;
  for (std::size_t i = 0; i < a.size(); ++i) w += ranks[i];

  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  double ties = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    ties += t * t * t - t;
    i = j + 1;
  }
  const double mean = n1 * (n + 1.0) / 2.0;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
  if (!(var > 0)) return 1.0;
  const double z = std::max(0.0, std::abs(w - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

double wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b) {
  return a.size() + b.size() <= 20 ? wilcoxon_rank_sum_exact(a, b) : wilcoxon_rank_sum_normal(a, b);
}

MeanCI mean_ci(std::span<const double> values) {
  if (values.size() < 2) throw ValidationError("mean_ci: need at least two values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

}  // namespace imloss
