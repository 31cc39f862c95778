#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "covsda/errors.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

struct MetricRow {
  int domain = -1;  // -1 for aggregate rows
  double auc = 0.0;
  double acc = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  std::vector<MetricRow> domains;
  MetricRow average;
};

/// Midranks (1-based) with ties sharing the mean of their positions.
inline std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
    i = j + 1;
  }
  return r;
}

/// Binary rank AUC (Mann-Whitney) of `score` for positives.
inline double binary_auc(std::span<const double> score, std::span<const char> positive) {
  const auto r = midranks(score);
  double rank_sum = 0.0, np = 0.0;
  for (std::size_t i = 0; i < score.size(); ++i)
    if (positive[i]) {
      rank_sum += r[i];
      np += 1.0;
    }
  const double nn = static_cast<double>(score.size()) - np;
  if (np == 0.0 || nn == 0.0) throw DataError("binary_auc: need both positives and negatives");
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Macro one-vs-rest AUC over the classes present in `labels`. Absent classes
/// are skipped and reported through `warnings` when given.
inline double metric_auc_macro_ovr(const Tensor& scores, std::span<const int> labels,
                                   std::vector<std::string>* warnings = nullptr) {
  if (scores.rank() != 2 || scores.rows() != labels.size()) {
    throw ShapeError("auc: scores " + shape_string(scores.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = scores.rows(), c = scores.cols();
  std::vector<std::size_t> counts(c, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw DataError("auc: label " + std::to_string(y) + " out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t k) { return k > 0; });
  if (present < 2) throw DataError("auc: at least two classes must be present");
  double total = 0.0;
  std::vector<double> col(n);
  std::vector<char> pos(n);
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] == 0) {
      if (warnings) warnings->push_back("auc: class " + std::to_string(k) + " absent from labels; excluded from macro average");
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores(i, k);
      pos[i] = labels[i] == static_cast<int>(k);
    }
    total += binary_auc(col, pos);
  }
  return total / static_cast<double>(present);
}

inline std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.cols(); ++k)
      if (scores(i, k) > scores(i, best)) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw DataError("accuracy: empty label set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Macro F1 over the classes present in `labels`; an undefined precision or
/// recall counts as 0.
inline double macro_f1(std::span<const int> predicted, std::span<const int> labels, int n_classes) {
  if (labels.empty()) throw DataError("macro_f1: empty label set");
  std::vector<double> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::vector<char> present(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    present[labels[i]] = 1;
    if (predicted[i] == labels[i]) {
      tp[labels[i]] += 1;
    } else {
      fp[predicted[i]] += 1;
      fn[labels[i]] += 1;
    }
  }
  double total = 0.0;
  int k_present = 0;
  for (int k = 0; k < n_classes; ++k) {
    if (!present[k]) continue;
    ++k_present;
    const double denom = 2 * tp[k] + fp[k] + fn[k];
    total += denom > 0 ? 2 * tp[k] / denom : 0.0;
  }
  return total / k_present;
}

inline MetricRow compute_metrics(const Tensor& probabilities, std::span<const int> labels, int domain = -1,
                                 std::vector<std::string>* warnings = nullptr) {
  const auto pred = argmax_rows(probabilities);
  MetricRow row;
  row.domain = domain;
  row.auc = metric_auc_macro_ovr(probabilities, labels, warnings);
  row.acc = accuracy(pred, labels);
  row.f1 = macro_f1(pred, labels, static_cast<int>(probabilities.cols()));
  return row;
}

inline MetricRow average_rows(std::span<const MetricRow> rows) {
  MetricRow avg;
  if (rows.empty()) return avg;
  for (const MetricRow& r : rows) {
    avg.auc += r.auc;
    avg.acc += r.acc;
    avg.f1 += r.f1;
  }
  const double n = static_cast<double>(rows.size());
  avg.auc /= n;
  avg.acc /= n;
  avg.f1 /= n;
  return avg;
}

}  // namespace covsda
