#pragma once

#include <atomic>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "covsda/errors.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

/// Feature vectors z with aligned class and domain labels.
struct FeatureBatch {
  Eigen::MatrixXd z;  // (n, H)
  std::vector<int> labels;
  std::vector<int> domains;

  std::size_t size() const { return static_cast<std::size_t>(z.rows()); }
};

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("to_eigen: expected a matrix, got " + shape_string(t.shape()));
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

inline FeatureBatch make_feature_batch(const Tensor& z, std::vector<int> labels, std::vector<int> domains) {
  if (labels.size() != z.rows() || domains.size() != z.rows()) {
    throw ShapeError("FeatureBatch: " + std::to_string(z.rows()) + " feature rows vs " + std::to_string(labels.size()) +
                     " labels and " + std::to_string(domains.size()) + " domains");
  }
  return FeatureBatch{to_eigen(z), std::move(labels), std::move(domains)};
}

/// Call counters for the training-only augmentation path.
namespace instrumentation {
inline std::atomic<std::size_t> director_calls{0};
inline std::atomic<std::size_t> estimator_calls{0};

inline void reset() {
  director_calls = 0;
  estimator_calls = 0;
}
}  // namespace instrumentation

}  // namespace covsda
