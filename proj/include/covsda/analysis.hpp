#pragma once

// Dataset distances under a class-conditional Gaussian approximation, and PCA
// projections for feature visualization.
//
// The label-to-label ground cost is the closed-form squared 2-Wasserstein
// distance between class Gaussians,
//   |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_b^1/2 S_a S_b^1/2)^1/2),
// and the outer transport problem over class frequencies is solved with
// log-domain Sinkhorn iterations.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covsda/errors.hpp"

namespace covsda {

struct ClassGaussian {
  int label = 0;
  std::size_t count = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct ClassConditionalGaussians {
  std::vector<ClassGaussian> classes;  // sorted by label
  std::size_t total = 0;
};

struct OtddConfig {
  /// Covariance ridge: eps = cov_ridge * trace / H (cov_ridge alone when the trace is 0).
  double cov_ridge = 1e-6;
  /// Entropic regularization relative to the mean ground cost.
  double sinkhorn_reg = 0.01;
  int sinkhorn_iterations = 1000;
  double sinkhorn_tol = 1e-9;
};

struct OtddResult {
  double distance = 0.0;
  std::vector<int> labels_a;
  std::vector<int> labels_b;
  Eigen::MatrixXd cost;
  Eigen::MatrixXd plan;
  int iterations = 0;
};

inline ClassConditionalGaussians fit_class_gaussians(const Eigen::MatrixXd& x, std::span<const int> labels,
                                                     const OtddConfig& cfg = {}) {
  if (labels.size() != static_cast<std::size_t>(x.rows())) throw ShapeError("fit_class_gaussians: labels do not match rows");
  std::map<int, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
  const Eigen::Index h = x.cols();
  ClassConditionalGaussians out;
  out.total = labels.size();
  for (const auto& [label, rows] : groups) {
    if (rows.size() < 2) {
      throw DataError("fit_class_gaussians: class " + std::to_string(label) + " has fewer than 2 samples");
    }
    ClassGaussian g;
    g.label = label;
    g.count = rows.size();
    g.mean = Eigen::VectorXd::Zero(h);
    for (Eigen::Index r : rows) g.mean += x.row(r).transpose();
    g.mean /= static_cast<double>(rows.size());
    g.cov = Eigen::MatrixXd::Zero(h, h);
    for (Eigen::Index r : rows) {
      const Eigen::VectorXd d = x.row(r).transpose() - g.mean;
      g.cov.noalias() += d * d.transpose();
    }
    g.cov /= static_cast<double>(rows.size() - 1);
    const double tr = g.cov.trace();
    const double eps = tr > 0.0 ? cfg.cov_ridge * tr / static_cast<double>(h) : cfg.cov_ridge;
    g.cov.diagonal().array() += eps;
    out.classes.push_back(std::move(g));
  }
  return out;
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("sqrtm_psd: eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

namespace detail {

inline double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double extra_ridge) {
  Eigen::MatrixXd bb = b;
  bb.diagonal().array() += extra_ridge;
  const Eigen::MatrixXd rb = sqrtm_psd(bb);
  Eigen::MatrixXd inner = rb * a * rb;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -1e-8 * scale) return std::numeric_limits<double>::quiet_NaN();
  return ev.cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace detail

/// Squared 2-Wasserstein distance between N(mu_a, S_a) and N(mu_b, S_b).
inline double gaussian_w2(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
                          const Eigen::MatrixXd& cov_b) {
  if (mu_a.size() != mu_b.size() || cov_a.rows() != mu_a.size() || cov_b.rows() != mu_b.size()) {
    throw ShapeError("gaussian_w2: dimension mismatch");
  }
  double cross = detail::trace_sqrt_product(cov_a, cov_b, 0.0);
  if (!std::isfinite(cross)) {
    const double ridge = 1e-8 * std::max(1.0, (cov_a.trace() + cov_b.trace()) / static_cast<double>(mu_a.size()));
    Eigen::MatrixXd a = cov_a;
    a.diagonal().array() += ridge;
    cross = detail::trace_sqrt_product(a, cov_b, ridge);
    if (!std::isfinite(cross)) throw NumericError("gaussian_w2: matrix square root failed after regularization retry");
  }
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

inline double gaussian_w2(const ClassGaussian& a, const ClassGaussian& b) { return gaussian_w2(a.mean, a.cov, b.mean, b.cov); }

struct SinkhornResult {
  Eigen::MatrixXd plan;
  int iterations = 0;
  double violation = 0.0;
};

/// Entropic OT in the log domain. `reg` is the absolute regularization.
///
/// Potentials are warm-started by annealing the regularization down from the
/// cost scale (halving per stage). Near-degenerate costs make plain Sinkhorn
/// contract very slowly at small `reg`, so once it stalls the same dual is
/// finished with damped Newton steps. Every sweep or step counts against
/// `max_iterations`; the result solves the same entropic problem either way.
inline SinkhornResult sinkhorn(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::MatrixXd& cost, double reg,
                               int max_iterations, double tol) {
  const Eigen::Index n = a.size(), m = b.size();
  if (cost.rows() != n || cost.cols() != m) throw ShapeError("sinkhorn: cost matrix does not match marginals");
  if (!(reg > 0.0)) throw DomainError("sinkhorn: regularization must be positive");
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n), g = Eigen::VectorXd::Zero(m);
  const Eigen::VectorXd log_a = a.array().log(), log_b = b.array().log();
  auto sweep = [&](double eps) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j) mx = std::max(mx, (g[j] - cost(i, j)) / eps);
      double s = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) s += std::exp((g[j] - cost(i, j)) / eps - mx);
      f[i] = eps * (log_a[i] - mx - std::log(s));
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < n; ++i) mx = std::max(mx, (f[i] - cost(i, j)) / eps);
      double s = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) s += std::exp((f[i] - cost(i, j)) / eps - mx);
      g[j] = eps * (log_b[j] - mx - std::log(s));
    }
  };
  auto plan_of = [&](const Eigen::VectorXd& fv, const Eigen::VectorXd& gv) {
    Eigen::MatrixXd p(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) p(i, j) = std::exp((fv[i] + gv[j] - cost(i, j)) / reg);
    return p;
  };
  auto violation_of = [&](const Eigen::MatrixXd& p) {
    return (p.rowwise().sum() - a).cwiseAbs().sum() + (p.colwise().sum().transpose() - b).cwiseAbs().sum();
  };

  constexpr int kStageIterations = 10;
  constexpr int kSinkhornIterations = 200;
  SinkhornResult r;
  int it = 0;
  for (double eps = cost.cwiseAbs().maxCoeff(); eps > reg && it < max_iterations; eps *= 0.5)
    for (int k = 0; k < kStageIterations && it < max_iterations; ++k, ++it) sweep(eps);
  for (int k = 0; k < kSinkhornIterations && it < max_iterations; ++k) {
    sweep(reg);
    ++it;
    r.plan = plan_of(f, g);
    r.violation = violation_of(r.plan);
    r.iterations = it;
    if (r.violation <= tol) return r;
  }
  // Newton on the dual; the last column potential is pinned to remove the
  // (f + c, g - c) degeneracy.
  const Eigen::Index k = n + m - 1;
  while (it < max_iterations) {
    r.plan = plan_of(f, g);
    r.violation = violation_of(r.plan);
    r.iterations = it;
    if (r.violation <= tol) return r;
    ++it;
    const Eigen::VectorXd row = r.plan.rowwise().sum(), col = r.plan.colwise().sum().transpose();
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd grad(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      hess(i, i) = row[i] / reg;
      grad[i] = a[i] - row[i];
      for (Eigen::Index j = 0; j + 1 < m; ++j) hess(i, n + j) = hess(n + j, i) = r.plan(i, j) / reg;
    }
    for (Eigen::Index j = 0; j + 1 < m; ++j) {
      hess(n + j, n + j) = col[j] / reg;
      grad[n + j] = b[j] - col[j];
    }
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    if (!step.allFinite()) break;
    double t = 1.0;
    for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
      Eigen::VectorXd fn = f + t * step.head(n), gn = g;
      gn.head(m - 1) += t * step.tail(m - 1);
      if (violation_of(plan_of(fn, gn)) < r.violation) {
        f = std::move(fn);
        g = std::move(gn);
        break;
      }
    }
  }
  r.plan = plan_of(f, g);
  r.violation = violation_of(r.plan);
  if (r.violation <= tol) {
    r.iterations = it;
    return r;
  }
  throw NumericError("sinkhorn: no convergence after " + std::to_string(max_iterations) +
                     " iterations (marginal violation " + std::to_string(r.violation) + ", tol " + std::to_string(tol) + ")");
}

inline OtddResult otdd(const ClassConditionalGaussians& ga, const ClassConditionalGaussians& gb, const OtddConfig& cfg = {}) {
  if (ga.classes.empty() || gb.classes.empty()) throw DataError("otdd: both datasets need at least one class");
  if (ga.classes.front().mean.size() != gb.classes.front().mean.size()) throw ShapeError("otdd: feature widths differ");
  const auto n = static_cast<Eigen::Index>(ga.classes.size());
  const auto m = static_cast<Eigen::Index>(gb.classes.size());
  OtddResult res;
  res.cost.resize(n, m);
  Eigen::VectorXd a(n), b(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    res.labels_a.push_back(ga.classes[i].label);
    a[i] = static_cast<double>(ga.classes[i].count) / static_cast<double>(ga.total);
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    res.labels_b.push_back(gb.classes[j].label);
    b[j] = static_cast<double>(gb.classes[j].count) / static_cast<double>(gb.total);
  }
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) res.cost(i, j) = gaussian_w2(ga.classes[i], gb.classes[j]);

  const double mean_cost = res.cost.mean();
  if (n == 1 || m == 1 || mean_cost == 0.0) {
    // Only one feasible plan (or every plan costs zero): the independent coupling.
    res.plan = a * b.transpose();
  } else {
    SinkhornResult s = sinkhorn(a, b, res.cost, cfg.sinkhorn_reg * mean_cost, cfg.sinkhorn_iterations, cfg.sinkhorn_tol);
    res.plan = std::move(s.plan);
    res.iterations = s.iterations;
  }
  res.distance = std::max(0.0, (res.plan.array() * res.cost.array()).sum());
  return res;
}

inline OtddResult otdd(const Eigen::MatrixXd& xa, std::span<const int> la, const Eigen::MatrixXd& xb,
                       std::span<const int> lb, const OtddConfig& cfg = {}) {
  return otdd(fit_class_gaussians(xa, la, cfg), fit_class_gaussians(xb, lb, cfg), cfg);
}

/// Symmetric matrix of OTDD between every pair of domains (diagonal: self-distance).
struct DomainDistanceMatrix {
  std::vector<int> domain_ids;
  Eigen::MatrixXd distance;

  double mean_offdiagonal() const {
    const Eigen::Index e = distance.rows();
    if (e < 2) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < e; ++i)
      for (Eigen::Index j = i + 1; j < e; ++j) s += distance(i, j);
    return s / static_cast<double>(e * (e - 1) / 2);
  }
};

inline DomainDistanceMatrix pairwise_domain_otdd(const Eigen::MatrixXd& x, std::span<const int> labels,
                                                 std::span<const int> domains, const OtddConfig& cfg = {}) {
  if (labels.size() != static_cast<std::size_t>(x.rows()) || domains.size() != labels.size()) {
    throw ShapeError("pairwise_domain_otdd: labels / domains do not match rows");
  }
  std::map<int, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < domains.size(); ++i) groups[domains[i]].push_back(static_cast<Eigen::Index>(i));
  std::vector<ClassConditionalGaussians> fits;
  DomainDistanceMatrix out;
  for (const auto& [d, rows] : groups) {
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), x.cols());
    std::vector<int> sub_labels;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      sub.row(static_cast<Eigen::Index>(k)) = x.row(rows[k]);
      sub_labels.push_back(labels[static_cast<std::size_t>(rows[k])]);
    }
    out.domain_ids.push_back(d);
    fits.push_back(fit_class_gaussians(sub, sub_labels, cfg));
  }
  const auto e = static_cast<Eigen::Index>(fits.size());
  out.distance = Eigen::MatrixXd::Zero(e, e);
  for (Eigen::Index i = 0; i < e; ++i) {
    out.distance(i, i) = otdd(fits[i], fits[i], cfg).distance;
    for (Eigen::Index j = i + 1; j < e; ++j) out.distance(i, j) = out.distance(j, i) = otdd(fits[i], fits[j], cfg).distance;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct PcaProjection {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // (H, k), orthonormal columns
  Eigen::VectorXd explained_variance_ratio;
  Eigen::MatrixXd coordinates;  // (n, k)

  Eigen::MatrixXd project(const Eigen::MatrixXd& x) const { return (x.rowwise() - mean) * components; }
  /// Projects displacement vectors (no centering).
  Eigen::MatrixXd project_direction(const Eigen::MatrixXd& v) const { return v * components; }
};

/// Top-k principal components; each component's largest-magnitude loading is positive.
inline PcaProjection pca_project(const Eigen::MatrixXd& x, Eigen::Index k = 2) {
  if (x.rows() < 2) throw DataError("pca_project: need at least two samples");
  if (k < 1 || k > x.cols()) {
    throw ShapeError("pca_project: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(x.cols()) + "]");
  }
  PcaProjection p;
  p.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - p.mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("pca_project: eigendecomposition failed");
  const Eigen::Index h = x.cols();
  p.components.resize(h, k);
  p.explained_variance_ratio.resize(k);
  const double total = std::max(es.eigenvalues().sum(), std::numeric_limits<double>::min());
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index src = h - 1 - c;  // eigenvalues ascend
    Eigen::VectorXd v = es.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    p.components.col(c) = v;
    p.explained_variance_ratio[c] = std::max(0.0, es.eigenvalues()[src]) / total;
  }
  p.coordinates = centered * p.components;
  return p;
}

}  // namespace covsda
