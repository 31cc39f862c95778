#pragma once

// Augmentation direction selection from inter-domain covariance deviations.
//
//   C_e   = Cov(z | e)                 (1/(n_e - 1) normalization)
//   dC_e  = C_e - mean_e C_e
//   s_e   = per-dimension score of dC_e (row L2 norm, or |diagonal|)
//   hard  : d_e[k] = 1 iff s_e[k] > mean(s_e)
//   soft  : d_e    = min-max normalized s_e

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covsda/errors.hpp"
#include "covsda/feature_batch.hpp"
#include "covsda/random.hpp"

namespace covsda {

enum class DirectionMode { kSoft, kHard };
enum class ScoreKind { kCovariance, kMmd };
enum class CovarianceReduction { kRowNorm, kDiagonal };

inline DirectionMode parse_direction_mode(const std::string& s) {
  if (s == "soft") return DirectionMode::kSoft;
  if (s == "hard") return DirectionMode::kHard;
  throw ConfigError("unknown direction mode '" + s + "' (expected soft or hard)");
}
inline std::string to_string(DirectionMode m) { return m == DirectionMode::kSoft ? "soft" : "hard"; }

inline ScoreKind parse_score_kind(const std::string& s) {
  if (s == "cov") return ScoreKind::kCovariance;
  if (s == "mmd") return ScoreKind::kMmd;
  throw ConfigError("unknown score kind '" + s + "' (expected cov or mmd)");
}
inline std::string to_string(ScoreKind k) { return k == ScoreKind::kCovariance ? "cov" : "mmd"; }

inline CovarianceReduction parse_reduction(const std::string& s) {
  if (s == "row_norm") return CovarianceReduction::kRowNorm;
  if (s == "diagonal") return CovarianceReduction::kDiagonal;
  throw ConfigError("unknown covariance reduction '" + s + "' (expected row_norm or diagonal)");
}
inline std::string to_string(CovarianceReduction r) { return r == CovarianceReduction::kRowNorm ? "row_norm" : "diagonal"; }

struct DomainCovariance {
  std::vector<int> domain_ids;  // sorted
  std::vector<std::size_t> counts;
  std::vector<Eigen::MatrixXd> cov;
  Eigen::MatrixXd mean_cov;
  std::vector<Eigen::MatrixXd> deviation;
};

/// Per-domain score vectors keyed by position in `domain_ids`.
struct DomainScores {
  std::vector<int> domain_ids;
  std::vector<Eigen::VectorXd> scores;
};

struct DirectionMask {
  DirectionMode mode = DirectionMode::kHard;
  std::vector<int> domain_ids;
  std::vector<Eigen::VectorXd> scores;
  std::vector<Eigen::VectorXd> masks;

  const Eigen::VectorXd& for_domain(int domain) const {
    for (std::size_t k = 0; k < domain_ids.size(); ++k)
      if (domain_ids[k] == domain) return masks[k];
    throw DataError("DirectionMask: no mask for domain " + std::to_string(domain));
  }
};

namespace detail {

inline std::map<int, std::vector<Eigen::Index>> rows_by_domain(const FeatureBatch& b) {
  if (b.domains.size() != b.size()) throw ShapeError("FeatureBatch: domain labels do not match feature rows");
  std::map<int, std::vector<Eigen::Index>> out;
  for (std::size_t i = 0; i < b.domains.size(); ++i) out[b.domains[i]].push_back(static_cast<Eigen::Index>(i));
  return out;
}

inline Eigen::MatrixXd gather(const Eigen::MatrixXd& z, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), z.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = z.row(rows[k]);
  return out;
}

}  // namespace detail

inline DomainCovariance domain_covariance(const FeatureBatch& batch) {
  ++instrumentation::director_calls;
  const auto groups = detail::rows_by_domain(batch);
  if (groups.empty()) throw DataError("domain_covariance: empty batch");
  DomainCovariance dc;
  const Eigen::Index h = batch.z.cols();
  dc.mean_cov = Eigen::MatrixXd::Zero(h, h);
  for (const auto& [domain, rows] : groups) {
    if (rows.size() < 2) {
      throw DataError("domain_covariance: domain " + std::to_string(domain) + " has " + std::to_string(rows.size()) +
                      " sample(s) in the batch; at least 2 are required (use domain-balanced batches)");
    }
    Eigen::MatrixXd x = detail::gather(batch.z, rows);
    const Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    Eigen::MatrixXd c = (x.transpose() * x) / static_cast<double>(rows.size() - 1);
    c = 0.5 * (c + c.transpose());
    dc.domain_ids.push_back(domain);
    dc.counts.push_back(rows.size());
    dc.mean_cov += c;
    dc.cov.push_back(std::move(c));
  }
  dc.mean_cov /= static_cast<double>(dc.cov.size());
  // dC_e = sum_{f != e} (C_e - C_f) / E equals C_e - mean, and for two domains
  // it is exactly antisymmetric in floating point.
  const double e_count = static_cast<double>(dc.cov.size());
  for (std::size_t e = 0; e < dc.cov.size(); ++e) {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(h, h);
    for (std::size_t f = 0; f < dc.cov.size(); ++f)
      if (f != e) d += dc.cov[e] - dc.cov[f];
    dc.deviation.push_back(d / e_count);
  }
  return dc;
}

inline DomainScores covariance_scores(const DomainCovariance& dc,
                                      CovarianceReduction reduction = CovarianceReduction::kRowNorm) {
  DomainScores out;
  out.domain_ids = dc.domain_ids;
  for (const Eigen::MatrixXd& d : dc.deviation) {
    out.scores.push_back(reduction == CovarianceReduction::kRowNorm ? Eigen::VectorXd(d.rowwise().norm())
                                                                    : Eigen::VectorXd(d.diagonal().cwiseAbs()));
  }
  return out;
}

/// Linear-kernel MMD per dimension: (mean of domain e - mean of all other rows)^2.
inline DomainScores mmd_scores(const FeatureBatch& batch) {
  ++instrumentation::director_calls;
  const auto groups = detail::rows_by_domain(batch);
  if (groups.size() < 2) throw DataError("mmd_scores: need at least two domains (complement of a single domain is empty)");
  const Eigen::RowVectorXd total = batch.z.colwise().sum();
  const double n = static_cast<double>(batch.size());
  DomainScores out;
  for (const auto& [domain, rows] : groups) {
    const Eigen::MatrixXd x = detail::gather(batch.z, rows);
    const Eigen::RowVectorXd own_sum = x.colwise().sum();
    const double k = static_cast<double>(rows.size());
    const Eigen::RowVectorXd own = own_sum / k;
    const Eigen::RowVectorXd other = (total - own_sum) / (n - k);
    out.domain_ids.push_back(domain);
    out.scores.push_back((own - other).array().square().matrix().transpose());
  }
  return out;
}

inline Eigen::VectorXd select_direction(const Eigen::VectorXd& scores, DirectionMode mode) {
  const Eigen::Index h = scores.size();
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(h);
  if (h == 0) return mask;
  if (mode == DirectionMode::kHard) {
    const double m = scores.mean();
    for (Eigen::Index k = 0; k < h; ++k) mask[k] = scores[k] > m ? 1.0 : 0.0;
  } else {
    const double lo = scores.minCoeff(), hi = scores.maxCoeff();
    if (hi > lo) mask = (scores.array() - lo) / (hi - lo);
  }
  return mask;
}

inline DirectionMask make_mask(const DomainScores& s, DirectionMode mode) {
  DirectionMask m;
  m.mode = mode;
  m.domain_ids = s.domain_ids;
  m.scores = s.scores;
  for (const Eigen::VectorXd& v : s.scores) m.masks.push_back(select_direction(v, mode));
  return m;
}

/// Replaces every domain's mask by independent Bernoulli draws whose
/// probability equals that mask's mean (same expected density).
inline DirectionMask random_mask_like(const DirectionMask& reference, Rng& rng) {
  DirectionMask out = reference;
  out.mode = DirectionMode::kHard;
  for (Eigen::VectorXd& m : out.masks) {
    const double p = m.size() ? m.mean() : 0.0;
    for (Eigen::Index k = 0; k < m.size(); ++k) m[k] = uniform(rng, 0.0, 1.0) < p ? 1.0 : 0.0;
  }
  return out;
}

struct DirectorConfig {
  DirectionMode mode = DirectionMode::kHard;
  ScoreKind score = ScoreKind::kCovariance;
  CovarianceReduction reduction = CovarianceReduction::kRowNorm;
  /// Exponential smoothing of scores across batches; 0 disables.
  double ema_decay = 0.0;
};

/// Stateful wrapper recomputing the mask from each batch, optionally with
/// exponentially smoothed scores.
class Director {
 public:
  explicit Director(DirectorConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.ema_decay >= 0.0 && cfg_.ema_decay < 1.0)) throw ConfigError("director: ema_decay must lie in [0, 1)");
  }

  const DirectorConfig& config() const { return cfg_; }

  DirectionMask operator()(const FeatureBatch& batch) {
    DomainScores s = cfg_.score == ScoreKind::kCovariance ? covariance_scores(domain_covariance(batch), cfg_.reduction)
                                                          : mmd_scores(batch);
    if (cfg_.ema_decay > 0.0) {
      for (std::size_t k = 0; k < s.domain_ids.size(); ++k) {
        auto it = smoothed_.find(s.domain_ids[k]);
        if (it == smoothed_.end()) {
          smoothed_.emplace(s.domain_ids[k], s.scores[k]);
        } else {
          it->second = cfg_.ema_decay * it->second + (1.0 - cfg_.ema_decay) * s.scores[k];
          s.scores[k] = it->second;
        }
      }
    }
    return make_mask(s, cfg_.mode);
  }

 private:
  DirectorConfig cfg_;
  std::map<int, Eigen::VectorXd> smoothed_;
};

}  // namespace covsda
