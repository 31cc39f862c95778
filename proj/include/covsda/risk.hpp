#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covsda/errors.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

enum class PenaltyKind { kErm, kIrmv1, kVrex };

inline PenaltyKind parse_penalty(const std::string& s) {
  if (s == "erm") return PenaltyKind::kErm;
  if (s == "irmv1") return PenaltyKind::kIrmv1;
  if (s == "vrex") return PenaltyKind::kVrex;
  throw ConfigError("unknown penalty '" + s + "' (expected erm, irmv1 or vrex)");
}
inline std::string to_string(PenaltyKind p) {
  switch (p) {
    case PenaltyKind::kErm: return "erm";
    case PenaltyKind::kIrmv1: return "irmv1";
    case PenaltyKind::kVrex: return "vrex";
  }
  return "?";
}

struct LossConfig {
  /// Weight of the estimator loss.
  double alpha = 1.0;
  double vrex_lambda = 10.0;
  double irm_lambda = 1.0;
  PenaltyKind penalty = PenaltyKind::kVrex;
  /// Per-domain risks are computed on augmented features when set.
  bool augment_risks = true;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("loss: alpha must be >= 0");
    if (!(vrex_lambda >= 0.0)) throw ConfigError("loss: vrex_lambda must be >= 0");
    if (!(irm_lambda >= 0.0)) throw ConfigError("loss: irm_lambda must be >= 0");
  }
};

/// Mean cross-entropy per training domain present in the batch.
struct RiskVector {
  std::vector<int> domain_ids;  // sorted
  Var risks;                    // shape (k)

  std::size_t size() const { return domain_ids.size(); }
};

namespace detail {

inline std::map<int, std::vector<std::size_t>> group_rows(std::size_t n, std::span<const int> labels,
                                                          std::span<const int> domains, const char* who) {
  if (n == 0) throw DataError(std::string(who) + ": empty batch");
  if (labels.size() != n || domains.size() != n) {
    throw ShapeError(std::string(who) + ": " + std::to_string(n) + " logit rows vs " + std::to_string(labels.size()) +
                     " labels and " + std::to_string(domains.size()) + " domains");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[domains[i]].push_back(i);
  return groups;
}

}  // namespace detail

inline RiskVector domain_risks(Var logits, std::span<const int> labels, std::span<const int> domains) {
  const auto groups = detail::group_rows(logits.value().rows(), labels, domains, "domain_risks");
  Var losses = softmax_cross_entropy(logits, labels);
  RiskVector rv;
  std::vector<Var> per_domain;
  for (const auto& [domain, rows] : groups) {
    rv.domain_ids.push_back(domain);
    per_domain.push_back(mean(index_rows(losses, rows)));
  }
  rv.risks = stack(per_domain);
  return rv;
}

/// Population variance of the domain risks; zero for a single domain.
inline Var vrex_penalty(const RiskVector& risks) { return variance_over_axis(risks.risks); }

/// sum_e (d/ds R_e(s * logits)|_{s=1})^2. The derivative is expanded in closed
/// form, mean_i [sum_k softmax(l_i)_k l_ik - l_{i,y_i}], so the penalty stays
/// differentiable with first-order reverse mode.
inline Var irmv1_penalty(Var logits, std::span<const int> labels, std::span<const int> domains) {
  const Tensor& L = logits.value();
  const auto groups = detail::group_rows(L.rows(), labels, domains, "irmv1_penalty");
  Graph& g = *logits.graph;
  Tensor onehot(L.shape());
  for (std::size_t i = 0; i < L.rows(); ++i) onehot(i, static_cast<std::size_t>(labels[i])) = 1.0;
  Var picked = sum_rows(mul(logits, g.constant(std::move(onehot))));
  Var expected = sum_rows(mul(softmax(logits), logits));
  Var dscale = sub(expected, picked);
  std::vector<Var> squared;
  for (const auto& [domain, rows] : groups) squared.push_back(square(mean(index_rows(dscale, rows))));
  return sum(stack(squared));
}

/// mean_e R_e + weight * penalty + alpha * L_phi.
inline Var total_loss(const RiskVector& risks, std::optional<Var> l_phi, const LossConfig& cfg,
                      std::optional<Var> irm_penalty = std::nullopt) {
  Var total = mean(risks.risks);
  switch (cfg.penalty) {
    case PenaltyKind::kErm:
      break;
    case PenaltyKind::kVrex:
      total = add(total, scale(vrex_penalty(risks), cfg.vrex_lambda));
      break;
    case PenaltyKind::kIrmv1:
      if (!irm_penalty) throw std::logic_error("total_loss: irmv1 penalty requested but not supplied");
      total = add(total, scale(*irm_penalty, cfg.irm_lambda));
      break;
  }
  if (l_phi) total = add(total, scale(*l_phi, cfg.alpha));
  return total;
}

}  // namespace covsda
