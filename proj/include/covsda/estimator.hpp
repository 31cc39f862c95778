#pragma once

// Domain-shared estimator of the augmentation magnitude distribution.
//
// The encoder maps z to log sigma^2 (clamped), xi = sigma * eps with
// eps ~ N(0, I) held constant, z~ = z + d * xi, and the decoder reconstructs
// the clean z. Loss:
//   L = -1/2 * mean_i sum_k (1 + log sigma^2 - sigma^2) + 1/2 * mean_{i,k} (z^ - z)^2

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covsda/director.hpp"
#include "covsda/errors.hpp"
#include "covsda/feature_batch.hpp"
#include "covsda/model.hpp"
#include "covsda/random.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

enum class DecoderInput { kAugmented, kClean };

inline DecoderInput parse_decoder_input(const std::string& s) {
  if (s == "augmented") return DecoderInput::kAugmented;
  if (s == "clean") return DecoderInput::kClean;
  throw ConfigError("unknown decoder input '" + s + "' (expected augmented or clean)");
}
inline std::string to_string(DecoderInput d) { return d == DecoderInput::kAugmented ? "augmented" : "clean"; }

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// One parameter set shared by every domain.
struct EstimatorParams {
  Mlp encoder;  // H -> hidden -> log sigma^2
  Mlp decoder;  // H -> hidden -> z^

  EstimatorParams() = default;
  EstimatorParams(std::size_t feature_dim, std::size_t hidden, std::uint64_t seed)
      : encoder({feature_dim, hidden, feature_dim}, false, seed ^ 0xE1u),
        decoder({feature_dim, hidden, feature_dim}, false, seed ^ 0xD2u) {}

  std::size_t feature_dim() const { return encoder.in_dim(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out = encoder.parameters();
    for (Tensor* p : decoder.parameters()) out.push_back(p);
    return out;
  }
};

/// Graph-resident distribution for one batch. z_hat is filled by reconstruct().
struct AugmentDistribution {
  Var log_var;
  Var sigma;
  Var z_hat;
  bool has_reconstruction = false;
};

inline AugmentDistribution predict(Graph& g, const EstimatorParams& params, Var z, std::vector<Var>* param_vars = nullptr) {
  ++instrumentation::estimator_calls;
  if (z.value().rank() != 2 || z.value().cols() != params.feature_dim()) {
    throw ShapeError("estimator predict: feature shape " + shape_string(z.shape()) + " does not match width " +
                     std::to_string(params.feature_dim()));
  }
  AugmentDistribution d;
  d.log_var = clamp(params.encoder.forward(g, z, param_vars), kLogVarMin, kLogVarMax);
  d.sigma = exp(scale(d.log_var, 0.5));
  return d;
}

/// Reparameterized draw xi = sigma * eps; eps is a constant of the graph.
inline Var sample_xi(const AugmentDistribution& dist, Rng& rng) {
  Graph& g = *dist.sigma.graph;
  Var eps = g.constant(normal_tensor(dist.sigma.shape(), rng));
  return mul(dist.sigma, eps);
}

inline Var augment(Var z, Var direction, Var xi) {
  if (z.shape() != direction.shape() || z.shape() != xi.shape()) {
    throw ShapeError("augment: shapes " + shape_string(z.shape()) + ", " + shape_string(direction.shape()) + ", " +
                     shape_string(xi.shape()) + " must agree");
  }
  return add(z, mul(direction, xi));
}

inline Tensor augment(const Tensor& z, const Tensor& direction, const Tensor& xi) {
  if (z.shape() != direction.shape() || z.shape() != xi.shape()) {
    throw ShapeError("augment: shapes " + shape_string(z.shape()) + ", " + shape_string(direction.shape()) + ", " +
                     shape_string(xi.shape()) + " must agree");
  }
  Tensor out = z;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += direction[i] * xi[i];
  return out;
}

/// Decoder pass; `input` is z~ or z depending on the configured decoder input.
inline void reconstruct(AugmentDistribution& dist, const EstimatorParams& params, Var input,
                        std::vector<Var>* param_vars = nullptr) {
  dist.z_hat = params.decoder.forward(*input.graph, input, param_vars);
  dist.has_reconstruction = true;
}

inline Var estimator_loss(const AugmentDistribution& dist, Var z) {
  if (!dist.has_reconstruction) throw std::logic_error("estimator_loss: reconstruct() has not been called");
  if (dist.z_hat.shape() != z.shape() || dist.log_var.shape() != z.shape()) {
    throw ShapeError("estimator_loss: shapes " + shape_string(dist.z_hat.shape()) + " / " +
                     shape_string(dist.log_var.shape()) + " vs " + shape_string(z.shape()));
  }
  const double n = static_cast<double>(z.value().rows());
  Var kl_terms = sub(add_scalar(dist.log_var, 1.0), square(dist.sigma));
  Var kl = scale(sum(kl_terms), -0.5 / n);
  Var rec = scale(mean(square(sub(dist.z_hat, z))), 0.5);
  return add(kl, rec);
}

/// Row i of the result is the direction mask of domains[i].
inline Tensor direction_matrix(const DirectionMask& mask, std::span<const int> domains, std::size_t width) {
  Tensor d(Shape{domains.size(), width});
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const Eigen::VectorXd& m = mask.for_domain(domains[i]);
    if (static_cast<std::size_t>(m.size()) != width) {
      throw ShapeError("direction_matrix: mask width " + std::to_string(m.size()) + " vs feature width " + std::to_string(width));
    }
    for (std::size_t k = 0; k < width; ++k) d(i, k) = m[static_cast<Eigen::Index>(k)];
  }
  return d;
}

}  // namespace covsda
