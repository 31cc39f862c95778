#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "json.hpp"

#include "covsda/errors.hpp"
#include "covsda/random.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)
};

/// Fully connected ReLU network. ReLU follows every hidden layer, and the
/// output layer too when `relu_output` is set.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<std::size_t> widths, bool relu_output, std::uint64_t seed)
      : widths_(std::move(widths)), relu_output_(relu_output), seed_(seed) {
    if (widths_.size() < 2) throw ConfigError("Mlp: need at least input and output widths");
    for (std::size_t w : widths_)
      if (w == 0) throw ConfigError("Mlp: widths must be positive");
    Rng rng = make_rng(seed, 100);
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      const std::size_t fan_in = widths_[l], fan_out = widths_[l + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      Linear layer{Tensor(Shape{fan_in, fan_out}), Tensor(Shape{fan_out})};
      for (double& w : layer.weight.data()) w = uniform(rng, -bound, bound);
      layers_.push_back(std::move(layer));
    }
  }

  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t in_dim() const { return widths_.front(); }
  std::size_t out_dim() const { return widths_.back(); }
  bool relu_output() const { return relu_output_; }
  std::uint64_t seed() const { return seed_; }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

  /// Weight, bias of each layer in order.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Linear& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Linear& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Graph forward. When `param_vars` is non-null the parameters become
  /// differentiable leaves appended in parameters() order.
  Var forward(Graph& g, Var x, std::vector<Var>* param_vars = nullptr) const {
    check_width(x.value(), "Mlp::forward");
    Var h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Var w = param_vars ? g.variable(layers_[l].weight) : g.constant(layers_[l].weight);
      Var b = param_vars ? g.variable(layers_[l].bias) : g.constant(layers_[l].bias);
      if (param_vars) {
        param_vars->push_back(w);
        param_vars->push_back(b);
      }
      h = add(matmul(h, w), b);
      if (l + 1 < layers_.size() || relu_output_) h = relu(h);
    }
    return h;
  }

  Tensor forward(const Tensor& x) const {
    Graph g;
    return forward(g, g.constant(x)).value();
  }

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  void check_width(const Tensor& x, const char* who) const {
    if (x.rank() != 2 || x.cols() != in_dim()) {
      throw ShapeError(std::string(who) + ": input shape " + shape_string(x.shape()) + " does not match input width " +
                       std::to_string(in_dim()));
    }
  }

  std::vector<std::size_t> widths_;
  bool relu_output_ = false;
  std::uint64_t seed_ = 0;
  std::vector<Linear> layers_;
};

/// Feature extractor: input features -> hidden layers -> representation of width H.
struct Featurizer {
  Mlp net;

  Featurizer() = default;
  Featurizer(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t feature_dim, std::uint64_t seed) {
    std::vector<std::size_t> widths{input_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(feature_dim);
    net = Mlp(std::move(widths), /*relu_output=*/true, seed);
  }
  explicit Featurizer(Mlp m) : net(std::move(m)) {}

  std::size_t input_dim() const { return net.in_dim(); }
  std::size_t feature_dim() const { return net.out_dim(); }
};

/// Linear map from representation to class logits.
struct Classifier {
  Mlp net;

  Classifier() = default;
  Classifier(std::size_t feature_dim, std::size_t n_classes, std::uint64_t seed)
      : net({feature_dim, n_classes}, /*relu_output=*/false, seed) {}
  explicit Classifier(Mlp m) : net(std::move(m)) {}

  std::size_t feature_dim() const { return net.in_dim(); }
  std::size_t n_classes() const { return net.out_dim(); }
};

inline Tensor featurize(const Featurizer& f, const Tensor& x) { return f.net.forward(x); }
inline Tensor classify(const Classifier& c, const Tensor& z) { return c.net.forward(z); }

// ---------------------------------------------------------------------------
// serialization: weights are decimal strings with 17 significant digits,
// which round-trips IEEE doubles exactly.

namespace detail {

inline nlohmann::json tensor_strings(const Tensor& t) {
  nlohmann::json arr = nlohmann::json::array();
  char buf[32];
  for (double v : t.data()) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    arr.push_back(buf);
  }
  return arr;
}

inline void read_tensor_strings(const nlohmann::json& arr, Tensor& t) {
  if (!arr.is_array() || arr.size() != t.size()) {
    throw DataError("checkpoint: expected " + std::to_string(t.size()) + " values for tensor " + shape_string(t.shape()));
  }
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::strtod(arr[i].get<std::string>().c_str(), nullptr);
}

}  // namespace detail

inline nlohmann::json Mlp::to_json() const {
  nlohmann::json j;
  j["widths"] = widths_;
  j["relu_output"] = relu_output_;
  j["seed"] = seed_;
  nlohmann::json layers = nlohmann::json::array();
  for (const Linear& l : layers_) layers.push_back({{"weight", detail::tensor_strings(l.weight)}, {"bias", detail::tensor_strings(l.bias)}});
  j["layers"] = std::move(layers);
  return j;
}

inline Mlp Mlp::from_json(const nlohmann::json& j) {
  Mlp m(j.at("widths").get<std::vector<std::size_t>>(), j.at("relu_output").get<bool>(), j.at("seed").get<std::uint64_t>());
  const auto& layers = j.at("layers");
  if (layers.size() != m.layers_.size()) throw DataError("checkpoint: layer count does not match widths");
  for (std::size_t l = 0; l < m.layers_.size(); ++l) {
    detail::read_tensor_strings(layers[l].at("weight"), m.layers_[l].weight);
    detail::read_tensor_strings(layers[l].at("bias"), m.layers_[l].bias);
  }
  return m;
}

}  // namespace covsda
