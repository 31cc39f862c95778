#pragma once

// Joint optimization of featurizer, classifier and estimator with
// domain-balanced batches; leave-one-domain-out evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "covsda/dataset.hpp"
#include "covsda/director.hpp"
#include "covsda/errors.hpp"
#include "covsda/estimator.hpp"
#include "covsda/feature_batch.hpp"
#include "covsda/metrics.hpp"
#include "covsda/model.hpp"
#include "covsda/optim.hpp"
#include "covsda/random.hpp"
#include "covsda/risk.hpp"

namespace covsda {

enum class Method { kErm, kIrmv1, kVrex, kVirmRandom, kOurs };

inline Method parse_method(const std::string& s) {
  if (s == "erm") return Method::kErm;
  if (s == "irmv1") return Method::kIrmv1;
  if (s == "vrex") return Method::kVrex;
  if (s == "virm_random") return Method::kVirmRandom;
  if (s == "ours") return Method::kOurs;
  throw ConfigError("unknown method '" + s + "' (expected erm, irmv1, vrex, virm_random or ours)");
}
inline std::string to_string(Method m) {
  switch (m) {
    case Method::kErm: return "erm";
    case Method::kIrmv1: return "irmv1";
    case Method::kVrex: return "vrex";
    case Method::kVirmRandom: return "virm_random";
    case Method::kOurs: return "ours";
  }
  return "?";
}

inline bool uses_augmentation(Method m) { return m == Method::kVirmRandom || m == Method::kOurs; }

struct OptimConfig {
  double lr = 1e-4;
  int batch_size = 256;
  int epochs = 60;
  std::vector<int> milestones{30, 45};
  double gamma = 0.1;
  AdamConfig adam;
};

struct ModelConfig {
  std::vector<std::size_t> hidden{64, 64};
  std::size_t feature_dim = 32;
  std::size_t estimator_hidden = 128;
  DecoderInput decoder_input = DecoderInput::kAugmented;
};

struct DataSource {
  /// Synthetic data when set; its seed is replaced by the run seed.
  std::optional<GeneratorConfig> generator = GeneratorConfig{};
  std::string path;
  FeatureFormat format = FeatureFormat::kCsv;
};

struct RunConfig {
  Method method = Method::kOurs;
  DataSource data;
  LossConfig loss;
  DirectorConfig director;
  ModelConfig model;
  OptimConfig optim;
  double validation_fraction = 0.2;
  /// Held-out domain for the single-split `train` entry point.
  int held_out = 0;
  /// Negate the spurious class correlation of the held-out domain (synthetic data only).
  bool flip_held_out = true;
  std::uint64_t seed = 0;

  /// 100 epochs with decay at 50 and 75.
  static RunConfig long_schedule_preset() {
    RunConfig c;
    c.optim.epochs = 100;
    c.optim.milestones = {50, 75};
    return c;
  }

  /// Loss settings implied by the method.
  LossConfig effective_loss() const {
    LossConfig l = loss;
    switch (method) {
      case Method::kErm: l.penalty = PenaltyKind::kErm; break;
      case Method::kIrmv1: l.penalty = PenaltyKind::kIrmv1; break;
      case Method::kVrex: l.penalty = PenaltyKind::kVrex; break;
      case Method::kVirmRandom:
      case Method::kOurs: break;
    }
    return l;
  }

  void validate() const {
    loss.validate();
    if (!(optim.lr >= 0.0)) throw ConfigError("optim: lr must be >= 0");
    if (optim.batch_size < 2) throw ConfigError("optim: batch_size must be >= 2");
    if (optim.epochs < 1) throw ConfigError("optim: epochs must be >= 1");
    if (!(optim.gamma > 0.0)) throw ConfigError("optim: gamma must be > 0");
    if (!(optim.adam.weight_decay >= 0.0)) throw ConfigError("optim: weight_decay must be >= 0");
    if (!(optim.adam.beta1 >= 0.0 && optim.adam.beta1 < 1.0 && optim.adam.beta2 >= 0.0 && optim.adam.beta2 < 1.0)) {
      throw ConfigError("optim: betas must lie in [0, 1)");
    }
    if (!(optim.adam.eps > 0.0)) throw ConfigError("optim: eps must be > 0");
    if (model.feature_dim == 0 || model.estimator_hidden == 0) throw ConfigError("model: widths must be positive");
    for (std::size_t h : model.hidden)
      if (h == 0) throw ConfigError("model: widths must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) throw ConfigError("validation_fraction must lie in [0, 1)");
    if (data.generator) {
      data.generator->validate();
    } else if (data.path.empty()) {
      throw ConfigError("data: either a generator or a path is required");
    }
    Director check(director);
  }
};

struct EpochRecord {
  double total_loss = 0.0;
  double mean_risk = 0.0;
  double penalty = 0.0;
  double l_phi = 0.0;
  MetricRow validation;
};

using TrainHistory = std::vector<EpochRecord>;

struct Checkpoint {
  Featurizer featurizer;
  Classifier classifier;
  std::optional<EstimatorParams> estimator;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Checkpoint best;
  int best_epoch = -1;
  TrainHistory history;
};

// ---------------------------------------------------------------------------

/// Softmax probabilities of the clean pipeline. Never touches director or estimator.
inline Tensor predict_proba(const Featurizer& f, const Classifier& c, const Tensor& x) {
  Graph g;
  if (x.rank() != 2 || x.cols() != f.input_dim()) {
    throw ShapeError("evaluate: feature shape " + shape_string(x.shape()) + " does not match model input width " +
                     std::to_string(f.input_dim()));
  }
  Var z = f.net.forward(g, g.constant(x));
  return softmax(c.net.forward(g, z)).value();
}

inline MetricRow evaluate(const Featurizer& f, const Classifier& c, const MultiDomainDataset& ds, int domain = -1,
                          std::vector<std::string>* warnings = nullptr) {
  return compute_metrics(predict_proba(f, c, ds.features), ds.labels, domain, warnings);
}

inline MetricRow evaluate(const Checkpoint& ck, const MultiDomainDataset& ds, int domain = -1) {
  return evaluate(ck.featurizer, ck.classifier, ds, domain);
}

/// Per-domain metrics averaged over the domains present in `ds`.
inline MetricRow evaluate_domain_average(const Featurizer& f, const Classifier& c, const MultiDomainDataset& ds) {
  std::vector<MetricRow> rows;
  for (int d : ds.domain_set()) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.domains[i] == d) idx.push_back(i);
    rows.push_back(evaluate(f, c, ds.subset(idx), d));
  }
  return average_rows(rows);
}

/// Equal per-domain quota per batch; every domain is reshuffled each epoch
/// and cycled when shorter than the longest one.
class BalancedSampler {
 public:
  BalancedSampler(std::span<const int> domains, int batch_size) {
    for (std::size_t i = 0; i < domains.size(); ++i) by_domain_[domains[i]].push_back(i);
    if (by_domain_.empty()) throw DataError("sampler: empty training set");
    quota_ = std::max<std::size_t>(1, static_cast<std::size_t>(batch_size) / by_domain_.size());
    std::size_t longest = 0;
    for (const auto& [d, rows] : by_domain_) longest = std::max(longest, rows.size());
    batches_ = (longest + quota_ - 1) / quota_;
  }

  std::size_t batches_per_epoch() const { return batches_; }
  std::size_t quota() const { return quota_; }

  std::vector<std::vector<std::size_t>> epoch(Rng& rng) {
    for (auto& [d, rows] : by_domain_) std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<std::vector<std::size_t>> out(batches_);
    for (std::size_t b = 0; b < batches_; ++b)
      for (const auto& [d, rows] : by_domain_)
        for (std::size_t k = 0; k < quota_; ++k) out[b].push_back(rows[(b * quota_ + k) % rows.size()]);
    return out;
  }

 private:
  std::map<int, std::vector<std::size_t>> by_domain_;
  std::size_t quota_ = 1;
  std::size_t batches_ = 0;
};

struct BatchObjective {
  Var total;
  RiskVector risks;
  std::optional<Var> l_phi;
  std::optional<Var> irm;
  /// Differentiable leaves: featurizer, classifier, then estimator parameters.
  std::vector<Var> param_vars;
};

/// Training objective on one batch. `fixed_direction` replaces the director's
/// mask (treated as a constant either way).
inline BatchObjective batch_objective(Graph& g, const Checkpoint& ck, const RunConfig& cfg, const MultiDomainDataset& batch,
                                      Director& director, Rng& noise_rng, Rng& mask_rng,
                                      const std::optional<Tensor>& fixed_direction = std::nullopt) {
  const LossConfig loss_cfg = cfg.effective_loss();
  const std::size_t H = ck.featurizer.feature_dim();
  BatchObjective out;
  Var x = g.constant(batch.features);
  Var z = ck.featurizer.net.forward(g, x, &out.param_vars);
  Var head_input = z;
  std::vector<Var> est_vars;
  if (uses_augmentation(cfg.method)) {
    if (!ck.estimator) throw ConfigError("batch_objective: augmentation needs an estimator");
    Tensor direction;
    if (fixed_direction) {
      direction = *fixed_direction;
    } else {
      DirectionMask mask = director(make_feature_batch(z.value(), batch.labels, batch.domains));
      if (cfg.method == Method::kVirmRandom) mask = random_mask_like(mask, mask_rng);
      direction = direction_matrix(mask, batch.domains, H);
    }
    Var d = g.constant(std::move(direction));
    AugmentDistribution dist = predict(g, *ck.estimator, z, &est_vars);
    Var xi = sample_xi(dist, noise_rng);
    Var z_aug = augment(z, d, xi);
    reconstruct(dist, *ck.estimator, cfg.model.decoder_input == DecoderInput::kAugmented ? z_aug : z, &est_vars);
    out.l_phi = estimator_loss(dist, z);
    if (loss_cfg.augment_risks) head_input = z_aug;
  }
  Var logits = ck.classifier.net.forward(g, head_input, &out.param_vars);
  out.param_vars.insert(out.param_vars.end(), est_vars.begin(), est_vars.end());
  out.risks = domain_risks(logits, batch.labels, batch.domains);
  if (loss_cfg.penalty == PenaltyKind::kIrmv1) out.irm = irmv1_penalty(logits, batch.labels, batch.domains);
  out.total = total_loss(out.risks, out.l_phi, loss_cfg, out.irm);
  return out;
}

inline TrainResult train(const RunConfig& cfg, const LodoSplit& split) {
  cfg.validate();
  const LossConfig loss_cfg = cfg.effective_loss();
  if (loss_cfg.penalty != PenaltyKind::kErm && split.train.domain_set().size() < 2) {
    throw ConfigError("train: invariance penalties need at least two training domains");
  }

  auto [fit, val] = split_validation(split.train, cfg.validation_fraction, cfg.seed);
  const std::size_t F = fit.n_features();
  const std::size_t H = cfg.model.feature_dim;
  const auto C = static_cast<std::size_t>(fit.n_classes);

  Checkpoint ck;
  ck.seed = cfg.seed;
  ck.featurizer = Featurizer(F, cfg.model.hidden, H, cfg.seed * 7919 + 1);
  ck.classifier = Classifier(H, C, cfg.seed * 7919 + 2);
  if (uses_augmentation(cfg.method)) ck.estimator = EstimatorParams(H, cfg.model.estimator_hidden, cfg.seed * 7919 + 3);

  std::vector<Tensor*> params = ck.featurizer.net.parameters();
  for (Tensor* p : ck.classifier.net.parameters()) params.push_back(p);
  if (ck.estimator)
    for (Tensor* p : ck.estimator->parameters()) params.push_back(p);
  Adam opt(params, cfg.optim.adam);

  Director director(cfg.director);
  BalancedSampler sampler(fit.domains, cfg.optim.batch_size);
  Rng batch_rng = make_rng(cfg.seed, 11);
  Rng noise_rng = make_rng(cfg.seed, 12);
  Rng mask_rng = make_rng(cfg.seed, 13);

  TrainResult result;
  double best_auc = -1.0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const double lr = step_lr(cfg.optim.lr, cfg.optim.milestones, cfg.optim.gamma, epoch);
    EpochRecord rec;
    const auto batches = sampler.epoch(batch_rng);
    for (std::size_t step = 0; step < batches.size(); ++step) {
      const MultiDomainDataset batch = fit.subset(batches[step]);
      Graph g;
      const BatchObjective obj = batch_objective(g, ck, cfg, batch, director, noise_rng, mask_rng);
      const double tv = obj.total.value().item();
      if (!std::isfinite(tv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                           " (method " + to_string(cfg.method) + ", seed " + std::to_string(cfg.seed) + ")");
      }
      g.backward(obj.total);
      std::vector<Tensor> grads;
      grads.reserve(obj.param_vars.size());
      for (Var v : obj.param_vars) grads.push_back(g.grad(v));
      opt.step(grads, lr);

      rec.total_loss += tv;
      rec.mean_risk += mean(obj.risks.risks).value().item();
      switch (loss_cfg.penalty) {
        case PenaltyKind::kVrex: rec.penalty += vrex_penalty(obj.risks).value().item(); break;
        case PenaltyKind::kIrmv1: rec.penalty += obj.irm->value().item(); break;
        case PenaltyKind::kErm: break;
      }
      if (obj.l_phi) rec.l_phi += obj.l_phi->value().item();
    }
    const double nb = static_cast<double>(batches.size());
    rec.total_loss /= nb;
    rec.mean_risk /= nb;
    rec.penalty /= nb;
    rec.l_phi /= nb;
    rec.validation = evaluate_domain_average(ck.featurizer, ck.classifier, val.size() ? val : fit);
    if (rec.validation.auc > best_auc) {
      best_auc = rec.validation.auc;
      result.best = ck;
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------

inline MultiDomainDataset load_dataset(const RunConfig& cfg, int flip_domain = -1) {
  if (cfg.data.generator) {
    GeneratorConfig g = *cfg.data.generator;
    g.seed = cfg.seed;
    g.flip_domain = flip_domain;
    return generate(g);
  }
  return load_features(cfg.data.path, cfg.data.format);
}

struct FoldResult {
  int held_out = -1;
  MetricRow test;
  MetricRow validation;
  int best_epoch = -1;
  TrainHistory history;
  Checkpoint checkpoint;
};

struct LodoReport {
  std::vector<FoldResult> folds;
  MetricRow average;
};

inline FoldResult run_fold(const RunConfig& cfg, int held_out) {
  const bool flip = cfg.flip_held_out && cfg.data.generator.has_value();
  const MultiDomainDataset ds = load_dataset(cfg, flip ? held_out : -1);
  const LodoSplit split = split_leave_one_out(ds, held_out);
  TrainResult tr = train(cfg, split);
  FoldResult fr;
  fr.held_out = held_out;
  fr.test = evaluate(tr.best, split.test, held_out);
  fr.validation = tr.history.at(static_cast<std::size_t>(tr.best_epoch)).validation;
  fr.best_epoch = tr.best_epoch;
  fr.history = std::move(tr.history);
  fr.checkpoint = std::move(tr.best);
  return fr;
}

/// One independent model per held-out domain. Folds may run on up to
/// `threads` threads; results do not depend on the thread count.
inline LodoReport lodo_run(const RunConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  const std::vector<int> domains = load_dataset(cfg).domain_set();
  std::vector<FoldResult> folds(domains.size());
  std::vector<std::exception_ptr> errors(domains.size());
  auto work = [&](std::size_t k) {
    try {
      folds[k] = run_fold(cfg, domains[k]);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  if (threads <= 1) {
    for (std::size_t k = 0; k < domains.size(); ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    while (next < domains.size()) {
      pool.clear();
      for (unsigned t = 0; t < threads && next < domains.size(); ++t, ++next) pool.emplace_back(work, next);
      for (auto& th : pool) th.join();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  LodoReport rep;
  rep.folds = std::move(folds);
  std::vector<MetricRow> rows;
  for (const auto& f : rep.folds) rows.push_back(f.test);
  rep.average = average_rows(rows);
  return rep;
}

}  // namespace covsda
