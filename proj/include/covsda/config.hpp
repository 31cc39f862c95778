#pragma once

// JSON forms of run configs, checkpoints and reports. Config readers are strict:
// unknown keys are rejected so a typo never silently falls back to a default.

#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"

#include "covsda/analysis.hpp"
#include "covsda/errors.hpp"
#include "covsda/trainer.hpp"

namespace covsda {

using nlohmann::json;

inline constexpr int kReportSchemaVersion = 1;

namespace detail {

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
}

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  require_object(j, where);
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T, class Parse>
void read_enum(const json& j, const char* key, T& out, Parse parse, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
  out = parse(j.at(key).get<std::string>());
}

}  // namespace detail

// --- generator --------------------------------------------------------------

inline json to_json(const GeneratorConfig& g) {
  return {{"n_domains", g.n_domains},
          {"n_classes", g.n_classes},
          {"n_per_class_per_domain", g.n_per_class_per_domain},
          {"invariant_dims", g.invariant_dims},
          {"spurious_dims", g.spurious_dims},
          {"class_separation", g.class_separation},
          {"domain_shift_scale", g.domain_shift_scale},
          {"label_noise", g.label_noise},
          {"spurious_strength", g.spurious_strength},
          {"flip_domain", g.flip_domain},
          {"seed", g.seed}};
}

inline GeneratorConfig generator_from_json(const json& j, const std::string& where = "generator") {
  detail::reject_unknown(j, where,
                         {"n_domains", "n_classes", "n_per_class_per_domain", "invariant_dims", "spurious_dims",
                          "class_separation", "domain_shift_scale", "label_noise", "spurious_strength", "flip_domain",
                          "seed"});
  GeneratorConfig g;
  detail::read_opt(j, "n_domains", g.n_domains, where);
  detail::read_opt(j, "n_classes", g.n_classes, where);
  detail::read_opt(j, "n_per_class_per_domain", g.n_per_class_per_domain, where);
  detail::read_opt(j, "invariant_dims", g.invariant_dims, where);
  detail::read_opt(j, "spurious_dims", g.spurious_dims, where);
  detail::read_opt(j, "class_separation", g.class_separation, where);
  detail::read_opt(j, "domain_shift_scale", g.domain_shift_scale, where);
  detail::read_opt(j, "label_noise", g.label_noise, where);
  detail::read_opt(j, "spurious_strength", g.spurious_strength, where);
  detail::read_opt(j, "flip_domain", g.flip_domain, where);
  detail::read_opt(j, "seed", g.seed, where);
  g.validate();
  return g;
}

// --- run config -------------------------------------------------------------

inline json to_json(const RunConfig& c) {
  json data;
  if (c.data.generator) {
    data["generator"] = to_json(*c.data.generator);
  } else {
    data["path"] = c.data.path;
    data["format"] = c.data.format == FeatureFormat::kCsv ? "csv" : "jsonl";
  }
  return {
      {"method", to_string(c.method)},
      {"data", data},
      {"loss",
       {{"alpha", c.loss.alpha},
        {"vrex_lambda", c.loss.vrex_lambda},
        {"irm_lambda", c.loss.irm_lambda},
        {"penalty", to_string(c.loss.penalty)},
        {"augment_risks", c.loss.augment_risks}}},
      {"director",
       {{"mode", to_string(c.director.mode)},
        {"score", to_string(c.director.score)},
        {"reduction", to_string(c.director.reduction)},
        {"ema_decay", c.director.ema_decay}}},
      {"model",
       {{"hidden", c.model.hidden},
        {"feature_dim", c.model.feature_dim},
        {"estimator_hidden", c.model.estimator_hidden},
        {"decoder_input", to_string(c.model.decoder_input)}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"batch_size", c.optim.batch_size},
        {"epochs", c.optim.epochs},
        {"milestones", c.optim.milestones},
        {"gamma", c.optim.gamma},
        {"beta1", c.optim.adam.beta1},
        {"beta2", c.optim.adam.beta2},
        {"eps", c.optim.adam.eps},
        {"weight_decay", c.optim.adam.weight_decay}}},
      {"validation_fraction", c.validation_fraction},
      {"held_out", c.held_out},
      {"flip_held_out", c.flip_held_out},
      {"seed", c.seed},
  };
}

/// Missing keys keep their defaults; the result is validated.
inline RunConfig run_config_from_json(const json& j) {
  detail::reject_unknown(j, "config",
                         {"method", "data", "loss", "director", "model", "optim", "validation_fraction", "held_out",
                          "flip_held_out", "seed"});
  RunConfig c;
  detail::read_enum(j, "method", c.method, parse_method, "config");
  if (j.contains("data")) {
    const json& d = j.at("data");
    detail::reject_unknown(d, "config.data", {"generator", "path", "format"});
    if (d.contains("path")) {
      if (d.contains("generator")) throw ConfigError("config.data: give either 'generator' or 'path', not both");
      c.data.generator.reset();
      detail::read_opt(d, "path", c.data.path, "config.data");
      detail::read_enum(d, "format", c.data.format, parse_format, "config.data");
    } else if (d.contains("generator")) {
      c.data.generator = generator_from_json(d.at("generator"), "config.data.generator");
    }
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    detail::reject_unknown(l, "config.loss", {"alpha", "vrex_lambda", "irm_lambda", "penalty", "augment_risks"});
    detail::read_opt(l, "alpha", c.loss.alpha, "config.loss");
    detail::read_opt(l, "vrex_lambda", c.loss.vrex_lambda, "config.loss");
    detail::read_opt(l, "irm_lambda", c.loss.irm_lambda, "config.loss");
    detail::read_enum(l, "penalty", c.loss.penalty, parse_penalty, "config.loss");
    detail::read_opt(l, "augment_risks", c.loss.augment_risks, "config.loss");
  }
  if (j.contains("director")) {
    const json& d = j.at("director");
    detail::reject_unknown(d, "config.director", {"mode", "score", "reduction", "ema_decay"});
    detail::read_enum(d, "mode", c.director.mode, parse_direction_mode, "config.director");
    detail::read_enum(d, "score", c.director.score, parse_score_kind, "config.director");
    detail::read_enum(d, "reduction", c.director.reduction, parse_reduction, "config.director");
    detail::read_opt(d, "ema_decay", c.director.ema_decay, "config.director");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::reject_unknown(m, "config.model", {"hidden", "feature_dim", "estimator_hidden", "decoder_input"});
    detail::read_opt(m, "hidden", c.model.hidden, "config.model");
    detail::read_opt(m, "feature_dim", c.model.feature_dim, "config.model");
    detail::read_opt(m, "estimator_hidden", c.model.estimator_hidden, "config.model");
    detail::read_enum(m, "decoder_input", c.model.decoder_input, parse_decoder_input, "config.model");
  }
  if (j.contains("optim")) {
    const json& o = j.at("optim");
    detail::reject_unknown(o, "config.optim",
                           {"lr", "batch_size", "epochs", "milestones", "gamma", "beta1", "beta2", "eps", "weight_decay"});
    detail::read_opt(o, "lr", c.optim.lr, "config.optim");
    detail::read_opt(o, "batch_size", c.optim.batch_size, "config.optim");
    detail::read_opt(o, "epochs", c.optim.epochs, "config.optim");
    detail::read_opt(o, "milestones", c.optim.milestones, "config.optim");
    detail::read_opt(o, "gamma", c.optim.gamma, "config.optim");
    detail::read_opt(o, "beta1", c.optim.adam.beta1, "config.optim");
    detail::read_opt(o, "beta2", c.optim.adam.beta2, "config.optim");
    detail::read_opt(o, "eps", c.optim.adam.eps, "config.optim");
    detail::read_opt(o, "weight_decay", c.optim.adam.weight_decay, "config.optim");
  }
  detail::read_opt(j, "validation_fraction", c.validation_fraction, "config");
  detail::read_opt(j, "held_out", c.held_out, "config");
  detail::read_opt(j, "flip_held_out", c.flip_held_out, "config");
  detail::read_opt(j, "seed", c.seed, "config");
  c.validate();
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "': invalid JSON (" + e.what() + ")");
  }
}

inline RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_json_file(path)); }

// --- checkpoints ------------------------------------------------------------

inline json to_json(const Checkpoint& ck) {
  json j{{"seed", ck.seed}, {"featurizer", ck.featurizer.net.to_json()}, {"classifier", ck.classifier.net.to_json()}};
  if (ck.estimator) j["estimator"] = {{"encoder", ck.estimator->encoder.to_json()}, {"decoder", ck.estimator->decoder.to_json()}};
  return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
  try {
    Checkpoint ck;
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.featurizer = Featurizer(Mlp::from_json(j.at("featurizer")));
    ck.classifier = Classifier(Mlp::from_json(j.at("classifier")));
    if (j.contains("estimator")) {
      EstimatorParams e;
      e.encoder = Mlp::from_json(j.at("estimator").at("encoder"));
      e.decoder = Mlp::from_json(j.at("estimator").at("decoder"));
      ck.estimator = std::move(e);
    }
    if (ck.featurizer.feature_dim() != ck.classifier.feature_dim()) {
      throw DataError("checkpoint: featurizer output width does not match classifier input width");
    }
    return ck;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

// --- reports ----------------------------------------------------------------

inline json to_json(const MetricRow& r) {
  json j{{"auc", r.auc}, {"acc", r.acc}, {"f1", r.f1}};
  if (r.domain >= 0) j["domain"] = r.domain;
  return j;
}

inline json to_json(const TrainHistory& h) {
  json arr = json::array();
  for (std::size_t e = 0; e < h.size(); ++e) {
    arr.push_back({{"epoch", e},
                   {"total_loss", h[e].total_loss},
                   {"mean_risk", h[e].mean_risk},
                   {"penalty", h[e].penalty},
                   {"l_phi", h[e].l_phi},
                   {"validation", to_json(h[e].validation)}});
  }
  return arr;
}

inline json report_header(const std::string& kind, const RunConfig& cfg) {
  return {{"schema_version", kReportSchemaVersion}, {"kind", kind}, {"seed", cfg.seed}, {"config", to_json(cfg)}};
}

inline json to_json(const FoldResult& f) {
  return {{"held_out", f.held_out},
          {"test", to_json(f.test)},
          {"validation", to_json(f.validation)},
          {"best_epoch", f.best_epoch},
          {"history", to_json(f.history)}};
}

/// Report for a leave-one-domain-out sweep: one row per held-out domain plus the average.
inline json lodo_report_json(const RunConfig& cfg, const LodoReport& rep) {
  json j = report_header("lodo", cfg);
  json rows = json::array();
  for (const auto& f : rep.folds) rows.push_back(to_json(f.test));
  j["rows"] = rows;
  j["average"] = to_json(rep.average);
  json folds = json::array();
  for (const auto& f : rep.folds) folds.push_back(to_json(f));
  j["folds"] = folds;
  return j;
}

inline json to_json(const DomainDistanceMatrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.distance.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index k = 0; k < m.distance.cols(); ++k) r.push_back(m.distance(i, k));
    rows.push_back(r);
  }
  return {{"domains", m.domain_ids}, {"matrix", rows}, {"mean_offdiagonal", m.mean_offdiagonal()}};
}

}  // namespace covsda
