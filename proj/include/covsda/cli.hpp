#pragma once

// Command-line front end. Every subcommand reads a RunConfig, applies the
// --seed override, and writes its outputs into --out only.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage/config, 3 data, 4 numeric.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "covsda/analysis.hpp"
#include "covsda/config.hpp"
#include "covsda/director.hpp"
#include "covsda/estimator.hpp"
#include "covsda/trainer.hpp"

namespace covsda::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

struct CommandSpec {
  std::string subcommand;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::string checkpoint_path;
  unsigned threads = 1;
};

struct ParseResult {
  std::optional<CommandSpec> spec;
  int exit_code = kOk;  // meaningful when spec is empty
};

inline ParseResult parse_args(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Covariance-guided semantic augmentation for domain generalization"};
  app.name(argc > 0 ? std::filesystem::path(argv[0]).filename().string() : "covsda");
  app.require_subcommand(1);
  CommandSpec spec;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", spec.config_path, "Run config JSON")->check(CLI::ExistingFile);
    if (config_required) c->required();
    sub->add_option("--out", spec.out_dir, "Output directory")->required();
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_flag("--quiet", spec.quiet, "Suppress progress output");
  };
  CLI::App* gen = app.add_subcommand("generate", "Write the synthetic dataset as CSV and JSONL");
  common(gen, false);
  CLI::App* train = app.add_subcommand("train", "Train on all domains but `held_out` and evaluate on it");
  common(train, true);
  CLI::App* lodo = app.add_subcommand("lodo", "Leave-one-domain-out sweep");
  common(lodo, true);
  lodo->add_option("--threads", spec.threads, "Folds trained concurrently")->check(CLI::PositiveNumber);
  CLI::App* otdd_cmd = app.add_subcommand("analyze-otdd", "Pairwise domain OTDD matrix");
  common(otdd_cmd, true);
  CLI::App* dirs = app.add_subcommand("analyze-directions", "Director scores and masks on the full dataset");
  common(dirs, true);
  CLI::App* proj = app.add_subcommand("export-projection", "2D PCA coordinates of clean and augmented features");
  common(proj, true);
  for (CLI::App* sub : {otdd_cmd, dirs, proj}) {
    sub->add_option("--checkpoint", spec.checkpoint_path, "Use this checkpoint's featurizer instead of raw inputs")
        ->check(CLI::ExistingFile);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return {std::nullopt, code == 0 ? kOk : kUsage};
  }
  for (CLI::App* sub : app.get_subcommands()) {
    spec.subcommand = sub->get_name();
    if (sub->count("--seed")) spec.seed = seed;
  }
  return {spec, kOk};
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// `{subcommand}-{seed}-{timestamp}`, made unique inside `dir` so sweeps never clobber.
inline std::string unique_stem(const std::filesystem::path& dir, const std::string& sub, std::uint64_t seed,
                               std::initializer_list<const char*> extensions) {
  const std::string base = sub + "-" + std::to_string(seed) + "-" + utc_timestamp();
  for (int k = 0;; ++k) {
    const std::string stem = k == 0 ? base : base + "-" + std::to_string(k);
    bool taken = false;
    for (const char* ext : extensions) taken = taken || std::filesystem::exists(dir / (stem + ext));
    if (!taken) return stem;
  }
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw DataError("cannot write '" + p.string() + "'");
  f << j.dump(2) << '\n';
}

inline Tensor features_for_analysis(const MultiDomainDataset& ds, const std::optional<Checkpoint>& ck) {
  if (!ck) return ds.features;
  if (ck->featurizer.input_dim() != ds.n_features()) {
    throw DataError("checkpoint expects " + std::to_string(ck->featurizer.input_dim()) + " input features, dataset has " +
                    std::to_string(ds.n_features()));
  }
  return featurize(ck->featurizer, ds.features);
}

inline double jaccard(const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
  std::size_t inter = 0;
  for (std::size_t x : a) inter += b.count(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

class Runner {
 public:
  Runner(CommandSpec spec, std::ostream& log) : spec_(std::move(spec)), log_(log) {}

  int run() {
    cfg_ = spec_.config_path.empty() ? RunConfig{} : load_run_config(spec_.config_path);
    if (spec_.seed) cfg_.seed = *spec_.seed;
    std::filesystem::create_directories(spec_.out_dir);
    if (!spec_.checkpoint_path.empty()) checkpoint_ = checkpoint_from_json(read_json_file(spec_.checkpoint_path));
    const std::string& s = spec_.subcommand;
    if (s == "generate") return generate_cmd();
    if (s == "train") return train_cmd();
    if (s == "lodo") return lodo_cmd();
    if (s == "analyze-otdd") return otdd_cmd();
    if (s == "analyze-directions") return directions_cmd();
    if (s == "export-projection") return projection_cmd();
    throw ConfigError("unknown subcommand '" + s + "'");
  }

 private:
  std::filesystem::path out_path(const std::string& stem, const char* ext) const {
    return std::filesystem::path(spec_.out_dir) / (stem + ext);
  }
  void note(const std::string& msg) {
    if (!spec_.quiet) log_ << msg << '\n';
  }
  json header(const std::string& kind) const {
    json j = report_header(kind, cfg_);
    if (!spec_.checkpoint_path.empty()) j["checkpoint"] = spec_.checkpoint_path;
    return j;
  }

  int generate_cmd() {
    if (!cfg_.data.generator) throw ConfigError("generate: the config has no data.generator section");
    const MultiDomainDataset ds = load_dataset(cfg_);
    const std::string stem = detail::unique_stem(spec_.out_dir, "generate", cfg_.seed, {".json", ".csv", ".jsonl"});
    {
      std::ofstream f(out_path(stem, ".csv"));
      write_csv_features(f, ds);
    }
    {
      std::ofstream f(out_path(stem, ".jsonl"));
      write_jsonl_features(f, ds);
    }
    json j = header("generate");
    j["rows"] = ds.size();
    j["n_features"] = ds.n_features();
    j["invariant_dims"] = ds.meta.invariant_dims;
    j["spurious_dims"] = ds.meta.spurious_dims;
    j["csv"] = stem + ".csv";
    j["jsonl"] = stem + ".jsonl";
    detail::write_json(out_path(stem, ".json"), j);
    note("wrote " + out_path(stem, ".csv").string() + " and " + out_path(stem, ".jsonl").string());
    return kOk;
  }

  int train_cmd() {
    note("training " + to_string(cfg_.method) + ", held-out domain " + std::to_string(cfg_.held_out));
    FoldResult fr = run_fold(cfg_, cfg_.held_out);
    const std::string stem = detail::unique_stem(spec_.out_dir, "train", cfg_.seed, {".json", ".checkpoint.json"});
    json j = header("train");
    j["rows"] = json::array({to_json(fr.test)});
    j["average"] = to_json(fr.test);
    j["fold"] = to_json(fr);
    j["checkpoint_file"] = stem + ".checkpoint.json";
    detail::write_json(out_path(stem, ".checkpoint.json"), to_json(fr.checkpoint));
    detail::write_json(out_path(stem, ".json"), j);
    note("held-out acc " + std::to_string(fr.test.acc) + ", auc " + std::to_string(fr.test.auc) + " -> " +
         out_path(stem, ".json").string());
    return kOk;
  }

  int lodo_cmd() {
    note("lodo sweep, method " + to_string(cfg_.method) + ", seed " + std::to_string(cfg_.seed));
    const LodoReport rep = lodo_run(cfg_, spec_.threads);
    const std::string stem = detail::unique_stem(spec_.out_dir, "lodo", cfg_.seed, {".json"});
    detail::write_json(out_path(stem, ".json"), lodo_report_json(cfg_, rep));
    for (const auto& f : rep.folds)
      note("  domain " + std::to_string(f.held_out) + ": acc " + std::to_string(f.test.acc) + ", auc " +
           std::to_string(f.test.auc));
    note("average acc " + std::to_string(rep.average.acc) + " -> " + out_path(stem, ".json").string());
    return kOk;
  }

  int otdd_cmd() {
    const MultiDomainDataset ds = load_dataset(cfg_);
    const Eigen::MatrixXd z = to_eigen(detail::features_for_analysis(ds, checkpoint_));
    const DomainDistanceMatrix m = pairwise_domain_otdd(z, ds.labels, ds.domains);
    const std::string stem = detail::unique_stem(spec_.out_dir, "analyze-otdd", cfg_.seed, {".json"});
    json j = header("analyze-otdd");
    j["feature_space"] = checkpoint_ ? "featurizer" : "input";
    j["otdd"] = to_json(m);
    detail::write_json(out_path(stem, ".json"), j);
    note("mean pairwise OTDD " + std::to_string(m.mean_offdiagonal()) + " -> " + out_path(stem, ".json").string());
    return kOk;
  }

  int directions_cmd() {
    const MultiDomainDataset ds = load_dataset(cfg_);
    const Tensor z = detail::features_for_analysis(ds, checkpoint_);
    Director director(cfg_.director);
    const DirectionMask mask = director(make_feature_batch(z, ds.labels, ds.domains));
    json domains = json::array();
    const bool planted = ds.meta.synthetic && !checkpoint_;
    const std::set<std::size_t> spurious(ds.meta.spurious_dims.begin(), ds.meta.spurious_dims.end());
    for (std::size_t k = 0; k < mask.domain_ids.size(); ++k) {
      json row{{"domain", mask.domain_ids[k]},
               {"scores", std::vector<double>(mask.scores[k].data(), mask.scores[k].data() + mask.scores[k].size())},
               {"mask", std::vector<double>(mask.masks[k].data(), mask.masks[k].data() + mask.masks[k].size())}};
      if (planted) {
        std::set<std::size_t> selected;
        for (Eigen::Index d = 0; d < mask.masks[k].size(); ++d)
          if (mask.masks[k][d] > 0.5) selected.insert(static_cast<std::size_t>(d));
        row["jaccard_with_planted"] = detail::jaccard(selected, spurious);
      }
      domains.push_back(row);
    }
    const std::string stem = detail::unique_stem(spec_.out_dir, "analyze-directions", cfg_.seed, {".json"});
    json j = header("analyze-directions");
    j["feature_space"] = checkpoint_ ? "featurizer" : "input";
    j["mode"] = to_string(mask.mode);
    if (planted) j["planted_dims"] = ds.meta.spurious_dims;
    j["domains"] = domains;
    detail::write_json(out_path(stem, ".json"), j);
    note("wrote " + out_path(stem, ".json").string());
    return kOk;
  }

  /// CSV columns: index,label,domain,pc1,pc2,aug_pc1,aug_pc2,dir_pc1,dir_pc2.
  /// `dir` is the projected direction mask; `aug` uses the checkpoint's
  /// estimator when present and unit magnitude otherwise.
  int projection_cmd() {
    const MultiDomainDataset ds = load_dataset(cfg_);
    const Tensor z = detail::features_for_analysis(ds, checkpoint_);
    Director director(cfg_.director);
    const DirectionMask mask = director(make_feature_batch(z, ds.labels, ds.domains));
    const Tensor d = direction_matrix(mask, ds.domains, z.cols());
    Rng rng = make_rng(cfg_.seed, 21);
    Tensor xi;
    if (checkpoint_ && checkpoint_->estimator) {
      Graph g;
      AugmentDistribution dist = predict(g, *checkpoint_->estimator, g.constant(z));
      xi = sample_xi(dist, rng).value();
    } else {
      xi = normal_tensor(z.shape(), rng);
    }
    const Tensor z_aug = augment(z, d, xi);
    const PcaProjection p = pca_project(to_eigen(z), 2);
    const Eigen::MatrixXd aug = p.project(to_eigen(z_aug));
    const Eigen::MatrixXd dir = p.project_direction(to_eigen(d));
    const std::string stem = detail::unique_stem(spec_.out_dir, "export-projection", cfg_.seed, {".json", ".csv"});
    {
      std::ofstream f(out_path(stem, ".csv"));
      if (!f) throw DataError("cannot write '" + out_path(stem, ".csv").string() + "'");
      f << "index,label,domain,pc1,pc2,aug_pc1,aug_pc2,dir_pc1,dir_pc2\n";
      char buf[256];
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        std::snprintf(buf, sizeof buf, "%zu,%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", i,
                      ds.meta.label_ids.empty() ? static_cast<long long>(ds.labels[i]) : ds.meta.label_ids[ds.labels[i]],
                      ds.meta.domain_ids.empty() ? static_cast<long long>(ds.domains[i]) : ds.meta.domain_ids[ds.domains[i]],
                      p.coordinates(r, 0), p.coordinates(r, 1), aug(r, 0), aug(r, 1), dir(r, 0), dir(r, 1));
        f << buf;
      }
    }
    json j = header("export-projection");
    j["feature_space"] = checkpoint_ ? "featurizer" : "input";
    j["csv"] = stem + ".csv";
    j["explained_variance_ratio"] = {p.explained_variance_ratio[0], p.explained_variance_ratio[1]};
    detail::write_json(out_path(stem, ".json"), j);
    note("wrote " + out_path(stem, ".csv").string());
    return kOk;
  }

  CommandSpec spec_;
  std::ostream& log_;
  RunConfig cfg_;
  std::optional<Checkpoint> checkpoint_;
};

/// Full entry point; never throws.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const ParseResult parsed = parse_args(argc, argv, out, err);
  if (!parsed.spec) return parsed.exit_code;
  try {
    return Runner(*parsed.spec, err).run();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DomainError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace covsda::cli
