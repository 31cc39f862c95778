#pragma once

// Multi-domain classification data: a planted-shift Gaussian generator,
// leave-one-domain-out splitting, and CSV / JSONL feature files.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "covsda/errors.hpp"
#include "covsda/random.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

struct GeneratorConfig {
  int n_domains = 4;
  int n_classes = 3;
  int n_per_class_per_domain = 200;
  int invariant_dims = 8;
  int spurious_dims = 8;
  /// Scale of the class means on invariant dims.
  double class_separation = 0.5;
  /// Scale of every per-domain effect on spurious dims (offset, correlation jitter, noise level).
  double domain_shift_scale = 2.0;
  double label_noise = 0.0;
  /// Base strength of the class signal carried by spurious dims.
  double spurious_strength = 1.0;
  /// Domain whose spurious class correlation is negated; -1 for none.
  int flip_domain = -1;
  std::uint64_t seed = 0;

  int n_features() const { return invariant_dims + spurious_dims; }

  void validate() const {
    if (n_domains < 1 || n_classes < 2 || n_per_class_per_domain < 1) {
      throw ConfigError("generator: need n_domains >= 1, n_classes >= 2, n_per_class_per_domain >= 1");
    }
    if (invariant_dims < 0 || spurious_dims < 0 || n_features() < 1) {
      throw ConfigError("generator: dimension counts must be non-negative with at least one feature");
    }
    if (!(class_separation > 0.0)) throw ConfigError("generator: class_separation must be > 0");
    if (!(domain_shift_scale >= 0.0)) throw ConfigError("generator: domain_shift_scale must be >= 0");
    if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ConfigError("generator: label_noise must lie in [0, 0.5)");
    if (!(spurious_strength >= 0.0)) throw ConfigError("generator: spurious_strength must be >= 0");
    if (flip_domain < -1 || flip_domain >= n_domains) throw ConfigError("generator: flip_domain out of range");
  }
};

struct DatasetMeta {
  bool synthetic = false;
  GeneratorConfig generator;
  std::vector<std::size_t> invariant_dims;
  std::vector<std::size_t> spurious_dims;
  /// Planted per-domain offsets on spurious dims, [domain][spurious dim].
  std::vector<std::vector<double>> domain_offsets;
  /// Signed class-correlation strength per domain.
  std::vector<double> domain_correlation;
  /// Noise standard deviation of spurious dims per domain.
  std::vector<double> domain_noise;
  /// Original ids for each dense label / domain index (identity when generated).
  std::vector<long long> label_ids;
  std::vector<long long> domain_ids;
};

struct MultiDomainDataset {
  Tensor features;  // (N, F)
  std::vector<int> labels;
  std::vector<int> domains;
  int n_classes = 0;
  int n_domains = 0;
  DatasetMeta meta;

  std::size_t size() const { return labels.size(); }
  std::size_t n_features() const { return features.cols(); }

  /// Sorted distinct domain ids present.
  std::vector<int> domain_set() const {
    std::vector<int> d(domains);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    return d;
  }

  MultiDomainDataset subset(std::span<const std::size_t> rows) const {
    MultiDomainDataset out;
    const std::size_t f = n_features();
    out.features = Tensor(Shape{rows.size(), f});
    out.labels.reserve(rows.size());
    out.domains.reserve(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const std::size_t r = rows[k];
      for (std::size_t j = 0; j < f; ++j) out.features(k, j) = features(r, j);
      out.labels.push_back(labels[r]);
      out.domains.push_back(domains[r]);
    }
    out.n_classes = n_classes;
    out.n_domains = n_domains;
    out.meta = meta;
    return out;
  }

  void validate() const {
    const std::size_t n = labels.size();
    if (features.rank() != 2 || features.rows() != n || domains.size() != n) {
      throw DataError("dataset: features, labels and domains disagree on N");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] < 0 || labels[i] >= n_classes) throw DataError("dataset: label out of range at row " + std::to_string(i));
      if (domains[i] < 0 || domains[i] >= n_domains) throw DataError("dataset: domain out of range at row " + std::to_string(i));
    }
  }
};

struct LodoSplit {
  MultiDomainDataset train;
  MultiDomainDataset test;
  int held_out = -1;
};

// ---------------------------------------------------------------------------

/// Planted-shift benchmark. Invariant dims carry the same class signal in
/// every domain; spurious dims carry a per-domain offset, a per-domain class
/// correlation and a per-domain noise level, all scaled by domain_shift_scale.
inline MultiDomainDataset generate(const GeneratorConfig& cfg) {
  cfg.validate();
  const int E = cfg.n_domains, C = cfg.n_classes;
  const auto Fi = static_cast<std::size_t>(cfg.invariant_dims);
  const auto Fs = static_cast<std::size_t>(cfg.spurious_dims);
  const std::size_t F = Fi + Fs;
  Rng rng = make_rng(cfg.seed, 1);

  std::vector<std::vector<double>> class_mean(C, std::vector<double>(Fi));
  std::vector<std::vector<double>> class_pattern(C, std::vector<double>(Fs));
  for (int c = 0; c < C; ++c) {
    for (double& v : class_mean[c]) v = cfg.class_separation * standard_normal(rng);
    for (double& v : class_pattern[c]) v = standard_normal(rng);
  }

  // Noise levels are a random permutation of evenly spaced levels so that
  // every domain deviates from the cross-domain average.
  std::vector<int> order(E);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetMeta meta;
  meta.synthetic = true;
  meta.generator = cfg;
  for (std::size_t j = 0; j < Fi; ++j) meta.invariant_dims.push_back(j);
  for (std::size_t j = 0; j < Fs; ++j) meta.spurious_dims.push_back(Fi + j);
  for (int e = 0; e < E; ++e) {
    std::vector<double> offset(Fs);
    for (double& v : offset) v = cfg.domain_shift_scale * standard_normal(rng);
    meta.domain_offsets.push_back(std::move(offset));
    double rho = cfg.spurious_strength * (1.0 + 0.25 * cfg.domain_shift_scale * uniform(rng, -1.0, 1.0));
    if (e == cfg.flip_domain) rho = -rho;
    meta.domain_correlation.push_back(rho);
    const double level = E > 1 ? static_cast<double>(order[e]) / (E - 1) : 0.0;
    meta.domain_noise.push_back(1.0 + 0.5 * cfg.domain_shift_scale * level);
  }
  for (int c = 0; c < C; ++c) meta.label_ids.push_back(c);
  for (int e = 0; e < E; ++e) meta.domain_ids.push_back(e);

  const std::size_t per = static_cast<std::size_t>(cfg.n_per_class_per_domain);
  const std::size_t N = static_cast<std::size_t>(E) * static_cast<std::size_t>(C) * per;
  MultiDomainDataset ds;
  ds.features = Tensor(Shape{N, F});
  ds.labels.reserve(N);
  ds.domains.reserve(N);
  ds.n_classes = C;
  ds.n_domains = E;

  std::size_t row = 0;
  for (int e = 0; e < E; ++e) {
    for (int c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < per; ++k, ++row) {
        for (std::size_t j = 0; j < Fi; ++j) ds.features(row, j) = class_mean[c][j] + standard_normal(rng);
        for (std::size_t j = 0; j < Fs; ++j) {
          ds.features(row, Fi + j) = meta.domain_offsets[e][j] + meta.domain_correlation[e] * class_pattern[c][j] +
                                     meta.domain_noise[e] * standard_normal(rng);
        }
        int label = c;
        if (cfg.label_noise > 0.0 && uniform(rng, 0.0, 1.0) < cfg.label_noise) {
          label = (c + 1 + static_cast<int>(uniform(rng, 0.0, 1.0) * (C - 1))) % C;
        }
        ds.labels.push_back(label);
        ds.domains.push_back(e);
      }
    }
  }
  ds.meta = std::move(meta);
  return ds;
}

inline LodoSplit split_leave_one_out(const MultiDomainDataset& ds, int held_out) {
  if (std::find(ds.domains.begin(), ds.domains.end(), held_out) == ds.domains.end()) {
    throw DataError("split_leave_one_out: domain " + std::to_string(held_out) + " not present in dataset");
  }
  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.domains[i] == held_out ? test_rows : train_rows).push_back(i);
  return LodoSplit{ds.subset(train_rows), ds.subset(test_rows), held_out};
}

/// Stratified hold-out of `fraction` of every (domain, class) cell.
/// Returns {fit part, validation part}; row order preserved within each.
inline std::pair<MultiDomainDataset, MultiDomainDataset> split_validation(const MultiDomainDataset& ds, double fraction,
                                                                          std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < ds.size(); ++i) cells[{ds.domains[i], ds.labels[i]}].push_back(i);
  Rng rng = make_rng(seed, 2);
  std::vector<char> is_val(ds.size(), 0);
  for (auto& [key, rows] : cells) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(rows.size())));
    for (std::size_t j = 0; j < k; ++j) is_val[rows[j]] = 1;
  }
  std::vector<std::size_t> fit, val;
  for (std::size_t i = 0; i < ds.size(); ++i) (is_val[i] ? val : fit).push_back(i);
  return {ds.subset(fit), ds.subset(val)};
}

// ---------------------------------------------------------------------------
// feature files

enum class FeatureFormat { kCsv, kJsonl };

inline FeatureFormat parse_format(const std::string& s) {
  if (s == "csv") return FeatureFormat::kCsv;
  if (s == "jsonl") return FeatureFormat::kJsonl;
  throw ConfigError("unknown feature file format '" + s + "' (expected csv or jsonl)");
}

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& cell, std::size_t line, std::size_t col) {
  const std::string s = trim(cell);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw DataError("line " + std::to_string(line) + ", column " + std::to_string(col) + ": non-numeric value '" + s + "'");
  }
  return v;
}

inline long long parse_int(const std::string& cell, std::size_t line, std::size_t col) {
  const std::string s = trim(cell);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("line " + std::to_string(line) + ", column " + std::to_string(col) + ": expected an integer, got '" + s + "'");
  }
  return v;
}

struct RawRows {
  std::vector<std::vector<double>> features;
  std::vector<long long> labels;
  std::vector<long long> domains;
};

inline std::vector<int> densify(const std::vector<long long>& raw, std::vector<long long>& ids) {
  ids = raw;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<int> out;
  out.reserve(raw.size());
  for (long long v : raw) out.push_back(static_cast<int>(std::lower_bound(ids.begin(), ids.end(), v) - ids.begin()));
  return out;
}

inline MultiDomainDataset from_raw(RawRows raw) {
  if (raw.labels.empty()) throw DataError("feature file contains no rows");
  MultiDomainDataset ds;
  const std::size_t n = raw.labels.size(), f = raw.features.front().size();
  ds.features = Tensor(Shape{n, f});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) ds.features(i, j) = raw.features[i][j];
  ds.labels = densify(raw.labels, ds.meta.label_ids);
  ds.domains = densify(raw.domains, ds.meta.domain_ids);
  ds.n_classes = static_cast<int>(ds.meta.label_ids.size());
  ds.n_domains = static_cast<int>(ds.meta.domain_ids.size());
  return ds;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline MultiDomainDataset read_csv_features(std::istream& in) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw DataError("line 1: missing header");
  const auto header = detail::split_commas(line);
  const std::size_t cols = header.size();
  if (cols < 3 || detail::trim(header[cols - 2]) != "label" || detail::trim(header[cols - 1]) != "domain") {
    throw DataError("line 1: header must be f0,...,f{F-1},label,domain");
  }
  for (std::size_t j = 0; j + 2 < cols; ++j) {
    if (detail::trim(header[j]) != "f" + std::to_string(j)) {
      throw DataError("line 1, column " + std::to_string(j + 1) + ": expected 'f" + std::to_string(j) + "'");
    }
  }
  detail::RawRows raw;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != cols) {
      throw DataError("line " + std::to_string(lineno) + ": expected " + std::to_string(cols) + " columns, got " +
                      std::to_string(cells.size()));
    }
    std::vector<double> row(cols - 2);
    for (std::size_t j = 0; j + 2 < cols; ++j) row[j] = detail::parse_double(cells[j], lineno, j + 1);
    raw.features.push_back(std::move(row));
    raw.labels.push_back(detail::parse_int(cells[cols - 2], lineno, cols - 1));
    raw.domains.push_back(detail::parse_int(cells[cols - 1], lineno, cols));
  }
  return detail::from_raw(std::move(raw));
}

inline MultiDomainDataset read_jsonl_features(std::istream& in) {
  using nlohmann::json;
  std::string line;
  std::size_t lineno = 0;
  detail::RawRows raw;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(lineno) + ": invalid JSON (" + e.what() + ")");
    }
    for (const char* key : {"features", "label", "domain"}) {
      if (!obj.is_object() || !obj.contains(key)) {
        throw DataError("line " + std::to_string(lineno) + ": missing field '" + key + "'");
      }
    }
    const json& f = obj["features"];
    if (!f.is_array()) throw DataError("line " + std::to_string(lineno) + ": 'features' must be an array");
    if (raw.features.empty()) width = f.size();
    if (f.size() != width || width == 0) {
      throw DataError("line " + std::to_string(lineno) + ": expected " + std::to_string(width) + " features, got " +
                      std::to_string(f.size()));
    }
    std::vector<double> row;
    for (std::size_t j = 0; j < f.size(); ++j) {
      if (!f[j].is_number() || !std::isfinite(f[j].get<double>())) {
        throw DataError("line " + std::to_string(lineno) + ", column " + std::to_string(j + 1) + ": non-numeric feature");
      }
      row.push_back(f[j].get<double>());
    }
    if (!obj["label"].is_number_integer()) throw DataError("line " + std::to_string(lineno) + ": 'label' must be an integer");
    if (!obj["domain"].is_number_integer()) throw DataError("line " + std::to_string(lineno) + ": 'domain' must be an integer");
    raw.features.push_back(std::move(row));
    raw.labels.push_back(obj["label"].get<long long>());
    raw.domains.push_back(obj["domain"].get<long long>());
  }
  return detail::from_raw(std::move(raw));
}

inline MultiDomainDataset load_features(const std::string& path, FeatureFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open feature file '" + path + "'");
  return format == FeatureFormat::kCsv ? read_csv_features(in) : read_jsonl_features(in);
}

/// Writes original ids (meta mapping) so files round-trip through load_features.
inline void write_csv_features(std::ostream& out, const MultiDomainDataset& ds) {
  const std::size_t f = ds.n_features();
  for (std::size_t j = 0; j < f; ++j) out << 'f' << j << ',';
  out << "label,domain\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < f; ++j) out << detail::format_double(ds.features(i, j)) << ',';
    out << ds.meta.label_ids.at(ds.labels[i]) << ',' << ds.meta.domain_ids.at(ds.domains[i]) << '\n';
  }
}

inline void write_jsonl_features(std::ostream& out, const MultiDomainDataset& ds) {
  const std::size_t f = ds.n_features();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << "{\"features\":[";
    for (std::size_t j = 0; j < f; ++j) out << (j ? "," : "") << detail::format_double(ds.features(i, j));
    out << "],\"label\":" << ds.meta.label_ids.at(ds.labels[i]) << ",\"domain\":" << ds.meta.domain_ids.at(ds.domains[i])
        << "}\n";
  }
}

}  // namespace covsda
