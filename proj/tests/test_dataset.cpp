#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "covsda/dataset.hpp"

using namespace covsda;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 0) {
  GeneratorConfig c;
  c.n_per_class_per_domain = 50;
  c.seed = seed;
  return c;
}

// Per-domain column means recomputed from the emitted rows.
std::vector<std::vector<double>> domain_means(const MultiDomainDataset& ds) {
  std::vector<std::vector<double>> m(ds.n_domains, std::vector<double>(ds.n_features(), 0.0));
  std::vector<double> n(ds.n_domains, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    n[ds.domains[i]] += 1;
    for (std::size_t j = 0; j < ds.n_features(); ++j) m[ds.domains[i]][j] += ds.features(i, j);
  }
  for (int e = 0; e < ds.n_domains; ++e)
    for (double& v : m[e]) v /= n[e];
  return m;
}

// Sample standard deviation across domains of the per-domain mean of column j.
double mean_dispersion(const std::vector<std::vector<double>>& m, std::size_t j) {
  double mu = 0.0;
  for (const auto& row : m) mu += row[j];
  mu /= static_cast<double>(m.size());
  double s = 0.0;
  for (const auto& row : m) s += (row[j] - mu) * (row[j] - mu);
  return std::sqrt(s / static_cast<double>(m.size() - 1));
}

// Two-pass sample covariance of domain e.
std::vector<std::vector<double>> domain_cov(const MultiDomainDataset& ds, int e) {
  const std::size_t f = ds.n_features();
  std::vector<double> mu(f, 0.0);
  double n = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.domains[i] == e) {
      n += 1;
      for (std::size_t j = 0; j < f; ++j) mu[j] += ds.features(i, j);
    }
  for (double& v : mu) v /= n;
  std::vector<std::vector<double>> c(f, std::vector<double>(f, 0.0));
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.domains[i] == e)
      for (std::size_t a = 0; a < f; ++a)
        for (std::size_t b = 0; b < f; ++b) c[a][b] += (ds.features(i, a) - mu[a]) * (ds.features(i, b) - mu[b]);
  for (auto& row : c)
    for (double& v : row) v /= (n - 1);
  return c;
}

}  // namespace

TEST(Generate, ShapesAndInvariants) {
  const MultiDomainDataset ds = generate(small_config());
  EXPECT_EQ(ds.size(), 4u * 3u * 50u);
  EXPECT_EQ(ds.n_features(), 16u);
  EXPECT_NO_THROW(ds.validate());
  std::set<std::pair<int, int>> cells;
  for (std::size_t i = 0; i < ds.size(); ++i) cells.insert({ds.domains[i], ds.labels[i]});
  EXPECT_EQ(cells.size(), 12u);
  ASSERT_EQ(ds.meta.spurious_dims.size(), 8u);
  for (std::size_t d : ds.meta.spurious_dims) EXPECT_LT(d, ds.n_features());
  EXPECT_TRUE(ds.meta.synthetic);
}

TEST(Generate, DeterministicForSeed) {
  const MultiDomainDataset a = generate(small_config(9));
  const MultiDomainDataset b = generate(small_config(9));
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.domains, b.domains);
  std::ostringstream sa, sb;
  write_csv_features(sa, a);
  write_csv_features(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_NE(generate(small_config(10)).features, a.features);
}

TEST(Generate, RejectsInvalidConfig) {
  GeneratorConfig c;
  c.class_separation = 0.0;
  EXPECT_THROW(generate(c), ConfigError);
  c = GeneratorConfig{};
  c.domain_shift_scale = -1.0;
  EXPECT_THROW(generate(c), ConfigError);
  c = GeneratorConfig{};
  c.label_noise = 0.5;
  EXPECT_THROW(generate(c), ConfigError);
  c = GeneratorConfig{};
  c.flip_domain = 4;
  EXPECT_THROW(generate(c), ConfigError);
}

TEST(Generate, SpuriousMeansDisperseAtShiftScale) {
  // Per-domain offsets are shift * N(0,1): the cross-domain spread of the
  // spurious means tracks the shift scale; invariant means do not move.
  for (double shift : {1.0, 2.0, 4.0}) {
    double spur = 0.0, inv = 0.0;
    int n = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      GeneratorConfig c;
      c.domain_shift_scale = shift;
      c.seed = seed;
      const MultiDomainDataset ds = generate(c);
      const auto m = domain_means(ds);
      for (std::size_t j = 0; j < 8; ++j) {
        inv += mean_dispersion(m, j);
        spur += mean_dispersion(m, 8 + j);
      }
      n += 8;
    }
    spur /= n;
    inv /= n;
    EXPECT_GT(spur, 0.7 * shift) << "shift " << shift;
    EXPECT_LT(spur, 1.3 * shift) << "shift " << shift;
    EXPECT_LT(inv, 0.15) << "shift " << shift;
  }
}

TEST(Generate, SpuriousDispersionExceedsInvariantWhenShifted) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GeneratorConfig c;
    c.domain_shift_scale = 1.0;
    c.seed = seed;
    const MultiDomainDataset ds = generate(c);
    const auto m = domain_means(ds);
    double max_inv = 0.0, mean_spur = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      max_inv = std::max(max_inv, mean_dispersion(m, j));
      mean_spur += mean_dispersion(m, 8 + j) / 8.0;
    }
    EXPECT_GT(mean_spur, max_inv) << "seed " << seed;
  }
}

// RMS over entries of the covariance difference, each entry standardized by
// sqrt(C_aa C_bb) of the reference domain.
double standardized_rms_gap(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double s = 0.0;
  const std::size_t f = a.size();
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double d = (a[i][j] - b[i][j]) / std::sqrt(a[i][i] * a[j][j]);
      s += d * d;
    }
  return std::sqrt(s / static_cast<double>(f * f));
}

double standardized_max_gap(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]) / std::sqrt(a[i][i] * a[j][j]));
  return m;
}

double worst_gap(double shift, std::uint64_t seed, double* bound, bool use_max = false) {
  GeneratorConfig c;
  c.domain_shift_scale = shift;
  c.seed = seed;
  const MultiDomainDataset ds = generate(c);
  *bound = 3.0 / std::sqrt(static_cast<double>(c.n_per_class_per_domain * c.n_classes));
  const auto c0 = domain_cov(ds, 0);
  double worst = 0.0;
  for (int e = 1; e < c.n_domains; ++e) {
    const auto ce = domain_cov(ds, e);
    worst = std::max(worst, use_max ? standardized_max_gap(c0, ce) : standardized_rms_gap(c0, ce));
  }
  return worst;
}

TEST(Generate, NoShiftGivesMatchingDomainCovariances) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    double bound = 0.0;
    EXPECT_LT(worst_gap(0.0, seed, &bound), bound) << "seed " << seed;
  }
}

TEST(Generate, ShiftBreaksCovarianceAgreement) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    double bound = 0.0;
    EXPECT_GT(worst_gap(2.0, seed, &bound, true), bound) << "seed " << seed;
  }
}

TEST(Generate, FlipDomainNegatesCorrelation) {
  GeneratorConfig c = small_config(3);
  const MultiDomainDataset base = generate(c);
  c.flip_domain = 2;
  const MultiDomainDataset flipped = generate(c);
  for (int e = 0; e < 4; ++e) {
    const double sign = e == 2 ? -1.0 : 1.0;
    EXPECT_EQ(flipped.meta.domain_correlation[e], sign * base.meta.domain_correlation[e]);
  }
  EXPECT_EQ(base.meta.domain_offsets, flipped.meta.domain_offsets);
}

TEST(Generate, LabelNoiseFlipsAboutTheRequestedFraction) {
  GeneratorConfig c;
  c.label_noise = 0.2;
  const MultiDomainDataset ds = generate(c);
  std::size_t flipped = 0;
  const std::size_t per = static_cast<std::size_t>(c.n_per_class_per_domain);
  for (std::size_t i = 0; i < ds.size(); ++i) flipped += ds.labels[i] != static_cast<int>((i / per) % 3);
  const double frac = static_cast<double>(flipped) / static_cast<double>(ds.size());
  EXPECT_NEAR(frac, 0.2, 0.03);
}

TEST(LodoSplitTest, HeldOutDomainSeparated) {
  const MultiDomainDataset ds = generate(small_config());
  const LodoSplit s = split_leave_one_out(ds, 2);
  EXPECT_EQ(s.held_out, 2);
  EXPECT_EQ(s.train.domain_set(), (std::vector<int>{0, 1, 3}));
  EXPECT_EQ(s.test.domain_set(), (std::vector<int>{2}));
  EXPECT_EQ(s.train.size() + s.test.size(), ds.size());
}

TEST(LodoSplitTest, TwoDomainsLeavesOne) {
  GeneratorConfig c = small_config();
  c.n_domains = 2;
  const LodoSplit s = split_leave_one_out(generate(c), 1);
  EXPECT_EQ(s.train.domain_set(), (std::vector<int>{0}));
}

TEST(LodoSplitTest, UnknownDomainThrows) {
  EXPECT_THROW(split_leave_one_out(generate(small_config()), 7), DataError);
}

TEST(LodoSplitTest, RemergeRecoversRowsInOrder) {
  const MultiDomainDataset ds = generate(small_config());
  const LodoSplit s = split_leave_one_out(ds, 1);
  std::size_t tr = 0, te = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const MultiDomainDataset& part = ds.domains[i] == 1 ? s.test : s.train;
    std::size_t& k = ds.domains[i] == 1 ? te : tr;
    for (std::size_t j = 0; j < ds.n_features(); ++j) ASSERT_EQ(part.features(k, j), ds.features(i, j));
    ASSERT_EQ(part.labels[k], ds.labels[i]);
    ++k;
  }
}

TEST(ValidationSplit, StratifiedFraction) {
  const MultiDomainDataset ds = generate(small_config());
  auto [fit, val] = split_validation(ds, 0.2, 4);
  EXPECT_EQ(fit.size() + val.size(), ds.size());
  std::map<std::pair<int, int>, int> counts;
  for (std::size_t i = 0; i < val.size(); ++i) ++counts[{val.domains[i], val.labels[i]}];
  EXPECT_EQ(counts.size(), 12u);
  for (const auto& [cell, n] : counts) EXPECT_EQ(n, 10);
  EXPECT_THROW(split_validation(ds, 1.0, 0), ConfigError);
}

TEST(FeatureFiles, CsvFixture) {
  std::istringstream in("f0,f1,label,domain\n0.5,1.5,0,0\n-1,2,1,0\n3e-1,4,0,1\n");
  const MultiDomainDataset ds = read_csv_features(in);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.n_features(), 2u);
  EXPECT_DOUBLE_EQ(ds.features(2, 0), 0.3);
  EXPECT_EQ(ds.n_classes, 2);
  EXPECT_EQ(ds.n_domains, 2);
}

TEST(FeatureFiles, SparseIdsAreDensified) {
  std::istringstream in("f0,label,domain\n1,7,5\n2,3,9\n3,7,9\n");
  const MultiDomainDataset ds = read_csv_features(in);
  EXPECT_EQ(ds.domains, (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(ds.meta.domain_ids, (std::vector<long long>{5, 9}));
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(ds.meta.label_ids, (std::vector<long long>{3, 7}));
}

TEST(FeatureFiles, NonNumericCellNamesLineAndColumn) {
  std::istringstream in("f0,f1,label,domain\n1,2,0,0\n1,abc,0,0\n");
  try {
    read_csv_features(in);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column 2"), std::string::npos) << msg;
  }
}

TEST(FeatureFiles, RaggedRowsAndBadHeaderRejected) {
  std::istringstream ragged("f0,f1,label,domain\n1,2,0\n");
  EXPECT_THROW(read_csv_features(ragged), DataError);
  std::istringstream header("f0,x,label,domain\n1,2,0,0\n");
  EXPECT_THROW(read_csv_features(header), DataError);
  std::istringstream missing("f0,f1,label\n1,2,0\n");
  EXPECT_THROW(read_csv_features(missing), DataError);
}

TEST(FeatureFiles, JsonlFixtureAndErrors) {
  std::istringstream in(R"({"features":[1,2],"label":0,"domain":4}
{"features":[3,4],"label":1,"domain":4}
{"features":[5,6],"label":1,"domain":2}
)");
  const MultiDomainDataset ds = read_jsonl_features(in);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.domains, (std::vector<int>{1, 1, 0}));
  std::istringstream bad(R"({"features":[1,"x"],"label":0,"domain":0})");
  EXPECT_THROW(read_jsonl_features(bad), DataError);
  std::istringstream width("{\"features\":[1,2],\"label\":0,\"domain\":0}\n{\"features\":[1],\"label\":0,\"domain\":0}\n");
  EXPECT_THROW(read_jsonl_features(width), DataError);
}

TEST(FeatureFiles, RoundTripIsExact) {
  const MultiDomainDataset ds = generate(small_config(2));
  std::stringstream csv, jsonl;
  write_csv_features(csv, ds);
  write_jsonl_features(jsonl, ds);
  const MultiDomainDataset a = read_csv_features(csv);
  const MultiDomainDataset b = read_jsonl_features(jsonl);
  EXPECT_EQ(a.features, ds.features);
  EXPECT_EQ(b.features, ds.features);
  EXPECT_EQ(a.labels, ds.labels);
  EXPECT_EQ(b.domains, ds.domains);
}

TEST(FeatureFiles, MissingFileReportsPath) {
  try {
    load_features("/nonexistent/features.csv", FeatureFormat::kCsv);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/features.csv"), std::string::npos);
  }
  EXPECT_THROW(parse_format("xml"), ConfigError);
}
