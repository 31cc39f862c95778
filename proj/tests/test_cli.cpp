#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "covsda/cli.hpp"

using namespace covsda;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "covsda");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("covsda_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json small_config_json(const std::string& method = "erm") {
  RunConfig c;
  c.method = parse_method(method);
  c.data.generator->n_per_class_per_domain = 30;
  c.model.hidden = {8};
  c.model.feature_dim = 6;
  c.model.estimator_hidden = 8;
  c.optim.epochs = 2;
  c.optim.batch_size = 32;
  c.optim.lr = 1e-3;
  c.seed = 3;
  return to_json(c);
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "run.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

std::vector<fs::path> files_with(const fs::path& dir, const std::string& suffix) {
  std::vector<fs::path> r;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string s = e.path().filename().string();
    if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) r.push_back(e.path());
  }
  std::sort(r.begin(), r.end());
  return r;
}

/// Report files: `.json` but not checkpoints.
std::vector<fs::path> reports(const fs::path& dir) {
  std::vector<fs::path> r;
  for (const auto& p : files_with(dir, ".json"))
    if (p.filename().string().find(".checkpoint.") == std::string::npos) r.push_back(p);
  return r;
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> s;
  for (const auto& e : fs::recursive_directory_iterator(dir)) s.insert(fs::relative(e.path(), dir).string());
  return s;
}

}  // namespace

TEST(CliUsage, TrainWithoutConfigIsUsageError) {
  const fs::path dir = fresh_dir("noconfig");
  const Outcome o = run({"train", "--out", (dir / "out").string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("--config"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(CliUsage, UnknownFlagAndSubcommandAreUsageErrors) {
  EXPECT_EQ(run({"train", "--bogus"}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST(CliUsage, HelpExitsZero) { EXPECT_EQ(run({"--help"}).code, 0); }

TEST(CliUsage, BadConfigIsUsageError) {
  const fs::path dir = fresh_dir("badcfg");
  const fs::path cfg = write_config(dir, json{{"epochz", 3}});
  const Outcome o = run({"train", "--config", cfg.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("epochz"), std::string::npos);
}

TEST(CliExitCodes, MissingDataFileIsDataError) {
  const fs::path dir = fresh_dir("nodata");
  json j = small_config_json();
  j["data"] = {{"path", (dir / "absent.csv").string()}, {"format", "csv"}};
  const Outcome o = run({"train", "--config", write_config(dir, j).string(), "--out", (dir / "out").string()});
  EXPECT_EQ(o.code, 3);
  EXPECT_NE(o.err.find("absent.csv"), std::string::npos);
}

TEST(CliExitCodes, DivergentTrainingIsNumericError) {
  const fs::path dir = fresh_dir("diverge");
  json j = small_config_json();
  j["optim"]["lr"] = 1e200;
  const Outcome o = run({"train", "--config", write_config(dir, j).string(), "--out", (dir / "out").string()});
  EXPECT_EQ(o.code, 4);
}

TEST(CliGenerate, WritesCsvJsonlAndReport) {
  const fs::path dir = fresh_dir("generate");
  const fs::path out = dir / "out";
  ASSERT_EQ(run({"generate", "--out", out.string(), "--quiet"}).code, 0);
  ASSERT_EQ(files_with(out, ".csv").size(), 1u);
  ASSERT_EQ(files_with(out, ".jsonl").size(), 1u);
  const auto rep = reports(out);
  ASSERT_EQ(rep.size(), 1u);
  const json j = read_json_file(rep[0].string());
  EXPECT_EQ(j.at("kind"), "generate");
  EXPECT_EQ(j.at("rows"), 4 * 3 * 200);

  std::ifstream csv(files_with(out, ".csv")[0]);
  const MultiDomainDataset a = read_csv_features(csv);
  std::ifstream jl(files_with(out, ".jsonl")[0]);
  const MultiDomainDataset b = read_jsonl_features(jl);
  ASSERT_EQ(a.size(), 2400u);
  ASSERT_EQ(b.size(), 2400u);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.domains, b.domains);
  for (std::size_t i = 0; i < a.size(); i += 97) EXPECT_EQ(a.features(i, 3), b.features(i, 3));
}

TEST(CliGenerate, FilesRoundTripThroughTraining) {
  const fs::path dir = fresh_dir("fromfile");
  const fs::path out = dir / "out";
  const fs::path gen_cfg = write_config(dir, small_config_json(), "gen.json");
  ASSERT_EQ(run({"generate", "--config", gen_cfg.string(), "--out", out.string(), "--quiet"}).code, 0);
  json j = small_config_json();
  j["data"] = {{"path", files_with(out, ".jsonl")[0].string()}, {"format", "jsonl"}};
  const Outcome o = run({"lodo", "--config", write_config(dir, j).string(), "--out", (dir / "lodo").string(), "--quiet"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(read_json_file(reports(dir / "lodo")[0].string()).at("rows").size(), 4u);
}

TEST(CliTrain, SeedOverrideIsEchoedInReport) {
  const fs::path dir = fresh_dir("seed");
  const fs::path out = dir / "out";
  const fs::path cfg = write_config(dir, small_config_json());
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", out.string(), "--seed", "7", "--quiet"}).code, 0);
  const auto rep = reports(out);
  ASSERT_EQ(rep.size(), 1u);
  const json j = read_json_file(rep[0].string());
  EXPECT_EQ(j.at("seed"), 7);
  EXPECT_EQ(j.at("config").at("seed"), 7);
  EXPECT_EQ(j.at("schema_version"), kReportSchemaVersion);
  EXPECT_NE(rep[0].filename().string().find("train-7-"), std::string::npos);
  ASSERT_EQ(files_with(out, ".checkpoint.json").size(), 1u);
  EXPECT_NO_THROW(checkpoint_from_json(read_json_file(files_with(out, ".checkpoint.json")[0].string())));
}

TEST(CliTrain, RepeatedRunsNeverClobber) {
  const fs::path dir = fresh_dir("unique");
  const fs::path out = dir / "out";
  const fs::path cfg = write_config(dir, small_config_json());
  for (int k = 0; k < 3; ++k) ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", out.string(), "--quiet"}).code, 0);
  EXPECT_EQ(reports(out).size(), 3u);
  EXPECT_EQ(files_with(out, ".checkpoint.json").size(), 3u);
}

TEST(CliTrain, EmbeddedConfigReproducesMetricsBitwise) {
  const fs::path dir = fresh_dir("rerun");
  const fs::path cfg = write_config(dir, small_config_json("ours"));
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "a").string(), "--seed", "11", "--quiet"}).code, 0);
  const json first = read_json_file(reports(dir / "a")[0].string());
  const fs::path embedded = write_config(dir, first.at("config"), "embedded.json");
  ASSERT_EQ(run({"train", "--config", embedded.string(), "--out", (dir / "b").string(), "--quiet"}).code, 0);
  const json second = read_json_file(reports(dir / "b")[0].string());
  EXPECT_EQ(second.at("seed"), 11);
  EXPECT_EQ(first.at("rows"), second.at("rows"));
  EXPECT_EQ(first.at("fold"), second.at("fold"));
}

TEST(CliLodo, DefaultDomainsGiveFourRowsAndAverage) {
  const fs::path dir = fresh_dir("lodo");
  const fs::path cfg = write_config(dir, small_config_json("vrex"));
  ASSERT_EQ(run({"lodo", "--config", cfg.string(), "--out", (dir / "out").string(), "--threads", "2", "--quiet"}).code, 0);
  const json j = read_json_file(reports(dir / "out")[0].string());
  EXPECT_EQ(j.at("kind"), "lodo");
  ASSERT_EQ(j.at("rows").size(), 4u);
  double acc = 0.0;
  for (const auto& r : j.at("rows")) acc += r.at("acc").get<double>();
  EXPECT_NEAR(j.at("average").at("acc").get<double>(), acc / 4.0, 1e-12);
}

TEST(CliAnalysis, OtddMatrixHasZeroDiagonalAndIsSymmetric) {
  const fs::path dir = fresh_dir("otdd");
  const fs::path cfg = write_config(dir, small_config_json());
  ASSERT_EQ(run({"analyze-otdd", "--config", cfg.string(), "--out", (dir / "out").string(), "--quiet"}).code, 0);
  const json j = read_json_file(reports(dir / "out")[0].string());
  const json& m = j.at("otdd").at("matrix");
  ASSERT_EQ(m.size(), 4u);
  for (std::size_t a = 0; a < 4; ++a) {
    EXPECT_LE(std::abs(m[a][a].get<double>()), 1e-8);
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_NEAR(m[a][b].get<double>(), m[b][a].get<double>(), 1e-8);
      if (a != b) {
        EXPECT_GT(m[a][b].get<double>(), 0.0);
      }
    }
  }
  EXPECT_EQ(j.at("feature_space"), "input");
}

TEST(CliAnalysis, CheckpointFeaturesAreUsedWhenGiven) {
  const fs::path dir = fresh_dir("ckpt");
  const fs::path cfg = write_config(dir, small_config_json("ours"));
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "t").string(), "--quiet"}).code, 0);
  const std::string ck = files_with(dir / "t", ".checkpoint.json")[0].string();
  for (const char* sub : {"analyze-otdd", "analyze-directions", "export-projection"}) {
    const Outcome o = run({sub, "--config", cfg.string(), "--checkpoint", ck, "--out", (dir / sub).string(), "--quiet"});
    ASSERT_EQ(o.code, 0) << sub << ": " << o.err;
    EXPECT_EQ(read_json_file(reports(dir / sub)[0].string()).at("feature_space"), "featurizer");
  }
}

TEST(CliAnalysis, MismatchedCheckpointIsDataError) {
  const fs::path dir = fresh_dir("mismatch");
  const fs::path cfg = write_config(dir, small_config_json());
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", (dir / "t").string(), "--quiet"}).code, 0);
  json other = small_config_json();
  other["data"]["generator"]["spurious_dims"] = 3;
  const fs::path cfg2 = write_config(dir, other, "other.json");
  const std::string ck = files_with(dir / "t", ".checkpoint.json")[0].string();
  EXPECT_EQ(run({"analyze-otdd", "--config", cfg2.string(), "--checkpoint", ck, "--out", (dir / "o").string()}).code, 3);
}

TEST(CliAnalysis, DirectionsReportPlantedOverlap) {
  const fs::path dir = fresh_dir("dirs");
  const fs::path cfg = write_config(dir, small_config_json());
  ASSERT_EQ(run({"analyze-directions", "--config", cfg.string(), "--out", (dir / "out").string(), "--quiet"}).code, 0);
  const json j = read_json_file(reports(dir / "out")[0].string());
  ASSERT_EQ(j.at("domains").size(), 4u);
  for (const auto& d : j.at("domains")) {
    EXPECT_EQ(d.at("mask").size(), 16u);
    const double jac = d.at("jaccard_with_planted").get<double>();
    EXPECT_GE(jac, 0.0);
    EXPECT_LE(jac, 1.0);
  }
}

TEST(CliAnalysis, ProjectionCsvHasOneRowPerSample) {
  const fs::path dir = fresh_dir("proj");
  const fs::path cfg = write_config(dir, small_config_json());
  ASSERT_EQ(run({"export-projection", "--config", cfg.string(), "--out", (dir / "out").string(), "--quiet"}).code, 0);
  std::ifstream f(files_with(dir / "out", ".csv")[0]);
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "index,label,domain,pc1,pc2,aug_pc1,aug_pc2,dir_pc1,dir_pc2");
  std::size_t n = 0;
  while (std::getline(f, line)) ++n;
  EXPECT_EQ(n, 4u * 3u * 30u);
}

TEST(CliOutputs, NothingIsWrittenOutsideOut) {
  const fs::path dir = fresh_dir("sandbox");
  const fs::path cfg = write_config(dir, small_config_json("ours"));
  const fs::path cwd = fs::current_path();
  const std::set<std::string> cwd_before = listing(cwd);
  const std::set<std::string> before = listing(dir);
  const fs::path out = dir / "nested" / "out";
  ASSERT_EQ(run({"generate", "--config", cfg.string(), "--out", out.string(), "--quiet"}).code, 0);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", out.string(), "--quiet"}).code, 0);
  const std::string ck = files_with(out, ".checkpoint.json")[0].string();
  for (const char* sub : {"lodo", "analyze-otdd", "analyze-directions", "export-projection"})
    ASSERT_EQ(run({sub, "--config", cfg.string(), "--out", out.string(), "--quiet"}).code, 0) << sub;
  ASSERT_EQ(run({"export-projection", "--config", cfg.string(), "--checkpoint", ck, "--out", out.string(), "--quiet"}).code, 0);
  std::set<std::string> after = listing(dir);
  for (auto it = after.begin(); it != after.end();) {
    const bool inside = it->rfind("nested", 0) == 0;
    it = inside ? after.erase(it) : std::next(it);
  }
  EXPECT_EQ(after, before);
  EXPECT_EQ(listing(cwd), cwd_before);
}

#ifdef COVSDA_CLI_PATH
TEST(CliBinary, ExitCodesPropagateThroughTheExecutable) {
  const fs::path dir = fresh_dir("binary");
  const std::string bin = COVSDA_CLI_PATH;
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin + " train --out " + (dir / "o").string()), 2);
  EXPECT_EQ(status(bin + " generate --out " + (dir / "o").string() + " --quiet"), 0);
  EXPECT_EQ(files_with(dir / "o", ".csv").size(), 1u);
}
#endif
