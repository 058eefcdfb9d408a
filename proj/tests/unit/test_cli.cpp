#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "xml_check.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::string kBinary = CTL_LAB_BINARY;
const std::string kData = std::string(CTL_SOURCE_DIR) + "/tests/data/";

struct Outcome {
  int code = -1;
  std::string output;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ctl_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs `env_prefix ctl_lab args`, capturing stdout and stderr.
Outcome lab(const std::string& args, const std::string& env_prefix = "env -u CTL_LAB_OUTPUT_ROOT") {
  static int calls = 0;
  const fs::path log = fs::temp_directory_path() /
                       ("ctl_cli_out_" + std::to_string(getpid()) + "_" + std::to_string(calls++) + ".txt");
  const std::string cmd = env_prefix + " '" + kBinary + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.output = slurp(log);
  fs::remove(log);
  return o;
}

TEST(Cli, ValidateGoodAndBad) {
  EXPECT_EQ(lab("validate '" + kData + "tiny_sweep.json'").code, 0);
  const auto bad = lab("validate '" + kData + "invalid_sweep.json'");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("finetune.train.lr"), std::string::npos);
  EXPECT_NE(bad.output.find("alphas[1]"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(lab("").code, 2);
  EXPECT_EQ(lab("frobnicate").code, 2);
  EXPECT_EQ(lab("run").code, 2);
  EXPECT_EQ(lab("run '" + kData + "no_such_file.json'").code, 2);
}

TEST(Cli, InvalidConfigWritesNothing) {
  const auto root = scratch("invalid");
  const auto o = lab("run '" + kData + "invalid_sweep.json' --output-root '" + root.string() + "'");
  EXPECT_EQ(o.code, 2);
  EXPECT_TRUE(fs::is_empty(root));
}

TEST(Cli, RuntimeFailureNamesStageAndKeepsManifest) {
  const auto root = scratch("runtime");
  const auto o = lab("run '" + kData + "missing_idx.json' --output-root '" + root.string() + "'");
  EXPECT_EQ(o.code, 3);
  EXPECT_NE(o.output.find("stage 'data'"), std::string::npos) << o.output;
  const auto m = json::parse(slurp(root / "tiny_missing_idx" / "manifest.json"));
  EXPECT_EQ(m["status"], "failed");
  EXPECT_EQ(m["failure_stage"], "data");
}

// pairs x layers x alphas x {mean, q1, q3} x {one_minus_cosine, coef, baseline}
TEST(Cli, SweepCsvSchema) {
  const auto root = scratch("schema");
  ASSERT_EQ(lab("run '" + kData + "tiny_sweep.json' --output-root '" + root.string() + "'").code, 0);
  const auto dir = root / "tiny_sweep";
  std::ifstream in(dir / "ctl_sweep.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "pair_id,layer,alpha,metric,statistic,value");
  std::size_t rows = 0;
  std::map<std::string, int> metric_count, stat_count;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 6u) << line;
    metric_count[cells[3]]++;
    stat_count[cells[4]]++;
    EXPECT_TRUE(std::isfinite(std::stod(cells[5])));
  }
  // One pair (two tasks), three comparable layers (shared head), three alphas.
  EXPECT_EQ(rows, 1u * 3u * 3u * 3u * 3u);
  EXPECT_EQ(metric_count.size(), 3u);
  EXPECT_EQ(metric_count["one_minus_cosine"], 27);
  EXPECT_EQ(metric_count["baseline"], 27);
  EXPECT_EQ(stat_count["q1"], 27);
  const auto manifest = json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["status"], "ok");
  EXPECT_EQ(manifest["recipe"], "ctl_sweep");
  EXPECT_TRUE(manifest.contains("config_digest"));
  EXPECT_TRUE(manifest.contains("wall_clock_seconds"));
  EXPECT_TRUE(manifest.contains("library_version"));
  for (const auto& a : manifest["artifacts"]) EXPECT_TRUE(fs::exists(dir / a["path"].get<std::string>()));
  EXPECT_TRUE(xmlcheck::check(slurp(dir / "plot_errorbar.svg")).ok);
}

TEST(Cli, ReplayFromManifestIsByteIdentical) {
  const auto first = scratch("replay_a"), second = scratch("replay_b");
  ASSERT_EQ(lab("run '" + kData + "tiny_sweep.json' --output-root '" + first.string() + "'").code, 0);
  const auto manifest = first / "tiny_sweep" / "manifest.json";
  ASSERT_EQ(lab("run '" + manifest.string() + "' --output-root '" + second.string() + "'").code, 0);
  const auto a = slurp(first / "tiny_sweep" / "ctl_sweep.csv");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(second / "tiny_sweep" / "ctl_sweep.csv"));
  EXPECT_EQ(slurp(first / "tiny_sweep" / "report.json"), slurp(second / "tiny_sweep" / "report.json"));
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto root = scratch("env");
  ASSERT_EQ(lab("run '" + kData + "tiny_sweep.json'", "env CTL_LAB_OUTPUT_ROOT='" + root.string() + "'").code, 0);
  EXPECT_TRUE(fs::exists(root / "tiny_sweep" / "ctl_sweep.csv"));
}

TEST(Cli, PlotEmptyReportFailsWithoutWriting) {
  const auto dir = scratch("empty_report");
  std::ofstream(dir / "report.json") << "";
  const auto o = lab("plot '" + (dir / "report.json").string() + "' --kind errorbar");
  EXPECT_EQ(o.code, 2);
  EXPECT_FALSE(fs::exists(dir / "report_errorbar.svg"));
  std::ofstream(dir / "braces.json") << "{}";
  EXPECT_EQ(lab("plot '" + (dir / "braces.json").string() + "' --kind scatter --out '" + (dir / "x.svg").string() + "'").code, 2);
  EXPECT_FALSE(fs::exists(dir / "x.svg"));
}

TEST(Cli, ScatterFixtureDrawsEveryPointAndIdentityLine) {
  const auto dir = scratch("scatter");
  json points = json::array();
  for (int k = 0; k < 1140; ++k) {
    const double x = 0.5 + 0.4 * ((k * 37) % 1140) / 1140.0;
    points.push_back({{"x", x}, {"y", x - 0.02 + 0.04 * ((k * 11) % 97) / 97.0}, {"label", ""}});
  }
  const json report{{"schema_version", 1},
                    {"plots",
                     {{"title", "averaging vs ensembling"},
                      {"x_label", "ensemble accuracy"},
                      {"y_label", "averaged-model accuracy"},
                      {"errorbars", json::array()},
                      {"points", points},
                      {"reference_line", "y=x"}}}};
  std::ofstream(dir / "report.json") << report.dump();
  ASSERT_EQ(lab("plot '" + (dir / "report.json").string() + "' --kind scatter").code, 0);
  const auto svg = slurp(dir / "report_scatter.svg");
  const auto r = xmlcheck::check(svg);
  EXPECT_TRUE(r.ok) << r.error;
  std::size_t circles = 0;
  for (auto p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) ++circles;
  EXPECT_EQ(circles, 1140u);
  EXPECT_NE(svg.find("class=\"reference\""), std::string::npos);
  EXPECT_EQ(lab("plot '" + (dir / "report.json").string() + "' --kind errorbar").code, 2);
}

}  // namespace
