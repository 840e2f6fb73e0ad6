// End-to-end smoke tests of the command-line tool: exit codes, the
// machine-readable error JSON on stderr, --dry-run against the shipped
// sample configs, and tiny compute/fit round trips through real processes.

#include <gtest/gtest.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbl/io.hpp"

#ifndef MBLSIM_PATH
#error "MBLSIM_PATH must point at the built command-line binary"
#endif
#ifndef MBLSIM_CONFIG_DIR
#error "MBLSIM_CONFIG_DIR must point at the sample config directory"
#endif

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

class TempDir {
 public:
  TempDir() {
    dir_ = fs::temp_directory_path() /
           ("mbl_cli_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter_++));
    fs::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  const fs::path& path() const { return dir_; }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

 private:
  fs::path dir_;
  static inline int counter_ = 0;
};

RunResult run_cli(const std::string& arguments) {
  static int invocation = 0;
  const fs::path base = fs::temp_directory_path() /
                        ("mbl_cli_io_" + std::to_string(::getpid()) + "_" +
                         std::to_string(invocation++));
  const fs::path out_path = base.string() + ".out";
  const fs::path err_path = base.string() + ".err";

  const std::string command = std::string(MBLSIM_PATH) + " " + arguments +
                              " >" + out_path.string() + " 2>" +
                              err_path.string();
  const int status = std::system(command.c_str());

  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (fs::exists(out_path)) r.out = mbl::read_file(out_path);
  if (fs::exists(err_path)) r.err = mbl::read_file(err_path);
  std::error_code ec;
  fs::remove(out_path, ec);
  fs::remove(err_path, ec);
  return r;
}

// The machine-readable failure contract: stderr is one JSON object with
// error.type and error.message strings.
nlohmann::json expect_error_json(const RunResult& r) {
  nlohmann::json doc;
  EXPECT_NO_THROW(doc = nlohmann::json::parse(r.err)) << r.err;
  EXPECT_TRUE(doc.contains("error")) << r.err;
  EXPECT_TRUE(doc.at("error").at("type").is_string());
  EXPECT_TRUE(doc.at("error").at("message").is_string());
  return doc;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST(CliBasics, VersionFlagPrintsToolAndVersion) {
  const RunResult r = run_cli("--version");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("mblsim"), std::string::npos);
}

TEST(CliBasics, MissingSubcommandIsUsageError) {
  const RunResult r = run_cli("");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_EQ(expect_error_json(r).at("error").at("type"), "UsageError");
}

TEST(CliBasics, UnknownFlagIsUsageError) {
  const RunResult r = run_cli("quench --config x.json --frobnicate");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_EQ(expect_error_json(r).at("error").at("type"), "UsageError");
}

TEST(CliBasics, MissingConfigFileFailsWithErrorJson) {
  const RunResult r = run_cli("quench --config /nonexistent/config.json");
  EXPECT_NE(r.exit_code, 0);
  expect_error_json(r);
}

TEST(CliBasics, UnknownConfigKeyIsValidationError) {
  TempDir dir;
  write_text(dir / "bad.json",
             R"({"geometry": {"chain": 4}, "w_list_mhz": [50.0], "tpyo": 1})");
  const RunResult r =
      run_cli("quench --config " + (dir / "bad.json").string() + " --dry-run");
  EXPECT_EQ(r.exit_code, 2);
  const nlohmann::json doc = expect_error_json(r);
  EXPECT_EQ(doc.at("error").at("type"), "ValidationError");
  EXPECT_NE(doc.at("error").at("message").get<std::string>().find("tpyo"),
            std::string::npos);
}

TEST(CliBasics, SubcommandMustMatchConfigMode) {
  TempDir dir;
  write_text(dir / "quench.json",
             R"({"geometry": {"chain": 4}, "w_list_mhz": [50.0]})");
  const RunResult r = run_cli("spectrum --config " +
                              (dir / "quench.json").string() + " --dry-run");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_EQ(expect_error_json(r).at("error").at("type"), "ValidationError");
}

TEST(CliDryRun, AcceptsEveryShippedSampleConfig) {
  int checked = 0;
  for (const auto& entry : fs::directory_iterator(MBLSIM_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    const nlohmann::json doc =
        nlohmann::json::parse(mbl::read_file(entry.path()));
    const std::string mode = doc.value("mode", "quench");
    const std::string subcommand = mode == "gapratio" ? "gapratio"
                                   : mode == "spectrum" ? "spectrum"
                                   : mode == "fit"      ? "fit"
                                                        : "quench";
    const RunResult r = run_cli(subcommand + " --config " +
                                entry.path().string() + " --dry-run");
    EXPECT_EQ(r.exit_code, 0) << entry.path() << "\n" << r.err;
    EXPECT_NE(r.out.find("config ok"), std::string::npos) << entry.path();
    EXPECT_NE(r.out.find("spec digest"), std::string::npos);
    ++checked;
  }
  EXPECT_GE(checked, 5);
}

TEST(CliCompute, TinyQuenchRunsEndToEnd) {
  TempDir dir;
  write_text(dir / "cfg.json", R"({
    "mode": "quench",
    "geometry": {"chain": 2},
    "w_list_mhz": [0.0],
    "realizations": 1,
    "time_grid": {"kind": "linear", "t_min_ns": 0.0, "t_max_ns": 40.0, "n_points": 9},
    "fit_window": {"t_lo_ns": 5.0, "t_hi_ns": 40.0},
    "seed_base": 7,
    "out_dir": ")" + (dir / "out").string() + R"("
  })");
  const RunResult r =
      run_cli("quench --config " + (dir / "cfg.json").string() + " --workers 2");
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "out" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "out" / "trace_w0_even_r0000.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "trace_mean_w0.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "beta_vs_w.csv"));
  EXPECT_NE(r.out.find("beta"), std::string::npos);
}

TEST(CliFit, ExactPowerLawTraceRecoversExponent) {
  TempDir dir;
  std::string csv = "time_ns,imbalance\n0,1\n";
  for (int k = 0; k < 40; ++k) {
    const double t = 10.0 * std::pow(100.0, k / 39.0);
    csv += mbl::format_double(t) + "," + mbl::format_double(std::pow(t, -0.1)) + "\n";
  }
  write_text(dir / "trace.csv", csv);

  const fs::path report = dir / "fit.json";
  const RunResult r = run_cli("fit --trace " + (dir / "trace.csv").string() +
                              " --t-lo 250 --t-hi 1000 --json " + report.string());
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const nlohmann::json doc = nlohmann::json::parse(mbl::read_file(report));
  EXPECT_EQ(doc.at("kind"), "power_law");
  EXPECT_NEAR(doc.at("parameters").at("exponent").get<double>(), 0.1, 1e-12);
}

TEST(CliFit, NeedsExactlyOneInput) {
  const RunResult r = run_cli("fit");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_EQ(expect_error_json(r).at("error").at("type"), "ValidationError");
}
