// Serialization: deterministic formatting, CSV round trips, JSON reports,
// digests, atomic writes, and the sparse-matrix debug dump.

#include <gtest/gtest.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mbl/analysis.hpp"
#include "mbl/disorder.hpp"
#include "mbl/dynamics.hpp"
#include "mbl/hamiltonian.hpp"
#include "mbl/io.hpp"
#include "mbl/lattice.hpp"

namespace fs = std::filesystem;
using namespace mbl;

namespace {

class TempDir {
 public:
  TempDir() {
    dir_ = fs::temp_directory_path() /
           ("mbl_io_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter_++));
    fs::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

 private:
  fs::path dir_;
  static inline int counter_ = 0;
};

ImbalanceTrace make_trace() {
  ImbalanceTrace t;
  t.times_ns = {0.0, 10.0, 31.6227766016838, 100.0};
  t.imbalance = {1.0, 0.8124, -0.125, 0.0625};
  return t;
}

}  // namespace

TEST(FormatDouble, ShortestRoundTripForm) {
  EXPECT_EQ(format_double(1.0), "1");
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-2.5), "-2.5");
  EXPECT_EQ(format_double(0.0), "0");
  const double awkward = 0.1 + 0.2;  // 0.30000000000000004
  const std::string s = format_double(awkward);
  EXPECT_EQ(std::stod(s), awkward);
}

TEST(Digest, MatchesKnownVectors) {
  EXPECT_EQ(digest_bytes(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(digest_bytes("a"), 0xaf63dc4c8601ec8cull);
  Fnv1a h;
  h.update("ab");
  h.update("c");
  EXPECT_EQ(h.value(), digest_bytes("abc"));
  EXPECT_EQ(digest_hex(0xcbf29ce484222325ull), "cbf29ce484222325");
  EXPECT_EQ(digest_hex(0x1ull).size(), 16u);
}

TEST(AtomicWrite, RoundTripsAndLeavesNoTemporary) {
  TempDir dir;
  const fs::path p = dir / "data.txt";
  write_file_atomic(p, "first");
  EXPECT_EQ(read_file(p), "first");
  write_file_atomic(p, "second");
  EXPECT_EQ(read_file(p), "second");
  EXPECT_FALSE(fs::exists(dir / "data.txt.tmp"));
  EXPECT_THROW(read_file(dir / "missing.txt"), Error);
}

TEST(TraceCsv, WritesExpectedHeaderAndRows) {
  const std::string body = trace_csv(make_trace(), false);
  EXPECT_EQ(body.substr(0, body.find('\n')), "time_ns,imbalance");
  EXPECT_NE(body.find("\n0,1\n"), std::string::npos);
  EXPECT_NE(body.find("\n100,0.0625\n"), std::string::npos);
}

TEST(TraceCsv, RoundTripsBitExactly) {
  TempDir dir;
  ImbalanceTrace t = make_trace();
  t.per_site_occupations.resize(4, 2);
  t.per_site_occupations << 1, 0, 0.75, 0.25, 0.5, 0.5, 0.4375, 0.5625;
  const fs::path p = dir / "trace.csv";
  write_trace_csv(p, t, true);

  const ImbalanceTrace back = read_trace_csv(p);
  ASSERT_EQ(back.times_ns.size(), t.times_ns.size());
  for (std::size_t k = 0; k < t.times_ns.size(); ++k) {
    EXPECT_EQ(back.times_ns[k], t.times_ns[k]);
    EXPECT_EQ(back.imbalance[k], t.imbalance[k]);
  }
  ASSERT_EQ(back.per_site_occupations.rows(), 4);
  ASSERT_EQ(back.per_site_occupations.cols(), 2);
  EXPECT_EQ(back.per_site_occupations(1, 0), 0.75);
  EXPECT_EQ(back.per_site_occupations(3, 1), 0.5625);

  // Site columns can also be withheld.
  write_trace_csv(p, t, false);
  EXPECT_EQ(read_trace_csv(p).per_site_occupations.size(), 0);
}

TEST(TraceCsv, AcceptsCarriageReturnsAndBlankLines) {
  TempDir dir;
  const fs::path p = dir / "crlf.csv";
  write_file_atomic(p, "time_ns,imbalance\r\n0,1\r\n\r\n10,0.5\r\n");
  const ImbalanceTrace t = read_trace_csv(p);
  ASSERT_EQ(t.times_ns.size(), 2u);
  EXPECT_EQ(t.imbalance[1], 0.5);
}

TEST(TraceCsv, RejectsMalformedInputWithLineContext) {
  TempDir dir;
  const fs::path p = dir / "bad.csv";

  write_file_atomic(p, "wrong,header\n0,1\n");
  EXPECT_THROW(read_trace_csv(p), ParseError);

  write_file_atomic(p, "time_ns,imbalance\n0,not_a_number\n");
  try {
    read_trace_csv(p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2);
    EXPECT_NE(std::string(e.what()).find("not_a_number"), std::string::npos);
  }

  write_file_atomic(p, "time_ns,imbalance\n10,0.5\n5,0.4\n");
  EXPECT_THROW(read_trace_csv(p), ParseError);  // times must increase

  write_file_atomic(p, "time_ns,imbalance\n");
  EXPECT_THROW(read_trace_csv(p), ParseError);  // no data rows

  write_file_atomic(p, "");
  EXPECT_THROW(read_trace_csv(p), ParseError);  // empty file

  write_file_atomic(p, "time_ns,imbalance,site_0,site_1\n0,1,0.5\n");
  EXPECT_THROW(read_trace_csv(p), ParseError);  // row shorter than header
}

TEST(EnsembleMeanCsv, ParsesBackAsATrace) {
  TempDir dir;
  EnsembleImbalance mean;
  mean.times_ns = {0.0, 10.0, 100.0};
  mean.mean = {1.0, 0.5, 0.25};
  mean.stderr_mean = {0.0, 0.01, 0.02};
  mean.n_traces = 3;
  const fs::path p = dir / "mean.csv";
  write_ensemble_mean_csv(p, mean);
  const ImbalanceTrace t = read_trace_csv(p);
  ASSERT_EQ(t.times_ns.size(), 3u);
  EXPECT_EQ(t.imbalance[2], 0.25);
}

TEST(SpectrumCsv, WritesIndexEnergyResidual) {
  SpectralResult spec;
  spec.eigenvalues_mhz = {-1.5, 0.0, 2.25};
  spec.residuals = {1e-9, 2e-9, 3e-9};
  const std::string body = spectrum_csv(spec);
  EXPECT_EQ(body,
            "index,energy_mhz,residual\n0,-1.5,1e-09\n1,0,2e-09\n2,2.25,3e-09\n");
}

TEST(GapRatioCsv, MatchesSchema) {
  const std::string body =
      gap_ratio_csv({{10.0, 0.53, 0.002, 100}, {100.0, 0.39, 0.003, 98}});
  EXPECT_EQ(body,
            "w_mhz,mean_r,stderr,n_realizations\n10,0.53,0.002,100\n"
            "100,0.39,0.003,98\n");
}

TEST(BetaVsWCsv, RoundTripsAndValidates) {
  TempDir dir;
  const std::vector<DisorderPoint> points = {{25.0, 0.5, 0.01},
                                             {50.0, 0.25, 0.02}};
  const fs::path p = dir / "beta.csv";
  write_file_atomic(p, beta_vs_w_csv(points));
  const std::vector<DisorderPoint> back = read_beta_vs_w_csv(p);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].w_mhz, 50.0);
  EXPECT_EQ(back[1].beta, 0.25);
  EXPECT_EQ(back[1].beta_stderr, 0.02);

  write_file_atomic(p, "wrong\n1,2,3\n");
  EXPECT_THROW(read_beta_vs_w_csv(p), ParseError);
  write_file_atomic(p, "w_mhz,beta,beta_stderr\n1,2\n");
  EXPECT_THROW(read_beta_vs_w_csv(p), ParseError);
}

TEST(FitReportJson, PowerLawCarriesAllSections) {
  PowerLawFit fit;
  fit.beta = 0.1;
  fit.amplitude = 1.5;
  fit.beta_stderr = 0.01;
  fit.t_lo_ns = 250.0;
  fit.t_hi_ns = 1000.0;
  fit.covariance = {{{4e-4, -1e-5}, {-1e-5, 1e-4}}};
  fit.n_points = 12;
  const nlohmann::json doc = fit_report_json(fit, 0xabcdef);
  EXPECT_EQ(doc.at("kind"), "power_law");
  EXPECT_EQ(doc.at("inputs_digest").get<std::string>().size(), 16u);
  EXPECT_EQ(doc.at("window").at("t_lo_ns"), 250.0);
  EXPECT_EQ(doc.at("parameters").at("exponent"), 0.1);
  EXPECT_EQ(doc.at("stderr").at("exponent"), 0.01);
  EXPECT_EQ(doc.at("covariance").at(0).at(0), 4e-4);
  EXPECT_EQ(doc.at("covariance").at(1).at(0), -1e-5);
  EXPECT_EQ(doc.at("n_points"), 12);

  const std::string table = fit_table(doc);
  EXPECT_NE(table.find("power_law"), std::string::npos);
  EXPECT_NE(table.find("exponent"), std::string::npos);
  EXPECT_NE(table.find("+/-"), std::string::npos);
}

TEST(FitReportJson, DecayLawRoundTripsThroughFile) {
  TempDir dir;
  DecayLawFit fit;
  fit.c = 12.5;
  fit.gamma = 1.2;
  fit.c_stderr = 0.4;
  fit.gamma_stderr = 0.05;
  fit.covariance = {{{1e-3, -2e-4}, {-2e-4, 2.5e-3}}};
  fit.n_points = 4;
  const fs::path p = dir / "decay.json";
  write_file_atomic(p, json_text(fit_report_json(fit, 42, 25.0, 100.0)));

  const DecayLawFit back = read_decay_fit_json(p);
  EXPECT_EQ(back.c, fit.c);
  EXPECT_EQ(back.gamma, fit.gamma);
  EXPECT_EQ(back.c_stderr, fit.c_stderr);
  EXPECT_EQ(back.gamma_stderr, fit.gamma_stderr);
  EXPECT_EQ(back.covariance[0][1], fit.covariance[0][1]);
  EXPECT_EQ(back.covariance[1][1], fit.covariance[1][1]);
  EXPECT_EQ(back.n_points, 4);

  write_file_atomic(p, "{\"kind\": \"power_law\"}");
  EXPECT_THROW(read_decay_fit_json(p), ParseError);
  write_file_atomic(p, "not json");
  EXPECT_THROW(read_decay_fit_json(p), ParseError);
}

TEST(FitReportJson, ThresholdCrossingCarriesSeedAndRejections) {
  ThresholdCrossing crossing;
  crossing.w_star_mhz = 380.0;
  crossing.w_star_std_mhz = 25.0;
  crossing.threshold = 0.01;
  crossing.n_rep = 5000;
  crossing.rejected_fraction = 0.125;
  const nlohmann::json doc = fit_report_json(crossing, 7, 2024);
  EXPECT_EQ(doc.at("kind"), "threshold_crossing");
  EXPECT_EQ(doc.at("threshold"), 0.01);
  EXPECT_EQ(doc.at("parameters").at("w_star_mhz"), 380.0);
  EXPECT_EQ(doc.at("stderr").at("w_star_mhz"), 25.0);
  EXPECT_EQ(doc.at("n_resamples"), 5000);
  EXPECT_EQ(doc.at("rejected_fraction"), 0.125);
  EXPECT_EQ(doc.at("seed"), 2024);
}

TEST(GraphJson, DescribesSitesAndBonds) {
  const CouplingGraph g = build_rectangle(2, 2, 2.9, 1.1);
  const nlohmann::json doc = graph_json(g);
  EXPECT_EQ(doc.at("geometry"), "ladder");
  EXPECT_EQ(doc.at("rows"), 2);
  EXPECT_EQ(doc.at("n_sites"), 4);
  ASSERT_EQ(doc.at("sites").size(), 4u);
  EXPECT_EQ(doc.at("sites").at(3).at("row"), 1);
  ASSERT_EQ(doc.at("bonds").size(), 6u);  // 4 NN + 2 plaquette diagonals
  int nn = 0, nnn = 0;
  for (const auto& b : doc.at("bonds")) {
    if (b.at("kind") == "nn") {
      ++nn;
      EXPECT_EQ(b.at("strength_mhz"), 2.9);
    } else {
      ++nnn;
      EXPECT_EQ(b.at("strength_mhz"), 1.1);
    }
  }
  EXPECT_EQ(nn, 4);
  EXPECT_EQ(nnn, 2);
}

TEST(GapRatioSummaryJson, CarriesStatsSeedsAndFailures) {
  GapRatioStats stats;
  stats.mean_r = 0.53;
  stats.stderr_r = 0.002;
  stats.n_success = 2;
  stats.per_realization = {0.52, 0.54};
  stats.failures.push_back({1, "window degenerate"});
  const nlohmann::json doc =
      gap_ratio_summary_json(10.0, 14, 200, stats, 3, {111, 222, 333});
  EXPECT_EQ(doc.at("w_mhz"), 10.0);
  EXPECT_EQ(doc.at("n_sites"), 14);
  EXPECT_EQ(doc.at("n_ev"), 200);
  EXPECT_EQ(doc.at("mean_r"), 0.53);
  EXPECT_EQ(doc.at("realizations"), 3);
  EXPECT_EQ(doc.at("n_success"), 2);
  ASSERT_EQ(doc.at("seeds").size(), 3u);
  EXPECT_EQ(doc.at("seeds").at(2), 333);
  ASSERT_EQ(doc.at("failures").size(), 1u);
  EXPECT_EQ(doc.at("failures").at(0).at("realization"), 1);
}

TEST(HamiltonianBinary, DumpReconstructsTheOperator) {
  TempDir dir;
  const CouplingGraph g = build_rectangle(1, 4, 3.0);
  const DisorderRealization d = sample_disorder(4, 20.0, 77);
  const SparseHamiltonian h = build_hamiltonian(g, d, 2);
  const fs::path p = dir / "h.bin";
  write_hamiltonian_binary(p, h);

  const std::string bytes = read_file(p);
  std::uint64_t dim = 0, nnz = 0;
  std::memcpy(&dim, bytes.data(), 8);
  std::memcpy(&nnz, bytes.data() + 8, 8);
  ASSERT_EQ(dim, h.dim());
  ASSERT_EQ(nnz, h.entries.size());
  const std::size_t offsets_at = 16;
  const std::size_t columns_at = offsets_at + (dim + 1) * 8;
  const std::size_t values_at = columns_at + nnz * 4;
  const std::size_t diag_at = values_at + nnz * 8;
  ASSERT_EQ(bytes.size(), diag_at + dim * 8);

  Eigen::MatrixXd rebuilt = Eigen::MatrixXd::Zero(dim, dim);
  for (std::uint64_t row = 0; row < dim; ++row) {
    std::uint64_t lo = 0, hi = 0;
    std::memcpy(&lo, bytes.data() + offsets_at + row * 8, 8);
    std::memcpy(&hi, bytes.data() + offsets_at + (row + 1) * 8, 8);
    for (std::uint64_t k = lo; k < hi; ++k) {
      std::uint32_t col = 0;
      double val = 0.0;
      std::memcpy(&col, bytes.data() + columns_at + k * 4, 4);
      std::memcpy(&val, bytes.data() + values_at + k * 8, 8);
      rebuilt(row, col) = val;
    }
    double diag = 0.0;
    std::memcpy(&diag, bytes.data() + diag_at + row * 8, 8);
    rebuilt(row, row) = diag;
  }
  EXPECT_LT((rebuilt - to_dense(h)).cwiseAbs().maxCoeff(), 1e-15);
}
