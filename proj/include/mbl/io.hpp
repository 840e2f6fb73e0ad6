#pragma once

// Result-file serialization.
//
// Everything written here is bit-deterministic: numbers are formatted with
// std::to_chars (shortest round-trip form, locale-independent), JSON objects
// serialize with sorted keys, and files are replaced atomically so a crashed
// run never leaves a half-written result behind. Readers throw ParseError
// with file and line context.
//
// File formats
//   quench trace CSV    header: time_ns,imbalance[,site_0,...,site_{L-1}]
//   ensemble mean CSV   header: time_ns,imbalance
//   spectrum CSV        header: index,energy_mhz,residual
//   gap-ratio CSV       header: w_mhz,mean_r,stderr,n_realizations
//   beta-vs-W CSV       header: w_mhz,beta,beta_stderr
//   fit report JSON     kind, inputs digest, window, parameters, stderr,
//                       covariance (row-major 2x2), and the seed when the
//                       quantity is resampled
//   Hamiltonian dump    little-endian binary: u64 dim, u64 nnz,
//                       u64 row_start[dim+1], u32 column[nnz], f64 value[nnz]

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "mbl/analysis.hpp"
#include "mbl/dynamics.hpp"
#include "mbl/errors.hpp"
#include "mbl/hamiltonian.hpp"
#include "mbl/lattice.hpp"
#include "mbl/level_stats.hpp"
#include "mbl/spectral.hpp"

namespace mbl {

// ---------------------------------------------------------------------------
// Deterministic number formatting

// Shortest decimal form that round-trips to the same double. Never uses
// locale, so output is identical on every platform and thread.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_int(std::int64_t v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline double parse_double_field(std::string_view field, const std::string& file,
                                 long line) {
  double out = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc{} || res.ptr != last)
    throw ParseError(file, line,
                     "expected a number, got \"" + std::string(field) + "\"");
  return out;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

// Strips one trailing '\r' so files edited on Windows still parse.
inline std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Content digest

// FNV-1a, 64-bit: tiny, dependency-free, and stable across platforms. Used to
// fingerprint fit inputs so a report can be matched to the exact bytes it was
// computed from; not a cryptographic hash.
class Fnv1a {
 public:
  void update(std::string_view bytes) noexcept {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ull;
    }
  }

  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t digest_bytes(std::string_view bytes) noexcept {
  Fnv1a h;
  h.update(bytes);
  return h.value();
}

inline std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(digest));
  return std::string(buf, 16);
}

// ---------------------------------------------------------------------------
// Whole-file primitives

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw Error("read failure on " + path.string());
  return std::move(buf).str();
}

// Writes content to a sibling temporary file and renames it over the target,
// so concurrent readers and interrupted runs see either the old complete file
// or the new complete file, never a torn one.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::string_view content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error("write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw Error("cannot replace " + path.string() + ": " + ec.message());
}

inline std::uint64_t digest_file(const std::filesystem::path& path) {
  return digest_bytes(read_file(path));
}

// ---------------------------------------------------------------------------
// Quench trace CSV

inline std::string trace_csv(const ImbalanceTrace& trace, bool include_sites) {
  const bool have_sites = include_sites && trace.per_site_occupations.size() > 0;
  std::string out = "time_ns,imbalance";
  if (have_sites)
    for (Eigen::Index j = 0; j < trace.per_site_occupations.cols(); ++j)
      out += ",site_" + format_int(j);
  out += '\n';
  for (std::size_t k = 0; k < trace.times_ns.size(); ++k) {
    out += format_double(trace.times_ns[k]);
    out += ',';
    out += format_double(trace.imbalance[k]);
    if (have_sites)
      for (Eigen::Index j = 0; j < trace.per_site_occupations.cols(); ++j) {
        out += ',';
        out += format_double(
            trace.per_site_occupations(static_cast<Eigen::Index>(k), j));
      }
    out += '\n';
  }
  return out;
}

inline void write_trace_csv(const std::filesystem::path& path,
                            const ImbalanceTrace& trace, bool include_sites) {
  write_file_atomic(path, trace_csv(trace, include_sites));
}

// Accepts both per-realization traces (with or without site columns, which it
// reads back) and ensemble-mean files (whose extra columns it ignores).
inline ImbalanceTrace read_trace_csv(const std::filesystem::path& path) {
  const std::string body = read_file(path);
  const std::string name = path.string();

  ImbalanceTrace trace;
  std::vector<std::vector<double>> site_rows;
  long line_no = 0;
  std::size_t pos = 0;
  std::size_t n_site_cols = 0;
  bool saw_header = false;
  while (pos < body.size()) {
    std::size_t eol = body.find('\n', pos);
    if (eol == std::string::npos) eol = body.size();
    const std::string_view line =
        detail::strip_cr(std::string_view(body).substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty()) continue;

    const std::vector<std::string_view> fields = detail::split_csv_line(line);
    if (!saw_header) {
      if (fields.size() < 2 || fields[0] != "time_ns" || fields[1] != "imbalance")
        throw ParseError(name, line_no,
                         "expected header starting with time_ns,imbalance");
      for (std::size_t j = 2; j < fields.size(); ++j) {
        if (fields[j].substr(0, 5) == "site_")
          ++n_site_cols;
        else if (n_site_cols > 0)
          throw ParseError(name, line_no, "site columns must be contiguous");
      }
      saw_header = true;
      continue;
    }
    if (fields.size() < 2)
      throw ParseError(name, line_no, "expected at least two columns");
    trace.times_ns.push_back(detail::parse_double_field(fields[0], name, line_no));
    trace.imbalance.push_back(detail::parse_double_field(fields[1], name, line_no));
    if (n_site_cols > 0) {
      if (fields.size() < 2 + n_site_cols)
        throw ParseError(name, line_no, "row shorter than the site-column header");
      std::vector<double> occ(n_site_cols);
      for (std::size_t j = 0; j < n_site_cols; ++j)
        occ[j] = detail::parse_double_field(fields[2 + j], name, line_no);
      site_rows.push_back(std::move(occ));
    }
  }
  if (!saw_header) throw ParseError(name, 1, "empty file");
  if (trace.times_ns.empty()) throw ParseError(name, line_no, "no data rows");
  for (std::size_t k = 1; k < trace.times_ns.size(); ++k)
    if (trace.times_ns[k] <= trace.times_ns[k - 1])
      throw ParseError(name, static_cast<long>(k) + 2,
                       "sample times must be strictly increasing");
  if (!site_rows.empty()) {
    trace.per_site_occupations.resize(static_cast<Eigen::Index>(site_rows.size()),
                                      static_cast<Eigen::Index>(n_site_cols));
    for (std::size_t k = 0; k < site_rows.size(); ++k)
      for (std::size_t j = 0; j < n_site_cols; ++j)
        trace.per_site_occupations(static_cast<Eigen::Index>(k),
                                   static_cast<Eigen::Index>(j)) = site_rows[k][j];
  }
  return trace;
}

inline std::string ensemble_mean_csv(const EnsembleImbalance& mean) {
  std::string out = "time_ns,imbalance\n";
  for (std::size_t k = 0; k < mean.times_ns.size(); ++k) {
    out += format_double(mean.times_ns[k]);
    out += ',';
    out += format_double(mean.mean[k]);
    out += '\n';
  }
  return out;
}

inline void write_ensemble_mean_csv(const std::filesystem::path& path,
                                    const EnsembleImbalance& mean) {
  write_file_atomic(path, ensemble_mean_csv(mean));
}

// ---------------------------------------------------------------------------
// Spectrum CSV

inline std::string spectrum_csv(const SpectralResult& spec) {
  std::string out = "index,energy_mhz,residual\n";
  for (std::size_t k = 0; k < spec.eigenvalues_mhz.size(); ++k) {
    out += format_int(static_cast<std::int64_t>(k));
    out += ',';
    out += format_double(spec.eigenvalues_mhz[k]);
    out += ',';
    out += format_double(k < spec.residuals.size() ? spec.residuals[k] : 0.0);
    out += '\n';
  }
  return out;
}

inline void write_spectrum_csv(const std::filesystem::path& path,
                               const SpectralResult& spec) {
  write_file_atomic(path, spectrum_csv(spec));
}

// ---------------------------------------------------------------------------
// Gap-ratio summary CSV (one row per disorder strength)

struct GapRatioRow {
  double w_mhz = 0.0;
  double mean_r = 0.0;
  double stderr_r = 0.0;
  int n_realizations = 0;
};

inline std::string gap_ratio_csv(const std::vector<GapRatioRow>& rows) {
  std::string out = "w_mhz,mean_r,stderr,n_realizations\n";
  for (const GapRatioRow& r : rows) {
    out += format_double(r.w_mhz);
    out += ',';
    out += format_double(r.mean_r);
    out += ',';
    out += format_double(r.stderr_r);
    out += ',';
    out += format_int(r.n_realizations);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Beta-vs-disorder CSV (input of the decay-law fit)

inline std::string beta_vs_w_csv(const std::vector<DisorderPoint>& points) {
  std::string out = "w_mhz,beta,beta_stderr\n";
  for (const DisorderPoint& p : points) {
    out += format_double(p.w_mhz);
    out += ',';
    out += format_double(p.beta);
    out += ',';
    out += format_double(p.beta_stderr);
    out += '\n';
  }
  return out;
}

inline std::vector<DisorderPoint> read_beta_vs_w_csv(
    const std::filesystem::path& path) {
  const std::string body = read_file(path);
  const std::string name = path.string();
  std::vector<DisorderPoint> points;
  long line_no = 0;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos < body.size()) {
    std::size_t eol = body.find('\n', pos);
    if (eol == std::string::npos) eol = body.size();
    const std::string_view line =
        detail::strip_cr(std::string_view(body).substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string_view> fields = detail::split_csv_line(line);
    if (!saw_header) {
      if (fields.size() < 3 || fields[0] != "w_mhz" || fields[1] != "beta" ||
          fields[2] != "beta_stderr")
        throw ParseError(name, line_no,
                         "expected header w_mhz,beta,beta_stderr");
      saw_header = true;
      continue;
    }
    if (fields.size() < 3)
      throw ParseError(name, line_no, "expected three columns");
    DisorderPoint p;
    p.w_mhz = detail::parse_double_field(fields[0], name, line_no);
    p.beta = detail::parse_double_field(fields[1], name, line_no);
    p.beta_stderr = detail::parse_double_field(fields[2], name, line_no);
    points.push_back(p);
  }
  if (!saw_header) throw ParseError(name, 1, "empty file");
  if (points.empty()) throw ParseError(name, line_no, "no data rows");
  return points;
}

// ---------------------------------------------------------------------------
// JSON documents

// Serializes with sorted keys and no trailing whitespace; nlohmann::json
// prints doubles in shortest round-trip form, so the bytes are reproducible.
inline std::string json_text(const nlohmann::json& doc) { return doc.dump(2) + "\n"; }

inline nlohmann::json graph_json(const CouplingGraph& g) {
  const char* geometry = "custom";
  switch (g.geometry) {
    case GeometryKind::chain: geometry = "chain"; break;
    case GeometryKind::ladder: geometry = "ladder"; break;
    case GeometryKind::rectangle: geometry = "rectangle"; break;
    case GeometryKind::custom: geometry = "custom"; break;
  }
  nlohmann::json sites = nlohmann::json::array();
  for (const SiteId& s : g.sites)
    sites.push_back({{"index", s.index}, {"row", s.row}, {"col", s.col}});
  nlohmann::json bonds = nlohmann::json::array();
  for (const Bond& b : g.bonds)
    bonds.push_back({{"a", b.a.index},
                     {"b", b.b.index},
                     {"kind", b.kind == BondKind::nn ? "nn" : "nnn"},
                     {"strength_mhz", b.strength_mhz}});
  return {{"geometry", geometry}, {"rows", g.rows},   {"cols", g.cols},
          {"n_sites", g.n_sites()}, {"sites", sites}, {"bonds", bonds}};
}

namespace detail {

inline nlohmann::json covariance_json(const Covariance2& cov) {
  return {{cov[0][0], cov[0][1]}, {cov[1][0], cov[1][1]}};
}

}  // namespace detail

inline nlohmann::json fit_report_json(const PowerLawFit& fit,
                                      std::uint64_t inputs_digest) {
  return {{"kind", "power_law"},
          {"inputs_digest", digest_hex(inputs_digest)},
          {"window", {{"t_lo_ns", fit.t_lo_ns}, {"t_hi_ns", fit.t_hi_ns}}},
          {"parameters",
           {{"amplitude", fit.amplitude}, {"exponent", fit.beta}}},
          {"stderr",
           {{"amplitude_log", std::sqrt(fit.covariance[0][0])},
            {"exponent", fit.beta_stderr}}},
          {"covariance", detail::covariance_json(fit.covariance)},
          {"n_points", fit.n_points}};
}

// The decay fit's window is the disorder range of its input points, which the
// fit struct does not carry; the caller passes it alongside.
inline nlohmann::json fit_report_json(const DecayLawFit& fit,
                                      std::uint64_t inputs_digest,
                                      double w_lo_mhz, double w_hi_mhz) {
  return {{"kind", "decay_law"},
          {"inputs_digest", digest_hex(inputs_digest)},
          {"window", {{"w_lo_mhz", w_lo_mhz}, {"w_hi_mhz", w_hi_mhz}}},
          {"parameters", {{"amplitude", fit.c}, {"exponent", fit.gamma}}},
          {"stderr",
           {{"amplitude", fit.c_stderr}, {"exponent", fit.gamma_stderr}}},
          {"covariance", detail::covariance_json(fit.covariance)},
          {"n_points", fit.n_points}};
}

inline nlohmann::json fit_report_json(const ThresholdCrossing& crossing,
                                      std::uint64_t inputs_digest,
                                      std::uint64_t seed) {
  return {{"kind", "threshold_crossing"},
          {"inputs_digest", digest_hex(inputs_digest)},
          {"threshold", crossing.threshold},
          {"parameters", {{"w_star_mhz", crossing.w_star_mhz}}},
          {"stderr", {{"w_star_mhz", crossing.w_star_std_mhz}}},
          {"n_resamples", crossing.n_rep},
          {"rejected_fraction", crossing.rejected_fraction},
          {"seed", seed}};
}

inline DecayLawFit read_decay_fit_json(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  try {
    if (doc.at("kind").get<std::string>() != "decay_law")
      throw ParseError(path.string(), 0, "expected a decay_law fit report");
    DecayLawFit fit;
    fit.c = doc.at("parameters").at("amplitude").get<double>();
    fit.gamma = doc.at("parameters").at("exponent").get<double>();
    fit.c_stderr = doc.at("stderr").at("amplitude").get<double>();
    fit.gamma_stderr = doc.at("stderr").at("exponent").get<double>();
    const auto& cov = doc.at("covariance");
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        fit.covariance[i][j] = cov.at(i).at(j).get<double>();
    fit.n_points = doc.at("n_points").get<int>();
    return fit;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

// Spectral ensemble summary: disorder strength, system size, window size,
// the ensemble gap-ratio statistics, and the per-realization seeds.
inline nlohmann::json gap_ratio_summary_json(double w_mhz, int n_sites, int n_ev,
                                             const GapRatioStats& stats,
                                             int realizations,
                                             const std::vector<std::uint64_t>& seeds) {
  nlohmann::json failures = nlohmann::json::array();
  for (const RealizationFailure& f : stats.failures)
    failures.push_back({{"realization", f.realization}, {"message", f.message}});
  return {{"w_mhz", w_mhz},
          {"n_sites", n_sites},
          {"n_ev", n_ev},
          {"mean_r", stats.mean_r},
          {"stderr", stats.stderr_r},
          {"realizations", realizations},
          {"n_success", stats.n_success},
          {"per_realization_r", stats.per_realization},
          {"seeds", seeds},
          {"failures", failures}};
}

// Human-readable rendering of any fit report produced above.
inline std::string fit_table(const nlohmann::json& report) {
  std::ostringstream out;
  out << "fit kind        " << report.at("kind").get<std::string>() << "\n";
  if (report.contains("window")) {
    out << "window          ";
    bool first = true;
    for (const auto& [key, value] : report.at("window").items()) {
      if (!first) out << "  ";
      out << key << " = " << format_double(value.get<double>());
      first = false;
    }
    out << "\n";
  }
  if (report.contains("parameters"))
    for (const auto& [key, value] : report.at("parameters").items()) {
      std::string pad(key.size() < 15 ? 15 - key.size() : 1, ' ');
      out << key << pad << format_double(value.get<double>());
      if (report.contains("stderr") && report.at("stderr").contains(key))
        out << " +/- " << format_double(report.at("stderr").at(key).get<double>());
      out << "\n";
    }
  if (report.contains("rejected_fraction"))
    out << "rejected        "
        << format_double(report.at("rejected_fraction").get<double>()) << "\n";
  if (report.contains("n_points"))
    out << "points          " << report.at("n_points").get<int>() << "\n";
  out << "inputs digest   " << report.at("inputs_digest").get<std::string>()
      << "\n";
  return std::move(out).str();
}

// ---------------------------------------------------------------------------
// Sparse-matrix debug dump
//
// Little-endian binary, in this exact order:
//   u64 dim, u64 nnz, u64 row_start[dim+1], u32 column[nnz], f64 value[nnz]
// where nnz counts off-diagonal entries and value carries the coupling in
// MHz. The diagonal is appended after the off-diagonal block as f64 diag[dim]
// so the file reconstructs the full operator.

inline void write_hamiltonian_binary(const std::filesystem::path& path,
                                     const SparseHamiltonian& h) {
  std::string out;
  const std::uint64_t dim = h.dim();
  const std::uint64_t nnz = h.entries.size();
  auto append = [&out](const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
  };
  append(&dim, sizeof dim);
  append(&nnz, sizeof nnz);
  append(h.row_start.data(), h.row_start.size() * sizeof(std::uint64_t));
  for (std::size_t k = 0; k < h.entries.size(); ++k) {
    const std::uint32_t col = h.column_of(k);
    append(&col, sizeof col);
  }
  for (std::size_t k = 0; k < h.entries.size(); ++k) {
    const double v = h.strength_of(k);
    append(&v, sizeof v);
  }
  append(h.diag_mhz.data(), h.diag_mhz.size() * sizeof(double));
  write_file_atomic(path, out);
}

}  // namespace mbl
