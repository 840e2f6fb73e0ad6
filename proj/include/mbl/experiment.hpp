#pragma once

// Configuration-driven orchestration.
//
// An ExperimentSpec (parsed from a JSON config) describes one ensemble run:
// geometry, couplings, disorder strengths, realization count, initial-pattern
// parity policy, time grid, fit window, seeds, and mode. run_experiment
// schedules the realization tasks over a worker pool, writes one result file
// per task, then aggregates in a fixed serial order.
//
// Determinism contract: every result file (CSV and fit/summary JSON) is
// byte-identical for identical spec + seed_base, independent of worker count
// or interruption/resume, because
//   * task k's disorder seed is derive_seed(seed_base, k) with k the task's
//     position in the fixed (disorder, parity, realization) enumeration,
//   * each task writes only its own file, atomically, and
//   * aggregation is single-threaded, runs in task order, and reads the
//     per-task files back from disk rather than reusing in-memory state.
// Wall-clock timestamps exist only in the manifest, which is excluded from
// the byte-identity promise.
//
// The manifest (manifest.json) is written before compute starts and rewritten
// atomically as tasks finish, so an interrupted run can resume: completed
// tasks whose output files still exist are skipped, failed or missing ones
// rerun, and aggregation repeats from the per-task files.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mbl/analysis.hpp"
#include "mbl/basis.hpp"
#include "mbl/disorder.hpp"
#include "mbl/dynamics.hpp"
#include "mbl/errors.hpp"
#include "mbl/hamiltonian.hpp"
#include "mbl/io.hpp"
#include "mbl/lattice.hpp"
#include "mbl/level_stats.hpp"
#include "mbl/rng.hpp"
#include "mbl/spectral.hpp"
#include "mbl/version.hpp"

namespace mbl {

// ---------------------------------------------------------------------------
// Spec

enum class RunMode { quench, spectrum, gap_ratio, fit_only };
enum class ParityPolicy { even, odd, both };

struct TimeGridSpec {
  bool geometric = true;  // false: linearly spaced
  double t_min_ns = 10.0;
  double t_max_ns = 1000.0;
  int n_points = 40;
};

struct ExperimentSpec {
  int rows = 0;  // chain = one row
  int cols = 0;
  double j_nn_mhz = default_j_nn_mhz;
  double j_nnn_mhz = default_j_nnn_mhz;
  double bond_delta_mhz = 0.0;  // per-bond uniform spread, 0 disables
  std::vector<double> w_list_mhz;
  int realizations = 1;
  ParityPolicy pattern = ParityPolicy::even;
  TimeGridSpec grid;
  double fit_t_lo_ns = default_fit_t_lo_ns;
  double fit_t_hi_ns = default_fit_t_hi_ns;
  std::uint64_t seed_base = 1;
  RunMode mode = RunMode::quench;
  int n_ev = 200;
  double sigma = 0.0;  // spectral window centre, rescaled units
  double beta_threshold = 0.01;  // decay-law crossing level for W*
  bool write_site_columns = false;
  std::size_t dense_dim_cap = 4000;  // gap-ratio mode: full diagonalization cap
  std::filesystem::path out_dir;
};

namespace detail {

// Seed streams. Task streams are the flat task indices (0, 1, 2, ...);
// auxiliary draws use reserved high streams that no task count reaches.
inline constexpr std::uint64_t bond_perturbation_stream = 0xffffffffffffff00ull;
inline constexpr std::uint64_t w_star_resample_stream = 0xffffffffffffff01ull;

inline const char* mode_name(RunMode m) {
  switch (m) {
    case RunMode::quench: return "quench";
    case RunMode::spectrum: return "spectrum";
    case RunMode::gap_ratio: return "gapratio";
    case RunMode::fit_only: return "fit";
  }
  return "quench";
}

inline RunMode mode_from_name(const std::string& s) {
  if (s == "quench") return RunMode::quench;
  if (s == "spectrum") return RunMode::spectrum;
  if (s == "gapratio") return RunMode::gap_ratio;
  if (s == "fit") return RunMode::fit_only;
  throw ValidationError("unknown mode \"" + s +
                        "\" (expected quench, spectrum, gapratio, or fit)");
}

inline const char* parity_policy_name(ParityPolicy p) {
  switch (p) {
    case ParityPolicy::even: return "even";
    case ParityPolicy::odd: return "odd";
    case ParityPolicy::both: return "both";
  }
  return "even";
}

inline ParityPolicy parity_policy_from_name(const std::string& s) {
  if (s == "even") return ParityPolicy::even;
  if (s == "odd") return ParityPolicy::odd;
  if (s == "both") return ParityPolicy::both;
  throw ValidationError("unknown pattern \"" + s +
                        "\" (expected even, odd, or both)");
}

inline const char* parity_name(PatternParity p) {
  return p == PatternParity::even ? "even" : "odd";
}

}  // namespace detail

// The sample-time grid of a spec: t = 0 followed by the configured geometric
// or linear grid.
inline std::vector<double> make_time_grid(const ExperimentSpec& spec) {
  std::vector<double> times;
  if (spec.grid.geometric) {
    times = geometric_grid(spec.grid.t_min_ns, spec.grid.t_max_ns,
                           spec.grid.n_points);
  } else {
    times.reserve(spec.grid.n_points);
    const double span = spec.grid.t_max_ns - spec.grid.t_min_ns;
    for (int k = 0; k < spec.grid.n_points; ++k)
      times.push_back(spec.grid.t_min_ns +
                      span * k / static_cast<double>(spec.grid.n_points - 1));
  }
  if (times.front() != 0.0) times.insert(times.begin(), 0.0);
  return times;
}

inline std::vector<PatternParity> parities_of(ParityPolicy policy) {
  switch (policy) {
    case ParityPolicy::even: return {PatternParity::even};
    case ParityPolicy::odd: return {PatternParity::odd};
    case ParityPolicy::both: return {PatternParity::even, PatternParity::odd};
  }
  return {PatternParity::even};
}

// Full validation; throws ValidationError before any compute.
inline void validate_spec(const ExperimentSpec& spec) {
  auto fail = [](const std::string& msg) { throw ValidationError(msg); };

  if (spec.rows < 1 || spec.cols < 1) fail("geometry extents must be positive");
  if (spec.rows * spec.cols < 2) fail("geometry needs at least two sites");
  if (spec.rows * spec.cols > 30) fail("more than 30 sites is unsupported");
  if (!std::isfinite(spec.j_nn_mhz) || !std::isfinite(spec.j_nnn_mhz))
    fail("couplings must be finite");
  if (spec.bond_delta_mhz < 0.0) fail("bond spread must be non-negative");
  if (spec.w_list_mhz.empty()) fail("w_list_mhz must not be empty");
  for (double w : spec.w_list_mhz)
    if (!(w >= 0.0) || !std::isfinite(w))
      fail("disorder strengths must be finite and non-negative");
  for (std::size_t i = 0; i < spec.w_list_mhz.size(); ++i)
    for (std::size_t j = i + 1; j < spec.w_list_mhz.size(); ++j)
      if (spec.w_list_mhz[i] == spec.w_list_mhz[j])
        fail("w_list_mhz contains a duplicate value");
  if (spec.realizations < 1) fail("realizations must be at least 1");
  if (spec.out_dir.empty()) fail("output directory not set");

  const bool needs_grid =
      spec.mode == RunMode::quench || spec.mode == RunMode::fit_only;
  if (needs_grid) {
    if (spec.grid.n_points < 2) fail("time grid needs at least 2 points");
    if (spec.grid.geometric && spec.grid.t_min_ns <= 0.0)
      fail("geometric time grid needs t_min_ns > 0");
    if (spec.grid.t_min_ns < 0.0) fail("time grid needs t_min_ns >= 0");
    if (spec.grid.t_max_ns <= spec.grid.t_min_ns)
      fail("time grid needs t_max_ns > t_min_ns");
    if (!(spec.fit_t_lo_ns >= 0.0) || spec.fit_t_hi_ns <= spec.fit_t_lo_ns)
      fail("fit window must satisfy 0 <= t_lo < t_hi");
    if (spec.fit_t_hi_ns > spec.grid.t_max_ns)
      fail("fit window extends past the time grid");
    const std::vector<double> grid = make_time_grid(spec);
    int in_window = 0;
    for (double t : grid)
      if (t >= spec.fit_t_lo_ns && t <= spec.fit_t_hi_ns) ++in_window;
    if (in_window < 4) fail("fit window covers fewer than 4 grid points");
  }

  if (spec.mode == RunMode::spectrum || spec.mode == RunMode::gap_ratio) {
    if (spec.realizations < 2)
      fail("spectral statistics need at least 2 realizations");
    if (spec.n_ev < 3) fail("gap ratios need a window of at least 3 eigenvalues");
    if (!(spec.sigma > -1.0 && spec.sigma < 1.0))
      fail("sigma must lie strictly inside (-1, 1)");
    const int L = spec.rows * spec.cols;
    for (PatternParity p : parities_of(spec.pattern)) {
      // Excitation count of the checkerboard pattern with this parity.
      int n = 0;
      for (int r = 0; r < spec.rows; ++r)
        for (int c = 0; c < spec.cols; ++c)
          if (((r + c) & 1) == (p == PatternParity::even ? 0 : 1)) ++n;
      const std::uint64_t dim = binomial(L, n);
      if (static_cast<std::uint64_t>(spec.n_ev) > dim)
        fail("n_ev exceeds the sector dimension " + format_int(
                 static_cast<std::int64_t>(dim)));
    }
  }

  if (spec.beta_threshold <= 0.0) fail("beta_threshold must be positive");
}

// ---------------------------------------------------------------------------
// Spec <-> JSON

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                std::initializer_list<const char*> known,
                                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) { ok = true; break; }
    if (!ok) throw ValidationError("unknown key \"" + key + "\" in " + where);
  }
}

template <typename T>
inline T get_field(const nlohmann::json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config field \"") + key +
                          "\" has the wrong type");
  }
}

}  // namespace detail

inline ExperimentSpec parse_experiment_spec(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("config root must be an object");
  detail::reject_unknown_keys(
      doc,
      {"mode", "geometry", "j_nn_mhz", "j_nnn_mhz", "bond_delta_mhz",
       "w_list_mhz", "realizations", "pattern", "time_grid", "fit_window",
       "seed_base", "n_ev", "sigma", "beta_threshold", "write_site_columns",
       "dense_dim_cap", "out_dir"},
      "config");

  ExperimentSpec spec;
  spec.mode = detail::mode_from_name(
      detail::get_field<std::string>(doc, "mode", "quench"));

  if (!doc.contains("geometry") || !doc.at("geometry").is_object())
    throw ValidationError("config needs a geometry object");
  const nlohmann::json& geo = doc.at("geometry");
  detail::reject_unknown_keys(geo, {"rows", "cols", "chain"}, "geometry");
  if (geo.contains("chain")) {
    if (geo.contains("rows") || geo.contains("cols"))
      throw ValidationError("geometry takes either chain or rows/cols, not both");
    spec.rows = 1;
    spec.cols = detail::get_field<int>(geo, "chain", 0);
  } else {
    spec.rows = detail::get_field<int>(geo, "rows", 0);
    spec.cols = detail::get_field<int>(geo, "cols", 0);
  }

  spec.j_nn_mhz = detail::get_field<double>(doc, "j_nn_mhz", default_j_nn_mhz);
  spec.j_nnn_mhz =
      detail::get_field<double>(doc, "j_nnn_mhz", default_j_nnn_mhz);
  spec.bond_delta_mhz = detail::get_field<double>(doc, "bond_delta_mhz", 0.0);
  spec.w_list_mhz =
      detail::get_field<std::vector<double>>(doc, "w_list_mhz", {});
  spec.realizations = detail::get_field<int>(doc, "realizations", 1);
  spec.pattern = detail::parity_policy_from_name(
      detail::get_field<std::string>(doc, "pattern", "even"));

  if (doc.contains("time_grid")) {
    const nlohmann::json& grid = doc.at("time_grid");
    detail::reject_unknown_keys(grid, {"kind", "t_min_ns", "t_max_ns", "n_points"},
                                "time_grid");
    const std::string kind =
        detail::get_field<std::string>(grid, "kind", "geometric");
    if (kind != "geometric" && kind != "linear")
      throw ValidationError("time_grid kind must be geometric or linear");
    spec.grid.geometric = kind == "geometric";
    spec.grid.t_min_ns = detail::get_field<double>(grid, "t_min_ns", 10.0);
    spec.grid.t_max_ns = detail::get_field<double>(grid, "t_max_ns", 1000.0);
    spec.grid.n_points = detail::get_field<int>(grid, "n_points", 40);
  }
  if (doc.contains("fit_window")) {
    const nlohmann::json& win = doc.at("fit_window");
    detail::reject_unknown_keys(win, {"t_lo_ns", "t_hi_ns"}, "fit_window");
    spec.fit_t_lo_ns =
        detail::get_field<double>(win, "t_lo_ns", default_fit_t_lo_ns);
    spec.fit_t_hi_ns =
        detail::get_field<double>(win, "t_hi_ns", default_fit_t_hi_ns);
  }

  spec.seed_base = detail::get_field<std::uint64_t>(doc, "seed_base", 1);
  spec.n_ev = detail::get_field<int>(doc, "n_ev", 200);
  spec.sigma = detail::get_field<double>(doc, "sigma", 0.0);
  spec.beta_threshold = detail::get_field<double>(doc, "beta_threshold", 0.01);
  spec.write_site_columns =
      detail::get_field<bool>(doc, "write_site_columns", false);
  spec.dense_dim_cap = detail::get_field<std::uint64_t>(doc, "dense_dim_cap", 4000);
  spec.out_dir = detail::get_field<std::string>(doc, "out_dir", "");
  return spec;
}

// Canonical JSON form of a spec. The spec digest hashes this document with
// out_dir cleared, so results can be moved without breaking resume.
inline nlohmann::json spec_json(const ExperimentSpec& spec) {
  nlohmann::json geo;
  if (spec.rows == 1)
    geo = {{"chain", spec.cols}};
  else
    geo = {{"rows", spec.rows}, {"cols", spec.cols}};
  return {{"mode", detail::mode_name(spec.mode)},
          {"geometry", geo},
          {"j_nn_mhz", spec.j_nn_mhz},
          {"j_nnn_mhz", spec.j_nnn_mhz},
          {"bond_delta_mhz", spec.bond_delta_mhz},
          {"w_list_mhz", spec.w_list_mhz},
          {"realizations", spec.realizations},
          {"pattern", detail::parity_policy_name(spec.pattern)},
          {"time_grid",
           {{"kind", spec.grid.geometric ? "geometric" : "linear"},
            {"t_min_ns", spec.grid.t_min_ns},
            {"t_max_ns", spec.grid.t_max_ns},
            {"n_points", spec.grid.n_points}}},
          {"fit_window",
           {{"t_lo_ns", spec.fit_t_lo_ns}, {"t_hi_ns", spec.fit_t_hi_ns}}},
          {"seed_base", spec.seed_base},
          {"n_ev", spec.n_ev},
          {"sigma", spec.sigma},
          {"beta_threshold", spec.beta_threshold},
          {"write_site_columns", spec.write_site_columns},
          {"dense_dim_cap", spec.dense_dim_cap},
          {"out_dir", spec.out_dir.string()}};
}

inline std::uint64_t spec_digest(const ExperimentSpec& spec) {
  nlohmann::json doc = spec_json(spec);
  doc["out_dir"] = "";
  return digest_bytes(json_text(doc));
}

// ---------------------------------------------------------------------------
// Manifest

struct TaskRecord {
  std::string id;
  double w_mhz = 0.0;
  PatternParity parity = PatternParity::even;
  int realization = 0;
  std::uint64_t seed = 0;
  std::string status = "pending";  // pending | done | failed
  std::string message;
  std::string output;  // file name relative to out_dir
};

struct RunManifest {
  std::string spec_digest_hex;
  std::string software_version;
  std::string created;
  std::string finalized;  // empty until the run completes
  nlohmann::json spec;
  std::vector<TaskRecord> tasks;
};

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string task_file_name(RunMode mode, const std::string& task_id) {
  return (mode == RunMode::quench ? "trace_" : "spectrum_") + task_id + ".csv";
}

inline std::string w_tag(double w) { return format_double(w); }

// Task enumeration shared by scheduling, resume, and aggregation: disorder
// strengths in spec order, then parity, then realization index. The flat
// position in this enumeration is the task's seed stream.
inline std::vector<TaskRecord> enumerate_tasks(const ExperimentSpec& spec) {
  std::vector<TaskRecord> tasks;
  if (spec.mode == RunMode::fit_only) return tasks;
  const std::vector<PatternParity> parities = parities_of(spec.pattern);
  std::uint64_t flat = 0;
  for (double w : spec.w_list_mhz)
    for (PatternParity p : parities)
      for (int k = 0; k < spec.realizations; ++k, ++flat) {
        TaskRecord t;
        char rk[16];
        std::snprintf(rk, sizeof(rk), "r%04d", k);
        t.id = "w" + w_tag(w) + "_" + parity_name(p) + "_" + rk;
        t.w_mhz = w;
        t.parity = p;
        t.realization = k;
        t.seed = derive_seed(spec.seed_base, flat);
        t.output = task_file_name(spec.mode, t.id);
        tasks.push_back(std::move(t));
      }
  return tasks;
}

}  // namespace detail

inline nlohmann::json manifest_json(const RunManifest& manifest) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const TaskRecord& t : manifest.tasks)
    tasks.push_back({{"id", t.id},
                     {"w_mhz", t.w_mhz},
                     {"parity", detail::parity_name(t.parity)},
                     {"realization", t.realization},
                     {"seed", t.seed},
                     {"status", t.status},
                     {"message", t.message},
                     {"output", t.output}});
  return {{"spec_digest", manifest.spec_digest_hex},
          {"software_version", manifest.software_version},
          {"created", manifest.created},
          {"finalized", manifest.finalized},
          {"spec", manifest.spec},
          {"tasks", tasks}};
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  try {
    RunManifest m;
    m.spec_digest_hex = doc.at("spec_digest").get<std::string>();
    m.software_version = doc.at("software_version").get<std::string>();
    m.created = doc.at("created").get<std::string>();
    m.finalized = doc.at("finalized").get<std::string>();
    m.spec = doc.at("spec");
    for (const nlohmann::json& t : doc.at("tasks")) {
      TaskRecord rec;
      rec.id = t.at("id").get<std::string>();
      rec.w_mhz = t.at("w_mhz").get<double>();
      rec.parity = t.at("parity").get<std::string>() == "even"
                       ? PatternParity::even
                       : PatternParity::odd;
      rec.realization = t.at("realization").get<int>();
      rec.seed = t.at("seed").get<std::uint64_t>();
      rec.status = t.at("status").get<std::string>();
      rec.message = t.at("message").get<std::string>();
      rec.output = t.at("output").get<std::string>();
      m.tasks.push_back(std::move(rec));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

// ---------------------------------------------------------------------------
// Runner

namespace detail {

inline CouplingGraph make_graph(const ExperimentSpec& spec) {
  CouplingGraph g =
      spec.rows == 1
          ? build_rectangle(1, spec.cols, spec.j_nn_mhz, 0.0)
          : build_rectangle(spec.rows, spec.cols, spec.j_nn_mhz, spec.j_nnn_mhz);
  if (spec.bond_delta_mhz > 0.0)
    g = perturb_bonds(std::move(g), spec.bond_delta_mhz,
                      derive_seed(spec.seed_base, bond_perturbation_stream));
  return g;
}

// Central window through the filtered solver. A realization that exhausts
// the standard block budget with stragglers left gets one retry at twice the
// budget before counting as failed; the retry is deterministic, so results
// stay independent of scheduling.
inline SpectralResult filtered_window_spectrum(const ExperimentSpec& spec,
                                               const SparseHamiltonian& h) {
  SpectralWindow window;
  window.target = spec.sigma;
  window.n_ev = spec.n_ev;
  try {
    return polfed_spectrum(h, window);
  } catch (const PartialSpectrumError&) {
    PolfedOptions retry;
    retry.max_blocks =
        2 * (static_cast<int>(std::ceil(4.5 * spec.n_ev /
                                        static_cast<double>(retry.block_size))) +
             2);
    return polfed_spectrum(h, window, retry);
  }
}

// One realization task: sample disorder, build the operator, run the mode,
// write the task's file. Throws Error subtypes on recoverable failures.
inline void run_task(const ExperimentSpec& spec, const CouplingGraph& graph,
                     const TaskRecord& task,
                     const std::vector<double>& sample_times) {
  const DisorderRealization disorder =
      sample_disorder(graph.n_sites(), task.w_mhz, task.seed);
  const InitialPattern pattern = checkerboard(graph, task.parity);
  const int n = static_cast<int>(pattern.excited.size());
  const SparseHamiltonian h = build_hamiltonian(graph, disorder, n);
  const std::filesystem::path out = spec.out_dir / task.output;

  switch (spec.mode) {
    case RunMode::quench: {
      const ImbalanceTrace trace =
          run_quench(h, pattern, spec.grid.t_max_ns, sample_times);
      write_trace_csv(out, trace, spec.write_site_columns);
      return;
    }
    case RunMode::spectrum: {
      write_spectrum_csv(out, filtered_window_spectrum(spec, h));
      return;
    }
    case RunMode::gap_ratio: {
      if (h.dim() <= spec.dense_dim_cap) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_dense(h),
                                                          Eigen::EigenvaluesOnly);
        SpectralResult full;
        full.eigenvalues_mhz.assign(
            es.eigenvalues().data(),
            es.eigenvalues().data() + es.eigenvalues().size());
        full.residuals.assign(full.eigenvalues_mhz.size(), 0.0);
        write_spectrum_csv(out, full);
      } else {
        write_spectrum_csv(out, filtered_window_spectrum(spec, h));
      }
      return;
    }
    case RunMode::fit_only:
      return;  // no per-realization compute
  }
}

// Reads a task's spectrum file and reduces it to the mean gap ratio of the
// n_ev window around sigma. Files holding a full spectrum (dense task) are
// windowed here; files holding exactly the window are used as-is.
inline double gap_ratio_of_file(const std::filesystem::path& path, double sigma,
                                int n_ev) {
  const std::string body = read_file(path);
  const std::string name = path.string();
  std::vector<double> evals;
  long line_no = 0;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos < body.size()) {
    std::size_t eol = body.find('\n', pos);
    if (eol == std::string::npos) eol = body.size();
    const std::string_view line =
        strip_cr(std::string_view(body).substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string_view> fields = split_csv_line(line);
    if (!saw_header) {
      if (fields.size() < 3 || fields[0] != "index" || fields[1] != "energy_mhz")
        throw ParseError(name, line_no, "expected header index,energy_mhz,residual");
      saw_header = true;
      continue;
    }
    if (fields.size() < 2) throw ParseError(name, line_no, "missing energy column");
    evals.push_back(parse_double_field(fields[1], name, line_no));
  }
  if (!saw_header) throw ParseError(name, 1, "empty file");
  if (evals.empty()) throw ParseError(name, line_no, "no eigenvalues");

  if (evals.size() > static_cast<std::size_t>(n_ev)) {
    const double e0 = evals.front();
    const double e1 = evals.back();
    const double target = 0.5 * ((e1 - e0) * sigma + e0 + e1);
    return window_mean_gap_ratio(nearest_window(evals, target, n_ev));
  }
  return window_mean_gap_ratio(evals);
}

struct WAggregate {
  double w_mhz = 0.0;
  std::vector<const TaskRecord*> done;  // task order
  std::vector<const TaskRecord*> all;
};

inline std::vector<WAggregate> group_by_w(const ExperimentSpec& spec,
                                          const std::vector<TaskRecord>& tasks) {
  std::vector<WAggregate> groups;
  for (double w : spec.w_list_mhz) {
    WAggregate g;
    g.w_mhz = w;
    for (const TaskRecord& t : tasks)
      if (t.w_mhz == w) {
        g.all.push_back(&t);
        if (t.status == "done") g.done.push_back(&t);
      }
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace detail

// Soft consistency check for disorder sweeps: the fitted exponent should not
// increase with disorder. Returns one warning line per violation.
inline std::vector<std::string> beta_monotonicity_warnings(
    const std::vector<DisorderPoint>& points) {
  std::vector<std::string> warnings;
  for (std::size_t k = 1; k < points.size(); ++k)
    if (points[k].beta > points[k - 1].beta)
      warnings.push_back(
          "beta rises from " + format_double(points[k - 1].beta) + " at W/2pi = " +
          format_double(points[k - 1].w_mhz) + " MHz to " +
          format_double(points[k].beta) + " at W/2pi = " +
          format_double(points[k].w_mhz) + " MHz");
  return warnings;
}

struct ExperimentResult {
  RunManifest manifest;
  std::vector<DisorderPoint> beta_points;      // quench / fit modes
  std::vector<GapRatioRow> gap_ratio_rows;     // spectral modes
  std::vector<std::string> warnings;
};

// Runs an experiment end to end. n_workers = 0 uses the hardware thread
// count; resume = true reuses completed tasks of an earlier interrupted run.
inline ExperimentResult run_experiment(const ExperimentSpec& spec,
                                       int n_workers = 1, bool resume = false) {
  validate_spec(spec);
  if (n_workers < 0) throw std::invalid_argument("worker count must be >= 0");
  if (n_workers == 0)
    n_workers = std::max(1u, std::thread::hardware_concurrency());

  std::filesystem::create_directories(spec.out_dir);
  const std::filesystem::path manifest_path = spec.out_dir / "manifest.json";
  const std::string digest_text = digest_hex(spec_digest(spec));

  RunManifest manifest;
  manifest.spec_digest_hex = digest_text;
  manifest.software_version = version;
  manifest.created = detail::utc_timestamp();
  manifest.spec = spec_json(spec);
  manifest.tasks = detail::enumerate_tasks(spec);

  if (resume && std::filesystem::exists(manifest_path)) {
    const RunManifest previous = load_manifest(manifest_path);
    if (previous.spec_digest_hex != digest_text)
      throw ValidationError(
          "manifest in " + spec.out_dir.string() +
          " belongs to a different experiment (spec digest mismatch)");
    manifest.created = previous.created;
    for (std::size_t k = 0;
         k < manifest.tasks.size() && k < previous.tasks.size(); ++k) {
      const TaskRecord& old = previous.tasks[k];
      TaskRecord& now = manifest.tasks[k];
      if (old.id == now.id && old.status == "done" &&
          std::filesystem::exists(spec.out_dir / now.output))
        now.status = "done";
    }
  }

  std::mutex manifest_mutex;
  auto persist_manifest = [&] {
    write_file_atomic(manifest_path, json_text(manifest_json(manifest)));
  };
  persist_manifest();  // written before compute starts

  const CouplingGraph graph = detail::make_graph(spec);
  write_file_atomic(spec.out_dir / "graph.json", json_text(graph_json(graph)));
  const std::vector<double> sample_times =
      spec.mode == RunMode::quench ? make_time_grid(spec) : std::vector<double>{};

  // ---- task phase ----
  std::vector<std::size_t> pending;
  for (std::size_t k = 0; k < manifest.tasks.size(); ++k)
    if (manifest.tasks[k].status != "done") pending.push_back(k);

  std::atomic<std::size_t> cursor{0};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;

  auto worker = [&] {
    for (;;) {
      const std::size_t slot = cursor.fetch_add(1);
      if (slot >= pending.size()) return;
      TaskRecord& task = manifest.tasks[pending[slot]];
      std::string status = "done";
      std::string message;
      try {
        detail::run_task(spec, graph, task, sample_times);
      } catch (const Error& e) {
        status = "failed";
        message = e.what();
      } catch (const std::invalid_argument& e) {
        status = "failed";
        message = e.what();
      } catch (...) {
        const std::lock_guard<std::mutex> lock(fatal_mutex);
        if (!fatal) fatal = std::current_exception();
        return;
      }
      {
        const std::lock_guard<std::mutex> lock(manifest_mutex);
        task.status = status;
        task.message = message;
        persist_manifest();
      }
    }
  };

  const int pool_size =
      static_cast<int>(std::min<std::size_t>(n_workers, pending.size()));
  if (pool_size <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(pool_size);
    for (int i = 0; i < pool_size; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (fatal) {
    persist_manifest();
    std::rethrow_exception(fatal);
  }

  // ---- aggregation phase (serial, task order, reads from disk) ----
  ExperimentResult result;
  try {
    const std::vector<detail::WAggregate> groups =
        detail::group_by_w(spec, manifest.tasks);

    if (spec.mode == RunMode::quench || spec.mode == RunMode::fit_only) {
      for (const detail::WAggregate& group : groups) {
        const std::string wtag = detail::w_tag(group.w_mhz);
        const std::filesystem::path mean_path =
            spec.out_dir / ("trace_mean_w" + wtag + ".csv");

        if (spec.mode == RunMode::quench) {
          std::vector<ImbalanceTrace> traces;
          for (const TaskRecord* t : group.done)
            traces.push_back(read_trace_csv(spec.out_dir / t->output));
          if (traces.empty())
            throw NumericError("no successful realizations at W/2pi = " +
                               format_double(group.w_mhz) + " MHz");
          write_ensemble_mean_csv(mean_path, ensemble_average(traces));
        } else if (!std::filesystem::exists(mean_path)) {
          throw ValidationError("fit mode expects " + mean_path.string());
        }

        const std::string mean_bytes = read_file(mean_path);
        const ImbalanceTrace mean_trace = read_trace_csv(mean_path);
        const PowerLawFit fit =
            fit_power_law(mean_trace.times_ns, mean_trace.imbalance,
                          spec.fit_t_lo_ns, spec.fit_t_hi_ns);
        write_file_atomic(
            spec.out_dir / ("fit_power_law_w" + wtag + ".json"),
            json_text(fit_report_json(fit, digest_bytes(mean_bytes))));
        result.beta_points.push_back({group.w_mhz, fit.beta, fit.beta_stderr});
      }

      const std::string beta_csv = beta_vs_w_csv(result.beta_points);
      write_file_atomic(spec.out_dir / "beta_vs_w.csv", beta_csv);
      result.warnings = beta_monotonicity_warnings(result.beta_points);

      int positive = 0;
      for (const DisorderPoint& p : result.beta_points)
        if (p.beta > 0.0) ++positive;
      if (positive >= 3) {
        const DecayLawFit decay = fit_decay_law(result.beta_points);
        double w_lo = result.beta_points.front().w_mhz;
        double w_hi = w_lo;
        for (const DisorderPoint& p : result.beta_points) {
          w_lo = std::min(w_lo, p.w_mhz);
          w_hi = std::max(w_hi, p.w_mhz);
        }
        const nlohmann::json decay_doc =
            fit_report_json(decay, digest_bytes(beta_csv), w_lo, w_hi);
        write_file_atomic(spec.out_dir / "fit_decay_law.json",
                          json_text(decay_doc));
        const std::uint64_t wstar_seed =
            derive_seed(spec.seed_base, detail::w_star_resample_stream);
        const ThresholdCrossing crossing =
            extract_w_star(decay, spec.beta_threshold, 5000, wstar_seed);
        write_file_atomic(
            spec.out_dir / "fit_w_star.json",
            json_text(fit_report_json(
                crossing, digest_bytes(json_text(decay_doc)), wstar_seed)));
      }
    } else {
      for (const detail::WAggregate& group : groups) {
        GapRatioStats stats;
        std::vector<std::uint64_t> seeds;
        for (const TaskRecord* t : group.all) seeds.push_back(t->seed);
        for (const TaskRecord* t : group.all) {
          if (t->status == "done")
            stats.per_realization.push_back(detail::gap_ratio_of_file(
                spec.out_dir / t->output, spec.sigma, spec.n_ev));
          else if (t->status == "failed")
            stats.failures.push_back({t->realization, t->message});
        }
        stats.n_success = static_cast<int>(stats.per_realization.size());
        if (stats.n_success < 2)
          throw NumericError("fewer than 2 successful realizations at W/2pi = " +
                             format_double(group.w_mhz) + " MHz");
        double mean = 0.0;
        for (double r : stats.per_realization) mean += r;
        mean /= stats.n_success;
        double var = 0.0;
        for (double r : stats.per_realization) var += (r - mean) * (r - mean);
        var /= (stats.n_success - 1);
        stats.mean_r = mean;
        stats.stderr_r = std::sqrt(var / stats.n_success);

        write_file_atomic(
            spec.out_dir /
                ("summary_gapratio_w" + detail::w_tag(group.w_mhz) + ".json"),
            json_text(gap_ratio_summary_json(
                group.w_mhz, spec.rows * spec.cols, spec.n_ev, stats,
                static_cast<int>(group.all.size()), seeds)));
        result.gap_ratio_rows.push_back(
            {group.w_mhz, stats.mean_r, stats.stderr_r, stats.n_success});
      }
      write_file_atomic(spec.out_dir / "summary_gapratio.csv",
                        gap_ratio_csv(result.gap_ratio_rows));
    }
  } catch (...) {
    persist_manifest();  // keep completed task statuses for resume
    throw;
  }

  manifest.finalized = detail::utc_timestamp();
  persist_manifest();
  result.manifest = std::move(manifest);
  return result;
}

}  // namespace mbl
