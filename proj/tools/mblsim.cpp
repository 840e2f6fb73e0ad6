// mblsim: disorder-ensemble simulator for 2D hard-core boson lattices.
//
// Subcommands
//   quench    imbalance time series per realization + ensemble mean + fits
//   spectrum  central eigenvalues per realization + gap-ratio summary
//   gapratio  like spectrum, with full diagonalization below a size cap
//   sweep     quench over several disorder strengths + decay-law fit chain
//   fit       fits over previously written result files
//
// Every run is driven by a JSON config (--config); --out, --seed, --workers,
// and --resume override or extend it. Exit code 0 on success; on failure a
// machine-readable JSON object {"error": {"type", "message"}} goes to stderr
// and the exit code is 1 (computation or validation failure), 2 (unusable
// command line or config), or 3 (unexpected internal error).
//
// MBLSIM_WORKERS overrides the default worker count; an explicit --workers
// beats both. Worker count changes scheduling only, never results: outputs
// are byte-identical for any worker count.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mbl/analysis.hpp"
#include "mbl/errors.hpp"
#include "mbl/experiment.hpp"
#include "mbl/io.hpp"
#include "mbl/version.hpp"

namespace {

const char* error_type_name(const std::exception& e) {
  if (dynamic_cast<const mbl::ValidationError*>(&e)) return "ValidationError";
  if (dynamic_cast<const mbl::ParseError*>(&e)) return "ParseError";
  if (dynamic_cast<const mbl::CapacityError*>(&e)) return "CapacityError";
  if (dynamic_cast<const mbl::ConvergenceError*>(&e)) return "ConvergenceError";
  if (dynamic_cast<const mbl::NumericError*>(&e)) return "NumericError";
  if (dynamic_cast<const mbl::InsufficientDataError*>(&e))
    return "InsufficientDataError";
  if (dynamic_cast<const mbl::RankError*>(&e)) return "RankError";
  if (dynamic_cast<const mbl::DegenerateSpectrumError*>(&e))
    return "DegenerateSpectrumError";
  if (dynamic_cast<const mbl::Error*>(&e)) return "Error";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "ArgumentError";
  return "InternalError";
}

void print_error_json(const char* type, const std::string& message) {
  const nlohmann::json doc = {{"error", {{"type", type}, {"message", message}}}};
  std::fprintf(stderr, "%s\n", doc.dump().c_str());
}

int resolve_workers(std::optional<int> cli_workers) {
  if (cli_workers) {
    if (*cli_workers < 0)
      throw mbl::ValidationError("--workers must be non-negative");
    return *cli_workers;
  }
  if (const char* env = std::getenv("MBLSIM_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 0)
      throw mbl::ValidationError(
          "MBLSIM_WORKERS must be a non-negative integer");
    return static_cast<int>(n);
  }
  return 0;  // run_experiment: hardware concurrency
}

mbl::ExperimentSpec load_spec(const std::string& config_path,
                              const std::optional<std::string>& out_dir,
                              const std::optional<std::uint64_t>& seed) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(mbl::read_file(config_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw mbl::ParseError(config_path, 0, e.what());
  }
  mbl::ExperimentSpec spec = mbl::parse_experiment_spec(doc);
  if (out_dir) spec.out_dir = *out_dir;
  if (seed) spec.seed_base = *seed;
  return spec;
}

void print_run_summary(const mbl::ExperimentResult& result) {
  int failed = 0;
  for (const mbl::TaskRecord& t : result.manifest.tasks)
    if (t.status == "failed") ++failed;
  std::printf("tasks            %zu (%d failed)\n", result.manifest.tasks.size(),
              failed);
  for (const mbl::DisorderPoint& p : result.beta_points)
    std::printf("beta @ W/2pi=%-8s %s +/- %s\n",
                mbl::format_double(p.w_mhz).c_str(),
                mbl::format_double(p.beta).c_str(),
                mbl::format_double(p.beta_stderr).c_str());
  for (const mbl::GapRatioRow& row : result.gap_ratio_rows)
    std::printf("<r>  @ W/2pi=%-8s %s +/- %s  (n=%d)\n",
                mbl::format_double(row.w_mhz).c_str(),
                mbl::format_double(row.mean_r).c_str(),
                mbl::format_double(row.stderr_r).c_str(), row.n_realizations);
  for (const std::string& w : result.warnings)
    std::printf("warning: %s\n", w.c_str());
  for (const mbl::TaskRecord& t : result.manifest.tasks)
    if (t.status == "failed")
      std::printf("failed task %s: %s\n", t.id.c_str(), t.message.c_str());
}

int run_compute_command(const std::string& subcommand, const std::string& config,
                        const std::optional<std::string>& out_dir,
                        const std::optional<std::uint64_t>& seed,
                        std::optional<int> workers, bool resume, bool dry_run) {
  mbl::ExperimentSpec spec = load_spec(config, out_dir, seed);

  const mbl::RunMode wanted = subcommand == "sweep"
                                  ? mbl::RunMode::quench
                                  : mbl::detail::mode_from_name(subcommand);
  if (spec.mode != wanted)
    throw mbl::ValidationError("config mode \"" +
                               std::string(mbl::detail::mode_name(spec.mode)) +
                               "\" does not match subcommand " + subcommand);
  if (subcommand == "sweep" && spec.w_list_mhz.size() < 2)
    throw mbl::ValidationError("sweep needs at least 2 disorder strengths");

  if (dry_run) {
    mbl::validate_spec(spec);
    const std::size_t tasks = spec.w_list_mhz.size() *
                              mbl::parities_of(spec.pattern).size() *
                              static_cast<std::size_t>(spec.realizations);
    std::printf("config ok        %s\n", config.c_str());
    std::printf("spec digest      %s\n",
                mbl::digest_hex(mbl::spec_digest(spec)).c_str());
    std::printf("geometry         %dx%d (%d sites)\n", spec.rows, spec.cols,
                spec.rows * spec.cols);
    std::printf("planned tasks    %zu\n",
                spec.mode == mbl::RunMode::fit_only ? std::size_t{0} : tasks);
    std::printf("out directory    %s\n", spec.out_dir.string().c_str());
    return 0;
  }

  const mbl::ExperimentResult result =
      mbl::run_experiment(spec, resolve_workers(workers), resume);
  std::printf("out directory    %s\n", spec.out_dir.string().c_str());
  print_run_summary(result);
  return 0;
}

// Direct-file fits. Writes the report JSON next to the input (or to
// --json PATH) and prints the human-readable table to stdout.
int run_fit_files(const std::optional<std::string>& trace_path,
                  const std::optional<std::string>& beta_csv_path,
                  const std::optional<std::string>& decay_json_path,
                  std::optional<double> t_lo, std::optional<double> t_hi,
                  std::optional<double> threshold, int n_rep,
                  std::uint64_t wstar_seed,
                  const std::optional<std::string>& json_out) {
  namespace fs = std::filesystem;
  auto out_path = [&](const fs::path& input, const char* suffix) {
    if (json_out) return fs::path(*json_out);
    fs::path p = input;
    p.replace_extension("");
    return fs::path(p.string() + suffix + ".json");
  };

  if (trace_path) {
    const mbl::ImbalanceTrace trace = mbl::read_trace_csv(*trace_path);
    const mbl::PowerLawFit fit = mbl::fit_power_law(
        trace.times_ns, trace.imbalance, t_lo.value_or(mbl::default_fit_t_lo_ns),
        t_hi.value_or(mbl::default_fit_t_hi_ns));
    const nlohmann::json report = mbl::fit_report_json(
        fit, mbl::digest_bytes(mbl::read_file(*trace_path)));
    mbl::write_file_atomic(out_path(*trace_path, "_fit_power_law"),
                           mbl::json_text(report));
    std::fputs(mbl::fit_table(report).c_str(), stdout);
    return 0;
  }

  if (beta_csv_path) {
    const std::vector<mbl::DisorderPoint> points =
        mbl::read_beta_vs_w_csv(*beta_csv_path);
    const mbl::DecayLawFit fit = mbl::fit_decay_law(points);
    double w_lo = points.front().w_mhz, w_hi = points.front().w_mhz;
    for (const mbl::DisorderPoint& p : points) {
      w_lo = std::min(w_lo, p.w_mhz);
      w_hi = std::max(w_hi, p.w_mhz);
    }
    const nlohmann::json report = mbl::fit_report_json(
        fit, mbl::digest_bytes(mbl::read_file(*beta_csv_path)), w_lo, w_hi);
    mbl::write_file_atomic(out_path(*beta_csv_path, "_fit_decay_law"),
                           mbl::json_text(report));
    std::fputs(mbl::fit_table(report).c_str(), stdout);
    if (threshold) {
      const mbl::ThresholdCrossing crossing =
          mbl::extract_w_star(fit, *threshold, n_rep, wstar_seed);
      const nlohmann::json wstar = mbl::fit_report_json(
          crossing, mbl::digest_bytes(mbl::json_text(report)), wstar_seed);
      mbl::write_file_atomic(out_path(*beta_csv_path, "_fit_w_star"),
                             mbl::json_text(wstar));
      std::fputs(mbl::fit_table(wstar).c_str(), stdout);
    }
    return 0;
  }

  const mbl::DecayLawFit fit = mbl::read_decay_fit_json(*decay_json_path);
  if (!threshold)
    throw mbl::ValidationError("--decay-json needs --threshold");
  const mbl::ThresholdCrossing crossing =
      mbl::extract_w_star(fit, *threshold, n_rep, wstar_seed);
  const nlohmann::json wstar = mbl::fit_report_json(
      crossing, mbl::digest_bytes(mbl::read_file(*decay_json_path)), wstar_seed);
  mbl::write_file_atomic(out_path(*decay_json_path, "_fit_w_star"),
                         mbl::json_text(wstar));
  std::fputs(mbl::fit_table(wstar).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"disorder-ensemble simulator for 2D hard-core boson lattices"};
  app.set_version_flag("--version", std::string("mblsim ") + mbl::version);
  app.require_subcommand(1);

  struct ComputeArgs {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    bool resume = false;
    bool dry_run = false;
  };

  auto add_compute = [&](const char* name, const char* blurb) {
    CLI::App* sub = app.add_subcommand(name, blurb);
    auto args = std::make_shared<ComputeArgs>();
    sub->add_option("--config", args->config, "experiment config JSON")
        ->required();
    sub->add_option("--out", args->out, "output directory (overrides config)");
    sub->add_option("--seed", args->seed, "seed_base override");
    sub->add_option("--workers", args->workers,
                    "worker threads (0 = all cores; default MBLSIM_WORKERS or 0)");
    sub->add_flag("--resume", args->resume, "reuse completed tasks of an earlier run");
    sub->add_flag("--dry-run", args->dry_run,
                  "validate the config and print the task plan without computing");
    return std::pair(sub, args);
  };

  auto [quench_cmd, quench_args] =
      add_compute("quench", "imbalance traces, ensemble mean, power-law fits");
  auto [spectrum_cmd, spectrum_args] =
      add_compute("spectrum", "central eigenvalues and gap-ratio summaries");
  auto [gapratio_cmd, gapratio_args] =
      add_compute("gapratio", "gap-ratio statistics over a disorder list");
  auto [sweep_cmd, sweep_args] =
      add_compute("sweep", "disorder sweep with decay-law fit chain");

  CLI::App* fit_cmd = app.add_subcommand("fit", "fits over existing result files");
  struct FitArgs {
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> trace, beta_csv, decay_json, json_out;
    std::optional<double> t_lo, t_hi, threshold;
    int n_rep = 5000;
    std::uint64_t wstar_seed = 2024;
    bool resume = false;
  } fit_args;
  fit_cmd->add_option("--config", fit_args.config,
                      "experiment config JSON (mode \"fit\")");
  fit_cmd->add_option("--out", fit_args.out, "output directory (overrides config)");
  fit_cmd->add_option("--seed", fit_args.seed, "seed_base override");
  fit_cmd->add_flag("--resume", fit_args.resume, "accepted for uniformity");
  fit_cmd->add_option("--trace", fit_args.trace,
                      "imbalance trace CSV for a power-law fit");
  fit_cmd->add_option("--t-lo", fit_args.t_lo, "fit window start, ns");
  fit_cmd->add_option("--t-hi", fit_args.t_hi, "fit window end, ns");
  fit_cmd->add_option("--beta-csv", fit_args.beta_csv,
                      "w_mhz,beta,beta_stderr CSV for a decay-law fit");
  fit_cmd->add_option("--decay-json", fit_args.decay_json,
                      "decay-law report JSON for a threshold crossing");
  fit_cmd->add_option("--threshold", fit_args.threshold,
                      "exponent level whose crossing W* is extracted");
  fit_cmd->add_option("--n-rep", fit_args.n_rep, "resamples for the W* spread");
  fit_cmd->add_option("--wstar-seed", fit_args.wstar_seed, "resampling seed");
  fit_cmd->add_option("--json", fit_args.json_out,
                      "write the report here instead of next to the input");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error_json("UsageError", e.what());
    return 2;
  }

  try {
    if (quench_cmd->parsed())
      return run_compute_command("quench", quench_args->config, quench_args->out,
                                 quench_args->seed, quench_args->workers,
                                 quench_args->resume, quench_args->dry_run);
    if (spectrum_cmd->parsed())
      return run_compute_command("spectrum", spectrum_args->config,
                                 spectrum_args->out, spectrum_args->seed,
                                 spectrum_args->workers, spectrum_args->resume,
                                 spectrum_args->dry_run);
    if (gapratio_cmd->parsed())
      return run_compute_command("gapratio", gapratio_args->config,
                                 gapratio_args->out, gapratio_args->seed,
                                 gapratio_args->workers, gapratio_args->resume,
                                 gapratio_args->dry_run);
    if (sweep_cmd->parsed())
      return run_compute_command("sweep", sweep_args->config, sweep_args->out,
                                 sweep_args->seed, sweep_args->workers,
                                 sweep_args->resume, sweep_args->dry_run);

    // fit
    const int direct_inputs = (fit_args.trace ? 1 : 0) +
                              (fit_args.beta_csv ? 1 : 0) +
                              (fit_args.decay_json ? 1 : 0);
    if (fit_args.config && direct_inputs > 0)
      throw mbl::ValidationError("fit takes either --config or a direct input file");
    if (!fit_args.config && direct_inputs != 1)
      throw mbl::ValidationError(
          "fit needs exactly one of --config, --trace, --beta-csv, --decay-json");
    if (fit_args.config) {
      mbl::ExperimentSpec spec =
          load_spec(*fit_args.config, fit_args.out, fit_args.seed);
      if (spec.mode != mbl::RunMode::fit_only)
        throw mbl::ValidationError("fit --config needs mode \"fit\"");
      const mbl::ExperimentResult result = mbl::run_experiment(spec, 1, false);
      std::printf("out directory    %s\n", spec.out_dir.string().c_str());
      print_run_summary(result);
      return 0;
    }
    return run_fit_files(fit_args.trace, fit_args.beta_csv, fit_args.decay_json,
                         fit_args.t_lo, fit_args.t_hi, fit_args.threshold,
                         fit_args.n_rep, fit_args.wstar_seed, fit_args.json_out);
  } catch (const mbl::ValidationError& e) {
    print_error_json("ValidationError", e.what());
    return 2;
  } catch (const mbl::ParseError& e) {
    print_error_json("ParseError", e.what());
    return 2;
  } catch (const std::exception& e) {
    const char* type = error_type_name(e);
    print_error_json(type, e.what());
    return std::string(type) == "InternalError" ? 3 : 1;
  }
}
