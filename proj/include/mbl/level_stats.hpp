#pragma once

// Ensemble-averaged level-spacing statistics: the mean consecutive-gap ratio
// over disorder realizations, taken on a fixed-size window of eigenvalues
// around a spectral target. Small sectors are fully diagonalized; larger
// ones go through the polynomially filtered solver.

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mbl/disorder.hpp"
#include "mbl/errors.hpp"
#include "mbl/hamiltonian.hpp"
#include "mbl/lattice.hpp"
#include "mbl/rng.hpp"
#include "mbl/spectral.hpp"

namespace mbl {

struct GapRatioEnsemble {
  CouplingGraph graph;
  int n_excitations = 0;
  double w_mhz = 0.0;
  std::uint64_t seed_base = 1;
  std::size_t dense_dim_cap = 4000;  // full diagonalization up to here
};

struct RealizationFailure {
  int realization;
  std::string message;
};

struct GapRatioStats {
  double mean_r = 0.0;
  double stderr_r = 0.0;
  int n_success = 0;
  std::vector<double> per_realization;  // mean r of each successful realization
  std::vector<RealizationFailure> failures;
};

// The n_ev values of an ascending spectrum nearest to target (a contiguous
// window, grown greedily toward the nearer neighbour).
inline std::vector<double> nearest_window(const std::vector<double>& ascending,
                                          double target, int n_ev) {
  if (n_ev < 1) throw std::invalid_argument("need n_ev >= 1");
  if (ascending.size() < static_cast<std::size_t>(n_ev))
    throw std::invalid_argument("window larger than spectrum");
  const auto n = static_cast<std::ptrdiff_t>(ascending.size());
  auto hi = std::lower_bound(ascending.begin(), ascending.end(), target) -
            ascending.begin();
  auto lo = hi;  // window is [lo, hi)
  while (hi - lo < n_ev) {
    const bool take_left =
        hi >= n || (lo > 0 && target - ascending[lo - 1] <= ascending[hi] - target);
    if (take_left)
      --lo;
    else
      ++hi;
  }
  return {ascending.begin() + lo, ascending.begin() + hi};
}

inline double window_mean_gap_ratio(const std::vector<double>& window_mhz) {
  const std::vector<double> r = gap_ratios(window_mhz);
  double acc = 0.0;
  for (double v : r) acc += v;
  return acc / static_cast<double>(r.size());
}

// Mean gap ratio of one disorder realization on an n_ev window around the
// window target (given in rescaled units relative to the spectral extremes).
inline double realization_gap_ratio(const SparseHamiltonian& h,
                                    const SpectralWindow& window,
                                    std::size_t dense_dim_cap,
                                    const PolfedOptions& polfed = {}) {
  if (h.dim() <= dense_dim_cap) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_dense(h),
                                                      Eigen::EigenvaluesOnly);
    std::vector<double> evals(es.eigenvalues().data(),
                              es.eigenvalues().data() + es.eigenvalues().size());
    const double e0 = evals.front();
    const double e1 = evals.back();
    const double target = 0.5 * ((e1 - e0) * window.target + e0 + e1);
    return window_mean_gap_ratio(nearest_window(evals, target, window.n_ev));
  }
  const SpectralResult spec = polfed_spectrum(h, window, polfed);
  return window_mean_gap_ratio(spec.eigenvalues_mhz);
}

// Ensemble mean and standard error over disorder realizations. Realization k
// draws its potentials from a seed derived from (seed_base, k); failed
// realizations (degenerate windows, non-converged solves) are recorded and
// excluded from the average. Workers split realizations dynamically; the
// aggregation is in realization order, so results do not depend on the
// worker count.
inline GapRatioStats mean_gap_ratio(const GapRatioEnsemble& ensemble,
                                    const SpectralWindow& window, int realizations,
                                    int n_workers = 1,
                                    const PolfedOptions& polfed = {}) {
  if (realizations < 2) throw std::invalid_argument("need at least 2 realizations");
  if (n_workers < 1) throw std::invalid_argument("need at least 1 worker");

  std::vector<std::optional<double>> slot(realizations);
  std::vector<std::string> error_slot(realizations);

  std::atomic<int> next{0};
  std::exception_ptr first_failure;
  std::mutex failure_mutex;

  auto work = [&] {
    for (;;) {
      const int k = next.fetch_add(1);
      if (k >= realizations) return;
      try {
        const DisorderRealization disorder =
            sample_disorder(ensemble.graph.n_sites(), ensemble.w_mhz,
                            derive_seed(ensemble.seed_base, k));
        const SparseHamiltonian h =
            build_hamiltonian(ensemble.graph, disorder, ensemble.n_excitations);
        slot[k] = realization_gap_ratio(h, window, ensemble.dense_dim_cap, polfed);
      } catch (const Error& e) {
        error_slot[k] = e.what();
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!first_failure) first_failure = std::current_exception();
        return;
      }
    }
  };

  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (first_failure) std::rethrow_exception(first_failure);

  GapRatioStats stats;
  for (int k = 0; k < realizations; ++k) {
    if (slot[k]) {
      stats.per_realization.push_back(*slot[k]);
    } else {
      stats.failures.push_back({k, error_slot[k]});
    }
  }
  stats.n_success = static_cast<int>(stats.per_realization.size());
  if (stats.n_success < 2)
    throw NumericError("fewer than 2 realizations produced a gap-ratio value");

  double mean = 0.0;
  for (double v : stats.per_realization) mean += v;
  mean /= stats.n_success;
  double var = 0.0;
  for (double v : stats.per_realization) var += (v - mean) * (v - mean);
  var /= (stats.n_success - 1);
  stats.mean_r = mean;
  stats.stderr_r = std::sqrt(var / stats.n_success);
  return stats;
}

}  // namespace mbl
