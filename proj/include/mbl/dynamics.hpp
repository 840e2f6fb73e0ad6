#pragma once

// Quench dynamics: checkerboard initial states evolved with an adaptive
// Lanczos (Krylov) propagator, recording the sublattice imbalance
//
//   I(t) = (<n_1> - <n_0>) / (<n_1> + <n_0>)
//
// where <n_1> averages site occupation over initially excited sites and
// <n_0> over initially empty ones.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mbl/errors.hpp"
#include "mbl/hamiltonian.hpp"
#include "mbl/units.hpp"

namespace mbl {

enum class PatternParity { even, odd };
enum class PatternLabel { checkerboard_even, checkerboard_odd, custom };

struct InitialPattern {
  std::vector<SiteId> excited;
  PatternLabel label = PatternLabel::custom;

  std::uint32_t configuration() const {
    std::uint32_t c = 0;
    for (const SiteId& s : excited) {
      if (s.index < 0 || s.index >= max_sites)
        throw std::invalid_argument("pattern site index out of range");
      if (c & (1u << s.index)) throw std::invalid_argument("duplicate site in pattern");
      c |= (1u << s.index);
    }
    return c;
  }
};

// Excites the sites whose (row + col) parity matches: even parity for
// PatternParity::even, odd for odd. On a 3x7 grid this gives 11 and 10
// excitations respectively.
inline InitialPattern checkerboard(const CouplingGraph& g, PatternParity p) {
  if (g.n_sites() < 1) throw std::invalid_argument("graph has no sites");
  InitialPattern pat;
  pat.label = (p == PatternParity::even) ? PatternLabel::checkerboard_even
                                         : PatternLabel::checkerboard_odd;
  const int want = (p == PatternParity::even) ? 0 : 1;
  for (const SiteId& s : g.sites)
    if (((s.row + s.col) & 1) == want) pat.excited.push_back(s);
  return pat;
}

// Geometrically spaced times, t_min and t_max inclusive.
inline std::vector<double> geometric_grid(double t_min, double t_max, int n_points) {
  if (!(t_min > 0.0) || !(t_max > t_min)) throw std::invalid_argument("need 0 < t_min < t_max");
  if (n_points < 2) throw std::invalid_argument("need at least two grid points");
  std::vector<double> t(n_points);
  const double step = std::log(t_max / t_min) / (n_points - 1);
  for (int i = 0; i < n_points; ++i) t[i] = t_min * std::exp(step * i);
  t.front() = t_min;
  t.back() = t_max;
  return t;
}

// Default sampling for quench experiments: t=0 plus 40 geometric points
// spanning 10..1000 ns (fits act on log t, so geometric spacing is natural).
inline std::vector<double> default_sample_times() {
  std::vector<double> t{0.0};
  const std::vector<double> g = geometric_grid(10.0, 1000.0, 40);
  t.insert(t.end(), g.begin(), g.end());
  return t;
}

struct KrylovOptions {
  double tolerance = 1e-14;  // target truncation error per step
  int m_min = 6;
  int m_max = 30;
  int max_halving_depth = 20;
  // Conservation guard: every quench checks that the state norm and the
  // total excitation number stay within this of their exact values at every
  // sample time, and fails loudly otherwise. Non-positive disables.
  double conservation_tol = 1e-9;
};

namespace detail {

struct KrylovInfo {
  long matvecs = 0;
  int halvings = 0;
  int max_m_used = 0;
  int last_m = 0;  // order of the most recent successful attempt
  double min_leaf_dt = std::numeric_limits<double>::infinity();
};

// Reusable buffers for the Lanczos build. One long quench allocates these
// once; at large dimensions the basis block is by far the biggest allocation
// (dim x m_max complex doubles), so churning it per step would dominate.
struct KrylovWorkspace {
  Eigen::MatrixXcd basis;  // Lanczos vectors, one per column
  Eigen::VectorXcd w;      // candidate next vector
  Eigen::VectorXd alpha;   // tridiagonal diagonal
  Eigen::VectorXd beta;    // tridiagonal off-diagonal; beta[j] couples j-1 to j
  Eigen::VectorXcd proj;   // reorthogonalization coefficients

  void ensure(Eigen::Index dim, int m_cap) {
    if (basis.rows() != dim || basis.cols() < m_cap) basis.resize(dim, m_cap);
    if (w.size() != dim) w.resize(dim);
    if (alpha.size() < m_cap) {
      alpha.resize(m_cap);
      beta.resize(m_cap + 1);
      proj.resize(m_cap);
    }
  }
};

// Row-chunk length for the orthogonalization sweeps: long enough to amortize
// loop overhead, short enough that the working chunk of w stays cache
// resident while the basis columns stream past it.
inline constexpr Eigen::Index krylov_chunk = 32768;

// One Lanczos approximation of exp(-i theta H) v over at most m_max vectors.
// Returns true and overwrites v on success; false if even m_max vectors leave
// the error estimate above tolerance. v must be unit norm. The basis build is
// modified Gram-Schmidt (three-term recurrence) followed by one full
// reorthogonalization pass per vector; the sweeps run over row chunks so each
// pass streams the basis exactly once.
inline bool krylov_attempt(const SparseHamiltonian& h, Eigen::VectorXcd& v,
                           double dt_ns, const KrylovOptions& opt, KrylovInfo& info,
                           KrylovWorkspace& ws) {
  using Cplx = std::complex<double>;
  const double theta = radians_per_mhz_ns * dt_ns;
  const auto dim = static_cast<Eigen::Index>(h.dim());
  const int m_cap = static_cast<int>(std::min<Eigen::Index>(opt.m_max, dim));
  ws.ensure(dim, m_cap);

  Eigen::VectorXd& alpha = ws.alpha;
  Eigen::VectorXd& beta = ws.beta;

  // Builds basis column m+1's precursor: w = H v_m minus the three-term
  // projections, then one batched reorthogonalization sweep over all columns.
  const auto extend = [&](int m) {
    h.apply(ws.basis.col(m), ws.w);
    ++info.matvecs;

    Cplx a_raw = 0.0;
    if (m > 0) {
      const Cplx b(beta(m));
      for (Eigen::Index r0 = 0; r0 < dim; r0 += krylov_chunk) {
        const Eigen::Index len = std::min(krylov_chunk, dim - r0);
        auto wc = ws.w.segment(r0, len);
        wc.noalias() -= b * ws.basis.col(m - 1).segment(r0, len);
        a_raw += ws.basis.col(m).segment(r0, len).dot(wc);
      }
    } else {
      a_raw = ws.basis.col(0).dot(ws.w);
    }

    const Cplx a(a_raw.real());
    ws.proj.head(m + 1).setZero();
    for (Eigen::Index r0 = 0; r0 < dim; r0 += krylov_chunk) {
      const Eigen::Index len = std::min(krylov_chunk, dim - r0);
      auto wc = ws.w.segment(r0, len);
      wc.noalias() -= a * ws.basis.col(m).segment(r0, len);
      for (int k = 0; k <= m; ++k)
        ws.proj(k) += ws.basis.col(k).segment(r0, len).dot(wc);
    }

    double nrm2 = 0.0;
    for (Eigen::Index r0 = 0; r0 < dim; r0 += krylov_chunk) {
      const Eigen::Index len = std::min(krylov_chunk, dim - r0);
      auto wc = ws.w.segment(r0, len);
      for (int k = 0; k <= m; ++k)
        wc.noalias() -= ws.proj(k) * ws.basis.col(k).segment(r0, len);
      nrm2 += wc.squaredNorm();
    }

    alpha(m) = a_raw.real() + ws.proj(m).real();
    beta(m + 1) = std::sqrt(nrm2);
  };

  ws.basis.col(0) = v;
  extend(0);
  double h_scale = std::max(std::abs(alpha(0)), beta(1));

  for (int m = 1; m <= m_cap; ++m) {
    // T_m is tridiagonal(alpha[0..m-1], beta[1..m-1]); beta(m) is the
    // residual norm left after building m vectors.
    const bool breakdown = beta(m) <= 1e-14 * h_scale;
    if (m >= opt.m_min || breakdown || m == m_cap) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
      es.computeFromTridiagonal(alpha.head(m), beta.segment(1, m - 1));
      const Eigen::VectorXcd phases =
          (Eigen::VectorXcd::Constant(m, Cplx(0, -theta)).array() *
           es.eigenvalues().cast<Cplx>().array())
              .exp();
      const Eigen::VectorXcd y =
          es.eigenvectors().cast<Cplx>() *
          (phases.array() * es.eigenvectors().row(0).transpose().cast<Cplx>().array())
              .matrix();
      const double err_est = breakdown ? 0.0 : beta(m) * std::abs(y(m - 1));
      if (err_est <= opt.tolerance || breakdown) {
        for (Eigen::Index r0 = 0; r0 < dim; r0 += krylov_chunk) {
          const Eigen::Index len = std::min(krylov_chunk, dim - r0);
          auto vc = v.segment(r0, len);
          vc.noalias() = y(0) * ws.basis.col(0).segment(r0, len);
          for (int j = 1; j < m; ++j)
            vc.noalias() += y(j) * ws.basis.col(j).segment(r0, len);
        }
        info.max_m_used = std::max(info.max_m_used, m);
        info.last_m = m;
        info.min_leaf_dt = std::min(info.min_leaf_dt, std::abs(dt_ns));
        return true;
      }
      if (m == m_cap) return false;
    }

    ws.basis.col(m) = ws.w / beta(m);
    extend(m);
    h_scale = std::max({h_scale, std::abs(alpha(m)), beta(m + 1)});
  }
  return false;
}

// Advances v by dt, recursively halving when a single step cannot reach
// tolerance within m_max Krylov vectors.
inline void krylov_advance(const SparseHamiltonian& h, Eigen::VectorXcd& v,
                           double dt_ns, const KrylovOptions& opt, int depth,
                           KrylovInfo& info, KrylovWorkspace& ws) {
  if (dt_ns == 0.0) return;
  if (depth > opt.max_halving_depth)
    throw ConvergenceError("Krylov step halving exceeded depth 20; dt unreachable at m_max");
  if (krylov_attempt(h, v, dt_ns, opt, info, ws)) return;
  ++info.halvings;
  krylov_advance(h, v, dt_ns / 2, opt, depth + 1, info, ws);
  krylov_advance(h, v, dt_ns / 2, opt, depth + 1, info, ws);
}

// A Lanczos build of order m reliably covers a phase angle of roughly
//   theta_hat(m) = (2m/e) * tol^(1/m)
// radians (inverting the leading truncation error 2 (theta/2)^m / m!).
// Used only to schedule step sizes; krylov_attempt remains the arbiter of
// whether a step actually converged.
inline double lanczos_reach(int m, double tol) {
  return (2.0 * m / std::exp(1.0)) * std::exp(std::log(tol) / m);
}

}  // namespace detail

// Approximates exp(-i * 2pi*1e-3 * H * dt) v with an adaptive-order Lanczos
// propagator. The order m grows until the standard a-posteriori estimate
// (residual coupling beta_m times the last component of the small-problem
// exponential) drops below tolerance; if m_max is not enough the step is
// halved recursively.
inline Eigen::VectorXcd krylov_step(const SparseHamiltonian& h,
                                    const Eigen::VectorXcd& v, double dt_ns,
                                    const KrylovOptions& opt = {},
                                    detail::KrylovInfo* info_out = nullptr) {
  if (static_cast<std::size_t>(v.size()) != h.dim())
    throw std::invalid_argument("vector length does not match Hamiltonian dimension");
  if (!v.allFinite()) throw NumericError("state vector contains non-finite values");
  if (std::abs(v.norm() - 1.0) > 1e-8)
    throw std::invalid_argument("state vector must be normalized");

  Eigen::VectorXcd out = v;
  detail::KrylovInfo info;
  detail::KrylovWorkspace ws;
  detail::krylov_advance(h, out, dt_ns, opt, 0, info, ws);
  if (info_out) *info_out = info;
  return out;
}

struct ImbalanceTrace {
  std::vector<double> times_ns;
  std::vector<double> imbalance;
  Eigen::MatrixXd per_site_occupations;  // one row per time, one column per site

  std::shared_ptr<const DisorderRealization> realization;
  PatternLabel pattern_label = PatternLabel::custom;
  std::vector<int> excited_sites;

  double max_norm_drift = 0.0;    // max |<psi|psi> - 1| over samples
  double max_number_drift = 0.0;  // max |sum_j <n_j> - n| over samples
  long total_matvecs = 0;
};

inline ImbalanceTrace run_quench(const SparseHamiltonian& h, const InitialPattern& pattern,
                                 double t_max_ns, const std::vector<double>& sample_times,
                                 const KrylovOptions& opt = {}) {
  const SectorBasis& basis = *h.basis;
  const int n_sites = basis.n_sites;
  const int n_exc = basis.n_excitations;

  if (static_cast<int>(pattern.excited.size()) != n_exc)
    throw std::invalid_argument("pattern excitation count does not match sector");
  if (sample_times.empty() || sample_times.front() != 0.0)
    throw std::invalid_argument("sample times must start at 0");
  for (std::size_t i = 1; i < sample_times.size(); ++i)
    if (!(sample_times[i] > sample_times[i - 1]))
      throw std::invalid_argument("sample times must be strictly ascending");
  if (sample_times.back() > t_max_ns)
    throw std::invalid_argument("sample times exceed t_max");

  std::vector<char> excited_mask(n_sites, 0);
  for (const SiteId& s : pattern.excited) {
    if (s.index >= n_sites) throw std::invalid_argument("pattern site outside graph");
    excited_mask[s.index] = 1;
  }

  const std::uint32_t start = pattern.configuration();
  const std::uint32_t row = basis.index_of(start);

  Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(basis.dim());
  psi(row) = 1.0;

  ImbalanceTrace trace;
  trace.times_ns = sample_times;
  trace.imbalance.resize(sample_times.size());
  trace.per_site_occupations.resize(static_cast<Eigen::Index>(sample_times.size()), n_sites);
  trace.realization = h.realization;
  trace.pattern_label = pattern.label;
  for (const SiteId& s : pattern.excited) trace.excited_sites.push_back(s.index);
  std::sort(trace.excited_sites.begin(), trace.excited_sites.end());

  detail::KrylovInfo info;
  detail::KrylovWorkspace ws;

  // Substep scheduling: aim each Lanczos build at one order below m_max,
  // where the phase covered per matvec is near its optimum but a build that
  // drifts one order high still succeeds instead of being discarded. The
  // Gershgorin interval gives a safe (over-)estimate of the spectral spread,
  // so the first interval starts conservatively and the reach model stretches
  // the substep whenever the observed order comes in low.
  const double tol = opt.tolerance > 0.0 ? opt.tolerance : 1e-14;
  const int m_target = std::min(opt.m_max, std::max(opt.m_min, opt.m_max - 1));
  const double target_reach = detail::lanczos_reach(m_target, tol);
  const double cap_reach = detail::lanczos_reach(opt.m_max, tol);
  const double half_spread_rad_per_ns =
      0.5 * (h.bound_hi_mhz - h.bound_lo_mhz) * radians_per_mhz_ns;
  double dt_good = half_spread_rad_per_ns > 0.0
                       ? target_reach / half_spread_rad_per_ns
                       : std::numeric_limits<double>::infinity();

  std::vector<double> occ(n_sites);
  for (std::size_t k = 0; k < sample_times.size(); ++k) {
    if (k > 0) {
      const double span = sample_times[k] - sample_times[k - 1];
      const int n_sub =
          std::isinf(dt_good) ? 1 : std::max(1, static_cast<int>(std::ceil(span / dt_good - 1e-9)));
      const double sub = span / n_sub;
      const int halvings_before = info.halvings;
      info.min_leaf_dt = std::numeric_limits<double>::infinity();
      int m_observed = 0;
      for (int i = 0; i < n_sub; ++i) {
        detail::krylov_advance(h, psi, sub, opt, 0, info, ws);
        m_observed = std::max(m_observed, info.last_m);
      }
      if (info.halvings > halvings_before) {
        // The halving recursion found a workable leaf at full order; step
        // just under it so the next interval converges without discards.
        dt_good = info.min_leaf_dt * (target_reach / cap_reach);
      } else if (m_observed >= opt.m_max) {
        dt_good = sub * (target_reach / cap_reach);
      } else if (m_observed > 0) {
        const double stretch =
            std::min(target_reach / detail::lanczos_reach(m_observed, tol), 2.5);
        dt_good = std::max(dt_good, sub * stretch);
      }
    }

    std::fill(occ.begin(), occ.end(), 0.0);
    double norm2 = 0.0;
    const std::complex<double>* amp = psi.data();
    for (std::size_t s = 0; s < basis.dim(); ++s) {
      const double p = std::norm(amp[s]);
      norm2 += p;
      for (std::uint32_t bits = basis.states[s]; bits; bits &= bits - 1)
        occ[std::countr_zero(bits)] += p;
    }

    double n1 = 0.0, n0 = 0.0, total = 0.0;
    int n1_count = 0;
    for (int j = 0; j < n_sites; ++j) {
      total += occ[j];
      if (excited_mask[j]) {
        n1 += occ[j];
        ++n1_count;
      } else {
        n0 += occ[j];
      }
    }
    n1 /= std::max(1, n1_count);
    n0 /= std::max(1, n_sites - n1_count);
    trace.imbalance[k] = (n1 - n0) / (n1 + n0);
    for (int j = 0; j < n_sites; ++j)
      trace.per_site_occupations(static_cast<Eigen::Index>(k), j) = occ[j];

    trace.max_norm_drift = std::max(trace.max_norm_drift, std::abs(norm2 - 1.0));
    trace.max_number_drift = std::max(trace.max_number_drift, std::abs(total - n_exc));
    if (opt.conservation_tol > 0.0) {
      if (trace.max_norm_drift > opt.conservation_tol)
        throw NumericError("state norm drifted by " +
                           std::to_string(trace.max_norm_drift) + " at t = " +
                           std::to_string(sample_times[k]) + " ns");
      if (trace.max_number_drift > opt.conservation_tol)
        throw NumericError("excitation number drifted by " +
                           std::to_string(trace.max_number_drift) + " at t = " +
                           std::to_string(sample_times[k]) + " ns");
    }
  }
  trace.total_matvecs = info.matvecs;
  return trace;
}

}  // namespace mbl
