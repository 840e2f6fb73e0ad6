#pragma once

// Interior eigenvalues by polynomially filtered exact diagonalization.
//
// Pipeline: (1) estimate the extremal eigenvalues with plain Lanczos and
// rescale the operator so its spectrum lies strictly inside [-1, 1];
// (2) build a Chebyshev filter peaked at the target sigma, with the order
// picked so the pass band holds about n_ev states (using a stochastic
// kernel-polynomial density-of-states estimate); (3) run block Lanczos on
// the filtered operator; (4) recover eigenvalues of the rescaled operator
// from converged Ritz vectors via Rayleigh quotients, validate residuals,
// and map back to the original units.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mbl/errors.hpp"
#include "mbl/hamiltonian.hpp"
#include "mbl/rng.hpp"

namespace mbl {

template <class Op>
concept LinearOperator = requires(const Op& op, Eigen::Ref<const Eigen::VectorXd> x,
                                  Eigen::Ref<Eigen::VectorXd> y) {
  { op.dim() } -> std::convertible_to<std::size_t>;
  op.apply(x, y);
};

// Dense matrix wrapped as a linear operator (tests, small systems).
struct DenseOperator {
  Eigen::MatrixXd m;
  std::size_t dim() const noexcept { return static_cast<std::size_t>(m.rows()); }
  void apply(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> y) const {
    y = m * x;
  }
};

inline constexpr std::uint64_t default_spectral_seed = 0x706f6c6665640001ull;

struct SpectralWindow {
  double target = 0.0;     // sigma, in rescaled units, inside (-1, 1)
  int n_ev = 200;          // requested eigenvalue count
  int order = 0;           // Chebyshev order; 0 selects automatically
  double threshold = 0.16; // filter acceptance level p
};

struct SpectralResult {
  std::vector<double> eigenvalues_mhz;  // ascending, original units
  std::vector<double> residuals;        // per eigenvalue, rescaled units
  double e0_mhz = 0.0;                  // widened extremal estimates
  double e1_mhz = 0.0;
  double dos_estimate = 0.0;            // rescaled-unit density at sigma
  int order_used = 0;
  double max_orthogonality_drift = 0.0; // only filled when the check is on
};

// Thrown when fewer than n_ev eigenpairs converged; carries what did.
class PartialSpectrumError : public ConvergenceError {
 public:
  PartialSpectrumError(const std::string& what, SpectralResult partial)
      : ConvergenceError(what), partial_(std::move(partial)) {}
  const SpectralResult& partial() const noexcept { return partial_; }

 private:
  SpectralResult partial_;
};

struct ExtremalOptions {
  double rel_tol = 1e-9;
  int max_iterations = 300;
  int max_restarts = 5;
  double widen_fraction = 1e-6;  // of the spread, plus an absolute floor
  std::uint64_t seed = default_spectral_seed;
};

// Smallest and largest eigenvalues by restarted plain Lanczos (no basis kept,
// ghosts do not move the extremes), widened so that rescaling by the result
// puts the true spectrum strictly inside [-1, 1]. A breakdown means an exact
// invariant subspace was explored; its extremes are merged and a fresh random
// start explores the rest.
template <LinearOperator Op>
std::pair<double, double> extremal_eigenvalues(const Op& op,
                                               const ExtremalOptions& opt = {}) {
  const std::size_t dim = op.dim();
  if (dim < 2) throw std::invalid_argument("need dimension at least 2");

  const int iter_cap = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(opt.max_iterations), dim));

  double best_lo = std::numeric_limits<double>::infinity();
  double best_hi = -std::numeric_limits<double>::infinity();
  bool stabilized = false;
  bool any_timeout = false;

  Eigen::VectorXd v(dim), v_prev(dim), w(dim);
  Eigen::VectorXd alpha(iter_cap), beta(iter_cap + 1);

  for (int attempt = 0; attempt <= opt.max_restarts && !stabilized; ++attempt) {
    SplitMix64 rng(derive_seed(opt.seed, static_cast<std::uint64_t>(attempt)));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    v.normalize();
    v_prev.setZero();
    beta(0) = 0.0;

    double prev_lo = std::numeric_limits<double>::quiet_NaN();
    double prev_hi = prev_lo;
    int stable = 0;
    bool broke_down = false;

    for (int m = 1; m <= iter_cap; ++m) {
      op.apply(v, w);
      alpha(m - 1) = v.dot(w);
      w -= alpha(m - 1) * v;
      if (m > 1) w -= beta(m - 1) * v_prev;
      beta(m) = w.norm();

      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
      es.computeFromTridiagonal(alpha.head(m), beta.segment(1, m - 1),
                                Eigen::EigenvaluesOnly);
      const double lo = es.eigenvalues()(0);
      const double hi = es.eigenvalues()(m - 1);

      const double scale =
          std::max({std::abs(lo), std::abs(hi), hi - lo, 1e-300});
      if (std::abs(lo - prev_lo) <= opt.rel_tol * scale &&
          std::abs(hi - prev_hi) <= opt.rel_tol * scale) {
        if (++stable >= 2) {
          best_lo = std::min(best_lo, lo);
          best_hi = std::max(best_hi, hi);
          stabilized = true;
          break;
        }
      } else {
        stable = 0;
      }
      prev_lo = lo;
      prev_hi = hi;

      // A vanishing beta means an exact invariant subspace; m reaching the
      // space dimension means the Krylov space closed with the extremes
      // exact either way (the later widening absorbs roundoff).
      if (beta(m) <= 1e-13 * scale || m == static_cast<int>(dim)) {
        best_lo = std::min(best_lo, lo);
        best_hi = std::max(best_hi, hi);
        broke_down = true;
        break;
      }
      w /= beta(m);
      v_prev.swap(v);
      v.swap(w);
    }
    if (!stabilized && !broke_down) any_timeout = true;
  }

  // A breakdown yields exact extremes of the explored invariant subspace, so
  // all-breakdown runs (e.g. on highly degenerate operators) return the
  // merged estimates. An attempt whose estimates were still moving when the
  // iteration budget ran out means the result cannot be trusted.
  if (!stabilized && (any_timeout || !(best_lo <= best_hi)))
    throw ConvergenceError("extremal eigenvalues did not converge");

  const double spread = best_hi - best_lo;
  const double margin = opt.widen_fraction * spread +
                        1e-9 * std::max({1.0, std::abs(best_lo), std::abs(best_hi)});
  return {best_lo - margin, best_hi + margin};
}

// Lazy affine view H_R = (2 H - e0 - e1) / (e1 - e0).
template <LinearOperator Op>
struct RescaledOperator {
  const Op* inner;
  double e0, e1;

  std::size_t dim() const noexcept { return inner->dim(); }

  void apply(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> y) const {
    inner->apply(x, y);
    y = (2.0 / (e1 - e0)) * y - ((e0 + e1) / (e1 - e0)) * x;
  }

  double to_original(double rescaled) const noexcept {
    return 0.5 * ((e1 - e0) * rescaled + e0 + e1);
  }
  double to_rescaled(double original) const noexcept {
    return (2.0 * original - e0 - e1) / (e1 - e0);
  }
};

template <LinearOperator Op>
RescaledOperator<Op> rescale(const Op& op, double e0, double e1) {
  if (!(e1 > e0)) throw std::invalid_argument("need e1 > e0 to rescale");
  return {&op, e0, e1};
}

// Filter coefficients c_n = sqrt(4 - 3*delta_{n0}) * cos(n * arccos(sigma)):
// c_0 = 1, c_n = 2 cos(n a). The normalization D = sum_n c_n T_n(sigma)
// makes the filter equal 1 at sigma.
inline std::vector<double> chebyshev_filter_coefficients(double sigma, int order) {
  if (order < 1) throw std::invalid_argument("filter order must be at least 1");
  if (!(sigma >= -1.0 && sigma <= 1.0))
    throw std::invalid_argument("sigma outside [-1, 1]");
  const double a = std::acos(sigma);
  std::vector<double> c(order + 1);
  c[0] = 1.0;
  for (int n = 1; n <= order; ++n) c[n] = 2.0 * std::cos(n * a);
  return c;
}

inline double chebyshev_filter_normalization(double sigma, int order) {
  const double a = std::acos(sigma);
  double d = 1.0;
  for (int n = 1; n <= order; ++n) {
    const double t = std::cos(n * a);
    d += 2.0 * t * t;
  }
  return d;
}

// Scalar filter value P_sigma^K(x) for x in [-1, 1].
inline double chebyshev_filter_scalar(double x, double sigma, int order) {
  if (!(x >= -1.0 && x <= 1.0)) throw std::invalid_argument("x outside [-1, 1]");
  const double a = std::acos(sigma);
  const double phi = std::acos(x);
  double acc = 1.0;
  for (int n = 1; n <= order; ++n)
    acc += 2.0 * std::cos(n * a) * std::cos(n * phi);
  return acc / chebyshev_filter_normalization(sigma, order);
}

// P_sigma^K(op) as a linear operator; costs exactly `order` applications of
// the underlying operator per apply (three-term Chebyshev recurrence).
template <LinearOperator Op>
class ChebyshevFilter {
 public:
  ChebyshevFilter(const Op& op, double sigma, int order)
      : op_(&op), sigma_(sigma), order_(order) {
    if (!(std::abs(sigma) < 1.0)) throw std::invalid_argument("sigma outside (-1, 1)");
    coeff_ = chebyshev_filter_coefficients(sigma, order);
    norm_ = chebyshev_filter_normalization(sigma, order);
  }

  std::size_t dim() const noexcept { return op_->dim(); }
  int order() const noexcept { return order_; }
  double scalar(double x) const { return chebyshev_filter_scalar(x, sigma_, order_); }

  void apply(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> y) const {
    const Eigen::Index n = x.size();
    Eigen::VectorXd t_prev = x;           // T_0 v
    Eigen::VectorXd t_cur(n), t_next(n);
    op_->apply(x, t_cur);                 // T_1 v
    y = (coeff_[0] / norm_) * t_prev + (coeff_[1] / norm_) * t_cur;
    for (int k = 2; k <= order_; ++k) {
      op_->apply(t_cur, t_next);
      t_next = 2.0 * t_next - t_prev;
      y += (coeff_[k] / norm_) * t_next;
      t_prev.swap(t_cur);
      t_cur.swap(t_next);
    }
  }

 private:
  const Op* op_;
  double sigma_;
  int order_;
  std::vector<double> coeff_;
  double norm_;
};

template <LinearOperator Op>
Eigen::VectorXd chebyshev_filter_apply(const Op& rescaled, const Eigen::VectorXd& v,
                                       double sigma, int order) {
  ChebyshevFilter<Op> f(rescaled, sigma, order);
  Eigen::VectorXd out(v.size());
  f.apply(v, out);
  return out;
}

struct DosOptions {
  int n_probes = 20;
  int n_moments = 200;
  std::uint64_t seed = default_spectral_seed;
  double floor = 1e-12;
};

// Kernel-polynomial estimate of the normalized eigenvalue density of a
// rescaled operator at sigma: Chebyshev moments from Rademacher probe
// vectors, Jackson damping. Negative raw values clamp to a small floor.
template <LinearOperator Op>
double estimate_dos(const Op& rescaled, double sigma, const DosOptions& opt = {}) {
  if (!(std::abs(sigma) < 1.0)) throw std::invalid_argument("sigma outside (-1, 1)");
  if (opt.n_probes < 1 || opt.n_moments < 2)
    throw std::invalid_argument("need at least one probe and two moments");

  const std::size_t dim = rescaled.dim();
  const int nm = opt.n_moments;
  std::vector<double> mu(nm, 0.0);

  Eigen::VectorXd r(dim), t_prev(dim), t_cur(dim), t_next(dim);
  for (int probe = 0; probe < opt.n_probes; ++probe) {
    SplitMix64 rng(derive_seed(opt.seed, 1000 + probe));
    for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = rng.sign();

    t_prev = r;
    rescaled.apply(r, t_cur);
    mu[0] += static_cast<double>(dim);  // r.r = dim exactly for +-1 entries
    mu[1] += r.dot(t_cur);
    for (int n = 2; n < nm; ++n) {
      rescaled.apply(t_cur, t_next);
      t_next = 2.0 * t_next - t_prev;
      mu[n] += r.dot(t_next);
      t_prev.swap(t_cur);
      t_cur.swap(t_next);
    }
  }
  const double inv = 1.0 / (static_cast<double>(opt.n_probes) * static_cast<double>(dim));
  for (double& m : mu) m *= inv;

  // Jackson kernel over nm moments.
  const double q = std::numbers::pi / (nm + 1);
  auto jackson = [&](int n) {
    return ((nm - n + 1) * std::cos(q * n) + std::sin(q * n) / std::tan(q)) / (nm + 1);
  };

  double acc = jackson(0) * mu[0];
  for (int n = 1; n < nm; ++n) acc += 2.0 * jackson(n) * mu[n] * std::cos(n * std::acos(sigma));
  const double rho = acc / (std::numbers::pi * std::sqrt(1.0 - sigma * sigma));

  if (rho < opt.floor) {
    std::fprintf(stderr,
                 "warning: density estimate %.3e at sigma=%.3f clamped to %.1e\n", rho,
                 sigma, opt.floor);
    return opt.floor;
  }
  return rho;
}

namespace detail {

// Half-width from sigma at which the scalar filter first drops below p,
// averaged over both sides; sides that never drop before the domain edge
// contribute the distance to the edge.
inline double filter_half_width(double sigma, int order, double p) {
  auto crossing = [&](int dir) {
    const double edge = (dir > 0) ? 1.0 - sigma : sigma + 1.0;
    const double step = 0.25 * std::numbers::pi / order;
    double prev = 0.0;
    double t = step;
    while (t < edge) {
      if (chebyshev_filter_scalar(sigma + dir * t, sigma, order) < p) {
        double lo = prev, hi = t;  // value >= p at lo, < p at hi
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          if (chebyshev_filter_scalar(sigma + dir * mid, sigma, order) < p)
            hi = mid;
          else
            lo = mid;
        }
        return 0.5 * (lo + hi);
      }
      prev = t;
      t += step;
    }
    return edge;
  };
  return 0.5 * (crossing(+1) + crossing(-1));
}

}  // namespace detail

// Smallest Chebyshev order K in [8, 65536] whose pass band (half-width at
// filter level p) is expected to hold at most n_ev eigenvalues:
// 2 * eps(K, p) * rho * dim <= n_ev, by integer bisection.
inline int select_order(double rho, int n_ev, std::size_t dim, double p,
                        double sigma = 0.0) {
  if (!(rho > 0.0)) throw std::invalid_argument("density must be positive");
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("threshold outside (0, 1)");
  if (n_ev < 2) throw std::invalid_argument("need n_ev >= 2");
  if (static_cast<std::size_t>(n_ev) > dim)
    throw std::invalid_argument("n_ev exceeds matrix dimension");
  if (!(std::abs(sigma) < 1.0)) throw std::invalid_argument("sigma outside (-1, 1)");

  const auto count = [&](int k) {
    return 2.0 * detail::filter_half_width(sigma, k, p) * rho *
           static_cast<double>(dim);
  };

  int lo = 8, hi = 65536;
  if (count(lo) <= n_ev) return lo;
  if (count(hi) > n_ev)
    throw NumericError("no filter order up to 65536 narrows the window enough");
  while (lo < hi) {
    const int mid = lo + (hi - lo) / 2;
    if (count(mid) <= n_ev)
      hi = mid;
    else
      lo = mid + 1;
  }
  return lo;
}

struct PolfedOptions {
  int block_size = 4;
  int max_blocks = 0;  // 0: enough blocks for about 4.5 * n_ev basis columns
  double stop_residual_tol = 1e-8;   // pair counts as settled below this
  double eigen_residual_tol = 1e-6;  // acceptance bound on returned pairs
  // Projected values with residuals above this floor are unresolved mixtures
  // of far-spectrum states: their residual interval pins no eigenvalue near
  // the target, so selection steps over them. Values between the acceptance
  // bound and the floor are genuine window members still converging.
  double spurious_residual_floor = 1e-3;
  std::uint64_t seed = default_spectral_seed;
  bool check_orthogonality = false;
  DosOptions dos = {};
};

// Block Lanczos driven by the Chebyshev-filtered rescaled operator. The
// filter concentrates the Krylov space on eigenvectors near sigma, but it
// also compresses the wanted window into a narrow cluster of its own
// spectrum, so Ritz data of the filtered problem resolves individual pairs
// very slowly. Eigenvalues are therefore read off by projecting the
// unfiltered rescaled operator onto the accumulated basis (Rayleigh-Ritz),
// where the window is well separated. A Ritz pair counts as settled once
// its true residual ||H u - eps u|| drops below stop_residual_tol, which
// bounds the eigenvalue error by the same amount; iteration stops when the
// n_ev pairs nearest sigma have all settled. Returned pairs must pass
// eigen_residual_tol, the selected window never steps over a worse-converged
// value sitting nearer sigma, and values are mapped back through the affine
// view and returned ascending. If the recurrence exhausts an invariant
// subspace first, the projection inside it is exact.
template <LinearOperator Op>
SpectralResult block_lanczos_polfed(const RescaledOperator<Op>& h_r, double sigma,
                                    int order, int n_ev,
                                    const PolfedOptions& opt = {}) {
  const std::size_t dim = h_r.dim();
  if (n_ev < 1) throw std::invalid_argument("need n_ev >= 1");
  if (static_cast<std::size_t>(n_ev) > dim)
    throw std::invalid_argument("n_ev exceeds matrix dimension");
  if (opt.block_size < 1) throw std::invalid_argument("block size must be positive");

  const ChebyshevFilter<RescaledOperator<Op>> filter(h_r, sigma, order);
  const int s = opt.block_size;
  // The filter's side lobes pass a fringe of near-band states whose mass is
  // a fixed multiple of the band mass at every order, so the basis has to
  // grow well past n_ev columns before the window itself settles; 4.5x
  // covers the measured need with margin.
  const int max_blocks =
      opt.max_blocks > 0
          ? opt.max_blocks
          : static_cast<int>(std::ceil(4.5 * n_ev / static_cast<double>(s))) + 2;
  const Eigen::Index nd = static_cast<Eigen::Index>(dim);

  // One extra block is staged beyond the processed ones; total storage never
  // exceeds the space dimension.
  const Eigen::Index max_cols = std::min<Eigen::Index>(
      nd, static_cast<Eigen::Index>(max_blocks + 1) * s);

  Eigen::MatrixXd q_all(nd, max_cols);  // orthonormal blocks, side by side
  // Projection of the rescaled operator onto the stored basis, kept current
  // as columns are appended: one extra matvec per column buys exact Ritz
  // data without a second basis-sized buffer.
  Eigen::MatrixXd proj = Eigen::MatrixXd::Zero(max_cols, max_cols);

  SplitMix64 rng(derive_seed(opt.seed, 2));
  double ortho_drift = 0.0;

  // Orthonormalizes `cols` columns written at q_all[, start..): column-wise
  // modified Gram-Schmidt against everything stored before, with
  // rank-deficient columns replaced by fresh random directions (soft
  // restart). Returns how many columns were produced; fewer than requested
  // means even random directions vanished, i.e. the space is exhausted.
  const auto orthonormalize_block = [&](Eigen::Index start, int cols) {
    for (int c = 0; c < cols; ++c) {
      auto col = q_all.col(start + c);
      const double pre_norm = col.norm();
      const Eigen::Index before = start + c;
      auto project_out = [&] {
        if (before == 0) return;
        col -= q_all.leftCols(before) * (q_all.leftCols(before).transpose() * col);
        col -= q_all.leftCols(before) * (q_all.leftCols(before).transpose() * col);
      };
      project_out();
      double nrm = col.norm();
      if (nrm <= std::max(1e-10 * pre_norm, 1e-13)) {
        for (int tries = 0; tries < 4; ++tries) {
          for (Eigen::Index i = 0; i < nd; ++i) col(i) = rng.normal();
          project_out();
          nrm = col.norm();
          if (nrm > 1e-6) break;
          nrm = 0.0;
        }
        if (nrm == 0.0) return c;  // space exhausted
      }
      col /= nrm;
    }
    return cols;
  };

  // Extends proj to cover `cols` freshly orthonormalized columns starting at
  // `start`: one matvec per column plus one tall GEMM.
  Eigen::MatrixXd hw_block;
  const auto append_to_projection = [&](Eigen::Index start, int cols) {
    hw_block.resize(nd, cols);
    for (int c = 0; c < cols; ++c)
      h_r.apply(q_all.col(start + c), hw_block.col(c));
    const Eigen::Index rows = start + cols;
    proj.block(0, start, rows, cols).noalias() =
        q_all.leftCols(rows).transpose() * hw_block;
    proj.block(start, 0, cols, start) =
        proj.block(0, start, start, cols).transpose();
    auto diag = proj.block(start, start, cols, cols);
    diag = 0.5 * (diag + diag.transpose()).eval();
  };

  // Ritz data of the projected operator over the first nt stored columns,
  // ordered by distance from sigma.
  struct Candidate {
    double eps;        // projected eigenvalue, rescaled units
    Eigen::Index idx;  // column in the eigenvector matrix
  };
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  std::vector<Candidate> candidates;
  const auto solve_projection = [&](Eigen::Index nt) {
    es.compute(proj.topLeftCorner(nt, nt));
    candidates.clear();
    candidates.reserve(static_cast<std::size_t>(nt));
    for (Eigen::Index i = 0; i < nt; ++i)
      candidates.push_back({es.eigenvalues()(i), i});
    std::sort(candidates.begin(), candidates.end(),
              [&](const Candidate& a, const Candidate& b) {
                return std::abs(a.eps - sigma) < std::abs(b.eps - sigma);
              });
  };

  // True residuals ||H u - eps u|| for candidates [first, last), batched so
  // the basis GEMM runs once per call.
  Eigen::MatrixXd ritz_y, ritz_u, ritz_hu;
  std::vector<double> res_buf;
  const auto residuals_for = [&](Eigen::Index nt, std::size_t first,
                                 std::size_t last) {
    const Eigen::Index m = static_cast<Eigen::Index>(last - first);
    ritz_y.resize(nt, m);
    for (Eigen::Index k = 0; k < m; ++k)
      ritz_y.col(k) =
          es.eigenvectors().col(candidates[first + static_cast<std::size_t>(k)].idx);
    ritz_u.noalias() = q_all.leftCols(nt) * ritz_y;
    ritz_hu.resize(nd, m);
    res_buf.resize(static_cast<std::size_t>(m));
    for (Eigen::Index k = 0; k < m; ++k) {
      ritz_u.col(k).normalize();
      h_r.apply(ritz_u.col(k), ritz_hu.col(k));
      const double eps = candidates[first + static_cast<std::size_t>(k)].eps;
      res_buf[static_cast<std::size_t>(k)] =
          (ritz_hu.col(k) - eps * ritz_u.col(k)).norm();
    }
  };

  // Walks candidates outward from sigma after solve_projection(nt): a value
  // whose residual passes accept_tol joins the window; one whose residual
  // exceeds the spurious floor is stepped over; anything in between is a
  // genuine near-sigma value still converging, which ends the walk so the
  // window never silently skips it. True when n_ev values were accepted.
  struct Accepted {
    double eps;
    double residual;
  };
  std::vector<Accepted> walk;
  std::vector<double> walk_res;
  const auto walk_window = [&](Eigen::Index nt, double accept_tol) {
    walk.clear();
    walk_res.clear();
    const std::size_t want = static_cast<std::size_t>(n_ev);
    int skipped = 0;
    for (std::size_t t = 0; t < candidates.size() && walk.size() < want; ++t) {
      if (t == walk_res.size()) {
        residuals_for(nt, t, std::min(candidates.size(), t + want));
        walk_res.insert(walk_res.end(), res_buf.begin(), res_buf.end());
      }
      const double r = walk_res[t];
      if (r <= accept_tol)
        walk.push_back({candidates[t].eps, r});
      else if (r >= opt.spurious_residual_floor) {
        if (++skipped > 64) break;  // too murky; grow the basis instead
      } else {
        break;
      }
    }
    return walk.size() == want;
  };

  // The run may stop once the n_ev projected pairs nearest sigma all carry
  // residuals below the stop tolerance.
  const auto window_converged = [&](Eigen::Index nt) {
    if (nt < static_cast<Eigen::Index>(n_ev)) return false;
    solve_projection(nt);
    return walk_window(nt, opt.stop_residual_tol);
  };

  // First block: random, orthonormalized.
  const int s0 = static_cast<int>(std::min<Eigen::Index>(s, nd));
  for (int c = 0; c < s0; ++c)
    for (Eigen::Index i = 0; i < nd; ++i) q_all(i, c) = rng.normal();
  orthonormalize_block(0, s0);
  append_to_projection(0, s0);

  std::vector<Eigen::Index> block_start{0};
  std::vector<int> block_cols{s0};
  Eigen::MatrixXd b_next;         // coupling from the previous block
  Eigen::Index total_cols = s0;   // stored columns (incl. staged block)
  bool stopped_converged = false;
  constexpr int check_every = 5;  // blocks between convergence checks

  Eigen::MatrixXd u;
  for (int j = 0; j < max_blocks; ++j) {
    const Eigen::Index js = block_start[j];
    const int jc = block_cols[j];

    u.resize(nd, jc);
    for (int c = 0; c < jc; ++c) filter.apply(q_all.col(js + c), u.col(c));
    if (j > 0)
      u -= q_all.middleCols(block_start[j - 1], block_cols[j - 1]) *
           b_next.transpose();

    Eigen::MatrixXd a = q_all.middleCols(js, jc).transpose() * u;
    a = 0.5 * (a + a.transpose()).eval();
    u -= q_all.middleCols(js, jc) * a;

    const int next_cols = static_cast<int>(std::min<Eigen::Index>(s, nd - total_cols));
    if (next_cols <= 0) break;  // every direction of the space is stored

    q_all.middleCols(total_cols, next_cols) = u.leftCols(next_cols);
    const int ok_cols = orthonormalize_block(total_cols, next_cols);
    if (ok_cols == 0) break;  // invariant subspace exhausted

    // Coupling B_{j+1} = Q_{j+1}^T R_{j+1}; with soft-restarted columns the
    // corresponding rows are near zero, which is the correct coupling for a
    // restarted direction. Full reorthogonalization keeps the basis sound
    // either way.
    b_next = q_all.middleCols(total_cols, ok_cols).transpose() * u;
    append_to_projection(total_cols, ok_cols);

    block_start.push_back(total_cols);
    block_cols.push_back(ok_cols);
    total_cols += ok_cols;

    if (opt.check_orthogonality) {
      const Eigen::MatrixXd g =
          q_all.leftCols(total_cols).transpose() * q_all.leftCols(total_cols);
      ortho_drift = std::max(ortho_drift,
                             (g - Eigen::MatrixXd::Identity(total_cols, total_cols))
                                 .cwiseAbs()
                                 .maxCoeff());
    }

    if ((j + 1) % check_every == 0 && window_converged(total_cols)) {
      stopped_converged = true;
      break;
    }
  }

  // Extraction: when the stop fired, the walk buffer already holds the n_ev
  // accepted pairs at the (stricter) stop tolerance; otherwise run the walk
  // once more at the acceptance bound over everything stored.
  if (!stopped_converged) {
    solve_projection(total_cols);
    walk_window(total_cols, opt.eigen_residual_tol);
  }
  std::vector<Accepted>& accepted = walk;

  SpectralResult result;
  result.e0_mhz = h_r.e0;
  result.e1_mhz = h_r.e1;
  result.order_used = order;
  result.max_orthogonality_drift = ortho_drift;

  std::sort(accepted.begin(), accepted.end(),
            [](const Accepted& a, const Accepted& b) { return a.eps < b.eps; });
  result.eigenvalues_mhz.reserve(accepted.size());
  result.residuals.reserve(accepted.size());
  for (const auto& c : accepted) {
    result.eigenvalues_mhz.push_back(h_r.to_original(c.eps));
    result.residuals.push_back(c.residual);
  }

  if (accepted.size() < static_cast<std::size_t>(n_ev))
    throw PartialSpectrumError(
        "only " + std::to_string(accepted.size()) + " of " + std::to_string(n_ev) +
            " eigenpairs converged within the block budget",
        std::move(result));
  return result;
}

// Full pipeline on an unrescaled operator.
template <LinearOperator Op>
SpectralResult polfed_spectrum(const Op& h, const SpectralWindow& window,
                               const PolfedOptions& opt = {}) {
  if (!(std::abs(window.target) < 1.0))
    throw std::invalid_argument("window target outside (-1, 1)");
  ExtremalOptions ex;
  ex.seed = opt.seed;
  const auto [e0, e1] = extremal_eigenvalues(h, ex);
  const RescaledOperator<Op> h_r = rescale(h, e0, e1);

  DosOptions dos_opt = opt.dos;
  dos_opt.seed = opt.seed;
  const double rho = estimate_dos(h_r, window.target, dos_opt);

  const int order = window.order > 0
                        ? window.order
                        : select_order(rho, window.n_ev, h.dim(), window.threshold,
                                       window.target);

  try {
    SpectralResult result =
        block_lanczos_polfed(h_r, window.target, order, window.n_ev, opt);
    result.dos_estimate = rho;
    return result;
  } catch (PartialSpectrumError& e) {
    SpectralResult partial = e.partial();
    partial.dos_estimate = rho;
    throw PartialSpectrumError(e.what(), std::move(partial));
  }
}

// Consecutive-gap ratios r_k = min(d_k, d_{k+1}) / max(d_k, d_{k+1}) for an
// ascending spectrum; one value per interior eigenvalue.
inline std::vector<double> gap_ratios(const std::vector<double>& ascending) {
  if (ascending.size() < 3)
    throw std::invalid_argument("need at least 3 eigenvalues for gap ratios");
  for (std::size_t i = 1; i < ascending.size(); ++i) {
    const double d = ascending[i] - ascending[i - 1];
    if (d < 0.0) throw std::invalid_argument("eigenvalues not in ascending order");
    if (!(d > 1e-12))
      throw DegenerateSpectrumError(
          "spacing between eigenvalues " + std::to_string(i - 1) + " and " +
              std::to_string(i) + " is below 1e-12",
          i - 1, i);
  }
  std::vector<double> r(ascending.size() - 2);
  for (std::size_t i = 1; i + 1 < ascending.size(); ++i) {
    const double d_lo = ascending[i] - ascending[i - 1];
    const double d_hi = ascending[i + 1] - ascending[i];
    r[i - 1] = std::min(d_lo, d_hi) / std::max(d_lo, d_hi);
  }
  return r;
}

}  // namespace mbl
