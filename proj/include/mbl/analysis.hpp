#pragma once

// Curve fitting and diagnostics for relaxation data: power-law exponents
// from imbalance traces, linear size trends, the C*W^(-gamma) disorder decay
// law with a resampled threshold crossing, piecewise-linear boundary and
// crossing finders for gap-ratio curves, and ensemble averaging.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <mbl/dynamics.hpp>
#include <mbl/errors.hpp>
#include <mbl/rng.hpp>

namespace mbl {

inline constexpr double default_fit_t_lo_ns = 250.0;
inline constexpr double default_fit_t_hi_ns = 1000.0;

// Symmetric 2x2 covariance, row-major.
using Covariance2 = std::array<std::array<double, 2>, 2>;

namespace detail {

struct OlsLine {
  double intercept = 0.0;
  double slope = 0.0;
  double var_intercept = 0.0;
  double var_slope = 0.0;
  double cov_is = 0.0;  // covariance of (intercept, slope)
};

// Ordinary least squares of y on x with the textbook parameter covariance
// (residual variance estimated with n-2 degrees of freedom; zero when n == 2
// so exact interpolation reports exact certainty).
inline OlsLine ols_line(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double xbar = 0.0, ybar = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    xbar += x[i];
    ybar += y[i];
  }
  xbar /= static_cast<double>(n);
  ybar /= static_cast<double>(n);

  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - xbar) * (x[i] - xbar);
    sxy += (x[i] - xbar) * (y[i] - ybar);
  }
  if (!(sxx > 0.0)) throw RankError("regressor values are all identical");

  OlsLine fit;
  fit.slope = sxy / sxx;
  fit.intercept = ybar - fit.slope * xbar;

  if (n > 2) {
    double ssr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - fit.intercept - fit.slope * x[i];
      ssr += r * r;
    }
    const double sigma2 = ssr / static_cast<double>(n - 2);
    fit.var_slope = sigma2 / sxx;
    fit.var_intercept = sigma2 * (1.0 / static_cast<double>(n) + xbar * xbar / sxx);
    fit.cov_is = -sigma2 * xbar / sxx;
  }
  return fit;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Power-law relaxation fit I(t) ~ amplitude * t^(-beta)

struct PowerLawFit {
  double beta = 0.0;
  double amplitude = 1.0;
  double beta_stderr = 0.0;
  double t_lo_ns = 0.0;
  double t_hi_ns = 0.0;
  Covariance2 covariance{};  // of (ln amplitude, slope); beta = -slope
  int n_points = 0;
};

// Ordinary least squares of ln I on ln t over the window [t_lo, t_hi];
// beta = -slope. Samples with I <= 0 inside the window are excluded; fewer
// than 4 usable samples is an error.
inline PowerLawFit fit_power_law(const std::vector<double>& times_ns,
                                 const std::vector<double>& imbalance,
                                 double t_lo_ns = default_fit_t_lo_ns,
                                 double t_hi_ns = default_fit_t_hi_ns) {
  if (times_ns.size() != imbalance.size())
    throw std::invalid_argument("times and imbalance lengths differ");
  if (!(t_lo_ns < t_hi_ns)) throw std::invalid_argument("fit window is empty");
  if (!(t_lo_ns > 0.0))
    throw std::invalid_argument("fit window must start at positive time");

  std::vector<double> x, y;
  for (std::size_t i = 0; i < times_ns.size(); ++i) {
    const double t = times_ns[i];
    if (t < t_lo_ns || t > t_hi_ns) continue;
    if (!(imbalance[i] > 0.0)) continue;
    x.push_back(std::log(t));
    y.push_back(std::log(imbalance[i]));
  }
  if (x.size() < 4)
    throw InsufficientDataError(
        "need at least 4 positive samples inside the fit window, have " +
        std::to_string(x.size()));

  const detail::OlsLine line = detail::ols_line(x, y);
  PowerLawFit fit;
  fit.beta = -line.slope;
  fit.amplitude = std::exp(line.intercept);
  fit.beta_stderr = std::sqrt(line.var_slope);
  fit.t_lo_ns = t_lo_ns;
  fit.t_hi_ns = t_hi_ns;
  fit.covariance = {{{line.var_intercept, line.cov_is}, {line.cov_is, line.var_slope}}};
  fit.n_points = static_cast<int>(x.size());
  return fit;
}

inline PowerLawFit fit_power_law(const ImbalanceTrace& trace,
                                 double t_lo_ns = default_fit_t_lo_ns,
                                 double t_hi_ns = default_fit_t_hi_ns) {
  return fit_power_law(trace.times_ns, trace.imbalance, t_lo_ns, t_hi_ns);
}

// ---------------------------------------------------------------------------
// Linear trend of the exponent against system size

struct SizePoint {
  double n_sites = 0.0;
  double beta = 0.0;
  double beta_stderr = 0.0;
};

struct SizeTrendFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
  bool weighted = false;
};

// Straight-line fit of beta against size. When every point carries a
// positive uncertainty the fit is weighted by 1/stderr^2 and the slope
// uncertainty follows from those known variances; otherwise ordinary least
// squares with residual-based uncertainty (zero for the two-point exact
// interpolation).
inline SizeTrendFit fit_beta_vs_size(const std::vector<SizePoint>& points) {
  if (points.size() < 2)
    throw InsufficientDataError("need at least 2 points for a size trend");
  bool distinct = false;
  for (const SizePoint& p : points)
    if (p.n_sites != points.front().n_sites) distinct = true;
  if (!distinct) throw RankError("all points share one size; slope is undetermined");

  const bool weighted =
      std::all_of(points.begin(), points.end(),
                  [](const SizePoint& p) { return p.beta_stderr > 0.0; });

  SizeTrendFit fit;
  fit.weighted = weighted;
  if (weighted) {
    double sw = 0.0, swx = 0.0, swy = 0.0;
    for (const SizePoint& p : points) {
      const double w = 1.0 / (p.beta_stderr * p.beta_stderr);
      sw += w;
      swx += w * p.n_sites;
      swy += w * p.beta;
    }
    const double xbar = swx / sw, ybar = swy / sw;
    double sxx = 0.0, sxy = 0.0;
    for (const SizePoint& p : points) {
      const double w = 1.0 / (p.beta_stderr * p.beta_stderr);
      sxx += w * (p.n_sites - xbar) * (p.n_sites - xbar);
      sxy += w * (p.n_sites - xbar) * (p.beta - ybar);
    }
    fit.slope = sxy / sxx;
    fit.intercept = ybar - fit.slope * xbar;
    fit.slope_stderr = std::sqrt(1.0 / sxx);
  } else {
    std::vector<double> x, y;
    x.reserve(points.size());
    y.reserve(points.size());
    for (const SizePoint& p : points) {
      x.push_back(p.n_sites);
      y.push_back(p.beta);
    }
    const detail::OlsLine line = detail::ols_line(x, y);
    fit.slope = line.slope;
    fit.intercept = line.intercept;
    fit.slope_stderr = std::sqrt(line.var_slope);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Disorder decay law beta = C * W^(-gamma)

struct DisorderPoint {
  double w_mhz = 0.0;
  double beta = 0.0;
  double beta_stderr = 0.0;
};

struct DecayLawFit {
  double c = 0.0;
  double gamma = 0.0;
  double c_stderr = 0.0;
  double gamma_stderr = 0.0;
  Covariance2 covariance{};  // of (ln C, gamma)
  int n_points = 0;
};

// Ordinary least squares of ln beta on ln W; gamma = -slope, C =
// exp(intercept). Points with beta <= 0 are excluded with a warning; fewer
// than 3 usable points is an error.
inline DecayLawFit fit_decay_law(const std::vector<DisorderPoint>& points) {
  std::vector<double> x, y;
  for (const DisorderPoint& p : points) {
    if (!(p.w_mhz > 0.0))
      throw std::invalid_argument("disorder strengths must be positive");
    if (!(p.beta > 0.0)) {
      std::fprintf(stderr,
                   "[mbl] fit_decay_law: skipping nonpositive exponent %g at W=%g\n",
                   p.beta, p.w_mhz);
      continue;
    }
    x.push_back(std::log(p.w_mhz));
    y.push_back(std::log(p.beta));
  }
  if (x.size() < 3)
    throw InsufficientDataError("need at least 3 points with positive exponents, have " +
                                std::to_string(x.size()));

  const detail::OlsLine line = detail::ols_line(x, y);
  DecayLawFit fit;
  fit.gamma = -line.slope;
  fit.c = std::exp(line.intercept);
  fit.gamma_stderr = std::sqrt(line.var_slope);
  fit.c_stderr = fit.c * std::sqrt(line.var_intercept);
  // (ln C, gamma) = (intercept, -slope): negating the second coordinate
  // flips the sign of the cross term only.
  fit.covariance = {{{line.var_intercept, -line.cov_is}, {-line.cov_is, line.var_slope}}};
  fit.n_points = static_cast<int>(x.size());
  return fit;
}

// ---------------------------------------------------------------------------
// Threshold crossing W* with resampled uncertainty

struct ThresholdCrossing {
  double w_star_mhz = 0.0;
  double w_star_std_mhz = 0.0;
  double threshold = 0.0;
  int n_rep = 0;
  double rejected_fraction = 0.0;  // resamples discarded for nonpositive gamma
};

// Disorder strength where the fitted decay law crosses `threshold`:
// ln W* = (ln C - ln threshold) / gamma. The uncertainty is the sample
// standard deviation of W* over n_rep draws of (ln C, gamma) from the
// bivariate normal defined by the fit covariance (2x2 Cholesky); draws with
// gamma <= 0 have no finite crossing and are redrawn, with the rejected
// fraction reported.
inline ThresholdCrossing extract_w_star(const DecayLawFit& fit, double threshold,
                                        int n_rep = 5000,
                                        std::uint64_t seed = 2024) {
  if (!(threshold > 0.0)) throw std::invalid_argument("threshold must be positive");
  if (n_rep < 1) throw std::invalid_argument("need at least one resample");
  if (!(fit.gamma > 0.0))
    throw NumericError("fitted decay exponent is nonpositive; no finite crossing");
  if (!(fit.c > 0.0)) throw NumericError("fitted amplitude is nonpositive");

  const double c00 = fit.covariance[0][0];
  const double c01 = fit.covariance[0][1];
  const double c10 = fit.covariance[1][0];
  const double c11 = fit.covariance[1][1];
  const double scale = std::max({std::abs(c00), std::abs(c11), 1e-300});
  if (std::abs(c01 - c10) > 1e-12 * scale)
    throw NumericError("covariance matrix is not symmetric");
  if (c00 < -1e-15 * scale || c11 < -1e-15 * scale ||
      c00 * c11 - c01 * c01 < -1e-12 * scale * scale)
    throw NumericError("covariance matrix is not positive semidefinite");

  // Cholesky factor of [[c00, c01], [c01, c11]], tolerant of exact zeros.
  const double l00 = std::sqrt(std::max(c00, 0.0));
  const double l10 = l00 > 0.0 ? c01 / l00 : 0.0;
  const double l11 = std::sqrt(std::max(c11 - l10 * l10, 0.0));

  const double ln_c = std::log(fit.c);
  const double ln_th = std::log(threshold);

  ThresholdCrossing out;
  out.threshold = threshold;
  out.n_rep = n_rep;
  out.w_star_mhz = std::exp((ln_c - ln_th) / fit.gamma);

  SplitMix64 rng(seed);
  long rejected = 0;
  const long max_attempts = 200L * n_rep + 1000L;
  double mean = 0.0, m2 = 0.0;
  int accepted = 0;
  for (long attempt = 0; accepted < n_rep; ++attempt) {
    if (attempt >= max_attempts)
      throw ConvergenceError(
          "resampling rejected too many nonpositive-exponent draws");
    const double z0 = rng.normal();
    const double z1 = rng.normal();
    const double ln_c_draw = ln_c + l00 * z0;
    const double gamma_draw = fit.gamma + l10 * z0 + l11 * z1;
    if (!(gamma_draw > 0.0)) {
      ++rejected;
      continue;
    }
    const double w = std::exp((ln_c_draw - ln_th) / gamma_draw);
    ++accepted;
    const double d = w - mean;
    mean += d / accepted;
    m2 += d * (w - mean);
  }
  out.w_star_std_mhz = n_rep > 1 ? std::sqrt(m2 / (n_rep - 1)) : 0.0;
  out.rejected_fraction =
      static_cast<double>(rejected) / static_cast<double>(rejected + n_rep);
  return out;
}

// ---------------------------------------------------------------------------
// Piecewise-linear diagnostics on (W, <r>) curves

struct RCurvePoint {
  double w_mhz = 0.0;
  double mean_r = 0.0;
};

enum class BoundaryFlag { interior, below_range, above_range };

struct ErgodicBoundary {
  double w_mhz = 0.0;
  BoundaryFlag flag = BoundaryFlag::interior;
};

namespace detail {

inline void require_sorted_curve(const std::vector<RCurvePoint>& curve,
                                 const char* name) {
  if (curve.size() < 2)
    throw std::invalid_argument(std::string(name) + " needs at least 2 points");
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (!(curve[i].w_mhz > curve[i - 1].w_mhz))
      throw std::invalid_argument(std::string(name) +
                                  " must be strictly ascending in W");
}

// Piecewise-linear evaluation; w must lie within the curve's span.
inline double eval_curve(const std::vector<RCurvePoint>& curve, double w) {
  auto it = std::lower_bound(
      curve.begin(), curve.end(), w,
      [](const RCurvePoint& p, double value) { return p.w_mhz < value; });
  if (it != curve.end() && it->w_mhz == w) return it->mean_r;
  const RCurvePoint& hi = *it;
  const RCurvePoint& lo = *(it - 1);
  const double f = (w - lo.w_mhz) / (hi.w_mhz - lo.w_mhz);
  return lo.mean_r + f * (hi.mean_r - lo.mean_r);
}

}  // namespace detail

// Largest disorder strength at which the curve still reaches `threshold_r`,
// linearly interpolated to the crossing with the next point. A curve
// entirely below threshold reports its smallest W flagged below_range; one
// that never drops below reports its largest W flagged above_range.
inline ErgodicBoundary ergodic_boundary(const std::vector<RCurvePoint>& curve,
                                        double threshold_r) {
  detail::require_sorted_curve(curve, "boundary curve");

  std::size_t last_at_or_above = curve.size();
  for (std::size_t i = 0; i < curve.size(); ++i)
    if (curve[i].mean_r >= threshold_r) last_at_or_above = i;

  ErgodicBoundary out;
  if (last_at_or_above == curve.size()) {
    out.w_mhz = curve.front().w_mhz;
    out.flag = BoundaryFlag::below_range;
    return out;
  }
  if (last_at_or_above == curve.size() - 1) {
    out.w_mhz = curve.back().w_mhz;
    out.flag = BoundaryFlag::above_range;
    return out;
  }
  const RCurvePoint& a = curve[last_at_or_above];
  const RCurvePoint& b = curve[last_at_or_above + 1];
  out.w_mhz = a.w_mhz + (threshold_r - a.mean_r) * (b.w_mhz - a.w_mhz) /
                            (b.mean_r - a.mean_r);
  out.flag = BoundaryFlag::interior;
  return out;
}

// Smallest W in the overlap of the two curves where their piecewise-linear
// interpolants cross (difference changes sign or touches zero). Identical
// curves have no crossing. Disjoint spans are an argument error.
inline std::optional<double> curve_crossing(const std::vector<RCurvePoint>& curve_a,
                                            const std::vector<RCurvePoint>& curve_b) {
  detail::require_sorted_curve(curve_a, "curve_a");
  detail::require_sorted_curve(curve_b, "curve_b");

  const double lo = std::max(curve_a.front().w_mhz, curve_b.front().w_mhz);
  const double hi = std::min(curve_a.back().w_mhz, curve_b.back().w_mhz);
  if (!(lo <= hi)) throw std::invalid_argument("curves share no disorder range");

  std::vector<double> knots{lo, hi};
  for (const RCurvePoint& p : curve_a)
    if (p.w_mhz > lo && p.w_mhz < hi) knots.push_back(p.w_mhz);
  for (const RCurvePoint& p : curve_b)
    if (p.w_mhz > lo && p.w_mhz < hi) knots.push_back(p.w_mhz);
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());

  std::vector<double> diff(knots.size());
  bool any_nonzero = false;
  for (std::size_t i = 0; i < knots.size(); ++i) {
    diff[i] = detail::eval_curve(curve_a, knots[i]) -
              detail::eval_curve(curve_b, knots[i]);
    if (diff[i] != 0.0) any_nonzero = true;
  }
  if (!any_nonzero) return std::nullopt;

  for (std::size_t i = 0; i < knots.size(); ++i) {
    if (diff[i] == 0.0) return knots[i];
    if (i + 1 < knots.size() && diff[i] * diff[i + 1] < 0.0)
      return knots[i] +
             diff[i] * (knots[i + 1] - knots[i]) / (diff[i] - diff[i + 1]);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Ensemble averaging of imbalance traces

struct EnsembleImbalance {
  std::vector<double> times_ns;
  std::vector<double> mean;
  std::vector<double> stderr_mean;  // sample std / sqrt(N), zero for N = 1
  int n_traces = 0;
};

inline EnsembleImbalance ensemble_average(const std::vector<ImbalanceTrace>& traces) {
  if (traces.empty()) throw InsufficientDataError("no traces to average");
  const std::vector<double>& grid = traces.front().times_ns;
  for (const ImbalanceTrace& t : traces)
    if (t.times_ns != grid)
      throw std::invalid_argument("traces do not share one time grid");

  const std::size_t nt = grid.size();
  const int n = static_cast<int>(traces.size());
  EnsembleImbalance out;
  out.times_ns = grid;
  out.mean.assign(nt, 0.0);
  out.stderr_mean.assign(nt, 0.0);
  out.n_traces = n;

  for (const ImbalanceTrace& t : traces)
    for (std::size_t k = 0; k < nt; ++k) out.mean[k] += t.imbalance[k];
  for (std::size_t k = 0; k < nt; ++k) out.mean[k] /= n;

  if (n > 1) {
    for (const ImbalanceTrace& t : traces)
      for (std::size_t k = 0; k < nt; ++k) {
        const double d = t.imbalance[k] - out.mean[k];
        out.stderr_mean[k] += d * d;
      }
    for (std::size_t k = 0; k < nt; ++k)
      out.stderr_mean[k] = std::sqrt(out.stderr_mean[k] / (n - 1)) /
                           std::sqrt(static_cast<double>(n));
  }
  return out;
}

inline PowerLawFit fit_power_law(const EnsembleImbalance& ensemble,
                                 double t_lo_ns = default_fit_t_lo_ns,
                                 double t_hi_ns = default_fit_t_hi_ns) {
  return fit_power_law(ensemble.times_ns, ensemble.mean, t_lo_ns, t_hi_ns);
}

}  // namespace mbl
