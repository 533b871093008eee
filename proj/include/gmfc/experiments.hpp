#pragma once

#include <utility>

#include "gmfc/nagent.hpp"

namespace gmfc {

/// Theoretical mean-square convergence rate of the neighborhood empirical
/// measure for N particles in dimension d with a 2+kappa_moment moment bound:
///   d < 4: N^{-1/2} + N^{-k/(2+k)}
///   d = 4: N^{-1/2} log(1+N) + N^{-k/(2+k)}
///   d > 4: N^{-2/d} + N^{-k/(2+k)}
/// Throws boundary_case for the excluded combinations (d = 4 with 2+k = 4,
/// and d > 4 with 2+k = d/(d-2)).
[[nodiscard]] double q_rate(int n, int d, double kappa_moment);

struct fit_result {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_lo = 0.0;  ///< 95% confidence bounds from residual variance
  double slope_hi = 0.0;
};

/// Ordinary least squares of log(error) on log(N).  Throws non_positive_error
/// unless every error is strictly positive.
[[nodiscard]] fit_result fit_loglog(const std::vector<double>& ns,
                                    const std::vector<double>& errors);

/// Shared knobs of the convergence experiments.
struct experiment_config {
  int steps = 100;          ///< Euler steps of every simulated system
  double horizon = 1.0;
  int repetitions = 32;     ///< outer seeds per grid point
  std::uint64_t seed = 7;
  int oracle_steps = 100000;  ///< ODE resolution behind the limit tables
  int particles = 4000;     ///< ensemble size of the coupled label systems
  int labels = 0;           ///< label cells; 0 derives them from the kernel
  bool antithetic = true;   ///< pair consecutive repetitions antithetically
  /// Comparison variant: transplanted feedback reads the realized empirical
  /// neighborhood instead of the deterministic limit one.  Reported in the
  /// artifacts, never asserted on.
  bool empirical_field_controls = false;
};

/// Measured error curve over a population grid, with the theoretical rate
/// overlay and a fitted log-log slope.
struct rate_report {
  std::string kind;                    ///< "poc" or "costgap"
  std::vector<int> ns;
  std::vector<double> errors;          ///< headline series (see `kind` docs)
  std::vector<double> stderrs;
  std::vector<double> errors_lo, errors_hi;  ///< bootstrap 95% band
  std::vector<double> errors_sq, stderrs_sq; ///< mean-square companion (poc)
  std::vector<double> theoretical_rates;     ///< q_rate overlay
  double fitted_slope = 0.0;
  double fitted_intercept = 0.0;
  double slope_lo = 0.0, slope_hi = 0.0;
  double companion_slope = 0.0;        ///< slope of the companion series
  /// Significance of each consecutive drop: mean over sampling units of the
  /// paired difference errors[j] - errors[j+1], in units of its standard
  /// error.  Pairing is meaningful because every N shares rep seeds.
  std::vector<double> decrease_sigmas;
  double jstar = 0.0;                  ///< limit optimal cost (cost gaps)
  double jstar_discrete = 0.0;         ///< same, on the matched Euler grid
  std::uint64_t seed = 0;
  int repetitions = 0;
  std::string config_json;             ///< reproducibility snapshot

  [[nodiscard]] std::string to_json() const;
  void write_csv(const std::string& path) const;
};

/// Propagation-of-chaos experiment: for every N, couples the finite system
/// under transplanted limit controls to per-agent limit twins (shared
/// Brownian streams and initials) and measures the mean-square sup-distance.
/// The headline error is its square root per repetition, averaged; the raw
/// mean-square series rides along in errors_sq.  Requires a linear-quadratic
/// model (the limit system comes from the closed-form benchmark).
[[nodiscard]] rate_report poc_experiment(const model& mdl, const graphon& g,
                                         const std::vector<int>& n_list,
                                         int repetitions,
                                         const experiment_config& cfg);

/// Cost-convergence experiment on the same coupled runs: per repetition the
/// difference between the finite-population realized cost and the twins'
/// realized cost (an unbiased estimate of the discrete limit optimum), with
/// |mean difference| per N as the headline error.
[[nodiscard]] rate_report cost_gap_experiment(const model& mdl, const graphon& g,
                                              const std::vector<int>& n_list,
                                              int repetitions,
                                              const experiment_config& cfg);

/// Solution distance along the homotopy (1-s) g + s g_prime under shared
/// seeds, against the l1 kernel distance.
struct stability_report {
  std::vector<double> s_values;
  std::vector<double> l1_distances;   ///< ||G_s - G||_1, exactly s * ||G'-G||_1
  std::vector<double> distances;      ///< sup-square state+adjoint distance
  std::vector<double> stderrs;
  double envelope_constant = 0.0;     ///< smallest affine-through-origin slope
  bool envelope_ok = false;           ///< distances under the envelope within 2 sigma
  bool bracket_ok = false;            ///< endpoints bracket interior points within 2 sigma
  bool monotone_ok = false;           ///< nondecreasing in s within 2 sigma
  std::string config_json;

  [[nodiscard]] std::string to_json() const;
  void write_csv(const std::string& path) const;
};

[[nodiscard]] stability_report stability_experiment(const model& mdl, const graphon& g,
                                                    const graphon& g_prime,
                                                    const experiment_config& cfg);

/// Coupled distance between the limit systems of two labels under one shared
/// Brownian stream and shared initial uniforms.
struct continuity_pair {
  double u1 = 0.0, u2 = 0.0;
  double label_gap = 0.0;        ///< |u1 - u2|
  double distance = 0.0;         ///< sup-square state+adjoint distance
  double stderr_value = 0.0;
  double bound_rhs = 0.0;        ///< E|initial gap|^2 + row l1 kernel distance
};

struct continuity_report {
  std::vector<continuity_pair> pairs;   ///< sorted as supplied
  double zero_pair_distance = 0.0;      ///< identical-label control run
  bool monotone_ok = false;             ///< decreasing in label gap beyond 2 sigma
  std::string config_json;

  [[nodiscard]] std::string to_json() const;
  void write_csv(const std::string& path) const;
};

[[nodiscard]] continuity_report continuity_experiment(
    const model& mdl, const graphon& g,
    const std::vector<std::pair<double, double>>& label_pairs,
    const experiment_config& cfg);

/// True when the series never rises between consecutive points by more than
/// `sigmas` times their combined standard error, i.e. the data are consistent
/// with a non-increasing sequence up to noise at that level.
[[nodiscard]] bool decreasing_beyond(const std::vector<double>& values,
                                     const std::vector<double>& stderrs,
                                     double sigmas);

}  // namespace gmfc
