#pragma once

#include <memory>

#include "gmfc/model.hpp"

namespace gmfc {

/// Per-particle open-loop controls: one P x k matrix (or 1 x k broadcast) per
/// (label, time step).
struct control_table {
  std::vector<std::vector<mat>> a;  ///< [label][step]

  [[nodiscard]] const mat& at(int label, int step) const {
    return a[static_cast<std::size_t>(label)][static_cast<std::size_t>(step)];
  }
  /// Control row for particle p (broadcast tables ignore p).
  [[nodiscard]] vec row(int label, int step, int p) const {
    const mat& m = at(label, step);
    return m.row(m.rows() == 1 ? 0 : p).transpose();
  }
};

/// Control as either a feedback map evaluated along simulated states or an
/// open-loop per-particle table.
struct control_profile {
  enum class kind { feedback, open_loop };
  kind type = kind::feedback;

  /// feedback(u, label index, step, t, state, neighborhood view) -> control.
  std::function<void(double u, int u_index, int step, double t, const vec& x,
                     const mu_view& mu, vec& out)>
      feedback;
  std::shared_ptr<const control_table> table;

  static control_profile zero(int k_dim);
  static control_profile from_table(control_table t);
  static control_profile from_feedback(
      std::function<void(double, int, int, double, const vec&, const mu_view&, vec&)>
          fn);
};

/// Discretization, sampling and fixed-point parameters.
struct sim_config {
  int labels = 16;          ///< quadrature cells M
  int particles = 2000;     ///< particles per label P
  int steps = 100;          ///< Euler time steps N_t
  double horizon = 1.0;     ///< terminal time T
  std::uint64_t seed = 1;   ///< master seed
  double damping = 1.0;     ///< flow update damping theta in (0,1]
  double picard_tol = 1e-3; ///< sup-label terminal distance tolerance
  int picard_max = 50;

  [[nodiscard]] double dt() const { return horizon / steps; }
  [[nodiscard]] std::vector<double> times() const;
};

struct picard_info {
  int iterations = 0;
  std::vector<double> residuals;        ///< sup-label terminal W2 per sweep
  double sup_second_moment = 0.0;       ///< max over labels/times
  double moment_ceiling = 0.0;          ///< Gronwall-type sanity ceiling
  bool moment_ceiling_ok = true;        ///< violation is logged, not fatal
};

struct cost_estimate {
  double value = 0.0;
  double stderr_value = 0.0;  ///< label-stratified Monte Carlo standard error
};

/// Draws the initial particle matrix (P x d) for one label; pure in
/// (seed, label index, particle), hence identical across Picard sweeps,
/// control updates and solver iterations.
[[nodiscard]] mat initial_particles(const model& mdl, double u, int u_index,
                                    const sim_config& cfg);

/// Brownian increment for (label, particle, step, component): pure function
/// of the seed, so paths are reproducible without storing increments.
[[nodiscard]] double brownian_increment(std::uint64_t seed, int u_index, int particle,
                                        int step, int comp, double dt);

/// Euler-Maruyama paths of one label against a frozen measure flow.
/// Returns N_t + 1 clouds in particle order.  Throws non_finite_state with
/// (label, particle, step) context if the state leaves the finite range.
[[nodiscard]] std::vector<particle_cloud> simulate_label(
    const model& mdl, const control_profile& control, const measure_flow& frozen,
    const normalized_graphon& ng, int label, const sim_config& cfg);

/// Mean-field fixed point: iterates label simulations against the previous
/// flow until the sup-label terminal distance drops below picard_tol.
/// The damping factor blends new clouds toward the previous flow by
/// moment-matched shrinkage (theta = 1 keeps the plain iteration).
[[nodiscard]] std::pair<measure_flow, picard_info> picard_fixed_point(
    const model& mdl, const control_profile& control, const normalized_graphon& ng,
    const sim_config& cfg);

/// Left-Riemann cost of realized paths plus terminal cost, averaged over
/// particles and labels, with a label-stratified standard error.
[[nodiscard]] cost_estimate cost(const model& mdl, const control_profile& control,
                                 const measure_flow& flow, const normalized_graphon& ng,
                                 const sim_config& cfg);

/// Per-particle pathwise costs (running plus terminal) for each label; uses
/// the same evaluation rules as cost() and backs paired comparisons under
/// shared noise.
[[nodiscard]] std::vector<vec> cost_samples(const model& mdl,
                                            const control_profile& control,
                                            const measure_flow& flow,
                                            const normalized_graphon& ng,
                                            const sim_config& cfg);

}  // namespace gmfc
