#pragma once

#include <optional>

#include "gmfc/forward.hpp"

namespace gmfc {

/// Regression basis for conditional expectations of the adjoint pair.
struct basis_spec {
  enum class kind { affine, quadratic, user };
  kind type = kind::affine;
  int user_size = 0;
  std::function<void(const vec& x, vec& out)> user_fn;

  [[nodiscard]] int count(int d) const;
  void eval(const vec& x, vec& out) const;
};

struct adjoint_config {
  basis_spec basis;
  double tol = 1e-8;        ///< sup-label mean-square change of Y between sweeps
  int max_sweeps = 60;
  int mc_count = 0;         ///< coupling subsample size (0 = exact averages)
  bool force_generic_coupling = false;  ///< disable the affine-probe fast path
  const struct adjoint_flow* warm = nullptr;  ///< optional initial (Y, Z) samples
};

/// Regression representation of (Y, Z) along a particle flow.
///
/// Tables are stored per (label, time): regression coefficients on the
/// standardized basis plus the per-particle fitted samples.  Y spans times
/// 0..N_t (terminal values are exact per particle), Z spans 0..N_t-1.
struct adjoint_flow {
  basis_spec basis;
  std::vector<std::vector<mat>> coef_y;   ///< B x d
  std::vector<std::vector<mat>> coef_z;   ///< B x (d*m)
  std::vector<std::vector<vec>> feat_mean, feat_scale;
  std::vector<std::vector<mat>> y;        ///< P x d samples
  std::vector<std::vector<mat>> z;        ///< P x (d*m) samples
  std::vector<std::vector<double>> resid_y;  ///< rms regression residual
  int sweeps = 0;
  std::vector<double> sweep_changes;

  /// Evaluates the regression representation at an arbitrary state.
  void y_at(int label, int t_index, const vec& x, vec& out) const;
  void z_at(int label, int t_index, const vec& x, mat& out) const;
};

struct solver_config {
  sim_config sim;
  adjoint_config adjoint;
  double rho = 0.5;           ///< control blending step in (0,1]
  double tol_control = 1e-4;  ///< L2 control change at which the outer loop stops
  int max_outer = 60;
};

struct residual_pair {
  double sup = 0.0;
  double l2 = 0.0;
};

/// Solution bundle of the coupled forward-backward system.
struct fbsde_solution {
  std::optional<measure_flow> flow;
  std::optional<adjoint_flow> adjoint;
  control_table control;            ///< control the final flow was simulated under
  control_table control_argmin;     ///< pointwise Hamiltonian minimizer on particles
  double cost_value = 0.0;
  double cost_stderr = 0.0;
  residual_pair residual;
  int outer_iterations = 0;
  std::vector<double> control_changes;

  /// Closed-form reference data (populated by lq_oracle).
  struct oracle_data {
    label_grid grid{1};
    int ode_steps = 0;
    double horizon = 0.0;
    // Per label, sampled on the ODE grid (size ode_steps + 1 unless noted):
    std::vector<std::vector<double>> eta;     ///< size 2*ode_steps + 1 (half steps)
    std::vector<std::vector<double>> psi;
    std::vector<std::vector<double>> mean;
    std::vector<std::vector<double>> second;  ///< E X^2
    std::vector<std::vector<double>> mubar;   ///< neighborhood mean
    std::vector<std::vector<double>> gamma1;  ///< feedback gain
    std::vector<std::vector<double>> gamma0;  ///< feedback offset
    double jstar = 0.0;                       ///< continuous-time optimal cost
    double verification_residual = 0.0;

    [[nodiscard]] double eta_at(int label, double t) const;
    [[nodiscard]] int index_at(double t) const;  ///< nearest ODE grid index
  };
  std::optional<oracle_data> oracle;
};

/// Coupling term of the adjoint equation at one probe: quadrature over source
/// labels v of (normalized kernel)(v,u)/M times the particle average of the
/// measure derivative of the label-v Hamiltonian, evaluated at the probe.
/// mc_count = 0 averages over all particles; otherwise subsamples.
[[nodiscard]] vec adjoint_coupling_term(const model& mdl, const normalized_graphon& ng,
                                        const measure_flow& flow,
                                        const adjoint_flow& previous,
                                        const control_table& control, int label,
                                        int t_index, const vec& probe,
                                        const sim_config& cfg, int mc_count = 0);

/// Backward regression sweep solving the adjoint pair along a frozen flow
/// under a fixed control, iterating the label-coupling term to its fixed
/// point.  Throws regression_singular / adjoint_divergence.
[[nodiscard]] adjoint_flow solve_adjoint(const model& mdl, const control_table& control,
                                         const measure_flow& flow,
                                         const normalized_graphon& ng,
                                         const sim_config& sim,
                                         const adjoint_config& cfg);

/// Full iterative solver: forward fixed point, adjoint solve, pointwise
/// Hamiltonian minimization, damped control update, until the control change
/// drops below tol_control.  Throws outer_divergence on failure.
[[nodiscard]] fbsde_solution solve_pontryagin_fbsde(const model& mdl,
                                                    const normalized_graphon& ng,
                                                    const solver_config& cfg);

/// Sup and L2 norms of the control gradient of the Hamiltonian along the
/// solution particles under the given control table.
[[nodiscard]] residual_pair pontryagin_residual(const model& mdl,
                                                const measure_flow& flow,
                                                const adjoint_flow& adjoint,
                                                const control_table& control,
                                                const normalized_graphon& ng,
                                                const sim_config& cfg);

/// Cost derivative in the direction of a control perturbation: quadrature of
/// <dH/da, beta> over labels, particles and time.
[[nodiscard]] double gateaux_derivative(const model& mdl, const measure_flow& flow,
                                        const adjoint_flow& adjoint,
                                        const control_table& control,
                                        const control_table& direction,
                                        const normalized_graphon& ng,
                                        const sim_config& cfg);

struct perturbation_entry {
  int direction = 0;
  double epsilon = 0.0;
  double delta_cost = 0.0;   ///< perturbed minus base cost (negative = improvement)
  double sigma = 0.0;        ///< standard error of the paired difference
};

struct perturbation_report {
  bool pass = false;                     ///< no improvement beyond 3 sigma
  double worst_improvement_sigmas = 0.0; ///< max of (-delta)/sigma over entries
  std::vector<perturbation_entry> entries;
};

/// Re-simulates the model under perturbed controls (shared noise) and checks
/// that no perturbation improves the cost beyond 3 standard errors.
[[nodiscard]] perturbation_report optimality_perturbation_test(
    const model& mdl, const normalized_graphon& ng, const control_table& control,
    const std::vector<control_table>& directions, const std::vector<double>& epsilons,
    const sim_config& cfg);

/// Closed-form benchmark for scalar linear-quadratic models: backward gain
/// ODEs, coupled offset/mean two-point problem, optimal cost, and an
/// independent defect verification on the ODE grid.  Throws riccati_blowup
/// when the gain ODE leaves the stable branch.
[[nodiscard]] fbsde_solution lq_oracle(const model& mdl, const graphon& g,
                                       const label_grid& grid, double horizon,
                                       int ode_steps = 100000);

/// Discrete-time tables induced by an oracle solution on an Euler grid with
/// N_t steps: feedback gains at the grid times, the self-consistent mean and
/// second-moment recursions, and the matched discrete optimal cost.
struct oracle_discrete {
  std::vector<std::vector<double>> gamma1, gamma0;  ///< [label][0..N_t-1]
  std::vector<std::vector<double>> mean, second;    ///< [label][0..N_t]
  double jstar = 0.0;
};
[[nodiscard]] oracle_discrete discretize_oracle(const fbsde_solution::oracle_data& od,
                                                const model& mdl,
                                                const normalized_graphon& ng, int steps);

/// Feedback profile backed by a solver solution's regression tables (argmin
/// of the Hamiltonian at the regression-implied adjoint values).  The
/// returned profile borrows `sol`; keep it alive.
[[nodiscard]] control_profile solution_feedback(const model& mdl,
                                                const fbsde_solution& sol);

}  // namespace gmfc
