#pragma once

#include <optional>

#include "gmfc/adjoint.hpp"

namespace gmfc {

/// Finite-population interaction weights together with their row
/// normalization kappa(i,j) = zeta(i,j) / sum_j zeta(i,j).
struct interaction_matrix {
  int n = 0;
  mat zeta;   ///< n x n symmetric nonnegative weights
  mat kappa;  ///< row-stochastic; every row sums to one within 1e-12

  /// Validates and row-normalizes a weight matrix.  Throws negative_entry or
  /// asymmetric_matrix on malformed input and zero_row for isolated agents.
  [[nodiscard]] static interaction_matrix from_weights(mat zeta);

  /// Midpoint label of agent i: (i + 1/2) / n.
  [[nodiscard]] double label(int i) const { return (static_cast<double>(i) + 0.5) / n; }

  /// Step kernel whose (i,j) cell equals zeta(i,j).
  [[nodiscard]] graphon induced_step_graphon() const;
};

enum class sampling_mode { deterministic, bernoulli };

/// Interaction weights read off a kernel at the agent labels u_i = (i+1/2)/n:
/// deterministic zeta_ij = g(u_i,u_j), or symmetric Bernoulli(g(u_i,u_j))
/// coin flips with a deterministic diagonal (requires g bounded by one).
[[nodiscard]] interaction_matrix sample_interaction_matrix(const graphon& g, int n,
                                                           sampling_mode mode,
                                                           std::uint64_t seed = 0);

/// Control rule for the finite system: writes the control of agent i at time
/// t given its own state and its kappa-weighted empirical neighborhood.
struct agent_controls {
  int n = 0;  ///< expected agent count (0 accepts any population size)
  std::function<void(int i, int step, double t, const vec& x,
                     const particle_cloud& neighborhood, vec& out)>
      eval;
};

/// One realization of the finite system on a uniform time grid.
struct agent_paths {
  int n = 0;
  int steps = 0;
  double horizon = 0.0;
  std::vector<mat> states;    ///< steps+1 entries, n x d
  std::vector<mat> controls;  ///< steps entries, n x k
  std::vector<mat> noise;     ///< steps entries, n x m Brownian increments

  [[nodiscard]] double dt() const { return horizon / steps; }
  [[nodiscard]] const mat& initials() const { return states.front(); }
};

/// Time grid, seeding and stream assignment of one finite-system run.
struct nagent_config {
  int steps = 100;
  double horizon = 1.0;
  std::uint64_t seed = 1;
  bool antithetic = false;  ///< reflect initial uniforms, negate increments
  /// Stream key of agent i; empty defaults to (unit = i, member = 0).
  /// Coupled experiments point agent i at the stream of its limit twin so
  /// both systems consume identical draws.
  std::vector<std::uint64_t> units, members;
};

/// Euler-Maruyama simulation of the interacting system.  Every agent sees the
/// kappa-weighted empirical measure of the current state snapshot, and all
/// agents advance from that same snapshot.  Initials are drawn from the
/// model's initial law at the agent labels unless an explicit n x d matrix is
/// supplied.  Throws non_finite_state with agent/step context on blow-up.
[[nodiscard]] agent_paths simulate_nagent(const model& mdl, const interaction_matrix& im,
                                          const agent_controls& controls,
                                          const std::optional<mat>& initials,
                                          const nagent_config& cfg);

/// Realized cost of every agent along one run: left-Riemann running cost plus
/// terminal cost, both evaluated against the empirical neighborhood.
[[nodiscard]] vec cost_nagent_samples(const model& mdl, const agent_paths& paths,
                                      const interaction_matrix& im);

/// Population-average realized cost of one run.
[[nodiscard]] double cost_nagent(const model& mdl, const agent_paths& paths,
                                 const interaction_matrix& im);

/// Transplants a mean-field solution onto the finite system: agent i receives
/// the feedback map of the grid cell holding its label, evaluated along the
/// agent's own state with the deterministic limit neighborhood of that cell.
/// With use_empirical_field the feedback reads the realized empirical
/// neighborhood instead (comparison variant).  The returned rule borrows
/// `sol`; keep it alive.  Throws label_mismatch when the solution was
/// resolved on a grid other than `ng.grid`.
[[nodiscard]] agent_controls decentralized_controls_from_gmfc(
    const model& mdl, const fbsde_solution& sol, const interaction_matrix& im,
    const normalized_graphon& ng, bool use_empirical_field = false);

/// Dense interaction weights from CSV (one comma-separated row per line) or
/// from the JSON schema {"zeta": [[..]]}.
[[nodiscard]] interaction_matrix interaction_matrix_from_csv(const std::string& path);
[[nodiscard]] interaction_matrix interaction_matrix_from_json(const std::string& text);
[[nodiscard]] std::string interaction_matrix_to_json(const interaction_matrix& im);

/// Writes one realization as a flat CSV with rows (step, t, agent, x...,
/// alpha..., dw...); terminal rows carry the state only.
void save_agent_paths_csv(const agent_paths& paths, const std::string& path);

}  // namespace gmfc
