#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gmfc/measure.hpp"

namespace gmfc {

using vec = Eigen::VectorXd;
using mat = Eigen::MatrixXd;

/// Problem dimensions: state d, noise m, control k.
struct dims {
  int d = 1;
  int m = 1;
  int k = 1;
};

/// Label- and time-indexed coefficient evaluators.
///
/// Evaluators write into caller-provided outputs so the simulation loops stay
/// allocation-free.  Derivative layout conventions:
///  - b_x(i,j)    = d b_i / d x_j                (d x d)
///  - b_a(i,j)    = d b_i / d a_j                (d x k)
///  - sigma_x_contract_j = sum_il (d sigma_il / d x_j) z_il   (length d)
///  - mu_b(i,j)   = j-th probe coordinate of the measure derivative of b_i
///  - mu_*_... evaluate the measure derivative at an explicit probe point.
struct coefficient_set {
  dims dim;

  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     vec& out)>
      b;
  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     mat& out)>
      sigma;
  std::function<double(double u, double t, const vec& x, const mu_view& mu,
                       const vec& a)>
      f;
  std::function<double(double u, const vec& x, const mu_view& mu)> g;

  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     mat& out)>
      b_x, b_a;
  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     const mat& z, vec& out)>
      sigma_x_contract, sigma_a_contract;
  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     vec& out)>
      f_x, f_a;
  std::function<void(double u, const vec& x, const mu_view& mu, vec& out)> g_x;

  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     const vec& xp, mat& out)>
      mu_b;
  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     const vec& xp, const mat& z, vec& out)>
      mu_sigma_contract;
  std::function<void(double u, double t, const vec& x, const mu_view& mu, const vec& a,
                     const vec& xp, vec& out)>
      mu_f;
  std::function<void(double u, const vec& x, const mu_view& mu, const vec& xp, vec& out)>
      mu_g;

  /// False when all measure derivatives vanish identically (decoupled model).
  bool has_mu_terms = false;
  /// True when every measure derivative is affine in the probe point; enables
  /// exact coupling averages at O(P) instead of O(P^2) per label pair.
  bool mu_probe_affine = true;
  /// True when the measure derivatives do not depend on the probe point at
  /// all (mean-functional interactions); halves the coupling probe work.
  bool mu_probe_const = false;
};

/// Declared regularity metadata backing the validation checks.
struct validation_decl {
  double lipschitz_x = 0.0;   ///< declared Lipschitz constant in the state
  double lipschitz_mu = 0.0;  ///< ... in the measure (2-Wasserstein)
  double lipschitz_a = 0.0;   ///< ... in the control
  double probe_lo = -2.0;     ///< per-coordinate probe box for spot checks
  double probe_hi = 2.0;
  double convexity_lambda = 0.0;  ///< declared strong convexity of f in the control
  bool cost_convex = false;       ///< declared joint convexity of f and g
};

/// Label-indexed initial distribution, represented by its quantile transform
/// so coupled and antithetic sampling stay exact.
struct initial_law {
  int d = 1;
  /// Maps d iid uniforms in (0,1) to a sample of the label-u initial law.
  std::function<void(double u, const double* uniforms, vec& out)> quantile;
  /// Optional exact moments (coordinate-wise E xi and E xi^2); closed-form
  /// benchmarks fall back to quantile quadrature when absent.
  std::function<void(double u, vec& out)> mean, second_moment;
  double moment_bound = 0.0;  ///< declared bound on sup_u E|xi^u|^{2+epsilon}
  double epsilon = 1.0;       ///< moment margin above 2
};

/// Draws one initial sample for (label, member) under the given seed;
/// antithetic reflects the underlying uniforms.
void sample_initial(const initial_law& law, double u_label, std::uint64_t seed,
                    std::uint64_t unit, std::uint64_t member, bool antithetic, vec& out);

/// Matrix coefficient with optional label blocks and piecewise-constant time
/// dependence; constant() covers the common case.
class lq_coef {
 public:
  lq_coef() = default;
  static lq_coef constant(mat v);
  static lq_coef scalar(double v) { return constant(mat::Constant(1, 1, v)); }

  /// Piecewise-constant in time on [edges[i], edges[i+1]); edges[0] must be 0.
  static lq_coef time_table(std::vector<double> edges, std::vector<mat> values);

  /// Label blocks [edges[i], edges[i+1]) each holding its own coefficient.
  static lq_coef label_blocks(std::vector<double> edges, std::vector<lq_coef> blocks);

  [[nodiscard]] const mat& at(double u, double t) const;
  [[nodiscard]] bool time_dependent() const;
  [[nodiscard]] bool label_dependent() const { return blocks_.size() > 1; }

 private:
  struct block {
    std::vector<double> time_edges;  // first entry 0
    std::vector<mat> values;
  };
  std::vector<double> label_edges_;  // size blocks+1, 0 ... 1
  std::vector<block> blocks_;
};

/// Linear-quadratic model family:
///   drift       b = b0 + b1 x + b2 mubar + b3 a
///   volatility  column l: s0_l + s1_l x + s2_l mubar + s3_l a
///   running     f = 1/2 x'Qx + 1/2 (x - S mubar)' Qbar (x - S mubar) + lambda |a|^2
///   terminal    g = 1/2 x'QT x + 1/2 (x - ST mubar)' QbarT (x - ST mubar)
struct lq_spec {
  dims dim;
  lq_coef b0, b1, b2, b3;  // d, d x d, d x d, d x k
  struct vol_column {
    lq_coef s0, s1, s2, s3;  // d, d x d, d x d, d x k
  };
  std::vector<vol_column> vol;  // one entry per noise column (size m)
  lq_coef q, qbar, s;           // d x d, d x d, d x d
  lq_coef lambda;               // 1 x 1, must be positive
  mat q_t, qbar_t, s_t;         // terminal weights

  void check_shapes() const;  ///< throws shape_mismatch / config_error
};

/// Full problem description consumed by solvers and experiments.
struct model {
  std::string name;
  dims dim;
  coefficient_set coef;
  std::optional<lq_spec> lq;
  initial_law init;
  validation_decl decl;
};

/// Builds the generic evaluator set from an LQ specification (keeping the
/// structured form available for closed-form paths).
[[nodiscard]] model lq_to_model(std::string name, const lq_spec& spec, initial_law init,
                                validation_decl decl);

/// Parses the LQ JSON schema (keys b0..b3, s0..s3, q, qbar, s, lambda, qT,
/// qbarT, sT, dims) plus an "initial" block into a model.
[[nodiscard]] model lq_model_from_json(const std::string& text);

// --- Hamiltonian calculus -------------------------------------------------

/// H = b . y + <sigma, z>_F + f.  Throws shape_mismatch on bad input sizes.
[[nodiscard]] double hamiltonian(const coefficient_set& cs, double u, double t,
                                 const vec& x, const mu_view& mu, const vec& y,
                                 const mat& z, const vec& a);

/// d/dx of the Hamiltonian: b_x' y + sigma_x : z + f_x.
void grad_hamiltonian_x(const coefficient_set& cs, double u, double t, const vec& x,
                        const mu_view& mu, const vec& y, const mat& z, const vec& a,
                        vec& out);

/// d/da of the Hamiltonian: b_a' y + sigma_a : z + f_a.
void grad_hamiltonian_alpha(const coefficient_set& cs, double u, double t, const vec& x,
                            const mu_view& mu, const vec& y, const mat& z, const vec& a,
                            vec& out);

/// Measure derivative of the Hamiltonian evaluated at a probe point.
void measure_derivative_hamiltonian(const coefficient_set& cs, double u, double t,
                                    const vec& x, const mu_view& mu, const vec& y,
                                    const mat& z, const vec& a, const vec& xp, vec& out);

struct argmin_options {
  bool force_newton = false;  ///< bypass the LQ closed form (testing hook)
  double tol = 1e-10;         ///< gradient norm target
  int max_iter = 200;
};

/// Minimizer of a -> H(u,t,x,mu,y,z,a).  LQ models use the closed form
/// -(b3' y + s3 : z) / (2 lambda); otherwise damped Newton from zero.
/// Throws non_convergence / non_convex_detected.
[[nodiscard]] vec argmin_hamiltonian(const model& mdl, double u, double t, const vec& x,
                                     const mu_view& mu, const vec& y, const mat& z,
                                     const argmin_options& opts = {});

// --- validation -----------------------------------------------------------

struct validation_item {
  std::string assumption;  ///< stable rule identifier, e.g. "Assumption 5.2(3)"
  std::string check;       ///< short description of what was probed
  bool pass = false;
  std::string detail;      ///< measured quantities on failure or success
};

struct validation_report {
  std::vector<validation_item> items;
  [[nodiscard]] bool all_pass() const;
  [[nodiscard]] std::string to_json() const;
};

/// Spot-checks the model and kernel against the standing regularity rules.
/// Never throws on a failed check; failures are reported items.
[[nodiscard]] validation_report validate_model(const model& mdl, const graphon& g,
                                               const label_grid& grid,
                                               std::uint64_t seed = 20240801);

/// Relative finite-difference consistency of the declared first derivatives
/// at `count` random probes; returns the worst relative error observed.
[[nodiscard]] double derivative_consistency(const model& mdl, std::uint64_t seed,
                                            int count, double step = 1e-5);

}  // namespace gmfc
