#include "doctest.h"

#include <cmath>

#include "gmfc/adjoint.hpp"
#include "gmfc/builtin_models.hpp"
#include "gmfc/errors.hpp"
#include "gmfc/rng.hpp"

using namespace gmfc;

namespace {

initial_law gaussian_law(double mean, double sd) {
  initial_law law;
  law.d = 1;
  law.quantile = [mean, sd](double, const double* uniforms, vec& out) {
    out[0] = mean + sd * rng::normal_quantile(uniforms[0]);
  };
  law.mean = [mean](double, vec& out) { out[0] = mean; };
  law.second_moment = [mean, sd](double, vec& out) {
    out[0] = mean * mean + sd * sd;
  };
  law.epsilon = 2.0;
  law.moment_bound = 3.0 * std::pow(std::abs(mean) + 3.0 * sd + 1.0, 4.0);
  return law;
}

/// Decoupled scalar model with costless dynamics: the adjoint must vanish.
model zero_cost_model() {
  lq_spec sp;
  sp.dim = {1, 1, 1};
  sp.b0 = lq_coef::scalar(0.0);
  sp.b1 = lq_coef::scalar(-0.5);
  sp.b2 = lq_coef::scalar(0.0);
  sp.b3 = lq_coef::scalar(1.0);
  lq_spec::vol_column col;
  col.s0 = lq_coef::scalar(0.4);
  col.s1 = lq_coef::scalar(0.0);
  col.s2 = lq_coef::scalar(0.0);
  col.s3 = lq_coef::scalar(0.0);
  sp.vol = {col};
  sp.q = lq_coef::scalar(0.0);
  sp.qbar = lq_coef::scalar(0.0);
  sp.s = lq_coef::scalar(0.0);
  sp.lambda = lq_coef::scalar(0.5);
  sp.q_t = mat::Zero(1, 1);
  sp.qbar_t = mat::Zero(1, 1);
  sp.s_t = mat::Zero(1, 1);
  validation_decl decl;
  decl.lipschitz_x = 2.0;
  decl.lipschitz_mu = 1.0;
  decl.lipschitz_a = 2.0;
  decl.convexity_lambda = 0.5;
  decl.cost_convex = true;
  return lq_to_model("zero-cost", sp, gaussian_law(1.0, 0.5), decl);
}

/// Control-driven dynamics with a linear terminal cost g = 0.7 x: the adjoint
/// is the constant 0.7 at every time and particle.
model linear_terminal_model() {
  model mdl;
  mdl.name = "linear-terminal";
  mdl.dim = {1, 1, 1};
  coefficient_set cs;
  cs.dim = mdl.dim;
  cs.b = [](double, double, const vec&, const mu_view&, const vec& a, vec& out) {
    out = a;
  };
  cs.sigma = [](double, double, const vec&, const mu_view&, const vec&, mat& out) {
    out = mat::Constant(1, 1, 0.4);
  };
  cs.f = [](double, double, const vec&, const mu_view&, const vec& a) {
    return 0.5 * a[0] * a[0];
  };
  cs.g = [](double, const vec& x, const mu_view&) { return 0.7 * x[0]; };
  cs.b_x = [](double, double, const vec&, const mu_view&, const vec&, mat& out) {
    out = mat::Zero(1, 1);
  };
  cs.b_a = [](double, double, const vec&, const mu_view&, const vec&, mat& out) {
    out = mat::Ones(1, 1);
  };
  cs.sigma_x_contract = [](double, double, const vec&, const mu_view&, const vec&,
                           const mat&, vec& out) { out = vec::Zero(1); };
  cs.sigma_a_contract = [](double, double, const vec&, const mu_view&, const vec&,
                           const mat&, vec& out) { out = vec::Zero(1); };
  cs.f_x = [](double, double, const vec&, const mu_view&, const vec&, vec& out) {
    out = vec::Zero(1);
  };
  cs.f_a = [](double, double, const vec&, const mu_view&, const vec& a, vec& out) {
    out = a;
  };
  cs.g_x = [](double, const vec&, const mu_view&, vec& out) {
    out = vec::Constant(1, 0.7);
  };
  cs.has_mu_terms = false;
  mdl.coef = std::move(cs);
  mdl.init = gaussian_law(0.0, 1.0);
  return mdl;
}

/// Two-community model whose measure derivatives are label-dependent
/// constants; makes the coupling quadrature a two-term hand computation.
model tagged_coupling_model() {
  model mdl = linear_terminal_model();
  mdl.name = "tagged-coupling";
  coefficient_set& cs = mdl.coef;
  cs.mu_b = [](double, double, const vec&, const mu_view&, const vec&, const vec&,
               mat& out) { out = mat::Zero(1, 1); };
  cs.mu_sigma_contract = [](double, double, const vec&, const mu_view&, const vec&,
                            const vec&, const mat&, vec& out) { out = vec::Zero(1); };
  cs.mu_f = [](double u, double, const vec&, const mu_view&, const vec&, const vec&,
               vec& out) { out = vec::Constant(1, u > 0.5 ? 2.0 : 0.0); };
  cs.mu_g = [](double u, const vec&, const mu_view&, const vec&, vec& out) {
    out = vec::Constant(1, u > 0.5 ? -1.0 : 3.0);
  };
  cs.has_mu_terms = true;
  cs.mu_probe_affine = true;
  cs.mu_probe_const = true;
  return mdl;
}

control_table zero_table(int labels, int steps, int k_dim) {
  control_table t;
  t.a.resize(static_cast<std::size_t>(labels));
  for (int u = 0; u < labels; ++u) {
    for (int s = 0; s < steps; ++s) {
      t.a[static_cast<std::size_t>(u)].push_back(mat::Zero(1, k_dim));
    }
  }
  return t;
}

}  // namespace

TEST_CASE("basis sizes follow the documented formulas") {
  basis_spec affine;
  CHECK(affine.count(1) == 2);
  CHECK(affine.count(3) == 4);

  basis_spec quad;
  quad.type = basis_spec::kind::quadratic;
  CHECK(quad.count(1) == 3);
  CHECK(quad.count(2) == 6);
  CHECK(quad.count(3) == 10);

  vec x(2), out(6);
  x << 2.0, 3.0;
  quad.eval(x, out);
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 2.0);
  CHECK(out[2] == 3.0);
  CHECK(out[3] == 4.0);   // x0 x0
  CHECK(out[4] == 6.0);   // x0 x1
  CHECK(out[5] == 9.0);   // x1 x1

  basis_spec user;
  user.type = basis_spec::kind::user;
  user.user_size = 2;
  user.user_fn = [](const vec& p, vec& o) {
    o[0] = 1.0;
    o[1] = std::sin(p[0]);
  };
  CHECK(user.count(5) == 2);
  vec uo(2);
  user.eval(x, uo);
  CHECK(uo[1] == doctest::Approx(std::sin(2.0)).epsilon(1e-14));

  basis_spec broken;
  broken.type = basis_spec::kind::user;
  CHECK_THROWS_AS(broken.eval(x, uo), config_error);
}

TEST_CASE("costless dynamics produce an identically zero adjoint") {
  const model mdl = zero_cost_model();
  sim_config cfg;
  cfg.labels = 1;
  cfg.particles = 200;
  cfg.steps = 20;
  cfg.seed = 3;
  const normalized_graphon ng =
      normalize(graphon::step_from_matrix(mat::Constant(1, 1, 1.0)), label_grid(1));
  const auto [flow, info] = picard_fixed_point(mdl, control_profile::zero(1), ng, cfg);
  CHECK(info.iterations >= 1);

  const adjoint_flow af =
      solve_adjoint(mdl, zero_table(1, cfg.steps, 1), flow, ng, cfg, adjoint_config{});
  for (int t = 0; t <= cfg.steps; ++t) {
    CHECK(af.y[0][static_cast<std::size_t>(t)].cwiseAbs().maxCoeff() <= 1e-12);
  }
  for (int t = 0; t < cfg.steps; ++t) {
    CHECK(af.z[0][static_cast<std::size_t>(t)].cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("a linear terminal cost pins the adjoint at its slope") {
  const model mdl = linear_terminal_model();
  sim_config cfg;
  cfg.labels = 1;
  cfg.particles = 400;
  cfg.steps = 25;
  cfg.seed = 9;
  const normalized_graphon ng =
      normalize(graphon::step_from_matrix(mat::Constant(1, 1, 1.0)), label_grid(1));
  const auto [flow, info] = picard_fixed_point(mdl, control_profile::zero(1), ng, cfg);
  CHECK(info.iterations >= 1);

  const adjoint_flow af =
      solve_adjoint(mdl, zero_table(1, cfg.steps, 1), flow, ng, cfg, adjoint_config{});
  // dY = -dH/dx dt + Z dW with dH/dx = 0, so Y_t = E[Y_T | X_t] = 0.7; the
  // backward regression reproduces a constant exactly at every sweep.
  for (int t = 0; t <= cfg.steps; ++t) {
    const mat& y = af.y[0][static_cast<std::size_t>(t)];
    CHECK((y.array() - 0.7).abs().maxCoeff() <= 1e-8);
  }
  // The regression representation extrapolates the constant everywhere.
  vec probe(1), out(1);
  probe(0) = 4.5;
  af.y_at(0, 10, probe, out);
  CHECK(out(0) == doctest::Approx(0.7).epsilon(1e-6));
}

TEST_CASE("coupling term reduces to kernel-weighted label averages") {
  const model mdl = tagged_coupling_model();
  mat zeta(2, 2);
  zeta << 1.0, 3.0, 3.0, 1.0;
  const normalized_graphon ng = normalize(graphon::step_from_matrix(zeta), label_grid(2));

  sim_config cfg;
  cfg.labels = 2;
  cfg.particles = 4;
  cfg.steps = 2;
  cfg.horizon = 1.0;

  measure_flow flow{label_grid(2), {0.0, 0.5, 1.0}, {}};
  flow.clouds.resize(2);
  for (int u = 0; u < 2; ++u) {
    mat pts(4, 1);
    pts << 0.1, 0.2, 0.3, 0.4;
    for (int t = 0; t < 3; ++t) {
      flow.clouds[static_cast<std::size_t>(u)].push_back(particle_cloud::uniform(pts));
    }
  }

  adjoint_flow previous;
  previous.y.assign(2, std::vector<mat>(3, mat::Zero(4, 1)));
  previous.z.assign(2, std::vector<mat>(2, mat::Zero(4, 1)));
  const control_table control = zero_table(2, 2, 1);

  // Interior times integrate the running-cost derivative: the kernel rows
  // weight source labels by [1/4, 3/4] seen from label 0 and [3/4, 1/4] seen
  // from label 1, and the integrands are the constants 0 and 2.
  vec probe(1);
  probe(0) = 0.25;
  const vec c0 = adjoint_coupling_term(mdl, ng, flow, previous, control, 0, 1, probe, cfg);
  CHECK(c0(0) == doctest::Approx(0.25 * 0.0 + 0.75 * 2.0).epsilon(1e-12));
  const vec c1 = adjoint_coupling_term(mdl, ng, flow, previous, control, 1, 1, probe, cfg);
  CHECK(c1(0) == doctest::Approx(0.75 * 0.0 + 0.25 * 2.0).epsilon(1e-12));

  // The terminal slot integrates the terminal-cost derivative instead.
  const vec t0 = adjoint_coupling_term(mdl, ng, flow, previous, control, 0, 2, probe, cfg);
  CHECK(t0(0) == doctest::Approx(0.25 * 3.0 + 0.75 * -1.0).epsilon(1e-12));
  const vec t1 = adjoint_coupling_term(mdl, ng, flow, previous, control, 1, 2, probe, cfg);
  CHECK(t1(0) == doctest::Approx(0.75 * 3.0 + 0.25 * -1.0).epsilon(1e-12));

  CHECK_THROWS_AS((void)adjoint_coupling_term(mdl, ng, flow, previous, control, 0, 7,
                                              probe, cfg),
                  config_error);
}

TEST_CASE("affine-probe fast path agrees with the generic coupling loop") {
  const builtin bi = make_builtin("lq-2block");
  sim_config cfg;
  cfg.labels = 2;
  cfg.particles = 300;
  cfg.steps = 10;
  cfg.seed = 21;
  const normalized_graphon ng = normalize(bi.g, label_grid(2));
  const auto [flow, info] = picard_fixed_point(bi.mdl, control_profile::zero(1), ng, cfg);
  CHECK(info.iterations >= 1);
  const control_table control = zero_table(2, cfg.steps, 1);

  adjoint_config fast;
  const adjoint_flow af = solve_adjoint(bi.mdl, control, flow, ng, cfg, fast);
  adjoint_config slow;
  slow.force_generic_coupling = true;
  const adjoint_flow ag = solve_adjoint(bi.mdl, control, flow, ng, cfg, slow);

  for (int u = 0; u < 2; ++u) {
    for (int t = 0; t <= cfg.steps; ++t) {
      const double dy = (af.y[static_cast<std::size_t>(u)][static_cast<std::size_t>(t)] -
                         ag.y[static_cast<std::size_t>(u)][static_cast<std::size_t>(t)])
                            .cwiseAbs()
                            .maxCoeff();
      CHECK(dy <= 1e-10);
    }
    for (int t = 0; t < cfg.steps; ++t) {
      const double dz = (af.z[static_cast<std::size_t>(u)][static_cast<std::size_t>(t)] -
                         ag.z[static_cast<std::size_t>(u)][static_cast<std::size_t>(t)])
                            .cwiseAbs()
                            .maxCoeff();
      CHECK(dz <= 1e-10);
    }
  }
}

TEST_CASE("closed-form benchmark: frozen values from an independent solve") {
  // Reference values for the scalar crowd-aversion problem on the flat
  // kernel, T = 1: the gain ODE eta' = eta + eta^2 - 1 with eta(1) = 1.5 and
  // the coupled offset/mean two-point system, integrated separately with
  // fourth-order Runge-Kutta at 1e5 steps and iterated to a 1e-14 fixed
  // point.  The optimal cost follows from the induced moment ODEs.
  const builtin bi = make_builtin("lq-scalar");
  const fbsde_solution sol = lq_oracle(bi.mdl, bi.g, label_grid(1), 1.0);
  REQUIRE(sol.oracle.has_value());
  const auto& od = *sol.oracle;

  CHECK(od.eta[0].front() == doctest::Approx(0.687740914211).epsilon(1e-9));
  CHECK(od.eta[0].back() == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(od.psi[0].front() == doctest::Approx(0.016027142483).epsilon(1e-7));
  CHECK(od.mean[0].front() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(od.mean[0].back() == doctest::Approx(0.400239935192).epsilon(1e-7));
  CHECK(od.second[0].front() == doctest::Approx(1.25).epsilon(1e-12));
  CHECK(od.jstar == doctest::Approx(0.5114372311516668).epsilon(1e-9));
  CHECK(od.verification_residual <= 1e-6);

  // Feedback tables are tied to the gain and offset: alpha = gamma1 x +
  // gamma0 with gamma1 = -eta b3/(2 lambda) = -eta and gamma0 = -psi.
  CHECK(od.gamma1[0].front() == doctest::Approx(-od.eta[0].front()).epsilon(1e-12));
  CHECK(od.gamma0[0].front() == doctest::Approx(-od.psi[0].front()).epsilon(1e-12));

  // Terminal offset identity: psi(T) = -(qbarT sT)(2 - sT) m(T).
  CHECK(od.psi[0].back() ==
        doctest::Approx(-0.48 * od.mean[0].back()).epsilon(1e-10));

  // eta_at interpolates the half-step table.
  CHECK(od.eta_at(0, 0.0) == doctest::Approx(od.eta[0].front()).epsilon(1e-12));
  CHECK(od.eta_at(0, 1.0) == doctest::Approx(1.5).epsilon(1e-10));
}

TEST_CASE("discrete tables converge to the continuous optimum at first order") {
  const builtin bi = make_builtin("lq-scalar");
  const fbsde_solution sol = lq_oracle(bi.mdl, bi.g, label_grid(1), 1.0);
  REQUIRE(sol.oracle.has_value());
  const normalized_graphon ng = normalize(bi.g, label_grid(1));

  const oracle_discrete d100 = discretize_oracle(*sol.oracle, bi.mdl, ng, 100);
  const oracle_discrete d200 = discretize_oracle(*sol.oracle, bi.mdl, ng, 200);

  CHECK(d100.jstar == doctest::Approx(0.513189158528).epsilon(1e-8));
  CHECK(d200.jstar == doctest::Approx(0.512311046736).epsilon(1e-8));

  // First-order Euler bias: halving dt halves the defect.
  const double e100 = d100.jstar - sol.oracle->jstar;
  const double e200 = d200.jstar - sol.oracle->jstar;
  CHECK(e100 / e200 == doctest::Approx(2.0).epsilon(0.05));

  REQUIRE(d100.gamma1[0].size() == 100);
  REQUIRE(d100.mean[0].size() == 101);
  CHECK(d100.mean[0].front() == 1.0);
  CHECK(d100.gamma1[0].front() ==
        doctest::Approx(-sol.oracle->eta[0].front()).epsilon(1e-12));

  CHECK_THROWS_AS((void)discretize_oracle(*sol.oracle, bi.mdl,
                                          normalize(bi.g, label_grid(3)), 50),
                  config_error);
}

TEST_CASE("two-community benchmark splits the offsets but shares the gain") {
  const builtin bi = make_builtin("lq-2block");
  const fbsde_solution sol = lq_oracle(bi.mdl, bi.g, label_grid(2), 1.0, 40000);
  REQUIRE(sol.oracle.has_value());
  const auto& od = *sol.oracle;

  // The gain ODE has label-independent coefficients.
  CHECK(od.eta[0].front() == doctest::Approx(od.eta[1].front()).epsilon(1e-12));
  // Initial laws differ per community.
  CHECK(od.mean[0].front() == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(od.mean[1].front() == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(od.psi[0].front() != doctest::Approx(od.psi[1].front()).epsilon(1e-6));
  CHECK(od.verification_residual <= 1e-4);
  CHECK(od.jstar > 0.0);
}

TEST_CASE("small solver run closes the loop on the scalar problem") {
  const builtin bi = make_builtin("lq-scalar");
  solver_config cfg = bi.solver;
  cfg.sim.labels = 2;
  cfg.sim.particles = 300;
  cfg.sim.steps = 20;
  cfg.sim.seed = 12;
  cfg.tol_control = 1e-3;
  const normalized_graphon ng = normalize(bi.g, label_grid(2));

  const fbsde_solution sol = solve_pontryagin_fbsde(bi.mdl, ng, cfg);
  CHECK(sol.outer_iterations >= 1);
  CHECK(sol.outer_iterations <= cfg.max_outer);
  CHECK(sol.control_changes.back() <= cfg.tol_control);
  // Coarse grid and small ensemble: stay within a generous band of the
  // continuous optimum 0.5114.
  CHECK(sol.cost_value == doctest::Approx(0.5114).epsilon(0.12));
  CHECK(sol.residual.sup < 0.1);
  CHECK(sol.residual.l2 <= sol.residual.sup + 1e-15);

  // At the fixed point the cost derivative along any direction is bounded by
  // the residual; for the all-ones direction the quadrature weights sum to
  // the horizon, so the bound is the sup norm itself.
  control_table ones;
  ones.a.resize(2);
  for (int u = 0; u < 2; ++u) {
    for (int s = 0; s < cfg.sim.steps; ++s) {
      ones.a[static_cast<std::size_t>(u)].push_back(mat::Ones(1, 1));
    }
  }
  REQUIRE(sol.flow.has_value());
  REQUIRE(sol.adjoint.has_value());
  const double gd = gateaux_derivative(bi.mdl, *sol.flow, *sol.adjoint, sol.control,
                                       ones, ng, cfg.sim);
  CHECK(std::abs(gd) <= sol.residual.sup + 1e-12);

  // No perturbation of the solution control may improve the cost beyond
  // noise, while stepping from the zero control toward the solution must.
  std::vector<control_table> dirs;
  dirs.push_back(ones);
  const perturbation_report at_opt = optimality_perturbation_test(
      bi.mdl, ng, sol.control, dirs, {0.05, 0.1}, cfg.sim);
  CHECK(at_opt.pass);

  control_table zero = sol.control;
  for (auto& per_label : zero.a) {
    for (mat& entry : per_label) entry.setZero();
  }
  std::vector<control_table> toward;
  toward.push_back(sol.control);
  const perturbation_report off_opt =
      optimality_perturbation_test(bi.mdl, ng, zero, toward, {1.0}, cfg.sim);
  CHECK_FALSE(off_opt.pass);
  CHECK(off_opt.worst_improvement_sigmas > 3.0);
}
