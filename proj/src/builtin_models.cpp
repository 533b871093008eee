#include "gmfc/builtin_models.hpp"

#include <cmath>

#include "gmfc/errors.hpp"
#include "gmfc/rng.hpp"

namespace gmfc {

namespace {

lq_spec crowd_aversion_spec() {
  lq_spec sp;
  sp.dim = {1, 1, 1};
  sp.b0 = lq_coef::scalar(0.0);
  sp.b1 = lq_coef::scalar(-0.5);
  sp.b2 = lq_coef::scalar(0.4);
  sp.b3 = lq_coef::scalar(1.0);
  lq_spec::vol_column col;
  col.s0 = lq_coef::scalar(0.4);
  col.s1 = lq_coef::scalar(0.0);
  col.s2 = lq_coef::scalar(0.0);
  col.s3 = lq_coef::scalar(0.0);
  sp.vol = {col};
  sp.q = lq_coef::scalar(0.5);
  sp.qbar = lq_coef::scalar(0.5);
  sp.s = lq_coef::scalar(0.8);
  sp.lambda = lq_coef::scalar(0.5);
  sp.q_t = mat::Constant(1, 1, 1.0);
  sp.qbar_t = mat::Constant(1, 1, 0.5);
  sp.s_t = mat::Constant(1, 1, 0.8);
  sp.check_shapes();
  return sp;
}

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
  const double reach = std::abs(mean) + 3.0 * sd;
  law.moment_bound = 3.0 * std::pow(reach, 4.0);
  return law;
}

initial_law two_block_law() {
  // upper community starts high and tight, lower community low and wide
  initial_law law;
  law.d = 1;
  law.quantile = [](double u, const double* uniforms, vec& out) {
    const double mean = u <= 0.5 ? 1.5 : -0.5;
    const double sd = u <= 0.5 ? 0.4 : 0.6;
    out[0] = mean + sd * rng::normal_quantile(uniforms[0]);
  };
  law.mean = [](double u, vec& out) { out[0] = u <= 0.5 ? 1.5 : -0.5; };
  law.second_moment = [](double u, vec& out) {
    const double mean = u <= 0.5 ? 1.5 : -0.5;
    const double sd = u <= 0.5 ? 0.4 : 0.6;
    out[0] = mean * mean + sd * sd;
  };
  law.epsilon = 2.0;
  law.moment_bound = 3.0 * std::pow(1.5 + 3.0 * 0.6, 4.0);
  return law;
}

validation_decl lq_decl() {
  validation_decl decl;
  decl.lipschitz_x = 12.0;
  decl.lipschitz_mu = 6.0;
  decl.lipschitz_a = 6.0;
  decl.convexity_lambda = 0.5;
  decl.cost_convex = true;
  return decl;
}

solver_config default_solver(int labels) {
  solver_config cfg;
  cfg.sim.labels = labels;
  cfg.sim.particles = 2000;
  cfg.sim.steps = 100;
  cfg.sim.horizon = 1.0;
  cfg.sim.seed = 1;
  cfg.rho = 0.5;
  cfg.tol_control = 1e-4;
  return cfg;
}

model convex_quartic_model() {
  model mdl;
  mdl.name = "convex-nonlq";
  mdl.dim = {1, 1, 1};
  coefficient_set cs;
  cs.dim = mdl.dim;
  cs.b = [](double, double, const vec& x, const mu_view&, const vec& a, vec& out) {
    out[0] = -0.5 * x[0] + a[0];
  };
  cs.sigma = [](double, double, const vec&, const mu_view&, const vec&, mat& out) {
    out(0, 0) = 0.4;
  };
  cs.f = [](double, double, const vec& x, const mu_view&, const vec& a) {
    const double x2 = x[0] * x[0];
    return 0.1 * x2 * x2 + 0.5 * x2 + 0.5 * a[0] * a[0];
  };
  cs.g = [](double, const vec& x, const mu_view&) { return 0.5 * x[0] * x[0]; };
  cs.b_x = [](double, double, const vec&, const mu_view&, const vec&, mat& out) {
    out(0, 0) = -0.5;
  };
  cs.b_a = [](double, double, const vec&, const mu_view&, const vec&, mat& out) {
    out(0, 0) = 1.0;
  };
  cs.sigma_x_contract = [](double, double, const vec&, const mu_view&, const vec&,
                           const mat&, vec& out) { out.setZero(); };
  cs.sigma_a_contract = [](double, double, const vec&, const mu_view&, const vec&,
                           const mat&, vec& out) { out.setZero(); };
  cs.f_x = [](double, double, const vec& x, const mu_view&, const vec&, vec& out) {
    out[0] = 0.4 * x[0] * x[0] * x[0] + x[0];
  };
  cs.f_a = [](double, double, const vec&, const mu_view&, const vec& a, vec& out) {
    out[0] = a[0];
  };
  cs.g_x = [](double, const vec& x, const mu_view&, vec& out) { out[0] = x[0]; };
  cs.mu_b = [](double, double, const vec&, const mu_view&, const vec&, const vec&,
               mat& out) { out.setZero(); };
  cs.mu_sigma_contract = [](double, double, const vec&, const mu_view&, const vec&,
                            const vec&, const mat&, vec& out) { out.setZero(); };
  cs.mu_f = [](double, double, const vec&, const mu_view&, const vec&, const vec&,
               vec& out) { out.setZero(); };
  cs.mu_g = [](double, const vec&, const mu_view&, const vec&, vec& out) {
    out.setZero();
  };
  cs.has_mu_terms = false;
  cs.mu_probe_affine = true;
  cs.mu_probe_const = true;
  mdl.coef = std::move(cs);

  mdl.init = gaussian_law(0.5, 0.5);
  validation_decl decl;
  decl.lipschitz_x = 10.0;
  decl.lipschitz_mu = 1.0;
  decl.lipschitz_a = 4.0;
  decl.convexity_lambda = 0.5;
  decl.cost_convex = true;
  mdl.decl = decl;
  return mdl;
}

}  // namespace

builtin make_builtin(const std::string& name) {
  if (name == "lq-scalar") {
    return {lq_to_model("lq-scalar", crowd_aversion_spec(), gaussian_law(1.0, 0.5),
                        lq_decl()),
            graphon::step_from_matrix(mat::Constant(1, 1, 1.0)), default_solver(16)};
  }
  if (name == "lq-2block") {
    mat blocks(2, 2);
    blocks << 2.0, 0.5, 0.5, 1.0;
    return {lq_to_model("lq-2block", crowd_aversion_spec(), two_block_law(), lq_decl()),
            graphon::step_from_matrix(blocks), default_solver(16)};
  }
  if (name == "convex-nonlq") {
    solver_config solver = default_solver(8);
    solver.adjoint.basis.type = basis_spec::kind::quadratic;
    return {convex_quartic_model(), graphon::step_from_matrix(mat::Constant(1, 1, 1.0)),
            std::move(solver)};
  }
  throw config_error("unknown builtin model '" + name + "'");
}

std::vector<std::string> builtin_names() {
  return {"lq-scalar", "lq-2block", "convex-nonlq"};
}

}  // namespace gmfc
