#include "gmfc/adjoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "gmfc/errors.hpp"
#include "gmfc/parallel.hpp"
#include "gmfc/rng.hpp"

namespace gmfc {

namespace {

std::size_t zu(int i) { return static_cast<std::size_t>(i); }

// ---------------------------------------------------------------------------
// regression machinery

/// Standardized design for one (label, time) cloud: active feature columns,
/// their Gram factorization, and the affine feature transform.
struct design {
  mat fa;                   // P x A, standardized active columns
  std::vector<int> active;  // active -> full basis index
  vec mean, scale;          // full basis size; scale == 0 marks a dead column
  mat gram;                 // A x A
  Eigen::LDLT<mat> ldlt;
  bool use_svd = false;
};

design make_design(const basis_spec& basis, const mat& pts) {
  const int p_count = static_cast<int>(pts.rows());
  const int d = static_cast<int>(pts.cols());
  const int b_count = basis.count(d);

  mat raw(p_count, b_count);
  vec feat(b_count), x(d);
  for (int p = 0; p < p_count; ++p) {
    x = pts.row(p).transpose();
    basis.eval(x, feat);
    raw.row(p) = feat.transpose();
  }
  if (!raw.allFinite()) throw regression_singular("non-finite basis features");

  design dz;
  dz.mean = vec::Zero(b_count);
  dz.scale = vec::Zero(b_count);
  bool have_intercept = false;
  for (int j = 0; j < b_count; ++j) {
    const double mu = raw.col(j).mean();
    const double sd = std::sqrt((raw.col(j).array() - mu).square().mean());
    if (sd > 1e-12 * (1.0 + std::abs(mu))) {
      dz.mean[j] = mu;
      dz.scale[j] = sd;
      dz.active.push_back(j);
    } else if (!have_intercept) {
      // first constant column becomes the intercept
      have_intercept = true;
      dz.mean[j] = mu - 1.0;
      dz.scale[j] = 1.0;
      dz.active.push_back(j);
    }
    // remaining constant columns stay dead (absorbed by the intercept)
  }
  const int a_count = static_cast<int>(dz.active.size());
  if (a_count == 0) throw regression_singular("all basis columns degenerate");

  dz.fa.resize(p_count, a_count);
  for (int c = 0; c < a_count; ++c) {
    const int j = dz.active[zu(c)];
    dz.fa.col(c) = (raw.col(j).array() - dz.mean[j]) / dz.scale[j];
  }
  dz.gram.noalias() = dz.fa.transpose() * dz.fa;
  dz.ldlt.compute(dz.gram);
  if (dz.ldlt.info() != Eigen::Success) {
    dz.use_svd = true;
  } else {
    const vec diag = dz.ldlt.vectorD().cwiseAbs();
    const double dmax = diag.maxCoeff();
    const double dmin = diag.minCoeff();
    if (!(dmax > 0.0) || dmin < 1e-14 * dmax) dz.use_svd = true;
  }
  return dz;
}

/// Least squares of the responses on the design; returns the full-basis
/// coefficient matrix (dead rows zero) and optionally the fitted values.
mat regress(const design& dz, const mat& responses, mat* fitted) {
  const int b_count = static_cast<int>(dz.mean.size());
  const mat rhs = dz.fa.transpose() * responses;
  mat sol;
  if (!dz.use_svd) {
    sol = dz.ldlt.solve(rhs);
  }
  if (dz.use_svd || !sol.allFinite()) {
    Eigen::JacobiSVD<mat> svd(dz.gram, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(1e-13);
    sol = svd.solve(rhs);
    if (!sol.allFinite()) throw regression_singular("normal equations unsolvable");
  }
  if (fitted != nullptr) fitted->noalias() = dz.fa * sol;
  mat coef = mat::Zero(b_count, responses.cols());
  for (int c = 0; c < static_cast<int>(dz.active.size()); ++c) {
    coef.row(dz.active[zu(c)]) = sol.row(c);
  }
  return coef;
}

/// Applies a stored coefficient table at an arbitrary state.
void eval_regression(const basis_spec& basis, const vec& mean, const vec& scale,
                     const mat& coef, const vec& x, vec& out) {
  thread_local vec feat;
  const int b_count = static_cast<int>(mean.size());
  feat.resize(b_count);
  basis.eval(x, feat);
  out.setZero(coef.cols());
  for (int j = 0; j < b_count; ++j) {
    if (scale[j] == 0.0) continue;
    out.noalias() += coef.row(j).transpose() * ((feat[j] - mean[j]) / scale[j]);
  }
}

// ---------------------------------------------------------------------------
// coupling term

/// Inner particle average of a source label's measure derivative as an affine
/// function of the probe: avg(probe) = a * probe + c.
struct affine_term {
  mat a;
  vec c;
};

void unflatten_z(const mat& zflat, int p, int d, int m, mat& z) {
  for (int l = 0; l < m; ++l) {
    for (int i = 0; i < d; ++i) z(i, l) = zflat(p, l * d + i);
  }
}

/// Exact affine representation of the running coupling integrand for source
/// label v at one time: probes 0 and the unit vectors.
affine_term inner_average_running(const model& mdl, double u_v, double t,
                                  const particle_cloud& cloud, const mu_view& mu,
                                  const mat& y_samples, const mat& z_samples,
                                  const control_table& control, int v, int step) {
  const int d = mdl.dim.d;
  const int m = mdl.dim.m;
  const int p_count = cloud.size();
  const int probes = mdl.coef.mu_probe_const ? 1 : d + 1;

  std::vector<vec> acc(zu(probes), vec::Zero(d));
  vec x(d), y(d), probe(d), term(d);
  mat z(d, m);
  for (int p = 0; p < p_count; ++p) {
    const double w = cloud.weight(p);
    x = cloud.points.row(p).transpose();
    y = y_samples.row(p).transpose();
    unflatten_z(z_samples, p, d, m, z);
    const vec a = control.row(v, step, p);
    for (int j = 0; j < probes; ++j) {
      probe.setZero();
      if (j > 0) probe[j - 1] = 1.0;
      measure_derivative_hamiltonian(mdl.coef, u_v, t, x, mu, y, z, a, probe, term);
      acc[zu(j)].noalias() += w * term;
    }
  }
  affine_term out;
  out.c = acc[0];
  out.a = mat::Zero(d, d);
  for (int j = 1; j < probes; ++j) out.a.col(j - 1) = acc[zu(j)] - acc[0];
  return out;
}

/// Same for the terminal-cost measure derivative.
affine_term inner_average_terminal(const model& mdl, double u_v,
                                   const particle_cloud& cloud, const mu_view& mu) {
  const int d = mdl.dim.d;
  const int probes = mdl.coef.mu_probe_const ? 1 : d + 1;

  std::vector<vec> acc(zu(probes), vec::Zero(d));
  vec x(d), probe(d), term(d);
  for (int p = 0; p < cloud.size(); ++p) {
    const double w = cloud.weight(p);
    x = cloud.points.row(p).transpose();
    for (int j = 0; j < probes; ++j) {
      probe.setZero();
      if (j > 0) probe[j - 1] = 1.0;
      mdl.coef.mu_g(u_v, x, mu, probe, term);
      acc[zu(j)].noalias() += w * term;
    }
  }
  affine_term out;
  out.c = acc[0];
  out.a = mat::Zero(d, d);
  for (int j = 1; j < probes; ++j) out.a.col(j - 1) = acc[zu(j)] - acc[0];
  return out;
}

/// Weighted choice of a particle index by cloud weights from one uniform.
int weighted_index(const particle_cloud& cloud, double uquant) {
  double acc = 0.0;
  const int n = cloud.size();
  for (int p = 0; p < n; ++p) {
    acc += cloud.weight(p);
    if (uquant <= acc) return p;
  }
  return n - 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// basis

int basis_spec::count(int d) const {
  switch (type) {
    case kind::affine:
      return 1 + d;
    case kind::quadratic:
      return 1 + d + d * (d + 1) / 2;
    case kind::user:
      return user_size;
  }
  throw config_error("basis_spec: unknown kind");
}

void basis_spec::eval(const vec& x, vec& out) const {
  const int d = static_cast<int>(x.size());
  switch (type) {
    case kind::affine:
      out[0] = 1.0;
      out.segment(1, d) = x;
      return;
    case kind::quadratic: {
      out[0] = 1.0;
      out.segment(1, d) = x;
      int idx = 1 + d;
      for (int i = 0; i < d; ++i) {
        for (int j = i; j < d; ++j) out[idx++] = x[i] * x[j];
      }
      return;
    }
    case kind::user:
      if (!user_fn) throw config_error("basis_spec: user basis without function");
      user_fn(x, out);
      return;
  }
  throw config_error("basis_spec: unknown kind");
}

// ---------------------------------------------------------------------------
// adjoint_flow evaluation

void adjoint_flow::y_at(int label, int t_index, const vec& x, vec& out) const {
  const auto& coef = coef_y[zu(label)][zu(t_index)];
  eval_regression(basis, feat_mean[zu(label)][zu(t_index)],
                  feat_scale[zu(label)][zu(t_index)], coef, x, out);
}

void adjoint_flow::z_at(int label, int t_index, const vec& x, mat& out) const {
  const auto& coef = coef_z[zu(label)][zu(t_index)];
  thread_local vec flat;
  eval_regression(basis, feat_mean[zu(label)][zu(t_index)],
                  feat_scale[zu(label)][zu(t_index)], coef, x, flat);
  const int d = static_cast<int>(out.rows());
  const int m = static_cast<int>(out.cols());
  for (int l = 0; l < m; ++l) {
    for (int i = 0; i < d; ++i) out(i, l) = flat[l * d + i];
  }
}

// ---------------------------------------------------------------------------
// public coupling term (reference implementation)

vec adjoint_coupling_term(const model& mdl, const normalized_graphon& ng,
                          const measure_flow& flow, const adjoint_flow& previous,
                          const control_table& control, int label, int t_index,
                          const vec& probe, const sim_config& cfg, int mc_count) {
  flow.validate();
  const int d = mdl.dim.d;
  const int m = mdl.dim.m;
  const int m_labels = flow.labels();
  const int n_steps = flow.steps();
  if (t_index < 0 || t_index > n_steps) {
    throw config_error("adjoint_coupling_term: time index out of range");
  }
  const bool terminal = t_index == n_steps;
  const double t = cfg.horizon * t_index / cfg.steps;

  vec out = vec::Zero(d);
  vec x(d), y(d), term(d);
  mat z(d, m);
  for (int v = 0; v < m_labels; ++v) {
    const double w_vu = ng.rows(v, label) / m_labels;
    if (w_vu == 0.0) continue;
    const double u_v = ng.grid.midpoint(v);
    const particle_cloud& cloud = flow.clouds[zu(v)][zu(t_index)];
    const mu_view mu = mu_view::from_mixture(&flow, neighborhood_weights(ng, v), t_index);

    vec inner = vec::Zero(d);
    if (mc_count > 0) {
      const std::uint64_t strm =
          rng::stream(rng::purpose::sample, static_cast<std::uint64_t>(t_index),
                      static_cast<std::uint64_t>(v));
      for (int j = 0; j < mc_count; ++j) {
        const double uq = rng::uniform01(cfg.seed, strm,
                                         rng::counter(static_cast<std::uint64_t>(j), 0));
        const int p = weighted_index(cloud, uq);
        x = cloud.points.row(p).transpose();
        if (terminal) {
          mdl.coef.mu_g(u_v, x, mu, probe, term);
        } else {
          y = previous.y[zu(v)][zu(t_index)].row(p).transpose();
          unflatten_z(previous.z[zu(v)][zu(t_index)], p, d, m, z);
          const vec a = control.row(v, t_index, p);
          measure_derivative_hamiltonian(mdl.coef, u_v, t, x, mu, y, z, a, probe, term);
        }
        inner.noalias() += term / mc_count;
      }
    } else {
      for (int p = 0; p < cloud.size(); ++p) {
        const double w = cloud.weight(p);
        x = cloud.points.row(p).transpose();
        if (terminal) {
          mdl.coef.mu_g(u_v, x, mu, probe, term);
        } else {
          y = previous.y[zu(v)][zu(t_index)].row(p).transpose();
          unflatten_z(previous.z[zu(v)][zu(t_index)], p, d, m, z);
          const vec a = control.row(v, t_index, p);
          measure_derivative_hamiltonian(mdl.coef, u_v, t, x, mu, y, z, a, probe, term);
        }
        inner.noalias() += w * term;
      }
    }
    out.noalias() += w_vu * inner;
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward solve

adjoint_flow solve_adjoint(const model& mdl, const control_table& control,
                           const measure_flow& flow, const normalized_graphon& ng,
                           const sim_config& sim, const adjoint_config& cfg) {
  flow.validate();
  const int d = mdl.dim.d;
  const int m = mdl.dim.m;
  const int m_labels = flow.labels();
  const int n_steps = flow.steps();
  const int p_count = flow.clouds[0][0].size();
  if (m_labels != sim.labels || n_steps != sim.steps) {
    throw config_error("solve_adjoint: flow shape does not match sim_config");
  }
  if (static_cast<int>(control.a.size()) != m_labels) {
    throw config_error("solve_adjoint: control table has wrong label count");
  }
  const double dt = sim.dt();
  const bool affine_path =
      mdl.coef.mu_probe_affine && !cfg.force_generic_coupling && cfg.mc_count == 0;

  // per-(label, time) designs and neighborhood views, shared by every sweep
  std::vector<std::vector<design>> designs(zu(m_labels));
  std::vector<std::vector<mu_view>> views(zu(m_labels));
  parallel::for_each_index(m_labels, [&](int v) {
    designs[zu(v)].reserve(zu(n_steps + 1));
    views[zu(v)].reserve(zu(n_steps + 1));
    const vec w = neighborhood_weights(ng, v);
    for (int kk = 0; kk <= n_steps; ++kk) {
      designs[zu(v)].push_back(make_design(cfg.basis, flow.clouds[zu(v)][zu(kk)].points));
      views[zu(v)].push_back(mu_view::from_mixture(&flow, w, kk));
    }
  });

  // exact terminal values per particle
  std::vector<mat> y_term(zu(m_labels));
  {
    std::vector<affine_term> gterm;
    if (mdl.coef.has_mu_terms && affine_path) {
      gterm.resize(zu(m_labels));
      parallel::for_each_index(m_labels, [&](int v) {
        gterm[zu(v)] = inner_average_terminal(mdl, ng.grid.midpoint(v),
                                              flow.clouds[zu(v)][zu(n_steps)],
                                              views[zu(v)][zu(n_steps)]);
      });
    }
    adjoint_flow dummy;  // unused by the terminal coupling path
    parallel::for_each_index(m_labels, [&](int u) {
      const double u_mid = ng.grid.midpoint(u);
      const mu_view& mu = views[zu(u)][zu(n_steps)];
      const mat& pts = flow.clouds[zu(u)][zu(n_steps)].points;
      mat yt(p_count, d);
      vec x(d), gx(d);
      for (int p = 0; p < p_count; ++p) {
        x = pts.row(p).transpose();
        mdl.coef.g_x(u_mid, x, mu, gx);
        if (mdl.coef.has_mu_terms) {
          if (affine_path) {
            for (int v = 0; v < m_labels; ++v) {
              const double w_vu = ng.rows(v, u) / m_labels;
              if (w_vu == 0.0) continue;
              gx.noalias() += w_vu * (gterm[zu(v)].a * x + gterm[zu(v)].c);
            }
          } else {
            gx.noalias() +=
                adjoint_coupling_term(mdl, ng, flow, dummy, control, u, n_steps, x, sim,
                                      cfg.mc_count);
          }
        }
        yt.row(p) = gx.transpose();
      }
      y_term[zu(u)] = std::move(yt);
    });
  }

  auto zero_tables = [&](std::vector<std::vector<mat>>& y, std::vector<std::vector<mat>>& z) {
    y.assign(zu(m_labels), {});
    z.assign(zu(m_labels), {});
    for (int u = 0; u < m_labels; ++u) {
      y[zu(u)].assign(zu(n_steps + 1), mat::Zero(p_count, d));
      y[zu(u)][zu(n_steps)] = y_term[zu(u)];
      z[zu(u)].assign(zu(n_steps), mat::Zero(p_count, d * m));
    }
  };

  std::vector<std::vector<mat>> prev_y, prev_z, cur_y, cur_z;
  zero_tables(prev_y, prev_z);
  zero_tables(cur_y, cur_z);
  const bool warm_ok = cfg.warm != nullptr &&
                       static_cast<int>(cfg.warm->y.size()) == m_labels &&
                       static_cast<int>(cfg.warm->y[0].size()) == n_steps + 1 &&
                       static_cast<int>(cfg.warm->y[0][0].rows()) == p_count;
  if (warm_ok) {
    for (int u = 0; u < m_labels; ++u) {
      for (int kk = 0; kk < n_steps; ++kk) {
        prev_y[zu(u)][zu(kk)] = cfg.warm->y[zu(u)][zu(kk)];
        prev_z[zu(u)][zu(kk)] = cfg.warm->z[zu(u)][zu(kk)];
      }
    }
  }

  adjoint_flow res;
  res.basis = cfg.basis;
  res.coef_y.assign(zu(m_labels), std::vector<mat>(zu(n_steps + 1)));
  res.coef_z.assign(zu(m_labels), std::vector<mat>(zu(n_steps)));
  res.feat_mean.assign(zu(m_labels), std::vector<vec>(zu(n_steps + 1)));
  res.feat_scale.assign(zu(m_labels), std::vector<vec>(zu(n_steps + 1)));
  res.resid_y.assign(zu(m_labels), std::vector<double>(zu(n_steps + 1), 0.0));
  for (int u = 0; u < m_labels; ++u) {
    for (int kk = 0; kk <= n_steps; ++kk) {
      res.feat_mean[zu(u)][zu(kk)] = designs[zu(u)][zu(kk)].mean;
      res.feat_scale[zu(u)][zu(kk)] = designs[zu(u)][zu(kk)].scale;
    }
  }
  parallel::for_each_index(m_labels, [&](int u) {
    mat fitted;
    res.coef_y[zu(u)][zu(n_steps)] =
        regress(designs[zu(u)][zu(n_steps)], y_term[zu(u)], &fitted);
    res.resid_y[zu(u)][zu(n_steps)] =
        std::sqrt((y_term[zu(u)] - fitted).squaredNorm() / (p_count * d));
  });

  // coupling tables for one sweep: [time][target label]
  std::vector<std::vector<affine_term>> cpl;
  const bool need_coupling = mdl.coef.has_mu_terms;

  bool converged = false;
  for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
    if (need_coupling && affine_path) {
      cpl.assign(zu(n_steps), std::vector<affine_term>(zu(m_labels)));
      parallel::for_each_index(n_steps, [&](int kk) {
        const double t = sim.horizon * kk / sim.steps;
        std::vector<affine_term> source(zu(m_labels));
        for (int v = 0; v < m_labels; ++v) {
          source[zu(v)] = inner_average_running(
              mdl, ng.grid.midpoint(v), t, flow.clouds[zu(v)][zu(kk)],
              views[zu(v)][zu(kk)], prev_y[zu(v)][zu(kk)], prev_z[zu(v)][zu(kk)],
              control, v, kk);
        }
        for (int u = 0; u < m_labels; ++u) {
          affine_term combined;
          combined.a = mat::Zero(d, d);
          combined.c = vec::Zero(d);
          for (int v = 0; v < m_labels; ++v) {
            const double w_vu = ng.rows(v, u) / m_labels;
            if (w_vu == 0.0) continue;
            combined.a.noalias() += w_vu * source[zu(v)].a;
            combined.c.noalias() += w_vu * source[zu(v)].c;
          }
          cpl[zu(kk)][zu(u)] = std::move(combined);
        }
      });
    }

    adjoint_flow prev_view;  // borrow previous-sweep samples for the generic path
    if (need_coupling && !affine_path) {
      prev_view.y = prev_y;
      prev_view.z = prev_z;
    }

    parallel::for_each_index(m_labels, [&](int u) {
      const double u_mid = ng.grid.midpoint(u);
      mat y_next = y_term[zu(u)];
      mat r2(p_count, d * m), r3(p_count, d), fit_y(p_count, d), fit_z(p_count, d * m);
      vec x(d), yhat(d), gx(d), coupled(d);
      mat zhat(d, m);
      for (int kk = n_steps - 1; kk >= 0; --kk) {
        const design& dz = designs[zu(u)][zu(kk)];
        const mu_view& mu = views[zu(u)][zu(kk)];
        const double t = sim.horizon * kk / sim.steps;
        const mat& pts = flow.clouds[zu(u)][zu(kk)].points;

        for (int p = 0; p < p_count; ++p) {
          for (int l = 0; l < m; ++l) {
            const double dw = brownian_increment(sim.seed, u, p, kk, l, dt);
            for (int i = 0; i < d; ++i) r2(p, l * d + i) = y_next(p, i) * dw / dt;
          }
        }
        res.coef_z[zu(u)][zu(kk)] = regress(dz, r2, &fit_z);
        regress(dz, y_next, &fit_y);

        for (int p = 0; p < p_count; ++p) {
          x = pts.row(p).transpose();
          yhat = fit_y.row(p).transpose();
          unflatten_z(fit_z, p, d, m, zhat);
          const vec a = control.row(u, kk, p);
          grad_hamiltonian_x(mdl.coef, u_mid, t, x, mu, yhat, zhat, a, gx);
          if (need_coupling) {
            if (affine_path) {
              const affine_term& ct = cpl[zu(kk)][zu(u)];
              gx.noalias() += ct.a * x + ct.c;
            } else {
              coupled = adjoint_coupling_term(mdl, ng, flow, prev_view, control, u, kk,
                                              x, sim, cfg.mc_count);
              gx.noalias() += coupled;
            }
          }
          r3.row(p) = y_next.row(p) + dt * gx.transpose();
        }
        mat fit_new(p_count, d);
        res.coef_y[zu(u)][zu(kk)] = regress(dz, r3, &fit_new);
        res.resid_y[zu(u)][zu(kk)] =
            std::sqrt((r3 - fit_new).squaredNorm() / (p_count * d));
        cur_y[zu(u)][zu(kk)] = fit_new;
        cur_z[zu(u)][zu(kk)] = fit_z;
        y_next = std::move(fit_new);
      }
    });

    double change = 0.0;
    for (int u = 0; u < m_labels; ++u) {
      double acc = 0.0;
      for (int kk = 0; kk < n_steps; ++kk) {
        acc += (cur_y[zu(u)][zu(kk)] - prev_y[zu(u)][zu(kk)]).squaredNorm();
      }
      change = std::max(change, acc / (static_cast<double>(p_count) * (n_steps + 1)));
    }
    res.sweep_changes.push_back(change);
    res.sweeps = sweep;
    if (!std::isfinite(change)) {
      throw adjoint_divergence("non-finite adjoint update at sweep " +
                               std::to_string(sweep));
    }
    std::swap(prev_y, cur_y);
    std::swap(prev_z, cur_z);
    if (change <= cfg.tol) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw adjoint_divergence("coupling iteration still moving after " +
                             std::to_string(cfg.max_sweeps) + " sweeps (change " +
                             std::to_string(res.sweep_changes.back()) + ")");
  }
  res.y = std::move(prev_y);
  res.z = std::move(prev_z);
  return res;
}

// ---------------------------------------------------------------------------
// diagnostics along a solution

residual_pair pontryagin_residual(const model& mdl, const measure_flow& flow,
                                  const adjoint_flow& adjoint,
                                  const control_table& control,
                                  const normalized_graphon& ng, const sim_config& cfg) {
  flow.validate();
  const int d = mdl.dim.d;
  const int m = mdl.dim.m;
  const int k = mdl.dim.k;
  const int m_labels = flow.labels();
  const int n_steps = flow.steps();
  const int p_count = flow.clouds[0][0].size();
  const double dt = cfg.dt();

  residual_pair out;
  double l2 = 0.0;
  vec x(d), y(d), ga(k);
  mat z(d, m);
  for (int u = 0; u < m_labels; ++u) {
    const double u_mid = ng.grid.midpoint(u);
    const vec w = neighborhood_weights(ng, u);
    for (int kk = 0; kk < n_steps; ++kk) {
      const double t = cfg.horizon * kk / cfg.steps;
      const mu_view mu = mu_view::from_mixture(&flow, w, kk);
      const mat& pts = flow.clouds[zu(u)][zu(kk)].points;
      for (int p = 0; p < p_count; ++p) {
        x = pts.row(p).transpose();
        y = adjoint.y[zu(u)][zu(kk)].row(p).transpose();
        unflatten_z(adjoint.z[zu(u)][zu(kk)], p, d, m, z);
        const vec a = control.row(u, kk, p);
        grad_hamiltonian_alpha(mdl.coef, u_mid, t, x, mu, y, z, a, ga);
        const double norm = ga.norm();
        out.sup = std::max(out.sup, norm);
        l2 += dt * norm * norm / (static_cast<double>(m_labels) * p_count);
      }
    }
  }
  out.l2 = std::sqrt(l2);
  return out;
}

double gateaux_derivative(const model& mdl, const measure_flow& flow,
                          const adjoint_flow& adjoint, const control_table& control,
                          const control_table& direction, const normalized_graphon& ng,
                          const sim_config& cfg) {
  flow.validate();
  const int d = mdl.dim.d;
  const int m = mdl.dim.m;
  const int k = mdl.dim.k;
  const int m_labels = flow.labels();
  const int n_steps = flow.steps();
  const int p_count = flow.clouds[0][0].size();
  const double dt = cfg.dt();

  double acc = 0.0;
  vec x(d), y(d), ga(k);
  mat z(d, m);
  for (int u = 0; u < m_labels; ++u) {
    const double u_mid = ng.grid.midpoint(u);
    const vec w = neighborhood_weights(ng, u);
    for (int kk = 0; kk < n_steps; ++kk) {
      const double t = cfg.horizon * kk / cfg.steps;
      const mu_view mu = mu_view::from_mixture(&flow, w, kk);
      const mat& pts = flow.clouds[zu(u)][zu(kk)].points;
      for (int p = 0; p < p_count; ++p) {
        x = pts.row(p).transpose();
        y = adjoint.y[zu(u)][zu(kk)].row(p).transpose();
        unflatten_z(adjoint.z[zu(u)][zu(kk)], p, d, m, z);
        const vec a = control.row(u, kk, p);
        grad_hamiltonian_alpha(mdl.coef, u_mid, t, x, mu, y, z, a, ga);
        acc += dt * ga.dot(direction.row(u, kk, p)) /
               (static_cast<double>(m_labels) * p_count);
      }
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// outer solver

fbsde_solution solve_pontryagin_fbsde(const model& mdl, const normalized_graphon& ng,
                                      const solver_config& cfg) {
  const int k = mdl.dim.k;
  const int m_labels = cfg.sim.labels;
  const int n_steps = cfg.sim.steps;
  const int p_count = cfg.sim.particles;
  const double dt = cfg.sim.dt();
  if (cfg.rho <= 0.0 || cfg.rho > 1.0) {
    throw config_error("solve_pontryagin_fbsde: rho must lie in (0, 1]");
  }

  control_table alpha;
  alpha.a.assign(zu(m_labels), std::vector<mat>(zu(n_steps), mat::Zero(1, k)));

  fbsde_solution sol;
  adjoint_config adj_cfg = cfg.adjoint;
  std::optional<adjoint_flow> warm;

  for (int outer = 1; outer <= cfg.max_outer; ++outer) {
    auto [flow, pic] = picard_fixed_point(mdl, control_profile::from_table(alpha), ng,
                                          cfg.sim);
    (void)pic;
    adj_cfg.warm = warm ? &*warm : nullptr;
    adjoint_flow adj = solve_adjoint(mdl, alpha, flow, ng, cfg.sim, adj_cfg);

    // pointwise Hamiltonian minimizer along the current particles
    control_table ahat;
    ahat.a.assign(zu(m_labels), std::vector<mat>(zu(n_steps)));
    std::vector<double> label_gap(zu(m_labels), 0.0);
    parallel::for_each_index(m_labels, [&](int u) {
      const double u_mid = ng.grid.midpoint(u);
      const vec w = neighborhood_weights(ng, u);
      const int d = mdl.dim.d;
      const int m = mdl.dim.m;
      vec x(d), y(d);
      mat z(d, m);
      double gap = 0.0;
      for (int kk = 0; kk < n_steps; ++kk) {
        const double t = cfg.sim.horizon * kk / cfg.sim.steps;
        const mu_view mu = mu_view::from_mixture(&flow, w, kk);
        const mat& pts = flow.clouds[zu(u)][zu(kk)].points;
        mat rows(p_count, k);
        for (int p = 0; p < p_count; ++p) {
          x = pts.row(p).transpose();
          y = adj.y[zu(u)][zu(kk)].row(p).transpose();
          unflatten_z(adj.z[zu(u)][zu(kk)], p, d, m, z);
          const vec best = argmin_hamiltonian(mdl, u_mid, t, x, mu, y, z);
          rows.row(p) = best.transpose();
          gap += dt * (best - alpha.row(u, kk, p)).squaredNorm() / p_count;
        }
        ahat.a[zu(u)][zu(kk)] = std::move(rows);
      }
      label_gap[zu(u)] = gap;
    });
    double gap2 = 0.0;
    for (double g : label_gap) gap2 += g / m_labels;
    const double delta = cfg.rho * std::sqrt(gap2);
    sol.control_changes.push_back(delta);
    sol.outer_iterations = outer;
    if (!std::isfinite(delta)) {
      throw outer_divergence("non-finite control update at outer iteration " +
                             std::to_string(outer));
    }
    if (sol.control_changes.size() >= 8) {
      const double first = sol.control_changes.front();
      if (delta > 1e3 * (first + 1.0)) {
        throw outer_divergence("control updates growing (delta " +
                               std::to_string(delta) + ")");
      }
    }

    if (delta <= cfg.tol_control) {
      sol.flow = std::move(flow);
      sol.adjoint = std::move(adj);
      sol.control = alpha;
      sol.control_argmin = std::move(ahat);
      sol.residual = pontryagin_residual(mdl, *sol.flow, *sol.adjoint, alpha, ng,
                                         cfg.sim);
      const cost_estimate est = cost(mdl, control_profile::from_table(alpha), *sol.flow,
                                     ng, cfg.sim);
      sol.cost_value = est.value;
      sol.cost_stderr = est.stderr_value;
      return sol;
    }

    // damped update toward the minimizer
    for (int u = 0; u < m_labels; ++u) {
      for (int kk = 0; kk < n_steps; ++kk) {
        const mat& old = alpha.at(u, kk);
        mat blended = ahat.at(u, kk) * cfg.rho;
        if (old.rows() == 1) {
          blended.rowwise() += (1.0 - cfg.rho) * old.row(0);
        } else {
          blended.noalias() += (1.0 - cfg.rho) * old;
        }
        alpha.a[zu(u)][zu(kk)] = std::move(blended);
      }
    }
    warm = std::move(adj);
  }
  throw outer_divergence("no control fixed point after " +
                         std::to_string(cfg.max_outer) + " iterations (last change " +
                         std::to_string(sol.control_changes.back()) + ")");
}

// ---------------------------------------------------------------------------
// perturbation check

namespace {

control_table add_scaled(const control_table& base, const control_table& dir,
                         double eps) {
  control_table out = base;
  for (std::size_t u = 0; u < base.a.size(); ++u) {
    for (std::size_t kk = 0; kk < base.a[u].size(); ++kk) {
      const mat& b = base.a[u][kk];
      const mat& g = dir.a[u][kk];
      if (b.rows() == g.rows()) {
        out.a[u][kk] = b + eps * g;
      } else if (g.rows() == 1) {
        mat r = b;
        r.rowwise() += eps * g.row(0);
        out.a[u][kk] = std::move(r);
      } else {
        mat r = eps * g;
        r.rowwise() += b.row(0);
        out.a[u][kk] = std::move(r);
      }
    }
  }
  return out;
}

}  // namespace

perturbation_report optimality_perturbation_test(
    const model& mdl, const normalized_graphon& ng, const control_table& control,
    const std::vector<control_table>& directions, const std::vector<double>& epsilons,
    const sim_config& cfg) {
  const auto [flow0, info0] = picard_fixed_point(
      mdl, control_profile::from_table(control), ng, cfg);
  (void)info0;
  const std::vector<vec> base =
      cost_samples(mdl, control_profile::from_table(control), flow0, ng, cfg);
  const int m_labels = static_cast<int>(base.size());
  const int p_count = static_cast<int>(base[0].size());

  perturbation_report rep;
  rep.pass = true;
  for (std::size_t j = 0; j < directions.size(); ++j) {
    for (double eps : epsilons) {
      const control_table moved = add_scaled(control, directions[j], eps);
      const auto [flow1, info1] = picard_fixed_point(
          mdl, control_profile::from_table(moved), ng, cfg);
      (void)info1;
      const std::vector<vec> pert =
          cost_samples(mdl, control_profile::from_table(moved), flow1, ng, cfg);

      // paired differences under shared noise
      double value = 0.0;
      double se2 = 0.0;
      for (int u = 0; u < m_labels; ++u) {
        const vec diff = pert[zu(u)] - base[zu(u)];
        const double mean = diff.mean();
        double var = 0.0;
        for (int p = 0; p < p_count; ++p) var += (diff[p] - mean) * (diff[p] - mean);
        var /= std::max(1, p_count - 1);
        value += mean;
        se2 += var / p_count;
      }
      value /= m_labels;
      const double sigma = std::max(std::sqrt(se2) / m_labels, 1e-300);

      perturbation_entry e;
      e.direction = static_cast<int>(j);
      e.epsilon = eps;
      e.delta_cost = value;
      e.sigma = sigma;
      rep.entries.push_back(e);
      rep.worst_improvement_sigmas =
          std::max(rep.worst_improvement_sigmas, -value / sigma);
    }
  }
  rep.pass = rep.worst_improvement_sigmas <= 3.0;
  return rep;
}

// ---------------------------------------------------------------------------
// feedback view of a solution

control_profile solution_feedback(const model& mdl, const fbsde_solution& sol) {
  if (sol.oracle.has_value()) {
    const fbsde_solution::oracle_data* od = &*sol.oracle;
    if (mdl.dim.d != 1 || mdl.dim.k != 1) {
      throw config_error("solution_feedback: oracle feedback is scalar only");
    }
    return control_profile::from_feedback(
        [od](double, int u_index, int, double t, const vec& x, const mu_view&,
             vec& out) {
          const int idx = od->index_at(t);
          out[0] = od->gamma1[zu(u_index)][zu(idx)] * x[0] +
                   od->gamma0[zu(u_index)][zu(idx)];
        });
  }
  if (!sol.adjoint.has_value()) {
    throw config_error("solution_feedback: solution carries no adjoint tables");
  }
  const adjoint_flow* adj = &*sol.adjoint;
  const model* mp = &mdl;
  const int n_steps = static_cast<int>(adj->coef_z[0].size());
  return control_profile::from_feedback(
      [adj, mp, n_steps](double u, int u_index, int step, double t, const vec& x,
                         const mu_view& mu, vec& out) {
        thread_local vec y;
        thread_local mat z;
        const int kk = std::min(step, n_steps - 1);
        y.resize(mp->dim.d);
        z.resize(mp->dim.d, mp->dim.m);
        adj->y_at(u_index, kk, x, y);
        adj->z_at(u_index, kk, x, z);
        out = argmin_hamiltonian(*mp, u, t, x, mu, y, z);
      });
}

// ---------------------------------------------------------------------------
// oracle helpers shared with lq_oracle.cpp

double fbsde_solution::oracle_data::eta_at(int label, double t) const {
  const double pos = std::clamp(t / horizon, 0.0, 1.0) * (2.0 * ode_steps);
  const int idx = static_cast<int>(std::lround(pos));
  return eta[zu(label)][zu(idx)];
}

int fbsde_solution::oracle_data::index_at(double t) const {
  const double pos = std::clamp(t / horizon, 0.0, 1.0) * ode_steps;
  return static_cast<int>(std::lround(pos));
}

}  // namespace gmfc
