#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gmfc/adjoint.hpp"
#include "gmfc/errors.hpp"

namespace gmfc {

namespace {

std::size_t zu(int i) { return static_cast<std::size_t>(i); }

/// Scalar snapshot of all LQ coefficients at one (label, time).
struct lq_scalars {
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0;
  double q = 0, qbar = 0, s = 0, lambda = 0;
  std::vector<double> s0, s1, s2, s3;  // per noise column
  double s11 = 0, s13 = 0, s33 = 0;    // sum s1*s1, s1*s3, s3*s3
};

void fetch_scalars(const lq_spec& sp, double u, double t, lq_scalars& c) {
  const int m = sp.dim.m;
  c.b0 = sp.b0.at(u, t)(0, 0);
  c.b1 = sp.b1.at(u, t)(0, 0);
  c.b2 = sp.b2.at(u, t)(0, 0);
  c.b3 = sp.b3.at(u, t)(0, 0);
  c.q = sp.q.at(u, t)(0, 0);
  c.qbar = sp.qbar.at(u, t)(0, 0);
  c.s = sp.s.at(u, t)(0, 0);
  c.lambda = sp.lambda.at(u, t)(0, 0);
  c.s0.resize(zu(m));
  c.s1.resize(zu(m));
  c.s2.resize(zu(m));
  c.s3.resize(zu(m));
  c.s11 = c.s13 = c.s33 = 0.0;
  for (int l = 0; l < m; ++l) {
    const auto& col = sp.vol[zu(l)];
    c.s0[zu(l)] = col.s0.at(u, t)(0, 0);
    c.s1[zu(l)] = col.s1.at(u, t)(0, 0);
    c.s2[zu(l)] = col.s2.at(u, t)(0, 0);
    c.s3[zu(l)] = col.s3.at(u, t)(0, 0);
    c.s11 += c.s1[zu(l)] * c.s1[zu(l)];
    c.s13 += c.s1[zu(l)] * c.s3[zu(l)];
    c.s33 += c.s3[zu(l)] * c.s3[zu(l)];
  }
}

bool any_time_dependent(const lq_spec& sp) {
  bool dep = sp.b0.time_dependent() || sp.b1.time_dependent() ||
             sp.b2.time_dependent() || sp.b3.time_dependent() ||
             sp.q.time_dependent() || sp.qbar.time_dependent() ||
             sp.s.time_dependent() || sp.lambda.time_dependent();
  for (const auto& col : sp.vol) {
    dep = dep || col.s0.time_dependent() || col.s1.time_dependent() ||
          col.s2.time_dependent() || col.s3.time_dependent();
  }
  return dep;
}

/// Coefficient provider: snapshots once per label for time-constant models,
/// refetches per stage otherwise.
class scalar_source {
 public:
  scalar_source(const lq_spec& sp, const label_grid& grid)
      : sp_(sp), grid_(grid), time_dep_(any_time_dependent(sp)) {
    cache_.resize(zu(grid.size()));
    for (int u = 0; u < grid.size(); ++u) {
      fetch_scalars(sp_, grid_.midpoint(u), 0.0, cache_[zu(u)]);
    }
  }

  const lq_scalars& at(int u, double t) {
    if (time_dep_) fetch_scalars(sp_, grid_.midpoint(u), t, cache_[zu(u)]);
    return cache_[zu(u)];
  }

 private:
  const lq_spec& sp_;
  const label_grid& grid_;
  bool time_dep_;
  std::vector<lq_scalars> cache_;
};

double curvature_denom(const lq_scalars& c, double eta) {
  return 2.0 * c.lambda + eta * c.s33;
}

double eta_rhs(const lq_scalars& c, double eta) {
  const double beta = c.b3 + c.s13;
  return -2.0 * c.b1 * eta - c.s11 * eta - c.q - c.qbar +
         eta * eta * beta * beta / curvature_denom(c, eta);
}

double gamma1_of(const lq_scalars& c, double eta) {
  return -eta * (c.b3 + c.s13) / curvature_denom(c, eta);
}

/// Feedback offset; with_const = false drops the constant (s0) sources so the
/// same formula doubles as the homogeneous part of the linear system.
double gamma0_of(const lq_scalars& c, double eta, double psi, double mubar,
                 bool with_const) {
  double acc = c.b3 * psi;
  for (std::size_t l = 0; l < c.s3.size(); ++l) {
    acc += eta * c.s3[l] * ((with_const ? c.s0[l] : 0.0) + c.s2[l] * mubar);
  }
  return -acc / curvature_denom(c, eta);
}

void check_eta(double eta, const lq_scalars& c, double t, int label) {
  if (!std::isfinite(eta) || std::abs(eta) > 1e8) {
    throw riccati_blowup("gain ode left the stable range at t = " + std::to_string(t) +
                         ", label cell " + std::to_string(label));
  }
  if (curvature_denom(c, eta) <= 1e-12) {
    throw riccati_blowup("control curvature denominator vanished at t = " +
                         std::to_string(t) + ", label cell " + std::to_string(label));
  }
}

/// Drift/offset system of callers: columns of V stack (m_1..m_M, psi_1..psi_M).
/// Column 0 carries the constant sources; the rest are homogeneous.
void mv_rhs(scalar_source& scal, const Eigen::MatrixXd& rows, const vec& eta, double t,
            const mat& v_state, mat& out) {
  const int m_labels = static_cast<int>(eta.size());
  const int cols = static_cast<int>(v_state.cols());

  thread_local mat mubar, g0, inner, coupling;
  mubar.noalias() = rows * v_state.topRows(m_labels) / m_labels;

  // feedback offsets and the coupling integrand per source label
  g0.resize(m_labels, cols);
  inner.resize(m_labels, cols);
  for (int v = 0; v < m_labels; ++v) {
    const lq_scalars& c = scal.at(v, t);
    const double g1 = gamma1_of(c, eta[v]);
    for (int col = 0; col < cols; ++col) {
      const bool wc = col == 0;
      const double mv = v_state(v, col);
      const double pv = v_state(m_labels + v, col);
      const double mu = mubar(v, col);
      const double g0v = gamma0_of(c, eta[v], pv, mu, wc);
      g0(v, col) = g0v;
      const double abar = g1 * mv + g0v;
      double zsum = 0.0;
      for (std::size_t l = 0; l < c.s2.size(); ++l) {
        zsum += c.s2[l] * eta[v] *
                ((wc ? c.s0[l] : 0.0) + c.s1[l] * mv + c.s2[l] * mu + c.s3[l] * abar);
      }
      inner(v, col) = c.b2 * (eta[v] * mv + pv) + zsum + c.qbar * c.s * (c.s * mu - mv);
    }
  }
  coupling.noalias() = rows.transpose() * inner / m_labels;

  out.resize(2 * m_labels, cols);
  for (int u = 0; u < m_labels; ++u) {
    const lq_scalars& c = scal.at(u, t);
    const double g1 = gamma1_of(c, eta[u]);
    for (int col = 0; col < cols; ++col) {
      const bool wc = col == 0;
      const double mu = mubar(u, col);
      const double mm = v_state(u, col);
      const double pp = v_state(m_labels + u, col);
      const double g0v = g0(u, col);
      out(u, col) = (wc ? c.b0 : 0.0) + c.b1 * mm + c.b2 * mu + c.b3 * (g1 * mm + g0v);
      double vol = 0.0;
      for (std::size_t l = 0; l < c.s1.size(); ++l) {
        vol += c.s1[l] * ((wc ? c.s0[l] : 0.0) + c.s2[l] * mu + c.s3[l] * g0v);
      }
      out(m_labels + u, col) = -c.b1 * pp -
                               eta[u] * ((wc ? c.b0 : 0.0) + c.b2 * mu + c.b3 * g0v) -
                               eta[u] * vol + c.qbar * c.s * mu - coupling(u, col);
    }
  }
}

double second_moment_rhs(const lq_scalars& c, double eta, double mm, double vv,
                         double mu, double psi) {
  const double g1 = gamma1_of(c, eta);
  const double g0 = gamma0_of(c, eta, psi, mu, true);
  double vol = 0.0;
  for (std::size_t l = 0; l < c.s0.size(); ++l) {
    const double a = c.s0[l] + c.s2[l] * mu + c.s3[l] * g0;
    const double b = c.s1[l] + c.s3[l] * g1;
    vol += a * a + 2.0 * a * b * mm + b * b * vv;
  }
  return 2.0 * ((c.b0 + c.b2 * mu + c.b3 * g0) * mm + (c.b1 + c.b3 * g1) * vv) + vol;
}

double running_cost_mean(const lq_scalars& c, double mm, double vv, double mu,
                         double g1, double g0) {
  const double cross = vv - 2.0 * c.s * mu * mm + c.s * c.s * mu * mu;
  const double control = g1 * g1 * vv + 2.0 * g1 * g0 * mm + g0 * g0;
  return 0.5 * c.q * vv + 0.5 * c.qbar * cross + c.lambda * control;
}

double initial_scalar_moment(const initial_law& law, double u, bool second) {
  vec out(1);
  if (second && law.second_moment) {
    law.second_moment(u, out);
    return out[0];
  }
  if (!second && law.mean) {
    law.mean(u, out);
    return out[0];
  }
  if (law.d != 1) {
    throw config_error("closed-form benchmark needs exact initial moments for d > 1");
  }
  // midpoint quadrature of the quantile transform
  const int n = 1 << 20;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = (i + 0.5) / n;
    law.quantile(u, &p, out);
    acc += second ? out[0] * out[0] : out[0];
  }
  return acc / n;
}

}  // namespace

fbsde_solution lq_oracle(const model& mdl, const graphon& g, const label_grid& grid,
                         double horizon, int ode_steps) {
  if (!mdl.lq.has_value()) {
    throw config_error("lq_oracle: model carries no linear-quadratic structure");
  }
  const lq_spec& sp = *mdl.lq;
  if (sp.dim.d != 1 || sp.dim.k != 1) {
    throw config_error("lq_oracle: closed-form benchmark covers scalar state/control");
  }
  const int m_labels = grid.size();
  const int m_noise = sp.dim.m;
  const normalized_graphon ng = normalize(g, grid);
  scalar_source scal(sp, grid);
  for (int u = 0; u < m_labels; ++u) {
    if (scal.at(u, 0.0).lambda <= 0.0) {
      throw config_error("lq_oracle: control weight lambda must be positive");
    }
  }

  const double q_t = sp.q_t(0, 0);
  const double qbar_t = sp.qbar_t(0, 0);
  const double s_t = sp.s_t(0, 0);
  const double eta_term = q_t + qbar_t;

  fbsde_solution sol;
  fbsde_solution::oracle_data od;
  od.grid = grid;
  od.horizon = horizon;

  vec m0(m_labels), v0(m_labels);
  for (int u = 0; u < m_labels; ++u) {
    m0[u] = initial_scalar_moment(mdl.init, grid.midpoint(u), false);
    v0[u] = initial_scalar_moment(mdl.init, grid.midpoint(u), true);
  }

  // terminal offset as a linear map of the terminal means
  auto terminal_psi = [&](const vec& m_term) {
    const vec mubar = ng.rows * m_term / m_labels;
    vec psi_t(m_labels);
    for (int u = 0; u < m_labels; ++u) {
      double acc = -qbar_t * s_t * mubar[u];
      for (int v = 0; v < m_labels; ++v) {
        acc += ng.rows(v, u) / m_labels * qbar_t * s_t * (s_t * mubar[v] - m_term[v]);
      }
      psi_t[u] = acc;
    }
    return psi_t;
  };

  if (horizon <= 0.0) {
    // degenerate horizon: everything collapses to the terminal data
    od.ode_steps = 0;
    od.eta.assign(zu(m_labels), std::vector<double>(1, eta_term));
    const vec psi_t = terminal_psi(m0);
    const vec mubar0 = ng.rows * m0 / m_labels;
    od.psi.assign(zu(m_labels), std::vector<double>(1));
    od.mean.assign(zu(m_labels), std::vector<double>(1));
    od.second.assign(zu(m_labels), std::vector<double>(1));
    od.mubar.assign(zu(m_labels), std::vector<double>(1));
    od.gamma1.assign(zu(m_labels), std::vector<double>(1, 0.0));
    od.gamma0.assign(zu(m_labels), std::vector<double>(1, 0.0));
    double jstar = 0.0;
    for (int u = 0; u < m_labels; ++u) {
      od.psi[zu(u)][0] = psi_t[u];
      od.mean[zu(u)][0] = m0[u];
      od.second[zu(u)][0] = v0[u];
      od.mubar[zu(u)][0] = mubar0[u];
      jstar += 0.5 * q_t * v0[u] +
               0.5 * qbar_t *
                   (v0[u] - 2.0 * s_t * mubar0[u] * m0[u] +
                    s_t * s_t * mubar0[u] * mubar0[u]);
    }
    od.jstar = jstar / m_labels;
    sol.oracle = std::move(od);
    sol.cost_value = sol.oracle->jstar;
    return sol;
  }

  const int steps = std::max(10, ode_steps);
  od.ode_steps = steps;
  const double h = horizon / steps;

  // --- stage 1: backward gain sweep, keeping only eta(0) ------------------
  vec eta0(m_labels);
  for (int u = 0; u < m_labels; ++u) {
    double eta = eta_term;
    double t = horizon;
    const double hh = h / 2.0;
    for (int j = 0; j < 2 * steps; ++j) {
      const lq_scalars& c0 = scal.at(u, t);
      check_eta(eta, c0, t, u);
      const double k1 = eta_rhs(c0, eta);
      const double k2 = eta_rhs(scal.at(u, t - hh / 2.0), eta - hh / 2.0 * k1);
      const double k3 = eta_rhs(scal.at(u, t - hh / 2.0), eta - hh / 2.0 * k2);
      const double k4 = eta_rhs(scal.at(u, t - hh), eta - hh * k3);
      eta -= hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      t -= hh;
    }
    check_eta(eta, scal.at(u, 0.0), 0.0, u);
    eta0[u] = eta;
  }

  // --- stage 2: shooting for the offset initial values --------------------
  // Forward RK4 of (eta, [m; psi]) on M+1 columns: a particular solution and
  // the unit responses to psi(0).  Everything but eta is linear, so the
  // terminal condition reduces to one M x M solve.
  const int cols = m_labels + 1;
  auto eta_step = [&](vec& eta, double t, double step) {
    for (int u = 0; u < m_labels; ++u) {
      const lq_scalars& c0 = scal.at(u, t);
      check_eta(eta[u], c0, t, u);
      const double k1 = eta_rhs(c0, eta[u]);
      const double k2 = eta_rhs(scal.at(u, t + step / 2.0), eta[u] + step / 2.0 * k1);
      const double k3 = eta_rhs(scal.at(u, t + step / 2.0), eta[u] + step / 2.0 * k2);
      const double k4 = eta_rhs(scal.at(u, t + step), eta[u] + step * k3);
      eta[u] += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
  };
  auto eta_at_stage = [&](const vec& eta, double t, double dt_stage) {
    // half-step gain values for the Runge-Kutta stages of the linear system
    vec out = eta;
    eta_step(out, t, dt_stage);
    return out;
  };

  vec psi0;
  {
    mat v_state = mat::Zero(2 * m_labels, cols);
    v_state.col(0).head(m_labels) = m0;
    for (int j = 0; j < m_labels; ++j) v_state(m_labels + j, j + 1) = 1.0;

    vec eta = eta0;
    mat k1, k2, k3, k4, tmp;
    for (int j = 0; j < steps; ++j) {
      const double t = j * h;
      const vec eta_half = eta_at_stage(eta, t, h / 2.0);
      vec eta_full = eta_half;
      eta_step(eta_full, t + h / 2.0, h / 2.0);

      mv_rhs(scal, ng.rows, eta, t, v_state, k1);
      tmp = v_state + h / 2.0 * k1;
      mv_rhs(scal, ng.rows, eta_half, t + h / 2.0, tmp, k2);
      tmp = v_state + h / 2.0 * k2;
      mv_rhs(scal, ng.rows, eta_half, t + h / 2.0, tmp, k3);
      tmp = v_state + h * k3;
      mv_rhs(scal, ng.rows, eta_full, t + h, tmp, k4);
      v_state += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      eta = eta_full;
    }

    // build psi(T) = L m(T) on the basis, then match the propagated state
    mat l_map(m_labels, m_labels);
    for (int jcol = 0; jcol < m_labels; ++jcol) {
      l_map.col(jcol) = terminal_psi(vec::Unit(m_labels, jcol));
    }
    const mat m_term_h = v_state.topRows(m_labels).rightCols(m_labels);
    const mat psi_term_h = v_state.bottomRows(m_labels).rightCols(m_labels);
    const vec m_term_p = v_state.col(0).head(m_labels);
    const vec psi_term_p = v_state.col(0).tail(m_labels);

    const mat lhs = psi_term_h - l_map * m_term_h;
    const vec rhs = l_map * m_term_p - psi_term_p;
    Eigen::FullPivLU<mat> lu(lhs);
    if (!lu.isInvertible()) {
      throw non_convergence("lq_oracle: shooting system is singular");
    }
    psi0 = lu.solve(rhs);
  }

  // --- stage 3: final half-step pass, storing all tables -------------------
  const int half = 2 * steps;
  od.eta.assign(zu(m_labels), std::vector<double>(zu(half + 1)));
  od.psi.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  od.mean.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  od.second.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  od.mubar.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  od.gamma1.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  od.gamma0.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  std::vector<std::vector<double>> ef_table(zu(m_labels),
                                            std::vector<double>(zu(steps + 1)));

  {
    vec eta = eta0;
    mat v_state(2 * m_labels, 1);
    v_state.col(0).head(m_labels) = m0;
    v_state.col(0).tail(m_labels) = psi0;
    vec second = v0;

    auto store = [&](int j_half, const vec& eta_now, const mat& mv, const vec& vv,
                     double t) {
      for (int u = 0; u < m_labels; ++u) od.eta[zu(u)][zu(j_half)] = eta_now[u];
      if (j_half % 2 != 0) return;
      const int j = j_half / 2;
      const vec mubar = ng.rows * mv.col(0).head(m_labels) / m_labels;
      for (int u = 0; u < m_labels; ++u) {
        const lq_scalars& c = scal.at(u, t);
        const double mm = mv(u, 0);
        const double pp = mv(m_labels + u, 0);
        const double g1 = gamma1_of(c, eta_now[u]);
        const double g0 = gamma0_of(c, eta_now[u], pp, mubar[u], true);
        od.psi[zu(u)][zu(j)] = pp;
        od.mean[zu(u)][zu(j)] = mm;
        od.second[zu(u)][zu(j)] = vv[u];
        od.mubar[zu(u)][zu(j)] = mubar[u];
        od.gamma1[zu(u)][zu(j)] = g1;
        od.gamma0[zu(u)][zu(j)] = g0;
        ef_table[zu(u)][zu(j)] = running_cost_mean(c, mm, vv[u], mubar[u], g1, g0);
      }
    };
    store(0, eta, v_state, second, 0.0);

    const double hh = h / 2.0;
    mat k1, k2, k3, k4, tmp;
    vec kv1(m_labels), kv2(m_labels), kv3(m_labels), kv4(m_labels);
    auto second_rhs_all = [&](const vec& eta_now, const mat& mv, const vec& vv,
                              double t, vec& out) {
      const vec mubar = ng.rows * mv.col(0).head(m_labels) / m_labels;
      for (int u = 0; u < m_labels; ++u) {
        out[u] = second_moment_rhs(scal.at(u, t), eta_now[u], mv(u, 0), vv[u],
                                   mubar[u], mv(m_labels + u, 0));
      }
    };
    for (int j = 0; j < half; ++j) {
      const double t = j * hh;
      const vec eta_half = eta_at_stage(eta, t, hh / 2.0);
      vec eta_full = eta_half;
      eta_step(eta_full, t + hh / 2.0, hh / 2.0);

      mv_rhs(scal, ng.rows, eta, t, v_state, k1);
      second_rhs_all(eta, v_state, second, t, kv1);
      tmp = v_state + hh / 2.0 * k1;
      mv_rhs(scal, ng.rows, eta_half, t + hh / 2.0, tmp, k2);
      second_rhs_all(eta_half, tmp, second + hh / 2.0 * kv1, t + hh / 2.0, kv2);
      tmp = v_state + hh / 2.0 * k2;
      mv_rhs(scal, ng.rows, eta_half, t + hh / 2.0, tmp, k3);
      second_rhs_all(eta_half, tmp, second + hh / 2.0 * kv2, t + hh / 2.0, kv3);
      tmp = v_state + hh * k3;
      mv_rhs(scal, ng.rows, eta_full, t + hh, tmp, k4);
      second_rhs_all(eta_full, tmp, second + hh * kv3, t + hh, kv4);

      v_state += hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      second += hh / 6.0 * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4);
      eta = eta_full;
      store(j + 1, eta, v_state, second, (j + 1) * hh);
    }
  }

  // --- optimal cost: Simpson over the running mean plus terminal ----------
  {
    double jstar = 0.0;
    for (int u = 0; u < m_labels; ++u) {
      const auto& ef = ef_table[zu(u)];
      double part = 0.0;
      if (steps % 2 == 0) {
        double acc = ef.front() + ef.back();
        for (int j = 1; j < steps; ++j) acc += (j % 2 == 1 ? 4.0 : 2.0) * ef[zu(j)];
        part = acc * h / 3.0;
      } else {
        double acc = 0.5 * (ef.front() + ef.back());
        for (int j = 1; j < steps; ++j) acc += ef[zu(j)];
        part = acc * h;
      }
      const double mm = od.mean[zu(u)][zu(steps)];
      const double vv = od.second[zu(u)][zu(steps)];
      const double mu = od.mubar[zu(u)][zu(steps)];
      part += 0.5 * q_t * vv +
              0.5 * qbar_t * (vv - 2.0 * s_t * mu * mm + s_t * s_t * mu * mu);
      jstar += part;
    }
    od.jstar = jstar / m_labels;
  }

  // --- stage 4: independent defect verification on the stored tables ------
  {
    double worst = 0.0;
    auto track = [&worst](double defect, double scale) {
      worst = std::max(worst, std::abs(defect) / std::max(1.0, scale));
    };

    auto coupling_at = [&](int u, int j, double t) {
      double acc = 0.0;
      for (int v = 0; v < m_labels; ++v) {
        const lq_scalars& c = scal.at(v, t);
        const double etav = od.eta[zu(v)][zu(2 * j)];
        const double mm = od.mean[zu(v)][zu(j)];
        const double pp = od.psi[zu(v)][zu(j)];
        const double mu = od.mubar[zu(v)][zu(j)];
        const double abar = od.gamma1[zu(v)][zu(j)] * mm + od.gamma0[zu(v)][zu(j)];
        double zsum = 0.0;
        for (int l = 0; l < m_noise; ++l) {
          zsum += c.s2[zu(l)] * etav *
                  (c.s0[zu(l)] + c.s1[zu(l)] * mm + c.s2[zu(l)] * mu +
                   c.s3[zu(l)] * abar);
        }
        acc += ng.rows(v, u) / m_labels *
               (c.b2 * (etav * mm + pp) + zsum + c.qbar * c.s * (c.s * mu - mm));
      }
      return acc;
    };

    const int stride = std::max(1, steps / 10);
    for (int u = 0; u < m_labels; ++u) {
      for (int j = stride; j < steps; j += stride) {
        const double t = j * h;
        const lq_scalars& c = scal.at(u, t);
        const double eta_j = od.eta[zu(u)][zu(2 * j)];
        const double etadot =
            (od.eta[zu(u)][zu(2 * j + 2)] - od.eta[zu(u)][zu(2 * j - 2)]) / (2.0 * h);
        const double psidot =
            (od.psi[zu(u)][zu(j + 1)] - od.psi[zu(u)][zu(j - 1)]) / (2.0 * h);
        const double mdot =
            (od.mean[zu(u)][zu(j + 1)] - od.mean[zu(u)][zu(j - 1)]) / (2.0 * h);
        const double vdot =
            (od.second[zu(u)][zu(j + 1)] - od.second[zu(u)][zu(j - 1)]) / (2.0 * h);
        const double mm = od.mean[zu(u)][zu(j)];
        const double vv = od.second[zu(u)][zu(j)];
        const double mu = od.mubar[zu(u)][zu(j)];
        const double pp = od.psi[zu(u)][zu(j)];
        const double g1 = od.gamma1[zu(u)][zu(j)];
        const double g0 = od.gamma0[zu(u)][zu(j)];
        const double cpl = coupling_at(u, j, t);

        for (double x : {-1.0, 0.0, 1.0}) {
          const double ahat = g1 * x + g0;
          const double yv = eta_j * x + pp;
          const double drift = c.b0 + c.b1 * x + c.b2 * mu + c.b3 * ahat;
          double hx = c.b1 * yv + c.q * x + c.qbar * (x - c.s * mu);
          for (int l = 0; l < m_noise; ++l) {
            const double sig = c.s0[zu(l)] + c.s1[zu(l)] * x + c.s2[zu(l)] * mu +
                               c.s3[zu(l)] * ahat;
            hx += c.s1[zu(l)] * eta_j * sig;
          }
          const double res = etadot * x + psidot + eta_j * drift + hx + cpl;
          track(res, std::abs(etadot) + std::abs(psidot) + std::abs(hx) + 1.0);
        }
        track(mdot - (c.b0 + c.b1 * mm + c.b2 * mu + c.b3 * (g1 * mm + g0)),
              std::abs(mdot));
        track(vdot - second_moment_rhs(c, eta_j, mm, vv, mu, pp), std::abs(vdot));
      }
      track(od.eta[zu(u)][zu(half)] - eta_term, std::abs(eta_term));
      track(od.mean[zu(u)][0] - m0[u], std::abs(m0[u]));
    }
    {
      vec m_term(m_labels);
      for (int u = 0; u < m_labels; ++u) m_term[u] = od.mean[zu(u)][zu(steps)];
      const vec psi_t = terminal_psi(m_term);
      for (int u = 0; u < m_labels; ++u) {
        track(od.psi[zu(u)][zu(steps)] - psi_t[u], std::abs(psi_t[u]));
      }
    }
    od.verification_residual = worst;
    if (worst > 1e-8) {
      throw non_convergence("lq_oracle: verification residual " +
                            std::to_string(worst) + " exceeds 1e-8");
    }
  }

  sol.oracle = std::move(od);
  sol.cost_value = sol.oracle->jstar;
  return sol;
}

oracle_discrete discretize_oracle(const fbsde_solution::oracle_data& od,
                                  const model& mdl, const normalized_graphon& ng,
                                  int steps) {
  if (!mdl.lq.has_value()) {
    throw config_error("discretize_oracle: model carries no linear-quadratic form");
  }
  if (ng.grid.size() != od.grid.size()) {
    throw config_error("discretize_oracle: grid does not match the oracle tables");
  }
  if (od.horizon <= 0.0 || steps < 1) {
    throw config_error("discretize_oracle: need a positive horizon and step count");
  }
  const lq_spec& sp = *mdl.lq;
  const int m_labels = ng.grid.size();
  const int m_noise = sp.dim.m;
  const double dt = od.horizon / steps;
  scalar_source scal(sp, ng.grid);

  oracle_discrete out;
  out.gamma1.assign(zu(m_labels), std::vector<double>(zu(steps)));
  out.gamma0.assign(zu(m_labels), std::vector<double>(zu(steps)));
  out.mean.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));
  out.second.assign(zu(m_labels), std::vector<double>(zu(steps + 1)));

  for (int u = 0; u < m_labels; ++u) {
    out.mean[zu(u)][0] = od.mean[zu(u)][0];
    out.second[zu(u)][0] = od.second[zu(u)][0];
    for (int kk = 0; kk < steps; ++kk) {
      const int idx = od.index_at(kk * dt);
      out.gamma1[zu(u)][zu(kk)] = od.gamma1[zu(u)][zu(idx)];
      out.gamma0[zu(u)][zu(kk)] = od.gamma0[zu(u)][zu(idx)];
    }
  }

  double total = 0.0;
  std::vector<double> m_cur(zu(m_labels)), v_cur(zu(m_labels));
  for (int u = 0; u < m_labels; ++u) {
    m_cur[zu(u)] = out.mean[zu(u)][0];
    v_cur[zu(u)] = out.second[zu(u)][0];
  }
  for (int kk = 0; kk <= steps; ++kk) {
    const double t = kk * dt;
    // neighborhood means of the current discrete state
    std::vector<double> mubar(zu(m_labels), 0.0);
    for (int u = 0; u < m_labels; ++u) {
      double acc = 0.0;
      for (int v = 0; v < m_labels; ++v) acc += ng.rows(u, v) * m_cur[zu(v)];
      mubar[zu(u)] = acc / m_labels;
    }
    if (kk == steps) {
      const double q_t = sp.q_t(0, 0);
      const double qbar_t = sp.qbar_t(0, 0);
      const double s_t = sp.s_t(0, 0);
      for (int u = 0; u < m_labels; ++u) {
        const double mm = m_cur[zu(u)];
        const double vv = v_cur[zu(u)];
        const double mu = mubar[zu(u)];
        total += 0.5 * q_t * vv +
                 0.5 * qbar_t * (vv - 2.0 * s_t * mu * mm + s_t * s_t * mu * mu);
        out.mean[zu(u)][zu(kk)] = mm;
        out.second[zu(u)][zu(kk)] = vv;
      }
      break;
    }
    std::vector<double> m_next(zu(m_labels)), v_next(zu(m_labels));
    for (int u = 0; u < m_labels; ++u) {
      const lq_scalars& c = scal.at(u, t);
      const double g1 = out.gamma1[zu(u)][zu(kk)];
      const double g0 = out.gamma0[zu(u)][zu(kk)];
      const double mm = m_cur[zu(u)];
      const double vv = v_cur[zu(u)];
      const double mu = mubar[zu(u)];
      total += dt * running_cost_mean(c, mm, vv, mu, g1, g0);

      const double c0 = c.b0 + c.b2 * mu + c.b3 * g0;
      const double c1 = c.b1 + c.b3 * g1;
      double vol = 0.0;
      for (int l = 0; l < m_noise; ++l) {
        const double a = c.s0[zu(l)] + c.s2[zu(l)] * mu + c.s3[zu(l)] * g0;
        const double b = c.s1[zu(l)] + c.s3[zu(l)] * g1;
        vol += a * a + 2.0 * a * b * mm + b * b * vv;
      }
      m_next[zu(u)] = mm + dt * (c0 + c1 * mm);
      v_next[zu(u)] = vv + 2.0 * dt * (c0 * mm + c1 * vv) +
                      dt * dt * (c0 * c0 + 2.0 * c0 * c1 * mm + c1 * c1 * vv) +
                      dt * vol;
      out.mean[zu(u)][zu(kk)] = mm;
      out.second[zu(u)][zu(kk)] = vv;
    }
    m_cur = std::move(m_next);
    v_cur = std::move(v_next);
  }
  out.jstar = total / m_labels;
  return out;
}

}  // namespace gmfc
