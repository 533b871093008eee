#include "gmfc/forward.hpp"

#include <cmath>
#include <sstream>

#include "gmfc/parallel.hpp"
#include "gmfc/rng.hpp"

namespace gmfc {

control_profile control_profile::zero(int k_dim) {
  control_profile c;
  c.type = kind::feedback;
  c.feedback = [k_dim](double, int, int, double, const vec&, const mu_view&, vec& out) {
    out.setZero(k_dim);
  };
  return c;
}

control_profile control_profile::from_table(control_table t) {
  control_profile c;
  c.type = kind::open_loop;
  c.table = std::make_shared<const control_table>(std::move(t));
  return c;
}

control_profile control_profile::from_feedback(
    std::function<void(double, int, int, double, const vec&, const mu_view&, vec&)> fn) {
  control_profile c;
  c.type = kind::feedback;
  c.feedback = std::move(fn);
  return c;
}

std::vector<double> sim_config::times() const {
  std::vector<double> t(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) {
    t[static_cast<std::size_t>(k)] = horizon * k / steps;
  }
  return t;
}

mat initial_particles(const model& mdl, double u, int u_index, const sim_config& cfg) {
  mat pts(cfg.particles, mdl.dim.d);
  vec x(mdl.dim.d);
  for (int p = 0; p < cfg.particles; ++p) {
    sample_initial(mdl.init, u, cfg.seed, static_cast<std::uint64_t>(u_index),
                   static_cast<std::uint64_t>(p), false, x);
    pts.row(p) = x.transpose();
  }
  return pts;
}

double brownian_increment(std::uint64_t seed, int u_index, int particle, int step,
                          int comp, double dt) {
  const std::uint64_t strm =
      rng::stream(rng::purpose::brownian, static_cast<std::uint64_t>(u_index),
                  static_cast<std::uint64_t>(particle));
  return std::sqrt(dt) * rng::normal(seed, strm,
                                     rng::counter(static_cast<std::uint64_t>(step),
                                                  static_cast<std::uint64_t>(comp)));
}

namespace {

void evaluate_control(const control_profile& control, double u, int u_index, int step,
                      double t, const vec& x, const mu_view& mu, int particle,
                      vec& out) {
  if (control.type == control_profile::kind::open_loop) {
    out = control.table->row(u_index, step, particle);
  } else {
    control.feedback(u, u_index, step, t, x, mu, out);
  }
}

[[noreturn]] void throw_non_finite(int label, int particle, int step) {
  std::ostringstream os;
  os << "simulate_label: non-finite state at label " << label << ", particle "
     << particle << ", step " << step;
  throw non_finite_state(os.str());
}

/// Moment-matched shrinkage of `fresh` toward `old_cloud`: the result has
/// mean and componentwise variance theta * fresh + (1 - theta) * old.
particle_cloud damp_cloud(const particle_cloud& fresh, const particle_cloud& old_cloud,
                          double theta) {
  const vec m_new = moments(fresh, 1.0);
  const vec m_old = moments(old_cloud, 1.0);
  const vec m2_new = moments(fresh, 2.0);
  const vec m2_old = moments(old_cloud, 2.0);
  const int d = fresh.dim();
  vec mean_t(d), scale(d);
  for (int i = 0; i < d; ++i) {
    const double var_new = std::max(0.0, m2_new(i) - m_new(i) * m_new(i));
    const double var_old = std::max(0.0, m2_old(i) - m_old(i) * m_old(i));
    const double var_t = theta * var_new + (1.0 - theta) * var_old;
    mean_t(i) = theta * m_new(i) + (1.0 - theta) * m_old(i);
    scale(i) = var_new > 1e-16 ? std::sqrt(var_t / var_new) : 1.0;
  }
  particle_cloud out = fresh;
  for (int p = 0; p < out.size(); ++p) {
    for (int i = 0; i < d; ++i) {
      out.points(p, i) = mean_t(i) + scale(i) * (fresh.points(p, i) - m_new(i));
    }
  }
  return out;
}

}  // namespace

std::vector<particle_cloud> simulate_label(const model& mdl,
                                           const control_profile& control,
                                           const measure_flow& frozen,
                                           const normalized_graphon& ng, int label,
                                           const sim_config& cfg) {
  const auto [d, m, k] = mdl.dim;
  const double dt = cfg.dt();
  const double u = ng.grid.midpoint(label);
  const Eigen::VectorXd w = neighborhood_weights(ng, label);

  std::vector<particle_cloud> path;
  path.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  path.push_back(particle_cloud::uniform(initial_particles(mdl, u, label, cfg)));

  vec x(d), a(k), bv(d);
  mat sv(d, m);
  for (int step = 0; step < cfg.steps; ++step) {
    const double t = cfg.horizon * step / cfg.steps;
    const mu_view mu = mu_view::from_mixture(&frozen, w, step);
    const mat& prev = path.back().points;
    mat next(cfg.particles, d);
    for (int p = 0; p < cfg.particles; ++p) {
      x = prev.row(p).transpose();
      evaluate_control(control, u, label, step, t, x, mu, p, a);
      mdl.coef.b(u, t, x, mu, a, bv);
      mdl.coef.sigma(u, t, x, mu, a, sv);
      x.noalias() += dt * bv;
      for (int l = 0; l < m; ++l) {
        x.noalias() += sv.col(l) * brownian_increment(cfg.seed, label, p, step, l, dt);
      }
      if (!x.allFinite()) throw_non_finite(label, p, step);
      next.row(p) = x.transpose();
    }
    path.push_back(particle_cloud::uniform(std::move(next)));
  }
  return path;
}

std::pair<measure_flow, picard_info> picard_fixed_point(const model& mdl,
                                                        const control_profile& control,
                                                        const normalized_graphon& ng,
                                                        const sim_config& cfg) {
  if (cfg.labels != ng.grid.size()) {
    throw grid_mismatch("picard_fixed_point: config labels != kernel grid size");
  }
  if (!(cfg.damping > 0.0 && cfg.damping <= 1.0)) {
    throw config_error("picard_fixed_point: damping must lie in (0,1]");
  }
  const int m_labels = cfg.labels;

  // Start from the constant-in-time flow of initial clouds.
  measure_flow flow{ng.grid, cfg.times(), {}};
  flow.clouds.resize(static_cast<std::size_t>(m_labels));
  for (int i = 0; i < m_labels; ++i) {
    particle_cloud init = particle_cloud::uniform(
        initial_particles(mdl, ng.grid.midpoint(i), i, cfg));
    flow.clouds[static_cast<std::size_t>(i)].assign(
        static_cast<std::size_t>(cfg.steps) + 1, init);
  }

  picard_info info;
  for (int iter = 1; iter <= cfg.picard_max; ++iter) {
    std::vector<std::vector<particle_cloud>> fresh(
        static_cast<std::size_t>(m_labels));
    parallel::for_each_index(static_cast<std::size_t>(m_labels), [&](std::size_t i) {
      fresh[i] = simulate_label(mdl, control, flow, ng, static_cast<int>(i), cfg);
    });
    if (cfg.damping < 1.0) {
      for (int i = 0; i < m_labels; ++i) {
        for (std::size_t t = 0; t < fresh[static_cast<std::size_t>(i)].size(); ++t) {
          fresh[static_cast<std::size_t>(i)][t] =
              damp_cloud(fresh[static_cast<std::size_t>(i)][t],
                         flow.clouds[static_cast<std::size_t>(i)][t], cfg.damping);
        }
      }
    }
    double resid = 0.0;
    for (int i = 0; i < m_labels; ++i) {
      resid = std::max(
          resid, wasserstein2(fresh[static_cast<std::size_t>(i)].back(),
                              flow.clouds[static_cast<std::size_t>(i)].back(),
                              rng::derive_seed(cfg.seed, 0x5732, static_cast<std::uint64_t>(i))));
    }
    flow.clouds = std::move(fresh);
    info.iterations = iter;
    info.residuals.push_back(resid);
    if (!std::isfinite(resid) ||
        (info.residuals.size() >= 3 && resid > 1e3 * (info.residuals.front() + 1.0))) {
      std::ostringstream os;
      os << "picard_fixed_point: residual " << resid << " diverging at sweep " << iter;
      throw picard_divergence(os.str());
    }
    if (resid <= cfg.picard_tol) break;
    if (iter == cfg.picard_max) {
      std::ostringstream os;
      os << "picard_fixed_point: residual " << resid << " above tolerance "
         << cfg.picard_tol << " after " << cfg.picard_max << " sweeps";
      throw picard_divergence(os.str());
    }
  }

  // Sanity ceiling on moment growth (logged, not fatal).
  double sup_m2 = 0.0;
  for (const auto& label_clouds : flow.clouds) {
    for (const auto& c : label_clouds) {
      sup_m2 = std::max(sup_m2, moments(c, 2.0).sum());
    }
  }
  double init_m2 = 0.0;
  for (const auto& label_clouds : flow.clouds) {
    init_m2 = std::max(init_m2, moments(label_clouds.front(), 2.0).sum());
  }
  const double lip = mdl.decl.lipschitz_x + mdl.decl.lipschitz_mu;
  info.sup_second_moment = sup_m2;
  info.moment_ceiling =
      10.0 * (1.0 + init_m2 + cfg.horizon) *
      std::exp((2.0 * lip + lip * lip + 1.0) * cfg.horizon);
  info.moment_ceiling_ok = sup_m2 <= info.moment_ceiling;
  return {std::move(flow), std::move(info)};
}

std::vector<vec> cost_samples(const model& mdl, const control_profile& control,
                              const measure_flow& flow, const normalized_graphon& ng,
                              const sim_config& cfg) {
  flow.validate();
  const auto [d, m, k] = mdl.dim;
  (void)m;
  const double dt = cfg.dt();
  const int m_labels = flow.labels();
  const int particles = flow.clouds[0][0].size();

  std::vector<vec> out(static_cast<std::size_t>(m_labels));
  vec x(d), a(k);
  for (int i = 0; i < m_labels; ++i) {
    const double u = ng.grid.midpoint(i);
    const Eigen::VectorXd w = neighborhood_weights(ng, i);
    vec& accum = out[static_cast<std::size_t>(i)];
    accum = vec::Zero(particles);
    for (int step = 0; step < cfg.steps; ++step) {
      const double t = cfg.horizon * step / cfg.steps;
      const mu_view mu = mu_view::from_mixture(&flow, w, step);
      const mat& pts = flow.clouds[static_cast<std::size_t>(i)]
                                  [static_cast<std::size_t>(step)].points;
      for (int p = 0; p < particles; ++p) {
        x = pts.row(p).transpose();
        evaluate_control(control, u, i, step, t, x, mu, p, a);
        accum[p] += dt * mdl.coef.f(u, t, x, mu, a);
      }
    }
    const mu_view mu_t = mu_view::from_mixture(&flow, w, cfg.steps);
    const mat& pts = flow.clouds[static_cast<std::size_t>(i)].back().points;
    for (int p = 0; p < particles; ++p) {
      x = pts.row(p).transpose();
      accum[p] += mdl.coef.g(u, x, mu_t);
    }
  }
  return out;
}

cost_estimate cost(const model& mdl, const control_profile& control,
                   const measure_flow& flow, const normalized_graphon& ng,
                   const sim_config& cfg) {
  const std::vector<vec> samples = cost_samples(mdl, control, flow, ng, cfg);
  const int m_labels = static_cast<int>(samples.size());
  cost_estimate est;
  double se2 = 0.0;
  for (const vec& accum : samples) {
    const int particles = static_cast<int>(accum.size());
    const double mean = accum.mean();
    double var = 0.0;
    for (int p = 0; p < particles; ++p) {
      var += (accum[p] - mean) * (accum[p] - mean);
    }
    var /= std::max(1, particles - 1);
    est.value += mean;
    se2 += var / particles;
  }
  est.value /= m_labels;
  est.stderr_value = std::sqrt(se2) / m_labels;
  return est;
}

}  // namespace gmfc
