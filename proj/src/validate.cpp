#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gmfc/model.hpp"
#include "gmfc/rng.hpp"

namespace gmfc {

namespace {

struct probe_state {
  double u = 0.5;
  double t = 0.5;
  vec x, a, y;
  mat z;
  particle_cloud atoms{mat(), std::nullopt};
};

/// Draws a random probe (state, control, adjoint pair, small atom cloud).
probe_state draw_probe(const model& mdl, std::uint64_t seed, int index) {
  const auto [d, m, k] = mdl.dim;
  const double lo = mdl.decl.probe_lo, hi = mdl.decl.probe_hi;
  rng::stream_cursor cur(seed, rng::purpose::validation, 0,
                         static_cast<std::uint64_t>(index));
  auto box = [&] { return lo + (hi - lo) * cur.next_uniform(); };
  probe_state p;
  p.u = cur.next_uniform();
  p.t = cur.next_uniform();
  p.x.resize(d);
  for (int i = 0; i < d; ++i) p.x(i) = box();
  p.a.resize(k);
  for (int i = 0; i < k; ++i) p.a(i) = box();
  p.y.resize(d);
  for (int i = 0; i < d; ++i) p.y(i) = cur.next_normal();
  p.z.resize(d, m);
  for (int i = 0; i < d; ++i) {
    for (int l = 0; l < m; ++l) p.z(i, l) = cur.next_normal();
  }
  const int atoms = 8;
  mat pts(atoms, d);
  for (int r = 0; r < atoms; ++r) {
    for (int i = 0; i < d; ++i) pts(r, i) = box();
  }
  p.atoms = particle_cloud::uniform(std::move(pts));
  return p;
}

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

double rel_err(const vec& got, const vec& want) {
  return (got - want).cwiseAbs().maxCoeff() /
         std::max(1.0, want.cwiseAbs().maxCoeff());
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

double derivative_consistency(const model& mdl, std::uint64_t seed, int count,
                              double step) {
  const auto [d, m, k] = mdl.dim;
  const coefficient_set& cs = mdl.coef;
  double worst = 0.0;
  vec tmp_out(d), fd(d);
  for (int n = 0; n < count; ++n) {
    probe_state p = draw_probe(mdl, seed, n);
    const mu_view mu = mu_view::from_cloud(&p.atoms);

    // State gradient of H against central differences.
    vec gx(d);
    grad_hamiltonian_x(cs, p.u, p.t, p.x, mu, p.y, p.z, p.a, gx);
    for (int i = 0; i < d; ++i) {
      vec xp = p.x, xm = p.x;
      const double h = step * std::max(1.0, std::abs(p.x(i)));
      xp(i) += h;
      xm(i) -= h;
      fd(i) = (hamiltonian(cs, p.u, p.t, xp, mu, p.y, p.z, p.a) -
               hamiltonian(cs, p.u, p.t, xm, mu, p.y, p.z, p.a)) /
              (2.0 * h);
    }
    worst = std::max(worst, rel_err(fd, gx));

    // Control gradient of H.
    vec ga(k), fda(k);
    grad_hamiltonian_alpha(cs, p.u, p.t, p.x, mu, p.y, p.z, p.a, ga);
    for (int i = 0; i < k; ++i) {
      vec ap = p.a, am = p.a;
      const double h = step * std::max(1.0, std::abs(p.a(i)));
      ap(i) += h;
      am(i) -= h;
      fda(i) = (hamiltonian(cs, p.u, p.t, p.x, mu, p.y, p.z, ap) -
                hamiltonian(cs, p.u, p.t, p.x, mu, p.y, p.z, am)) /
               (2.0 * h);
    }
    worst = std::max(worst, rel_err(fda, ga));

    // Terminal cost gradient.
    vec ggx(d), fdg(d);
    cs.g_x(p.u, p.x, mu, ggx);
    for (int i = 0; i < d; ++i) {
      vec xp = p.x, xm = p.x;
      const double h = step * std::max(1.0, std::abs(p.x(i)));
      xp(i) += h;
      xm(i) -= h;
      fdg(i) = (cs.g(p.u, xp, mu) - cs.g(p.u, xm, mu)) / (2.0 * h);
    }
    worst = std::max(worst, rel_err(fdg, ggx));

    // Measure derivative of H: nudging atom j of the cloud by delta in
    // coordinate i changes H by weight_j * (dH/dmu at probe x_j)_i * delta.
    if (cs.has_mu_terms) {
      const int j = n % p.atoms.size();
      const double wj = p.atoms.weight(j);
      vec mdh(d);
      measure_derivative_hamiltonian(cs, p.u, p.t, p.x, mu, p.y, p.z, p.a,
                                     p.atoms.points.row(j).transpose(), mdh);
      for (int i = 0; i < d; ++i) {
        particle_cloud up = p.atoms, dn = p.atoms;
        const double h = step;
        up.points(j, i) += h;
        dn.points(j, i) -= h;
        const mu_view mu_up = mu_view::from_cloud(&up);
        const mu_view mu_dn = mu_view::from_cloud(&dn);
        const double fd_i =
            (hamiltonian(cs, p.u, p.t, p.x, mu_up, p.y, p.z, p.a) -
             hamiltonian(cs, p.u, p.t, p.x, mu_dn, p.y, p.z, p.a)) /
            (2.0 * h);
        worst = std::max(worst, rel_err(fd_i, wj * mdh(i)));
      }
      // Terminal measure derivative through the same identity.
      vec mg(d);
      cs.mu_g(p.u, p.x, mu, p.atoms.points.row(j).transpose(), mg);
      for (int i = 0; i < d; ++i) {
        particle_cloud up = p.atoms, dn = p.atoms;
        up.points(j, i) += step;
        dn.points(j, i) -= step;
        const mu_view mu_up = mu_view::from_cloud(&up);
        const mu_view mu_dn = mu_view::from_cloud(&dn);
        const double fd_i = (cs.g(p.u, p.x, mu_up) - cs.g(p.u, p.x, mu_dn)) /
                            (2.0 * step);
        worst = std::max(worst, rel_err(fd_i, wj * mg(i)));
      }
    }
  }
  return worst;
}

bool validation_report::all_pass() const {
  return std::all_of(items.begin(), items.end(),
                     [](const validation_item& i) { return i.pass; });
}

std::string validation_report::to_json() const {
  nlohmann::ordered_json j;
  j["pass"] = all_pass();
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& it : items) {
    nlohmann::ordered_json e;
    e["assumption"] = it.assumption;
    e["check"] = it.check;
    e["pass"] = it.pass;
    e["detail"] = it.detail;
    arr.push_back(e);
  }
  j["items"] = arr;
  return j.dump(2);
}

validation_report validate_model(const model& mdl, const graphon& g,
                                 const label_grid& grid, std::uint64_t seed) {
  validation_report rep;
  const auto [d, m, k] = mdl.dim;
  const coefficient_set& cs = mdl.coef;

  // Kernel degrees bounded away from zero.
  {
    validation_item it;
    it.assumption = "Assumption 2.4";
    it.check = "kernel degrees positive and bounded";
    try {
      (void)normalize(g, grid);
      const double mdb = min_degree_bound(g, grid);
      it.pass = std::isfinite(mdb);
      it.detail = "sup 1/degree = " + fmt(mdb) + ", bound = " + fmt(g.bound());
    } catch (const error& e) {
      it.pass = false;
      it.detail = e.what();
    }
    rep.items.push_back(it);
  }

  // Initial law measurable / samplable.
  {
    validation_item it;
    it.assumption = "Assumption 3.1(1)";
    it.check = "initial law samplable per label";
    bool ok = true;
    vec x(d);
    for (int i = 0; i < grid.size(); ++i) {
      sample_initial(mdl.init, grid.midpoint(i), seed, 0,
                     static_cast<std::uint64_t>(i), false, x);
      if (!x.allFinite()) ok = false;
    }
    it.pass = ok;
    it.detail = ok ? "finite samples on all grid labels" : "non-finite sample";
    rep.items.push_back(it);
  }

  // Dynamics Lipschitz continuity against declared constants.
  {
    validation_item it;
    it.assumption = "Assumption 3.1(3)";
    it.check = "drift/volatility Lipschitz in state, measure, control";
    double rx = 0.0, rmu = 0.0, ra = 0.0;
    vec b1v(d), b2v(d);
    mat s1v(d, m), s2v(d, m);
    for (int n = 0; n < 64; ++n) {
      probe_state p = draw_probe(mdl, seed + 1, n);
      probe_state q = draw_probe(mdl, seed + 2, n);
      const mu_view mu = mu_view::from_cloud(&p.atoms);
      // State direction.
      cs.b(p.u, p.t, p.x, mu, p.a, b1v);
      cs.b(p.u, p.t, q.x, mu, p.a, b2v);
      cs.sigma(p.u, p.t, p.x, mu, p.a, s1v);
      cs.sigma(p.u, p.t, q.x, mu, p.a, s2v);
      const double dx = (p.x - q.x).norm();
      if (dx > 1e-12) {
        rx = std::max(rx, ((b1v - b2v).norm() + (s1v - s2v).norm()) / dx);
      }
      // Measure direction: translate the cloud (2-Wasserstein distance |c|).
      particle_cloud shifted = p.atoms;
      shifted.points.rowwise() += q.x.transpose();
      const mu_view mu_s = mu_view::from_cloud(&shifted);
      cs.b(p.u, p.t, p.x, mu_s, p.a, b2v);
      cs.sigma(p.u, p.t, p.x, mu_s, p.a, s2v);
      const double dmu = q.x.norm();
      if (dmu > 1e-12) {
        rmu = std::max(rmu, ((b1v - b2v).norm() + (s1v - s2v).norm()) / dmu);
      }
      // Control direction.
      cs.b(p.u, p.t, p.x, mu, q.a, b2v);
      cs.sigma(p.u, p.t, p.x, mu, q.a, s2v);
      cs.b(p.u, p.t, p.x, mu, p.a, b1v);
      cs.sigma(p.u, p.t, p.x, mu, p.a, s1v);
      const double da = (p.a - q.a).norm();
      if (da > 1e-12) {
        ra = std::max(ra, ((b1v - b2v).norm() + (s1v - s2v).norm()) / da);
      }
    }
    const double slack = 1e-9;
    it.pass = rx <= mdl.decl.lipschitz_x + slack && rmu <= mdl.decl.lipschitz_mu + slack &&
              ra <= mdl.decl.lipschitz_a + slack;
    it.detail = "measured (x, mu, a) ratios = (" + fmt(rx) + ", " + fmt(rmu) + ", " +
                fmt(ra) + ") vs declared (" + fmt(mdl.decl.lipschitz_x) + ", " +
                fmt(mdl.decl.lipschitz_mu) + ", " + fmt(mdl.decl.lipschitz_a) + ")";
    rep.items.push_back(it);
  }

  // Initial moments of order 2+eps.
  {
    validation_item it;
    it.assumption = "Assumption 3.1(4)";
    it.check = "initial moment of order 2+eps within declared bound";
    const int samples = 10000;
    double worst = 0.0;
    vec x(d);
    const int labels_checked = std::min(grid.size(), 4);
    for (int li = 0; li < labels_checked; ++li) {
      const int cell = li * grid.size() / labels_checked;
      double acc = 0.0;
      for (int n = 0; n < samples; ++n) {
        sample_initial(mdl.init, grid.midpoint(cell), seed + 3,
                       static_cast<std::uint64_t>(cell), static_cast<std::uint64_t>(n),
                       false, x);
        acc += std::pow(x.norm(), 2.0 + mdl.init.epsilon);
      }
      worst = std::max(worst, acc / samples);
    }
    it.pass = mdl.init.epsilon > 0.0 && std::isfinite(worst) &&
              worst <= mdl.init.moment_bound;
    it.detail = "measured sup E|xi|^(2+eps) ~ " + fmt(worst) + " vs declared bound " +
                fmt(mdl.init.moment_bound) + " (eps = " + fmt(mdl.init.epsilon) + ")";
    rep.items.push_back(it);
  }

  // Differentiability: finite-difference consistency of declared derivatives.
  {
    validation_item it;
    it.assumption = "Assumption 3.1(5)";
    it.check = "coefficient derivatives match finite differences";
    const double worst = derivative_consistency(mdl, seed + 4, 20);
    it.pass = worst <= 1e-4;
    it.detail = "worst relative derivative error = " + fmt(worst);
    rep.items.push_back(it);
  }

  // Cost regularity: differentiable with quadratic growth.
  {
    validation_item it;
    it.assumption = "Assumption 4.1(2)";
    it.check = "running and terminal cost growth";
    double growth = 0.0;
    bool finite = true;
    for (int n = 0; n < 32; ++n) {
      probe_state p = draw_probe(mdl, seed + 5, n);
      const mu_view mu = mu_view::from_cloud(&p.atoms);
      const double fv = cs.f(p.u, p.t, p.x, mu, p.a);
      const double gv = cs.g(p.u, p.x, mu);
      if (!std::isfinite(fv) || !std::isfinite(gv)) finite = false;
      const double denom =
          1.0 + p.x.squaredNorm() + p.a.squaredNorm() + mu.mean().squaredNorm();
      growth = std::max(growth, std::max(std::abs(fv), std::abs(gv)) / denom);
    }
    it.pass = finite;
    it.detail = finite ? "finite costs; growth constant over probe box ~ " + fmt(growth)
                       : "non-finite cost value";
    rep.items.push_back(it);
  }

  // Cost convexity (midpoint test in state and control jointly).
  {
    validation_item it;
    it.assumption = "Assumption 4.1(4)";
    it.check = "cost midpoint convexity in (state, control)";
    double worst = 0.0;
    for (int n = 0; n < 48; ++n) {
      probe_state p = draw_probe(mdl, seed + 6, n);
      probe_state q = draw_probe(mdl, seed + 7, n);
      const mu_view mu = mu_view::from_cloud(&p.atoms);
      const vec xm = 0.5 * (p.x + q.x);
      const vec am = 0.5 * (p.a + q.a);
      const double lhs_f = cs.f(p.u, p.t, xm, mu, am);
      const double rhs_f =
          0.5 * (cs.f(p.u, p.t, p.x, mu, p.a) + cs.f(p.u, p.t, q.x, mu, q.a));
      const double lhs_g = cs.g(p.u, xm, mu);
      const double rhs_g = 0.5 * (cs.g(p.u, p.x, mu) + cs.g(p.u, q.x, mu));
      worst = std::max({worst, lhs_f - rhs_f, lhs_g - rhs_g});
    }
    it.pass = worst <= 1e-9;
    it.detail = "max midpoint violation = " + fmt(worst);
    rep.items.push_back(it);
  }

  // Linear-quadratic structure (when claimed): dynamics affine, costs quadratic.
  if (mdl.lq.has_value()) {
    validation_item it;
    it.assumption = "Assumption 5.1";
    it.check = "dynamics affine in (state, mean, control)";
    double worst = 0.0;
    vec v0(d), v1(d), v2(d);
    for (int n = 0; n < 32; ++n) {
      probe_state p = draw_probe(mdl, seed + 8, n);
      probe_state q = draw_probe(mdl, seed + 9, n);
      const mu_view mu = mu_view::from_cloud(&p.atoms);
      // Second difference of b along a state segment must vanish.
      const vec xm = 0.5 * (p.x + q.x);
      cs.b(p.u, p.t, p.x, mu, p.a, v0);
      cs.b(p.u, p.t, q.x, mu, p.a, v1);
      cs.b(p.u, p.t, xm, mu, p.a, v2);
      worst = std::max(worst, (0.5 * (v0 + v1) - v2).cwiseAbs().maxCoeff());
      const vec am = 0.5 * (p.a + q.a);
      cs.b(p.u, p.t, p.x, mu, p.a, v0);
      cs.b(p.u, p.t, p.x, mu, q.a, v1);
      cs.b(p.u, p.t, p.x, mu, am, v2);
      worst = std::max(worst, (0.5 * (v0 + v1) - v2).cwiseAbs().maxCoeff());
    }
    it.pass = worst <= 1e-9;
    it.detail = "max affinity defect = " + fmt(worst);
    rep.items.push_back(it);
  }

  // Strong convexity of the running cost in the control; terminal convexity.
  {
    validation_item it;
    it.assumption = "Assumption 5.2(3)";
    it.check = "control strong convexity (and terminal cost convexity)";
    double min_curv = std::numeric_limits<double>::infinity();
    const double h = 1e-4;
    for (int n = 0; n < 32; ++n) {
      probe_state p = draw_probe(mdl, seed + 10, n);
      const mu_view mu = mu_view::from_cloud(&p.atoms);
      // Diagonal second differences of f in the control.
      for (int i = 0; i < k; ++i) {
        vec ap = p.a, am = p.a;
        ap(i) += h;
        am(i) -= h;
        const double second =
            (cs.f(p.u, p.t, p.x, mu, ap) - 2.0 * cs.f(p.u, p.t, p.x, mu, p.a) +
             cs.f(p.u, p.t, p.x, mu, am)) /
            (h * h);
        min_curv = std::min(min_curv, 0.5 * second);  // curvature = lambda
      }
    }
    double declared = mdl.decl.convexity_lambda;
    if (mdl.lq.has_value()) declared = mdl.lq->lambda.at(0.5, 0.0)(0, 0);
    const bool terminal_ok = [&] {
      if (!mdl.lq.has_value()) return true;
      Eigen::SelfAdjointEigenSolver<mat> es(mdl.lq->q_t);
      Eigen::SelfAdjointEigenSolver<mat> es2(mdl.lq->qbar_t);
      return es.eigenvalues().minCoeff() >= -1e-12 &&
             es2.eigenvalues().minCoeff() >= -1e-12;
    }();
    it.pass = declared > 0.0 && min_curv >= declared - 1e-3 && terminal_ok;
    it.detail = "measured control curvature >= " + fmt(min_curv) + ", declared lambda = " +
                fmt(declared) + (terminal_ok ? ", terminal weights psd" :
                                               ", terminal weights not psd");
    rep.items.push_back(it);
  }

  // Higher-moment margin used by the finite-system analysis.
  {
    validation_item it;
    it.assumption = "Assumption 6.2";
    it.check = "declared moment margin above two";
    it.pass = mdl.init.epsilon > 0.0 && std::isfinite(mdl.init.moment_bound);
    it.detail = "kappa = " + fmt(mdl.init.epsilon) + ", bound = " +
                fmt(mdl.init.moment_bound);
    rep.items.push_back(it);
  }

  return rep;
}

}  // namespace gmfc
