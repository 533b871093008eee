#include "gmfc/model.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gmfc/rng.hpp"

namespace gmfc {

namespace {

// x' A y without temporaries (dimensions are desk-scale).
double bilinear(const mat& a, const vec& x, const vec& y) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) row += a(i, j) * y(j);
    acc += x(i) * row;
  }
  return acc;
}

bool nonzero(const mat& m) { return m.cwiseAbs().maxCoeff() > 0.0; }

void require(bool cond, const char* what) {
  if (!cond) throw shape_mismatch(what);
}

}  // namespace

// --- initial sampling -----------------------------------------------------

void sample_initial(const initial_law& law, double u_label, std::uint64_t seed,
                    std::uint64_t unit, std::uint64_t member, bool antithetic,
                    vec& out) {
  const std::uint64_t strm = rng::stream(rng::purpose::initial, unit, member);
  double uniforms[16];
  if (law.d > 16) throw config_error("sample_initial: dimension above 16 unsupported");
  for (int i = 0; i < law.d; ++i) {
    const double u = rng::uniform01(seed, strm, rng::counter(0, static_cast<std::uint64_t>(i)));
    uniforms[i] = antithetic ? 1.0 - u : u;
  }
  out.resize(law.d);
  law.quantile(u_label, uniforms, out);
}

// --- lq_coef --------------------------------------------------------------

lq_coef lq_coef::constant(mat v) {
  lq_coef c;
  c.label_edges_ = {0.0, 1.0};
  c.blocks_.push_back(block{{0.0}, {std::move(v)}});
  return c;
}

lq_coef lq_coef::time_table(std::vector<double> edges, std::vector<mat> values) {
  if (edges.empty() || edges.front() != 0.0 || edges.size() != values.size()) {
    throw config_error("lq_coef: time table needs edges starting at 0, one per value");
  }
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) {
      throw config_error("lq_coef: time edges must increase");
    }
  }
  lq_coef c;
  c.label_edges_ = {0.0, 1.0};
  c.blocks_.push_back(block{std::move(edges), std::move(values)});
  return c;
}

lq_coef lq_coef::label_blocks(std::vector<double> edges, std::vector<lq_coef> parts) {
  if (edges.size() != parts.size() + 1 || edges.front() != 0.0 || edges.back() != 1.0) {
    throw config_error("lq_coef: label edges must run from 0 to 1, one block per gap");
  }
  lq_coef c;
  c.label_edges_ = std::move(edges);
  for (auto& p : parts) {
    if (p.blocks_.size() != 1) {
      throw config_error("lq_coef: nested label blocks are not supported");
    }
    c.blocks_.push_back(std::move(p.blocks_[0]));
  }
  return c;
}

const mat& lq_coef::at(double u, double t) const {
  if (blocks_.empty()) throw config_error("lq_coef: empty coefficient");
  std::size_t bi = 0;
  if (blocks_.size() > 1) {
    // Half-open blocks [e_i, e_{i+1}), last block closed at 1.
    while (bi + 1 < blocks_.size() && u >= label_edges_[bi + 1]) ++bi;
  }
  const block& b = blocks_[bi];
  std::size_t ti = 0;
  if (b.values.size() > 1) {
    while (ti + 1 < b.values.size() && t >= b.time_edges[ti + 1]) ++ti;
  }
  return b.values[ti];
}

bool lq_coef::time_dependent() const {
  for (const auto& b : blocks_) {
    if (b.values.size() > 1) return true;
  }
  return false;
}

void lq_spec::check_shapes() const {
  const auto [d, m, k] = dim;
  if (d < 1 || m < 1 || k < 1) throw shape_mismatch("lq_spec: dims must be positive");
  auto probe = [](const lq_coef& c) -> const mat& { return c.at(0.0, 0.0); };
  require(probe(b0).rows() == d && probe(b0).cols() == 1, "lq_spec: b0 must be d x 1");
  require(probe(b1).rows() == d && probe(b1).cols() == d, "lq_spec: b1 must be d x d");
  require(probe(b2).rows() == d && probe(b2).cols() == d, "lq_spec: b2 must be d x d");
  require(probe(b3).rows() == d && probe(b3).cols() == k, "lq_spec: b3 must be d x k");
  require(static_cast<int>(vol.size()) == m, "lq_spec: need one volatility column per noise");
  for (const auto& c : vol) {
    require(probe(c.s0).rows() == d && probe(c.s0).cols() == 1, "lq_spec: s0 must be d x 1");
    require(probe(c.s1).rows() == d && probe(c.s1).cols() == d, "lq_spec: s1 must be d x d");
    require(probe(c.s2).rows() == d && probe(c.s2).cols() == d, "lq_spec: s2 must be d x d");
    require(probe(c.s3).rows() == d && probe(c.s3).cols() == k, "lq_spec: s3 must be d x k");
  }
  require(probe(q).rows() == d && probe(q).cols() == d, "lq_spec: q must be d x d");
  require(probe(qbar).rows() == d && probe(qbar).cols() == d, "lq_spec: qbar must be d x d");
  require(probe(s).rows() == d && probe(s).cols() == d, "lq_spec: s must be d x d");
  require(probe(lambda).rows() == 1 && probe(lambda).cols() == 1,
          "lq_spec: lambda must be scalar");
  require(q_t.rows() == d && q_t.cols() == d, "lq_spec: qT must be d x d");
  require(qbar_t.rows() == d && qbar_t.cols() == d, "lq_spec: qbarT must be d x d");
  require(s_t.rows() == d && s_t.cols() == d, "lq_spec: sT must be d x d");
}

// --- LQ -> generic evaluators ---------------------------------------------

model lq_to_model(std::string name, const lq_spec& spec, initial_law init,
                  validation_decl decl) {
  spec.check_shapes();
  auto sp = std::make_shared<const lq_spec>(spec);
  const auto [d, m, k] = sp->dim;

  coefficient_set cs;
  cs.dim = sp->dim;

  cs.b = [sp](double u, double t, const vec& x, const mu_view& mu, const vec& a,
              vec& out) {
    out = sp->b0.at(u, t).col(0);
    out.noalias() += sp->b1.at(u, t) * x;
    out.noalias() += sp->b2.at(u, t) * mu.mean();
    out.noalias() += sp->b3.at(u, t) * a;
  };
  cs.sigma = [sp, d = d, m = m](double u, double t, const vec& x, const mu_view& mu,
                                const vec& a, mat& out) {
    out.resize(d, m);
    for (int l = 0; l < m; ++l) {
      const auto& c = sp->vol[static_cast<std::size_t>(l)];
      out.col(l) = c.s0.at(u, t).col(0);
      out.col(l).noalias() += c.s1.at(u, t) * x;
      out.col(l).noalias() += c.s2.at(u, t) * mu.mean();
      out.col(l).noalias() += c.s3.at(u, t) * a;
    }
  };
  cs.f = [sp](double u, double t, const vec& x, const mu_view& mu, const vec& a) {
    thread_local vec r;
    r = x;
    r.noalias() -= sp->s.at(u, t) * mu.mean();
    return 0.5 * bilinear(sp->q.at(u, t), x, x) +
           0.5 * bilinear(sp->qbar.at(u, t), r, r) +
           sp->lambda.at(u, t)(0, 0) * a.squaredNorm();
  };
  cs.g = [sp](double u, const vec& x, const mu_view& mu) {
    (void)u;
    thread_local vec r;
    r = x;
    r.noalias() -= sp->s_t * mu.mean();
    return 0.5 * bilinear(sp->q_t, x, x) + 0.5 * bilinear(sp->qbar_t, r, r);
  };

  cs.b_x = [sp](double u, double t, const vec&, const mu_view&, const vec&, mat& out) {
    out = sp->b1.at(u, t);
  };
  cs.b_a = [sp](double u, double t, const vec&, const mu_view&, const vec&, mat& out) {
    out = sp->b3.at(u, t);
  };
  cs.sigma_x_contract = [sp, d = d, m = m](double u, double t, const vec&,
                                           const mu_view&, const vec&, const mat& z,
                                           vec& out) {
    out.setZero(d);
    for (int l = 0; l < m; ++l) {
      out.noalias() +=
          sp->vol[static_cast<std::size_t>(l)].s1.at(u, t).transpose() * z.col(l);
    }
  };
  cs.sigma_a_contract = [sp, k = k, m = m](double u, double t, const vec&,
                                           const mu_view&, const vec&, const mat& z,
                                           vec& out) {
    out.setZero(k);
    for (int l = 0; l < m; ++l) {
      out.noalias() +=
          sp->vol[static_cast<std::size_t>(l)].s3.at(u, t).transpose() * z.col(l);
    }
  };
  cs.f_x = [sp](double u, double t, const vec& x, const mu_view& mu, const vec&,
                vec& out) {
    thread_local vec r;
    r = x;
    r.noalias() -= sp->s.at(u, t) * mu.mean();
    out.noalias() = sp->q.at(u, t) * x;
    out.noalias() += sp->qbar.at(u, t) * r;
  };
  cs.f_a = [sp](double u, double t, const vec&, const mu_view&, const vec& a, vec& out) {
    out = 2.0 * sp->lambda.at(u, t)(0, 0) * a;
  };
  cs.g_x = [sp](double u, const vec& x, const mu_view& mu, vec& out) {
    (void)u;
    thread_local vec r;
    r = x;
    r.noalias() -= sp->s_t * mu.mean();
    out.noalias() = sp->q_t * x;
    out.noalias() += sp->qbar_t * r;
  };

  cs.mu_b = [sp](double u, double t, const vec&, const mu_view&, const vec&, const vec&,
                 mat& out) { out = sp->b2.at(u, t); };
  cs.mu_sigma_contract = [sp, d = d, m = m](double u, double t, const vec&,
                                            const mu_view&, const vec&, const vec&,
                                            const mat& z, vec& out) {
    out.setZero(d);
    for (int l = 0; l < m; ++l) {
      out.noalias() +=
          sp->vol[static_cast<std::size_t>(l)].s2.at(u, t).transpose() * z.col(l);
    }
  };
  cs.mu_f = [sp](double u, double t, const vec& x, const mu_view& mu, const vec&,
                 const vec&, vec& out) {
    thread_local vec r;
    r = x;
    r.noalias() -= sp->s.at(u, t) * mu.mean();
    out.noalias() = -sp->s.at(u, t).transpose() * (sp->qbar.at(u, t) * r);
  };
  cs.mu_g = [sp](double u, const vec& x, const mu_view& mu, const vec&, vec& out) {
    (void)u;
    thread_local vec r;
    r = x;
    r.noalias() -= sp->s_t * mu.mean();
    out.noalias() = -sp->s_t.transpose() * (sp->qbar_t * r);
  };

  // A model is measure-coupled when any mean-field term survives.
  bool mu_terms = false;
  auto scan = [&](const lq_coef& c) {
    for (double uu : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      for (double tt : {0.0, 0.33, 0.66, 1.0, 10.0}) {
        if (nonzero(c.at(uu, tt))) return true;
      }
    }
    return false;
  };
  mu_terms |= scan(sp->b2);
  for (const auto& c : sp->vol) mu_terms |= scan(c.s2);
  mu_terms |= scan(sp->qbar) && scan(sp->s);
  mu_terms |= nonzero(sp->qbar_t) && nonzero(sp->s_t);
  cs.has_mu_terms = mu_terms;
  cs.mu_probe_affine = true;
  // All interactions run through the neighborhood mean, so the measure
  // derivatives are constant in the probe point.
  cs.mu_probe_const = true;

  model mdl;
  mdl.name = std::move(name);
  mdl.dim = sp->dim;
  mdl.coef = std::move(cs);
  mdl.lq = spec;
  mdl.init = std::move(init);
  mdl.decl = decl;
  return mdl;
}

// --- Hamiltonian calculus -------------------------------------------------

namespace {
void check_hamiltonian_shapes(const coefficient_set& cs, const vec& x, const vec& y,
                              const mat& z, const vec& a) {
  const auto [d, m, k] = cs.dim;
  if (x.size() != d) throw shape_mismatch("hamiltonian: state size != d");
  if (y.size() != d) throw shape_mismatch("hamiltonian: adjoint size != d");
  if (z.rows() != d || z.cols() != m) throw shape_mismatch("hamiltonian: z must be d x m");
  if (a.size() != k) throw shape_mismatch("hamiltonian: control size != k");
}
}  // namespace

double hamiltonian(const coefficient_set& cs, double u, double t, const vec& x,
                   const mu_view& mu, const vec& y, const mat& z, const vec& a) {
  check_hamiltonian_shapes(cs, x, y, z, a);
  thread_local vec bv;
  thread_local mat sv;
  cs.b(u, t, x, mu, a, bv);
  cs.sigma(u, t, x, mu, a, sv);
  return bv.dot(y) + sv.cwiseProduct(z).sum() + cs.f(u, t, x, mu, a);
}

void grad_hamiltonian_x(const coefficient_set& cs, double u, double t, const vec& x,
                        const mu_view& mu, const vec& y, const mat& z, const vec& a,
                        vec& out) {
  check_hamiltonian_shapes(cs, x, y, z, a);
  thread_local mat bx;
  thread_local vec tmp;
  cs.b_x(u, t, x, mu, a, bx);
  out.noalias() = bx.transpose() * y;
  cs.sigma_x_contract(u, t, x, mu, a, z, tmp);
  out += tmp;
  cs.f_x(u, t, x, mu, a, tmp);
  out += tmp;
}

void grad_hamiltonian_alpha(const coefficient_set& cs, double u, double t, const vec& x,
                            const mu_view& mu, const vec& y, const mat& z, const vec& a,
                            vec& out) {
  check_hamiltonian_shapes(cs, x, y, z, a);
  thread_local mat ba;
  thread_local vec tmp;
  cs.b_a(u, t, x, mu, a, ba);
  out.noalias() = ba.transpose() * y;
  cs.sigma_a_contract(u, t, x, mu, a, z, tmp);
  out += tmp;
  cs.f_a(u, t, x, mu, a, tmp);
  out += tmp;
}

void measure_derivative_hamiltonian(const coefficient_set& cs, double u, double t,
                                    const vec& x, const mu_view& mu, const vec& y,
                                    const mat& z, const vec& a, const vec& xp,
                                    vec& out) {
  check_hamiltonian_shapes(cs, x, y, z, a);
  thread_local mat mb;
  thread_local vec tmp;
  cs.mu_b(u, t, x, mu, a, xp, mb);
  out.noalias() = mb.transpose() * y;
  cs.mu_sigma_contract(u, t, x, mu, a, xp, z, tmp);
  out += tmp;
  cs.mu_f(u, t, x, mu, a, xp, tmp);
  out += tmp;
}

vec argmin_hamiltonian(const model& mdl, double u, double t, const vec& x,
                       const mu_view& mu, const vec& y, const mat& z,
                       const argmin_options& opts) {
  const auto [d, m, k] = mdl.dim;
  if (mdl.lq.has_value() && !opts.force_newton) {
    const lq_spec& sp = *mdl.lq;
    vec num = sp.b3.at(u, t).transpose() * y;
    for (int l = 0; l < m; ++l) {
      num.noalias() += sp.vol[static_cast<std::size_t>(l)].s3.at(u, t).transpose() *
                       z.col(l);
    }
    return -num / (2.0 * sp.lambda.at(u, t)(0, 0));
  }

  // Damped Newton on the control gradient from a zero initial point.
  vec a = vec::Zero(k);
  vec grad(k), gp(k), gm(k), step(k);
  mat hess(k, k);
  const double h = 1e-6;
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    grad_hamiltonian_alpha(mdl.coef, u, t, x, mu, y, z, a, grad);
    if (grad.norm() <= opts.tol) return a;
    for (int j = 0; j < k; ++j) {
      vec ap = a, am = a;
      ap(j) += h;
      am(j) -= h;
      grad_hamiltonian_alpha(mdl.coef, u, t, x, mu, y, z, ap, gp);
      grad_hamiltonian_alpha(mdl.coef, u, t, x, mu, y, z, am, gm);
      hess.col(j) = (gp - gm) / (2.0 * h);
    }
    hess = 0.5 * (hess + hess.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<mat> es(hess);
    const double scale = std::max(1.0, hess.cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < -1e-8 * scale) {
      std::ostringstream os;
      os << "argmin_hamiltonian: control Hessian has eigenvalue "
         << es.eigenvalues().minCoeff() << " at t=" << t << ", u=" << u;
      throw non_convex_detected(os.str());
    }
    if (es.eigenvalues().minCoeff() <= 1e-14 * scale) {
      throw non_convergence("argmin_hamiltonian: singular control Hessian");
    }
    step = -es.eigenvectors() *
           (es.eigenvalues().cwiseInverse().asDiagonal() *
            (es.eigenvectors().transpose() * grad));
    // Backtracking on the gradient norm.
    double tau = 1.0;
    const double g0 = grad.norm();
    while (tau > 1e-6) {
      vec trial = a + tau * step;
      grad_hamiltonian_alpha(mdl.coef, u, t, x, mu, y, z, trial, gp);
      if (gp.norm() <= (1.0 - 0.25 * tau) * g0) {
        a = std::move(trial);
        break;
      }
      tau *= 0.5;
    }
    if (tau <= 1e-6) {
      throw non_convergence("argmin_hamiltonian: line search stalled");
    }
  }
  throw non_convergence("argmin_hamiltonian: no convergence within iteration budget");
}

// --- JSON -----------------------------------------------------------------

namespace {

mat json_matrix(const nlohmann::json& j, int rows, int cols, const std::string& key) {
  if (j.is_number()) {
    const double v = j.get<double>();
    if (rows == cols && rows > 1) return v * mat::Identity(rows, cols);
    return mat::Constant(rows, cols, v);
  }
  if (j.is_array()) {
    if (static_cast<int>(j.size()) != rows) {
      throw shape_mismatch("lq json: '" + key + "' has wrong row count");
    }
    mat out(rows, cols);
    for (int i = 0; i < rows; ++i) {
      if (!j[static_cast<std::size_t>(i)].is_array() ||
          static_cast<int>(j[static_cast<std::size_t>(i)].size()) != cols) {
        throw shape_mismatch("lq json: '" + key + "' has wrong column count");
      }
      for (int c = 0; c < cols; ++c) {
        out(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]
                        .get<double>();
      }
    }
    return out;
  }
  throw config_error("lq json: '" + key + "' must be a number or matrix");
}

lq_coef json_coef(const nlohmann::json& j, int rows, int cols, const std::string& key) {
  if (j.is_object() && j.contains("blocks")) {
    std::vector<double> edges{0.0};
    std::vector<lq_coef> parts;
    for (const auto& blk : j.at("blocks")) {
      const auto range = blk.at("range");
      if (std::abs(range[0].get<double>() - edges.back()) > 1e-12) {
        throw config_error("lq json: '" + key + "' label blocks must tile [0,1]");
      }
      edges.push_back(range[1].get<double>());
      parts.push_back(json_coef(blk.at("value"), rows, cols, key));
    }
    if (std::abs(edges.back() - 1.0) > 1e-12) {
      throw config_error("lq json: '" + key + "' label blocks must end at 1");
    }
    edges.back() = 1.0;
    return lq_coef::label_blocks(std::move(edges), std::move(parts));
  }
  if (j.is_object() && j.contains("times")) {
    std::vector<double> edges = j.at("times").get<std::vector<double>>();
    std::vector<mat> values;
    for (const auto& v : j.at("values")) values.push_back(json_matrix(v, rows, cols, key));
    return lq_coef::time_table(std::move(edges), std::move(values));
  }
  return lq_coef::constant(json_matrix(j, rows, cols, key));
}

initial_law json_initial(const nlohmann::json& j, int d) {
  initial_law law;
  law.d = d;
  struct segment {
    double lo, hi;
    std::string type;
    vec mean, scale;
  };
  auto parse_seg = [d](const nlohmann::json& s, double lo, double hi) {
    segment seg;
    seg.lo = lo;
    seg.hi = hi;
    seg.type = s.value("type", "gaussian");
    auto get_vec = [&](const char* key, double fallback) {
      if (!s.contains(key)) return vec::Constant(d, fallback).eval();
      const auto& v = s.at(key);
      if (v.is_number()) return vec::Constant(d, v.get<double>()).eval();
      vec out(d);
      for (int i = 0; i < d; ++i) out(i) = v[static_cast<std::size_t>(i)].get<double>();
      return out;
    };
    if (seg.type == "gaussian") {
      seg.mean = get_vec("mean", 0.0);
      seg.scale = get_vec("std", 1.0);
    } else if (seg.type == "uniform") {
      seg.mean = get_vec("lo", -1.0);
      seg.scale = get_vec("hi", 1.0);
    } else {
      throw config_error("initial law: unknown type '" + seg.type + "'");
    }
    return seg;
  };
  auto segs = std::make_shared<std::vector<segment>>();
  if (j.contains("blocks")) {
    double edge = 0.0;
    for (const auto& blk : j.at("blocks")) {
      const auto range = blk.at("range");
      segs->push_back(parse_seg(blk, range[0].get<double>(), range[1].get<double>()));
      if (std::abs(range[0].get<double>() - edge) > 1e-12) {
        throw config_error("initial law: blocks must tile [0,1]");
      }
      edge = range[1].get<double>();
    }
    if (std::abs(edge - 1.0) > 1e-12) {
      throw config_error("initial law: blocks must end at 1");
    }
  } else {
    segs->push_back(parse_seg(j, 0.0, 1.0));
  }
  law.quantile = [segs](double u, const double* uniforms, vec& out) {
    const segment* pick = &segs->back();
    for (const auto& s : *segs) {
      if (u <= s.hi || &s == &segs->back()) {
        pick = &s;
        break;
      }
    }
    for (int i = 0; i < out.size(); ++i) {
      if (pick->type == "gaussian") {
        out(i) = pick->mean(i) + pick->scale(i) * rng::normal_quantile(uniforms[i]);
      } else {
        out(i) = pick->mean(i) + (pick->scale(i) - pick->mean(i)) * uniforms[i];
      }
    }
  };
  auto pick_seg = [segs](double u) {
    const segment* pick = &segs->back();
    for (const auto& s : *segs) {
      if (u <= s.hi || &s == &segs->back()) {
        pick = &s;
        break;
      }
    }
    return pick;
  };
  law.mean = [pick_seg](double u, vec& out) {
    const segment* s = pick_seg(u);
    for (int i = 0; i < out.size(); ++i) {
      out(i) = s->type == "gaussian" ? s->mean(i) : 0.5 * (s->mean(i) + s->scale(i));
    }
  };
  law.second_moment = [pick_seg](double u, vec& out) {
    const segment* s = pick_seg(u);
    for (int i = 0; i < out.size(); ++i) {
      if (s->type == "gaussian") {
        out(i) = s->mean(i) * s->mean(i) + s->scale(i) * s->scale(i);
      } else {
        const double lo = s->mean(i);
        const double hi = s->scale(i);
        out(i) = (lo * lo + lo * hi + hi * hi) / 3.0;
      }
    }
  };
  law.epsilon = j.value("epsilon", 2.0);
  if (j.contains("moment_bound")) {
    law.moment_bound = j.at("moment_bound").get<double>();
  } else {
    // Generous analytic envelope: E|xi_i|^{2+eps} <= 3 (|m| + 3 s)^{2+eps}.
    double worst = 0.0;
    for (const auto& s : *segs) {
      for (int i = 0; i < d; ++i) {
        const double reach = s.type == "gaussian"
                                 ? std::abs(s.mean(i)) + 3.0 * s.scale(i)
                                 : std::max(std::abs(s.mean(i)), std::abs(s.scale(i)));
        worst = std::max(worst, reach);
      }
    }
    law.moment_bound = 3.0 * std::pow(worst, 2.0 + law.epsilon);
  }
  return law;
}

}  // namespace

model lq_model_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("lq json: parse failure: ") + e.what());
  }
  dims dim;
  if (j.contains("dims")) {
    dim.d = j.at("dims").value("d", 1);
    dim.m = j.at("dims").value("m", 1);
    dim.k = j.at("dims").value("k", 1);
  }
  const auto [d, m, k] = dim;
  auto coef = [&](const char* key, int rows, int cols, double fallback) {
    if (!j.contains(key)) return lq_coef::constant(mat::Constant(rows, cols, fallback));
    return json_coef(j.at(key), rows, cols, key);
  };
  lq_spec sp;
  sp.dim = dim;
  sp.b0 = coef("b0", d, 1, 0.0);
  sp.b1 = coef("b1", d, d, 0.0);
  sp.b2 = coef("b2", d, d, 0.0);
  sp.b3 = coef("b3", d, k, 0.0);
  if (j.contains("vol")) {
    for (const auto& c : j.at("vol")) {
      lq_spec::vol_column col;
      col.s0 = c.contains("s0") ? json_coef(c.at("s0"), d, 1, "s0")
                                : lq_coef::constant(mat::Zero(d, 1));
      col.s1 = c.contains("s1") ? json_coef(c.at("s1"), d, d, "s1")
                                : lq_coef::constant(mat::Zero(d, d));
      col.s2 = c.contains("s2") ? json_coef(c.at("s2"), d, d, "s2")
                                : lq_coef::constant(mat::Zero(d, d));
      col.s3 = c.contains("s3") ? json_coef(c.at("s3"), d, k, "s3")
                                : lq_coef::constant(mat::Zero(d, k));
      sp.vol.push_back(std::move(col));
    }
    if (static_cast<int>(sp.vol.size()) != m) {
      throw shape_mismatch("lq json: 'vol' must list one column per noise dimension");
    }
  } else {
    lq_spec::vol_column col;
    col.s0 = coef("s0", d, 1, 0.0);
    col.s1 = coef("s1", d, d, 0.0);
    col.s2 = coef("s2", d, d, 0.0);
    col.s3 = coef("s3", d, k, 0.0);
    for (int l = 0; l < m; ++l) sp.vol.push_back(col);
  }
  sp.q = coef("q", d, d, 0.0);
  sp.qbar = coef("qbar", d, d, 0.0);
  sp.s = coef("s", d, d, 0.0);
  sp.lambda = coef("lambda", 1, 1, 1.0);
  sp.q_t = j.contains("qT") ? json_matrix(j.at("qT"), d, d, "qT") : mat::Zero(d, d);
  sp.qbar_t =
      j.contains("qbarT") ? json_matrix(j.at("qbarT"), d, d, "qbarT") : mat::Zero(d, d);
  sp.s_t = j.contains("sT") ? json_matrix(j.at("sT"), d, d, "sT") : mat::Zero(d, d);

  initial_law law = json_initial(j.value("initial", nlohmann::json::object()), d);

  validation_decl decl;
  if (j.contains("decl")) {
    const auto& dj = j.at("decl");
    decl.lipschitz_x = dj.value("lipschitz_x", 0.0);
    decl.lipschitz_mu = dj.value("lipschitz_mu", 0.0);
    decl.lipschitz_a = dj.value("lipschitz_a", 0.0);
    decl.probe_lo = dj.value("probe_lo", -2.0);
    decl.probe_hi = dj.value("probe_hi", 2.0);
    decl.convexity_lambda = dj.value("convexity_lambda", 0.0);
    decl.cost_convex = dj.value("cost_convex", true);
  } else {
    // Derive dynamics constants from the stored coefficient norms.
    auto op_norm = [](const lq_coef& c) {
      double worst = 0.0;
      for (double uu : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        for (double tt : {0.0, 0.5, 1.0, 5.0}) {
          worst = std::max(worst, c.at(uu, tt).cwiseAbs().sum());
        }
      }
      return worst;
    };
    double s1n = 0.0, s2n = 0.0, s3n = 0.0;
    for (const auto& c : sp.vol) {
      s1n += op_norm(c.s1);
      s2n += op_norm(c.s2);
      s3n += op_norm(c.s3);
    }
    decl.lipschitz_x = op_norm(sp.b1) + s1n + 1e-9;
    decl.lipschitz_mu = op_norm(sp.b2) + s2n + 1e-9;
    decl.lipschitz_a = op_norm(sp.b3) + s3n + 1e-9;
    decl.convexity_lambda = sp.lambda.at(0.0, 0.0)(0, 0);
    decl.cost_convex = true;
  }

  std::string name = j.value("name", std::string("lq"));
  return lq_to_model(std::move(name), sp, std::move(law), decl);
}

}  // namespace gmfc
