#include "gmfc/nagent.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gmfc/forward.hpp"
#include "gmfc/rng.hpp"

namespace gmfc {

namespace {

std::size_t zu(int i) { return static_cast<std::size_t>(i); }

void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

// --- interaction matrices --------------------------------------------------

interaction_matrix interaction_matrix::from_weights(mat zeta) {
  if (zeta.rows() == 0 || zeta.rows() != zeta.cols()) {
    throw shape_mismatch("interaction_matrix: zeta must be square and nonempty, got " +
                         std::to_string(zeta.rows()) + " x " +
                         std::to_string(zeta.cols()));
  }
  const int n = static_cast<int>(zeta.rows());
  const double scale = 1.0 + zeta.cwiseAbs().maxCoeff();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (zeta(i, j) < 0.0) {
        throw negative_entry("interaction_matrix: zeta(" + std::to_string(i) + "," +
                             std::to_string(j) + ") = " + std::to_string(zeta(i, j)));
      }
      if (std::abs(zeta(i, j) - zeta(j, i)) > 1e-12 * scale) {
        throw asymmetric_matrix("interaction_matrix: zeta(" + std::to_string(i) + "," +
                                std::to_string(j) + ") != zeta(" + std::to_string(j) +
                                "," + std::to_string(i) + ")");
      }
    }
  }
  interaction_matrix im;
  im.n = n;
  im.zeta = std::move(zeta);
  im.kappa.resize(n, n);
  for (int i = 0; i < n; ++i) {
    const double row_sum = im.zeta.row(i).sum();
    if (row_sum <= 0.0) {
      throw zero_row("interaction_matrix: agent " + std::to_string(i) +
                     " is isolated (zeta row sums to zero)");
    }
    im.kappa.row(i) = im.zeta.row(i) / row_sum;
  }
  return im;
}

graphon interaction_matrix::induced_step_graphon() const {
  return graphon::step_from_matrix(zeta);
}

interaction_matrix sample_interaction_matrix(const graphon& g, int n, sampling_mode mode,
                                             std::uint64_t seed) {
  if (n < 1) throw config_error("sample_interaction_matrix: need at least one agent");
  // Kernel values at the agent labels (i + 1/2)/n, i.e. the midpoints of the
  // n-cell grid.
  const mat values = g.values_on(label_grid(n));
  if (mode == sampling_mode::deterministic) {
    return interaction_matrix::from_weights(values);
  }
  if (g.bound() > 1.0 + 1e-12) {
    throw config_error("sample_interaction_matrix: bernoulli mode needs a kernel "
                       "bounded by one, got bound " +
                       std::to_string(g.bound()));
  }
  mat zeta(n, n);
  for (int i = 0; i < n; ++i) {
    zeta(i, i) = values(i, i);  // diagonal stays deterministic
    for (int j = i + 1; j < n; ++j) {
      const std::uint64_t strm =
          rng::stream(rng::purpose::bernoulli, static_cast<std::uint64_t>(i),
                      static_cast<std::uint64_t>(j));
      const double coin = rng::uniform01(seed, strm, 0);
      zeta(i, j) = coin < values(i, j) ? 1.0 : 0.0;
      zeta(j, i) = zeta(i, j);
    }
  }
  return interaction_matrix::from_weights(std::move(zeta));
}

// --- simulation ------------------------------------------------------------

agent_paths simulate_nagent(const model& mdl, const interaction_matrix& im,
                            const agent_controls& controls,
                            const std::optional<mat>& initials,
                            const nagent_config& cfg) {
  const int n = im.n;
  const int d = mdl.dim.d;
  const int m = mdl.dim.m;
  const int k = mdl.dim.k;
  if (!controls.eval) throw config_error("simulate_nagent: controls.eval is empty");
  if (controls.n != 0 && controls.n != n) {
    throw shape_mismatch("simulate_nagent: controls cover " +
                         std::to_string(controls.n) + " agents, need " +
                         std::to_string(n));
  }
  if (cfg.steps < 1 || cfg.horizon <= 0.0) {
    throw config_error("simulate_nagent: need steps >= 1 and horizon > 0");
  }
  if (!cfg.units.empty() && static_cast<int>(cfg.units.size()) != n) {
    throw shape_mismatch("simulate_nagent: stream unit list does not match n");
  }
  if (!cfg.members.empty() && static_cast<int>(cfg.members.size()) != n) {
    throw shape_mismatch("simulate_nagent: stream member list does not match n");
  }
  const double dt = cfg.horizon / cfg.steps;
  const auto unit_of = [&](int i) {
    return cfg.units.empty() ? static_cast<std::uint64_t>(i) : cfg.units[zu(i)];
  };
  const auto member_of = [&](int i) {
    return cfg.members.empty() ? std::uint64_t{0} : cfg.members[zu(i)];
  };

  agent_paths paths;
  paths.n = n;
  paths.steps = cfg.steps;
  paths.horizon = cfg.horizon;
  paths.states.assign(zu(cfg.steps) + 1, mat(n, d));
  paths.controls.assign(zu(cfg.steps), mat(n, k));
  paths.noise.assign(zu(cfg.steps), mat(n, m));

  if (initials.has_value()) {
    if (initials->rows() != n || initials->cols() != d) {
      throw shape_mismatch("simulate_nagent: initials are " +
                           std::to_string(initials->rows()) + " x " +
                           std::to_string(initials->cols()) + ", need " +
                           std::to_string(n) + " x " + std::to_string(d));
    }
    paths.states[0] = *initials;
  } else {
    vec xi(d);
    for (int i = 0; i < n; ++i) {
      sample_initial(mdl.init, im.label(i), cfg.seed, unit_of(i), member_of(i),
                     cfg.antithetic, xi);
      paths.states[0].row(i) = xi.transpose();
    }
  }

  // One shared scratch cloud per step; only the weight row changes per agent.
  particle_cloud nbhd;
  nbhd.weights.emplace(n);
  vec x(d), a(k), b_out(d), dw(m);
  mat sigma_out(d, m);

  for (int step = 0; step < cfg.steps; ++step) {
    const double t = step * dt;
    const mat& snapshot = paths.states[zu(step)];
    mat& next = paths.states[zu(step) + 1];
    nbhd.points = snapshot;
    for (int i = 0; i < n; ++i) {
      *nbhd.weights = im.kappa.row(i).transpose();
      const mu_view view = mu_view::from_cloud(&nbhd);
      x = snapshot.row(i).transpose();
      controls.eval(i, step, t, x, nbhd, a);
      const double u = im.label(i);
      mdl.coef.b(u, t, x, view, a, b_out);
      mdl.coef.sigma(u, t, x, view, a, sigma_out);
      const bool flip = cfg.antithetic;
      for (int l = 0; l < m; ++l) {
        const double inc = brownian_increment(cfg.seed, static_cast<int>(unit_of(i)),
                                              static_cast<int>(member_of(i)), step, l, dt);
        dw[l] = flip ? -inc : inc;
      }
      x.noalias() += dt * b_out;
      x.noalias() += sigma_out * dw;
      if (!x.allFinite()) {
        throw non_finite_state("simulate_nagent: non-finite state for agent " +
                               std::to_string(i) + " at step " + std::to_string(step + 1));
      }
      next.row(i) = x.transpose();
      paths.controls[zu(step)].row(i) = a.transpose();
      paths.noise[zu(step)].row(i) = dw.transpose();
    }
  }
  return paths;
}

// --- cost ------------------------------------------------------------------

vec cost_nagent_samples(const model& mdl, const agent_paths& paths,
                        const interaction_matrix& im) {
  const int n = paths.n;
  const int d = mdl.dim.d;
  if (im.n != n) {
    throw shape_mismatch("cost_nagent: interaction matrix covers " +
                         std::to_string(im.n) + " agents, paths have " +
                         std::to_string(n));
  }
  const double dt = paths.dt();
  vec total = vec::Zero(n);
  particle_cloud nbhd;
  nbhd.weights.emplace(n);
  vec x(d), a;
  for (int step = 0; step < paths.steps; ++step) {
    const double t = step * dt;
    nbhd.points = paths.states[zu(step)];
    for (int i = 0; i < n; ++i) {
      *nbhd.weights = im.kappa.row(i).transpose();
      const mu_view view = mu_view::from_cloud(&nbhd);
      x = paths.states[zu(step)].row(i).transpose();
      a = paths.controls[zu(step)].row(i).transpose();
      total[i] += dt * mdl.coef.f(im.label(i), t, x, view, a);
    }
  }
  nbhd.points = paths.states[zu(paths.steps)];
  for (int i = 0; i < n; ++i) {
    *nbhd.weights = im.kappa.row(i).transpose();
    const mu_view view = mu_view::from_cloud(&nbhd);
    x = paths.states[zu(paths.steps)].row(i).transpose();
    total[i] += mdl.coef.g(im.label(i), x, view);
  }
  return total;
}

double cost_nagent(const model& mdl, const agent_paths& paths,
                   const interaction_matrix& im) {
  return cost_nagent_samples(mdl, paths, im).mean();
}

// --- transplanted controls -------------------------------------------------

agent_controls decentralized_controls_from_gmfc(const model& mdl,
                                                const fbsde_solution& sol,
                                                const interaction_matrix& im,
                                                const normalized_graphon& ng,
                                                bool use_empirical_field) {
  const int cells = ng.grid.size();
  if (sol.oracle.has_value() && sol.oracle->grid.size() != cells) {
    throw label_mismatch("decentralized_controls_from_gmfc: oracle grid has " +
                         std::to_string(sol.oracle->grid.size()) + " cells, kernel " +
                         std::to_string(cells));
  }
  if (!sol.oracle.has_value()) {
    if (!sol.flow.has_value() || !sol.adjoint.has_value()) {
      throw config_error("decentralized_controls_from_gmfc: solution carries neither "
                         "oracle tables nor an adjoint representation");
    }
    if (sol.flow->grid.size() != cells) {
      throw label_mismatch("decentralized_controls_from_gmfc: solution grid has " +
                           std::to_string(sol.flow->grid.size()) + " cells, kernel " +
                           std::to_string(cells));
    }
  }

  // Map every agent into the solution's label grid once.
  std::vector<int> cell(zu(im.n));
  std::vector<double> labels(zu(im.n));
  for (int i = 0; i < im.n; ++i) {
    labels[zu(i)] = im.label(i);
    cell[zu(i)] = ng.grid.cell_of(labels[zu(i)]);
  }

  auto profile = std::make_shared<control_profile>(solution_feedback(mdl, sol));
  const fbsde_solution* sp = &sol;
  const measure_flow* flow = sol.flow.has_value() ? &*sol.flow : nullptr;
  // Neighborhood weights of every cell, for the limit mixture views.
  std::vector<vec> weights(zu(cells));
  for (int c = 0; c < cells; ++c) weights[zu(c)] = neighborhood_weights(ng, c);

  agent_controls out;
  out.n = im.n;
  out.eval = [profile, sp, flow, cell = std::move(cell), labels = std::move(labels),
              weights = std::move(weights), use_empirical_field](
                 int i, int step, double t, const vec& x,
                 const particle_cloud& neighborhood, vec& a) {
    const int c = cell[zu(i)];
    const double u = labels[zu(i)];
    if (use_empirical_field) {
      const mu_view view = mu_view::from_cloud(&neighborhood);
      profile->feedback(u, c, step, t, x, view, a);
      return;
    }
    if (sp->oracle.has_value()) {
      // Deterministic limit neighborhood: the oracle's mean tables.
      thread_local vec mean;
      mean.resize(1);
      mean[0] = sp->oracle->mubar[zu(c)][zu(sp->oracle->index_at(t))];
      const mu_view view = mu_view::from_mean(mean);
      profile->feedback(u, c, step, t, x, view, a);
      return;
    }
    // Adjoint representation: limit mixture at the nearest solution time.
    const int n_sol = flow->steps();
    const double pos = std::clamp(t / flow->times.back(), 0.0, 1.0) * n_sol;
    const int t_index = std::min(static_cast<int>(std::lround(pos)), n_sol - 1);
    const mu_view view = mu_view::from_mixture(flow, weights[zu(c)], t_index);
    profile->feedback(u, c, t_index, t, x, view, a);
  };
  return out;
}

// --- serialization ---------------------------------------------------------

interaction_matrix interaction_matrix_from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("interaction_matrix_from_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string srsc;
    while (std::getline(ss, srsc, ',')) {
      try {
        row.push_back(std::stod(srsc));
      } catch (const std::exception&) {
        throw config_error("interaction_matrix_from_csv: bad number '" + srsc +
                           "' in " + path);
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw shape_mismatch("interaction_matrix_from_csv: ragged rows in " + path);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw config_error("interaction_matrix_from_csv: empty file " + path);
  mat zeta(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows.front().size(); ++j) {
      zeta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return interaction_matrix::from_weights(std::move(zeta));
}

interaction_matrix interaction_matrix_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(std::string("interaction_matrix_from_json: ") + e.what());
  }
  if (!j.contains("zeta") || !j["zeta"].is_array()) {
    throw config_error("interaction_matrix_from_json: missing 'zeta' array");
  }
  const auto& z = j["zeta"];
  const std::size_t n = z.size();
  mat zeta(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!z[i].is_array() || z[i].size() != n) {
      throw shape_mismatch("interaction_matrix_from_json: zeta is not square");
    }
    for (std::size_t jx = 0; jx < n; ++jx) {
      zeta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(jx)) =
          z[i][jx].get<double>();
    }
  }
  return interaction_matrix::from_weights(std::move(zeta));
}

std::string interaction_matrix_to_json(const interaction_matrix& im) {
  nlohmann::ordered_json j;
  j["n"] = im.n;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (int i = 0; i < im.n; ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int jx = 0; jx < im.n; ++jx) row.push_back(im.zeta(i, jx));
    rows.push_back(std::move(row));
  }
  j["zeta"] = std::move(rows);
  return j.dump(2);
}

void save_agent_paths_csv(const agent_paths& paths, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("save_agent_paths_csv: cannot open " + path);
  const int d = static_cast<int>(paths.states.front().cols());
  const int k = paths.steps > 0 ? static_cast<int>(paths.controls.front().cols()) : 0;
  const int m = paths.steps > 0 ? static_cast<int>(paths.noise.front().cols()) : 0;
  std::string line = "step,t,agent";
  for (int j = 0; j < d; ++j) line += ",x" + std::to_string(j + 1);
  for (int j = 0; j < k; ++j) line += ",alpha" + std::to_string(j + 1);
  for (int j = 0; j < m; ++j) line += ",dw" + std::to_string(j + 1);
  line += "\n";
  out << line;
  const double dt = paths.dt();
  for (int step = 0; step <= paths.steps; ++step) {
    for (int i = 0; i < paths.n; ++i) {
      line.clear();
      line += std::to_string(step);
      line += ",";
      append_number(line, step * dt);
      line += ",";
      line += std::to_string(i);
      for (int j = 0; j < d; ++j) {
        line += ",";
        append_number(line, paths.states[zu(step)](i, j));
      }
      if (step < paths.steps) {
        for (int j = 0; j < k; ++j) {
          line += ",";
          append_number(line, paths.controls[zu(step)](i, j));
        }
        for (int j = 0; j < m; ++j) {
          line += ",";
          append_number(line, paths.noise[zu(step)](i, j));
        }
      } else {
        for (int j = 0; j < k + m; ++j) line += ",";
      }
      line += "\n";
      out << line;
    }
  }
}

}  // namespace gmfc
