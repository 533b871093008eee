// Command line front end: validation, solving, closed-form tables, finite
// population simulation and the convergence experiments, driven by a JSON
// config with flag overrides.  Every command is deterministic given
// (config, seed) and writes byte-identical artifacts for any worker count.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gmfc/builtin_models.hpp"
#include "gmfc/experiments.hpp"
#include "gmfc/nagent.hpp"
#include "gmfc/parallel.hpp"
#include "gmfc/rng.hpp"

namespace {

using gmfc::vec;
using nlohmann::ordered_json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw gmfc::config_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw gmfc::config_error("cannot open " + path + " for writing");
  out << text;
}

/// Everything a command needs: problem, tuning, experiment parameters and
/// output location.  Values come from defaults, then the JSON config, then
/// explicit flags (strongest).
struct run_config {
  std::string model = "lq-scalar";   ///< builtin name or path to an LQ JSON
  std::string graphon_path;          ///< optional kernel override
  std::string graphon_prime_path;    ///< stability endpoint override
  gmfc::solver_config solver;
  gmfc::experiment_config exp;
  std::vector<int> n_list{25, 50, 100, 200, 400, 800};
  std::vector<std::pair<double, double>> label_pairs{
      {0.125, 0.325}, {0.125, 0.225}, {0.125, 0.175}};
  std::string out_dir = ".";
  int threads = 0;                   ///< 0 = leave the worker pool untouched
  bool assert_bands = false;
  int sim_n = 50;                    ///< simulate-n population size
  std::string sim_mode = "deterministic";
  bool sim_paths = false;            ///< write per-agent paths CSV
};

void apply_json(run_config& rc, const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path));
  if (j.contains("model")) rc.model = j.at("model").get<std::string>();
  if (j.contains("graphon")) rc.graphon_path = j.at("graphon").get<std::string>();
  if (j.contains("graphon_prime")) {
    rc.graphon_prime_path = j.at("graphon_prime").get<std::string>();
  }
  if (j.contains("out")) rc.out_dir = j.at("out").get<std::string>();
  if (j.contains("sim")) {
    const nlohmann::json& s = j.at("sim");
    gmfc::sim_config& c = rc.solver.sim;
    if (s.contains("labels")) c.labels = s.at("labels").get<int>();
    if (s.contains("particles")) c.particles = s.at("particles").get<int>();
    if (s.contains("steps")) c.steps = s.at("steps").get<int>();
    if (s.contains("horizon")) c.horizon = s.at("horizon").get<double>();
    if (s.contains("seed")) c.seed = s.at("seed").get<std::uint64_t>();
    if (s.contains("damping")) c.damping = s.at("damping").get<double>();
    if (s.contains("picard_tol")) c.picard_tol = s.at("picard_tol").get<double>();
    if (s.contains("picard_max")) c.picard_max = s.at("picard_max").get<int>();
  }
  if (j.contains("solver")) {
    const nlohmann::json& s = j.at("solver");
    if (s.contains("rho")) rc.solver.rho = s.at("rho").get<double>();
    if (s.contains("tol_control")) {
      rc.solver.tol_control = s.at("tol_control").get<double>();
    }
    if (s.contains("max_outer")) rc.solver.max_outer = s.at("max_outer").get<int>();
  }
  if (j.contains("experiment")) {
    const nlohmann::json& e = j.at("experiment");
    if (e.contains("n_list")) rc.n_list = e.at("n_list").get<std::vector<int>>();
    if (e.contains("repetitions")) {
      rc.exp.repetitions = e.at("repetitions").get<int>();
    }
    if (e.contains("steps")) rc.exp.steps = e.at("steps").get<int>();
    if (e.contains("horizon")) rc.exp.horizon = e.at("horizon").get<double>();
    if (e.contains("seed")) rc.exp.seed = e.at("seed").get<std::uint64_t>();
    if (e.contains("oracle_steps")) {
      rc.exp.oracle_steps = e.at("oracle_steps").get<int>();
    }
    if (e.contains("particles")) rc.exp.particles = e.at("particles").get<int>();
    if (e.contains("labels")) rc.exp.labels = e.at("labels").get<int>();
    if (e.contains("antithetic")) rc.exp.antithetic = e.at("antithetic").get<bool>();
    if (e.contains("empirical_field_controls")) {
      rc.exp.empirical_field_controls = e.at("empirical_field_controls").get<bool>();
    }
    if (e.contains("label_pairs")) {
      rc.label_pairs.clear();
      for (const auto& p : e.at("label_pairs")) {
        rc.label_pairs.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      }
    }
  }
}

/// Resolved problem: model plus interaction kernel (and tuned solver defaults
/// when the model is a builtin).
struct problem {
  gmfc::model mdl;
  gmfc::graphon g;
};

problem load_problem(run_config& rc) {
  problem pb{gmfc::model{}, gmfc::graphon::step_from_matrix(gmfc::mat::Ones(1, 1))};
  const auto names = gmfc::builtin_names();
  if (std::find(names.begin(), names.end(), rc.model) != names.end()) {
    gmfc::builtin bi = gmfc::make_builtin(rc.model);
    pb.mdl = std::move(bi.mdl);
    pb.g = std::move(bi.g);
    // builtin tuning fills whatever the config left at defaults
    const gmfc::solver_config defaults;
    if (rc.solver.rho == defaults.rho) rc.solver.rho = bi.solver.rho;
    if (rc.solver.tol_control == defaults.tol_control) {
      rc.solver.tol_control = bi.solver.tol_control;
    }
    if (rc.solver.max_outer == defaults.max_outer) {
      rc.solver.max_outer = bi.solver.max_outer;
    }
  } else {
    pb.mdl = gmfc::lq_model_from_json(read_file(rc.model));
  }
  if (!rc.graphon_path.empty()) {
    pb.g = gmfc::graphon_from_json(read_file(rc.graphon_path));
  }
  return pb;
}

std::string out_path(const run_config& rc, const std::string& name) {
  std::filesystem::create_directories(rc.out_dir);
  return (std::filesystem::path(rc.out_dir) / name).string();
}

// --- commands ---------------------------------------------------------------

int cmd_validate(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::label_grid grid(rc.solver.sim.labels);
  const gmfc::validation_report report =
      gmfc::validate_model(pb.mdl, pb.g, grid, rc.solver.sim.seed);
  write_file(out_path(rc, "report.json"), report.to_json());
  int failed = 0;
  for (const auto& item : report.items) failed += item.pass ? 0 : 1;
  std::cout << "validate: " << report.items.size() - failed << "/"
            << report.items.size() << " checks passed, min degree bound "
            << format_double(gmfc::min_degree_bound(pb.g, grid)) << "\n";
  return report.all_pass() ? 0 : 1;
}

void write_flow_means_csv(const std::string& path, const gmfc::model& mdl,
                          const gmfc::measure_flow& flow, const gmfc::sim_config& cfg) {
  std::string text = "label,u,step,t";
  for (int c = 0; c < mdl.dim.d; ++c) text += ",mean_" + std::to_string(c);
  for (int c = 0; c < mdl.dim.d; ++c) text += ",second_" + std::to_string(c);
  text += "\n";
  const gmfc::label_grid grid(cfg.labels);
  for (int l = 0; l < cfg.labels; ++l) {
    for (int k = 0; k <= cfg.steps; ++k) {
      const Eigen::MatrixXd& pts =
          flow.clouds[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)].points;
      text += std::to_string(l) + "," + format_double(grid.midpoint(l)) + "," +
              std::to_string(k) + "," + format_double(cfg.dt() * k);
      for (int c = 0; c < mdl.dim.d; ++c) {
        text += "," + format_double(pts.col(c).mean());
      }
      for (int c = 0; c < mdl.dim.d; ++c) {
        text += "," + format_double(pts.col(c).array().square().mean());
      }
      text += "\n";
    }
  }
  write_file(path, text);
}

/// sup over adjoint samples of |b3' Y|, the scale the residual band in the
/// optimality condition is measured against.
double sup_b3y(const gmfc::model& mdl, const gmfc::adjoint_flow& af,
               const gmfc::sim_config& cfg) {
  double sup = 0.0;
  const gmfc::label_grid grid(cfg.labels);
  for (std::size_t l = 0; l < af.y.size(); ++l) {
    const double u = grid.midpoint(static_cast<int>(l));
    for (std::size_t k = 0; k < af.y[l].size(); ++k) {
      const gmfc::mat& b3 = mdl.lq->b3.at(u, cfg.dt() * static_cast<double>(k));
      sup = std::max(sup, (af.y[l][k] * b3).cwiseAbs().maxCoeff());
    }
  }
  return sup;
}

int cmd_solve(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::label_grid grid(rc.solver.sim.labels);
  const gmfc::validation_report vr =
      gmfc::validate_model(pb.mdl, pb.g, grid, rc.solver.sim.seed);
  if (!vr.all_pass()) {
    write_file(out_path(rc, "report.json"), vr.to_json());
    std::cout << "solve: validation failed, see report.json\n";
    return 1;
  }
  const gmfc::normalized_graphon ng = gmfc::normalize(pb.g, grid);
  const gmfc::fbsde_solution sol = gmfc::solve_pontryagin_fbsde(pb.mdl, ng, rc.solver);

  ordered_json j;
  j["model"] = pb.mdl.name;
  j["labels"] = rc.solver.sim.labels;
  j["particles"] = rc.solver.sim.particles;
  j["steps"] = rc.solver.sim.steps;
  j["horizon"] = rc.solver.sim.horizon;
  j["seed"] = rc.solver.sim.seed;
  j["cost"] = sol.cost_value;
  j["cost_stderr"] = sol.cost_stderr;
  j["residual_sup"] = sol.residual.sup;
  j["residual_l2"] = sol.residual.l2;
  j["outer_iterations"] = sol.outer_iterations;
  j["control_changes"] = sol.control_changes;
  double band = 0.0;
  if (pb.mdl.lq && sol.adjoint) {
    band = 1e-2 * (pb.mdl.lq->lambda.at(0.0, 0.0)(0, 0) +
                   sup_b3y(pb.mdl, *sol.adjoint, rc.solver.sim));
    j["residual_band"] = band;
  }
  write_file(out_path(rc, "report.json"), j.dump(2) + "\n");
  if (sol.flow) {
    write_flow_means_csv(out_path(rc, "means.csv"), pb.mdl, *sol.flow, rc.solver.sim);
  }
  std::cout << "solve: cost " << format_double(sol.cost_value) << " +- "
            << format_double(sol.cost_stderr) << ", residual sup "
            << format_double(sol.residual.sup) << ", " << sol.outer_iterations
            << " outer iterations\n";
  if (rc.assert_bands && pb.mdl.lq && sol.residual.sup > band) return 3;
  return 0;
}

int cmd_oracle(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::label_grid grid(rc.solver.sim.labels);
  const gmfc::fbsde_solution sol = gmfc::lq_oracle(
      pb.mdl, pb.g, grid, rc.solver.sim.horizon, rc.exp.oracle_steps);
  const gmfc::fbsde_solution::oracle_data& od = *sol.oracle;
  const gmfc::sim_config& sim = rc.solver.sim;

  std::string text = "label,u,step,t,eta,psi,mean,second,mubar,gamma1,gamma0\n";
  for (int l = 0; l < grid.size(); ++l) {
    const auto lz = static_cast<std::size_t>(l);
    for (int k = 0; k <= sim.steps; ++k) {
      const double t = sim.dt() * k;
      const auto idx = static_cast<std::size_t>(od.index_at(t));
      text += std::to_string(l) + "," + format_double(grid.midpoint(l)) + "," +
              std::to_string(k) + "," + format_double(t);
      text += "," + format_double(od.eta_at(l, t));
      text += "," + format_double(od.psi[lz][idx]);
      text += "," + format_double(od.mean[lz][idx]);
      text += "," + format_double(od.second[lz][idx]);
      text += "," + format_double(od.mubar[lz][idx]);
      if (k < sim.steps) {
        text += "," + format_double(od.gamma1[lz][idx]);
        text += "," + format_double(od.gamma0[lz][idx]);
      } else {
        text += ",,";
      }
      text += "\n";
    }
  }
  write_file(out_path(rc, "oracle.csv"), text);

  ordered_json j;
  j["model"] = pb.mdl.name;
  j["labels"] = grid.size();
  j["horizon"] = sim.horizon;
  j["ode_steps"] = od.ode_steps;
  j["jstar"] = od.jstar;
  j["verification_residual"] = od.verification_residual;
  write_file(out_path(rc, "report.json"), j.dump(2) + "\n");
  std::cout << "oracle: jstar " << format_double(od.jstar)
            << ", verification residual "
            << format_double(od.verification_residual) << "\n";
  return 0;
}

int cmd_simulate_n(run_config& rc) {
  const problem pb = load_problem(rc);
  const int cells = rc.exp.labels > 0 ? rc.exp.labels : pb.g.resolution();
  const gmfc::label_grid grid(cells);
  const gmfc::fbsde_solution sol = gmfc::lq_oracle(
      pb.mdl, pb.g, grid, rc.exp.horizon, rc.exp.oracle_steps);
  const gmfc::normalized_graphon ng = gmfc::normalize(pb.g, grid);

  const gmfc::sampling_mode mode = rc.sim_mode == "bernoulli"
                                       ? gmfc::sampling_mode::bernoulli
                                       : gmfc::sampling_mode::deterministic;
  if (rc.sim_mode != "bernoulli" && rc.sim_mode != "deterministic") {
    throw gmfc::config_error("simulate-n: unknown mode " + rc.sim_mode);
  }
  const gmfc::interaction_matrix im =
      gmfc::sample_interaction_matrix(pb.g, rc.sim_n, mode, rc.exp.seed);
  const gmfc::agent_controls ctrl = gmfc::decentralized_controls_from_gmfc(
      pb.mdl, sol, im, ng, rc.exp.empirical_field_controls);
  gmfc::nagent_config nc;
  nc.steps = rc.exp.steps;
  nc.horizon = rc.exp.horizon;
  nc.seed = rc.exp.seed;
  const gmfc::agent_paths paths =
      gmfc::simulate_nagent(pb.mdl, im, ctrl, std::nullopt, nc);
  const vec costs = gmfc::cost_nagent_samples(pb.mdl, paths, im);
  const double mean = costs.mean();
  const double sd = std::sqrt((costs.array() - mean).square().sum() /
                              std::max<double>(1.0, rc.sim_n - 1));
  const double se = sd / std::sqrt(static_cast<double>(rc.sim_n));

  ordered_json j;
  j["model"] = pb.mdl.name;
  j["n"] = rc.sim_n;
  j["mode"] = rc.sim_mode;
  j["steps"] = rc.exp.steps;
  j["horizon"] = rc.exp.horizon;
  j["seed"] = rc.exp.seed;
  j["cost_mean"] = mean;
  j["cost_spread_stderr"] = se;
  j["jstar"] = sol.oracle->jstar;
  write_file(out_path(rc, "report.json"), j.dump(2) + "\n");
  if (rc.sim_paths) {
    gmfc::save_agent_paths_csv(paths, out_path(rc, "paths.csv"));
  }
  std::cout << "simulate-n: N = " << rc.sim_n << ", realized cost "
            << format_double(mean) << " +- " << format_double(se)
            << " (agent spread)\n";
  return 0;
}

int cmd_poc(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::rate_report rep = gmfc::poc_experiment(
      pb.mdl, pb.g, rc.n_list, rc.exp.repetitions, rc.exp);
  write_file(out_path(rc, "report.json"), rep.to_json() + "\n");
  rep.write_csv(out_path(rc, "poc.csv"));
  std::cout << "poc: fitted slope " << format_double(rep.fitted_slope) << " ["
            << format_double(rep.slope_lo) << ", " << format_double(rep.slope_hi)
            << "], errors " << format_double(rep.errors.front()) << " -> "
            << format_double(rep.errors.back()) << "\n";
  if (rc.assert_bands) {
    const bool ok = gmfc::decreasing_beyond(rep.errors, rep.stderrs, 2.0) &&
                    rep.fitted_slope >= -0.7 && rep.fitted_slope <= -0.3;
    if (!ok) return 3;
  }
  return 0;
}

int cmd_costgap(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::rate_report rep = gmfc::cost_gap_experiment(
      pb.mdl, pb.g, rc.n_list, rc.exp.repetitions, rc.exp);
  write_file(out_path(rc, "report.json"), rep.to_json() + "\n");
  rep.write_csv(out_path(rc, "costgap.csv"));
  std::cout << "costgap: |gap| " << format_double(rep.errors.front()) << " -> "
            << format_double(rep.errors.back()) << ", jstar "
            << format_double(rep.jstar_discrete) << " (discrete)\n";
  if (rc.assert_bands) {
    const bool ok = gmfc::decreasing_beyond(rep.errors, rep.stderrs, 2.0) &&
                    rep.errors.back() <= 0.25 * rep.errors.front();
    if (!ok) return 3;
  }
  return 0;
}

int cmd_stability(run_config& rc) {
  const problem pb = load_problem(rc);
  gmfc::graphon prime = rc.graphon_prime_path.empty()
                            ? gmfc::make_builtin("lq-2block").g
                            : gmfc::graphon_from_json(read_file(rc.graphon_prime_path));
  const gmfc::stability_report rep =
      gmfc::stability_experiment(pb.mdl, pb.g, prime, rc.exp);
  write_file(out_path(rc, "report.json"), rep.to_json() + "\n");
  rep.write_csv(out_path(rc, "stability.csv"));
  std::cout << "stability: envelope constant "
            << format_double(rep.envelope_constant) << ", envelope "
            << (rep.envelope_ok ? "ok" : "violated") << ", s=0 distance "
            << format_double(rep.distances.front()) << "\n";
  if (rc.assert_bands) {
    const bool ok = rep.envelope_ok && rep.monotone_ok && rep.bracket_ok &&
                    rep.distances.front() == 0.0;
    if (!ok) return 3;
  }
  return 0;
}

int cmd_continuity(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::continuity_report rep =
      gmfc::continuity_experiment(pb.mdl, pb.g, rc.label_pairs, rc.exp);
  write_file(out_path(rc, "report.json"), rep.to_json() + "\n");
  rep.write_csv(out_path(rc, "continuity.csv"));
  std::cout << "continuity: " << rep.pairs.size() << " pairs, distances "
            << format_double(rep.pairs.front().distance) << " -> "
            << format_double(rep.pairs.back().distance) << ", zero pair "
            << format_double(rep.zero_pair_distance) << "\n";
  if (rc.assert_bands) {
    const bool ok = rep.monotone_ok && rep.zero_pair_distance == 0.0;
    if (!ok) return 3;
  }
  return 0;
}

/// Random broadcast direction table (one row per step, shared by particles),
/// bounded entries so epsilon scaling stays comparable across directions.
gmfc::control_table random_direction(const gmfc::model& mdl, const gmfc::sim_config& cfg,
                                     std::uint64_t seed, std::uint64_t which) {
  gmfc::control_table dir;
  dir.a.assign(static_cast<std::size_t>(cfg.labels),
               std::vector<gmfc::mat>(static_cast<std::size_t>(cfg.steps)));
  std::uint64_t ctr = 0;
  for (int l = 0; l < cfg.labels; ++l) {
    const std::uint64_t strm =
        gmfc::rng::stream(gmfc::rng::purpose::validation, which,
                          static_cast<std::uint64_t>(l));
    for (int k = 0; k < cfg.steps; ++k) {
      gmfc::mat m(1, mdl.dim.k);
      for (int c = 0; c < mdl.dim.k; ++c) {
        m(0, c) = 2.0 * gmfc::rng::uniform01(seed, strm, ctr++) - 1.0;
      }
      dir.a[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)] = m;
    }
  }
  return dir;
}

gmfc::control_table perturb(const gmfc::control_table& base,
                            const gmfc::control_table& dir, double eps) {
  gmfc::control_table out = base;
  for (std::size_t l = 0; l < out.a.size(); ++l) {
    for (std::size_t k = 0; k < out.a[l].size(); ++k) {
      const gmfc::mat& d = dir.a[l][k];
      if (d.rows() == 1 && out.a[l][k].rows() > 1) {
        out.a[l][k].rowwise() += eps * d.row(0);
      } else {
        out.a[l][k] += eps * d;
      }
    }
  }
  return out;
}

/// Cost functional at an open-loop control: mean-field fixed point under the
/// control, then realized cost, all under the configured seed.
double cost_at_control(const gmfc::model& mdl, const gmfc::normalized_graphon& ng,
                       const gmfc::control_table& table, const gmfc::sim_config& cfg) {
  const gmfc::control_profile prof = gmfc::control_profile::from_table(table);
  const gmfc::measure_flow flow = gmfc::picard_fixed_point(mdl, prof, ng, cfg).first;
  return gmfc::cost(mdl, prof, flow, ng, cfg).value;
}

int cmd_gateaux_check(run_config& rc) {
  const problem pb = load_problem(rc);
  const gmfc::label_grid grid(rc.solver.sim.labels);
  const gmfc::normalized_graphon ng = gmfc::normalize(pb.g, grid);
  const gmfc::sim_config& sim = rc.solver.sim;
  const double eps = 1e-3;

  // The identity is checked away from the optimum: at a converged control the
  // derivative vanishes and relative comparison degenerates.  Two random base
  // controls keep the directional derivatives order one.
  ordered_json rows = ordered_json::array();
  double worst = 0.0;
  for (std::uint64_t base_id = 0; base_id < 2; ++base_id) {
    const gmfc::control_table base =
        random_direction(pb.mdl, sim, sim.seed, 100 + base_id);
    const gmfc::control_profile prof = gmfc::control_profile::from_table(base);
    const gmfc::measure_flow flow =
        gmfc::picard_fixed_point(pb.mdl, prof, ng, sim).first;
    const gmfc::adjoint_flow af =
        gmfc::solve_adjoint(pb.mdl, base, flow, ng, sim, gmfc::adjoint_config{});
    for (std::uint64_t which = 0; which < 5; ++which) {
      const gmfc::control_table dir = random_direction(pb.mdl, sim, sim.seed, which);
      const double adj =
          gmfc::gateaux_derivative(pb.mdl, flow, af, base, dir, ng, sim);
      const double up = cost_at_control(pb.mdl, ng, perturb(base, dir, eps), sim);
      const double dn = cost_at_control(pb.mdl, ng, perturb(base, dir, -eps), sim);
      const double fd = (up - dn) / (2.0 * eps);
      const double rel = std::abs(adj - fd) / std::max(std::abs(fd), 1e-12);
      worst = std::max(worst, rel);
      ordered_json row;
      row["base_control"] = base_id;
      row["direction"] = which;
      row["adjoint"] = adj;
      row["central_difference"] = fd;
      row["relative_error"] = rel;
      rows.push_back(row);
    }
  }
  ordered_json j;
  j["model"] = pb.mdl.name;
  j["epsilon"] = eps;
  j["worst_relative_error"] = worst;
  j["directions"] = rows;
  write_file(out_path(rc, "report.json"), j.dump(2) + "\n");
  std::cout << "gateaux-check: worst relative error " << format_double(worst)
            << " over 2 controls x 5 directions\n";
  if (rc.assert_bands && !(worst <= 1e-2)) return 3;
  return 0;
}

bool is_solver_failure(const gmfc::error& e) {
  static const char* codes[] = {"NonFiniteState",    "PicardDivergence",
                                "RegressionSingular", "AdjointDivergence",
                                "OuterDivergence",    "RiccatiBlowup",
                                "NonConvergence",     "NonConvexDetected"};
  for (const char* c : codes) {
    if (e.code() == c) return true;
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graphon mean field control: solver, benchmark and experiments"};
  app.require_subcommand(1);

  run_config rc;
  std::string config_path;
  std::uint64_t seed_flag = 0;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed_flag, "master seed override");
    sub->add_option("--threads", rc.threads, "worker thread cap (0 = default)");
    sub->add_option("--out", rc.out_dir, "artifact directory");
    sub->add_flag("--assert", rc.assert_bands,
                  "exit 3 when an acceptance band is missed");
    sub->add_option("--model", rc.model, "builtin name or LQ JSON path");
    sub->add_option("--graphon", rc.graphon_path, "kernel JSON path");
    return sub;
  };

  CLI::App* c_validate = add_common(app.add_subcommand(
      "validate", "check model and kernel against the standing assumptions"));
  CLI::App* c_solve = add_common(app.add_subcommand(
      "solve", "run the iterative mean-field solver"));
  CLI::App* c_oracle = add_common(app.add_subcommand(
      "oracle", "closed-form benchmark tables for scalar LQ models"));
  CLI::App* c_simn = add_common(app.add_subcommand(
      "simulate-n", "finite population under transplanted limit controls"));
  c_simn->add_option("--n", rc.sim_n, "number of agents");
  c_simn->add_option("--mode", rc.sim_mode, "deterministic|bernoulli");
  c_simn->add_flag("--paths", rc.sim_paths, "write per-agent paths CSV");
  CLI::App* c_poc = add_common(app.add_subcommand(
      "poc", "pathwise finite-vs-limit convergence experiment"));
  CLI::App* c_costgap = add_common(app.add_subcommand(
      "costgap", "cost convergence experiment"));
  CLI::App* c_stability = add_common(app.add_subcommand(
      "stability", "solution distance along a kernel homotopy"));
  c_stability->add_option("--graphon-prime", rc.graphon_prime_path,
                          "homotopy endpoint kernel JSON path");
  CLI::App* c_continuity = add_common(app.add_subcommand(
      "continuity", "coupled distance between nearby labels"));
  CLI::App* c_gateaux = add_common(app.add_subcommand(
      "gateaux-check", "adjoint directional derivative vs central difference"));
  for (CLI::App* sub : {c_poc, c_costgap, c_stability, c_continuity}) {
    sub->add_option("--reps", rc.exp.repetitions, "repetitions per point");
    sub->add_option("--particles", rc.exp.particles, "particles per coupled chain");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rcode = app.exit(e);
    return rcode == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const auto passed = [&](const std::string& name) {
    const CLI::Option* opt = sub->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  try {
    if (!config_path.empty()) {
      // flags win over config values: reapply whatever the user passed
      run_config flags = rc;
      rc = run_config{};
      apply_json(rc, config_path);
      if (passed("--model")) rc.model = flags.model;
      if (passed("--graphon")) rc.graphon_path = flags.graphon_path;
      if (passed("--graphon-prime")) {
        rc.graphon_prime_path = flags.graphon_prime_path;
      }
      if (passed("--out")) rc.out_dir = flags.out_dir;
      if (passed("--threads")) rc.threads = flags.threads;
      if (passed("--reps")) rc.exp.repetitions = flags.exp.repetitions;
      if (passed("--particles")) rc.exp.particles = flags.exp.particles;
      if (passed("--n")) rc.sim_n = flags.sim_n;
      if (passed("--mode")) rc.sim_mode = flags.sim_mode;
      if (passed("--paths")) rc.sim_paths = flags.sim_paths;
      rc.assert_bands = flags.assert_bands;
    }
    if (passed("--seed")) {
      rc.solver.sim.seed = seed_flag;
      rc.exp.seed = seed_flag;
    }
    if (rc.threads > 0) gmfc::parallel::set_workers(rc.threads);

    if (sub == c_validate) return cmd_validate(rc);
    if (sub == c_solve) return cmd_solve(rc);
    if (sub == c_oracle) return cmd_oracle(rc);
    if (sub == c_simn) return cmd_simulate_n(rc);
    if (sub == c_poc) return cmd_poc(rc);
    if (sub == c_costgap) return cmd_costgap(rc);
    if (sub == c_stability) return cmd_stability(rc);
    if (sub == c_continuity) return cmd_continuity(rc);
    if (sub == c_gateaux) return cmd_gateaux_check(rc);
    return 2;
  } catch (const gmfc::error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return is_solver_failure(e) ? 1 : 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error [JsonParse]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
