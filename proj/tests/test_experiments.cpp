#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "gmfc/builtin_models.hpp"
#include "gmfc/errors.hpp"
#include "gmfc/experiments.hpp"

using namespace gmfc;

namespace {

experiment_config tiny_config() {
  experiment_config cfg;
  cfg.steps = 20;
  cfg.horizon = 1.0;
  cfg.repetitions = 4;
  cfg.seed = 7;
  // The closed-form tables verify their own defect against a fixed 1e-8
  // gate; the central-difference check needs this many ODE steps to clear it.
  cfg.oracle_steps = 30000;
  cfg.particles = 200;
  return cfg;
}

int line_count(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  int lines = 0;
  std::string line;
  while (std::getline(in, line)) ++lines;
  return lines;
}

}  // namespace

TEST_CASE("theoretical rate formula across the dimension regimes") {
  CHECK(q_rate(100, 1, 2.0) == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(q_rate(100, 3, 2.0) == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(q_rate(100, 4, 6.0) == doctest::Approx(0.493134828285810).epsilon(1e-12));
  CHECK(q_rate(100, 6, 2.0) == doctest::Approx(0.315443469003188).epsilon(1e-12));
  CHECK(q_rate(1, 1, 2.0) == doctest::Approx(2.0).epsilon(1e-14));

  // More particles never hurt.
  CHECK(q_rate(1000, 1, 2.0) < q_rate(100, 1, 2.0));
  CHECK(q_rate(1000, 4, 6.0) < q_rate(100, 4, 6.0));
  CHECK(q_rate(1000, 6, 2.0) < q_rate(100, 6, 2.0));

  CHECK_THROWS_AS((void)q_rate(100, 4, 2.0), boundary_case);
  CHECK_THROWS_AS((void)q_rate(100, 1, 0.0), config_error);
  CHECK_THROWS_AS((void)q_rate(100, 1, -1.0), config_error);
  CHECK_THROWS_AS((void)q_rate(0, 1, 2.0), config_error);
  CHECK_THROWS_AS((void)q_rate(100, 0, 2.0), config_error);
}

TEST_CASE("log-log fit recovers an exact power law") {
  const std::vector<double> ns{10.0, 100.0, 1000.0, 10000.0};
  std::vector<double> errors;
  for (double n : ns) errors.push_back(3.0 / std::sqrt(n));
  const fit_result fit = fit_loglog(ns, errors);
  CHECK(fit.slope == doctest::Approx(-0.5).epsilon(1e-10));
  CHECK(fit.intercept == doctest::Approx(1.098612288668110).epsilon(1e-10));
  CHECK(fit.slope_lo <= fit.slope);
  CHECK(fit.slope_hi >= fit.slope);

  CHECK_THROWS_AS((void)fit_loglog({10.0, 100.0}, {1.0, 0.0}), non_positive_error);
  CHECK_THROWS_AS((void)fit_loglog({10.0, 100.0}, {1.0, -0.5}), non_positive_error);
  CHECK_THROWS_AS((void)fit_loglog({10.0}, {1.0}), config_error);
  CHECK_THROWS_AS((void)fit_loglog({10.0, 100.0}, {1.0, 0.5, 0.25}), config_error);
  CHECK_THROWS_AS((void)fit_loglog({10.0, -100.0}, {1.0, 0.5}), config_error);
  CHECK_THROWS_AS((void)fit_loglog({10.0, 10.0}, {1.0, 0.5}), config_error);
}

TEST_CASE("noise-aware decrease acceptance") {
  // A small rise inside the error bars is tolerated...
  CHECK(decreasing_beyond({1.0, 0.9, 0.95}, {0.0, 0.0, 0.1}, 2.0));
  // ... but not without error bars.
  CHECK_FALSE(decreasing_beyond({1.0, 0.9, 0.95}, {0.0, 0.0, 0.0}, 2.0));
  CHECK(decreasing_beyond({3.0, 2.0, 1.0}, {0.0, 0.0, 0.0}, 2.0));
  CHECK(decreasing_beyond({1.0}, {0.5}, 2.0));
  CHECK_FALSE(decreasing_beyond({1.0, 2.0}, {0.1, 0.1}, 2.0));
  CHECK_THROWS_AS((void)decreasing_beyond({1.0, 2.0}, {0.1}, 2.0), config_error);
}

TEST_CASE("small chaos experiment produces a coherent report") {
  const builtin bi = make_builtin("lq-scalar");
  const std::vector<int> ns{8, 16};
  const rate_report rep = poc_experiment(bi.mdl, bi.g, ns, 4, tiny_config());

  CHECK(rep.kind == "poc");
  REQUIRE(rep.ns == ns);
  REQUIRE(rep.errors.size() == 2);
  REQUIRE(rep.stderrs.size() == 2);
  REQUIRE(rep.errors_sq.size() == 2);
  REQUIRE(rep.theoretical_rates.size() == 2);
  REQUIRE(rep.decrease_sigmas.size() == 1);
  for (double e : rep.errors) CHECK(e > 0.0);
  for (double s : rep.stderrs) CHECK(s > 0.0);
  CHECK(rep.theoretical_rates[0] == doctest::Approx(q_rate(8, 1, 2.0)).epsilon(1e-12));
  CHECK(rep.repetitions == 4);
  CHECK(rep.seed == 7);

  const nlohmann::json j = nlohmann::json::parse(rep.to_json());
  CHECK(j.at("kind").get<std::string>() == "poc");
  CHECK(j.at("errors").size() == 2);
  CHECK(nlohmann::json::parse(rep.config_json).is_object());

  const std::string csv = "/tmp/gmfc_poc_report.csv";
  rep.write_csv(csv);
  CHECK(line_count(csv) >= 3);
  std::remove(csv.c_str());

  CHECK_THROWS_AS((void)poc_experiment(bi.mdl, bi.g, {}, 4, tiny_config()),
                  config_error);
  CHECK_THROWS_AS((void)poc_experiment(bi.mdl, bi.g, ns, 1, tiny_config()),
                  config_error);
  const builtin nonlq = make_builtin("convex-nonlq");
  CHECK_THROWS_AS((void)poc_experiment(nonlq.mdl, nonlq.g, ns, 4, tiny_config()),
                  config_error);
}

TEST_CASE("small cost-gap experiment carries the limit references") {
  const builtin bi = make_builtin("lq-scalar");
  const rate_report rep = cost_gap_experiment(bi.mdl, bi.g, {8, 16}, 4, tiny_config());
  CHECK(rep.kind == "costgap");
  CHECK(rep.errors.size() == 2);
  for (double e : rep.errors) CHECK(e >= 0.0);
  for (double s : rep.stderrs) CHECK(s > 0.0);
  CHECK(rep.jstar == doctest::Approx(0.5114372311516668).epsilon(1e-4));
  CHECK(rep.jstar_discrete == doctest::Approx(rep.jstar).epsilon(0.05));
  CHECK(rep.jstar_discrete != rep.jstar);
}

TEST_CASE("kernel homotopy distances start at zero and stay bracketed") {
  const builtin bi = make_builtin("lq-scalar");
  const builtin two = make_builtin("lq-2block");
  experiment_config cfg = tiny_config();
  cfg.steps = 10;
  const stability_report rep = stability_experiment(bi.mdl, bi.g, two.g, cfg);

  REQUIRE(rep.s_values.size() == 5);
  REQUIRE(rep.distances.size() == 5);
  REQUIRE(rep.l1_distances.size() == 5);
  CHECK(rep.s_values.front() == 0.0);
  CHECK(rep.s_values.back() == 1.0);
  CHECK(rep.distances.front() == 0.0);
  CHECK(rep.l1_distances.front() == 0.0);
  // The kernel path is exactly linear in the blend parameter.
  for (std::size_t j = 1; j < 5; ++j) {
    CHECK(rep.l1_distances[j] ==
          doctest::Approx(rep.s_values[j] * rep.l1_distances.back()).epsilon(1e-12));
  }
  CHECK(rep.l1_distances.back() > 0.0);
  CHECK(rep.envelope_constant > 0.0);
  CHECK(nlohmann::json::parse(rep.to_json()).is_object());

  const std::string csv = "/tmp/gmfc_stability_report.csv";
  rep.write_csv(csv);
  CHECK(line_count(csv) == 6);
  std::remove(csv.c_str());
}

TEST_CASE("label continuity: identical labels coincide exactly") {
  const builtin bi = make_builtin("lq-scalar");
  // A label-separating kernel; a flat one would make every distance zero.
  const graphon lip = graphon::grid_from_function(
      [](double u, double v) { return 1.0 + 0.5 * u * v; }, 20);
  experiment_config cfg = tiny_config();
  cfg.steps = 10;
  cfg.particles = 100;
  const continuity_report rep =
      continuity_experiment(bi.mdl, lip, {{0.125, 0.375}, {0.125, 0.875}}, cfg);

  REQUIRE(rep.pairs.size() == 2);
  CHECK(rep.zero_pair_distance == 0.0);
  CHECK(rep.pairs[0].label_gap == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(rep.pairs[1].label_gap == doctest::Approx(0.75).epsilon(1e-14));
  for (const continuity_pair& p : rep.pairs) {
    CHECK(p.distance > 0.0);
    CHECK(p.bound_rhs > 0.0);
  }
  CHECK(nlohmann::json::parse(rep.to_json()).is_object());

  const std::string csv = "/tmp/gmfc_continuity_report.csv";
  rep.write_csv(csv);
  CHECK(line_count(csv) >= 3);
  std::remove(csv.c_str());

  CHECK_THROWS_AS((void)continuity_experiment(bi.mdl, lip, {}, cfg), config_error);
}
