#include "doctest.h"

#include <cmath>
#include <limits>

#include "gmfc/errors.hpp"
#include "gmfc/graphon.hpp"

using namespace gmfc;

namespace {

Eigen::MatrixXd two_by_two(double a, double b, double c, double d) {
  Eigen::MatrixXd m(2, 2);
  m << a, b, c, d;
  return m;
}

}  // namespace

TEST_CASE("row normalization against hand quadrature") {
  // zeta = [[1,3],[3,1]] on two cells: every degree is (1+3)/2 = 2, so the
  // normalized rows are [[0.5,1.5],[1.5,0.5]] and the neighborhood weights of
  // cell 0 put 1/4 of the mass on its own block and 3/4 on the other.
  const graphon g = graphon::step_from_matrix(two_by_two(1.0, 3.0, 3.0, 1.0));
  const label_grid grid(2);
  const normalized_graphon ng = normalize(g, grid);

  CHECK(ng.degrees(0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(ng.degrees(1) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(ng.rows(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(ng.rows(0, 1) == doctest::Approx(1.5).epsilon(1e-14));

  // Rows integrate to one: (1/M) sum_j rows(i,j) = 1.
  for (int i = 0; i < 2; ++i) {
    CHECK(ng.rows.row(i).sum() * grid.weight() == doctest::Approx(1.0).epsilon(1e-14));
  }

  const Eigen::VectorXd w = neighborhood_weights(ng, 0);
  CHECK(w(0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(w(1) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-14));

  CHECK(min_degree_bound(g, grid) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(min_degree_bound(ng) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("diagonal kernel isolates each block") {
  const graphon g = graphon::step_from_matrix(two_by_two(2.0, 0.0, 0.0, 2.0));
  const label_grid grid(2);
  const normalized_graphon ng = normalize(g, grid);
  CHECK(ng.degrees(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(ng.rows(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(ng.rows(0, 1) == 0.0);
  const Eigen::VectorXd w = neighborhood_weights(ng, 0);
  CHECK(w(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(w(1) == 0.0);
}

TEST_CASE("step kernels refine exactly onto finer grids") {
  const graphon g = graphon::step_from_matrix(two_by_two(1.0, 3.0, 3.0, 1.0));
  const label_grid fine(8);
  const Eigen::MatrixXd v = g.values_on(fine);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      const double expect = ((i < 4) == (j < 4)) ? 1.0 : 3.0;
      CHECK(v(i, j) == expect);
    }
  }
  // Normalizing on the finer grid reproduces the same degrees.
  const normalized_graphon ng = normalize(g, fine);
  CHECK(ng.degrees(0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(ng.degrees(7) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("grid kernels sample midpoints and reject mismatched grids") {
  const graphon g =
      graphon::grid_from_function([](double u, double v) { return u + v; }, 4);
  const label_grid grid(4);
  const Eigen::MatrixXd v = g.values_on(grid);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      CHECK(v(i, j) == doctest::Approx(grid.midpoint(i) + grid.midpoint(j)).epsilon(1e-14));
    }
  }
  CHECK(g.bound() == doctest::Approx(2.0 * grid.midpoint(3)).epsilon(1e-14));
  CHECK_THROWS_AS((void)g.values_on(label_grid(8)), grid_mismatch);
}

TEST_CASE("l1 distance and blends are exactly linear for step kernels") {
  const graphon a = graphon::step_from_matrix(two_by_two(1.0, 3.0, 3.0, 1.0));
  const graphon b = graphon::step_from_matrix(Eigen::MatrixXd::Constant(2, 2, 2.0));
  const label_grid grid(2);

  // |1-2| on all four cells with weight 1/4 each.
  CHECK(l1_distance(a, b, grid) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(l1_distance(a, a, grid) == 0.0);

  for (const double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const graphon mid = graphon::blend_step(a, b, t);
    CHECK(l1_distance(mid, a, grid) == doctest::Approx(t * 1.0).epsilon(1e-12));
    CHECK(l1_distance(mid, b, grid) == doctest::Approx((1.0 - t) * 1.0).epsilon(1e-12));
  }

  // Row distance: |1-3|/2 + |3-1|/2 = 2.
  CHECK(row_l1_distance(a, grid, 0, 1) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(row_l1_distance(a, grid, 0, 0) == 0.0);
}

TEST_CASE("blending mixed resolutions lands on the common refinement") {
  const graphon a = graphon::step_from_matrix(Eigen::MatrixXd::Constant(1, 1, 2.0));
  const graphon b = graphon::step_from_matrix(two_by_two(1.0, 3.0, 3.0, 1.0));
  const graphon mid = graphon::blend_step(a, b, 0.5);
  CHECK(mid.resolution() == 2);
  CHECK(mid.at_cells(0, 0) == doctest::Approx(1.5).epsilon(1e-14));
  CHECK(mid.at_cells(0, 1) == doctest::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("malformed kernels are rejected with typed errors") {
  CHECK_THROWS_AS((void)graphon::step_from_matrix(two_by_two(1.0, 2.0, 3.0, 1.0)),
                  asymmetric_matrix);
  CHECK_THROWS_AS((void)graphon::step_from_matrix(two_by_two(1.0, -0.5, -0.5, 1.0)),
                  negative_entry);
  CHECK_THROWS_AS((void)graphon::step_from_matrix(Eigen::MatrixXd(0, 0)), config_error);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)graphon::step_from_matrix(two_by_two(nan, 1.0, 1.0, 1.0)),
                  config_error);
}

TEST_CASE("an isolated block degenerates the degree") {
  const graphon g = graphon::step_from_matrix(two_by_two(1.0, 0.0, 0.0, 0.0));
  const label_grid grid(2);
  CHECK_THROWS_AS((void)normalize(g, grid), degenerate_degree);
  CHECK(std::isinf(min_degree_bound(g, grid)));
}

TEST_CASE("JSON round trip preserves kind and values") {
  const graphon step = graphon::step_from_matrix(two_by_two(1.0, 3.0, 3.0, 1.0));
  const graphon step2 = graphon_from_json(graphon_to_json(step));
  CHECK(step2.storage() == graphon::kind::step);
  CHECK((step2.values() - step.values()).cwiseAbs().maxCoeff() == 0.0);

  const graphon grid =
      graphon::grid_from_function([](double u, double v) { return 1.0 + u * v; }, 5);
  const graphon grid2 = graphon_from_json(graphon_to_json(grid));
  CHECK(grid2.storage() == graphon::kind::grid);
  CHECK(grid2.resolution() == 5);
  CHECK((grid2.values() - grid.values()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("JSON schema violations raise config errors") {
  CHECK_THROWS_AS((void)graphon_from_json("not json"), config_error);
  CHECK_THROWS_AS((void)graphon_from_json(R"({"kind":"other"})"), config_error);
  CHECK_THROWS_AS((void)graphon_from_json(R"({"kind":"step"})"), config_error);
  CHECK_THROWS_AS((void)graphon_from_json(R"({"kind":"step","matrix":[[1,2]]})"),
                  config_error);
  CHECK_THROWS_AS(
      (void)graphon_from_json(R"({"kind":"grid","resolution":3,"values":[[1]]})"),
      config_error);
  // Value-level violations keep their specific types.
  CHECK_THROWS_AS((void)graphon_from_json(R"({"kind":"step","matrix":[[1,2],[3,1]]})"),
                  asymmetric_matrix);
}
