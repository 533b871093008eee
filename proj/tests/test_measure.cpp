#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "gmfc/errors.hpp"
#include "gmfc/measure.hpp"

using namespace gmfc;

namespace {

particle_cloud cloud1d(std::initializer_list<double> xs) {
  Eigen::MatrixXd pts(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (const double x : xs) pts(i++, 0) = x;
  return particle_cloud::uniform(std::move(pts));
}

/// Brute-force W2 between two equal-size uniform 1-d clouds: the optimal
/// coupling is the monotone (sorted) assignment.
double w2_sorted(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += (a[i] - b[i]) * (a[i] - b[i]);
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

measure_flow tiny_flow() {
  measure_flow flow{label_grid(2), {0.0, 1.0}, {}};
  flow.clouds.resize(2);
  for (int u = 0; u < 2; ++u) {
    Eigen::MatrixXd pts(2, 1);
    pts << 1.0 + 2.0 * u, 3.0 + 2.0 * u;  // label 0: {1,3}, label 1: {3,5}
    flow.clouds[static_cast<std::size_t>(u)].push_back(particle_cloud::uniform(pts));
    flow.clouds[static_cast<std::size_t>(u)].push_back(particle_cloud::uniform(pts));
  }
  return flow;
}

}  // namespace

TEST_CASE("cloud constructors validate their inputs") {
  Eigen::MatrixXd pts(2, 1);
  pts << 1.0, 2.0;

  CHECK_THROWS_AS((void)particle_cloud::uniform(Eigen::MatrixXd(0, 1)),
                  dimension_mismatch);

  Eigen::VectorXd short_w(1);
  short_w << 1.0;
  CHECK_THROWS_AS((void)particle_cloud::weighted(pts, short_w), dimension_mismatch);

  Eigen::VectorXd neg_w(2);
  neg_w << 1.5, -0.5;
  CHECK_THROWS_AS((void)particle_cloud::weighted(pts, neg_w), weight_sum_violation);

  Eigen::VectorXd off_w(2);
  off_w << 0.6, 0.6;
  CHECK_THROWS_AS((void)particle_cloud::weighted(pts, off_w), weight_sum_violation);

  Eigen::VectorXd ok_w(2);
  ok_w << 0.25, 0.75;
  const particle_cloud c = particle_cloud::weighted(pts, ok_w);
  CHECK(c.weight(0) == 0.25);
  CHECK(c.weight(1) == 0.75);
  CHECK(cloud1d({1.0, 2.0}).weight(1) == 0.5);
}

TEST_CASE("weighted moments against hand arithmetic") {
  Eigen::MatrixXd pts(2, 1);
  pts << 1.0, 3.0;
  Eigen::VectorXd w(2);
  w << 0.25, 0.75;
  const particle_cloud c = particle_cloud::weighted(pts, w);

  CHECK(moments(c, 1.0)(0) == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(moments(c, 2.0)(0) == doctest::Approx(0.25 * 1.0 + 0.75 * 9.0).epsilon(1e-14));
  CHECK(moments(c, 3.0)(0) == doctest::Approx(0.25 * 1.0 + 0.75 * 27.0).epsilon(1e-14));

  // Order one is signed, other orders are absolute.
  const particle_cloud s = cloud1d({-2.0, 2.0});
  CHECK(moments(s, 1.0)(0) == 0.0);
  CHECK(moments(s, 2.0)(0) == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("one-dimensional W2 equals the sorted assignment") {
  const std::vector<double> xs = {0.3, -1.2, 2.0, 0.0, 5.5, -0.7, 1.1, 0.9};
  const std::vector<double> ys = {1.0, 0.2, -2.2, 3.3, 0.4, 0.6, -1.0, 2.5};
  Eigen::MatrixXd ax(8, 1), bx(8, 1);
  for (int i = 0; i < 8; ++i) {
    ax(i, 0) = xs[static_cast<std::size_t>(i)];
    bx(i, 0) = ys[static_cast<std::size_t>(i)];
  }
  const particle_cloud a = particle_cloud::uniform(ax);
  const particle_cloud b = particle_cloud::uniform(bx);

  CHECK(wasserstein2(a, b) == doctest::Approx(w2_sorted(xs, ys)).epsilon(1e-12));
  CHECK(wasserstein2(a, a) == 0.0);
  CHECK(wasserstein2(a, b) == doctest::Approx(wasserstein2(b, a)).epsilon(1e-12));
}

TEST_CASE("W2 between mismatched sizes splits mass across quantiles") {
  // {0} vs {-1, 1}: transport half the atom to each side, cost 1.
  const particle_cloud a = cloud1d({0.0});
  const particle_cloud b = cloud1d({-1.0, 1.0});
  CHECK(wasserstein2(a, b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("translation shifts W2 by exactly the offset in one dimension") {
  const particle_cloud a = cloud1d({0.1, -0.4, 2.2, 1.3});
  Eigen::MatrixXd shifted = a.points;
  shifted.array() += 0.75;
  const particle_cloud b = particle_cloud::uniform(shifted);
  CHECK(wasserstein2(a, b) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("sliced W2 vanishes on identical clouds and sees translations") {
  Eigen::MatrixXd pts(64, 2);
  for (int i = 0; i < 64; ++i) {
    pts(i, 0) = std::sin(0.37 * i);
    pts(i, 1) = std::cos(1.13 * i);
  }
  const particle_cloud a = particle_cloud::uniform(pts);
  CHECK(wasserstein2(a, a, 5) == 0.0);

  // For a pure translation by c every projected distance is |theta . c|, so
  // the sliced root-mean-square converges to |c|/sqrt(d) in d dimensions.
  Eigen::MatrixXd moved = pts;
  moved.col(0).array() += 1.0;
  const particle_cloud b = particle_cloud::uniform(moved);
  const double est = wasserstein2(a, b, 5, 256);
  CHECK(est == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.12));

  CHECK_THROWS_AS((void)wasserstein2(a, cloud1d({0.0})), dimension_mismatch);
}

TEST_CASE("measure views expose moments and atoms consistently") {
  Eigen::MatrixXd pts(2, 1);
  pts << 1.0, 3.0;
  Eigen::VectorXd w(2);
  w << 0.25, 0.75;
  const particle_cloud c = particle_cloud::weighted(pts, w);

  const mu_view view = mu_view::from_cloud(&c);
  CHECK_FALSE(view.deterministic());
  CHECK(view.mean()(0) == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(view.moment(2.0)(0) == doctest::Approx(7.0).epsilon(1e-14));

  double mass = 0.0, mean = 0.0;
  view.for_each([&](const Eigen::VectorXd& x, double wt) {
    mass += wt;
    mean += wt * x(0);
  });
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(mean == doctest::Approx(2.5).epsilon(1e-14));

  const particle_cloud back = view.materialize();
  CHECK(moments(back, 1.0)(0) == doctest::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("deterministic views carry the mean and nothing else") {
  Eigen::VectorXd m(1);
  m << 1.25;
  const mu_view view = mu_view::from_mean(m);
  CHECK(view.deterministic());
  CHECK(view.mean()(0) == 1.25);
  CHECK(view.moment(1.0)(0) == 1.25);
  CHECK_THROWS_AS((void)view.moment(2.0), config_error);
  CHECK_THROWS_AS((void)view.sample(4, 1, 0), config_error);
}

TEST_CASE("mixture views average label clouds by the supplied weights") {
  const measure_flow flow = tiny_flow();
  Eigen::VectorXd lw(2);
  lw << 0.25, 0.75;
  const mu_view view = mu_view::from_mixture(&flow, lw, 0);
  // Label means are 2 and 4.
  CHECK(view.mean()(0) == doctest::Approx(0.25 * 2.0 + 0.75 * 4.0).epsilon(1e-14));
  CHECK(view.moment(2.0)(0) ==
        doctest::Approx(0.25 * 5.0 + 0.75 * 17.0).epsilon(1e-14));

  const particle_cloud mixed = view.materialize();
  CHECK(mixed.size() == 4);
  CHECK(moments(mixed, 1.0)(0) == doctest::Approx(3.5).epsilon(1e-14));
}

TEST_CASE("empirical neighborhoods reuse interaction rows as weights") {
  Eigen::MatrixXd states(2, 1);
  states << 1.0, 3.0;
  Eigen::VectorXd row(2);
  row << 0.25, 0.75;
  const particle_cloud nb = empirical_neighborhood(states, row);
  CHECK(moments(nb, 1.0)(0) == doctest::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("neighborhood aggregation matches the explicit weighted union") {
  const measure_flow flow = tiny_flow();
  const graphon g = graphon::step_from_matrix([] {
    Eigen::MatrixXd z(2, 2);
    z << 1.0, 3.0, 3.0, 1.0;
    return z;
  }());
  const normalized_graphon ng = normalize(g, flow.grid);

  const particle_cloud agg = aggregate_neighborhood(flow, ng, 0, 0);
  // Weights [0.25, 0.75] over label means [2, 4].
  CHECK(moments(agg, 1.0)(0) == doctest::Approx(3.5).epsilon(1e-12));
  double mass = 0.0;
  for (int p = 0; p < agg.size(); ++p) mass += agg.weight(p);
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS((void)aggregate_neighborhood(flow, ng, 0, 5), config_error);
}

TEST_CASE("flow validation rejects inconsistent shapes") {
  measure_flow flow = tiny_flow();
  CHECK_NOTHROW(flow.validate());

  measure_flow bad_times = tiny_flow();
  bad_times.times = {0.5, 1.0};
  CHECK_THROWS_AS(bad_times.validate(), config_error);

  measure_flow bad_counts = tiny_flow();
  bad_counts.clouds[0].pop_back();
  CHECK_THROWS_AS(bad_counts.validate(), dimension_mismatch);

  const measure_flow empty{label_grid(1), {}, {}};
  CHECK_THROWS_AS(empty.validate(), empty_flow);
}

TEST_CASE("sampling a view is deterministic in the seed") {
  const measure_flow flow = tiny_flow();
  Eigen::VectorXd lw(2);
  lw << 0.5, 0.5;
  const mu_view view = mu_view::from_mixture(&flow, lw, 0);
  const Eigen::MatrixXd s1 = view.sample(16, 77, 3);
  const Eigen::MatrixXd s2 = view.sample(16, 77, 3);
  CHECK((s1 - s2).cwiseAbs().maxCoeff() == 0.0);
  const Eigen::MatrixXd s3 = view.sample(16, 78, 3);
  CHECK((s1 - s3).cwiseAbs().maxCoeff() > 0.0);

  // Every sampled point is one of the four support atoms.
  for (int p = 0; p < s1.rows(); ++p) {
    const double x = s1(p, 0);
    CHECK((x == 1.0 || x == 3.0 || x == 5.0));
  }
}

TEST_CASE("cloud CSV round trip preserves weights and points") {
  Eigen::MatrixXd pts(3, 2);
  pts << 0.25, -1.5, 2.0, 0.125, -3.75, 4.5;
  Eigen::VectorXd w(3);
  w << 0.2, 0.3, 0.5;
  const particle_cloud c = particle_cloud::weighted(pts, w);

  const std::string path = "test_measure_cloud_roundtrip.csv";
  save_cloud_csv(c, path);
  const particle_cloud back = load_cloud_csv(path);
  std::remove(path.c_str());

  REQUIRE(back.size() == 3);
  REQUIRE(back.dim() == 2);
  CHECK((back.points - pts).cwiseAbs().maxCoeff() < 1e-12);
  for (int p = 0; p < 3; ++p) CHECK(back.weight(p) == doctest::Approx(w(p)).epsilon(1e-12));

  CHECK_THROWS_AS((void)load_cloud_csv("no_such_file.csv"), config_error);
}
