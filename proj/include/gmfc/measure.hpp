#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gmfc/graphon.hpp"
#include "gmfc/grid.hpp"

namespace gmfc {

constexpr double k_weight_tol = 1e-12;

/// Weighted empirical measure on R^d: one point per row, weights summing to
/// one (uniform 1/P when absent).
struct particle_cloud {
  Eigen::MatrixXd points;                   ///< P x d
  std::optional<Eigen::VectorXd> weights;   ///< sums to 1 within 1e-12 if present

  [[nodiscard]] int size() const { return static_cast<int>(points.rows()); }
  [[nodiscard]] int dim() const { return static_cast<int>(points.cols()); }
  [[nodiscard]] double weight(int p) const {
    return weights ? (*weights)(p) : 1.0 / static_cast<double>(size());
  }

  /// Uniform-weight cloud over the given points.
  static particle_cloud uniform(Eigen::MatrixXd pts);

  /// Weighted cloud; validates the weight vector (nonnegative, sums to one).
  static particle_cloud weighted(Eigen::MatrixXd pts, Eigen::VectorXd w);
};

/// Label-indexed family of particle clouds over a shared time grid.
struct measure_flow {
  label_grid grid;
  std::vector<double> times;                        ///< t_0 = 0 < ... < t_N = T
  std::vector<std::vector<particle_cloud>> clouds;  ///< [label][time]

  [[nodiscard]] int labels() const { return grid.size(); }
  [[nodiscard]] int steps() const { return static_cast<int>(times.size()) - 1; }

  /// Shape and invariant checks; throws empty_flow / dimension_mismatch.
  void validate() const;
};

/// Read-only view of a probability measure as consumed by model coefficients:
/// moments plus sampling.  Borrows the underlying clouds; keep them alive.
class mu_view {
 public:
  /// View of a single cloud (e.g. an empirical neighborhood).
  static mu_view from_cloud(const particle_cloud* c);

  /// Graphon-weighted mixture over the label clouds of a flow at one time.
  static mu_view from_mixture(const measure_flow* f, Eigen::VectorXd label_weights,
                              int t_index);

  /// Deterministic view carrying only a mean (for limit systems and oracles).
  static mu_view from_mean(Eigen::VectorXd mean);

  [[nodiscard]] int dim() const { return static_cast<int>(mean_.size()); }
  [[nodiscard]] const Eigen::VectorXd& mean() const { return mean_; }

  /// Coordinate-wise moment: order 1 gives the signed mean, any other order p
  /// gives E|x_i|^p.  Deterministic views only support order 1.
  [[nodiscard]] Eigen::VectorXd moment(double order) const;

  /// Draws `count` points (two-level draw for mixtures) using counter-based
  /// randomness under the given seed and stream unit.
  [[nodiscard]] Eigen::MatrixXd sample(int count, std::uint64_t seed,
                                       std::uint64_t unit) const;

  /// Applies fn(point, weight) over all support atoms.
  void for_each(const std::function<void(const Eigen::VectorXd&, double)>& fn) const;

  /// Materializes the view as a single weighted cloud.
  [[nodiscard]] particle_cloud materialize() const;

  [[nodiscard]] bool deterministic() const { return kind_ == kind::mean_only; }

 private:
  enum class kind { cloud, mixture, mean_only };
  kind kind_ = kind::mean_only;
  const particle_cloud* cloud_ = nullptr;
  const measure_flow* flow_ = nullptr;
  Eigen::VectorXd label_weights_;
  int t_index_ = 0;
  Eigen::VectorXd mean_;
};

/// Exact weighted union of the label clouds at time t under the neighborhood
/// weights of grid cell `label` (no resampling).
[[nodiscard]] particle_cloud aggregate_neighborhood(const measure_flow& flow,
                                                    const normalized_graphon& ng,
                                                    int label, int t_index);

/// Draws `count` representative points from the mixture over labels at time
/// t_index: first a label by `label_weights`, then one of its particles.
[[nodiscard]] Eigen::MatrixXd sample_representative(const measure_flow& flow,
                                                    const Eigen::VectorXd& label_weights,
                                                    int t_index, int count,
                                                    std::uint64_t seed);

/// 2-Wasserstein distance between weighted clouds: exact quantile coupling in
/// dimension one, sliced estimate (default 64 seeded directions) otherwise.
[[nodiscard]] double wasserstein2(const particle_cloud& a, const particle_cloud& b,
                                  std::uint64_t seed = 0, int slices = 64);

/// Weighted coordinate-wise moment vector of a cloud (order 1: mean; order p:
/// E|x_i|^p).
[[nodiscard]] Eigen::VectorXd moments(const particle_cloud& c, double order);

/// Weighted empirical measure over given states with one row of an
/// interaction matrix as weights (must sum to one).
[[nodiscard]] particle_cloud empirical_neighborhood(const Eigen::MatrixXd& states,
                                                    const Eigen::VectorXd& kappa_row);

/// CSV round-trip for clouds: header "weight,x1,..,xd", one row per particle.
void save_cloud_csv(const particle_cloud& c, const std::string& path);
[[nodiscard]] particle_cloud load_cloud_csv(const std::string& path);

/// Writes a flow as <dir>/label_<i>/t_<k>.csv plus <dir>/manifest.json.
void save_flow(const measure_flow& flow, const std::string& dir);

}  // namespace gmfc
