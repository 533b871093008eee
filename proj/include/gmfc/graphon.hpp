#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>

#include "gmfc/grid.hpp"

namespace gmfc {

/// Symmetric, nonnegative, bounded interaction kernel on [0,1]^2.
///
/// Two storage kinds:
///  - step:  piecewise constant on an R x R uniform cell partition,
///  - grid:  midpoint samples of an analytic kernel at a fixed resolution
///           (evaluable only on a matching label grid).
class graphon {
 public:
  enum class kind { step, grid };

  /// Builds a step kernel from a symmetric nonnegative block matrix.
  static graphon step_from_matrix(const Eigen::MatrixXd& zeta);

  /// Samples an analytic kernel at the midpoints of a `resolution`-cell grid.
  static graphon grid_from_function(const std::function<double(double, double)>& g,
                                    int resolution);

  /// Wraps precomputed midpoint samples (must be symmetric nonnegative).
  static graphon grid_from_values(const Eigen::MatrixXd& values);

  [[nodiscard]] kind storage() const { return kind_; }
  [[nodiscard]] int resolution() const { return static_cast<int>(values_.rows()); }
  [[nodiscard]] const Eigen::MatrixXd& values() const { return values_; }

  /// Essential supremum of the kernel (max stored value).
  [[nodiscard]] double bound() const { return values_.maxCoeff(); }

  /// Kernel value at (u,v).  Step kernels evaluate anywhere via cell lookup;
  /// grid kernels only at midpoints of their own resolution (grid_mismatch
  /// otherwise), checked through values_on().
  [[nodiscard]] double at_cells(int i, int j) const { return values_(i, j); }

  /// Midpoint values on a quadrature grid: out(i,j) = G(u_i, u_j).
  [[nodiscard]] Eigen::MatrixXd values_on(const label_grid& grid) const;

  /// Convex combination (1-t) * a + t * b of two step kernels on a common
  /// refinement; used to build homotopy families.
  static graphon blend_step(const graphon& a, const graphon& b, double t);

 private:
  graphon(kind k, Eigen::MatrixXd v) : kind_(k), values_(std::move(v)) {}
  kind kind_;
  Eigen::MatrixXd values_;
};

/// Row-normalized kernel on a quadrature grid together with the degree
/// function it was normalized by.  Rows integrate to one by construction.
struct normalized_graphon {
  label_grid grid;
  Eigen::VectorXd degrees;  ///< deg(u_i) = (1/M) sum_j G(u_i,u_j)
  Eigen::MatrixXd rows;     ///< rows(i,j) = G(u_i,u_j) / deg(u_i)
};

/// Row-normalizes a kernel on the given grid.  Throws degenerate_degree if
/// any degree falls below the positivity floor 1e-10.
[[nodiscard]] normalized_graphon normalize(const graphon& g, const label_grid& grid);

/// sup_u 1 / deg(u) over the grid; +infinity when some degree is zero.
[[nodiscard]] double min_degree_bound(const graphon& g, const label_grid& grid);

/// Same quantity evaluated directly on an already-normalized kernel's rows.
[[nodiscard]] double min_degree_bound(const normalized_graphon& ng);

/// L1([0,1]^2) distance by double midpoint quadrature on the grid.
[[nodiscard]] double l1_distance(const graphon& g, const graphon& h,
                                 const label_grid& grid);

/// L1([0,1]) distance between two rows of a kernel: (1/M) sum_j |G(u_a,.) - G(u_b,.)|.
[[nodiscard]] double row_l1_distance(const graphon& g, const label_grid& grid,
                                     int cell_a, int cell_b);

/// Quadrature weights of the neighborhood measure seen from grid cell i:
/// w_j = rows(i,j)/M, summing to one.
[[nodiscard]] Eigen::VectorXd neighborhood_weights(const normalized_graphon& ng, int i);

/// Parses {"kind":"step","matrix":[[..]]} or
/// {"kind":"grid","resolution":M,"values":[[..]]} from JSON text.
[[nodiscard]] graphon graphon_from_json(const std::string& text);

/// Serializes back to the JSON schema accepted by graphon_from_json.
[[nodiscard]] std::string graphon_to_json(const graphon& g);

}  // namespace gmfc
