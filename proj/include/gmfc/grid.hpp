#pragma once

#include <cmath>
#include <vector>

#include "gmfc/errors.hpp"

namespace gmfc {

/// Uniform quadrature grid on the label space [0,1].
///
/// Cell i (0-based) is (i/M, (i+1)/M], except cell 0 which is [0, 1/M];
/// quadrature uses the midpoints (i + 1/2)/M with equal weights 1/M.
class label_grid {
 public:
  explicit label_grid(int cells) : cells_(cells) {
    if (cells < 1) throw config_error("label_grid: need at least one cell");
  }

  [[nodiscard]] int size() const { return cells_; }

  [[nodiscard]] double midpoint(int i) const {
    return (static_cast<double>(i) + 0.5) / static_cast<double>(cells_);
  }

  [[nodiscard]] double weight() const { return 1.0 / static_cast<double>(cells_); }

  /// Index of the cell containing label u in [0,1] (half-open convention).
  [[nodiscard]] int cell_of(double u) const {
    if (u < 0.0 || u > 1.0) throw config_error("label_grid: label outside [0,1]");
    if (u == 0.0) return 0;
    const int i = static_cast<int>(std::ceil(u * cells_)) - 1;
    return i < 0 ? 0 : (i >= cells_ ? cells_ - 1 : i);
  }

  [[nodiscard]] std::vector<double> midpoints() const {
    std::vector<double> m(static_cast<std::size_t>(cells_));
    for (int i = 0; i < cells_; ++i) m[static_cast<std::size_t>(i)] = midpoint(i);
    return m;
  }

 private:
  int cells_;
};

}  // namespace gmfc
