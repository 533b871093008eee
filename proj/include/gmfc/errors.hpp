#pragma once

#include <stdexcept>
#include <string>

namespace gmfc {

/// Base class for all library errors.  Carries a short machine-readable code
/// (stable across releases) plus a human-readable message with context.
class error : public std::runtime_error {
 public:
  error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  [[nodiscard]] const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// --- kernel / graphon ---
struct degenerate_degree : error {
  explicit degenerate_degree(const std::string& w) : error("DegenerateDegree", w) {}
};
struct asymmetric_matrix : error {
  explicit asymmetric_matrix(const std::string& w) : error("AsymmetricMatrix", w) {}
};
struct negative_entry : error {
  explicit negative_entry(const std::string& w) : error("NegativeEntry", w) {}
};
struct grid_mismatch : error {
  explicit grid_mismatch(const std::string& w) : error("GridMismatch", w) {}
};

// --- measures ---
struct dimension_mismatch : error {
  explicit dimension_mismatch(const std::string& w) : error("DimensionMismatch", w) {}
};
struct weight_sum_violation : error {
  explicit weight_sum_violation(const std::string& w) : error("WeightSumViolation", w) {}
};
struct empty_flow : error {
  explicit empty_flow(const std::string& w) : error("EmptyFlow", w) {}
};

// --- models ---
struct shape_mismatch : error {
  explicit shape_mismatch(const std::string& w) : error("ShapeMismatch", w) {}
};
struct non_convergence : error {
  explicit non_convergence(const std::string& w) : error("NonConvergence", w) {}
};
struct non_convex_detected : error {
  explicit non_convex_detected(const std::string& w) : error("NonConvexDetected", w) {}
};

// --- forward simulation ---
struct non_finite_state : error {
  explicit non_finite_state(const std::string& w) : error("NonFiniteState", w) {}
};
struct picard_divergence : error {
  explicit picard_divergence(const std::string& w) : error("PicardDivergence", w) {}
};

// --- adjoint / solver ---
struct regression_singular : error {
  explicit regression_singular(const std::string& w) : error("RegressionSingular", w) {}
};
struct adjoint_divergence : error {
  explicit adjoint_divergence(const std::string& w) : error("AdjointDivergence", w) {}
};
struct outer_divergence : error {
  explicit outer_divergence(const std::string& w) : error("OuterDivergence", w) {}
};
struct riccati_blowup : error {
  explicit riccati_blowup(const std::string& w) : error("RiccatiBlowup", w) {}
};

// --- finite systems ---
struct zero_row : error {
  explicit zero_row(const std::string& w) : error("ZeroRow", w) {}
};
struct label_mismatch : error {
  explicit label_mismatch(const std::string& w) : error("LabelMismatch", w) {}
};

// --- experiments ---
struct boundary_case : error {
  explicit boundary_case(const std::string& w) : error("BoundaryCase", w) {}
};
struct non_positive_error : error {
  explicit non_positive_error(const std::string& w) : error("NonPositiveError", w) {}
};

// --- configuration / CLI ---
struct config_error : error {
  explicit config_error(const std::string& w) : error("ConfigError", w) {}
};

}  // namespace gmfc
