#include "gmfc/graphon.hpp"

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

namespace gmfc {

namespace {

constexpr double k_degree_floor = 1e-10;

void check_entries(const Eigen::MatrixXd& m, bool require_symmetric) {
  if (m.rows() == 0 || m.rows() != m.cols()) {
    throw config_error("graphon: value matrix must be square and non-empty");
  }
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      if (!std::isfinite(v)) throw config_error("graphon: non-finite entry");
      if (v < 0.0) {
        std::ostringstream os;
        os << "graphon: negative entry " << v << " at (" << i << "," << j << ")";
        throw negative_entry(os.str());
      }
      if (require_symmetric && m(i, j) != m(j, i)) {
        std::ostringstream os;
        os << "graphon: matrix not symmetric at (" << i << "," << j << "): " << m(i, j)
           << " vs " << m(j, i);
        throw asymmetric_matrix(os.str());
      }
    }
  }
}

}  // namespace

graphon graphon::step_from_matrix(const Eigen::MatrixXd& zeta) {
  check_entries(zeta, true);
  return graphon(kind::step, zeta);
}

graphon graphon::grid_from_function(const std::function<double(double, double)>& g,
                                    int resolution) {
  label_grid grid(resolution);
  Eigen::MatrixXd v(resolution, resolution);
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      v(i, j) = g(grid.midpoint(i), grid.midpoint(j));
    }
  }
  check_entries(v, true);
  return graphon(kind::grid, std::move(v));
}

graphon graphon::grid_from_values(const Eigen::MatrixXd& values) {
  check_entries(values, true);
  return graphon(kind::grid, values);
}

Eigen::MatrixXd graphon::values_on(const label_grid& grid) const {
  const int m = grid.size();
  if (kind_ == kind::grid) {
    if (resolution() != m) {
      std::ostringstream os;
      os << "graphon: grid-sampled kernel at resolution " << resolution()
         << " cannot be evaluated on a " << m << "-cell grid";
      throw grid_mismatch(os.str());
    }
    return values_;
  }
  // Step kernel: look up the cell containing each midpoint.
  const int r = resolution();
  label_grid own(r);
  Eigen::MatrixXd out(m, m);
  for (int i = 0; i < m; ++i) {
    const int ci = own.cell_of(grid.midpoint(i));
    for (int j = 0; j < m; ++j) {
      out(i, j) = values_(ci, own.cell_of(grid.midpoint(j)));
    }
  }
  return out;
}

graphon graphon::blend_step(const graphon& a, const graphon& b, double t) {
  if (a.storage() != kind::step || b.storage() != kind::step) {
    throw config_error("graphon: blending requires two step kernels");
  }
  const int ra = a.resolution();
  const int rb = b.resolution();
  const int r = std::lcm(ra, rb);
  label_grid fine(r);
  const Eigen::MatrixXd va = a.values_on(fine);
  const Eigen::MatrixXd vb = b.values_on(fine);
  return step_from_matrix((1.0 - t) * va + t * vb);
}

normalized_graphon normalize(const graphon& g, const label_grid& grid) {
  const Eigen::MatrixXd v = g.values_on(grid);
  const int m = grid.size();
  Eigen::VectorXd deg(m);
  for (int i = 0; i < m; ++i) {
    deg(i) = v.row(i).sum() * grid.weight();
    if (deg(i) < k_degree_floor) {
      std::ostringstream os;
      os << "graphon: degree " << deg(i) << " at label " << grid.midpoint(i)
         << " below positivity floor " << k_degree_floor;
      throw degenerate_degree(os.str());
    }
  }
  Eigen::MatrixXd rows(m, m);
  for (int i = 0; i < m; ++i) rows.row(i) = v.row(i) / deg(i);
  return normalized_graphon{grid, std::move(deg), std::move(rows)};
}

double min_degree_bound(const graphon& g, const label_grid& grid) {
  const Eigen::MatrixXd v = g.values_on(grid);
  double sup = 0.0;
  for (int i = 0; i < grid.size(); ++i) {
    const double deg = v.row(i).sum() * grid.weight();
    if (deg <= 0.0) return std::numeric_limits<double>::infinity();
    sup = std::max(sup, 1.0 / deg);
  }
  return sup;
}

double min_degree_bound(const normalized_graphon& ng) {
  double sup = 0.0;
  for (int i = 0; i < ng.grid.size(); ++i) {
    const double deg = ng.rows.row(i).sum() * ng.grid.weight();
    if (deg <= 0.0) return std::numeric_limits<double>::infinity();
    sup = std::max(sup, 1.0 / deg);
  }
  return sup;
}

double l1_distance(const graphon& g, const graphon& h, const label_grid& grid) {
  const Eigen::MatrixXd vg = g.values_on(grid);
  const Eigen::MatrixXd vh = h.values_on(grid);
  const double w = grid.weight();
  return (vg - vh).cwiseAbs().sum() * w * w;
}

double row_l1_distance(const graphon& g, const label_grid& grid, int cell_a,
                       int cell_b) {
  const Eigen::MatrixXd v = g.values_on(grid);
  return (v.row(cell_a) - v.row(cell_b)).cwiseAbs().sum() * grid.weight();
}

Eigen::VectorXd neighborhood_weights(const normalized_graphon& ng, int i) {
  return ng.rows.row(i).transpose() * ng.grid.weight();
}

graphon graphon_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("graphon: bad JSON: ") + e.what());
  }
  const std::string kind = j.value("kind", "");
  auto to_matrix = [](const nlohmann::json& rows) {
    if (!rows.is_array() || rows.empty()) {
      throw config_error("graphon: value matrix must be a non-empty array of rows");
    }
    const auto n = rows.size();
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!rows[i].is_array() || rows[i].size() != n) {
        throw config_error("graphon: value matrix must be square");
      }
      for (std::size_t k = 0; k < n; ++k) {
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
            rows[i][k].get<double>();
      }
    }
    return m;
  };
  if (kind == "step") {
    if (!j.contains("matrix")) throw config_error("graphon: step kind needs 'matrix'");
    return graphon::step_from_matrix(to_matrix(j.at("matrix")));
  }
  if (kind == "grid") {
    if (!j.contains("values")) throw config_error("graphon: grid kind needs 'values'");
    const auto v = to_matrix(j.at("values"));
    if (j.contains("resolution") &&
        j.at("resolution").get<int>() != static_cast<int>(v.rows())) {
      throw config_error("graphon: 'resolution' disagrees with values shape");
    }
    return graphon::grid_from_values(v);
  }
  throw config_error("graphon: 'kind' must be \"step\" or \"grid\"");
}

std::string graphon_to_json(const graphon& g) {
  nlohmann::ordered_json j;
  j["kind"] = g.storage() == graphon::kind::step ? "step" : "grid";
  if (g.storage() == graphon::kind::grid) j["resolution"] = g.resolution();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < g.values().rows(); ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (Eigen::Index k = 0; k < g.values().cols(); ++k) row.push_back(g.values()(i, k));
    rows.push_back(row);
  }
  j[g.storage() == graphon::kind::step ? "matrix" : "values"] = rows;
  return j.dump(2);
}

}  // namespace gmfc
