#include "gmfc/measure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "gmfc/rng.hpp"

namespace gmfc {

namespace {

void check_weights(const Eigen::VectorXd& w, Eigen::Index n) {
  if (w.size() != n) {
    throw dimension_mismatch("particle_cloud: weight count != particle count");
  }
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(w(i) >= 0.0)) {
      throw weight_sum_violation("particle_cloud: negative or NaN weight");
    }
    sum += w(i);
  }
  if (std::abs(sum - 1.0) > k_weight_tol) {
    std::ostringstream os;
    os << "particle_cloud: weights sum to " << sum << ", expected 1 within "
       << k_weight_tol;
    throw weight_sum_violation(os.str());
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Exact squared 2-Wasserstein distance between weighted samples on R.
double w2_squared_1d(std::vector<std::pair<double, double>>& a,
                     std::vector<std::pair<double, double>>& b) {
  auto by_position = [](const auto& l, const auto& r) { return l.first < r.first; };
  std::sort(a.begin(), a.end(), by_position);
  std::sort(b.begin(), b.end(), by_position);
  // Merge the two quantile functions: transport min(mass_a, mass_b) at a time.
  std::size_t i = 0, j = 0;
  double ra = a[0].second, rb = b[0].second, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double m = std::min(ra, rb);
    const double d = a[i].first - b[j].first;
    acc += m * d * d;
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) {
      if (++i < a.size()) ra = a[i].second;
    }
    if (rb <= 1e-15) {
      if (++j < b.size()) rb = b[j].second;
    }
  }
  return acc;
}

}  // namespace

particle_cloud particle_cloud::uniform(Eigen::MatrixXd pts) {
  if (pts.rows() == 0) throw dimension_mismatch("particle_cloud: no particles");
  return particle_cloud{std::move(pts), std::nullopt};
}

particle_cloud particle_cloud::weighted(Eigen::MatrixXd pts, Eigen::VectorXd w) {
  if (pts.rows() == 0) throw dimension_mismatch("particle_cloud: no particles");
  check_weights(w, pts.rows());
  return particle_cloud{std::move(pts), std::move(w)};
}

void measure_flow::validate() const {
  if (clouds.empty() || times.empty()) throw empty_flow("measure_flow: no data");
  if (static_cast<int>(clouds.size()) != grid.size()) {
    throw dimension_mismatch("measure_flow: label count != grid size");
  }
  if (times.front() != 0.0) throw config_error("measure_flow: times must start at 0");
  for (std::size_t k = 1; k < times.size(); ++k) {
    if (!(times[k] > times[k - 1])) {
      throw config_error("measure_flow: times must be strictly increasing");
    }
  }
  const int d = clouds[0].empty() ? 0 : clouds[0][0].dim();
  for (const auto& label_clouds : clouds) {
    if (label_clouds.size() != times.size()) {
      throw dimension_mismatch("measure_flow: cloud count != time count");
    }
    for (const auto& c : label_clouds) {
      if (c.size() == 0) throw empty_flow("measure_flow: empty cloud");
      if (c.dim() != d) throw dimension_mismatch("measure_flow: mixed dimensions");
    }
  }
}

mu_view mu_view::from_cloud(const particle_cloud* c) {
  mu_view v;
  v.kind_ = kind::cloud;
  v.cloud_ = c;
  v.mean_ = moments(*c, 1.0);
  return v;
}

mu_view mu_view::from_mixture(const measure_flow* f, Eigen::VectorXd label_weights,
                              int t_index) {
  if (static_cast<int>(f->clouds.size()) != label_weights.size()) {
    throw dimension_mismatch("mu_view: mixture weight count != label count");
  }
  mu_view v;
  v.kind_ = kind::mixture;
  v.flow_ = f;
  v.label_weights_ = std::move(label_weights);
  v.t_index_ = t_index;
  const int d = f->clouds[0][static_cast<std::size_t>(t_index)].dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (int u = 0; u < static_cast<int>(f->clouds.size()); ++u) {
    const double w = v.label_weights_(u);
    if (w == 0.0) continue;
    mean += w * moments(f->clouds[static_cast<std::size_t>(u)]
                                 [static_cast<std::size_t>(t_index)],
                        1.0);
  }
  v.mean_ = std::move(mean);
  return v;
}

mu_view mu_view::from_mean(Eigen::VectorXd mean) {
  mu_view v;
  v.kind_ = kind::mean_only;
  v.mean_ = std::move(mean);
  return v;
}

Eigen::VectorXd mu_view::moment(double order) const {
  if (order == 1.0) return mean_;
  if (kind_ == kind::mean_only) {
    throw config_error("mu_view: deterministic view has no higher moments");
  }
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim());
  for_each([&](const Eigen::VectorXd& x, double w) {
    for (int i = 0; i < acc.size(); ++i) acc(i) += w * std::pow(std::abs(x(i)), order);
  });
  return acc;
}

Eigen::MatrixXd mu_view::sample(int count, std::uint64_t seed, std::uint64_t unit) const {
  if (kind_ == kind::mean_only) {
    throw config_error("mu_view: deterministic view cannot be sampled");
  }
  Eigen::MatrixXd out(count, dim());
  const std::uint64_t strm = rng::stream(rng::purpose::sample, unit, 0);
  for (int s = 0; s < count; ++s) {
    if (kind_ == kind::cloud) {
      const double u = rng::uniform01(seed, strm, rng::counter(s, 0));
      // Weighted inverse-CDF over particles.
      double acc = 0.0;
      int pick = cloud_->size() - 1;
      for (int p = 0; p < cloud_->size(); ++p) {
        acc += cloud_->weight(p);
        if (u <= acc) {
          pick = p;
          break;
        }
      }
      out.row(s) = cloud_->points.row(pick);
    } else {
      const double ul = rng::uniform01(seed, strm, rng::counter(s, 0));
      double acc = 0.0;
      int lab = static_cast<int>(label_weights_.size()) - 1;
      for (int v = 0; v < label_weights_.size(); ++v) {
        acc += label_weights_(v);
        if (ul <= acc) {
          lab = v;
          break;
        }
      }
      const auto& c = flow_->clouds[static_cast<std::size_t>(lab)]
                                   [static_cast<std::size_t>(t_index_)];
      const double up = rng::uniform01(seed, strm, rng::counter(s, 1));
      int pick = std::min(c.size() - 1, static_cast<int>(up * c.size()));
      out.row(s) = c.points.row(pick);
    }
  }
  return out;
}

void mu_view::for_each(
    const std::function<void(const Eigen::VectorXd&, double)>& fn) const {
  if (kind_ == kind::mean_only) {
    throw config_error("mu_view: deterministic view has no atoms");
  }
  if (kind_ == kind::cloud) {
    for (int p = 0; p < cloud_->size(); ++p) {
      fn(cloud_->points.row(p).transpose(), cloud_->weight(p));
    }
    return;
  }
  for (int u = 0; u < label_weights_.size(); ++u) {
    const double wl = label_weights_(u);
    if (wl == 0.0) continue;
    const auto& c = flow_->clouds[static_cast<std::size_t>(u)]
                                 [static_cast<std::size_t>(t_index_)];
    for (int p = 0; p < c.size(); ++p) {
      fn(c.points.row(p).transpose(), wl * c.weight(p));
    }
  }
}

particle_cloud mu_view::materialize() const {
  std::vector<Eigen::VectorXd> pts;
  std::vector<double> ws;
  for_each([&](const Eigen::VectorXd& x, double w) {
    pts.push_back(x);
    ws.push_back(w);
  });
  Eigen::MatrixXd m(static_cast<Eigen::Index>(pts.size()), dim());
  Eigen::VectorXd w(static_cast<Eigen::Index>(ws.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    w(static_cast<Eigen::Index>(i)) = ws[i];
  }
  // Normalize away accumulated rounding before the weighted constructor.
  w /= w.sum();
  return particle_cloud::weighted(std::move(m), std::move(w));
}

particle_cloud aggregate_neighborhood(const measure_flow& flow,
                                      const normalized_graphon& ng, int label,
                                      int t_index) {
  flow.validate();
  if (flow.grid.size() != ng.grid.size()) {
    throw grid_mismatch("aggregate_neighborhood: flow and kernel grids differ");
  }
  if (t_index < 0 || t_index >= static_cast<int>(flow.times.size())) {
    throw config_error("aggregate_neighborhood: time index out of range");
  }
  const Eigen::VectorXd w = neighborhood_weights(ng, label);
  return mu_view::from_mixture(&flow, w, t_index).materialize();
}

Eigen::MatrixXd sample_representative(const measure_flow& flow,
                                      const Eigen::VectorXd& label_weights,
                                      int t_index, int count, std::uint64_t seed) {
  flow.validate();
  check_weights(label_weights, static_cast<Eigen::Index>(flow.clouds.size()));
  return mu_view::from_mixture(&flow, label_weights, t_index).sample(count, seed, 0);
}

double wasserstein2(const particle_cloud& a, const particle_cloud& b,
                    std::uint64_t seed, int slices) {
  if (a.dim() != b.dim()) {
    std::ostringstream os;
    os << "wasserstein2: dimension mismatch " << a.dim() << " vs " << b.dim();
    throw dimension_mismatch(os.str());
  }
  const int d = a.dim();
  if (d == 1) {
    std::vector<std::pair<double, double>> xs(static_cast<std::size_t>(a.size()));
    std::vector<std::pair<double, double>> ys(static_cast<std::size_t>(b.size()));
    for (int p = 0; p < a.size(); ++p) xs[p] = {a.points(p, 0), a.weight(p)};
    for (int p = 0; p < b.size(); ++p) ys[p] = {b.points(p, 0), b.weight(p)};
    return std::sqrt(w2_squared_1d(xs, ys));
  }
  // Sliced estimate: average squared distance of 1-d projections over seeded
  // directions drawn uniformly on the sphere.
  const std::uint64_t strm = rng::stream(rng::purpose::sliced, 0, 0);
  double acc = 0.0;
  for (int s = 0; s < slices; ++s) {
    Eigen::VectorXd dir(d);
    for (int i = 0; i < d; ++i) {
      dir(i) = rng::normal(seed, strm, rng::counter(s, static_cast<std::uint64_t>(i)));
    }
    const double nrm = dir.norm();
    dir = (nrm > 0) ? Eigen::VectorXd(dir / nrm) : Eigen::VectorXd::Unit(d, 0);
    std::vector<std::pair<double, double>> xs(static_cast<std::size_t>(a.size()));
    std::vector<std::pair<double, double>> ys(static_cast<std::size_t>(b.size()));
    for (int p = 0; p < a.size(); ++p) xs[p] = {a.points.row(p).dot(dir), a.weight(p)};
    for (int p = 0; p < b.size(); ++p) ys[p] = {b.points.row(p).dot(dir), b.weight(p)};
    acc += w2_squared_1d(xs, ys);
  }
  return std::sqrt(acc / slices);
}

Eigen::VectorXd moments(const particle_cloud& c, double order) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(c.dim());
  for (int p = 0; p < c.size(); ++p) {
    const double w = c.weight(p);
    for (int i = 0; i < c.dim(); ++i) {
      const double x = c.points(p, i);
      acc(i) += w * (order == 1.0 ? x
                    : order == 2.0 ? x * x
                                   : std::pow(std::abs(x), order));
    }
  }
  return acc;
}

particle_cloud empirical_neighborhood(const Eigen::MatrixXd& states,
                                      const Eigen::VectorXd& kappa_row) {
  check_weights(kappa_row, states.rows());
  return particle_cloud{states, kappa_row};
}

void save_cloud_csv(const particle_cloud& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw config_error("save_cloud_csv: cannot open " + path);
  out << "weight";
  for (int i = 1; i <= c.dim(); ++i) out << ",x" << i;
  out << "\n";
  for (int p = 0; p < c.size(); ++p) {
    out << format_double(c.weight(p));
    for (int i = 0; i < c.dim(); ++i) out << "," << format_double(c.points(p, i));
    out << "\n";
  }
}

particle_cloud load_cloud_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("load_cloud_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw config_error("load_cloud_csv: empty file");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw config_error("load_cloud_csv: no data rows");
  const auto d = rows[0].size() - 1;
  Eigen::MatrixXd pts(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(d));
  Eigen::VectorXd w(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != d + 1) throw config_error("load_cloud_csv: ragged rows");
    w(static_cast<Eigen::Index>(r)) = rows[r][0];
    for (std::size_t i = 0; i < d; ++i) {
      pts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = rows[r][i + 1];
    }
  }
  return particle_cloud::weighted(std::move(pts), std::move(w));
}

void save_flow(const measure_flow& flow, const std::string& dir) {
  flow.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["labels"] = flow.labels();
  manifest["dimension"] = flow.clouds[0][0].dim();
  manifest["particles"] = flow.clouds[0][0].size();
  manifest["times"] = flow.times;
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (int u = 0; u < flow.labels(); ++u) {
    const fs::path label_dir = fs::path(dir) / ("label_" + std::to_string(u));
    fs::create_directories(label_dir);
    for (std::size_t k = 0; k < flow.times.size(); ++k) {
      const fs::path f = label_dir / ("t_" + std::to_string(k) + ".csv");
      save_cloud_csv(flow.clouds[static_cast<std::size_t>(u)][k], f.string());
      files.push_back(fs::path(f).lexically_relative(dir).generic_string());
    }
  }
  manifest["files"] = files;
  std::ofstream ms(fs::path(dir) / "manifest.json");
  ms << manifest.dump(2) << "\n";
}

}  // namespace gmfc
