#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adl/dataset.hpp"
#include "adl/error.hpp"
#include "adl/numerics.hpp"
#include "adl/sampler.hpp"

namespace adl {

/// Per-sample values with their mean and sample standard deviation (n - 1).
struct MetricReport {
  std::string name;
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;
  std::string fingerprint;

  std::size_t count() const { return values.size(); }

  static MetricReport from_values(std::string name, std::vector<double> values, std::string fingerprint = {}) {
    if (values.empty()) throw ConfigError("MetricReport: at least one sample is required");
    MetricReport r;
    r.name = std::move(name);
    r.fingerprint = std::move(fingerprint);
    r.values = std::move(values);
    double sum = 0.0;
    for (double v : r.values) sum += v;
    r.mean = sum / static_cast<double>(r.values.size());
    if (r.values.size() > 1) {
      double ss = 0.0;
      for (double v : r.values) ss += (v - r.mean) * (v - r.mean);
      r.stddev = std::sqrt(ss / static_cast<double>(r.values.size() - 1));
    }
    return r;
  }
};

namespace detail {
inline void check_batches(const DenseMatrix& a, const DenseMatrix& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError(std::string(who) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  if (a.rows() == 0 || a.cols() == 0) throw ConfigError(std::string(who) + ": empty batch");
}
}  // namespace detail

/// Mean squared pixel difference per sample (one sample per row).
inline MetricReport mse(const DenseMatrix& a, const DenseMatrix& b) {
  detail::check_batches(a, b, "mse");
  std::vector<double> v(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i) v[static_cast<std::size_t>(i)] = (a.row(i) - b.row(i)).squaredNorm() / static_cast<double>(a.cols());
  return MetricReport::from_values("mse", std::move(v));
}

/// Coefficient of determination per sample:
///   1 - ||pred - ref||^2 / ||ref - mean(ref)||^2, with mean(ref) the sample's pixel mean.
inline MetricReport r_squared(const DenseMatrix& pred, const DenseMatrix& ref) {
  detail::check_batches(pred, ref, "r_squared");
  std::vector<double> v(static_cast<std::size_t>(ref.rows()));
  for (Eigen::Index i = 0; i < ref.rows(); ++i) {
    const double total = (ref.row(i).array() - ref.row(i).mean()).square().sum();
    if (!(total > 0.0)) throw NumericalError("r_squared: undefined r^2 for constant reference sample " + std::to_string(i));
    v[static_cast<std::size_t>(i)] = 1.0 - (pred.row(i) - ref.row(i)).squaredNorm() / total;
  }
  return MetricReport::from_values("r2", std::move(v));
}

struct NearestNeighbor {
  double distance = 0.0;
  Eigen::Index index = 0;
};

/// RMS distance to the closest training image, measured with pixels mapped
/// onto [0, 1] from the dataset's declared range: ||img - x_i|| / (sqrt(d) * width).
/// Ties go to the lowest index.
inline NearestNeighbor nearest_neighbor_distance(const ImageDataset& ds, const Vector& img) {
  if (img.size() != ds.dim()) throw ConfigError("nearest_neighbor_distance: dimension mismatch");
  NearestNeighbor best{std::numeric_limits<double>::infinity(), 0};
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const double sq = (ds.image(i).transpose() - img).squaredNorm();
    if (sq < best.distance) {
      best.distance = sq;
      best.index = i;
    }
  }
  best.distance = std::sqrt(best.distance / static_cast<double>(ds.dim())) / ds.value_range().width();
  return best;
}

namespace detail {
inline void check_grids(std::span<const Trajectory> a) {
  if (a.empty()) throw ConfigError("trajectory_metrics: no trajectories");
  for (const auto& tr : a)
    if (tr.timesteps != a.front().timesteps || tr.predictions.size() != tr.timesteps.size())
      throw ConfigError("trajectory_metrics: timestep grids differ");
}
}  // namespace detail

/// MSE between paired single-step predictions, one report per grid point.
inline std::vector<MetricReport> trajectory_metrics(std::span<const Trajectory> a, std::span<const Trajectory> b) {
  detail::check_grids(a);
  detail::check_grids(b);
  if (a.size() != b.size() || a.front().timesteps != b.front().timesteps)
    throw ConfigError("trajectory_metrics: timestep grids differ");
  std::vector<MetricReport> out;
  for (std::size_t k = 0; k < a.front().timesteps.size(); ++k) {
    std::vector<double> v;
    for (std::size_t s = 0; s < a.size(); ++s)
      v.push_back((a[s].predictions[k] - b[s].predictions[k]).squaredNorm() /
                  static_cast<double>(a[s].predictions[k].size()));
    out.push_back(MetricReport::from_values("mse@t=" + std::to_string(a.front().timesteps[k]), std::move(v)));
  }
  return out;
}

/// Nearest-neighbor distance of each single-step prediction, one report per grid point.
inline std::vector<MetricReport> trajectory_metrics(std::span<const Trajectory> a, const ImageDataset& ds) {
  detail::check_grids(a);
  std::vector<MetricReport> out;
  for (std::size_t k = 0; k < a.front().timesteps.size(); ++k) {
    std::vector<double> v;
    for (const auto& tr : a) v.push_back(nearest_neighbor_distance(ds, tr.predictions[k]).distance);
    out.push_back(MetricReport::from_values("nn@t=" + std::to_string(a.front().timesteps[k]), std::move(v)));
  }
  return out;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// "sample_id,value" rows followed by mean and std summary rows.
inline std::string metric_csv(const MetricReport& r) {
  std::string out = "sample_id,value\n";
  for (std::size_t i = 0; i < r.values.size(); ++i) out += std::to_string(i) + "," + format_number(r.values[i]) + "\n";
  out += "mean," + format_number(r.mean) + "\n";
  out += "std," + format_number(r.stddev) + "\n";
  return out;
}

}  // namespace adl
