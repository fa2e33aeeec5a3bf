#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "adl/dataset.hpp"
#include "adl/denoiser.hpp"
#include "adl/denoisers.hpp"
#include "adl/error.hpp"
#include "adl/numerics.hpp"
#include "adl/parallel.hpp"
#include "adl/schedule.hpp"
#include "adl/spectral.hpp"

namespace adl {

enum class FieldNormalization { per_image, joint, raw };

/// Selected rows of the input-output Jacobian d x0_hat / d x at (x, t).
/// values.row(k) is the sensitivity of output pixel rows[k] to every input pixel.
struct SensitivityField {
  std::vector<int> rows;
  DenseMatrix values;
  Vector x;
  int t = 0;
  int height = 0;
  int width = 0;
  int channels = 1;
};

namespace detail {

inline std::vector<int> resolve_rows(std::span<const int> rows, Eigen::Index d) {
  std::vector<int> out(rows.begin(), rows.end());
  if (out.empty()) {
    out.resize(static_cast<std::size_t>(d));
    std::iota(out.begin(), out.end(), 0);
  }
  for (int q : out)
    if (q < 0 || q >= d) throw ConfigError("sensitivity: pixel " + std::to_string(q) + " out of range");
  return out;
}

inline SensitivityField make_field(const ImageDataset& ds, std::vector<int> rows, const Vector& x, int t) {
  SensitivityField f;
  f.values = DenseMatrix::Zero(static_cast<Eigen::Index>(rows.size()), ds.dim());
  f.rows = std::move(rows);
  f.x = x;
  f.t = t;
  f.height = ds.height();
  f.width = ds.width();
  f.channels = ds.channels();
  return f;
}

}  // namespace detail

/// Exact Jacobian of optimal_predict:
///   (sqrt(abar) / sigma^2) * sum_i w_i (x_i - x0_hat)(x_i - x0_hat)^T,
/// a scaled softmax-weighted covariance, hence symmetric PSD.
/// An empty `rows` selects every output pixel.
inline SensitivityField analytic_jacobian_optimal(const ImageDataset& ds, const Vector& x, int t,
                                                  const NoiseSchedule& sched, std::span<const int> rows = {}) {
  const Vector w = optimal_weights(ds, x, t, sched);
  const Vector mean = ds.images().transpose() * w;
  const double scale = std::sqrt(sched.alpha_bar(t)) / (1.0 - sched.alpha_bar(t));
  SensitivityField f = detail::make_field(ds, detail::resolve_rows(rows, ds.dim()), x, t);
  const DenseMatrix centered = ds.images().rowwise() - mean.transpose();
  const DenseMatrix weighted = w.asDiagonal() * centered;
  for (std::size_t k = 0; k < f.rows.size(); ++k) {
    const Eigen::Index q = f.rows[k];
    f.values.row(static_cast<Eigen::Index>(k)) = scale * (weighted.col(q).transpose() * centered);
  }
  return f;
}

/// Exact Jacobian rows of masked_predict. Row q is
///   (sqrt(abar) / sigma^2) * sum_i w_i^q (x_i[q] - x0_hat[q]) (mask_q (.) (x_i - xbar^q)),
/// supported on mask_q only.
inline SensitivityField analytic_jacobian_masked(const ImageDataset& ds, const MaskSet& masks, const Vector& x, int t,
                                                 const NoiseSchedule& sched, std::span<const int> rows = {}) {
  detail::check_input(ds, x, "analytic_jacobian_masked");
  const auto& pixel_masks = masks.at(t);
  if (pixel_masks.size() != static_cast<std::size_t>(ds.dim()))
    throw ConfigError("analytic_jacobian_masked: mask set does not match dataset dimension");
  const double root = std::sqrt(sched.alpha_bar(t));
  const double two_var = 2.0 * (1.0 - sched.alpha_bar(t));
  const double scale = root / (1.0 - sched.alpha_bar(t));
  SensitivityField f = detail::make_field(ds, detail::resolve_rows(rows, ds.dim()), x, t);
  const auto n = ds.size();
  parallel::parallel_for(f.rows.size(), [&](std::size_t k) {
    const int q = f.rows[k];
    const auto& mask = pixel_masks[static_cast<std::size_t>(q)];
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      double dist = 0.0;
      for (auto p : mask) {
        const double diff = x[p] - root * ds.images()(i, p);
        dist += diff * diff;
      }
      logits[static_cast<std::size_t>(i)] = -dist / two_var;
    }
    const Vector w = stable_softmax(std::span<const double>(logits));
    for (auto p : mask) {
      double mean_p = 0.0;
      double mean_q = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        mean_p += w[i] * ds.images()(i, p);
        mean_q += w[i] * ds.images()(i, q);
      }
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) acc += w[i] * (ds.images()(i, q) - mean_q) * (ds.images()(i, p) - mean_p);
      f.values(static_cast<Eigen::Index>(k), p) = scale * acc;
    }
  });
  return f;
}

/// Jacobian of wiener_predict, independent of x:
///   sqrt(abar) Sigma (abar Sigma + sigma^2 I)^-1 = (1 / sqrt(abar)) U diag(SNR / (SNR + 1)) U^T.
inline SensitivityField wiener_sensitivity(const SpectralModel& model, int t, const NoiseSchedule& sched,
                                           std::span<const int> rows = {}) {
  const DenseMatrix full = sensitivity_projector(model, t, sched) / std::sqrt(sched.alpha_bar(t));
  SensitivityField f;
  f.rows = detail::resolve_rows(rows, model.dim());
  f.values.resize(static_cast<Eigen::Index>(f.rows.size()), model.dim());
  for (std::size_t k = 0; k < f.rows.size(); ++k) f.values.row(static_cast<Eigen::Index>(k)) = full.row(f.rows[k]);
  f.x = model.mean;
  f.t = t;
  f.height = model.height;
  f.width = model.width;
  f.channels = model.channels;
  return f;
}

inline constexpr double kDefaultFdStep = 1e-5;

/// Central-difference Jacobian rows: [f(x + h e_p)_q - f(x - h e_p)_q] / 2h.
inline SensitivityField fd_jacobian(const Denoiser& denoiser, const Vector& x, int t, std::span<const int> rows,
                                    double step = kDefaultFdStep, int height = 0, int width = 0, int channels = 1) {
  if (!(step > 0.0)) throw ConfigError("fd_jacobian: step must be positive");
  if (x.size() != denoiser.dim()) throw ConfigError("fd_jacobian: input dimension mismatch");
  SensitivityField f;
  f.rows = detail::resolve_rows(rows, x.size());
  f.values.resize(static_cast<Eigen::Index>(f.rows.size()), x.size());
  f.x = x;
  f.t = t;
  f.height = height;
  f.width = width;
  f.channels = channels;
  Vector probe = x;
  for (Eigen::Index p = 0; p < x.size(); ++p) {
    probe[p] = x[p] + step;
    const Vector plus = denoiser.predict_x0(probe, t);
    probe[p] = x[p] - step;
    const Vector minus = denoiser.predict_x0(probe, t);
    probe[p] = x[p];
    for (std::size_t k = 0; k < f.rows.size(); ++k)
      f.values(static_cast<Eigen::Index>(k), p) = (plus[f.rows[k]] - minus[f.rows[k]]) / (2.0 * step);
  }
  return f;
}

/// Elementwise mean of |rows| over fields evaluated at different inputs.
inline SensitivityField average_abs(std::span<const SensitivityField> fields) {
  if (fields.empty()) throw ConfigError("average_abs: no fields");
  SensitivityField out = fields.front();
  out.values = out.values.cwiseAbs();
  for (std::size_t k = 1; k < fields.size(); ++k) {
    if (fields[k].values.rows() != out.values.rows() || fields[k].values.cols() != out.values.cols())
      throw ConfigError("average_abs: field shapes differ");
    out.values += fields[k].values.cwiseAbs();
  }
  out.values /= static_cast<double>(fields.size());
  return out;
}

/// A grayscale heatmap in [0, 1].
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;
};

/// One heatmap per row: |row| summed over channels at each spatial location.
/// per_image scales each map so its maximum is 1, joint divides every map by
/// the largest value in the set, raw clamps magnitudes to [0, 1].
inline std::vector<GrayImage> render_field(const SensitivityField& field, FieldNormalization mode) {
  if (field.rows.empty()) throw ConfigError("render_field: no rows");
  const int plane = field.height * field.width;
  if (plane * field.channels != field.values.cols()) throw ConfigError("render_field: field has no image shape");
  std::vector<GrayImage> out;
  double global = 0.0;
  for (Eigen::Index k = 0; k < field.values.rows(); ++k) {
    GrayImage img{field.height, field.width, std::vector<double>(static_cast<std::size_t>(plane), 0.0)};
    for (int p = 0; p < plane; ++p)
      for (int c = 0; c < field.channels; ++c)
        img.pixels[static_cast<std::size_t>(p)] += std::abs(field.values(k, p * field.channels + c));
    for (double v : img.pixels) global = std::max(global, v);
    out.push_back(std::move(img));
  }
  for (auto& img : out) {
    double denom = 1.0;
    if (mode == FieldNormalization::per_image) denom = *std::max_element(img.pixels.begin(), img.pixels.end());
    if (mode == FieldNormalization::joint) denom = global;
    for (auto& v : img.pixels) v = denom > 0.0 ? std::min(1.0, v / denom) : 0.0;
  }
  return out;
}

inline FieldNormalization parse_normalization(const std::string& s) {
  if (s == "per-image" || s == "per_image") return FieldNormalization::per_image;
  if (s == "joint") return FieldNormalization::joint;
  if (s == "raw") return FieldNormalization::raw;
  throw ConfigError("unknown normalization '" + s + "' (expected per-image, joint or raw)");
}

}  // namespace adl
