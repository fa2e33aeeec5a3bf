#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "adl/dataset.hpp"
#include "adl/error.hpp"
#include "adl/numerics.hpp"
#include "adl/parallel.hpp"
#include "adl/schedule.hpp"

namespace adl {

/// Second-order statistics of a dataset: mean and the eigensystem of the
/// (1/N-normalized) covariance. Columns of `eigvecs` are orthonormal;
/// `eigvals` are per-component variances, non-increasing and nonnegative.
struct SpectralModel {
  Vector mean;
  DenseMatrix eigvecs;
  Vector eigvals;
  Eigen::Index n_samples = 0;
  int height = 0;
  int width = 0;
  int channels = 0;

  Eigen::Index dim() const { return mean.size(); }
  Eigen::Index rank() const { return eigvals.size(); }
};

inline constexpr Eigen::Index kMaxSpectralDim = 16384;

enum class FitMethod { automatic, covariance, gram };

/// Fits mean and covariance eigensystem, keeping min(N - 1, d) components.
/// The gram method eigendecomposes the N x N Gram matrix and lifts its
/// eigenvectors; it keeps only components with positive variance.
inline SpectralModel fit(const ImageDataset& ds, FitMethod method = FitMethod::automatic) {
  const Eigen::Index n = ds.size();
  const Eigen::Index d = ds.dim();
  if (n < 2) throw ConfigError("fit: at least two images are required");
  if (d > kMaxSpectralDim)
    throw ConfigError("fit: dimension " + std::to_string(d) + " exceeds " + std::to_string(kMaxSpectralDim) +
                      "; downscale the dataset first");
  SpectralModel model;
  model.n_samples = n;
  model.height = ds.height();
  model.width = ds.width();
  model.channels = ds.channels();
  model.mean = ds.images().colwise().mean().transpose();
  const DenseMatrix centered = ds.images().rowwise() - model.mean.transpose();
  const Eigen::Index keep = std::min(n - 1, d);

  if (method == FitMethod::automatic) method = (n < d && d > 4096) ? FitMethod::gram : FitMethod::covariance;

  if (method == FitMethod::covariance) {
    DenseMatrix cov = DenseMatrix::Zero(d, d);
    cov.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / static_cast<double>(n));
    cov.triangularView<Eigen::StrictlyUpper>() = cov.transpose();
    EigenDecomposition e = psd_eigen(cov);
    model.eigvecs = e.eigenvectors.leftCols(keep);
    model.eigvals = e.eigenvalues.head(keep);
    return model;
  }

  DenseMatrix gram = DenseMatrix::Zero(n, n);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(centered, 1.0 / static_cast<double>(n));
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  EigenDecomposition e = psd_eigen(gram);
  const double floor = e.eigenvalues.size() ? 1e-12 * std::max(1.0, e.eigenvalues[0]) : 0.0;
  Eigen::Index r = 0;
  while (r < keep && e.eigenvalues[r] > floor) ++r;
  model.eigvecs.resize(d, r);
  model.eigvals = e.eigenvalues.head(r);
  for (Eigen::Index k = 0; k < r; ++k) {
    Vector u = centered.transpose() * e.eigenvectors.col(k);
    model.eigvecs.col(k) = u / u.norm();
  }
  detail::canonicalize_signs(model.eigvecs);
  return model;
}

/// Per-component signal-to-noise ratio abar_t v_i / (1 - abar_t).
inline Vector snr(const SpectralModel& model, int t, const NoiseSchedule& sched) {
  const double abar = sched.alpha_bar(t);
  return (abar * model.eigvals.array() / (1.0 - abar)).matrix();
}

/// Shrinkage factors SNR_i / (SNR_i + 1) of the high-SNR projector.
inline Vector projector_factors(const SpectralModel& model, int t, const NoiseSchedule& sched) {
  const Vector s = snr(model, t, sched);
  return (s.array() / (s.array() + 1.0)).matrix();
}

/// Gaussian posterior mean mu + sqrt(abar) Sigma (abar Sigma + sigma^2 I)^-1 (x - sqrt(abar) mu),
/// evaluated in the eigenbasis.
inline Vector wiener_predict(const SpectralModel& model, const Vector& x, int t, const NoiseSchedule& sched) {
  if (x.size() != model.dim()) throw ConfigError("wiener_predict: input dimension mismatch");
  const double abar = sched.alpha_bar(t);
  const double root = std::sqrt(abar);
  const double noise = 1.0 - abar;
  const Vector coeffs = model.eigvecs.transpose() * (x - root * model.mean);
  const Vector gains = (root * model.eigvals.array() / (abar * model.eigvals.array() + noise)).matrix();
  return model.mean + model.eigvecs * coeffs.cwiseProduct(gains);
}

/// U diag(SNR / (SNR + 1)) U^T, the normalized sensitivity of the Wiener filter.
inline DenseMatrix sensitivity_projector(const SpectralModel& model, int t, const NoiseSchedule& sched) {
  const Vector f = projector_factors(model, t, sched);
  const DenseMatrix scaled = model.eigvecs * f.asDiagonal();
  return scaled * model.eigvecs.transpose();
}

// ---------------------------------------------------------------------------
// Masks

enum class MaskProvenance { spectral, external };

/// Per-timestep, per-output-pixel support sets. Every list is sorted,
/// duplicate-free, within [0, dim) and contains its own pixel.
struct MaskSet {
  using PixelMasks = std::vector<std::vector<std::uint32_t>>;

  std::map<int, PixelMasks> masks;
  double tau = std::numeric_limits<double>::quiet_NaN();
  MaskProvenance provenance = MaskProvenance::spectral;

  const PixelMasks& at(int t) const {
    auto it = masks.find(t);
    if (it == masks.end()) throw ConfigError("mask set has no entry for timestep " + std::to_string(t));
    return it->second;
  }

  bool contains(int t) const { return masks.count(t) != 0; }

  std::size_t dim() const { return masks.empty() ? 0 : masks.begin()->second.size(); }

  void merge(const MaskSet& other) {
    for (const auto& [t, m] : other.masks) masks[t] = m;
  }
};

/// Masks with every pixel in every list; equivalent to no locality constraint.
inline MaskSet full_masks(std::span<const int> timesteps, std::size_t dim) {
  MaskSet set;
  set.tau = 0.0;
  std::vector<std::uint32_t> all(dim);
  std::iota(all.begin(), all.end(), 0u);
  for (int t : timesteps) set.masks[t] = MaskSet::PixelMasks(dim, all);
  return set;
}

/// Binarizes each row q of a sensitivity matrix: keep p with
/// |S[q,p]| >= tau * max_p' |S[q,p']|, and always keep q itself.
inline MaskSet::PixelMasks binarize_rows(const DenseMatrix& field, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("binarize: tau must lie in [0, 1]");
  if (field.rows() != field.cols()) throw ConfigError("binarize: field must be square");
  const Eigen::Index d = field.rows();
  MaskSet::PixelMasks out(static_cast<std::size_t>(d));
  parallel::parallel_for(static_cast<std::size_t>(d), [&](std::size_t q) {
    const auto row = field.row(static_cast<Eigen::Index>(q));
    const double cut = tau * row.cwiseAbs().maxCoeff();
    auto& mask = out[q];
    for (Eigen::Index p = 0; p < d; ++p)
      if (std::abs(row[p]) >= cut || static_cast<std::size_t>(p) == q) mask.push_back(static_cast<std::uint32_t>(p));
  });
  return out;
}

inline MaskSet build_masks(const SpectralModel& model, std::span<const int> timesteps, const NoiseSchedule& sched,
                           double tau) {
  MaskSet set;
  set.tau = tau;
  set.provenance = MaskProvenance::spectral;
  for (int t : timesteps) set.masks[t] = binarize_rows(sensitivity_projector(model, t, sched), tau);
  return set;
}

inline MaskSet build_masks(const SpectralModel& model, int t, const NoiseSchedule& sched, double tau) {
  return build_masks(model, std::span<const int>(&t, 1), sched, tau);
}

/// "ADMK" | u32 entries | per entry: u32 timestep, u32 d, then d lists of
/// (u32 length, length x u32 index). Little-endian.
inline std::vector<std::uint8_t> encode_masks(const MaskSet& set) {
  std::vector<std::uint8_t> out{'A', 'D', 'M', 'K'};
  io::put_u32_le(out, static_cast<std::uint32_t>(set.masks.size()));
  for (const auto& [t, pixels] : set.masks) {
    io::put_u32_le(out, static_cast<std::uint32_t>(t));
    io::put_u32_le(out, static_cast<std::uint32_t>(pixels.size()));
    for (const auto& list : pixels) {
      io::put_u32_le(out, static_cast<std::uint32_t>(list.size()));
      for (auto idx : list) io::put_u32_le(out, idx);
    }
  }
  return out;
}

inline MaskSet decode_masks(std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - off < n) throw FormatError("masks: truncated file at byte offset " + std::to_string(off));
  };
  auto u32 = [&] {
    need(4);
    const auto v = io::read_u32_le(bytes, off);
    off += 4;
    return v;
  };
  need(4);
  if (std::memcmp(bytes.data(), "ADMK", 4) != 0) throw FormatError("masks: magic mismatch at byte offset 0");
  off = 4;
  const std::uint32_t entries = u32();
  if (entries == 0) throw FormatError("masks: empty timestep table at byte offset 4");
  MaskSet set;
  set.provenance = MaskProvenance::external;
  std::uint32_t dim = 0;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::size_t entry_off = off;
    const auto t = static_cast<int>(u32());
    const std::uint32_t d = u32();
    if (t < 1) throw FormatError("masks: timestep must be >= 1 at byte offset " + std::to_string(entry_off));
    if (d == 0 || (e > 0 && d != dim))
      throw FormatError("masks: inconsistent pixel count at byte offset " + std::to_string(entry_off + 4));
    if (set.masks.count(t)) throw FormatError("masks: duplicate timestep at byte offset " + std::to_string(entry_off));
    dim = d;
    MaskSet::PixelMasks pixels(d);
    for (std::uint32_t q = 0; q < d; ++q) {
      const std::size_t list_off = off;
      const std::uint32_t len = u32();
      if (len > d) throw FormatError("masks: list longer than d at byte offset " + std::to_string(list_off));
      auto& list = pixels[q];
      list.resize(len);
      for (auto& idx : list) {
        idx = u32();
        if (idx >= d) throw FormatError("masks: index out of range at byte offset " + std::to_string(off - 4));
      }
      std::sort(list.begin(), list.end());
      if (std::adjacent_find(list.begin(), list.end()) != list.end())
        throw FormatError("masks: duplicate index at byte offset " + std::to_string(list_off));
      if (!std::binary_search(list.begin(), list.end(), q))
        throw FormatError("masks: diagonal pixel absent at byte offset " + std::to_string(list_off));
    }
    set.masks.emplace(t, std::move(pixels));
  }
  if (off != bytes.size()) throw FormatError("masks: trailing bytes at byte offset " + std::to_string(off));
  return set;
}

inline void save_masks(const MaskSet& set, const std::filesystem::path& path) { io::write_file(path, encode_masks(set)); }

inline MaskSet load_masks(const std::filesystem::path& path) { return decode_masks(io::read_file(path)); }

}  // namespace adl
