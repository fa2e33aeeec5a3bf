#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "adl/dataset.hpp"
#include "adl/denoiser.hpp"
#include "adl/error.hpp"
#include "adl/numerics.hpp"
#include "adl/parallel.hpp"
#include "adl/sampler.hpp"
#include "adl/schedule.hpp"
#include "adl/spectral.hpp"

namespace adl {

// ---------------------------------------------------------------------------
// Weighted streaming softmax

/// Running softmax-weighted sums for many outputs at once. For each output k
/// it keeps the largest logit seen, the normalizer sum(exp(l - max)) and the
/// weighted value sums, rescaling both whenever a batch raises the max.
/// Each output carries `width` values (e.g. the channels of one pixel).
class StreamingSoftmaxAccumulator {
 public:
  explicit StreamingSoftmaxAccumulator(std::size_t outputs, std::size_t width = 1)
      : width_(width),
        max_(outputs, -std::numeric_limits<double>::infinity()),
        norm_(outputs, 0.0),
        sums_(outputs * width, 0.0) {}

  std::size_t outputs() const { return max_.size(); }
  std::size_t width() const { return width_; }

  /// Adds a batch for output k: logits[j] pairs with values[j * width .. +width).
  void update(std::size_t k, std::span<const double> logits, std::span<const double> values) {
    double peak = -std::numeric_limits<double>::infinity();
    for (double l : logits) peak = std::max(peak, l);
    if (peak == -std::numeric_limits<double>::infinity()) return;
    double* sums = sums_.data() + k * width_;
    if (peak > max_[k]) {
      const double scale = std::exp(max_[k] - peak);
      norm_[k] *= scale;
      for (std::size_t c = 0; c < width_; ++c) sums[c] *= scale;
      max_[k] = peak;
    }
    for (std::size_t j = 0; j < logits.size(); ++j) {
      if (logits[j] == -std::numeric_limits<double>::infinity()) continue;
      const double w = std::exp(logits[j] - max_[k]);
      norm_[k] += w;
      for (std::size_t c = 0; c < width_; ++c) sums[c] += w * values[j * width_ + c];
    }
  }

  void update(std::size_t k, double logit, std::span<const double> values) {
    update(k, std::span<const double>(&logit, 1), values);
  }

  /// Folds in another accumulator over a disjoint set of items.
  void merge(const StreamingSoftmaxAccumulator& other) {
    if (other.outputs() != outputs() || other.width_ != width_)
      throw ConfigError("StreamingSoftmaxAccumulator::merge: shape mismatch");
    for (std::size_t k = 0; k < outputs(); ++k) {
      if (other.norm_[k] == 0.0) continue;
      const double peak = std::max(max_[k], other.max_[k]);
      const double mine = norm_[k] == 0.0 ? 0.0 : std::exp(max_[k] - peak);
      const double theirs = std::exp(other.max_[k] - peak);
      norm_[k] = norm_[k] * mine + other.norm_[k] * theirs;
      for (std::size_t c = 0; c < width_; ++c)
        sums_[k * width_ + c] = sums_[k * width_ + c] * mine + other.sums_[k * width_ + c] * theirs;
      max_[k] = peak;
    }
  }

  double normalizer(std::size_t k) const { return norm_[k]; }
  double max_logit(std::size_t k) const { return max_[k]; }

  /// Weighted averages, outputs * width entries.
  Vector finalize() const {
    Vector out(static_cast<Eigen::Index>(sums_.size()));
    for (std::size_t k = 0; k < outputs(); ++k) {
      if (!(norm_[k] > 0.0)) throw NumericalError("streaming softmax: empty support for output " + std::to_string(k));
      for (std::size_t c = 0; c < width_; ++c)
        out[static_cast<Eigen::Index>(k * width_ + c)] = sums_[k * width_ + c] / norm_[k];
    }
    return out;
  }

 private:
  std::size_t width_;
  std::vector<double> max_;
  std::vector<double> norm_;
  std::vector<double> sums_;
};

// ---------------------------------------------------------------------------
// Optimal denoiser

namespace detail {

inline void check_input(const ImageDataset& ds, const Vector& x, const char* who) {
  if (x.size() != ds.dim())
    throw ConfigError(std::string(who) + ": input has " + std::to_string(x.size()) + " pixels, dataset has " +
                      std::to_string(ds.dim()));
}

}  // namespace detail

/// Softmax weights over training images: softmax_i(-||x - sqrt(abar) x_i||^2 / (2 sigma^2)).
inline Vector optimal_weights(const ImageDataset& ds, const Vector& x, int t, const NoiseSchedule& sched) {
  detail::check_input(ds, x, "optimal_predict");
  const double root = std::sqrt(sched.alpha_bar(t));
  const double two_var = 2.0 * (1.0 - sched.alpha_bar(t));
  const auto n = static_cast<std::size_t>(ds.size());
  std::vector<double> logits(n);
  parallel::parallel_for(n, [&](std::size_t i) {
    const auto row = ds.image(static_cast<Eigen::Index>(i));
    double dist = 0.0;
    for (Eigen::Index p = 0; p < ds.dim(); ++p) {
      const double diff = x[p] - root * row[p];
      dist += diff * diff;
    }
    logits[i] = -dist / two_var;
  });
  return stable_softmax(std::span<const double>(logits));
}

/// Closed-form minimizer of the denoising objective over the empirical dataset:
/// the softmax-weighted average of training images.
inline Vector optimal_predict(const ImageDataset& ds, const Vector& x, int t, const NoiseSchedule& sched) {
  const Vector w = optimal_weights(ds, x, t, sched);
  return ds.images().transpose() * w;
}

// ---------------------------------------------------------------------------
// Masked denoiser

inline constexpr std::size_t kDefaultBatch = 256;

/// Per-pixel softmax over training images where pixel q compares only the
/// pixels in masks[q]. Distances are gathered sparsely per mask and streamed
/// over dataset batches of `batch_size` images.
inline Vector masked_predict(const ImageDataset& ds, const MaskSet& masks, const Vector& x, int t,
                             const NoiseSchedule& sched, std::size_t batch_size = kDefaultBatch) {
  detail::check_input(ds, x, "masked_predict");
  const auto& pixel_masks = masks.at(t);
  const auto d = static_cast<std::size_t>(ds.dim());
  if (pixel_masks.size() != d)
    throw ConfigError("masked_predict: mask set covers " + std::to_string(pixel_masks.size()) + " pixels, dataset has " +
                      std::to_string(d));
  if (batch_size == 0) throw ConfigError("masked_predict: batch size must be positive");
  const double root = std::sqrt(sched.alpha_bar(t));
  const double two_var = 2.0 * (1.0 - sched.alpha_bar(t));
  const auto n = static_cast<std::size_t>(ds.size());

  StreamingSoftmaxAccumulator acc(d);
  DenseMatrix sq;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    const auto block = ds.images().middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
    sq = ((-root * block).rowwise() + x.transpose()).array().square().matrix();
    parallel::parallel_for(d, [&](std::size_t q) {
      const auto& mask = pixel_masks[q];
      std::vector<double> logits(count);
      std::vector<double> values(count);
      for (std::size_t j = 0; j < count; ++j) {
        const double* row = sq.data() + j * d;
        double dist = 0.0;
        for (auto p : mask) dist += row[p];
        logits[j] = -dist / two_var;
        values[j] = block(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(q));
      }
      acc.update(q, logits, values);
    });
  }
  return acc.finalize();
}

// ---------------------------------------------------------------------------
// Patch-based equivariant denoiser

/// Square odd-sided patches per timestep plus the cyclic translation group
/// subsampled by `translation_stride`. A size of kFullImage (or equal to the
/// side of a square image) means the whole image.
struct PatchConfig {
  static constexpr int kFullImage = 0;

  std::map<int, int> sizes;
  int translation_stride = 1;

  /// Size for timestep t: the entry at the smallest listed timestep >= t,
  /// else the entry at the largest listed timestep. Empty means full image.
  int size_at(int t) const {
    if (sizes.empty()) return kFullImage;
    auto it = sizes.lower_bound(t);
    if (it == sizes.end()) --it;
    return it->second;
  }

  /// Resolved side length for an image, or kFullImage.
  static int resolve(int size, int height, int width) {
    if (size == kFullImage || (height == width && size == height)) return kFullImage;
    if (size < 0) throw ConfigError("patch size must be positive");
    if (size % 2 == 0) throw ConfigError("patch size " + std::to_string(size) + " is even; the center pixel is undefined");
    if (size > std::min(height, width))
      throw ConfigError("patch size " + std::to_string(size) + " exceeds the image side");
    return size;
  }

  void validate(int height, int width) const {
    if (translation_stride < 1) throw ConfigError("translation stride must be >= 1");
    for (const auto& [t, s] : sizes) {
      if (t < 1) throw ConfigError("patch schedule timestep must be >= 1");
      (void)resolve(s, height, width);
    }
  }

  /// Translation set containing only the identity.
  static int identity_only_stride(int height, int width) { return std::max(height, width); }
};

namespace detail {

// Cyclic window sums along rows then columns of a height x width plane.
inline void box_sum(const std::vector<double>& in, std::vector<double>& tmp, std::vector<double>& out, int height,
                    int width, int half) {
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k) s += in[static_cast<std::size_t>(r) * width + ((c + k) % width + width) % width];
      tmp[static_cast<std::size_t>(r) * width + c] = s;
    }
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k)
        s += tmp[static_cast<std::size_t>(((r + k) % height + height) % height) * width + c];
      out[static_cast<std::size_t>(r) * width + c] = s;
    }
}

}  // namespace detail

/// Locality- and translation-constrained optimum: output pixel q is the
/// softmax-weighted average, over images i and cyclic shifts g, of (g o x_i)[q],
/// with weights from the squared distance inside the patch around q.
inline Vector patch_predict(const ImageDataset& ds, const PatchConfig& cfg, const Vector& x, int t,
                            const NoiseSchedule& sched) {
  detail::check_input(ds, x, "patch_predict");
  const int height = ds.height();
  const int width = ds.width();
  const int channels = ds.channels();
  cfg.validate(height, width);
  const int size = PatchConfig::resolve(cfg.size_at(t), height, width);
  const int half = size / 2;
  const int plane = height * width;
  const double root = std::sqrt(sched.alpha_bar(t));
  const double two_var = 2.0 * (1.0 - sched.alpha_bar(t));

  std::vector<std::pair<int, int>> shifts;
  for (int dy = 0; dy < height; dy += cfg.translation_stride)
    for (int dx = 0; dx < width; dx += cfg.translation_stride) shifts.emplace_back(dy, dx);

  // Images are processed in fixed-size chunks whose partial accumulators are
  // merged in index order, so the result does not depend on the thread count.
  constexpr std::size_t kChunk = 4;
  const auto n = static_cast<std::size_t>(ds.size());
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<StreamingSoftmaxAccumulator> partial(chunks, StreamingSoftmaxAccumulator(
                                                                   static_cast<std::size_t>(plane),
                                                                   static_cast<std::size_t>(channels)));
  parallel::parallel_for(chunks, [&](std::size_t chunk) {
    std::vector<double> shifted(static_cast<std::size_t>(plane) * channels);
    std::vector<double> sq(static_cast<std::size_t>(plane));
    std::vector<double> tmp(static_cast<std::size_t>(plane));
    std::vector<double> dist(static_cast<std::size_t>(plane));
    auto& acc = partial[chunk];
    for (std::size_t i = chunk * kChunk; i < std::min(n, (chunk + 1) * kChunk); ++i) {
      const auto img = ds.image(static_cast<Eigen::Index>(i));
      for (const auto& [dy, dx] : shifts) {
        for (int r = 0; r < height; ++r)
          for (int c = 0; c < width; ++c) {
            const int src = ((r - dy + height) % height) * width + ((c - dx + width) % width);
            const int dst = r * width + c;
            double s = 0.0;
            for (int ch = 0; ch < channels; ++ch) {
              const double v = img[src * channels + ch];
              shifted[static_cast<std::size_t>(dst) * channels + ch] = v;
              const double diff = x[dst * channels + ch] - root * v;
              s += diff * diff;
            }
            sq[static_cast<std::size_t>(dst)] = s;
          }
        if (size == PatchConfig::kFullImage) {
          double total = 0.0;
          for (double v : sq) total += v;
          std::fill(dist.begin(), dist.end(), total);
        } else {
          detail::box_sum(sq, tmp, dist, height, width, half);
        }
        for (int q = 0; q < plane; ++q)
          acc.update(static_cast<std::size_t>(q), -dist[static_cast<std::size_t>(q)] / two_var,
                     std::span<const double>(shifted.data() + static_cast<std::size_t>(q) * channels,
                                             static_cast<std::size_t>(channels)));
      }
    }
  });
  for (std::size_t k = 1; k < chunks; ++k) partial[0].merge(partial[k]);
  return partial[0].finalize();
}

/// Per-step patch sizes fitted for common datasets over a 10-step DDIM grid,
/// keyed onto the timesteps of timestep_grid(total, 10).
inline PatchConfig kamb_patch_schedule(const std::string& dataset_name, int total = 1000) {
  static const std::map<std::string, std::vector<int>> presets = {
      {"cifar10", {32, 32, 32, 29, 25, 17, 13, 9, 7, 3}},
      {"celebahq", {64, 64, 57, 49, 45, 25, 17, 17, 9, 3}},
      {"afhq", {64, 64, 45, 33, 25, 17, 17, 9, 9, 3}},
      {"mnist", {28, 28, 23, 23, 17, 17, 17, 13, 9, 9}},
      {"fashion_mnist", {28, 28, 25, 23, 17, 17, 13, 13, 9, 9}},
  };
  auto it = presets.find(dataset_name);
  if (it == presets.end()) {
    std::string known;
    for (const auto& [name, sizes] : presets) known += (known.empty() ? "" : ", ") + name;
    throw ConfigError("unknown patch preset '" + dataset_name + "'; known presets: " + known);
  }
  const auto grid = timestep_grid(total, static_cast<int>(it->second.size()));
  PatchConfig cfg;
  for (std::size_t k = 0; k < grid.size(); ++k) cfg.sizes[grid[k]] = it->second[k];
  return cfg;
}

/// Ordered per-step sizes of a preset.
inline std::vector<int> patch_sizes_by_step(const PatchConfig& cfg) {
  std::vector<int> out;
  for (auto it = cfg.sizes.rbegin(); it != cfg.sizes.rend(); ++it) out.push_back(it->second);
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser adapters

class OptimalDenoiser final : public Denoiser {
 public:
  OptimalDenoiser(std::shared_ptr<const ImageDataset> data, NoiseSchedule sched)
      : data_(std::move(data)), sched_(std::move(sched)) {}

  Vector predict_x0(const Vector& x, int t) const override { return optimal_predict(*data_, x, t, sched_); }
  std::string descriptor() const override { return "optimal(n=" + std::to_string(data_->size()) + ")"; }
  const NoiseSchedule& schedule() const override { return sched_; }
  Eigen::Index dim() const override { return data_->dim(); }

 private:
  std::shared_ptr<const ImageDataset> data_;
  NoiseSchedule sched_;
};

class WienerDenoiser final : public Denoiser {
 public:
  WienerDenoiser(std::shared_ptr<const SpectralModel> model, NoiseSchedule sched)
      : model_(std::move(model)), sched_(std::move(sched)) {}

  Vector predict_x0(const Vector& x, int t) const override { return wiener_predict(*model_, x, t, sched_); }
  std::string descriptor() const override { return "wiener(rank=" + std::to_string(model_->rank()) + ")"; }
  const NoiseSchedule& schedule() const override { return sched_; }
  Eigen::Index dim() const override { return model_->dim(); }
  const SpectralModel& model() const { return *model_; }

 private:
  std::shared_ptr<const SpectralModel> model_;
  NoiseSchedule sched_;
};

inline std::unique_ptr<Denoiser> wiener_denoiser(std::shared_ptr<const SpectralModel> model, NoiseSchedule sched) {
  return std::make_unique<WienerDenoiser>(std::move(model), std::move(sched));
}

class MaskedDenoiser final : public Denoiser {
 public:
  MaskedDenoiser(std::shared_ptr<const ImageDataset> data, std::shared_ptr<const MaskSet> masks, NoiseSchedule sched,
                 std::size_t batch_size = kDefaultBatch)
      : data_(std::move(data)), masks_(std::move(masks)), sched_(std::move(sched)), batch_(batch_size) {}

  Vector predict_x0(const Vector& x, int t) const override {
    return masked_predict(*data_, *masks_, x, t, sched_, batch_);
  }
  std::string descriptor() const override {
    std::ostringstream os;
    os << "masked(n=" << data_->size() << ",tau=" << masks_->tau << ",source="
       << (masks_->provenance == MaskProvenance::spectral ? "spectral" : "external") << ")";
    return os.str();
  }
  const NoiseSchedule& schedule() const override { return sched_; }
  Eigen::Index dim() const override { return data_->dim(); }
  const MaskSet& masks() const { return *masks_; }

 private:
  std::shared_ptr<const ImageDataset> data_;
  std::shared_ptr<const MaskSet> masks_;
  NoiseSchedule sched_;
  std::size_t batch_;
};

class PatchDenoiser final : public Denoiser {
 public:
  PatchDenoiser(std::shared_ptr<const ImageDataset> data, PatchConfig cfg, NoiseSchedule sched)
      : data_(std::move(data)), cfg_(std::move(cfg)), sched_(std::move(sched)) {
    cfg_.validate(data_->height(), data_->width());
  }

  Vector predict_x0(const Vector& x, int t) const override { return patch_predict(*data_, cfg_, x, t, sched_); }
  std::string descriptor() const override {
    std::ostringstream os;
    os << "patch(n=" << data_->size() << ",stride=" << cfg_.translation_stride << ",sizes=";
    bool first = true;
    for (int s : patch_sizes_by_step(cfg_)) {
      os << (first ? "" : "/") << s;
      first = false;
    }
    os << ")";
    return os.str();
  }
  const NoiseSchedule& schedule() const override { return sched_; }
  Eigen::Index dim() const override { return data_->dim(); }

 private:
  std::shared_ptr<const ImageDataset> data_;
  PatchConfig cfg_;
  NoiseSchedule sched_;
};

}  // namespace adl
