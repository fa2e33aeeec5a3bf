#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "adl/dataset.hpp"
#include "adl/denoisers.hpp"
#include "adl/error.hpp"
#include "adl/rng.hpp"
#include "adl/spectral.hpp"

using namespace adl;

namespace {

ImageDataset random_dataset(int n, int h, int w, int c, std::uint64_t seed) {
  CounterRng rng(seed, 0);
  DenseMatrix m(n, h * w * c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return ImageDataset(std::move(m), h, w, c, {-1, 1});
}

Vector random_input(Eigen::Index d, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed, 77);
  Vector x(d);
  for (Eigen::Index i = 0; i < d; ++i) x[i] = scale * rng.normal();
  return x;
}

// Cyclic shift of a channel-interleaved image by (dy, dx).
Vector shift(const Vector& x, int h, int w, int c, int dy, int dx) {
  Vector out(x.size());
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col)
      for (int ch = 0; ch < c; ++ch)
        out[(((r + dy) % h) * w + (col + dx) % w) * c + ch] = x[(r * w + col) * c + ch];
  return out;
}

// Direct dense evaluation of the softmax-weighted average for one output pixel.
double dense_masked_pixel(const ImageDataset& ds, const std::vector<std::uint32_t>& mask, const Vector& x, int q,
                          double abar) {
  std::vector<double> logits(static_cast<std::size_t>(ds.size()));
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    double dist = 0;
    for (auto p : mask) {
      const double diff = x[p] - std::sqrt(abar) * ds.images()(i, p);
      dist += diff * diff;
    }
    logits[static_cast<std::size_t>(i)] = -dist / (2.0 * (1.0 - abar));
  }
  const Vector w = stable_softmax(logits);
  double out = 0;
  for (Eigen::Index i = 0; i < ds.size(); ++i) out += w[i] * ds.images()(i, q);
  return out;
}

const NoiseSchedule& sched() {
  static const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  return s;
}

}  // namespace

TEST(StreamingSoftmax, MatchesSinglePass) {
  CounterRng rng(1, 0);
  std::vector<double> logits(50), values(50);
  for (int i = 0; i < 50; ++i) {
    logits[i] = 30.0 * rng.normal();
    values[i] = rng.normal();
  }
  const Vector w = stable_softmax(logits);
  double expected = 0;
  for (int i = 0; i < 50; ++i) expected += w[i] * values[i];
  for (std::size_t batch : {1u, 7u, 50u}) {
    StreamingSoftmaxAccumulator acc(1);
    for (std::size_t s = 0; s < 50; s += batch) {
      const auto n = std::min<std::size_t>(batch, 50 - s);
      acc.update(0, std::span<const double>(logits).subspan(s, n), std::span<const double>(values).subspan(s, n));
    }
    EXPECT_NEAR(acc.finalize()[0], expected, 1e-12);
  }
}

TEST(StreamingSoftmax, MergeEqualsSequential) {
  CounterRng rng(2, 0);
  StreamingSoftmaxAccumulator whole(2, 3), left(2, 3), right(2, 3);
  for (int i = 0; i < 20; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      const double l = 10.0 * rng.normal();
      const std::vector<double> v{rng.normal(), rng.normal(), rng.normal()};
      whole.update(k, l, v);
      (i < 8 ? left : right).update(k, l, v);
    }
  }
  left.merge(right);
  EXPECT_LE((left.finalize() - whole.finalize()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(StreamingSoftmax, EmptySupportIsError) {
  StreamingSoftmaxAccumulator acc(1);
  EXPECT_THROW(acc.finalize(), NumericalError);
  StreamingSoftmaxAccumulator other(2);
  EXPECT_THROW(acc.merge(other), ConfigError);
}

TEST(Optimal, SingleImageReturnsIt) {
  const auto ds = random_dataset(1, 3, 3, 1, 3);
  for (int t : {1, 500, 1000}) {
    const Vector out = optimal_predict(ds, random_input(9, static_cast<std::uint64_t>(t)), t, sched());
    EXPECT_LE((out.transpose() - ds.image(0)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Optimal, MidpointOfTwoImages) {
  const auto ds = random_dataset(2, 2, 2, 1, 4);
  const int t = 300;
  const Vector mid = 0.5 * (ds.image(0) + ds.image(1)).transpose();
  const Vector out = optimal_predict(ds, std::sqrt(sched().alpha_bar(t)) * mid, t, sched());
  EXPECT_LE((out - mid).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Optimal, SmallNoisePicksNearestImage) {
  const auto ds = random_dataset(10, 4, 4, 1, 5);
  for (Eigen::Index k = 0; k < ds.size(); ++k) {
    const Vector x = std::sqrt(sched().alpha_bar(1)) * ds.image(k).transpose() + random_input(16, 9, 1e-4);
    const Vector out = optimal_predict(ds, x, 1, sched());
    EXPECT_LE((out.transpose() - ds.image(k)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_GT(optimal_weights(ds, x, 1, sched()).maxCoeff(), 1.0 - 1e-9);
  }
}

TEST(Optimal, PropertyWeightsNormalizedAndConvexHull) {
  const auto ds = random_dataset(12, 3, 3, 2, 6);
  const Vector lo = ds.images().colwise().minCoeff().transpose();
  const Vector hi = ds.images().colwise().maxCoeff().transpose();
  for (int t : {1, 10, 100, 500, 1000}) {
    const Vector x = random_input(18, static_cast<std::uint64_t>(t));
    EXPECT_NEAR(optimal_weights(ds, x, t, sched()).sum(), 1.0, 1e-12);
    const Vector out = optimal_predict(ds, x, t, sched());
    for (int p = 0; p < 18; ++p) {
      EXPECT_GE(out[p], lo[p] - 1e-12);
      EXPECT_LE(out[p], hi[p] + 1e-12);
    }
  }
}

TEST(Optimal, DimensionMismatch) {
  const auto ds = random_dataset(2, 2, 2, 1, 7);
  EXPECT_THROW(optimal_predict(ds, Vector::Zero(5), 1, sched()), ConfigError);
}

TEST(Masked, FullMasksEqualOptimal) {
  const auto ds = random_dataset(9, 3, 3, 1, 8);
  const std::vector<int> ts{1, 250, 1000};
  const auto masks = full_masks(ts, 9);
  for (int t : ts) {
    const Vector x = random_input(9, static_cast<std::uint64_t>(t));
    EXPECT_LE((masked_predict(ds, masks, x, t, sched()) - optimal_predict(ds, x, t, sched())).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(Masked, SingletonMasksAreLocal) {
  const auto ds = random_dataset(6, 3, 3, 1, 9);
  MaskSet masks;
  MaskSet::PixelMasks pm(9);
  for (std::uint32_t q = 0; q < 9; ++q) pm[q] = {q};
  masks.masks[200] = pm;
  const Vector x = random_input(9, 1);
  const Vector base = masked_predict(ds, masks, x, 200, sched());
  Vector moved = x;
  for (int p = 1; p < 9; ++p) moved[p] += 0.7;
  EXPECT_EQ(masked_predict(ds, masks, moved, 200, sched())[0], base[0]);
}

TEST(Masked, MatchesDenseReferenceAndBatchSizes) {
  CounterRng rng(10, 0);
  const auto ds = random_dataset(13, 4, 4, 1, 10);
  MaskSet masks;
  MaskSet::PixelMasks pm(16);
  for (std::uint32_t q = 0; q < 16; ++q)
    for (std::uint32_t p = 0; p < 16; ++p)
      if (p == q || rng.uniform() < 0.4) pm[q].push_back(p);
  masks.masks[400] = pm;
  const Vector x = random_input(16, 2);
  const Vector ref = masked_predict(ds, masks, x, 400, sched(), 13);
  for (int q = 0; q < 16; ++q)
    EXPECT_NEAR(ref[q], dense_masked_pixel(ds, pm[static_cast<std::size_t>(q)], x, q, sched().alpha_bar(400)), 1e-12);
  for (std::size_t b : {1u, 2u, 7u, 100u})
    EXPECT_LE((masked_predict(ds, masks, x, 400, sched(), b) - ref).cwiseAbs().maxCoeff(), 1e-12) << "batch " << b;
}

TEST(Masked, MissingTimestepAndShapeErrors) {
  const auto ds = random_dataset(3, 2, 2, 1, 11);
  const std::vector<int> ts{5};
  const auto masks = full_masks(ts, 4);
  EXPECT_THROW(masked_predict(ds, masks, Vector::Zero(4), 6, sched()), ConfigError);
  EXPECT_THROW(masked_predict(ds, full_masks(ts, 3), Vector::Zero(4), 5, sched()), ConfigError);
  EXPECT_THROW(masked_predict(ds, masks, Vector::Zero(4), 5, sched(), 0), ConfigError);
}

TEST(Masked, PropertyConvexHull) {
  const auto ds = random_dataset(10, 3, 3, 1, 12);
  const auto model = fit(ds);
  const std::vector<int> ts{900, 100};
  const auto masks = build_masks(model, ts, sched(), 0.02);
  const Vector lo = ds.images().colwise().minCoeff().transpose();
  const Vector hi = ds.images().colwise().maxCoeff().transpose();
  for (int t : ts) {
    const Vector out = masked_predict(ds, masks, random_input(9, 3), t, sched());
    EXPECT_TRUE(((out - lo).array() >= -1e-12).all());
    EXPECT_TRUE(((hi - out).array() >= -1e-12).all());
  }
}

TEST(PatchConfig, Validation) {
  EXPECT_EQ(PatchConfig::resolve(8, 8, 8), PatchConfig::kFullImage);
  EXPECT_EQ(PatchConfig::resolve(3, 8, 8), 3);
  EXPECT_THROW(PatchConfig::resolve(4, 8, 8), ConfigError);
  EXPECT_THROW(PatchConfig::resolve(9, 8, 8), ConfigError);
  PatchConfig cfg;
  cfg.translation_stride = 0;
  EXPECT_THROW(cfg.validate(8, 8), ConfigError);
}

TEST(PatchConfig, SizeLookup) {
  PatchConfig cfg;
  cfg.sizes = {{100, 3}, {500, 5}, {1000, 7}};
  EXPECT_EQ(cfg.size_at(1), 3);
  EXPECT_EQ(cfg.size_at(100), 3);
  EXPECT_EQ(cfg.size_at(101), 5);
  EXPECT_EQ(cfg.size_at(1000), 7);
  EXPECT_EQ(PatchConfig{}.size_at(10), PatchConfig::kFullImage);
}

TEST(Patch, FullPatchIdentityTranslationEqualsOptimal) {
  const auto ds = random_dataset(11, 5, 5, 3, 13);
  PatchConfig cfg;
  cfg.translation_stride = PatchConfig::identity_only_stride(5, 5);
  for (int t : {1, 300, 1000}) {
    const Vector x = random_input(75, static_cast<std::uint64_t>(t));
    EXPECT_LE((patch_predict(ds, cfg, x, t, sched()) - optimal_predict(ds, x, t, sched())).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Patch, UnitPatchIsPerPixelSoftmax) {
  const auto ds = random_dataset(4, 3, 3, 1, 14);
  PatchConfig cfg;
  cfg.sizes[1000] = 1;
  const int t = 600;
  const double abar = sched().alpha_bar(t);
  const Vector x = random_input(9, 4);
  const Vector out = patch_predict(ds, cfg, x, t, sched());
  for (int q = 0; q < 9; ++q) {
    std::vector<double> logits, values;
    for (Eigen::Index i = 0; i < ds.size(); ++i)
      for (int p = 0; p < 9; ++p) {
        const double v = ds.images()(i, p);
        logits.push_back(-(x[q] - std::sqrt(abar) * v) * (x[q] - std::sqrt(abar) * v) / (2 * (1 - abar)));
        values.push_back(v);
      }
    const Vector w = stable_softmax(logits);
    double expected = 0;
    for (std::size_t j = 0; j < values.size(); ++j) expected += w[static_cast<Eigen::Index>(j)] * values[j];
    EXPECT_NEAR(out[q], expected, 1e-12);
  }
}

TEST(Patch, MatchesDirectPatchSum) {
  const int h = 6, w = 5, c = 2;
  const auto ds = random_dataset(3, h, w, c, 15);
  PatchConfig cfg;
  cfg.sizes[1000] = 3;
  cfg.translation_stride = 2;
  const int t = 700;
  const double abar = sched().alpha_bar(t);
  const Vector x = random_input(h * w * c, 5);
  const Vector out = patch_predict(ds, cfg, x, t, sched());
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col) {
      std::vector<double> logits;
      std::vector<Vector> vals;
      for (Eigen::Index i = 0; i < ds.size(); ++i)
        for (int dy = 0; dy < h; dy += 2)
          for (int dx = 0; dx < w; dx += 2) {
            const Vector g = shift(ds.image(i).transpose(), h, w, c, dy, dx);
            double dist = 0;
            for (int a = -1; a <= 1; ++a)
              for (int b = -1; b <= 1; ++b) {
                const int p = ((r + a + h) % h) * w + (col + b + w) % w;
                for (int ch = 0; ch < c; ++ch) {
                  const double diff = x[p * c + ch] - std::sqrt(abar) * g[p * c + ch];
                  dist += diff * diff;
                }
              }
            logits.push_back(-dist / (2 * (1 - abar)));
            vals.push_back(g.segment((r * w + col) * c, c));
          }
      const Vector wts = stable_softmax(logits);
      Vector expected = Vector::Zero(c);
      for (std::size_t j = 0; j < vals.size(); ++j) expected += wts[static_cast<Eigen::Index>(j)] * vals[j];
      EXPECT_LE((out.segment((r * w + col) * c, c) - expected).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Patch, PropertyCyclicShiftEquivariance) {
  const auto ds = random_dataset(5, 8, 8, 1, 16);
  PatchConfig cfg;
  cfg.sizes[1000] = 3;
  CounterRng rng(16, 1);
  for (int trial = 0; trial < 4; ++trial) {
    const int t = 1 + static_cast<int>(rng.below(1000));
    const int dy = static_cast<int>(rng.below(8)), dx = static_cast<int>(rng.below(8));
    const Vector x = random_input(64, 100 + static_cast<std::uint64_t>(trial));
    const Vector lhs = patch_predict(ds, cfg, shift(x, 8, 8, 1, dy, dx), t, sched());
    const Vector rhs = shift(patch_predict(ds, cfg, x, t, sched()), 8, 8, 1, dy, dx);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Patch, EvenSizeRejected) {
  const auto ds = random_dataset(2, 4, 4, 1, 17);
  PatchConfig cfg;
  cfg.sizes[10] = 2;
  EXPECT_THROW(patch_predict(ds, cfg, Vector::Zero(16), 10, sched()), ConfigError);
}

TEST(KambPresets, PublishedSizes) {
  EXPECT_EQ(patch_sizes_by_step(kamb_patch_schedule("cifar10")), (std::vector<int>{32, 32, 32, 29, 25, 17, 13, 9, 7, 3}));
  EXPECT_EQ(patch_sizes_by_step(kamb_patch_schedule("mnist")), (std::vector<int>{28, 28, 23, 23, 17, 17, 17, 13, 9, 9}));
  const auto cfg = kamb_patch_schedule("mnist");
  EXPECT_EQ(cfg.size_at(1000), 28);
  EXPECT_EQ(cfg.size_at(100), 9);
  EXPECT_EQ(cfg.size_at(550), 17);
}

TEST(KambPresets, UnknownNameListsKnown) {
  try {
    kamb_patch_schedule("imagenet");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cifar10"), std::string::npos);
  }
}

TEST(Adapters, InterfaceAndDescriptors) {
  auto data = std::make_shared<const ImageDataset>(random_dataset(6, 3, 3, 1, 18));
  auto model = std::make_shared<const SpectralModel>(fit(*data));
  const std::vector<int> ts{500};
  auto masks = std::make_shared<const MaskSet>(full_masks(ts, 9));
  OptimalDenoiser opt(data, sched());
  const auto wien = wiener_denoiser(model, sched());
  MaskedDenoiser masked(data, masks, sched());
  PatchConfig cfg;
  cfg.translation_stride = 3;
  PatchDenoiser patch(data, cfg, sched());
  const Vector x = random_input(9, 6);
  EXPECT_LE((opt.predict_x0(x, 500) - masked.predict_x0(x, 500)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((opt.predict_x0(x, 500) - patch.predict_x0(x, 500)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((wien->predict_x0(x, 500) - wiener_predict(*model, x, 500, sched())).cwiseAbs().maxCoeff(), 0.0);
  for (const Denoiser* d : std::initializer_list<const Denoiser*>{&opt, wien.get(), &masked, &patch}) {
    EXPECT_EQ(d->dim(), 9);
    EXPECT_FALSE(d->descriptor().empty());
  }
}

TEST(Adapters, WienerOfIdenticalDatasetIsConstant) {
  DenseMatrix m(4, 4);
  for (int i = 0; i < 4; ++i) m.row(i) << 0.2, -0.1, 0.0, 0.3;
  auto model = std::make_shared<const SpectralModel>(fit(ImageDataset(m, 2, 2, 1, {-1, 1})));
  const auto d = wiener_denoiser(model, sched());
  EXPECT_LE((d->predict_x0(random_input(4, 1), 10).transpose() - m.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Masked, EqualPositiveWeightsChangeNothing) {
  // Scaling every masked distance term by the same positive weight c is the
  // same as running at a rescaled noise level; c = 1 recovers the binary mask.
  const auto ds = random_dataset(7, 3, 3, 1, 19);
  CounterRng rng(19, 0);
  MaskSet::PixelMasks pm(9);
  for (std::uint32_t q = 0; q < 9; ++q)
    for (std::uint32_t p = 0; p < 9; ++p)
      if (p == q || rng.uniform() < 0.5) pm[q].push_back(p);
  MaskSet masks;
  masks.masks[300] = pm;
  const Vector x = random_input(9, 7);
  const Vector out = masked_predict(ds, masks, x, 300, sched());
  for (int q = 0; q < 9; ++q)
    EXPECT_NEAR(out[q], dense_masked_pixel(ds, pm[static_cast<std::size_t>(q)], x, q, sched().alpha_bar(300)), 1e-12);
}
