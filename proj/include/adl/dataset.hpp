#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adl/error.hpp"
#include "adl/numerics.hpp"
#include "adl/rng.hpp"

namespace adl {

struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;

  double width() const { return hi - lo; }
  bool operator==(const ValueRange&) const = default;
};

/// N flattened images, one per row of `images`. Pixel order is row-major with
/// channels interleaved: index = (row * width + col) * channels + channel.
class ImageDataset {
 public:
  ImageDataset(DenseMatrix images, int height, int width, int channels, ValueRange range)
      : images_(std::move(images)), height_(height), width_(width), channels_(channels), range_(range) {
    if (height_ < 1 || width_ < 1 || channels_ < 1)
      throw ConfigError("ImageDataset: image dimensions must be positive");
    if (images_.rows() < 1) throw ConfigError("ImageDataset: at least one image is required");
    if (images_.cols() != static_cast<Eigen::Index>(height_) * width_ * channels_)
      throw ConfigError("ImageDataset: row length " + std::to_string(images_.cols()) +
                        " does not match H*W*C = " + std::to_string(height_ * width_ * channels_));
    if (!(range_.hi > range_.lo)) throw ConfigError("ImageDataset: degenerate value range");
    if (!images_.allFinite()) throw NumericalError("ImageDataset: non-finite pixel");
    constexpr double slack = 1e-9;
    if (images_.minCoeff() < range_.lo - slack || images_.maxCoeff() > range_.hi + slack)
      throw ConfigError("ImageDataset: pixel outside declared value range");
  }

  const DenseMatrix& images() const { return images_; }
  auto image(Eigen::Index i) const { return images_.row(i); }
  Eigen::Index size() const { return images_.rows(); }
  Eigen::Index dim() const { return images_.cols(); }
  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  int pixels() const { return height_ * width_; }
  ValueRange value_range() const { return range_; }

 private:
  DenseMatrix images_;
  int height_;
  int width_;
  int channels_;
  ValueRange range_;
};

/// Stencil s (one entry per spatial pixel, replicated over channels) and the
/// strength gamma of the injected random-color pattern.
struct PerturbationSpec {
  std::vector<std::uint8_t> stencil;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  bool clamp = true;
};

namespace io {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("short write to " + path.string());
}

inline std::uint32_t read_u32_be(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline std::uint32_t read_u32_le(std::span<const std::uint8_t> b, std::size_t off) {
  return std::uint32_t{b[off]} | (std::uint32_t{b[off + 1]} << 8) | (std::uint32_t{b[off + 2]} << 16) |
         (std::uint32_t{b[off + 3]} << 24);
}

inline std::uint64_t read_u64_le(std::span<const std::uint8_t> b, std::size_t off) {
  return std::uint64_t{read_u32_le(b, off)} | (std::uint64_t{read_u32_le(b, off + 4)} << 32);
}

inline void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

inline void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  put_u32_le(out, static_cast<std::uint32_t>(v));
  put_u32_le(out, static_cast<std::uint32_t>(v >> 32));
}

/// 64-bit FNV-1a digest, used to fingerprint inputs in run manifests.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace io

// ---------------------------------------------------------------------------
// IDX (MNIST layout)

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

/// Parses an IDX3 image file; raw bytes are scaled by 1/255 onto [0, 1].
inline ImageDataset parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4)
    throw FormatError("idx: file too short for magic at byte offset 0 (" + std::to_string(bytes.size()) + " bytes)");
  const std::uint32_t magic = io::read_u32_be(bytes, 0);
  if (magic != kIdxImageMagic) throw FormatError("idx: bad magic at byte offset 0");
  if (bytes.size() < 16)
    throw FormatError("idx: truncated header at byte offset " + std::to_string(bytes.size()));
  const std::uint32_t n = io::read_u32_be(bytes, 4);
  const std::uint32_t rows = io::read_u32_be(bytes, 8);
  const std::uint32_t cols = io::read_u32_be(bytes, 12);
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("idx: zero dimension in header at byte offset 4");
  const std::uint64_t payload = std::uint64_t{n} * rows * cols;
  if (bytes.size() - 16 < payload)
    throw FormatError("idx: truncated payload at byte offset " + std::to_string(bytes.size()) + ", expected " +
                      std::to_string(16 + payload) + " bytes");
  const Eigen::Index d = static_cast<Eigen::Index>(rows) * cols;
  DenseMatrix images(static_cast<Eigen::Index>(n), d);
  const std::uint8_t* src = bytes.data() + 16;
  for (Eigen::Index i = 0; i < images.rows(); ++i)
    for (Eigen::Index p = 0; p < d; ++p) images(i, p) = static_cast<double>(src[i * d + p]) / 255.0;
  return ImageDataset(std::move(images), static_cast<int>(rows), static_cast<int>(cols), 1, {0.0, 1.0});
}

inline ImageDataset load_idx(const std::filesystem::path& path) { return parse_idx(io::read_file(path)); }

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

inline constexpr std::size_t kCifarRecord = 3073;

/// Concatenates CIFAR-10 binary batches. Records are 1 label byte followed by
/// 1024 R, 1024 G and 1024 B bytes; output pixels are channel-interleaved.
inline ImageDataset parse_cifar_binary(std::span<const std::vector<std::uint8_t>> files) {
  std::size_t total = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    if (files[f].empty() || files[f].size() % kCifarRecord != 0)
      throw FormatError("cifar: file " + std::to_string(f) + " length " + std::to_string(files[f].size()) +
                        " is not a multiple of 3073; last record starts at byte offset " +
                        std::to_string(files[f].size() / kCifarRecord * kCifarRecord));
    total += files[f].size() / kCifarRecord;
  }
  if (total == 0) throw FormatError("cifar: no records");
  constexpr int side = 32;
  constexpr int plane = side * side;
  DenseMatrix images(static_cast<Eigen::Index>(total), plane * 3);
  Eigen::Index row = 0;
  for (const auto& file : files) {
    for (std::size_t rec = 0; rec < file.size() / kCifarRecord; ++rec, ++row) {
      const std::uint8_t* px = file.data() + rec * kCifarRecord + 1;
      for (int p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) images(row, p * 3 + c) = static_cast<double>(px[c * plane + p]) / 255.0;
    }
  }
  return ImageDataset(std::move(images), side, side, 3, {0.0, 1.0});
}

inline ImageDataset load_cifar_binary(std::span<const std::filesystem::path> paths) {
  std::vector<std::vector<std::uint8_t>> files;
  for (const auto& p : paths) files.push_back(io::read_file(p));
  return parse_cifar_binary(files);
}

// ---------------------------------------------------------------------------
// Raw tensor interchange: "ADT1" | u8 dtype | u8 rank=4 | 4 x u32 dims | payload (LE)

enum class RawDtype : std::uint8_t { f32 = 0, f64 = 1 };

inline std::vector<std::uint8_t> encode_raw_tensor(const DenseMatrix& rows, int height, int width, int channels,
                                                   RawDtype dtype) {
  std::vector<std::uint8_t> out{'A', 'D', 'T', '1', static_cast<std::uint8_t>(dtype), 4};
  io::put_u32_le(out, static_cast<std::uint32_t>(rows.rows()));
  io::put_u32_le(out, static_cast<std::uint32_t>(height));
  io::put_u32_le(out, static_cast<std::uint32_t>(width));
  io::put_u32_le(out, static_cast<std::uint32_t>(channels));
  out.reserve(out.size() + static_cast<std::size_t>(rows.size()) * (dtype == RawDtype::f32 ? 4 : 8));
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    for (Eigen::Index p = 0; p < rows.cols(); ++p) {
      if (dtype == RawDtype::f32)
        io::put_u32_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(rows(i, p))));
      else
        io::put_u64_le(out, std::bit_cast<std::uint64_t>(rows(i, p)));
    }
  return out;
}

struct RawTensor {
  DenseMatrix rows;
  int height = 0;
  int width = 0;
  int channels = 0;
  RawDtype dtype = RawDtype::f64;
};

inline RawTensor decode_raw_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ADT1", 4) != 0)
    throw FormatError("raw tensor: magic mismatch at byte offset 0");
  if (bytes.size() < 22) throw FormatError("raw tensor: truncated header at byte offset " + std::to_string(bytes.size()));
  if (bytes[4] > 1) throw FormatError("raw tensor: unknown dtype at byte offset 4");
  if (bytes[5] != 4) throw FormatError("raw tensor: rank " + std::to_string(bytes[5]) + " at byte offset 5, expected 4");
  RawTensor t;
  t.dtype = static_cast<RawDtype>(bytes[4]);
  const std::uint32_t n = io::read_u32_le(bytes, 6);
  t.height = static_cast<int>(io::read_u32_le(bytes, 10));
  t.width = static_cast<int>(io::read_u32_le(bytes, 14));
  t.channels = static_cast<int>(io::read_u32_le(bytes, 18));
  if (n == 0 || t.height == 0 || t.width == 0 || t.channels == 0)
    throw FormatError("raw tensor: zero dimension in header at byte offset 6");
  const std::size_t width_bytes = t.dtype == RawDtype::f32 ? 4 : 8;
  const std::uint64_t d = std::uint64_t(t.height) * t.width * t.channels;
  const std::uint64_t expected = 22 + std::uint64_t{n} * d * width_bytes;
  if (bytes.size() != expected)
    throw FormatError("raw tensor: payload size mismatch at byte offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(expected) + " bytes");
  t.rows.resize(n, static_cast<Eigen::Index>(d));
  std::size_t off = 22;
  for (Eigen::Index i = 0; i < t.rows.rows(); ++i)
    for (Eigen::Index p = 0; p < t.rows.cols(); ++p, off += width_bytes)
      t.rows(i, p) = t.dtype == RawDtype::f32 ? double{std::bit_cast<float>(io::read_u32_le(bytes, off))}
                                              : std::bit_cast<double>(io::read_u64_le(bytes, off));
  if (!t.rows.allFinite()) throw FormatError("raw tensor: non-finite payload value");
  return t;
}

/// Range guess for tensors without one: [0,1] or [-1,1] when the data fits,
/// otherwise the observed extent.
inline ValueRange infer_range(const DenseMatrix& m) {
  const double lo = m.minCoeff();
  const double hi = m.maxCoeff();
  if (lo >= 0.0 && hi <= 1.0) return {0.0, 1.0};
  if (lo >= -1.0 && hi <= 1.0) return {-1.0, 1.0};
  if (hi > lo) return {lo, hi};
  return {lo - 0.5, lo + 0.5};
}

inline ImageDataset load_raw_tensor(const std::filesystem::path& path, std::optional<ValueRange> range = {}) {
  RawTensor t = decode_raw_tensor(io::read_file(path));
  const ValueRange r = range.value_or(infer_range(t.rows));
  return ImageDataset(std::move(t.rows), t.height, t.width, t.channels, r);
}

inline void save_raw_tensor(const ImageDataset& ds, const std::filesystem::path& path,
                            RawDtype dtype = RawDtype::f64) {
  io::write_file(path, encode_raw_tensor(ds.images(), ds.height(), ds.width(), ds.channels(), dtype));
}

// ---------------------------------------------------------------------------
// Transformations

/// Affine map of every pixel from the declared range onto `target`.
inline ImageDataset rescale(const ImageDataset& ds, ValueRange target) {
  const ValueRange src = ds.value_range();
  if (!(src.hi > src.lo) || !(target.hi > target.lo)) throw ConfigError("rescale: degenerate interval");
  if (src == target) return ds;
  const double scale = target.width() / src.width();
  DenseMatrix out = ((ds.images().array() - src.lo) * scale + target.lo).matrix();
  out = out.cwiseMax(target.lo).cwiseMin(target.hi);
  return ImageDataset(std::move(out), ds.height(), ds.width(), ds.channels(), target);
}

/// `count` distinct images drawn without replacement, in draw order.
inline ImageDataset subset(const ImageDataset& ds, Eigen::Index count, std::uint64_t seed) {
  if (count < 1 || count > ds.size())
    throw ConfigError("subset: count " + std::to_string(count) + " outside [1, " + std::to_string(ds.size()) + "]");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(ds.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  CounterRng rng(seed, 0x5ab5e7);
  for (Eigen::Index k = 0; k < count; ++k) {
    const auto j = k + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(ds.size() - k)));
    std::swap(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(j)]);
  }
  DenseMatrix out(count, ds.dim());
  for (Eigen::Index k = 0; k < count; ++k) out.row(k) = ds.image(order[static_cast<std::size_t>(k)]);
  return ImageDataset(std::move(out), ds.height(), ds.width(), ds.channels(), ds.value_range());
}

namespace detail {
// clang-format off
inline constexpr std::array<const char*, 28> kLetterW = {
    "............................",
    "............................",
    "............................",
    "............................",
    "............................",
    "...##....................##.",
    "...##....................##.",
    "...###..................###.",
    "....##..................##..",
    "....##..................##..",
    "....###................###..",
    ".....##.......##.......##...",
    ".....##......####......##...",
    ".....##......####......##...",
    "......##....######....##....",
    "......##....##..##....##....",
    "......##...###..###...##....",
    "......###.###....###.###....",
    ".......##.##......##.##.....",
    ".......#####......#####.....",
    ".......####........####.....",
    "........###........###......",
    "........##..........##......",
    "............................",
    "............................",
    "............................",
    "............................",
    "............................",
};
// clang-format on
}  // namespace detail

/// The bundled 28x28 letter-W raster, nearest-neighbor resampled to height x width.
inline std::vector<std::uint8_t> default_w_stencil(int height, int width) {
  if (height < 1 || width < 1) throw ConfigError("default_w_stencil: dimensions must be positive");
  std::vector<std::uint8_t> s(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const int sr = std::min(27, (2 * r + 1) * 28 / (2 * height));
      const int sc = std::min(27, (2 * c + 1) * 28 / (2 * width));
      s[static_cast<std::size_t>(r) * width + c] = detail::kLetterW[sr][sc] == '#' ? 1 : 0;
    }
  return s;
}

/// Adds gamma * c * s to every image, with one color c ~ Uniform[-1, 1]^C per
/// image shared across the stencil. Results are clamped to the value range
/// unless spec.clamp is false, in which case the range is widened to fit.
inline ImageDataset inject_pattern(const ImageDataset& ds, const PerturbationSpec& spec) {
  if (spec.stencil.size() != static_cast<std::size_t>(ds.pixels()))
    throw ConfigError("inject_pattern: stencil has " + std::to_string(spec.stencil.size()) + " pixels, dataset has " +
                      std::to_string(ds.pixels()));
  bool any = false;
  for (auto v : spec.stencil) {
    if (v > 1) throw ConfigError("inject_pattern: stencil entries must be 0 or 1");
    any = any || v == 1;
  }
  if (!any) throw ConfigError("inject_pattern: stencil is empty");
  if (!(spec.gamma >= 0.0)) throw ConfigError("inject_pattern: gamma must be nonnegative");
  if (spec.gamma == 0.0) return ds;
  const int channels = ds.channels();
  DenseMatrix out = ds.images();
  std::vector<double> color(static_cast<std::size_t>(channels));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    CounterRng rng(spec.seed, static_cast<std::uint64_t>(i));
    for (auto& c : color) c = rng.uniform(-1.0, 1.0);
    for (int p = 0; p < ds.pixels(); ++p) {
      if (!spec.stencil[static_cast<std::size_t>(p)]) continue;
      for (int ch = 0; ch < channels; ++ch) out(i, p * channels + ch) += spec.gamma * color[static_cast<std::size_t>(ch)];
    }
  }
  ValueRange range = ds.value_range();
  if (spec.clamp) {
    out = out.cwiseMax(range.lo).cwiseMin(range.hi);
  } else {
    range.lo = std::min(range.lo, out.minCoeff());
    range.hi = std::max(range.hi, out.maxCoeff());
  }
  return ImageDataset(std::move(out), ds.height(), ds.width(), ds.channels(), range);
}

// ---------------------------------------------------------------------------
// Image export

/// Binary PGM (C=1) or PPM (C=3) with values mapped from `range` to 0..255.
inline std::vector<std::uint8_t> encode_pnm(std::span<const double> pixels, int height, int width, int channels,
                                            ValueRange range) {
  if (channels != 1 && channels != 3) throw ConfigError("encode_pnm: only 1 or 3 channels are supported");
  if (pixels.size() != static_cast<std::size_t>(height) * width * channels)
    throw ConfigError("encode_pnm: pixel count does not match dimensions");
  const std::string header =
      std::string(channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + pixels.size());
  for (double v : pixels) {
    double u = (v - range.lo) / range.width();
    u = std::isfinite(u) ? std::clamp(u, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(u * 255.0)));
  }
  return out;
}

inline void write_pnm(const std::filesystem::path& path, std::span<const double> pixels, int height, int width,
                      int channels, ValueRange range) {
  io::write_file(path, encode_pnm(pixels, height, width, channels, range));
}

struct TiledImage {
  std::vector<double> pixels;
  int height = 0;
  int width = 0;
};

/// Tiles the rows of `images` into a near-square grid with 1-pixel borders of `fill`.
inline TiledImage tile_grid(const DenseMatrix& images, int height, int width, int channels, double fill) {
  const int n = static_cast<int>(images.rows());
  const int cols = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)))));
  const int rows = (n + cols - 1) / cols;
  TiledImage out;
  out.height = rows * (height + 1) + 1;
  out.width = cols * (width + 1) + 1;
  out.pixels.assign(static_cast<std::size_t>(out.height) * out.width * channels, fill);
  for (int k = 0; k < n; ++k) {
    const int r0 = (k / cols) * (height + 1) + 1;
    const int c0 = (k % cols) * (width + 1) + 1;
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        for (int ch = 0; ch < channels; ++ch)
          out.pixels[(static_cast<std::size_t>(r0 + r) * out.width + (c0 + c)) * channels + ch] =
              images(k, (r * width + c) * channels + ch);
  }
  return out;
}

}  // namespace adl
