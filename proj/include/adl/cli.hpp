#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "adl/dataset.hpp"
#include "adl/denoisers.hpp"
#include "adl/error.hpp"
#include "adl/metrics.hpp"
#include "adl/parallel.hpp"
#include "adl/sampler.hpp"
#include "adl/schedule.hpp"
#include "adl/sensitivity.hpp"
#include "adl/spectral.hpp"

namespace adl {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Configuration

/// Flat key=value configuration. Precedence: overrides > file > defaults.
class RunConfig {
 public:
  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"dataset.path", ""},
        {"dataset.format", "idx"},
        {"dataset.subset", "0"},
        {"dataset.subset_seed", "0"},
        {"schedule.T", "1000"},
        {"schedule.beta_start", "0.0001"},
        {"schedule.beta_end", "0.02"},
        {"denoiser.kind", "optimal"},
        {"denoiser.tau", "0.02"},
        {"denoiser.patch_preset", "mnist"},
        {"denoiser.translation_stride", "1"},
        {"denoiser.mask_file", ""},
        {"sampler.steps", "10"},
        {"sampler.count", "4"},
        {"sampler.seed", "0"},
        {"output.dir", "out"},
        {"stats.topk", "8"},
        {"sensitivity.pixel", ""},
        {"sensitivity.timesteps", ""},
        {"sensitivity.normalize", "per-image"},
        {"sensitivity.samples", "8"},
        {"sensitivity.seed", "0"},
        {"perturb.gamma", "0.1"},
        {"perturb.stencil", "W"},
        {"perturb.seed", "0"},
        {"perturb.clamp", "true"},
        {"benchmark.external", ""},
        {"nn.query", ""},
        {"nn.range", "-1,1"},
    };
    return d;
  }

  RunConfig() : values_(defaults()) {}

  /// Parses "key=value" lines; '#' starts a comment. Keys under "meta." are
  /// run metadata (as written into manifests) and are skipped.
  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      const std::string key = trim(line.substr(0, eq));
      if (key.rfind("meta.", 0) == 0) continue;
      set(key, trim(line.substr(eq + 1)));
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      long long v = std::stoll(s, &used);
      if (used == s.size()) return v;
    } catch (...) {
    }
    throw ConfigError("config key '" + key + "' expects an integer, got '" + s + "'");
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used == s.size() && std::isfinite(v)) return v;
    } catch (...) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + s + "'");
  }

  std::vector<std::string> list(const std::string& key) const { return split(str(key), ','); }

  /// Every key=value line, sorted by key.
  std::string canonical_text(bool include_output = true) const {
    std::string out;
    for (const auto& [k, v] : values_) {
      if (!include_output && k == "output.dir") continue;
      out += k + "=" + v + "\n";
    }
    return out;
  }

  std::filesystem::path output_dir() const { return str("output.dir"); }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
      cur = trim(cur);
      if (!cur.empty()) out.push_back(cur);
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Manifests

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Plain-text key=value record of a run. Loading it back as a config file
/// reproduces the run; "meta." keys carry hashes, digests and results.
class Manifest {
 public:
  Manifest(const std::string& command, const RunConfig& cfg) : config_(cfg.canonical_text()) {
    meta("command", command);
    meta("version", kVersion);
    meta("config_hash", hex64(io::fnv1a64(cfg.canonical_text(false))));
  }

  void meta(const std::string& key, const std::string& value) { meta_[key] = value; }

  std::string text() const {
    std::string out = "# adl run manifest\n" + config_;
    for (const auto& [k, v] : meta_) out += "meta." + k + "=" + v + "\n";
    return out;
  }

  void write(const std::filesystem::path& path) const {
    const auto s = text();
    io::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }

 private:
  std::string config_;
  std::map<std::string, std::string> meta_;
};

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  io::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---------------------------------------------------------------------------
// Shared setup

/// Loaded dataset in the canonical working range [-1, 1] plus its input digest.
struct LoadedDataset {
  std::shared_ptr<const ImageDataset> data;
  std::string digest;
};

inline constexpr ValueRange kWorkingRange{-1.0, 1.0};

inline LoadedDataset load_dataset(const RunConfig& cfg) {
  const auto paths = cfg.list("dataset.path");
  if (paths.empty()) throw ConfigError("dataset.path is required");
  std::uint64_t digest = 0xcbf29ce484222325ULL;
  std::vector<std::filesystem::path> files;
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) throw ConfigError("dataset file not found: " + p);
    files.emplace_back(p);
    const auto bytes = io::read_file(p);
    digest = io::fnv1a64(bytes, digest);
  }
  const auto& format = cfg.str("dataset.format");
  std::optional<ImageDataset> ds;
  if (format == "idx") {
    if (files.size() != 1) throw ConfigError("idx format takes exactly one file");
    ds.emplace(load_idx(files.front()));
  } else if (format == "cifar") {
    ds.emplace(load_cifar_binary(files));
  } else if (format == "raw") {
    if (files.size() != 1) throw ConfigError("raw format takes exactly one file");
    ds.emplace(load_raw_tensor(files.front()));
  } else {
    throw ConfigError("dataset.format must be idx, cifar or raw");
  }
  const auto count = cfg.integer("dataset.subset");
  if (count < 0) throw ConfigError("dataset.subset must be >= 0");
  if (count > 0) ds.emplace(subset(*ds, count, static_cast<std::uint64_t>(cfg.integer("dataset.subset_seed"))));
  return {std::make_shared<const ImageDataset>(rescale(*ds, kWorkingRange)), hex64(digest)};
}

inline NoiseSchedule make_schedule(const RunConfig& cfg) {
  return linear_schedule(static_cast<int>(cfg.integer("schedule.T")), cfg.real("schedule.beta_start"),
                         cfg.real("schedule.beta_end"));
}

inline std::vector<int> sampler_grid(const RunConfig& cfg, const NoiseSchedule& sched) {
  return timestep_grid(sched.steps(), static_cast<int>(cfg.integer("sampler.steps")));
}

inline std::uint64_t seed_of(const RunConfig& cfg, const std::string& key) {
  const auto v = cfg.integer(key);
  if (v < 0) throw ConfigError(key + " must be nonnegative");
  return static_cast<std::uint64_t>(v);
}

/// Builds denoisers of the configured kinds, fitting the spectral model at
/// most once. `timesteps` are the steps spectral masks are needed for.
class DenoiserFactory {
 public:
  DenoiserFactory(const RunConfig& cfg, LoadedDataset data, NoiseSchedule sched)
      : cfg_(cfg), data_(std::move(data)), sched_(std::move(sched)) {}

  const ImageDataset& dataset() const { return *data_.data; }
  const NoiseSchedule& schedule() const { return sched_; }

  std::shared_ptr<const SpectralModel> model() {
    if (!model_) model_ = std::make_shared<const SpectralModel>(fit(*data_.data));
    return model_;
  }

  std::shared_ptr<const MaskSet> masks(std::span<const int> timesteps) {
    const auto& file = cfg_.str("denoiser.mask_file");
    if (!file.empty()) {
      if (!std::filesystem::exists(file)) throw ConfigError("mask file not found: " + file);
      auto set = std::make_shared<MaskSet>(load_masks(file));
      if (set->dim() != static_cast<std::size_t>(data_.data->dim()))
        throw ConfigError("mask file pixel count does not match the dataset");
      for (int t : timesteps)
        if (!set->contains(t)) throw ConfigError("mask file has no entry for timestep " + std::to_string(t));
      return set;
    }
    return std::make_shared<const MaskSet>(build_masks(*model(), timesteps, sched_, cfg_.real("denoiser.tau")));
  }

  PatchConfig patch_config(int steps) const {
    const auto& preset = cfg_.str("denoiser.patch_preset");
    PatchConfig cfg;
    if (!preset.empty() && std::isdigit(static_cast<unsigned char>(preset.front()))) {
      const auto parts = RunConfig::split(preset, ',');
      const auto grid = timestep_grid(sched_.steps(), steps);
      if (parts.size() != grid.size())
        throw ConfigError("denoiser.patch_preset lists " + std::to_string(parts.size()) + " sizes for " +
                          std::to_string(grid.size()) + " sampler steps");
      for (std::size_t k = 0; k < grid.size(); ++k) cfg.sizes[grid[k]] = std::stoi(parts[k]);
    } else {
      cfg = kamb_patch_schedule(preset, sched_.steps());
    }
    const auto stride = cfg_.integer("denoiser.translation_stride");
    if (stride < 1) throw ConfigError("denoiser.translation_stride must be >= 1");
    cfg.translation_stride = static_cast<int>(stride);
    cfg.validate(data_.data->height(), data_.data->width());
    return cfg;
  }

  std::unique_ptr<Denoiser> make(const std::string& kind, std::span<const int> timesteps, int steps) {
    if (kind == "optimal") return std::make_unique<OptimalDenoiser>(data_.data, sched_);
    if (kind == "wiener") return wiener_denoiser(model(), sched_);
    if (kind == "masked") return std::make_unique<MaskedDenoiser>(data_.data, masks(timesteps), sched_);
    if (kind == "patch") return std::make_unique<PatchDenoiser>(data_.data, patch_config(steps), sched_);
    throw ConfigError("unknown denoiser kind '" + kind + "' (expected optimal, wiener, masked or patch)");
  }

 private:
  const RunConfig& cfg_;
  LoadedDataset data_;
  NoiseSchedule sched_;
  std::shared_ptr<const SpectralModel> model_;
};

inline std::vector<std::string> denoiser_kinds(const RunConfig& cfg) {
  auto kinds = cfg.list("denoiser.kind");
  if (kinds.empty()) throw ConfigError("denoiser.kind is empty");
  return kinds;
}

/// Unique output names for a list of kinds: repeated kinds get "-2", "-3", ...
inline std::vector<std::string> source_names(const std::vector<std::string>& kinds) {
  std::vector<std::string> out;
  std::map<std::string, int> seen;
  for (const auto& k : kinds) {
    const int n = ++seen[k];
    out.push_back(n == 1 ? k : k + "-" + std::to_string(n));
  }
  return out;
}

inline void write_image(const std::filesystem::path& path, const Vector& img, const ImageDataset& shape) {
  write_pnm(path, std::span<const double>(img.data(), static_cast<std::size_t>(img.size())), shape.height(),
            shape.width(), shape.channels(), shape.value_range());
}

inline std::string padded(long long v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

inline void require_finite(const DenseMatrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericalError(what + ": non-finite values");
}

// ---------------------------------------------------------------------------
// stats

/// Eigenvalue spectrum, mean and top-k eigenvector images, SNR-vs-t table.
inline void cmd_stats(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto sched = make_schedule(cfg);
  const auto& ds = *data.data;
  const SpectralModel model = fit(ds);
  require_finite(model.eigvecs, "stats");

  std::string csv = "index,eigenvalue\n";
  for (Eigen::Index i = 0; i < model.rank(); ++i) csv += std::to_string(i) + "," + format_number(model.eigvals[i]) + "\n";
  write_text(out / "eigenvalues.csv", csv);

  write_image(out / (ds.channels() == 1 ? "mean.pgm" : "mean.ppm"), model.mean, ds);
  const auto topk = std::min<Eigen::Index>(cfg.integer("stats.topk"), model.rank());
  for (Eigen::Index k = 0; k < topk; ++k) {
    const Vector v = model.eigvecs.col(k);
    const double m = std::max(v.cwiseAbs().maxCoeff(), 1e-300);
    write_pnm(out / ("eigvec_" + padded(k, 3) + (ds.channels() == 1 ? ".pgm" : ".ppm")),
              std::span<const double>(v.data(), static_cast<std::size_t>(v.size())), ds.height(), ds.width(),
              ds.channels(), {-m, m});
  }

  const auto grid = sampler_grid(cfg, sched);
  std::string snr_csv = "t,alpha_bar,projector_trace";
  for (Eigen::Index k = 0; k < topk; ++k) snr_csv += ",snr_" + std::to_string(k);
  snr_csv += "\n";
  for (int t : grid) {
    const Vector s = snr(model, t, sched);
    snr_csv += std::to_string(t) + "," + format_number(sched.alpha_bar(t)) + "," +
               format_number(projector_factors(model, t, sched).sum());
    for (Eigen::Index k = 0; k < topk; ++k) snr_csv += "," + format_number(s[k]);
    snr_csv += "\n";
  }
  write_text(out / "snr.csv", snr_csv);

  Manifest m("stats", cfg);
  m.meta("dataset_digest", data.digest);
  m.meta("dataset_size", std::to_string(ds.size()));
  m.meta("rank", std::to_string(model.rank()));
  m.meta("top_eigenvalue", format_number(model.rank() ? model.eigvals[0] : 0.0));
  m.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// masks

inline void cmd_masks(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto sched = make_schedule(cfg);
  const auto grid = sampler_grid(cfg, sched);
  const SpectralModel model = fit(*data.data);
  const MaskSet set = build_masks(model, grid, sched, cfg.real("denoiser.tau"));
  save_masks(set, out / "masks.admk");
  std::string csv = "t,mean_size,min_size,max_size\n";
  for (const auto& [t, pixels] : set.masks) {
    std::size_t lo = pixels.front().size(), hi = 0, sum = 0;
    for (const auto& m : pixels) {
      lo = std::min(lo, m.size());
      hi = std::max(hi, m.size());
      sum += m.size();
    }
    csv += std::to_string(t) + "," + format_number(static_cast<double>(sum) / static_cast<double>(pixels.size())) + "," +
           std::to_string(lo) + "," + std::to_string(hi) + "\n";
  }
  write_text(out / "mask_sizes.csv", csv);
  Manifest m("masks", cfg);
  m.meta("dataset_digest", data.digest);
  m.meta("masks_digest", hex64(io::fnv1a64(encode_masks(set))));
  m.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// sample

struct SampleBatch {
  DenseMatrix images;
  std::vector<Trajectory> trajectories;
  std::string noise_digest;
};

/// Runs `count` DDIM chains; chain j starts from the noise of stream j of `seed`,
/// so every denoiser sees identical initial noise.
inline SampleBatch run_samples(const Denoiser& denoiser, const NoiseSchedule& sched, int steps, int count,
                               std::uint64_t seed) {
  SampleBatch batch;
  batch.images.resize(count, denoiser.dim());
  batch.trajectories.resize(static_cast<std::size_t>(count));
  parallel::parallel_for(static_cast<std::size_t>(count), [&](std::size_t j) {
    auto res = ddim_sample(denoiser, sched, steps, seed, j);
    batch.images.row(static_cast<Eigen::Index>(j)) = res.image.transpose();
    batch.trajectories[j] = std::move(res.trajectory);
  });
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& tr : batch.trajectories) {
    const Vector& x = tr.states.front();
    h = io::fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(x.data()),
                                                  static_cast<std::size_t>(x.size()) * sizeof(double)),
                    h);
  }
  batch.noise_digest = hex64(h);
  return batch;
}

/// Samples every configured denoiser from shared initial noise; per denoiser
/// writes images, a grid, nearest-neighbor CSVs and a manifest.
inline void cmd_sample(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto sched = make_schedule(cfg);
  const auto grid = sampler_grid(cfg, sched);
  const int steps = static_cast<int>(cfg.integer("sampler.steps"));
  const auto count = cfg.integer("sampler.count");
  if (count < 1) throw ConfigError("sampler.count must be >= 1");
  const auto seed = seed_of(cfg, "sampler.seed");
  const auto kinds = denoiser_kinds(cfg);
  const auto names = source_names(kinds);
  DenoiserFactory factory(cfg, data, sched);
  const ImageDataset& ds = factory.dataset();

  Manifest top("sample", cfg);
  top.meta("dataset_digest", data.digest);
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    const auto denoiser = factory.make(kinds[k], grid, steps);
    const auto dir = out / names[k];
    std::filesystem::create_directories(dir);
    const SampleBatch batch = run_samples(*denoiser, sched, steps, static_cast<int>(count), seed);
    require_finite(batch.images, "sample");

    std::vector<double> dist, index;
    for (Eigen::Index j = 0; j < batch.images.rows(); ++j) {
      const Vector img = batch.images.row(j).transpose();
      write_image(dir / ("sample_" + padded(j, 4) + (ds.channels() == 1 ? ".pgm" : ".ppm")), img, ds);
      const auto nn = nearest_neighbor_distance(ds, img);
      dist.push_back(nn.distance);
      index.push_back(static_cast<double>(nn.index));
    }
    const auto tiled = tile_grid(batch.images, ds.height(), ds.width(), ds.channels(), ds.value_range().lo);
    write_pnm(dir / (ds.channels() == 1 ? "grid.pgm" : "grid.ppm"), tiled.pixels, tiled.height, tiled.width,
              ds.channels(), ds.value_range());
    const auto nn_report = MetricReport::from_values("nearest_neighbor", dist, denoiser->descriptor());
    write_text(dir / "nearest_neighbor.csv", metric_csv(nn_report));
    write_text(dir / "nearest_index.csv", metric_csv(MetricReport::from_values("nearest_index", index)));
    io::write_file(dir / "samples.adt",
                   encode_raw_tensor(batch.images, ds.height(), ds.width(), ds.channels(), RawDtype::f64));

    std::string traj = "t,mean,std\n";
    for (const auto& r : trajectory_metrics(batch.trajectories, ds))
      traj += r.name.substr(r.name.find('=') + 1) + "," + format_number(r.mean) + "," + format_number(r.stddev) + "\n";
    write_text(dir / "trajectory_nn.csv", traj);

    Manifest m("sample", cfg);
    m.meta("dataset_digest", data.digest);
    m.meta("denoiser", denoiser->descriptor());
    m.meta("source", names[k]);
    m.meta("seed", std::to_string(seed));
    m.meta("initial_noise_digest", batch.noise_digest);
    m.meta("nn_mean", format_number(nn_report.mean));
    m.write(dir / "manifest.txt");
    top.meta("initial_noise_digest", batch.noise_digest);
    top.meta("denoiser." + names[k], denoiser->descriptor());
  }
  top.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// sensitivity

inline int parse_pixel(const RunConfig& cfg, const ImageDataset& ds) {
  const auto& s = cfg.str("sensitivity.pixel");
  int r = ds.height() / 2, c = ds.width() / 2;
  if (!s.empty()) {
    const auto parts = RunConfig::split(s, ',');
    if (parts.size() != 2) throw ConfigError("sensitivity.pixel expects 'row,col'");
    try {
      r = std::stoi(parts[0]);
      c = std::stoi(parts[1]);
    } catch (...) {
      throw ConfigError("sensitivity.pixel expects integers");
    }
  }
  if (r < 0 || r >= ds.height() || c < 0 || c >= ds.width()) throw ConfigError("sensitivity.pixel outside the image");
  return (r * ds.width() + c) * ds.channels();
}

inline std::vector<int> parse_timesteps(const RunConfig& cfg, const NoiseSchedule& sched) {
  const auto parts = cfg.list("sensitivity.timesteps");
  if (parts.empty()) return sampler_grid(cfg, sched);
  std::vector<int> out;
  for (const auto& p : parts) {
    try {
      out.push_back(std::stoi(p));
    } catch (...) {
      throw ConfigError("sensitivity.timesteps expects integers");
    }
    sched.check_timestep(out.back());
  }
  return out;
}

/// Sensitivity rows of one output pixel at each requested timestep. Linear
/// fields are exact; nonlinear ones average |rows| over noisy inputs built
/// from randomly chosen training images, normalized after averaging.
inline void cmd_sensitivity(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto sched = make_schedule(cfg);
  const auto timesteps = parse_timesteps(cfg, sched);
  const int steps = static_cast<int>(cfg.integer("sampler.steps"));
  const auto samples = cfg.integer("sensitivity.samples");
  if (samples < 1) throw ConfigError("sensitivity.samples must be >= 1");
  const auto seed = seed_of(cfg, "sensitivity.seed");
  const auto mode = parse_normalization(cfg.str("sensitivity.normalize"));
  const auto kinds = denoiser_kinds(cfg);
  const auto names = source_names(kinds);
  DenoiserFactory factory(cfg, data, sched);
  const ImageDataset& ds = factory.dataset();
  const int q = parse_pixel(cfg, ds);
  const std::vector<int> rows{q};

  Manifest top("sensitivity", cfg);
  top.meta("dataset_digest", data.digest);
  top.meta("pixel_index", std::to_string(q));
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    const auto& kind = kinds[k];
    const auto dir = out / names[k];
    std::filesystem::create_directories(dir);
    std::shared_ptr<const MaskSet> masks;
    std::unique_ptr<Denoiser> generic;
    if (kind == "masked") masks = factory.masks(timesteps);
    if (kind == "patch") generic = factory.make(kind, timesteps, steps);
    if (kind != "optimal" && kind != "wiener" && kind != "masked" && kind != "patch")
      throw ConfigError("unknown denoiser kind '" + kind + "'");

    DenseMatrix dump(static_cast<Eigen::Index>(timesteps.size()), ds.dim());
    for (std::size_t ti = 0; ti < timesteps.size(); ++ti) {
      const int t = timesteps[ti];
      SensitivityField field;
      if (kind == "wiener") {
        field = wiener_sensitivity(*factory.model(), t, sched, rows);
      } else {
        std::vector<SensitivityField> fields(static_cast<std::size_t>(samples));
        for (long long s = 0; s < samples; ++s) {
          CounterRng rng(seed, static_cast<std::uint64_t>(s) * 1000003ULL + static_cast<std::uint64_t>(t));
          const Vector x0 = ds.image(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(ds.size())))).transpose();
          Vector eps(ds.dim());
          for (Eigen::Index p = 0; p < eps.size(); ++p) eps[p] = rng.normal();
          const Vector x = forward_noise(x0, eps, t, sched);
          auto& f = fields[static_cast<std::size_t>(s)];
          if (kind == "optimal") f = analytic_jacobian_optimal(ds, x, t, sched, rows);
          else if (kind == "masked") f = analytic_jacobian_masked(ds, *masks, x, t, sched, rows);
          else f = fd_jacobian(*generic, x, t, rows, kDefaultFdStep, ds.height(), ds.width(), ds.channels());
        }
        field = average_abs(fields);
      }
      require_finite(field.values, "sensitivity");
      dump.row(static_cast<Eigen::Index>(ti)) = field.values.row(0);
      const auto img = render_field(field, mode).front();
      write_pnm(dir / ("t_" + padded(t, 4) + ".pgm"), img.pixels, img.height, img.width, 1, {0.0, 1.0});
    }
    io::write_file(dir / "rows.adt", encode_raw_tensor(dump, ds.height(), ds.width(), ds.channels(), RawDtype::f64));
    Manifest m("sensitivity", cfg);
    m.meta("dataset_digest", data.digest);
    m.meta("source", names[k]);
    m.meta("pixel_index", std::to_string(q));
    m.write(dir / "manifest.txt");
  }
  top.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// perturb

inline std::vector<std::uint8_t> load_stencil(const RunConfig& cfg, const ImageDataset& ds) {
  const auto& s = cfg.str("perturb.stencil");
  if (s == "W") return default_w_stencil(ds.height(), ds.width());
  if (!std::filesystem::exists(s)) throw ConfigError("stencil file not found: " + s);
  const RawTensor t = decode_raw_tensor(io::read_file(s));
  if (t.height != ds.height() || t.width != ds.width() || t.rows.rows() != 1)
    throw ConfigError("stencil tensor must be 1 x H x W x C matching the dataset");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(ds.pixels()), 0);
  for (int p = 0; p < ds.pixels(); ++p)
    for (int c = 0; c < t.channels; ++c)
      if (t.rows(0, p * t.channels + c) != 0.0) out[static_cast<std::size_t>(p)] = 1;
  return out;
}

/// Predicted projector gain along an injected stencil:
///   abar g^2 |s|^2 / (abar g^2 |s|^2 + 3 (1 - abar)).
inline double stencil_sensitivity_ratio(double alpha_bar, double gamma, double stencil_sq_norm) {
  const double signal = alpha_bar * gamma * gamma * stencil_sq_norm;
  return signal / (signal + 3.0 * (1.0 - alpha_bar));
}

/// Injects the stencil pattern, refits statistics and reports how the Wiener
/// sensitivity along the stencil follows the predicted ratio.
inline void cmd_perturb(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto sched = make_schedule(cfg);
  const auto grid = sampler_grid(cfg, sched);
  const ImageDataset& base = *data.data;
  PerturbationSpec spec;
  spec.stencil = load_stencil(cfg, base);
  spec.gamma = cfg.real("perturb.gamma");
  spec.seed = seed_of(cfg, "perturb.seed");
  spec.clamp = cfg.flag("perturb.clamp");
  const ImageDataset ds = inject_pattern(base, spec);
  save_raw_tensor(ds, out / "perturbed.adt");
  const SpectralModel model = fit(ds);

  std::string csv = "index,eigenvalue\n";
  for (Eigen::Index i = 0; i < model.rank(); ++i) csv += std::to_string(i) + "," + format_number(model.eigvals[i]) + "\n";
  write_text(out / "eigenvalues.csv", csv);

  // Unit stencil direction in pixel space (channel 0 only).
  Vector dir = Vector::Zero(ds.dim());
  double ssq = 0.0;
  int probe = -1;
  double best = 1e300;
  for (int p = 0; p < ds.pixels(); ++p) {
    if (!spec.stencil[static_cast<std::size_t>(p)]) continue;
    dir[p * ds.channels()] = 1.0;
    ssq += 1.0;
    const double dr = p / ds.width() - (ds.height() - 1) / 2.0;
    const double dc = p % ds.width() - (ds.width() - 1) / 2.0;
    if (dr * dr + dc * dc < best) {
      best = dr * dr + dc * dc;
      probe = p * ds.channels();
    }
  }
  dir /= std::sqrt(ssq);

  std::string ratio = "t,alpha_bar,sigma,lambda_w,predicted_ratio,projector_along_stencil\n";
  const std::vector<int> rows{probe};
  const auto sens_dir = out / "sensitivity";
  std::filesystem::create_directories(sens_dir);
  for (int t : grid) {
    const DenseMatrix proj = sensitivity_projector(model, t, sched);
    const double along = dir.dot(proj * dir);
    const double abar = sched.alpha_bar(t);
    ratio += std::to_string(t) + "," + format_number(abar) + "," + format_number(sched.sigma(t)) + "," +
             format_number(std::sqrt(abar * spec.gamma * spec.gamma * ssq / 3.0)) + "," +
             format_number(stencil_sensitivity_ratio(abar, spec.gamma, ssq)) + "," + format_number(along) + "\n";
    const auto img = render_field(wiener_sensitivity(model, t, sched, rows), FieldNormalization::per_image).front();
    write_pnm(sens_dir / ("t_" + padded(t, 4) + ".pgm"), img.pixels, img.height, img.width, 1, {0.0, 1.0});
  }
  write_text(out / "sensitivity_ratio.csv", ratio);
  std::vector<double> stencil_px(spec.stencil.begin(), spec.stencil.end());
  write_pnm(out / "stencil.pgm", stencil_px, ds.height(), ds.width(), 1, {0.0, 1.0});

  Manifest m("perturb", cfg);
  m.meta("dataset_digest", data.digest);
  m.meta("perturbed_digest", hex64(io::fnv1a64(encode_raw_tensor(ds.images(), ds.height(), ds.width(), ds.channels(), RawDtype::f64))));
  m.meta("stencil_pixels", std::to_string(static_cast<long long>(ssq)));
  m.meta("top_eigenvalue", format_number(model.rank() ? model.eigvals[0] : 0.0));
  m.meta("probe_pixel", std::to_string(probe));
  m.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// benchmark

/// Pairwise r^2 and MSE between final samples of the configured denoisers
/// (shared initial noise) and any external prediction tensors, which must be
/// count x H x W x C in the working range [-1, 1].
inline void cmd_benchmark(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto sched = make_schedule(cfg);
  const auto grid = sampler_grid(cfg, sched);
  const int steps = static_cast<int>(cfg.integer("sampler.steps"));
  const auto count = cfg.integer("sampler.count");
  if (count < 1) throw ConfigError("sampler.count must be >= 1");
  const auto seed = seed_of(cfg, "sampler.seed");
  const auto kinds = cfg.list("denoiser.kind");
  const auto externals = cfg.list("benchmark.external");
  if (kinds.size() + externals.size() < 2) throw ConfigError("benchmark needs at least two prediction sources");
  DenoiserFactory factory(cfg, data, sched);
  const ImageDataset& ds = factory.dataset();

  std::vector<std::string> names = source_names(kinds);
  std::vector<DenseMatrix> preds;
  Manifest m("benchmark", cfg);
  m.meta("dataset_digest", data.digest);
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    const auto denoiser = factory.make(kinds[k], grid, steps);
    auto batch = run_samples(*denoiser, sched, steps, static_cast<int>(count), seed);
    require_finite(batch.images, "benchmark");
    m.meta("initial_noise_digest", batch.noise_digest);
    preds.push_back(std::move(batch.images));
  }
  for (std::size_t e = 0; e < externals.size(); ++e) {
    if (!std::filesystem::exists(externals[e])) throw ConfigError("external prediction file not found: " + externals[e]);
    const auto bytes = io::read_file(externals[e]);
    RawTensor t = decode_raw_tensor(bytes);
    if (t.rows.rows() != count || t.rows.cols() != ds.dim())
      throw ConfigError("external predictions " + externals[e] + " must hold sampler.count images of the dataset shape");
    names.push_back("external-" + std::to_string(e + 1));
    m.meta("external_digest." + std::to_string(e + 1), hex64(io::fnv1a64(bytes)));
    preds.push_back(std::move(t.rows));
  }
  std::string summary = "pred,ref,metric,mean,std\n";
  for (std::size_t a = 0; a < preds.size(); ++a)
    for (std::size_t b = 0; b < preds.size(); ++b) {
      if (a == b) continue;
      const auto r2 = r_squared(preds[a], preds[b]);
      const auto err = mse(preds[a], preds[b]);
      write_text(out / ("r2_" + names[a] + "__" + names[b] + ".csv"), metric_csv(r2));
      write_text(out / ("mse_" + names[a] + "__" + names[b] + ".csv"), metric_csv(err));
      summary += names[a] + "," + names[b] + ",r2," + format_number(r2.mean) + "," + format_number(r2.stddev) + "\n";
      summary += names[a] + "," + names[b] + ",mse," + format_number(err.mean) + "," + format_number(err.stddev) + "\n";
    }
  write_text(out / "benchmark.csv", summary);
  m.meta("seed", std::to_string(seed));
  m.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// nn

/// Nearest training image for every image of a query tensor.
inline void cmd_nn(const RunConfig& cfg) {
  const auto out = cfg.output_dir();
  std::filesystem::create_directories(out);
  auto data = load_dataset(cfg);
  const auto& query_path = cfg.str("nn.query");
  if (query_path.empty() || !std::filesystem::exists(query_path)) throw ConfigError("nn.query file not found");
  const auto range_parts = cfg.list("nn.range");
  if (range_parts.size() != 2) throw ConfigError("nn.range expects 'lo,hi'");
  const ValueRange range{std::stod(range_parts[0]), std::stod(range_parts[1])};
  const ImageDataset query = rescale(load_raw_tensor(query_path, range), kWorkingRange);
  const ImageDataset& ds = *data.data;
  if (query.dim() != ds.dim()) throw ConfigError("query images do not match the dataset shape");
  std::vector<double> dist, index;
  for (Eigen::Index i = 0; i < query.size(); ++i) {
    const auto nn = nearest_neighbor_distance(ds, query.image(i).transpose());
    dist.push_back(nn.distance);
    index.push_back(static_cast<double>(nn.index));
  }
  write_text(out / "nearest_neighbor.csv", metric_csv(MetricReport::from_values("nearest_neighbor", dist)));
  write_text(out / "nearest_index.csv", metric_csv(MetricReport::from_values("nearest_index", index)));
  Manifest m("nn", cfg);
  m.meta("dataset_digest", data.digest);
  m.meta("query_digest", hex64(io::fnv1a64(io::read_file(query_path))));
  m.write(out / "manifest.txt");
}

// ---------------------------------------------------------------------------
// Dispatch

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitFormat = 3, kExitNumerical = 4 };

inline void run_command(const std::string& name, const RunConfig& cfg) {
  if (name == "stats") return cmd_stats(cfg);
  if (name == "masks") return cmd_masks(cfg);
  if (name == "sample") return cmd_sample(cfg);
  if (name == "sensitivity") return cmd_sensitivity(cfg);
  if (name == "perturb") return cmd_perturb(cfg);
  if (name == "benchmark") return cmd_benchmark(cfg);
  if (name == "nn") return cmd_nn(cfg);
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace adl
