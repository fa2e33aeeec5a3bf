#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adl/cli.hpp"

namespace adl {

struct FlagBinding {
  const char* flag;
  const char* key;
  const char* help;
};

inline const std::vector<FlagBinding>& flag_bindings() {
  static const std::vector<FlagBinding> b = {
      {"--dataset", "dataset.path", "dataset file(s), comma separated"},
      {"--format", "dataset.format", "idx | cifar | raw"},
      {"--subset", "dataset.subset", "random subset size (0 = all)"},
      {"--denoiser", "denoiser.kind", "optimal | wiener | masked | patch, comma separated"},
      {"--tau", "denoiser.tau", "mask threshold"},
      {"--patch-preset", "denoiser.patch_preset", "preset name or per-step sizes"},
      {"--stride", "denoiser.translation_stride", "patch translation stride"},
      {"--masks", "denoiser.mask_file", "external mask file"},
      {"--steps", "sampler.steps", "DDIM steps"},
      {"--count", "sampler.count", "number of samples"},
      {"--seed", "sampler.seed", "sampler seed"},
      {"--out", "output.dir", "output directory"},
      {"--pixel", "sensitivity.pixel", "output pixel row,col"},
      {"--timesteps", "sensitivity.timesteps", "comma separated timesteps"},
      {"--normalize", "sensitivity.normalize", "per-image | joint | raw"},
      {"--gamma", "perturb.gamma", "pattern weight"},
      {"--stencil", "perturb.stencil", "W or a stencil tensor file"},
      {"--external", "benchmark.external", "external prediction tensors"},
      {"--query", "nn.query", "query tensor for nn"},
  };
  return b;
}

/// Parses arguments, runs one subcommand and maps failures to exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Analytical diffusion denoisers: statistics, sampling and sensitivity experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  const char* commands[][2] = {
      {"stats", "fit covariance statistics; write spectrum, eigenvectors and SNR table"},
      {"masks", "build spectral locality masks for the sampler grid"},
      {"sample", "DDIM sampling with every configured denoiser from shared noise"},
      {"sensitivity", "sensitivity fields of one output pixel"},
      {"perturb", "inject a stencil pattern and track its sensitivity"},
      {"benchmark", "pairwise r^2 and MSE between prediction sources"},
      {"nn", "nearest training image for each query image"},
  };

  std::string config_file;
  std::vector<std::string> sets;
  int threads = 0;
  std::map<std::string, std::string> flag_values;
  for (auto& c : commands) {
    auto* sub = app.add_subcommand(c[0], c[1]);
    sub->add_option("--config", config_file, "key=value config or manifest file");
    sub->add_option("--set", sets, "override key=value (repeatable)");
    sub->add_option("--threads", threads, "worker threads (default: ADL_THREADS or all cores)");
    for (const auto& b : flag_bindings()) sub->add_option(b.flag, flag_values[b.key], b.help);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, std::cout, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) cfg.merge_file(config_file);
    for (const auto& [key, value] : flag_values)
      if (!value.empty()) cfg.set(key, value);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(RunConfig::trim(s.substr(0, eq)), RunConfig::trim(s.substr(eq + 1)));
    }
    if (threads < 0) throw ConfigError("--threads must be >= 0");
    if (threads > 0) parallel::set_max_threads(threads);
    run_command(app.get_subcommands().front()->get_name(), cfg);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace adl
