#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "deltavit/checkpoint.hpp"
#include "deltavit/common.hpp"
#include "deltavit/experiment.hpp"

// Command-line harness. Subcommands: generate (synthetic dataset to disk),
// run (one experiment), sweep (one axis, several values, shared data), and
// validate-config. Exit codes: 0 success, 2 invalid config or usage, 3
// capacity error (protocol does not fit the dataset), 4 internal invariant
// violation.

namespace deltavit {

namespace detail {

struct CliOptions {
  std::string config_path;
  std::string out_dir;           // empty: use the config's output field
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string axis;
  std::vector<std::string> values;
};

inline ExperimentConfig load_cli_config(const CliOptions& opt) {
  ExperimentConfig cfg = load_experiment_config(opt.config_path);
  if (opt.seed_set) cfg.seed = opt.seed;
  if (!opt.out_dir.empty()) cfg.output = opt.out_dir;
  return cfg;
}

template <typename S>
void generate_to(const ExperimentConfig& cfg) {
  const std::filesystem::path dir(cfg.output);
  std::filesystem::create_directories(dir);
  const std::vector<LabeledSample<S>> dataset = materialize_dataset<S>(cfg);
  save_dataset(dataset, (dir / "dataset.bin").string(), (dir / "manifest.csv").string());
  std::size_t train = 0;
  for (const auto& s : dataset) train += (s.split == Split::train) ? 1 : 0;
  std::cout << "wrote " << dataset.size() << " samples (" << train << " train, "
            << dataset.size() - train << " test) to " << (dir / "dataset.bin").string()
            << "\n";
}

inline void run_generate(const CliOptions& opt) {
  ExperimentConfig cfg = load_cli_config(opt);
  if (cfg.precision == Precision::float64) {
    generate_to<double>(cfg);
  } else {
    generate_to<float>(cfg);
  }
}

inline void run_single(const CliOptions& opt) {
  ExperimentConfig cfg = load_cli_config(opt);
  RunOutput out = execute_experiment(cfg);
  write_run_outputs(cfg.output, out);
  std::cout << "sessions " << out.report.per_session_accuracy.size()
            << "  s_base " << pct2(out.report.s_base)
            << "%  s_last " << pct2(out.report.s_last)
            << "%  s_avg " << pct2(out.report.s_avg)
            << "%  pd " << pct2(out.report.pd)
            << "%  results in " << cfg.output << "\n";
}

inline void run_sweep_cmd(const CliOptions& opt) {
  ExperimentConfig cfg = load_cli_config(opt);
  run_sweep(cfg, parse_sweep_axis(opt.axis), opt.values, cfg.output);
  std::cout << "swept " << opt.axis << " over " << opt.values.size()
            << " values, results in " << cfg.output << "\n";
}

inline void run_validate(const CliOptions& opt) {
  ExperimentConfig cfg = load_experiment_config(opt.config_path);
  (void)cfg;
  std::cout << "config ok: " << opt.config_path << "\n";
}

}  // namespace detail

/// Entry point used by the deltavit binary; returns the process exit code.
inline int cli_main(int argc, char** argv) {
  CLI::App app{"few-shot class-incremental learning with additive "
               "self-attention updates on a frozen transformer encoder"};
  app.require_subcommand(1);
  detail::CliOptions opt;

  auto add_common = [&opt](CLI::App* cmd, bool with_out) {
    cmd->add_option("--config", opt.config_path, "experiment config (JSON)")
        ->required();
    cmd->add_option("--seed", opt.seed, "seed override")
        ->each([&opt](const std::string&) { opt.seed_set = true; });
    if (with_out) {
      cmd->add_option("--out", opt.out_dir, "output directory override");
    }
  };

  CLI::App* generate = app.add_subcommand(
      "generate", "write the synthetic dataset binary and CSV manifest");
  add_common(generate, true);

  CLI::App* run = app.add_subcommand("run", "run one experiment end to end");
  add_common(run, true);

  CLI::App* sweep = app.add_subcommand(
      "sweep", "run one axis over several values on a shared dataset and plan");
  add_common(sweep, true);
  sweep->add_option("--axis", opt.axis, "adapted_blocks or update_target")->required();
  sweep
      ->add_option("--values", opt.values,
                   "comma-separated axis values, e.g. 0,3,6 or attention_qkv,mlp")
      ->required()
      ->delimiter(',');

  CLI::App* validate =
      app.add_subcommand("validate-config", "parse and validate a config file");
  add_common(validate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (generate->parsed()) {
      detail::run_generate(opt);
    } else if (run->parsed()) {
      detail::run_single(opt);
    } else if (sweep->parsed()) {
      detail::run_sweep_cmd(opt);
    } else {
      detail::run_validate(opt);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace deltavit
