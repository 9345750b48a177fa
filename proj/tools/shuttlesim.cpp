// Command-line front end: run a configured experiment, validate a config
// without running it, or re-fit an existing data bundle.
//
// Exit codes: 0 ok, 1 config error, 2 fit failure, 3 I/O error.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "shuttlesim/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_run_flags) {
  cmd->add_option("--config", args.config_path, "experiment config file (JSON)")
      ->required();
  if (with_run_flags) {
    cmd->add_option("--seed", args.seed, "override the config's master seed")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--jobs", args.jobs, "worker threads (default 1)");
    cmd->add_option("--out", args.out_dir, "override the config's output directory");
  }
}

shuttlesim::RunOptions run_options(const CommonArgs& args) {
  shuttlesim::RunOptions opt;
  if (args.seed_set) opt.seed_override = args.seed;
  if (!args.out_dir.empty()) opt.out_override = args.out_dir;
  opt.jobs = args.jobs;
  return opt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conveyor-mode spin-shuttling simulator"};
  app.require_subcommand(1);

  CommonArgs run_args, validate_args, report_args;
  CLI::App* cmd_run = app.add_subcommand("run", "run an experiment and write its bundle");
  add_common(cmd_run, run_args, true);
  CLI::App* cmd_validate =
      app.add_subcommand("validate", "check a config without running it");
  add_common(cmd_validate, validate_args, false);
  CLI::App* cmd_report =
      app.add_subcommand("report", "re-fit an existing bundle's data.csv");
  add_common(cmd_report, report_args, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_validate->parsed()) {
      std::string text;
      try {
        text = shuttlesim::io::read_file(validate_args.config_path);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
      }
      const auto diag = shuttlesim::validate_config_text(text);
      if (diag.problems.empty()) {
        std::cout << "ok: " << validate_args.config_path << "\n";
        return 0;
      }
      for (const auto& p : diag.problems) std::cout << "violation: " << p << "\n";
      return 1;
    }

    const CommonArgs& args = cmd_run->parsed() ? run_args : report_args;
    const auto config = shuttlesim::load_config_file(args.config_path);
    const auto art = cmd_run->parsed()
                         ? shuttlesim::run_experiment(config, run_options(args))
                         : shuttlesim::report_experiment(config, run_options(args));
    std::cout << "bundle: " << art.directory.string() << "\n";
    return 0;
  } catch (const shuttlesim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const shuttlesim::FitError& e) {
    std::cerr << "fit error: " << e.what() << "\n";
    return 2;
  } catch (const shuttlesim::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
