// protofed: desk-scale federated soft-prompt simulator.
//
// Subcommands:
//   run            one experiment from a config file
//   ablate         full model plus the six single-factor/aggregator variants
//   dp-sweep       shared-seed sigma sweep with the privacy accountant
//   verify-theory  randomized certification of the regret/contraction bounds
//
// Exit codes: 0 ok, 1 invariant violation or failed certificate, 2 config error.

#include "protofed/protofed.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_override;
  std::int64_t seed_override = -1;
  int threads_override = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Path to the JSON config file")
      ->required();
  cmd->add_option("--seed", args.seed_override, "Override the master seed");
  cmd->add_option("--out", args.out_override, "Override the output directory");
  cmd->add_option("--threads", args.threads_override,
                  "Worker threads for independent runs");
}

int dispatch(const CommonArgs& args,
             int (*command)(const protofed::RunConfig&)) {
  protofed::RunConfig rc;
  try {
    rc = protofed::load_config(args.config_path);
  } catch (const protofed::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return protofed::kExitConfig;
  }
  if (args.seed_override >= 0)
    rc.params.seed = std::uint64_t(args.seed_override);
  if (!args.out_override.empty()) rc.out_dir = args.out_override;
  if (args.threads_override > 0) rc.threads = args.threads_override;
  try {
    return command(rc);
  } catch (const protofed::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return protofed::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return protofed::kExitViolation;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ProtoFed-SP desk-scale simulator"};
  app.require_subcommand(1);

  CommonArgs run_args, ablate_args, sweep_args, theory_args;
  CLI::App* run = app.add_subcommand("run", "Run one experiment");
  add_common(run, run_args);
  CLI::App* ablate = app.add_subcommand("ablate", "Run the ablation table");
  add_common(ablate, ablate_args);
  CLI::App* sweep = app.add_subcommand("dp-sweep", "Run the privacy sweep");
  add_common(sweep, sweep_args);
  CLI::App* theory =
      app.add_subcommand("verify-theory", "Certify the appendix bounds");
  add_common(theory, theory_args);

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return dispatch(run_args, protofed::cmd_run);
  if (ablate->parsed()) return dispatch(ablate_args, protofed::cmd_ablate);
  if (sweep->parsed()) return dispatch(sweep_args, protofed::cmd_dp_sweep);
  if (theory->parsed()) return dispatch(theory_args, protofed::cmd_verify_theory);
  return protofed::kExitConfig;
}
