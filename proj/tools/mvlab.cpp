#include <CLI11.hpp>

#include <iostream>

#include "mvlab/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mvlab: McKean-Vlasov SDE/SPDE experiments"};
  app.set_version_flag("--version", std::string(MVLAB_VERSION));
  app.require_subcommand(1);

  mvlab::runner::Invocation inv;
  std::string config;
  std::string out_dir;
  std::size_t threads = 0;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "Run the experiment described by a JSON config");
  run->add_option("config", config, "Config file")->required();
  auto* out_opt = run->add_option("--out", out_dir, "Output directory (overrides config 'output')");
  auto* threads_opt = run->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* seed_opt = run->add_option("--seed", seed, "Override noise.seed");

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", config, "Config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (*validate) return mvlab::runner::validate_main(config, std::cout, std::cerr);

  inv.config = config;
  if (*out_opt) inv.out_dir = out_dir;
  if (*threads_opt) inv.threads = threads;
  if (*seed_opt) inv.seed = seed;
  return mvlab::runner::run_main(inv, std::cerr, std::cerr);
}
