// Command-line front end for experiment sweeps.
//
//   spil_cli run <spec.json> [--out DIR] [--workers K] [--quiet]
//   spil_cli validate <spec.json>
//   spil_cli select-unsafe-seeds <spec.json> --candidates N
//
// Exit status: 0 success, 1 spec/usage error, 2 some cells failed.
// SPIL_OUTPUT_DIR overrides the experiment file's output directory (--out wins over both).

#include <cstdlib>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "spil/errors.hpp"
#include "spil/experiment.hpp"

namespace {

spil::ExperimentSpec load_with_warnings(const std::string& path) {
  spil::ExperimentSpec spec = spil::load_spec(path);
  for (const auto& w : spec.base.surrogate.validate()) {
    std::cerr << "warning: " << w << '\n';
  }
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chance-constrained model-based RL trainer"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string out_dir;
  int workers = 1;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run every (method, delta, seed) cell");
  run->add_option("spec", spec_path, "Experiment spec (JSON)")->required();
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--workers", workers, "Concurrent cells")
      ->check(CLI::PositiveNumber);
  run->add_flag("--quiet", quiet, "No per-cell progress on stderr");

  auto* validate = app.add_subcommand("validate", "Check a spec and print it");
  validate->add_option("spec", spec_path, "Experiment spec (JSON)")->required();

  int candidates = 100;
  auto* screen = app.add_subcommand(
      "select-unsafe-seeds", "List seeds whose initial policy has p_s < 0.5");
  screen->add_option("spec", spec_path, "Experiment spec (JSON)")->required();
  screen->add_option("--candidates", candidates, "Seeds 0..N-1 to screen")
      ->required()
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    spil::ExperimentSpec spec = load_with_warnings(spec_path);

    if (*validate) {
      std::cout << spil::spec_to_json(spec);
      return 0;
    }

    if (*screen) {
      std::vector<std::uint64_t> seeds(static_cast<std::size_t>(candidates));
      std::iota(seeds.begin(), seeds.end(), std::uint64_t{0});
      for (std::uint64_t s : spil::select_unsafe_seeds(seeds, spec.base)) {
        std::cout << s << '\n';
      }
      return 0;
    }

    if (const char* env = std::getenv("SPIL_OUTPUT_DIR"); env && *env) {
      spec.output_dir = env;
    }
    if (!out_dir.empty()) spec.output_dir = out_dir;
    const spil::ExperimentResult result =
        spil::run_experiment(spec, {workers, !quiet});
    std::cerr << "wrote " << spec.output_dir.string() << '\n';
    return result.exit_code;
  } catch (const spil::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
