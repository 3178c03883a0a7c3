#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spil/trainer.hpp"

namespace spil {

struct MethodSpec {
  std::string name;
  ControllerGains gains;
  bool operator==(const MethodSpec&) const = default;
};

struct AggregationOptions {
  bool mean_across_seeds = true;
  int final_window = 20;  // iterations averaged for "final" summary values
  bool operator==(const AggregationOptions&) const = default;
};

/// A sweep over methods x thresholds x seeds sharing one base config.
struct ExperimentSpec {
  TrainConfig base;
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds;
  std::vector<double> thresholds;  // delta values
  std::filesystem::path output_dir = "spil_runs";
  AggregationOptions aggregation;
  bool operator==(const ExperimentSpec&) const = default;
};

/// Parse and validate. Unspecified fields take their defaults; unknown keys
/// are rejected. Errors are ConfigError with the key path in the message.
ExperimentSpec parse_spec(const std::string& json_text);
ExperimentSpec load_spec(const std::filesystem::path& path);
/// Full JSON form (every field explicit); parse_spec(spec_to_json(s)) == s.
std::string spec_to_json(const ExperimentSpec& spec);

/// Config for one (method, delta, seed) cell.
TrainConfig cell_config(const ExperimentSpec& spec, const MethodSpec& method,
                        double delta, std::uint64_t seed);

/// Directory of one cell relative to the output root.
std::filesystem::path cell_directory(const MethodSpec& method, double delta,
                                     std::uint64_t seed);
std::string threshold_tag(double delta);

struct CellSummary {
  std::string method;
  double delta = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int iterations = 0;
  std::optional<double> final_eval_p_s;
  std::optional<double> final_eval_return;
  double peak_integral = 0.0;
};

struct ExperimentResult {
  std::vector<CellSummary> cells;
  int exit_code = 0;  // 0 all cells ok, 2 some failed
};

struct RunOptions {
  int workers = 1;
  bool verbose = false;
};

/// Run every cell, write per-run CSV + checkpoints, per-(method, delta)
/// aggregate CSVs and summary.json under spec.output_dir.
ExperimentResult run_experiment(const ExperimentSpec& spec,
                                const RunOptions& options = {});

/// Mean of the logged eval values over the last `window` evaluated rows.
std::optional<double> final_eval_mean(const TrainLog& log, int window,
                                      bool use_return);

/// Aggregate CSV text for logs of one (method, delta) group, rows averaged
/// in the given order.
std::string aggregate_csv(const std::vector<const TrainLog*>& logs);

/// Seeds whose freshly initialised policy has p_s < 0.5 on the screening
/// batch; order preserved.
std::vector<std::uint64_t> select_unsafe_seeds(
    const std::vector<std::uint64_t>& candidates, const TrainConfig& config);

/// p_s of the initial policy for `config.master_seed` on the screening batch.
double initial_safe_probability(const TrainConfig& config);

}  // namespace spil
