#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spil/controller.hpp"
#include "spil/env.hpp"
#include "spil/network.hpp"
#include "spil/rollout.hpp"
#include "spil/surrogate.hpp"

namespace spil {

struct TrainConfig {
  int trajectories = 4096;  // M
  int horizon = 40;         // N, also the constraint horizon
  double gamma = 0.99;
  double delta_threshold = 0.1;
  double actor_lr = 3e-4;
  double critic_lr = 2e-4;
  ControllerGains gains;
  SurrogateParams surrogate;
  EnvParams env;
  std::vector<int> hidden = {64, 64};
  int max_iterations = 1500;
  double convergence_tol = 1e-6;
  std::uint64_t master_seed = 0;
  int eval_interval = 10;
  int eval_trajectories = 0;  // 0 means "same as trajectories"
  int checkpoint_interval = 0;  // 0 writes only the final checkpoint
  std::filesystem::path checkpoint_dir;  // empty disables checkpoints

  [[nodiscard]] int effective_eval_trajectories() const {
    return eval_trajectories > 0 ? eval_trajectories : trajectories;
  }
  /// Throws ConfigError. Returns soft warnings (surrogate condition).
  std::vector<std::string> validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainLogRow {
  int iteration = 0;
  double p_s = 0.0;
  double objective = 0.0;  // J estimate on the training batch
  double delta = 0.0;
  double integral = 0.0;
  double lambda = 0.0;
  double critic_loss = 0.0;
  double grad_j_norm = 0.0;
  double grad_p_norm = 0.0;  // norm of grad Phi before rescaling
  std::optional<double> eval_p_s;
  std::optional<double> eval_return;
  double wall_seconds = 0.0;  // not written to CSV
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
};

enum class TrainStatus { kMaxIterations, kConverged, kDiverged };

struct TrainResult {
  NetworkParams actor;
  NetworkParams critic;
  TrainLog log;
  TrainStatus status = TrainStatus::kMaxIterations;
  std::string message;
};

// Stream salts. Every random draw of a run derives from (master_seed, salt,
// index), never from a shared sequential stream.
RngStream training_stream(std::uint64_t seed, int iteration);
RngStream evaluation_stream(std::uint64_t seed, int iteration);
RngStream actor_init_stream(std::uint64_t seed);
RngStream critic_init_stream(std::uint64_t seed);

NetworkParams initial_actor(const TrainConfig& config);
NetworkParams initial_critic(const TrainConfig& config);

/// N-step bootstrap targets sum_{t<N} gamma^t r_t + gamma^N Q(x_N, pi(x_N)),
/// one per trajectory. Plain numbers, so no gradient reaches them.
std::vector<double> critic_target(const RolloutBatch& batch,
                                  const NetworkParams& critic,
                                  const NetworkParams& actor,
                                  const EnvParams& env, double gamma);

struct CriticLossGradient {
  double loss = 0.0;
  GradientAccumulator gradient;
};

/// loss = mean_i 0.5 (target_i - Q(x0_i, u0_i; w))^2 and its gradient in w.
CriticLossGradient critic_loss_gradient(const NetworkParams& critic,
                                        const RolloutBatch& batch,
                                        const std::vector<double>& targets);

struct CriticUpdate {
  NetworkParams critic;
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// One Adam descent step on the semi-gradient.
CriticUpdate critic_update(const NetworkParams& critic,
                           const RolloutBatch& batch,
                           const std::vector<double>& targets,
                           double learning_rate);

/// (grad_J + lambda * grad_P) / (1 + lambda).
GradientAccumulator combined_actor_gradient(const GradientAccumulator& grad_j,
                                            const GradientAccumulator& grad_p,
                                            double lambda);

/// One Adam ascent step along combined_actor_gradient.
NetworkParams actor_update(const NetworkParams& theta,
                           const GradientAccumulator& grad_j,
                           const GradientAccumulator& grad_p_rescaled,
                           double lambda, double learning_rate);

struct EvaluationResult {
  double p_s = 0.0;
  double mean_return = 0.0;
};

EvaluationResult evaluate_policy(const NetworkParams& actor,
                                 const TrainConfig& config,
                                 const RngStream& stream);

/// Called after each logged iteration; return false to stop early.
using TrainObserver = std::function<bool(const TrainLogRow&)>;

/// Rollout -> p_s -> multiplier -> critic -> actor, repeated until
/// max_iterations or both networks move less than convergence_tol.
TrainResult train(const TrainConfig& config, const TrainObserver& observer = {});

inline constexpr const char* kTrainLogHeader =
    "iteration,p_s,J,delta,integral,lambda,critic_loss,grad_J_norm,"
    "grad_P_norm,eval_p_s,eval_return";

/// Shortest round-trip decimal form of a double.
std::string format_number(double value);
std::string log_to_csv(const TrainLog& log);
void write_log_csv(const TrainLog& log, const std::filesystem::path& path);

}  // namespace spil
