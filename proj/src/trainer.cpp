#include "spil/trainer.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "spil/errors.hpp"

namespace spil {
namespace {

using ad::Matrix;

constexpr std::uint64_t kTrainSalt = stream_salt("spil/train");
constexpr std::uint64_t kEvalSalt = stream_salt("spil/eval");
constexpr std::uint64_t kActorInitSalt = stream_salt("spil/actor-init");
constexpr std::uint64_t kCriticInitSalt = stream_salt("spil/critic-init");

void require(bool ok, const char* key, const char* what) {
  if (!ok) throw ConfigError(std::string(key) + ": " + what);
}

Matrix batch_states(const RolloutBatch& batch, int t) {
  Matrix x(batch.trajectories, 3);
  for (int i = 0; i < batch.trajectories; ++i) {
    const SystemState& s = batch.state(i, t);
    x(i, 0) = s.ego_velocity;
    x(i, 1) = s.front_velocity;
    x(i, 2) = s.gap;
  }
  return x;
}

Matrix batch_actions(const RolloutBatch& batch, int t) {
  Matrix u(batch.trajectories, 1);
  for (int i = 0; i < batch.trajectories; ++i) u(i, 0) = batch.action(i, t);
  return u;
}

void save_pair(const NetworkParams& actor, const NetworkParams& critic,
               const std::filesystem::path& dir, const std::string& tag) {
  std::filesystem::create_directories(dir);
  save_checkpoint(actor, dir / ("actor_" + tag + ".json"));
  save_checkpoint(critic, dir / ("critic_" + tag + ".json"));
}

}  // namespace

std::vector<std::string> TrainConfig::validate() const {
  require(trajectories >= 1, "M", "must be >= 1");
  require(horizon >= 1, "N", "must be >= 1");
  require(gamma > 0.0 && gamma < 1.0, "gamma", "must lie in (0, 1)");
  require(delta_threshold > 0.0 && delta_threshold < 1.0, "delta_threshold",
          "must lie in (0, 1)");
  require(actor_lr > 0.0 && std::isfinite(actor_lr), "actor_lr", "must be > 0");
  require(critic_lr > 0.0 && std::isfinite(critic_lr), "critic_lr",
          "must be > 0");
  require(max_iterations >= 0, "max_iterations", "must be >= 0");
  require(convergence_tol >= 0.0, "convergence_tol", "must be >= 0");
  require(eval_interval >= 1, "eval_interval", "must be >= 1");
  require(eval_trajectories >= 0, "eval_M", "must be >= 1 (or 0 for M)");
  require(checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0");
  for (int h : hidden) require(h >= 1, "hidden", "widths must be >= 1");
  gains.validate("gains");
  env.validate("env");
  return surrogate.validate("surrogate");
}

RngStream training_stream(std::uint64_t seed, int iteration) {
  return RngStream(seed, kTrainSalt, static_cast<std::uint64_t>(iteration));
}

RngStream evaluation_stream(std::uint64_t seed, int iteration) {
  return RngStream(seed, kEvalSalt, static_cast<std::uint64_t>(iteration));
}

RngStream actor_init_stream(std::uint64_t seed) {
  return RngStream(seed, kActorInitSalt, 0);
}

RngStream critic_init_stream(std::uint64_t seed) {
  return RngStream(seed, kCriticInitSalt, 0);
}

NetworkParams initial_actor(const TrainConfig& config) {
  RngStream stream = actor_init_stream(config.master_seed);
  return init_params(actor_topology(config.hidden), stream);
}

NetworkParams initial_critic(const TrainConfig& config) {
  RngStream stream = critic_init_stream(config.master_seed);
  return init_params(critic_topology(config.hidden), stream);
}

std::vector<double> critic_target(const RolloutBatch& batch,
                                  const NetworkParams& critic,
                                  const NetworkParams& actor,
                                  const EnvParams& env, double gamma) {
  const Matrix x_n = batch_states(batch, batch.horizon);
  const Matrix u_n = actor_forward_batch(actor, x_n, env);
  const Matrix q = critic_forward_batch(critic, x_n, u_n);
  const double terminal = std::pow(gamma, batch.horizon);
  std::vector<double> targets(batch.trajectories);
  for (int i = 0; i < batch.trajectories; ++i) {
    double ret = 0.0;
    double discount = 1.0;
    for (int t = 0; t < batch.horizon; ++t) {
      ret += discount * batch.reward(i, t);
      discount *= gamma;
    }
    targets[i] = ret + terminal * q(i, 0);
  }
  return targets;
}

CriticLossGradient critic_loss_gradient(const NetworkParams& critic,
                                        const RolloutBatch& batch,
                                        const std::vector<double>& targets) {
  if (targets.size() != static_cast<std::size_t>(batch.trajectories)) {
    throw ContractViolation("critic_loss_gradient: one target per trajectory");
  }
  ad::Tape tape;
  const BoundNetwork w = bind_network(tape, critic, /*trainable=*/true);
  ad::Var x0 = tape.constant(batch_states(batch, 0));
  ad::Var u0 = tape.constant(batch_actions(batch, 0));
  Matrix target_column(batch.trajectories, 1);
  for (int i = 0; i < batch.trajectories; ++i) target_column(i, 0) = targets[i];
  ad::Var residual =
      tape.sub(critic_output(tape, w, x0, u0), tape.constant(target_column));
  ad::Var loss = tape.mean_rows(tape.scale(tape.mul(residual, residual), 0.5));
  tape.backward(loss);
  return {tape.scalar(loss), collect_gradient(tape, w)};
}

CriticUpdate critic_update(const NetworkParams& critic,
                           const RolloutBatch& batch,
                           const std::vector<double>& targets,
                           double learning_rate) {
  CriticLossGradient lg = critic_loss_gradient(critic, batch, targets);
  CriticUpdate out;
  out.loss = lg.loss;
  out.grad_norm = lg.gradient.norm();
  out.critic = adam_update(critic, lg.gradient, learning_rate, /*ascent=*/false);
  return out;
}

GradientAccumulator combined_actor_gradient(const GradientAccumulator& grad_j,
                                            const GradientAccumulator& grad_p,
                                            double lambda) {
  if (!(lambda >= 0.0)) {
    throw ContractViolation("actor_update: lambda must be >= 0");
  }
  GradientAccumulator g = grad_j;
  g.add_scaled(grad_p, lambda);
  g *= 1.0 / (1.0 + lambda);
  return g;
}

NetworkParams actor_update(const NetworkParams& theta,
                           const GradientAccumulator& grad_j,
                           const GradientAccumulator& grad_p_rescaled,
                           double lambda, double learning_rate) {
  return adam_update(theta,
                     combined_actor_gradient(grad_j, grad_p_rescaled, lambda),
                     learning_rate, /*ascent=*/true);
}

EvaluationResult evaluate_policy(const NetworkParams& actor,
                                 const TrainConfig& config,
                                 const RngStream& stream) {
  const RolloutBatch batch =
      rollout_batch(actor, config.env, config.effective_eval_trajectories(),
                    config.horizon, stream);
  return {estimate_safe_probability(batch),
          mean_discounted_return(batch, config.gamma)};
}

TrainResult train(const TrainConfig& config, const TrainObserver& observer) {
  config.validate();

  TrainResult result;
  result.actor = initial_actor(config);
  result.critic = initial_critic(config);
  MultiplierState multiplier;

  if (!config.checkpoint_dir.empty()) {
    save_pair(result.actor, result.critic, config.checkpoint_dir, "initial");
  }

  for (int k = 0; k < config.max_iterations; ++k) {
    const auto started = std::chrono::steady_clock::now();
    const NoiseReplay replay =
        draw_replay(training_stream(config.master_seed, k), config.env,
                    config.trajectories, config.horizon);

    RolloutGraph graph = record_rollout(result.actor, config.env, replay,
                                        config.surrogate, config.gamma);
    const RolloutBatch batch = extract_batch(graph, config.env, replay);
    const double p_s = estimate_safe_probability(batch);

    multiplier =
        update_multiplier(multiplier, p_s, config.delta_threshold, config.gains);

    const std::vector<double> targets = critic_target(
        batch, result.critic, result.actor, config.env, config.gamma);
    CriticUpdate critic_step =
        critic_update(result.critic, batch, targets, config.critic_lr);

    const ad::Var j_node = attach_objective(graph, critic_step.critic);
    const GradientAccumulator grad_j = actor_gradient(graph, j_node);
    const SurrogateDirection phi_dir = attach_surrogate_direction(graph);
    const GradientAccumulator grad_p = actor_gradient(graph, phi_dir.node);
    const GradientAccumulator grad_p_rescaled = rescale_gradient(grad_j, grad_p);

    TrainLogRow row;
    row.iteration = k;
    row.p_s = p_s;
    row.objective = graph.tape.scalar(j_node);
    row.delta = multiplier.delta;
    row.integral = multiplier.integrator;
    row.lambda = multiplier.lambda;
    row.critic_loss = critic_step.loss;
    row.grad_j_norm = grad_j.norm();
    row.grad_p_norm = grad_p.norm() * std::exp(phi_dir.log_scale);

    const bool finite = std::isfinite(row.objective) &&
                        std::isfinite(row.critic_loss) &&
                        std::isfinite(row.grad_j_norm) &&
                        std::isfinite(row.grad_p_norm) &&
                        critic_step.critic.finite();
    if (!finite) {
      row.wall_seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - started)
                             .count();
      result.log.rows.push_back(row);
      result.status = TrainStatus::kDiverged;
      result.message =
          "non-finite value at iteration " + std::to_string(k);
      return result;
    }

    NetworkParams next_actor = actor_update(result.actor, grad_j,
                                            grad_p_rescaled, multiplier.lambda,
                                            config.actor_lr);
    const double change = std::max(next_actor.max_abs_diff(result.actor),
                                   critic_step.critic.max_abs_diff(result.critic));
    result.actor = std::move(next_actor);
    result.critic = std::move(critic_step.critic);

    if ((k + 1) % config.eval_interval == 0) {
      const EvaluationResult eval = evaluate_policy(
          result.actor, config, evaluation_stream(config.master_seed, k));
      row.eval_p_s = eval.p_s;
      row.eval_return = eval.mean_return;
    }
    row.wall_seconds = std::chrono::duration<double>(
                           std::chrono::steady_clock::now() - started)
                           .count();
    result.log.rows.push_back(row);

    if (!config.checkpoint_dir.empty() && config.checkpoint_interval > 0 &&
        (k + 1) % config.checkpoint_interval == 0) {
      save_pair(result.actor, result.critic, config.checkpoint_dir,
                "iter_" + std::to_string(k + 1));
    }
    if (observer && !observer(row)) break;
    if (change <= config.convergence_tol) {
      result.status = TrainStatus::kConverged;
      break;
    }
  }

  if (!config.checkpoint_dir.empty()) {
    save_pair(result.actor, result.critic, config.checkpoint_dir, "final");
  }
  return result;
}

std::string format_number(double value) {
  char buffer[64];
  const auto res = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, res.ptr);
}

std::string log_to_csv(const TrainLog& log) {
  std::ostringstream out;
  out << kTrainLogHeader << '\n';
  for (const auto& r : log.rows) {
    out << r.iteration << ',' << format_number(r.p_s) << ','
        << format_number(r.objective) << ',' << format_number(r.delta) << ','
        << format_number(r.integral) << ',' << format_number(r.lambda) << ','
        << format_number(r.critic_loss) << ',' << format_number(r.grad_j_norm)
        << ',' << format_number(r.grad_p_norm) << ','
        << (r.eval_p_s ? format_number(*r.eval_p_s) : "") << ','
        << (r.eval_return ? format_number(*r.eval_return) : "") << '\n';
  }
  return out.str();
}

void write_log_csv(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << log_to_csv(log);
}

}  // namespace spil
