#pragma once

#include <vector>

#include "spil/env.hpp"
#include "spil/network.hpp"
#include "spil/rng.hpp"
#include "spil/surrogate.hpp"
#include "spil/tape.hpp"

namespace spil {

/// Initial states and disturbances for M trajectories of N steps. Holding
/// these fixed (common random numbers) makes every batch statistic a
/// deterministic function of the policy parameters.
struct NoiseReplay {
  int trajectories = 0;
  int horizon = 0;
  std::vector<SystemState> initial_states;  // M
  std::vector<double> noises;               // M x N, row-major

  [[nodiscard]] double noise(int i, int t) const {
    return noises[static_cast<std::size_t>(i) * horizon + t];
  }
};

/// Trajectory i draws its initial state and then its N disturbances from
/// stream.derive(i).
NoiseReplay draw_replay(const RngStream& stream, const EnvParams& env,
                        int trajectories, int horizon);

struct RolloutBatch {
  int trajectories = 0;
  int horizon = 0;
  std::vector<SystemState> states;  // M x (N+1)
  std::vector<double> actions;      // M x N, u_0..u_{N-1}
  std::vector<double> rewards;      // M x N
  std::vector<double> margins;      // M x N, h(x_1)..h(x_N)
  std::vector<double> noises;       // M x N
  std::vector<bool> safe;           // M, all margins < 0

  [[nodiscard]] const SystemState& state(int i, int t) const {
    return states[static_cast<std::size_t>(i) * (horizon + 1) + t];
  }
  [[nodiscard]] double action(int i, int t) const { return at(actions, i, t); }
  [[nodiscard]] double reward(int i, int t) const { return at(rewards, i, t); }
  [[nodiscard]] double margin(int i, int t) const { return at(margins, i, t); }
  [[nodiscard]] double noise(int i, int t) const { return at(noises, i, t); }

  /// Recompute safe flags from the margin array.
  void refresh_safe_flags();

 private:
  [[nodiscard]] double at(const std::vector<double>& v, int i, int t) const {
    return v[static_cast<std::size_t>(i) * horizon + t];
  }
};

/// Forward-only simulation of `replay` under the policy.
RolloutBatch simulate(const NetworkParams& theta, const EnvParams& env,
                      const NoiseReplay& replay);

/// draw_replay + simulate.
RolloutBatch rollout_batch(const NetworkParams& theta, const EnvParams& env,
                           int trajectories, int horizon,
                           const RngStream& stream);

/// Fraction of trajectories that never leave the safe set.
double estimate_safe_probability(const RolloutBatch& batch);

/// Mean over trajectories of sum_t gamma^t r_t, summed in trajectory order.
double mean_discounted_return(const RolloutBatch& batch, double gamma);

/// Gradient of `target` rescaled to the Euclidean norm of `reference`.
/// A zero `target` is returned unchanged.
GradientAccumulator rescale_gradient(const GradientAccumulator& reference,
                                     const GradientAccumulator& target);

// --- differentiable rollout -----------------------------------------------------

/// A rollout recorded on a tape with the actor as trainable leaves. Holds
/// a pointer to the actor parameters, which must outlive the graph.
struct RolloutGraph {
  ad::Tape tape;
  BoundNetwork actor;
  std::vector<ad::Var> states;   // x_0 .. x_N, each (M x 3)
  std::vector<ad::Var> actions;  // u_0 .. u_N, each (M x 1)
  ad::Var discounted_return;     // (M x 1) sum_{t<N} gamma^t r_t
  ad::Var safety_product;        // (M x 1) prod_{t=1..N} phi(-h(x_t))
  int trajectories = 0;
  int horizon = 0;
  double gamma = 1.0;
  double gap_threshold = 0.0;
  SurrogateParams surrogate;
};

RolloutGraph record_rollout(const NetworkParams& theta, const EnvParams& env,
                            const NoiseReplay& replay,
                            const SurrogateParams& surrogate, double gamma);

/// Values of the recorded rollout as a plain batch.
RolloutBatch extract_batch(const RolloutGraph& graph, const EnvParams& env,
                           const NoiseReplay& replay);

/// J = mean_i [ sum_{t<N} gamma^t r_t + gamma^N Q(x_N, u_N; w) ] with the
/// critic held constant. Returns the 1x1 node.
ad::Var attach_objective(RolloutGraph& graph, const NetworkParams& critic);

/// Phi = mean_i prod_{t=1..N} phi(-h(x_t)). Returns the 1x1 node.
ad::Var attach_surrogate(RolloutGraph& graph);

/// Phi's gradient direction evaluated in log space.
///
/// dPhi/dgap_{i,t} = exp(l_{i,t}) / M with l = log prod_s phi_{i,s} +
/// log(phi'/phi)_{i,t}. Every l is finite even when the plain product
/// underflows to zero, so backward() from `node` yields dPhi scaled by the
/// positive factor exp(-log_scale) and keeps its direction in batches where
/// the direct product gradient is exactly zero. `node` holds log Phi.
struct SurrogateDirection {
  ad::Var node;
  double log_scale = 0.0;  // log of the dropped factor, dPhi = exp(log_scale) * grad
};
SurrogateDirection attach_surrogate_direction(RolloutGraph& graph);

/// Backward from `output` and collect the actor gradient.
GradientAccumulator actor_gradient(RolloutGraph& graph, ad::Var output);

struct ValueAndGradient {
  double value = 0.0;
  GradientAccumulator gradient;
};

ValueAndGradient surrogate_phi_product(const NetworkParams& theta,
                                       const EnvParams& env,
                                       const NoiseReplay& replay,
                                       const SurrogateParams& surrogate);

/// log Phi and the log-space direction of grad Phi, see
/// attach_surrogate_direction.
struct DirectionEstimate {
  double log_value = 0.0;
  double log_scale = 0.0;
  GradientAccumulator direction;
};
DirectionEstimate surrogate_direction(const NetworkParams& theta,
                                      const EnvParams& env,
                                      const NoiseReplay& replay,
                                      const SurrogateParams& surrogate);

ValueAndGradient objective_estimate(const NetworkParams& theta,
                                    const NetworkParams& critic,
                                    const EnvParams& env,
                                    const NoiseReplay& replay, double gamma);

}  // namespace spil
