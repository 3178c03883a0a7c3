#pragma once

#include <array>

#include "spil/rng.hpp"

namespace spil {

/// Car-following state: ego velocity (m/s), front velocity (m/s), gap (m).
struct SystemState {
  double ego_velocity = 0.0;
  double front_velocity = 0.0;
  double gap = 0.0;

  [[nodiscard]] bool finite() const;
  bool operator==(const SystemState&) const = default;
};

struct Range {
  double low = 0.0;
  double high = 0.0;
  bool operator==(const Range&) const = default;
};

struct RewardWeights {
  double velocity = 0.2;
  double gap = 0.1;
  double effort = 0.02;
  bool operator==(const RewardWeights&) const = default;
};

struct InitialStateRanges {
  Range ego_velocity{4.0, 6.0};
  Range front_velocity{4.0, 6.0};
  Range gap{3.0, 10.0};
  bool operator==(const InitialStateRanges&) const = default;
};

struct EnvParams {
  double time_step = 0.1;       // s
  double noise_variance = 0.7;  // (m/s^2)^2, variance of the front-car input
  double action_low = -4.0;     // m/s^2
  double action_high = 3.0;     // m/s^2
  double gap_threshold = 2.0;   // m
  RewardWeights reward_weights;
  InitialStateRanges initial_state;

  /// Throws ConfigError naming the offending field under `prefix`.
  void validate(const char* prefix = "env") const;
  bool operator==(const EnvParams&) const = default;
};

// Unchecked kernels shared by the scalar API and the batched rollout so the
// two produce bit-identical numbers.
namespace kernel {

inline SystemState step(const SystemState& x, double action, double noise,
                        double dt) {
  return {x.ego_velocity + dt * action, x.front_velocity + dt * noise,
          x.gap + dt * (x.front_velocity - x.ego_velocity)};
}

inline double reward(const SystemState& x, double action,
                     const RewardWeights& w) {
  return w.velocity * x.ego_velocity - w.gap * x.gap -
         w.effort * action * action;
}

inline double margin(double gap, double threshold) { return threshold - gap; }

}  // namespace kernel

/// One transition x' = A x + B u + D xi. Throws InvalidInput on non-finite
/// input or an action outside [action_low, action_high].
SystemState step(const SystemState& state, double action, double noise,
                 const EnvParams& params);

double reward(const SystemState& state, double action,
              const RewardWeights& weights = {});

/// h(x) = gap_threshold - gap. Strictly negative means safe.
double constraint_margin(const SystemState& state, const EnvParams& params);

/// True when the margin is strictly negative.
inline bool is_safe_margin(double margin) { return margin < 0.0; }

/// Front-car disturbance, N(0, noise_variance).
double sample_noise(RngStream& stream, const EnvParams& params);

/// Each field independently uniform over its configured range.
SystemState sample_initial_state(RngStream& stream, const EnvParams& params);

/// Explicit A, B, D matrices of the linear model, row-major.
struct LinearModel {
  std::array<std::array<double, 3>, 3> a;
  std::array<double, 3> b;
  std::array<double, 3> d;
};
LinearModel linear_model(const EnvParams& params);

}  // namespace spil
