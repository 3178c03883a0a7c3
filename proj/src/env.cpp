#include "spil/env.hpp"

#include <cmath>
#include <string>

#include "spil/errors.hpp"

namespace spil {
namespace {

void require(bool ok, const std::string& path, const char* what) {
  if (!ok) throw ConfigError(path + ": " + what);
}

void validate_range(const Range& r, const std::string& path) {
  require(std::isfinite(r.low) && std::isfinite(r.high), path,
          "bounds must be finite");
  require(r.low <= r.high, path, "low must not exceed high");
}

}  // namespace

bool SystemState::finite() const {
  return std::isfinite(ego_velocity) && std::isfinite(front_velocity) &&
         std::isfinite(gap);
}

void EnvParams::validate(const char* prefix) const {
  const std::string p(prefix);
  require(std::isfinite(time_step) && time_step > 0.0, p + ".time_step",
          "must be > 0");
  require(std::isfinite(noise_variance) && noise_variance >= 0.0,
          p + ".noise_variance", "must be >= 0");
  require(std::isfinite(action_low) && std::isfinite(action_high) &&
              action_low < action_high,
          p + ".action_low", "must be < action_high");
  require(std::isfinite(gap_threshold), p + ".gap_threshold",
          "must be finite");
  require(std::isfinite(reward_weights.velocity) &&
              std::isfinite(reward_weights.gap) &&
              std::isfinite(reward_weights.effort),
          p + ".reward_weights", "must be finite");
  validate_range(initial_state.ego_velocity,
                 p + ".initial_state.ego_velocity");
  validate_range(initial_state.front_velocity,
                 p + ".initial_state.front_velocity");
  validate_range(initial_state.gap, p + ".initial_state.gap");
}

SystemState step(const SystemState& state, double action, double noise,
                 const EnvParams& params) {
  if (!state.finite() || !std::isfinite(action) || !std::isfinite(noise)) {
    throw InvalidInput("step: non-finite input");
  }
  if (action < params.action_low || action > params.action_high) {
    throw InvalidInput("step: action outside [action_low, action_high]");
  }
  return kernel::step(state, action, noise, params.time_step);
}

double reward(const SystemState& state, double action,
              const RewardWeights& weights) {
  if (!state.finite() || !std::isfinite(action)) {
    throw InvalidInput("reward: non-finite input");
  }
  return kernel::reward(state, action, weights);
}

double constraint_margin(const SystemState& state, const EnvParams& params) {
  if (!std::isfinite(state.gap)) {
    throw InvalidInput("constraint_margin: non-finite gap");
  }
  return kernel::margin(state.gap, params.gap_threshold);
}

double sample_noise(RngStream& stream, const EnvParams& params) {
  return std::sqrt(params.noise_variance) * stream.normal();
}

SystemState sample_initial_state(RngStream& stream, const EnvParams& params) {
  const auto& r = params.initial_state;
  validate_range(r.ego_velocity, "env.initial_state.ego_velocity");
  validate_range(r.front_velocity, "env.initial_state.front_velocity");
  validate_range(r.gap, "env.initial_state.gap");
  SystemState x;
  x.ego_velocity = stream.uniform(r.ego_velocity.low, r.ego_velocity.high);
  x.front_velocity =
      stream.uniform(r.front_velocity.low, r.front_velocity.high);
  x.gap = stream.uniform(r.gap.low, r.gap.high);
  return x;
}

LinearModel linear_model(const EnvParams& params) {
  const double t = params.time_step;
  LinearModel m{};
  m.a = {{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {-t, t, 1.0}}};
  m.b = {t, 0.0, 0.0};
  m.d = {0.0, t, 0.0};
  return m;
}

}  // namespace spil
