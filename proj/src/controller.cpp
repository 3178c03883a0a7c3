#include "spil/controller.hpp"

#include <algorithm>
#include <cmath>

#include "spil/errors.hpp"

namespace spil {

std::string_view to_string(ControllerMode mode) {
  switch (mode) {
    case ControllerMode::kPenalty:
      return "penalty";
    case ControllerMode::kLagrangian:
      return "lagrangian";
    case ControllerMode::kPi:
      return "pi";
    case ControllerMode::kSeparatedPi:
      return "separated_pi";
  }
  return "unknown";
}

std::optional<ControllerMode> parse_controller_mode(std::string_view name) {
  if (name == "penalty") return ControllerMode::kPenalty;
  if (name == "lagrangian") return ControllerMode::kLagrangian;
  if (name == "pi") return ControllerMode::kPi;
  if (name == "separated_pi") return ControllerMode::kSeparatedPi;
  return std::nullopt;
}

void ControllerGains::validate(const std::string& prefix) const {
  auto fail = [&](const char* key, const char* what) {
    throw ConfigError(prefix + "." + key + ": " + what);
  };
  if (!(std::isfinite(kp) && kp >= 0.0)) fail("kp", "must be >= 0");
  if (!(std::isfinite(ki) && ki >= 0.0)) fail("ki", "must be >= 0");
  if (mode == ControllerMode::kSeparatedPi) {
    if (!(beta > 0.0 && beta < 1.0)) fail("beta", "must lie in (0, 1)");
    if (!(eps2 > 0.0)) fail("eps2", "must be > 0");
    if (!(eps1 > eps2 && std::isfinite(eps1))) fail("eps1", "must exceed eps2");
  }
}

double separation_gain(double delta, const ControllerGains& gains) {
  if (gains.mode != ControllerMode::kSeparatedPi) return 1.0;
  if (delta > gains.eps1) return 0.0;
  if (delta > gains.eps2) return gains.beta;
  return 1.0;
}

MultiplierState update_multiplier(const MultiplierState& state, double p_s,
                                  double delta_threshold,
                                  const ControllerGains& gains) {
  if (!(p_s >= 0.0 && p_s <= 1.0)) {
    throw ContractViolation("update_multiplier: p_s outside [0, 1]");
  }
  const double kp = gains.mode == ControllerMode::kLagrangian ? 0.0 : gains.kp;
  const double ki = gains.mode == ControllerMode::kPenalty ? 0.0 : gains.ki;

  MultiplierState next;
  next.delta = 1.0 - delta_threshold - p_s;
  next.integrator = std::max(
      0.0, state.integrator + separation_gain(next.delta, gains) * next.delta);
  next.lambda = std::max(0.0, kp * next.delta + ki * next.integrator);
  return next;
}

}  // namespace spil
