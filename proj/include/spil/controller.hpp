#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace spil {

/// How the multiplier reacts to the safety error.
///   penalty       proportional only (ki ignored)
///   lagrangian    integral only (kp ignored)
///   pi            proportional + integral
///   separated_pi  proportional + integral gated by the separation gain
enum class ControllerMode { kPenalty, kLagrangian, kPi, kSeparatedPi };

std::string_view to_string(ControllerMode mode);
std::optional<ControllerMode> parse_controller_mode(std::string_view name);

struct ControllerGains {
  double kp = 15.0;
  double ki = 0.6;
  double beta = 0.3;
  double eps1 = 0.2;
  double eps2 = 0.05;
  ControllerMode mode = ControllerMode::kSeparatedPi;

  /// Throws ConfigError naming the key, e.g. "gains.beta".
  void validate(const std::string& prefix = "gains") const;
  bool operator==(const ControllerGains&) const = default;
};

struct MultiplierState {
  double delta = 0.0;       // 1 - delta_threshold - p_s
  double integrator = 0.0;  // >= 0
  double lambda = 0.0;      // >= 0
  bool operator==(const MultiplierState&) const = default;
};

/// Integrator gate: 0 above eps1, beta on (eps2, eps1], 1 at or below eps2.
/// Modes other than separated_pi always return 1.
double separation_gain(double delta, const ControllerGains& gains);

/// One controller step from the batch safe probability.
MultiplierState update_multiplier(const MultiplierState& state, double p_s,
                                  double delta_threshold,
                                  const ControllerGains& gains);

}  // namespace spil
