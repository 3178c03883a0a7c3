#pragma once

#include <string>
#include <vector>

namespace spil {

/// Parameters of the smooth safety indicator phi(x) =
/// (1 + a1 tau) / (1 + a2 tau exp(-x / tau)).
struct SurrogateParams {
  double tau = 1e-3;
  double a1 = 0.45;
  double a2 = 1.0;

  /// Throws ConfigError for tau outside (0, 1) or non-positive a1/a2.
  /// Returns warnings for soft conditions (a2 >= a1 / (1 + a1)).
  std::vector<std::string> validate(const char* prefix = "surrogate") const;
  bool operator==(const SurrogateParams&) const = default;
};

/// Beyond this value of -x/tau the exponential is treated as +inf.
inline constexpr double kPhiExpCutoff = 700.0;

double phi(double x, const SurrogateParams& sp);
/// d phi / dx.
double phi_derivative(double x, const SurrogateParams& sp);
/// Supremum of phi, reached as x -> +inf.
inline double phi_upper(const SurrogateParams& sp) {
  return 1.0 + sp.a1 * sp.tau;
}

}  // namespace spil
