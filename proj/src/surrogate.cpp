#include "spil/surrogate.hpp"

#include <cmath>
#include <sstream>

#include "spil/errors.hpp"

namespace spil {

std::vector<std::string> SurrogateParams::validate(const char* prefix) const {
  const std::string p(prefix);
  if (!(tau > 0.0 && tau < 1.0)) {
    throw ConfigError(p + ".tau: must lie in (0, 1)");
  }
  if (!(a1 > 0.0 && std::isfinite(a1))) {
    throw ConfigError(p + ".a1: must be > 0");
  }
  if (!(a2 > 0.0 && std::isfinite(a2))) {
    throw ConfigError(p + ".a2: must be > 0");
  }
  std::vector<std::string> warnings;
  const double bound = a1 / (1.0 + a1);
  if (a2 >= bound) {
    std::ostringstream msg;
    msg << p << ".a2 = " << a2 << " violates a2 < a1/(1+a1) = " << bound;
    warnings.push_back(msg.str());
  }
  return warnings;
}

double phi(double x, const SurrogateParams& sp) {
  const double exponent = -x / sp.tau;
  if (exponent > kPhiExpCutoff) return 0.0;
  const double z = sp.a2 * sp.tau * std::exp(exponent);
  return phi_upper(sp) / (1.0 + z);
}

double phi_derivative(double x, const SurrogateParams& sp) {
  const double exponent = -x / sp.tau;
  if (exponent > kPhiExpCutoff) return 0.0;
  const double z = sp.a2 * sp.tau * std::exp(exponent);
  if (z == 0.0) return 0.0;
  // c z / (tau (1+z)^2) written to stay finite for large z.
  return phi_upper(sp) / (sp.tau * (1.0 + z) * (1.0 + 1.0 / z));
}

}  // namespace spil
