#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "spil/network.hpp"

namespace spil::test {

/// |a - b| relative to the larger magnitude, with a small absolute floor so
/// two near-zero numbers compare as equal.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Reference to flattened parameter `index` (weights row-major, then bias).
inline double& flat_param(NetworkParams& p, std::size_t index) {
  for (auto& layer : p.layers) {
    const auto w = static_cast<std::size_t>(layer.weight.size());
    if (index < w) {
      const auto cols = static_cast<std::size_t>(layer.weight.cols());
      return layer.weight(static_cast<Eigen::Index>(index / cols),
                          static_cast<Eigen::Index>(index % cols));
    }
    index -= w;
    const auto b = static_cast<std::size_t>(layer.bias.size());
    if (index < b) return layer.bias(static_cast<Eigen::Index>(index));
    index -= b;
  }
  throw std::out_of_range("flat_param");
}

inline double central_difference(const NetworkParams& p, std::size_t index,
                                 double h,
                                 const std::function<double(const NetworkParams&)>& f) {
  NetworkParams plus = p, minus = p;
  flat_param(plus, index) += h;
  flat_param(minus, index) -= h;
  return (f(plus) - f(minus)) / (2.0 * h);
}

inline std::vector<double> central_differences(
    const NetworkParams& p, double h,
    const std::function<double(const NetworkParams&)>& f) {
  std::vector<double> out(p.parameter_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = central_difference(p, i, h, f);
  }
  return out;
}

struct GradientCheck {
  int probed = 0;
  int passed = 0;
  int nonzero = 0;  // probes whose finite difference is not ~0
  double worst = 0.0;
  [[nodiscard]] double pass_fraction() const {
    return probed == 0 ? 0.0 : static_cast<double>(passed) / probed;
  }
};

/// Compare `analytic` (flattened) with central differences of `f` on
/// `probes` coordinates drawn without replacement from `rng`.
inline GradientCheck check_gradient(
    const NetworkParams& p, const std::vector<double>& analytic,
    const std::function<double(const NetworkParams&)>& f, int probes,
    double h, double tol, RngStream& rng) {
  std::vector<std::size_t> order(analytic.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i + 1));
    std::swap(order[i], order[std::min(j, i)]);
  }
  GradientCheck out;
  for (int k = 0; k < probes && k < static_cast<int>(order.size()); ++k) {
    const std::size_t idx = order[static_cast<std::size_t>(k)];
    const double fd = central_difference(p, idx, h, f);
    const double err = relative_error(analytic[idx], fd);
    ++out.probed;
    if (err <= tol) ++out.passed;
    if (std::abs(fd) > 1e-7) ++out.nonzero;
    out.worst = std::max(out.worst, err);
  }
  return out;
}

}  // namespace spil::test
