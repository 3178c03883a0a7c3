#include <cmath>
#include <vector>

#include "doctest.h"
#include "spil/errors.hpp"
#include "spil/rollout.hpp"
#include "spil/surrogate.hpp"
#include "test_util.hpp"

using namespace spil;

namespace {

// Direct transcription of the indicator, kept separate from the library.
double phi_oracle(double x, const SurrogateParams& sp) {
  return (1.0 + sp.a1 * sp.tau) / (1.0 + sp.a2 * sp.tau * std::exp(-x / sp.tau));
}

NoiseReplay quiet_replay(std::vector<SystemState> starts, int horizon) {
  NoiseReplay r;
  r.trajectories = static_cast<int>(starts.size());
  r.horizon = horizon;
  r.initial_states = std::move(starts);
  r.noises.assign(static_cast<std::size_t>(r.trajectories) * horizon, 0.0);
  return r;
}

RolloutBatch margin_batch(const std::vector<std::vector<double>>& margins) {
  RolloutBatch b;
  b.trajectories = static_cast<int>(margins.size());
  b.horizon = static_cast<int>(margins.front().size());
  for (const auto& row : margins) b.margins.insert(b.margins.end(), row.begin(), row.end());
  b.refresh_safe_flags();
  return b;
}

// Count of trajectories whose gap stays strictly above the threshold for
// t = 1..N, read straight from the stored states.
double recount_safe(const RolloutBatch& b, double threshold) {
  int safe = 0;
  for (int i = 0; i < b.trajectories; ++i) {
    bool ok = true;
    for (int t = 1; t <= b.horizon; ++t) ok = ok && b.state(i, t).gap > threshold;
    safe += ok;
  }
  return static_cast<double>(safe) / b.trajectories;
}

}  // namespace

TEST_CASE("phi: worked value, limits, monotonicity") {
  const SurrogateParams sp;
  CHECK(phi(0.0, sp) == doctest::Approx(1.00045 / 1.001).epsilon(1e-15));
  CHECK(phi(0.0, sp) == doctest::Approx(0.99945054945).epsilon(1e-10));
  CHECK(phi(10.0, sp) == phi_upper(sp));
  CHECK(phi(1e300, sp) == phi_upper(sp));
  CHECK(phi(-1.0, sp) == 0.0);
  CHECK(phi(-1e300, sp) == 0.0);
  CHECK(phi(-0.69, sp) > 0.0);

  RngStream rng(77);
  for (int i = 0; i < 2000; ++i) {
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    if (a < b) CHECK(phi(a, sp) <= phi(b, sp));
    // Strict where the double format can resolve the difference.
    const double c = rng.uniform(-0.5, 0.02), d = rng.uniform(-0.5, 0.02);
    if (c + 1e-6 < d) CHECK(phi(c, sp) < phi(d, sp));
  }
  for (double x = -0.5; x < 0.5; x += 0.01) {
    const double v = phi(x, sp);
    CHECK(v >= 0.0);
    CHECK(v <= phi_upper(sp));
  }
}

TEST_CASE("phi derivative matches differences") {
  const SurrogateParams sp{0.05, 0.45, 1.0};
  for (double x = -0.4; x < 0.4; x += 0.013) {
    const double h = 1e-6;
    const double fd = (phi(x + h, sp) - phi(x - h, sp)) / (2 * h);
    CHECK(test::relative_error(phi_derivative(x, sp), fd, 1e-9) < 1e-6);
  }
  CHECK(phi_derivative(-1e3, SurrogateParams{}) == 0.0);
  CHECK(phi_derivative(1e3, SurrogateParams{}) == 0.0);
}

TEST_CASE("surrogate parameter checks") {
  CHECK_FALSE(SurrogateParams{}.validate().empty());  // the defaults warn
  CHECK(SurrogateParams{1e-3, 0.45, 0.2}.validate().empty());
  CHECK_THROWS_WITH_AS(SurrogateParams({0.0, 0.45, 1.0}).validate(),
                       doctest::Contains("surrogate.tau"), ConfigError);
  CHECK_THROWS_AS(SurrogateParams({1e-3, -1.0, 1.0}).validate(), ConfigError);
  CHECK_THROWS_AS(SurrogateParams({1e-3, 0.45, 0.0}).validate(), ConfigError);
}

TEST_CASE("estimate_safe_probability: worked batches") {
  CHECK(estimate_safe_probability(margin_batch({{-1, -2}, {-0.5, -3}})) == 1.0);
  CHECK(estimate_safe_probability(margin_batch({{-1, 0.0, -1}})) == 0.0);

  std::vector<std::vector<double>> eight(8, {-1.0, -1.0, -1.0});
  eight[1][2] = 0.4;
  eight[4][0] = 2.0;
  eight[6][1] = 0.0;
  CHECK(estimate_safe_probability(margin_batch(eight)) == 0.625);
}

TEST_CASE("estimate_safe_probability equals a brute-force recount") {
  const EnvParams env;
  RngStream rng(404);
  EnvParams risky = env;
  risky.initial_state.gap = {2.05, 4.0};
  for (int b = 0; b < 100; ++b) {
    const NetworkParams theta = init_params(actor_topology({8}), rng);
    const int m = 1 + static_cast<int>(rng.uniform() * 40);
    const int n = 1 + static_cast<int>(rng.uniform() * 30);
    const RolloutBatch batch =
        rollout_batch(theta, risky, m, n, RngStream(static_cast<std::uint64_t>(b)));
    CHECK(estimate_safe_probability(batch) ==
          recount_safe(batch, risky.gap_threshold));

    // Synthetic margins with exact zeros mixed in.
    std::vector<std::vector<double>> margins(static_cast<std::size_t>(m),
                                             std::vector<double>(static_cast<std::size_t>(n)));
    int expected = 0;
    for (auto& row : margins) {
      double worst = -INFINITY;
      for (double& v : row) {
        const double u = rng.uniform();
        v = u < 0.03 ? 0.0 : rng.uniform(-5.0, 0.3);
        worst = std::max(worst, v);
      }
      expected += worst < 0.0;
    }
    CHECK(estimate_safe_probability(margin_batch(margins)) ==
          static_cast<double>(expected) / m);
  }
}

TEST_CASE("rollout_batch: one hand-computed step") {
  EnvParams env;
  env.noise_variance = 0.0;
  env.initial_state = {{5, 5}, {5, 5}, {4, 4}};
  const NetworkParams zero = zero_params(actor_topology());
  const RolloutBatch b = rollout_batch(zero, env, 1, 1, RngStream(0));
  CHECK(b.action(0, 0) == -0.5);
  CHECK(b.state(0, 1).ego_velocity == doctest::Approx(4.95).epsilon(1e-15));
  CHECK(b.state(0, 1).front_velocity == 5.0);
  CHECK(b.state(0, 1).gap == 4.0);
  CHECK(b.reward(0, 0) == doctest::Approx(0.2 * 5 - 0.1 * 4 - 0.02 * 0.25).epsilon(1e-15));
  CHECK(b.margin(0, 0) == -2.0);
  CHECK(b.safe[0]);
}

TEST_CASE("rollout: replay consistency and determinism") {
  const EnvParams env;
  RngStream rng(5);
  const NetworkParams theta = init_params(actor_topology({16}), rng);
  const RolloutBatch a = rollout_batch(theta, env, 20, 15, RngStream(9));
  const RolloutBatch b = rollout_batch(theta, env, 20, 15, RngStream(9));
  CHECK(a.states == b.states);
  CHECK(a.actions == b.actions);
  CHECK(a.noises == b.noises);

  for (int i = 0; i < a.trajectories; ++i) {
    for (int t = 0; t < a.horizon; ++t) {
      const SystemState next = step(a.state(i, t), a.action(i, t), a.noise(i, t), env);
      CHECK(next == a.state(i, t + 1));
      // Batched and single-row products may sum in a different order.
      CHECK(a.action(i, t) ==
            doctest::Approx(actor_forward(theta, a.state(i, t), env)).epsilon(1e-12));
    }
  }

  // The taped rollout yields the same numbers as the forward-only path.
  const NoiseReplay replay = draw_replay(RngStream(9), env, 20, 15);
  const RolloutGraph graph = record_rollout(theta, env, replay, SurrogateParams{}, 0.99);
  const RolloutBatch c = extract_batch(graph, env, replay);
  CHECK(c.states == a.states);
  CHECK(c.rewards == a.rewards);
  CHECK(c.margins == a.margins);
  CHECK(c.safe == a.safe);

  // Trajectory i depends only on stream.derive(i), not on M.
  const RolloutBatch small = rollout_batch(theta, env, 5, 15, RngStream(9));
  for (int t = 0; t <= 15; ++t) CHECK(small.state(3, t) == a.state(3, t));
}

TEST_CASE("surrogate product: worked cases") {
  const EnvParams env;
  const NetworkParams zero = zero_params(actor_topology({4}));

  SUBCASE("deeply safe batch saturates at the upper bound") {
    const SurrogateParams sp;
    const NoiseReplay r = quiet_replay({{5, 5, 500}, {5, 5, 800}}, 6);
    const double v = surrogate_phi_product(zero, env, r, sp).value;
    CHECK(v == doctest::Approx(std::pow(phi_upper(sp), 6)).epsilon(1e-14));
  }

  SUBCASE("two trajectories, two steps, hand-set margins") {
    // u = -0.5 throughout. A: gaps 2.2, 2.105. B: gaps 2.0, 2.105.
    const SurrogateParams sp{0.5, 0.45, 1.0};
    const NoiseReplay r = quiet_replay({{5, 4, 2.3}, {3, 4, 1.9}}, 2);
    const double expected =
        0.5 * (phi_oracle(0.2, sp) * phi_oracle(0.105, sp) +
               phi_oracle(0.0, sp) * phi_oracle(0.105, sp));
    CHECK(surrogate_phi_product(zero, env, r, sp).value ==
          doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("one unsafe trajectory removes its share") {
    const SurrogateParams sp;
    const NoiseReplay safe = quiet_replay({{5, 5, 50}, {5, 5, 50}, {5, 5, 50}, {5, 5, 50}}, 3);
    NoiseReplay one_bad = safe;
    one_bad.initial_states[2] = {5, 5, 1.0};
    const double full = surrogate_phi_product(zero, env, safe, sp).value;
    const double dropped = surrogate_phi_product(zero, env, one_bad, sp).value;
    CHECK(full - dropped == doctest::Approx(full / 4).epsilon(1e-12));
  }
}

TEST_CASE("objective estimate: worked cases") {
  const NetworkParams zero_actor = zero_params(actor_topology({4}));
  RngStream rng(15);
  const NetworkParams critic = init_params(critic_topology({6}), rng);

  SUBCASE("zero critic and zero rewards") {
    EnvParams env;
    env.reward_weights = {0, 0, 0};
    const NoiseReplay r = draw_replay(RngStream(1), env, 8, 5);
    CHECK(objective_estimate(zero_actor, zero_params(critic_topology({6})), env, r, 0.9)
              .value == 0.0);
  }

  SUBCASE("one step by hand") {
    const EnvParams env;
    const NoiseReplay r = quiet_replay({{6, 5, 7}}, 1);
    const SystemState x1{5.95, 5, 6.9};
    const double expected = reward({6, 5, 7}, -0.5) + 0.9 * critic_forward(critic, x1, -0.5);
    CHECK(objective_estimate(zero_actor, critic, env, r, 0.9).value ==
          doctest::Approx(expected).epsilon(1e-13));
  }

  SUBCASE("gamma zero keeps only the first reward") {
    const EnvParams env;
    const NoiseReplay r = quiet_replay({{6, 5, 7}, {4, 5, 3}}, 4);
    const double expected = 0.5 * (reward({6, 5, 7}, -0.5) + reward({4, 5, 3}, -0.5));
    CHECK(objective_estimate(zero_actor, critic, env, r, 0.0).value ==
          doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("rescale_gradient") {
  const NetworkParams shape = zero_params(actor_topology({3}));
  GradientAccumulator j = GradientAccumulator::zeros_like(shape.layers);
  GradientAccumulator p = j;
  j.layers[0].weight(0, 0) = 2.0;
  p.layers[0].weight(1, 1) = 4.0;
  const GradientAccumulator out = rescale_gradient(j, p);
  CHECK(out.norm() == 2.0);
  CHECK(out.layers[0].weight(1, 1) == 2.0);

  const GradientAccumulator zero = GradientAccumulator::zeros_like(shape.layers);
  CHECK(rescale_gradient(j, zero).norm() == 0.0);
  CHECK(rescale_gradient(zero, p).norm() == 0.0);

  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    for (auto* g : {&j, &p}) {
      for (auto& layer : g->layers) {
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
          layer.weight.data()[i] = rng.uniform(-1, 1) * std::pow(10.0, rng.uniform(-6, 6));
        }
      }
    }
    const GradientAccumulator r = rescale_gradient(j, p);
    CHECK(test::relative_error(r.norm(), j.norm()) <= 1e-12);
    // Direction preserved: r is a positive multiple of p.
    const auto rf = r.flatten(), pf = p.flatten();
    const double ratio = j.norm() / p.norm();
    for (std::size_t i = 0; i < rf.size(); ++i) {
      CHECK(test::relative_error(rf[i], pf[i] * ratio, 1e-300) <= 1e-12);
    }
  }
}

TEST_CASE("Phi and p_s move together across policies") {
  // Policies that brake harder are safer; sweep the output bias.
  EnvParams env;
  env.initial_state.gap = {2.2, 4.0};
  const SurrogateParams sp;
  const NoiseReplay replay = draw_replay(RngStream(123), env, 512, 40);
  std::vector<std::pair<double, double>> points;
  for (double bias = -2.0; bias <= 2.0; bias += 0.25) {
    NetworkParams theta = zero_params(actor_topology({4}));
    theta.layers.back().bias(0) = bias;
    const RolloutBatch batch = simulate(theta, env, replay);
    points.emplace_back(estimate_safe_probability(batch),
                        surrogate_phi_product(theta, env, replay, sp).value);
  }
  int compared = 0;
  for (std::size_t a = 0; a < points.size(); ++a) {
    for (std::size_t b = 0; b < points.size(); ++b) {
      if (points[a].first >= points[b].first + 0.05) {
        ++compared;
        CHECK(points[a].second > points[b].second);
      }
    }
  }
  CHECK(compared > 10);
}

TEST_CASE("rollout gradients match central differences") {
  // Small nets, common random numbers. A wider surrogate temperature keeps
  // the safety gradient away from zero so the comparison is informative.
  EnvParams env;
  env.initial_state.gap = {2.0, 2.8};
  const SurrogateParams sp{0.05, 0.45, 1.0};
  RngStream rng(2718);
  const NetworkParams theta = init_params(actor_topology({8, 8}), rng);
  const NetworkParams critic = init_params(critic_topology({8, 8}), rng);
  const NoiseReplay replay = draw_replay(RngStream(31), env, 16, 5);

  const auto phi_grad = surrogate_phi_product(theta, env, replay, sp).gradient.flatten();
  const auto phi_check = test::check_gradient(
      theta, phi_grad,
      [&](const NetworkParams& p) { return surrogate_phi_product(p, env, replay, sp).value; },
      50, 1e-4, 1e-3, rng);
  CHECK(phi_check.pass_fraction() >= 0.95);
  CHECK(phi_check.nonzero >= 10);

  const auto j_grad = objective_estimate(theta, critic, env, replay, 0.99).gradient.flatten();
  const auto j_check = test::check_gradient(
      theta, j_grad,
      [&](const NetworkParams& p) {
        return objective_estimate(p, critic, env, replay, 0.99).value;
      },
      50, 1e-4, 1e-3, rng);
  CHECK(j_check.pass_fraction() >= 0.95);
  CHECK(j_check.nonzero >= 10);
}

TEST_CASE("log-space safety direction") {
  RngStream rng(1618);
  const NetworkParams theta = init_params(actor_topology({8, 8}), rng);

  SUBCASE("parallel to grad Phi when nothing underflows") {
    EnvParams env;
    env.initial_state.gap = {2.0, 2.8};
    const SurrogateParams sp{0.05, 0.45, 1.0};
    const NoiseReplay replay = draw_replay(RngStream(31), env, 16, 5);
    const ValueAndGradient plain = surrogate_phi_product(theta, env, replay, sp);
    const DirectionEstimate dir = surrogate_direction(theta, env, replay, sp);
    REQUIRE(plain.gradient.norm() > 0.0);
    CHECK(std::exp(dir.log_value) == doctest::Approx(plain.value).epsilon(1e-12));
    CHECK(dir.direction.norm() * std::exp(dir.log_scale) ==
          doctest::Approx(plain.gradient.norm()).epsilon(1e-10));
    const auto a = plain.gradient.flatten();
    const auto b = dir.direction.flatten();
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    CHECK(dot / (plain.gradient.norm() * dir.direction.norm()) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("still points uphill when every trajectory crashes") {
    EnvParams env;
    env.initial_state = {{9, 9.5}, {1, 1.5}, {2.2, 2.5}};  // closing at ~8 m/s
    const SurrogateParams sp;
    const NoiseReplay replay = draw_replay(RngStream(4), env, 32, 20);
    REQUIRE(estimate_safe_probability(simulate(theta, env, replay)) == 0.0);
    CHECK(surrogate_phi_product(theta, env, replay, sp).gradient.norm() == 0.0);
    const DirectionEstimate dir = surrogate_direction(theta, env, replay, sp);
    REQUIRE(dir.direction.norm() > 0.0);
    CHECK(std::isfinite(dir.log_value));
    // A small step along the direction raises log Phi.
    NetworkParams moved = theta;
    const double step = 1e-4 / dir.direction.norm();
    for (std::size_t l = 0; l < moved.layers.size(); ++l) {
      moved.layers[l].weight += step * dir.direction.layers[l].weight;
      moved.layers[l].bias += step * dir.direction.layers[l].bias;
    }
    CHECK(surrogate_direction(moved, env, replay, sp).log_value > dir.log_value);
  }
}
