#include "spil/rollout.hpp"

#include <cmath>

#include "spil/errors.hpp"

namespace spil {
namespace {

using ad::Matrix;

void require_shape(int trajectories, int horizon) {
  if (trajectories < 1 || horizon < 1) {
    throw ContractViolation("rollout: need M >= 1 and N >= 1");
  }
}

Matrix to_matrix(const std::vector<SystemState>& xs) {
  Matrix m(static_cast<Eigen::Index>(xs.size()), 3);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    m(r, 0) = xs[i].ego_velocity;
    m(r, 1) = xs[i].front_velocity;
    m(r, 2) = xs[i].gap;
  }
  return m;
}

SystemState row_state(const Matrix& m, Eigen::Index r) {
  return {m(r, 0), m(r, 1), m(r, 2)};
}

Matrix noise_column(const NoiseReplay& replay, int t) {
  Matrix xi(replay.trajectories, 1);
  for (int i = 0; i < replay.trajectories; ++i) xi(i, 0) = replay.noise(i, t);
  return xi;
}

Matrix step_rows(const Matrix& x, const Matrix& u, const Matrix& xi,
                 double dt) {
  Matrix next(x.rows(), 3);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const SystemState s = kernel::step(row_state(x, r), u(r, 0), xi(r, 0), dt);
    next(r, 0) = s.ego_velocity;
    next(r, 1) = s.front_velocity;
    next(r, 2) = s.gap;
  }
  return next;
}

Matrix reward_rows(const Matrix& x, const Matrix& u, const RewardWeights& w) {
  Matrix r(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    r(i, 0) = kernel::reward(row_state(x, i), u(i, 0), w);
  }
  return r;
}

// x_{t+1} = A x_t + B u_t + D xi_t recorded as one node.
ad::Var record_step(ad::Tape& tape, ad::Var x, ad::Var u, ad::Var xi,
                    double dt) {
  Matrix next = step_rows(tape.value(x), tape.value(u), tape.value(xi), dt);
  return tape.custom(
      {x, u, xi}, std::move(next),
      [dt](const Matrix& g, const std::vector<Matrix*>& in) {
        if (in[0] != nullptr) {
          Matrix& dx = *in[0];
          dx.col(0) += g.col(0) - dt * g.col(2);
          dx.col(1) += g.col(1) + dt * g.col(2);
          dx.col(2) += g.col(2);
        }
        if (in[1] != nullptr) in[1]->col(0) += dt * g.col(0);
        if (in[2] != nullptr) in[2]->col(0) += dt * g.col(1);
      });
}

ad::Var record_reward(ad::Tape& tape, ad::Var x, ad::Var u,
                      const RewardWeights& w) {
  Matrix r = reward_rows(tape.value(x), tape.value(u), w);
  const Matrix u_value = tape.value(u);
  return tape.custom(
      {x, u}, std::move(r),
      [w, u_value](const Matrix& g, const std::vector<Matrix*>& in) {
        if (in[0] != nullptr) {
          in[0]->col(0) += w.velocity * g.col(0);
          in[0]->col(2) -= w.gap * g.col(0);
        }
        if (in[1] != nullptr) {
          in[1]->col(0) -=
              (2.0 * w.effort) * g.col(0).cwiseProduct(u_value.col(0));
        }
      });
}

}  // namespace

NoiseReplay draw_replay(const RngStream& stream, const EnvParams& env,
                        int trajectories, int horizon) {
  require_shape(trajectories, horizon);
  NoiseReplay replay;
  replay.trajectories = trajectories;
  replay.horizon = horizon;
  replay.initial_states.reserve(trajectories);
  replay.noises.reserve(static_cast<std::size_t>(trajectories) * horizon);
  for (int i = 0; i < trajectories; ++i) {
    RngStream sub = stream.derive(static_cast<std::uint64_t>(i));
    replay.initial_states.push_back(sample_initial_state(sub, env));
    for (int t = 0; t < horizon; ++t) {
      replay.noises.push_back(sample_noise(sub, env));
    }
  }
  return replay;
}

void RolloutBatch::refresh_safe_flags() {
  safe.assign(trajectories, true);
  for (int i = 0; i < trajectories; ++i) {
    for (int t = 0; t < horizon; ++t) {
      if (!is_safe_margin(margin(i, t))) {
        safe[i] = false;
        break;
      }
    }
  }
}

RolloutBatch simulate(const NetworkParams& theta, const EnvParams& env,
                      const NoiseReplay& replay) {
  require_shape(replay.trajectories, replay.horizon);
  const int m = replay.trajectories;
  const int n = replay.horizon;
  RolloutBatch batch;
  batch.trajectories = m;
  batch.horizon = n;
  batch.states.resize(static_cast<std::size_t>(m) * (n + 1));
  batch.actions.resize(static_cast<std::size_t>(m) * n);
  batch.rewards.resize(batch.actions.size());
  batch.margins.resize(batch.actions.size());
  batch.noises = replay.noises;

  Matrix x = to_matrix(replay.initial_states);
  for (int t = 0; t < n; ++t) {
    const Matrix u = actor_forward_batch(theta, x, env);
    const Matrix r = reward_rows(x, u, env.reward_weights);
    const Matrix next = step_rows(x, u, noise_column(replay, t), env.time_step);
    for (int i = 0; i < m; ++i) {
      const std::size_t k = static_cast<std::size_t>(i) * n + t;
      batch.states[static_cast<std::size_t>(i) * (n + 1) + t] = row_state(x, i);
      batch.actions[k] = u(i, 0);
      batch.rewards[k] = r(i, 0);
      batch.margins[k] = kernel::margin(next(i, 2), env.gap_threshold);
    }
    x = next;
  }
  for (int i = 0; i < m; ++i) {
    batch.states[static_cast<std::size_t>(i) * (n + 1) + n] = row_state(x, i);
  }
  batch.refresh_safe_flags();
  return batch;
}

RolloutBatch rollout_batch(const NetworkParams& theta, const EnvParams& env,
                           int trajectories, int horizon,
                           const RngStream& stream) {
  return simulate(theta, env, draw_replay(stream, env, trajectories, horizon));
}

double estimate_safe_probability(const RolloutBatch& batch) {
  if (batch.trajectories < 1) {
    throw ContractViolation("estimate_safe_probability: empty batch");
  }
  int count = 0;
  for (bool s : batch.safe) count += s ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(batch.trajectories);
}

double mean_discounted_return(const RolloutBatch& batch, double gamma) {
  double total = 0.0;
  for (int i = 0; i < batch.trajectories; ++i) {
    double ret = 0.0;
    double discount = 1.0;
    for (int t = 0; t < batch.horizon; ++t) {
      ret += discount * batch.reward(i, t);
      discount *= gamma;
    }
    total += ret;
  }
  return total / static_cast<double>(batch.trajectories);
}

GradientAccumulator rescale_gradient(const GradientAccumulator& reference,
                                     const GradientAccumulator& target) {
  GradientAccumulator out = target;
  const double target_norm = target.norm();
  if (target_norm == 0.0) return out;
  out *= reference.norm() / target_norm;
  return out;
}

RolloutGraph record_rollout(const NetworkParams& theta, const EnvParams& env,
                            const NoiseReplay& replay,
                            const SurrogateParams& surrogate, double gamma) {
  require_shape(replay.trajectories, replay.horizon);
  RolloutGraph g;
  g.trajectories = replay.trajectories;
  g.horizon = replay.horizon;
  g.gamma = gamma;
  g.gap_threshold = env.gap_threshold;
  g.surrogate = surrogate;
  ad::Tape& tape = g.tape;
  g.actor = bind_network(tape, theta, /*trainable=*/true);

  ad::Var x = tape.constant(to_matrix(replay.initial_states));
  g.states.push_back(x);
  ad::Var ret{};
  ad::Var product{};
  double discount = 1.0;
  for (int t = 0; t < replay.horizon; ++t) {
    ad::Var u = actor_output(tape, g.actor, x, env);
    g.actions.push_back(u);
    ad::Var r = tape.scale(record_reward(tape, x, u, env.reward_weights),
                           discount);
    ret = t == 0 ? r : tape.add(ret, r);
    discount *= gamma;

    x = record_step(tape, x, u, tape.constant(noise_column(replay, t)),
                    env.time_step);
    g.states.push_back(x);
    // phi(-h(x)) = phi(gap - threshold)
    ad::Var factor = tape.phi(
        tape.shift(tape.column(x, 2), -env.gap_threshold), surrogate);
    product = t == 0 ? factor : tape.mul(product, factor);
  }
  g.actions.push_back(actor_output(tape, g.actor, x, env));
  g.discounted_return = ret;
  g.safety_product = product;
  return g;
}

RolloutBatch extract_batch(const RolloutGraph& graph, const EnvParams& env,
                           const NoiseReplay& replay) {
  const int m = graph.trajectories;
  const int n = graph.horizon;
  RolloutBatch batch;
  batch.trajectories = m;
  batch.horizon = n;
  batch.states.resize(static_cast<std::size_t>(m) * (n + 1));
  batch.actions.resize(static_cast<std::size_t>(m) * n);
  batch.rewards.resize(batch.actions.size());
  batch.margins.resize(batch.actions.size());
  batch.noises = replay.noises;
  for (int t = 0; t <= n; ++t) {
    const Matrix& x = graph.tape.value(graph.states[t]);
    for (int i = 0; i < m; ++i) {
      batch.states[static_cast<std::size_t>(i) * (n + 1) + t] = row_state(x, i);
    }
  }
  for (int t = 0; t < n; ++t) {
    const Matrix& x = graph.tape.value(graph.states[t]);
    const Matrix& x_next = graph.tape.value(graph.states[t + 1]);
    const Matrix& u = graph.tape.value(graph.actions[t]);
    for (int i = 0; i < m; ++i) {
      const std::size_t k = static_cast<std::size_t>(i) * n + t;
      batch.actions[k] = u(i, 0);
      batch.rewards[k] = kernel::reward(row_state(x, i), u(i, 0),
                                        env.reward_weights);
      batch.margins[k] = kernel::margin(x_next(i, 2), env.gap_threshold);
    }
  }
  batch.refresh_safe_flags();
  return batch;
}

ad::Var attach_objective(RolloutGraph& graph, const NetworkParams& critic) {
  ad::Tape& tape = graph.tape;
  const BoundNetwork w = bind_network(tape, critic, /*trainable=*/false);
  ad::Var q = critic_output(tape, w, graph.states.back(), graph.actions.back());
  const double terminal_discount = std::pow(graph.gamma, graph.horizon);
  ad::Var per_trajectory =
      tape.add(graph.discounted_return, tape.scale(q, terminal_discount));
  return tape.mean_rows(per_trajectory);
}

ad::Var attach_surrogate(RolloutGraph& graph) {
  return graph.tape.mean_rows(graph.safety_product);
}

SurrogateDirection attach_surrogate_direction(RolloutGraph& graph) {
  ad::Tape& tape = graph.tape;
  const int m = graph.trajectories;
  const int n = graph.horizon;
  const SurrogateParams& sp = graph.surrogate;
  const double log_upper = std::log1p(sp.a1 * sp.tau);
  const double log_a2 = std::log(sp.a2);
  const double log_a2_tau = std::log(sp.a2 * sp.tau);
  const double log_tau = std::log(sp.tau);
  auto softplus = [](double z) {
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  };

  std::vector<ad::Var> gaps;
  Matrix log_slope(m, n);  // log(phi'/phi) = -log(tau + exp(x/tau) / a2)
  Eigen::VectorXd log_product = Eigen::VectorXd::Zero(m);
  for (int t = 0; t < n; ++t) {
    gaps.push_back(tape.column(graph.states[t + 1], 2));
    const Matrix& gap = tape.value(gaps.back());
    for (int i = 0; i < m; ++i) {
      const double z = (gap(i, 0) - graph.gap_threshold) / sp.tau;
      log_product(i) += log_upper - softplus(log_a2_tau - z);
      const double a = z - log_a2;
      log_slope(i, t) = -(std::max(a, log_tau) + std::log1p(std::exp(-std::abs(a - log_tau))));
    }
  }
  Matrix log_weight = log_slope.colwise() + log_product;
  const double top = log_weight.maxCoeff();
  // Terms this far below the largest cannot change a double-precision sum; zeroing
  // them keeps subnormals out of the backward pass, which they slow down badly.
  constexpr double kNegligible = -300.0;
  Matrix weight = (log_weight.array() - top)
                      .unaryExpr([](double v) { return v < kNegligible ? 0.0 : std::exp(v); })
                      .matrix();

  const double top_product = log_product.maxCoeff();
  const double log_phi =
      top_product + std::log((log_product.array() - top_product).exp().sum()) -
      std::log(static_cast<double>(m));

  SurrogateDirection out;
  out.log_scale = top - std::log(static_cast<double>(m));
  out.node = tape.custom(
      gaps, Matrix::Constant(1, 1, log_phi),
      [weight = std::move(weight)](const Matrix& g, const std::vector<Matrix*>& in) {
        for (std::size_t t = 0; t < in.size(); ++t) {
          if (in[t] != nullptr) {
            in[t]->col(0) += g(0, 0) * weight.col(static_cast<Eigen::Index>(t));
          }
        }
      });
  return out;
}

GradientAccumulator actor_gradient(RolloutGraph& graph, ad::Var output) {
  graph.tape.backward(output);
  return collect_gradient(graph.tape, graph.actor);
}

ValueAndGradient surrogate_phi_product(const NetworkParams& theta,
                                       const EnvParams& env,
                                       const NoiseReplay& replay,
                                       const SurrogateParams& surrogate) {
  RolloutGraph graph = record_rollout(theta, env, replay, surrogate, 1.0);
  ad::Var phi_node = attach_surrogate(graph);
  ValueAndGradient out;
  out.value = graph.tape.scalar(phi_node);
  out.gradient = actor_gradient(graph, phi_node);
  return out;
}

DirectionEstimate surrogate_direction(const NetworkParams& theta,
                                      const EnvParams& env,
                                      const NoiseReplay& replay,
                                      const SurrogateParams& surrogate) {
  RolloutGraph graph = record_rollout(theta, env, replay, surrogate, 1.0);
  const SurrogateDirection d = attach_surrogate_direction(graph);
  DirectionEstimate out;
  out.log_value = graph.tape.scalar(d.node);
  out.log_scale = d.log_scale;
  out.direction = actor_gradient(graph, d.node);
  return out;
}

ValueAndGradient objective_estimate(const NetworkParams& theta,
                                    const NetworkParams& critic,
                                    const EnvParams& env,
                                    const NoiseReplay& replay, double gamma) {
  RolloutGraph graph = record_rollout(theta, env, replay, SurrogateParams{}, gamma);
  ad::Var j = attach_objective(graph, critic);
  ValueAndGradient out;
  out.value = graph.tape.scalar(j);
  out.gradient = actor_gradient(graph, j);
  return out;
}

}  // namespace spil
