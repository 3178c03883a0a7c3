#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spil/env.hpp"
#include "spil/rng.hpp"
#include "spil/tape.hpp"

namespace spil {

enum class Activation { kRelu, kTanh };

/// Fully connected layout: input -> hidden... -> output.
struct Topology {
  int input = 3;
  std::vector<int> hidden = {64, 64};
  int output = 1;
  Activation activation = Activation::kRelu;

  /// Layer widths including input and output.
  [[nodiscard]] std::vector<int> widths() const;
  void validate() const;
  bool operator==(const Topology&) const = default;
};

Topology actor_topology(std::vector<int> hidden = {64, 64});
/// Critic input is [ego_velocity, front_velocity, gap, action].
Topology critic_topology(std::vector<int> hidden = {64, 64});

/// Weight (out x in) and bias (out) of one dense layer.
struct LayerTensors {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

using TensorList = std::vector<LayerTensors>;

/// Per-parameter gradients, shaped like the parameters they belong to.
struct GradientAccumulator {
  TensorList layers;

  [[nodiscard]] double norm() const;
  [[nodiscard]] bool finite() const;
  [[nodiscard]] std::size_t size() const;
  /// Row-major weights then bias, layer by layer (checkpoint order).
  [[nodiscard]] std::vector<double> flatten() const;

  GradientAccumulator& operator*=(double factor);
  GradientAccumulator& operator+=(const GradientAccumulator& other);
  /// this += factor * other
  GradientAccumulator& add_scaled(const GradientAccumulator& other,
                                  double factor);

  static GradientAccumulator zeros_like(const TensorList& shape);
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct NetworkParams {
  Topology topology;
  TensorList layers;
  TensorList adam_first_moment;
  TensorList adam_second_moment;
  std::int64_t adam_step_count = 0;

  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] bool finite() const;
  [[nodiscard]] std::vector<double> flatten() const;
  /// Largest absolute parameter difference; shapes must match.
  [[nodiscard]] double max_abs_diff(const NetworkParams& other) const;
};

/// Zero parameters and moments for `topology`.
NetworkParams zero_params(const Topology& topology);

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases and
/// moments.
NetworkParams init_params(const Topology& topology, RngStream& stream);

/// One Adam step. With `ascent` the parameters move along +grad.
NetworkParams adam_update(const NetworkParams& params,
                          const GradientAccumulator& grads,
                          double learning_rate, bool ascent,
                          const AdamSettings& settings = {});

// --- forward evaluation ---------------------------------------------------

/// Raw network output for a batch of inputs (rows).
ad::Matrix forward_batch(const NetworkParams& params, const ad::Matrix& input);

/// Deterministic policy; the raw output is squashed into the open interval
/// (action_low, action_high).
double actor_forward(const NetworkParams& theta, const SystemState& state,
                     const EnvParams& env);
/// Batched policy on an (B x 3) state matrix; returns (B x 1).
ad::Matrix actor_forward_batch(const NetworkParams& theta,
                               const ad::Matrix& states, const EnvParams& env);

double critic_forward(const NetworkParams& w, const SystemState& state,
                      double action);
/// Batched critic on (B x 3) states and (B x 1) actions; returns (B x 1).
ad::Matrix critic_forward_batch(const NetworkParams& w,
                                const ad::Matrix& states,
                                const ad::Matrix& actions);

/// Map a raw output through the action squash.
double squash_action(double raw, const EnvParams& env);

// --- tape binding -----------------------------------------------------------

/// Parameters recorded on a tape, either as differentiable leaves or as
/// constants (gradients still flow through to the network input).
struct BoundNetwork {
  const NetworkParams* params = nullptr;
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
  bool trainable = false;
};

BoundNetwork bind_network(ad::Tape& tape, const NetworkParams& params,
                          bool trainable);
ad::Var network_output(ad::Tape& tape, const BoundNetwork& net, ad::Var input);
ad::Var actor_output(ad::Tape& tape, const BoundNetwork& actor, ad::Var states,
                     const EnvParams& env);
ad::Var critic_output(ad::Tape& tape, const BoundNetwork& critic,
                      ad::Var states, ad::Var actions);

/// Leaf adjoints of a trainable binding after tape.backward().
GradientAccumulator collect_gradient(const ad::Tape& tape,
                                     const BoundNetwork& net);

// --- checkpoints --------------------------------------------------------------

/// JSON checkpoint, format "spil-network" version 1. Parameter arrays are
/// flattened layer by layer: weight row-major (out x in), then bias.
void save_checkpoint(const NetworkParams& params,
                     const std::filesystem::path& path);
NetworkParams load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const NetworkParams& params);
NetworkParams checkpoint_from_string(const std::string& text);

}  // namespace spil
