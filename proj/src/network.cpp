#include "spil/network.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "spil/errors.hpp"

namespace spil {
namespace {

using ad::Matrix;
using json = nlohmann::json;

constexpr const char* kCheckpointFormat = "spil-network";
constexpr int kCheckpointVersion = 1;

template <typename Fn>
void for_each_value(const TensorList& list, Fn&& fn) {
  for (const auto& layer : list) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        fn(layer.weight(r, c));
      }
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) fn(layer.bias(i));
  }
}

std::vector<double> flatten_list(const TensorList& list) {
  std::vector<double> out;
  for_each_value(list, [&](double v) { out.push_back(v); });
  return out;
}

bool finite_list(const TensorList& list) {
  bool ok = true;
  for_each_value(list, [&](double v) { ok = ok && std::isfinite(v); });
  return ok;
}

bool same_shape(const TensorList& a, const TensorList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].weight.rows() != b[l].weight.rows() ||
        a[l].weight.cols() != b[l].weight.cols() ||
        a[l].bias.size() != b[l].bias.size()) {
      return false;
    }
  }
  return true;
}

TensorList zeros_for(const Topology& topology) {
  const auto w = topology.widths();
  TensorList list;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    list.push_back({Eigen::MatrixXd::Zero(w[l + 1], w[l]),
                    Eigen::VectorXd::Zero(w[l + 1])});
  }
  return list;
}

void unflatten(const std::vector<double>& flat, TensorList& list,
               const char* field) {
  std::size_t expected = 0;
  for_each_value(list, [&](double) { ++expected; });
  if (flat.size() != expected) {
    throw ConfigError(std::string("checkpoint.") + field +
                      ": length does not match topology");
  }
  std::size_t k = 0;
  for (auto& layer : list) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = flat[k++];
      }
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
      layer.bias(i) = flat[k++];
    }
  }
}

Matrix activate(const Matrix& z, Activation act) {
  return act == Activation::kRelu ? ad::relu_value(z)
                                  : Matrix(z.array().tanh().matrix());
}

Matrix bias_row(const Eigen::VectorXd& b) { return b.transpose(); }

}  // namespace

// --- Topology ---------------------------------------------------------------

std::vector<int> Topology::widths() const {
  std::vector<int> w{input};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(output);
  return w;
}

void Topology::validate() const {
  for (int width : widths()) {
    if (width < 1) throw ConfigError("topology: every width must be >= 1");
  }
}

Topology actor_topology(std::vector<int> hidden) {
  return Topology{3, std::move(hidden), 1, Activation::kRelu};
}

Topology critic_topology(std::vector<int> hidden) {
  return Topology{4, std::move(hidden), 1, Activation::kRelu};
}

// --- GradientAccumulator ------------------------------------------------------

double GradientAccumulator::norm() const {
  double sum = 0.0;
  for_each_value(layers, [&](double v) { sum += v * v; });
  return std::sqrt(sum);
}

bool GradientAccumulator::finite() const { return finite_list(layers); }

std::size_t GradientAccumulator::size() const {
  std::size_t n = 0;
  for_each_value(layers, [&](double) { ++n; });
  return n;
}

std::vector<double> GradientAccumulator::flatten() const {
  return flatten_list(layers);
}

GradientAccumulator& GradientAccumulator::operator*=(double factor) {
  for (auto& layer : layers) {
    layer.weight *= factor;
    layer.bias *= factor;
  }
  return *this;
}

GradientAccumulator& GradientAccumulator::operator+=(
    const GradientAccumulator& other) {
  return add_scaled(other, 1.0);
}

GradientAccumulator& GradientAccumulator::add_scaled(
    const GradientAccumulator& other, double factor) {
  if (!same_shape(layers, other.layers)) {
    throw ContractViolation("gradient add: shape mismatch");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight += factor * other.layers[l].weight;
    layers[l].bias += factor * other.layers[l].bias;
  }
  return *this;
}

GradientAccumulator GradientAccumulator::zeros_like(const TensorList& shape) {
  GradientAccumulator g;
  for (const auto& layer : shape) {
    g.layers.push_back(
        {Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()),
         Eigen::VectorXd::Zero(layer.bias.size())});
  }
  return g;
}

// --- NetworkParams ------------------------------------------------------------

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for_each_value(layers, [&](double) { ++n; });
  return n;
}

bool NetworkParams::finite() const {
  return finite_list(layers) && finite_list(adam_first_moment) &&
         finite_list(adam_second_moment);
}

std::vector<double> NetworkParams::flatten() const {
  return flatten_list(layers);
}

double NetworkParams::max_abs_diff(const NetworkParams& other) const {
  if (!same_shape(layers, other.layers)) {
    throw ContractViolation("max_abs_diff: shape mismatch");
  }
  double worst = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    worst = std::max(
        worst, (layers[l].weight - other.layers[l].weight).cwiseAbs().maxCoeff());
    worst = std::max(
        worst, (layers[l].bias - other.layers[l].bias).cwiseAbs().maxCoeff());
  }
  return worst;
}

NetworkParams zero_params(const Topology& topology) {
  topology.validate();
  NetworkParams p;
  p.topology = topology;
  p.layers = zeros_for(topology);
  p.adam_first_moment = zeros_for(topology);
  p.adam_second_moment = zeros_for(topology);
  return p;
}

NetworkParams init_params(const Topology& topology, RngStream& stream) {
  NetworkParams p = zero_params(topology);
  for (auto& layer : p.layers) {
    const double fan_in = static_cast<double>(layer.weight.cols());
    const double fan_out = static_cast<double>(layer.weight.rows());
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = stream.uniform(-limit, limit);
      }
    }
  }
  return p;
}

NetworkParams adam_update(const NetworkParams& params,
                          const GradientAccumulator& grads,
                          double learning_rate, bool ascent,
                          const AdamSettings& settings) {
  if (!same_shape(params.layers, grads.layers)) {
    throw ContractViolation("adam_update: gradient shape mismatch");
  }
  if (!(learning_rate > 0.0)) {
    throw ContractViolation("adam_update: learning rate must be > 0");
  }
  NetworkParams out = params;
  out.adam_step_count += 1;
  const double b1 = settings.beta1;
  const double b2 = settings.beta2;

  // An all-zero gradient carries no direction: moments decay but weights
  // stay put.
  bool all_zero = true;
  for_each_value(grads.layers, [&](double v) { all_zero = all_zero && v == 0.0; });
  if (all_zero) {
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      out.adam_first_moment[l].weight *= b1;
      out.adam_first_moment[l].bias *= b1;
      out.adam_second_moment[l].weight *= b2;
      out.adam_second_moment[l].bias *= b2;
    }
    return out;
  }

  const double k = static_cast<double>(out.adam_step_count);
  const double correction1 = 1.0 - std::pow(b1, k);
  const double correction2 = 1.0 - std::pow(b2, k);
  const double sign = ascent ? -1.0 : 1.0;

  auto update = [&](auto& value, auto& m, auto& v, const auto& g) {
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double gi = sign * g.data()[i];
      double& mi = m.data()[i];
      double& vi = v.data()[i];
      mi = b1 * mi + (1.0 - b1) * gi;
      vi = b2 * vi + (1.0 - b2) * gi * gi;
      const double m_hat = mi / correction1;
      const double v_hat = vi / correction2;
      value.data()[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + settings.epsilon);
    }
  };
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    update(out.layers[l].weight, out.adam_first_moment[l].weight,
           out.adam_second_moment[l].weight, grads.layers[l].weight);
    update(out.layers[l].bias, out.adam_first_moment[l].bias,
           out.adam_second_moment[l].bias, grads.layers[l].bias);
  }
  return out;
}

// --- forward ------------------------------------------------------------------

Matrix forward_batch(const NetworkParams& params, const Matrix& input) {
  if (input.cols() != params.topology.input) {
    throw ContractViolation("forward: input width does not match topology");
  }
  Matrix h = input;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Matrix z = ad::affine_value(h, params.layers[l].weight,
                                bias_row(params.layers[l].bias));
    h = l == last ? std::move(z) : activate(z, params.topology.activation);
  }
  return h;
}

double squash_action(double raw, const EnvParams& env) {
  Matrix m(1, 1);
  m(0, 0) = raw;
  const double mid = 0.5 * (env.action_low + env.action_high);
  const double half = 0.5 * (env.action_high - env.action_low);
  return ad::squash_value(m, mid, half)(0, 0);
}

Matrix actor_forward_batch(const NetworkParams& theta, const Matrix& states,
                           const EnvParams& env) {
  const double mid = 0.5 * (env.action_low + env.action_high);
  const double half = 0.5 * (env.action_high - env.action_low);
  return ad::squash_value(forward_batch(theta, states), mid, half);
}

double actor_forward(const NetworkParams& theta, const SystemState& state,
                     const EnvParams& env) {
  if (!theta.finite()) {
    throw NumericError("actor_forward: non-finite parameters");
  }
  Matrix x(1, 3);
  x << state.ego_velocity, state.front_velocity, state.gap;
  return actor_forward_batch(theta, x, env)(0, 0);
}

Matrix critic_forward_batch(const NetworkParams& w, const Matrix& states,
                            const Matrix& actions) {
  Matrix input(states.rows(), states.cols() + actions.cols());
  input << states, actions;
  return forward_batch(w, input);
}

double critic_forward(const NetworkParams& w, const SystemState& state,
                      double action) {
  if (!w.finite()) {
    throw NumericError("critic_forward: non-finite parameters");
  }
  Matrix x(1, 4);
  x << state.ego_velocity, state.front_velocity, state.gap, action;
  return forward_batch(w, x)(0, 0);
}

// --- tape binding -------------------------------------------------------------

BoundNetwork bind_network(ad::Tape& tape, const NetworkParams& params,
                          bool trainable) {
  BoundNetwork net;
  net.params = &params;
  net.trainable = trainable;
  for (const auto& layer : params.layers) {
    if (trainable) {
      net.weights.push_back(tape.leaf(layer.weight));
      net.biases.push_back(tape.leaf(bias_row(layer.bias)));
    } else {
      net.weights.push_back(tape.constant(layer.weight));
      net.biases.push_back(tape.constant(bias_row(layer.bias)));
    }
  }
  return net;
}

ad::Var network_output(ad::Tape& tape, const BoundNetwork& net,
                       ad::Var input) {
  ad::Var h = input;
  const std::size_t last = net.weights.size() - 1;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    h = tape.affine(h, net.weights[l], net.biases[l]);
    if (l != last) {
      h = net.params->topology.activation == Activation::kRelu ? tape.relu(h)
                                                               : tape.tanh(h);
    }
  }
  return h;
}

ad::Var actor_output(ad::Tape& tape, const BoundNetwork& actor, ad::Var states,
                     const EnvParams& env) {
  const double mid = 0.5 * (env.action_low + env.action_high);
  const double half = 0.5 * (env.action_high - env.action_low);
  return tape.squash(network_output(tape, actor, states), mid, half);
}

ad::Var critic_output(ad::Tape& tape, const BoundNetwork& critic,
                      ad::Var states, ad::Var actions) {
  return network_output(tape, critic, tape.concat_cols(states, actions));
}

GradientAccumulator collect_gradient(const ad::Tape& tape,
                                     const BoundNetwork& net) {
  if (!net.trainable) {
    throw ContractViolation("collect_gradient: network bound as constant");
  }
  GradientAccumulator g;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    g.layers.push_back({tape.adjoint(net.weights[l]),
                        tape.adjoint(net.biases[l]).transpose()});
  }
  return g;
}

// --- checkpoints ----------------------------------------------------------------

std::string checkpoint_to_string(const NetworkParams& params) {
  json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["topology"] = {
      {"input", params.topology.input},
      {"hidden", params.topology.hidden},
      {"output", params.topology.output},
      {"activation",
       params.topology.activation == Activation::kRelu ? "relu" : "tanh"}};
  doc["field_order"] = "per layer: weight row-major (out x in), then bias";
  doc["adam_step_count"] = params.adam_step_count;
  doc["parameters"] = flatten_list(params.layers);
  doc["adam_first_moment"] = flatten_list(params.adam_first_moment);
  doc["adam_second_moment"] = flatten_list(params.adam_second_moment);
  return doc.dump(1);
}

NetworkParams checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("checkpoint: malformed JSON: ") + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != kCheckpointFormat) {
      throw ConfigError("checkpoint.format: unexpected format tag");
    }
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw ConfigError("checkpoint.version: unsupported version");
    }
    const json& t = doc.at("topology");
    Topology topology;
    topology.input = t.at("input").get<int>();
    topology.hidden = t.at("hidden").get<std::vector<int>>();
    topology.output = t.at("output").get<int>();
    const auto act = t.at("activation").get<std::string>();
    if (act != "relu" && act != "tanh") {
      throw ConfigError("checkpoint.topology.activation: unknown activation");
    }
    topology.activation = act == "relu" ? Activation::kRelu : Activation::kTanh;
    NetworkParams p = zero_params(topology);
    p.adam_step_count = doc.at("adam_step_count").get<std::int64_t>();
    unflatten(doc.at("parameters").get<std::vector<double>>(), p.layers,
              "parameters");
    unflatten(doc.at("adam_first_moment").get<std::vector<double>>(),
              p.adam_first_moment, "adam_first_moment");
    unflatten(doc.at("adam_second_moment").get<std::vector<double>>(),
              p.adam_second_moment, "adam_second_moment");
    return p;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const NetworkParams& params,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("checkpoint: cannot write " + path.string());
  out << checkpoint_to_string(params) << '\n';
}

NetworkParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("checkpoint: cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return checkpoint_from_string(buffer.str());
}

}  // namespace spil
