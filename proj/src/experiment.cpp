#include "spil/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "spil/errors.hpp"

namespace spil {
namespace {

using json = nlohmann::json;

constexpr std::uint64_t kScreenSalt = stream_salt("spil/screen");

// Reads one JSON object, tracking which keys were consumed so leftovers can
// be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& node, std::string path)
      : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail(path_, "expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    out = convert<T>(*v, where(key));
  }

  const json* take(const char* key) {
    seen_.insert(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  [[nodiscard]] std::string where(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.contains(it.key())) fail(where(it.key()), "unknown key");
    }
  }

  [[noreturn]] static void fail(const std::string& path, const char* what) {
    throw ConfigError((path.empty() ? std::string("<root>") : path) + ": " +
                      what);
  }

  template <typename T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(path, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(path, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() &&
            v.get<std::int64_t>() < 0) {
          fail(path, "expected a non-negative integer");
        }
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(path, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(path, "expected a string");
      return v.get<std::string>();
    } else {
      // std::vector<U>
      if (!v.is_array()) fail(path, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(
            v[i], path + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_range(ObjectReader& r, const char* key, Range& range) {
  const json* v = r.take(key);
  if (v == nullptr) return;
  const auto bounds = ObjectReader::convert<std::vector<double>>(*v, r.where(key));
  if (bounds.size() != 2) ObjectReader::fail(r.where(key), "expected [low, high]");
  range = {bounds[0], bounds[1]};
}

void read_env(const json& node, const std::string& path, EnvParams& env) {
  ObjectReader r(node, path);
  r.read("time_step", env.time_step);
  r.read("noise_variance", env.noise_variance);
  r.read("action_low", env.action_low);
  r.read("action_high", env.action_high);
  r.read("gap_threshold", env.gap_threshold);
  if (const json* w = r.take("reward_weights")) {
    ObjectReader wr(*w, r.where("reward_weights"));
    wr.read("velocity", env.reward_weights.velocity);
    wr.read("gap", env.reward_weights.gap);
    wr.read("effort", env.reward_weights.effort);
    wr.finish();
  }
  if (const json* init = r.take("initial_state")) {
    ObjectReader ir(*init, r.where("initial_state"));
    read_range(ir, "ego_velocity", env.initial_state.ego_velocity);
    read_range(ir, "front_velocity", env.initial_state.front_velocity);
    read_range(ir, "gap", env.initial_state.gap);
    ir.finish();
  }
  r.finish();
}

void read_gains(const json& node, const std::string& path,
                ControllerGains& gains) {
  ObjectReader r(node, path);
  if (const json* m = r.take("mode")) {
    const auto name = ObjectReader::convert<std::string>(*m, r.where("mode"));
    const auto mode = parse_controller_mode(name);
    if (!mode) ObjectReader::fail(r.where("mode"), "unknown controller mode");
    gains.mode = *mode;
  }
  r.read("kp", gains.kp);
  r.read("ki", gains.ki);
  r.read("beta", gains.beta);
  r.read("eps1", gains.eps1);
  r.read("eps2", gains.eps2);
  r.finish();
}

void read_surrogate(const json& node, const std::string& path,
                    SurrogateParams& sp) {
  ObjectReader r(node, path);
  r.read("tau", sp.tau);
  r.read("a1", sp.a1);
  r.read("a2", sp.a2);
  r.finish();
}

bool valid_method_name(const std::string& name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' ||
           c == '-' || c == '.';
  });
}

json env_to_json(const EnvParams& env) {
  const auto& init = env.initial_state;
  return {{"time_step", env.time_step},
          {"noise_variance", env.noise_variance},
          {"action_low", env.action_low},
          {"action_high", env.action_high},
          {"gap_threshold", env.gap_threshold},
          {"reward_weights",
           {{"velocity", env.reward_weights.velocity},
            {"gap", env.reward_weights.gap},
            {"effort", env.reward_weights.effort}}},
          {"initial_state",
           {{"ego_velocity", {init.ego_velocity.low, init.ego_velocity.high}},
            {"front_velocity",
             {init.front_velocity.low, init.front_velocity.high}},
            {"gap", {init.gap.low, init.gap.high}}}}};
}

json gains_to_json(const ControllerGains& g) {
  return {{"mode", std::string(to_string(g.mode))},
          {"kp", g.kp},
          {"ki", g.ki},
          {"beta", g.beta},
          {"eps1", g.eps1},
          {"eps2", g.eps2}};
}

json optional_number(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

struct CellTask {
  const MethodSpec* method;
  double delta;
  std::uint64_t seed;
};

}  // namespace

ExperimentSpec parse_spec(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }

  ExperimentSpec spec;
  TrainConfig& base = spec.base;
  ObjectReader r(doc, "");
  r.read("M", base.trajectories);
  r.read("N", base.horizon);
  r.read("gamma", base.gamma);
  r.read("actor_lr", base.actor_lr);
  r.read("critic_lr", base.critic_lr);
  r.read("hidden", base.hidden);
  r.read("max_iterations", base.max_iterations);
  r.read("convergence_tol", base.convergence_tol);
  r.read("eval_interval", base.eval_interval);
  if (const json* v = r.take("eval_M"); v != nullptr && !v->is_null()) {
    base.eval_trajectories = ObjectReader::convert<int>(*v, "eval_M");
    if (base.eval_trajectories < 1) ObjectReader::fail("eval_M", "must be >= 1");
  }
  r.read("checkpoint_interval", base.checkpoint_interval);
  if (const json* v = r.take("env")) read_env(*v, "env", base.env);
  if (const json* v = r.take("gains")) read_gains(*v, "gains", base.gains);
  if (const json* v = r.take("surrogate")) {
    read_surrogate(*v, "surrogate", base.surrogate);
  }

  if (const json* v = r.take("methods")) {
    if (!v->is_array()) ObjectReader::fail("methods", "expected an array");
    for (std::size_t i = 0; i < v->size(); ++i) {
      const std::string path = "methods[" + std::to_string(i) + "]";
      ObjectReader mr((*v)[i], path);
      MethodSpec method;
      method.gains = base.gains;
      mr.read("name", method.name);
      if (const json* g = mr.take("gains")) {
        read_gains(*g, path + ".gains", method.gains);
      }
      mr.finish();
      if (method.name.empty()) method.name = std::string(to_string(method.gains.mode));
      spec.methods.push_back(std::move(method));
    }
  } else {
    spec.methods.push_back(
        {std::string(to_string(base.gains.mode)), base.gains});
  }
  r.read("seeds", spec.seeds);
  if (!r.take("seeds")) spec.seeds = {0};
  r.read("thresholds", spec.thresholds);
  if (!r.take("thresholds")) spec.thresholds = {base.delta_threshold};
  std::string output_dir = spec.output_dir.string();
  r.read("output_dir", output_dir);
  spec.output_dir = output_dir;
  if (const json* v = r.take("aggregation")) {
    ObjectReader ar(*v, "aggregation");
    ar.read("mean_across_seeds", spec.aggregation.mean_across_seeds);
    ar.read("final_window", spec.aggregation.final_window);
    ar.finish();
  }
  r.finish();

  // Validation.
  if (spec.methods.empty()) ObjectReader::fail("methods", "must not be empty");
  if (spec.seeds.empty()) ObjectReader::fail("seeds", "must not be empty");
  if (spec.thresholds.empty()) {
    ObjectReader::fail("thresholds", "must not be empty");
  }
  for (std::size_t i = 0; i < spec.thresholds.size(); ++i) {
    const double d = spec.thresholds[i];
    if (!(d > 0.0 && d < 1.0)) {
      ObjectReader::fail("thresholds[" + std::to_string(i) + "]",
                         "must lie in (0, 1)");
    }
  }
  if (spec.aggregation.final_window < 1) {
    ObjectReader::fail("aggregation.final_window", "must be >= 1");
  }
  base.validate();
  std::set<std::string> names;
  for (std::size_t i = 0; i < spec.methods.size(); ++i) {
    const auto& m = spec.methods[i];
    const std::string path = "methods[" + std::to_string(i) + "]";
    if (!valid_method_name(m.name)) {
      ObjectReader::fail(path + ".name", "use letters, digits, '_', '-', '.'");
    }
    if (!names.insert(m.name).second) {
      ObjectReader::fail(path + ".name", "duplicate method name");
    }
    m.gains.validate(path + ".gains");
  }
  return spec;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open spec file");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_spec(buffer.str());
}

std::string spec_to_json(const ExperimentSpec& spec) {
  const TrainConfig& b = spec.base;
  json doc;
  doc["M"] = b.trajectories;
  doc["N"] = b.horizon;
  doc["gamma"] = b.gamma;
  doc["actor_lr"] = b.actor_lr;
  doc["critic_lr"] = b.critic_lr;
  doc["hidden"] = b.hidden;
  doc["max_iterations"] = b.max_iterations;
  doc["convergence_tol"] = b.convergence_tol;
  doc["eval_interval"] = b.eval_interval;
  doc["eval_M"] =
      b.eval_trajectories > 0 ? json(b.eval_trajectories) : json(nullptr);
  doc["checkpoint_interval"] = b.checkpoint_interval;
  doc["env"] = env_to_json(b.env);
  doc["gains"] = gains_to_json(b.gains);
  doc["surrogate"] = {
      {"tau", b.surrogate.tau}, {"a1", b.surrogate.a1}, {"a2", b.surrogate.a2}};
  json methods = json::array();
  for (const auto& m : spec.methods) {
    methods.push_back({{"name", m.name}, {"gains", gains_to_json(m.gains)}});
  }
  doc["methods"] = methods;
  doc["seeds"] = spec.seeds;
  doc["thresholds"] = spec.thresholds;
  doc["output_dir"] = spec.output_dir.string();
  doc["aggregation"] = {
      {"mean_across_seeds", spec.aggregation.mean_across_seeds},
      {"final_window", spec.aggregation.final_window}};
  return doc.dump(2) + "\n";
}

TrainConfig cell_config(const ExperimentSpec& spec, const MethodSpec& method,
                        double delta, std::uint64_t seed) {
  TrainConfig config = spec.base;
  config.gains = method.gains;
  config.delta_threshold = delta;
  config.master_seed = seed;
  return config;
}

std::string threshold_tag(double delta) {
  return "delta_" + format_number(delta);
}

std::filesystem::path cell_directory(const MethodSpec& method, double delta,
                                     std::uint64_t seed) {
  return std::filesystem::path("runs") / method.name / threshold_tag(delta) /
         ("seed_" + std::to_string(seed));
}

std::optional<double> final_eval_mean(const TrainLog& log, int window,
                                      bool use_return) {
  double sum = 0.0;
  int count = 0;
  for (auto it = log.rows.rbegin(); it != log.rows.rend() && count < window;
       ++it) {
    const auto& v = use_return ? it->eval_return : it->eval_p_s;
    if (!v) continue;
    sum += *v;
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

std::string aggregate_csv(const std::vector<const TrainLog*>& logs) {
  std::ostringstream out;
  out << "iteration,runs,p_s_mean,p_s_min,p_s_max,J_mean,J_min,J_max,"
         "eval_p_s_mean,eval_p_s_min,eval_p_s_max,eval_return_mean,"
         "eval_return_min,eval_return_max,integral_mean,lambda_mean\n";
  std::size_t longest = 0;
  for (const TrainLog* log : logs) longest = std::max(longest, log->rows.size());

  struct Stat {
    double sum = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    int n = 0;
    void add(double v) {
      lo = n == 0 ? v : std::min(lo, v);
      hi = n == 0 ? v : std::max(hi, v);
      sum += v;
      ++n;
    }
    void write(std::ostream& os) const {
      if (n == 0) {
        os << ",,";
        return;
      }
      os << format_number(sum / n) << ',' << format_number(lo) << ','
         << format_number(hi);
    }
  };

  for (std::size_t t = 0; t < longest; ++t) {
    Stat p_s, j, eval_p_s, eval_return, integral, lambda;
    int iteration = 0;
    for (const TrainLog* log : logs) {
      if (t >= log->rows.size()) continue;
      const TrainLogRow& row = log->rows[t];
      iteration = row.iteration;
      p_s.add(row.p_s);
      j.add(row.objective);
      integral.add(row.integral);
      lambda.add(row.lambda);
      if (row.eval_p_s) eval_p_s.add(*row.eval_p_s);
      if (row.eval_return) eval_return.add(*row.eval_return);
    }
    out << iteration << ',' << p_s.n << ',';
    p_s.write(out);
    out << ',';
    j.write(out);
    out << ',';
    eval_p_s.write(out);
    out << ',';
    eval_return.write(out);
    out << ',' << format_number(integral.sum / integral.n) << ','
        << format_number(lambda.sum / lambda.n) << '\n';
  }
  return out.str();
}

double initial_safe_probability(const TrainConfig& config) {
  const NetworkParams actor = initial_actor(config);
  const RolloutBatch batch =
      rollout_batch(actor, config.env, config.effective_eval_trajectories(),
                    config.horizon, RngStream(config.master_seed, kScreenSalt, 0));
  return estimate_safe_probability(batch);
}

std::vector<std::uint64_t> select_unsafe_seeds(
    const std::vector<std::uint64_t>& candidates, const TrainConfig& config) {
  std::vector<std::uint64_t> unsafe;
  for (std::uint64_t seed : candidates) {
    TrainConfig c = config;
    c.master_seed = seed;
    if (initial_safe_probability(c) < 0.5) unsafe.push_back(seed);
  }
  return unsafe;
}

ExperimentResult run_experiment(const ExperimentSpec& spec,
                                const RunOptions& options) {
  spec.base.validate();  // warnings are the caller's to report
  std::filesystem::create_directories(spec.output_dir);

  std::vector<CellTask> tasks;
  for (const auto& method : spec.methods) {
    for (double delta : spec.thresholds) {
      for (std::uint64_t seed : spec.seeds) {
        tasks.push_back({&method, delta, seed});
      }
    }
  }

  std::vector<TrainLog> logs(tasks.size());
  std::vector<CellSummary> cells(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;

  auto worker = [&]() {
    for (std::size_t idx = next++; idx < tasks.size(); idx = next++) {
      const CellTask& task = tasks[idx];
      CellSummary& cell = cells[idx];
      cell.method = task.method->name;
      cell.delta = task.delta;
      cell.seed = task.seed;
      const auto dir = spec.output_dir /
                       cell_directory(*task.method, task.delta, task.seed);
      try {
        std::filesystem::create_directories(dir);
        TrainConfig config =
            cell_config(spec, *task.method, task.delta, task.seed);
        config.checkpoint_dir = dir;
        TrainResult result = train(config);
        write_log_csv(result.log, dir / "log.csv");
        cell.ok = result.status != TrainStatus::kDiverged;
        if (!cell.ok) cell.error = result.message;
        logs[idx] = std::move(result.log);
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      const TrainLog& log = logs[idx];
      cell.iterations = static_cast<int>(log.rows.size());
      for (const auto& row : log.rows) {
        cell.peak_integral = std::max(cell.peak_integral, row.integral);
      }
      cell.final_eval_p_s =
          final_eval_mean(log, spec.aggregation.final_window, false);
      cell.final_eval_return =
          final_eval_mean(log, spec.aggregation.final_window, true);
      if (options.verbose) {
        std::lock_guard lock(io_mutex);
        std::cerr << (cell.ok ? "done   " : "FAILED ") << cell.method << ' '
                  << threshold_tag(cell.delta) << " seed " << cell.seed
                  << (cell.ok ? "" : ": " + cell.error) << '\n';
      }
    }
  };

  const int workers = std::max(1, options.workers);
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  // Aggregates and summary, in spec order.
  const auto aggregate_dir = spec.output_dir / "aggregate";
  std::filesystem::create_directories(aggregate_dir);
  json summary;
  summary["cells"] = json::array();
  summary["aggregates"] = json::array();
  ExperimentResult result;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const CellSummary& c = cells[i];
    summary["cells"].push_back(
        {{"method", c.method},
         {"delta", c.delta},
         {"seed", c.seed},
         {"status", c.ok ? "ok" : "failed"},
         {"error", c.ok ? json(nullptr) : json(c.error)},
         {"iterations", c.iterations},
         {"final_eval_p_s", optional_number(c.final_eval_p_s)},
         {"final_eval_return", optional_number(c.final_eval_return)},
         {"peak_integral", c.peak_integral},
         {"directory", cell_directory(*tasks[i].method, c.delta, c.seed)
                           .generic_string()}});
    if (!c.ok) result.exit_code = 2;
  }

  for (const auto& method : spec.methods) {
    for (double delta : spec.thresholds) {
      std::vector<const TrainLog*> group;
      std::vector<const CellSummary*> group_cells;
      int failed = 0;
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].method != &method || tasks[i].delta != delta) continue;
        if (cells[i].ok) {
          group.push_back(&logs[i]);
          group_cells.push_back(&cells[i]);
        } else {
          ++failed;
        }
      }
      const std::string file =
          method.name + "__" + threshold_tag(delta) + ".csv";
      write_text(aggregate_dir / file, aggregate_csv(group));

      auto mean_of = [&](auto getter) -> json {
        double sum = 0.0;
        int n = 0;
        for (const CellSummary* c : group_cells) {
          const std::optional<double> v = getter(*c);
          if (!v) continue;
          sum += *v;
          ++n;
        }
        return n == 0 ? json(nullptr) : json(sum / n);
      };
      summary["aggregates"].push_back(
          {{"method", method.name},
           {"delta", delta},
           {"runs_ok", static_cast<int>(group_cells.size())},
           {"runs_failed", failed},
           {"final_eval_p_s_mean",
            mean_of([](const CellSummary& c) { return c.final_eval_p_s; })},
           {"final_eval_return_mean",
            mean_of([](const CellSummary& c) { return c.final_eval_return; })},
           {"peak_integral_mean",
            mean_of([](const CellSummary& c) {
              return std::optional<double>(c.peak_integral);
            })},
           {"file", "aggregate/" + file}});
    }
  }
  write_text(spec.output_dir / "summary.json", summary.dump(2) + "\n");
  result.cells = std::move(cells);
  return result;
}

}  // namespace spil
