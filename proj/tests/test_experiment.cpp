#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "spil/errors.hpp"
#include "spil/experiment.hpp"

using namespace spil;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// Every regular file under `root`, relative path -> contents.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) {
      out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
    }
  }
  return out;
}

const char* kTinySpec = R"({
  "M": 16, "N": 8, "hidden": [8, 8], "max_iterations": 4, "eval_interval": 1,
  "eval_M": 12,
  "methods": [
    {"name": "spil", "gains": {"mode": "separated_pi"}},
    {"name": "penalty_12", "gains": {"mode": "penalty", "kp": 12}}
  ],
  "seeds": [3, 5],
  "thresholds": [0.1]
})";

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("spec: empty object gives the defaults") {
  const ExperimentSpec s = parse_spec("{}");
  CHECK(s.base == TrainConfig{});
  CHECK(s.base.trajectories == 4096);
  CHECK(s.base.horizon == 40);
  CHECK(s.base.gamma == 0.99);
  CHECK(s.base.actor_lr == 3e-4);
  CHECK(s.base.critic_lr == 2e-4);
  REQUIRE(s.methods.size() == 1);
  CHECK(s.methods[0].name == "separated_pi");
  CHECK(s.methods[0].gains == ControllerGains{});
  CHECK(s.seeds == std::vector<std::uint64_t>{0});
  CHECK(s.thresholds == std::vector<double>{0.1});
}

TEST_CASE("spec: validation errors name the key") {
  CHECK_THROWS_WITH_AS(parse_spec(R"({"gains": {"beta": 1.5}})"),
                       doctest::Contains("gains.beta"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_spec(R"({"methods": [{"name": "a"}, {"name": "b", "gains": {"beta": 1.5}}]})"),
      doctest::Contains("methods[1].gains.beta"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"bogus": 1})"), doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"env": {"initial_state": {"gapp": [1, 2]}}})"),
                       doctest::Contains("env.initial_state.gapp"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"M": "many"})"), doctest::Contains("M"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"seeds": []})"), doctest::Contains("seeds"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"thresholds": [1.0]})"),
                       doctest::Contains("thresholds[0]"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"methods": [{"name": "a"}, {"name": "a"}]})"),
                       doctest::Contains("duplicate"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_spec(R"({"gains": {"mode": "pid"}})"),
                       doctest::Contains("gains.mode"), ConfigError);
  CHECK_THROWS_AS(parse_spec("{not json"), ConfigError);
  CHECK_THROWS_AS(load_spec("/nonexistent/spec.json"), ConfigError);
}

TEST_CASE("spec: load, serialize, load is the identity") {
  const ExperimentSpec a = parse_spec(kTinySpec);
  const std::string text = spec_to_json(a);
  const ExperimentSpec b = parse_spec(text);
  CHECK(b == a);
  CHECK(spec_to_json(b) == text);

  const ExperimentSpec d = parse_spec("{}");
  CHECK(parse_spec(spec_to_json(d)) == d);

  ExperimentSpec odd = d;
  odd.base.actor_lr = 0.1 + 0.2;
  odd.base.env.initial_state.gap = {2.05, 7.123456789012345};
  odd.thresholds = {0.001, 1.0 / 3.0};
  CHECK(parse_spec(spec_to_json(odd)) == odd);
}

TEST_CASE("run_experiment: artifact tree, determinism, aggregation") {
  ExperimentSpec spec = parse_spec(kTinySpec);
  spec.output_dir = fresh_dir("spil_exp_a");
  const ExperimentResult r1 = run_experiment(spec, {1, false});
  CHECK(r1.exit_code == 0);
  CHECK(r1.cells.size() == 4);

  int run_dirs = 0;
  for (const auto& e : fs::recursive_directory_iterator(spec.output_dir / "runs")) {
    if (e.is_regular_file() && e.path().filename() == "log.csv") ++run_dirs;
  }
  CHECK(run_dirs == 4);
  int aggregates = 0;
  for (const auto& e : fs::directory_iterator(spec.output_dir / "aggregate")) {
    aggregates += e.path().extension() == ".csv";
  }
  CHECK(aggregates == 2);
  CHECK(fs::exists(spec.output_dir / "summary.json"));
  CHECK(fs::exists(spec.output_dir / "runs/spil/delta_0.1/seed_3/actor_final.json"));

  SUBCASE("same spec twice and with more workers gives identical bytes") {
    const auto first = snapshot(spec.output_dir);
    ExperimentSpec again = spec;
    again.output_dir = fresh_dir("spil_exp_b");
    run_experiment(again, {1, false});
    CHECK(snapshot(again.output_dir) == first);
    again.output_dir = fresh_dir("spil_exp_c");
    run_experiment(again, {4, false});
    CHECK(snapshot(again.output_dir) == first);
    fs::remove_all(again.output_dir);
    fs::remove_all(fresh_dir("spil_exp_b"));
  }

  SUBCASE("method order does not change individual runs") {
    ExperimentSpec swapped = spec;
    std::swap(swapped.methods[0], swapped.methods[1]);
    swapped.output_dir = fresh_dir("spil_exp_d");
    run_experiment(swapped, {1, false});
    for (const char* rel : {"runs/spil/delta_0.1/seed_5/log.csv",
                            "runs/penalty_12/delta_0.1/seed_3/log.csv"}) {
      CHECK(read_file(swapped.output_dir / rel) == read_file(spec.output_dir / rel));
    }
    fs::remove_all(swapped.output_dir);
  }

  SUBCASE("aggregate rows are exact means of the run rows") {
    const auto agg = read_csv(spec.output_dir / "aggregate/spil__delta_0.1.csv");
    const auto s3 = read_csv(spec.output_dir / "runs/spil/delta_0.1/seed_3/log.csv");
    const auto s5 = read_csv(spec.output_dir / "runs/spil/delta_0.1/seed_5/log.csv");
    REQUIRE(agg.size() == s3.size());
    CHECK(agg[0][0] == "iteration");
    // run columns: p_s 1, J 2, eval_p_s 9; aggregate: mean/min/max at 2, 5, 8
    const std::vector<std::pair<int, int>> columns = {{1, 2}, {2, 5}, {9, 8}};
    for (std::size_t t = 1; t < agg.size(); ++t) {
      CHECK(agg[t][0] == s3[t][0]);
      CHECK(agg[t][1] == "2");
      for (auto [run_col, agg_col] : columns) {
        const double a = std::stod(s3[t][run_col]);
        const double b = std::stod(s5[t][run_col]);
        CHECK(std::stod(agg[t][agg_col]) == (a + b) / 2.0);
        CHECK(std::stod(agg[t][agg_col + 1]) == std::min(a, b));
        CHECK(std::stod(agg[t][agg_col + 2]) == std::max(a, b));
      }
    }
  }

  SUBCASE("summary lists every cell and group") {
    const auto summary = nlohmann::json::parse(read_file(spec.output_dir / "summary.json"));
    CHECK(summary["cells"].size() == 4);
    CHECK(summary["aggregates"].size() == 2);
    for (const auto& cell : summary["cells"]) {
      CHECK(cell["status"] == "ok");
      CHECK(cell["final_eval_p_s"].is_number());
      CHECK(cell["final_eval_return"].is_number());
    }
    CHECK(summary["cells"][0]["method"] == "spil");
    CHECK(summary["cells"][0]["seed"] == 3);
  }
  fs::remove_all(spec.output_dir);
}

TEST_CASE("run_experiment: a failing cell does not stop the sweep") {
  ExperimentSpec mixed = parse_spec(kTinySpec);
  mixed.output_dir = fresh_dir("spil_exp_fail");
  mixed.base.critic_lr = 1e300;  // overflows within a few steps
  const ExperimentResult r = run_experiment(mixed, {2, false});
  CHECK(r.exit_code == 2);
  CHECK(r.cells.size() == 4);
  for (const auto& c : r.cells) {
    CHECK_FALSE(c.ok);
    CHECK_FALSE(c.error.empty());
  }
  const auto summary = nlohmann::json::parse(read_file(mixed.output_dir / "summary.json"));
  CHECK(summary["cells"].size() == 4);
  CHECK(summary["cells"][1]["status"] == "failed");
  CHECK(summary["aggregates"][0]["runs_failed"] == 2);
  fs::remove_all(mixed.output_dir);
}

TEST_CASE("final_eval_mean and aggregate helpers") {
  TrainLog log;
  for (int k = 0; k < 30; ++k) {
    TrainLogRow row;
    row.iteration = k;
    if (k % 2 == 1) {
      row.eval_p_s = k;
      row.eval_return = -k;
    }
    log.rows.push_back(row);
  }
  // last three evaluated rows: 29, 27, 25
  CHECK(*final_eval_mean(log, 3, false) == (29.0 + 27.0 + 25.0) / 3.0);
  CHECK(*final_eval_mean(log, 3, true) == -(29.0 + 27.0 + 25.0) / 3.0);
  CHECK_FALSE(final_eval_mean(TrainLog{}, 20, false).has_value());

  const std::string csv = aggregate_csv({&log, &log});
  CHECK(csv.find("\n1,2,") != std::string::npos);
  CHECK(threshold_tag(0.001) == "delta_0.001");
}

TEST_CASE("unsafe-seed screening") {
  TrainConfig c;
  c.trajectories = 256;
  c.hidden = {64, 64};
  std::vector<std::uint64_t> seeds(100);
  std::iota(seeds.begin(), seeds.end(), std::uint64_t{0});
  const auto unsafe = select_unsafe_seeds(seeds, c);
  CHECK_FALSE(unsafe.empty());
  CHECK(std::is_sorted(unsafe.begin(), unsafe.end()));
  CHECK(select_unsafe_seeds(seeds, c) == unsafe);
  for (std::uint64_t s : seeds) {
    TrainConfig one = c;
    one.master_seed = s;
    const bool listed = std::find(unsafe.begin(), unsafe.end(), s) != unsafe.end();
    CHECK(listed == (initial_safe_probability(one) < 0.5));
  }
  // A seed whose initial policy is safe is excluded.
  TrainConfig safe = c;
  safe.master_seed = 0;
  REQUIRE(initial_safe_probability(safe) >= 0.5);
  CHECK(select_unsafe_seeds({0}, c).empty());
}
