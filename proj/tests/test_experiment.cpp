#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "safelayer/errors.hpp"
#include "safelayer/experiment.hpp"

using namespace safelayer;
using namespace safelayer::experiment;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("safelayer_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Short episodes and rounds so that a cell trains in well under a second.
ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c;
  c.env.max_steps = 25;
  c.episodes = 12;
  c.steps_per_round = 60;
  c.parallel = 2;
  c.seeds = {5};
  c.trpo.value_epochs = 1;
  c.out_dir = out.string();
  return c;
}

std::vector<EpisodeRow> rows_from(const std::vector<double>& rewards,
                                  const std::vector<bool>& hits) {
  std::vector<EpisodeRow> rows;
  int cum = 0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    EpisodeRow r;
    r.episode = static_cast<int>(i);
    r.reward = rewards[i];
    r.steps = 10 + static_cast<int>(i);
    r.collision = hits[i];
    r.cum_collisions = cum += hits[i];
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST_CASE("config round trip and validation") {
  ExperimentConfig c;
  c.strategies = {safe_rl::Strategy::kUp, safe_rl::Strategy::kCc};
  c.beta_colls = {1.0, 50.0};
  c.seeds = {3, 4};
  c.env.dt = 0.02;
  c.policy.hidden = {16};
  const ExperimentConfig back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.env.dt == 0.02);

  SUBCASE("missing keys keep defaults") {
    const ExperimentConfig d = config_from_json(json::object());
    CHECK(to_json(d) == to_json(ExperimentConfig{}));
  }
  SUBCASE("zero episode budget") {
    json j = to_json(c);
    j["experiment"]["episodes"] = 0;
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("unknown key names the field") {
    json j = to_json(c);
    j["trpo"]["delta"] = 0.1;
    try {
      config_from_json(j);
      FAIL("accepted an unknown key");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("trpo.delta") != std::string::npos);
    }
  }
  SUBCASE("bad strategy tag") {
    json j = to_json(c);
    j["experiment"]["strategies"] = {"cpc", "xx"};
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("wrong type") {
    json j = to_json(c);
    j["env"]["max_steps"] = "many";
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
  SUBCASE("empty seeds") {
    json j = to_json(c);
    j["experiment"]["seeds"] = json::array();
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
  }
}

TEST_CASE("cell grid") {
  ExperimentConfig c;
  c.strategies = {safe_rl::Strategy::kUp, safe_rl::Strategy::kCpc};
  c.beta_colls = {1.0, 50.0};
  c.seeds = {0, 1, 2};
  const auto g = cells(c);
  CHECK(g.size() == 12);
  CHECK(cell_name(g.front()) == "up_beta1_seed0");
  CHECK(cell_name(g[3]) == "up_beta50_seed0");
  CHECK(cell_name(g.back()) == "cpc_beta50_seed2");
  CHECK(cell_name({safe_rl::Strategy::kCc, 0.5, 7}) == "cc_beta0.5_seed7");
}

TEST_CASE("series helpers") {
  SUBCASE("moving average of a constant is the constant") {
    const auto m = moving_average(std::vector<double>(100, -3.25), 40);
    for (double v : m) CHECK(v == -3.25);
  }
  SUBCASE("moving average against a direct window mean") {
    std::vector<double> x(60);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.3 * static_cast<double>(i));
    const auto m = moving_average(x, 7);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t lo = i >= 6 ? i - 6 : 0;
      const double direct =
          std::accumulate(x.begin() + lo, x.begin() + i + 1, 0.0) / static_cast<double>(i + 1 - lo);
      CHECK(m[i] == doctest::Approx(direct).epsilon(1e-12));
    }
  }
  SUBCASE("no collisions give a zero cumulative curve") {
    for (int v : cumulative(std::vector<bool>(50, false))) CHECK(v == 0);
  }
  SUBCASE("cumulative count") {
    CHECK(cumulative({true, false, true, true}) == std::vector<int>{1, 1, 2, 3});
  }
  SUBCASE("threshold never reached") {
    CHECK_FALSE(episodes_to_reach(std::vector<double>(30, -5.0), -4.0).has_value());
    CHECK(episodes_to_reach({-5.0, -4.5, -3.9, -3.0}, -4.0) == 3);
  }
}

TEST_CASE("summary equals recomputation from the rows") {
  std::vector<double> rewards;
  std::vector<bool> hits;
  for (int i = 0; i < 120; ++i) {
    rewards.push_back(-100.0 + i);
    hits.push_back(i % 7 == 0);
  }
  const auto rows = rows_from(rewards, hits);
  const Summary s = summarize("x", rows, 50, 40, -30.0, 1.5);
  CHECK(s.episodes == 120);
  CHECK(s.collisions == 18);
  // Last 50 rewards are -30 ... 19.
  CHECK(s.last_mean_reward == doctest::Approx(-5.5));
  CHECK(s.mean_steps == doctest::Approx(10.0 + 59.5));
  // Window mean ending at index i is -100 + i - 19.5 once the window is full.
  REQUIRE(s.episodes_to_target.has_value());
  CHECK(*s.episodes_to_target == 91);
  CHECK(summary_row(s).substr(summary_row(s).rfind(',') + 1) == "91");

  const Summary never = summarize("y", rows, 50, 40, 10.0, std::nan(""));
  CHECK(summary_row(never).find(",N/A,N/A") != std::string::npos);

  // A partial window that starts high does not count as reaching the target.
  rewards.assign(60, -10.0);
  std::fill(rewards.begin(), rewards.begin() + 10, 100.0);
  const Summary early = summarize("z", rows_from(rewards, std::vector<bool>(60)), 10, 40, 0.0, 0.0);
  CHECK(*early.episodes_to_target == 40);
}

TEST_CASE("training writes deterministic logs") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  ExperimentConfig c = tiny(a);
  c.strategies = {safe_rl::Strategy::kCpc, safe_rl::Strategy::kUp};
  c.checkpoint_every = 1;
  run(c, 1);
  const ExperimentConfig first = c;
  c.out_dir = b.string();
  run(c, 2);
  for (const char* cell : {"cpc_beta1_seed5", "up_beta1_seed5"}) {
    CAPTURE(cell);
    for (const char* f : {"episodes.csv", "updates.csv", "policy.ckpt", "curves.csv"})
      CHECK(slurp(a / cell / f) == slurp(b / cell / f));
    CHECK(fs::exists(a / cell / "timing.csv"));
    CHECK(fs::exists(a / cell / "policy_round1.ckpt"));
    const auto rows = read_episodes(a / cell / "episodes.csv");
    CHECK(rows.size() == 12);
  }
  CHECK(fs::exists(a / "summary.csv"));
  const ExperimentConfig back = load_config(a / "config.json");
  CHECK(to_json(back) == to_json(first));

  const auto summaries = report(a);
  REQUIRE(summaries.size() == 2);
  for (const auto& s : summaries) {
    const auto rows = read_episodes(a / s.cell / "episodes.csv");
    int hits = 0;
    for (const auto& r : rows) hits += r.collision;
    CHECK(s.collisions == hits);
    CHECK(s.collisions == rows.back().cum_collisions);
    CHECK(std::isfinite(s.wall_s));
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("a shorter budget logs a prefix of a longer one") {
  const fs::path a = scratch("prefix_a"), b = scratch("prefix_b");
  ExperimentConfig c = tiny(a);
  c.episodes = 7;
  run(c, 1);
  c.episodes = 15;
  c.out_dir = b.string();
  run(c, 1);
  const std::string shorter = slurp(a / "cpc_beta1_seed5" / "episodes.csv");
  const std::string longer = slurp(b / "cpc_beta1_seed5" / "episodes.csv");
  CHECK(longer.substr(0, shorter.size()) == shorter);
  CHECK(longer.size() > shorter.size());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("report errors") {
  const fs::path d = scratch("missing");
  CHECK_THROWS_AS(report(d), MissingData);
  fs::create_directories(d / "cell");
  CHECK_THROWS_AS(report(d), MissingData);
  {
    std::ofstream out(d / "cell" / "episodes.csv");
    out << episodes_header() << "\n0,1.5,oops,0,0,0,0\n";
  }
  CHECK_THROWS_AS(report(d), MissingData);
  {
    std::ofstream out(d / "cell" / "episodes.csv");
    out << episodes_header() << "\n0,1.5,10,1,1,0,0.25\n1,2.5,10,0,1,0,0\n";
  }
  const auto s = report(d);
  REQUIRE(s.size() == 1);
  CHECK(s[0].collisions == 1);
  CHECK(std::isnan(s[0].wall_s));
  CHECK(slurp(d / "cell" / "curves.csv") ==
        "episode,reward,reward_ma,cum_collisions\n0,1.5,1.5,1\n1,2.5,2,1\n");
  fs::remove_all(d);
}
