#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "ehmac/mdp.hpp"

using Catch::Approx;
using namespace ehmac;

namespace {

// Simpson's rule for the conditional-mean integrals the quantizers claim.
double simpson(double a, double b, int intervals, const std::function<double(double)>& f) {
  const double h = (b - a) / intervals;
  double acc = f(a) + f(b);
  for (int i = 1; i < intervals; ++i) acc += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

// Average reward of a fixed deterministic policy, from the linear system
// (I - P) h + gain = r pinned by h(0) = 0. Valid for unichain policies.
double policy_gain(const DiscretizedMdp& m, const std::vector<int>& actions) {
  const int states = m.num_states();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(states, states);
  Eigen::VectorXd r(states);
  for (int b = 0; b < m.nb(); ++b)
    for (int e = 0; e < m.ne(); ++e)
      for (int g = 0; g < m.ng(); ++g) {
        const int s = m.state_index(b, e, g);
        p.row(s) = transition_row(m, s, actions[static_cast<std::size_t>(s)]).transpose();
        r(s) = m.rewards(actions[static_cast<std::size_t>(s)], g);
      }
  Eigen::MatrixXd lhs(states, states);
  lhs.col(0).setOnes();
  const Eigen::MatrixXd imp = Eigen::MatrixXd::Identity(states, states) - p;
  lhs.rightCols(states - 1) = imp.rightCols(states - 1);
  const Eigen::VectorXd x = lhs.colPivHouseholderQr().solve(r);
  return x(0);
}

// Best gain over every deterministic policy, by exhaustive enumeration.
double enumerate_best_gain(const DiscretizedMdp& m) {
  const int states = m.num_states();
  std::vector<int> choice(states, 0);
  std::vector<int> limit(states);
  for (int b = 0; b < m.nb(); ++b)
    for (int e = 0; e < m.ne(); ++e)
      for (int g = 0; g < m.ng(); ++g)
        limit[static_cast<std::size_t>(m.state_index(b, e, g))] = m.max_action[b];
  double best = -std::numeric_limits<double>::infinity();
  while (true) {
    best = std::max(best, policy_gain(m, choice));
    int pos = 0;
    while (pos < states && choice[pos] == limit[pos]) choice[pos++] = 0;
    if (pos == states) break;
    ++choice[pos];
  }
  return best;
}

DiscretizedMdp toy_mdp() {
  DiscretizedMdp m;
  m.battery_step = 1.0;
  m.power_step = 1.0;
  m.power_cap = 1.0;
  m.battery_capacity = 1.0;
  m.battery_values = {0.0, 1.0};
  m.action_values = {0.0, 1.0};
  m.harvest = QuantizedGrid{{}, {0.0}, {1.0}};
  m.channel = QuantizedGrid{{}, {1.0}, {1.0}};
  m.max_action = {1, 1};
  m.next_battery.resize(2, 2);
  m.next_battery << 0, 1, 0, 0;
  m.rewards.resize(2, 1);
  m.rewards << 0.3, 1.0;
  return m;
}

}  // namespace

TEST_CASE("channel quantizer splits the exponential into equiprobable bins") {
  const QuantizedGrid grid = quantize_channel(8);
  REQUIRE(grid.levels() == 8);
  double total = 0.0;
  for (double p : grid.probabilities) {
    CHECK(p == Approx(0.125));
    total += p;
  }
  CHECK(total == Approx(1.0).margin(1e-12));
  for (int i = 1; i < 8; ++i) CHECK(grid.values[i] > grid.values[i - 1]);
  // Conditional-mean representatives integrate back to the full mean of 1.
  double mean = 0.0;
  for (int i = 0; i < 8; ++i) mean += grid.probabilities[i] * grid.values[i];
  CHECK(mean == Approx(1.0).margin(1e-12));
}

TEST_CASE("two-level channel quantizer matches the integral oracle") {
  const QuantizedGrid grid = quantize_channel(2);
  REQUIRE(grid.boundaries.size() == 1);
  CHECK(grid.boundaries[0] == Approx(std::log(2.0)).margin(1e-15));
  const double numeric =
      simpson(0.0, std::log(2.0), 2000, [](double x) { return x * std::exp(-x); }) / 0.5;
  CHECK(grid.values[0] == Approx(numeric).margin(1e-10));
  CHECK(grid.values[0] == Approx(1.0 - std::log(2.0)).margin(1e-12));
  CHECK(grid.values[1] == Approx(1.0 + std::log(2.0)).margin(1e-12));
  CHECK_THROWS_AS(quantize_channel(1), std::invalid_argument);
}

TEST_CASE("harvest quantizer hits the truncated-Gaussian quantiles") {
  const double m = 2.0, v = 4.0, sigma = 2.0;
  const QuantizedGrid grid = quantize_harvest(m, v, 8);
  REQUIRE(grid.levels() == 8);
  const double alpha = 0.5 * std::erfc(m / sigma / std::sqrt(2.0));
  const double tail = 1.0 - alpha;
  for (int i = 0; i < 7; ++i) {
    const double x = grid.boundaries[static_cast<std::size_t>(i)];
    const double cdf = (0.5 * std::erfc(-(x - m) / sigma / std::sqrt(2.0)) - alpha) / tail;
    CHECK(cdf == Approx((i + 1) / 8.0).margin(1e-9));
  }
  for (int i = 1; i < 8; ++i) CHECK(grid.values[i] > grid.values[i - 1]);
  // Law of total expectation: representative mean equals the truncated mean.
  const double phi = std::exp(-0.5 * (m / sigma) * (m / sigma)) / std::sqrt(2.0 * M_PI);
  const double truncated_mean = m + sigma * phi / tail;
  double mean = 0.0;
  for (int i = 0; i < 8; ++i) mean += grid.probabilities[i] * grid.values[i];
  CHECK(mean == Approx(truncated_mean).margin(1e-9));
  CHECK_THROWS_AS(quantize_harvest(1.0, 0.0, 8), std::invalid_argument);
}

TEST_CASE("discretized transition model is a stochastic matrix") {
  SystemConfig cfg;  // defaults: B_max 20, P_max 15, m 10, v 1
  const DiscretizedMdp m = build_mdp(cfg, quantize_harvest(10.0, 1.0), quantize_channel());
  REQUIRE(m.nb() == 21);
  REQUIRE(m.na() == 16);
  REQUIRE(m.num_states() == 21 * 8 * 8);
  for (int b = 0; b < m.nb(); ++b) CHECK(m.max_action[b] == std::min(b, 15));
  CHECK(m.rewards.minCoeff() >= 0.0);
  for (int s = 0; s < m.num_states(); s += 97)
    for (int a = 0; a <= m.max_action[s / (8 * 8)]; ++a) {
      const Eigen::VectorXd row = transition_row(m, s, a);
      CHECK(row.sum() == Approx(1.0).margin(1e-12));
      CHECK(row.minCoeff() >= 0.0);
    }
  CHECK(m.next_battery.maxCoeff() < m.nb());
  CHECK_THROWS_AS(transition_row(m, 0, 1), std::invalid_argument);  // empty battery
  SystemConfig multi = cfg;
  multi.k = 2;
  CHECK_THROWS_AS(build_mdp(multi, quantize_harvest(10.0, 1.0), quantize_channel()),
                  std::invalid_argument);
}

TEST_CASE("zero-harvest chain earns nothing") {
  SystemConfig cfg;
  cfg.battery_capacity = 5.0;
  cfg.power_cap = 5.0;
  cfg.initial_battery = 0.0;
  const QuantizedGrid dry{{}, {0.0}, {1.0}};
  const DiscretizedMdp m = build_mdp(cfg, dry, quantize_channel(2));
  const MdpPolicy policy = relative_value_iteration(m, 1e-10);
  CHECK(policy.gain == Approx(0.0).margin(1e-9));
}

TEST_CASE("single recurrent state yields its own reward as gain") {
  SystemConfig cfg;
  cfg.battery_capacity = 1.0;
  cfg.power_cap = 1.0;
  cfg.initial_battery = 1.0;
  const QuantizedGrid refill{{}, {5.0}, {1.0}};  // battery is always full again
  const QuantizedGrid flat{{}, {2.0}, {1.0}};
  const DiscretizedMdp m = build_mdp(cfg, refill, flat);
  const MdpPolicy policy = relative_value_iteration(m);
  CHECK(policy.gain == Approx(std::log(3.0)).margin(1e-8));
}

TEST_CASE("value iteration matches exhaustive enumeration on a toy") {
  const DiscretizedMdp m = toy_mdp();
  const MdpPolicy policy = relative_value_iteration(m, 1e-10);
  CHECK(policy.gain == Approx(1.0).margin(1e-6));
  const double best = enumerate_best_gain(m);
  CHECK(policy.gain == Approx(best).margin(1e-6));
  CHECK(policy.actions[0] == 1);
  CHECK(policy.actions[1] == 1);
  // All four deterministic policies, for the record: absorb-at-0 pays 0.3,
  // the mixed cycle 0.65, the full cycle 1.0.
  CHECK(policy_gain(m, {0, 0}) == Approx(0.3).margin(1e-9));
  CHECK(policy_gain(m, {1, 0}) == Approx(0.65).margin(1e-9));
}

TEST_CASE("value iteration matches enumeration on a miniature system") {
  SystemConfig cfg;
  cfg.battery_capacity = 2.0;
  cfg.power_cap = 1.0;
  cfg.initial_battery = 1.0;
  const DiscretizedMdp m =
      build_mdp(cfg, quantize_harvest(1.5, 1.0, 2), quantize_channel(2));
  REQUIRE(m.num_states() == 12);
  const MdpPolicy policy = relative_value_iteration(m, 1e-10);
  const double best = enumerate_best_gain(m);
  CHECK(policy.gain == Approx(best).margin(1e-6));
  CHECK(policy_gain(m, policy.actions) == Approx(best).margin(1e-6));
}

TEST_CASE("gain shifts exactly with a reward offset") {
  DiscretizedMdp m = toy_mdp();
  const double base = relative_value_iteration(m, 1e-10).gain;
  m.rewards.array() += 0.7;
  CHECK(relative_value_iteration(m, 1e-10).gain == Approx(base + 0.7).margin(1e-8));
}

TEST_CASE("larger battery capacity never lowers the gain") {
  SystemConfig small;
  small.battery_capacity = 10.0;
  small.power_cap = 10.0;
  small.initial_battery = 5.0;
  SystemConfig large;
  large.battery_capacity = 20.0;
  const QuantizedGrid harvest = quantize_harvest(10.0, 3.0);
  const QuantizedGrid channel = quantize_channel();
  const double g_small = relative_value_iteration(build_mdp(small, harvest, channel)).gain;
  const double g_large = relative_value_iteration(build_mdp(large, harvest, channel)).gain;
  CHECK(g_large >= g_small - 1e-9);
  CHECK(g_small > 0.0);
}

TEST_CASE("policy deployment maps continuous states onto the grid") {
  SystemConfig cfg;
  const DiscretizedMdp m = build_mdp(cfg, quantize_harvest(10.0, 1.0), quantize_channel());
  const MdpPolicy policy = relative_value_iteration(m);

  SECTION("empty battery can only stay silent") {
    CHECK(mdp_policy_act(policy, 0.0, 10.0, 1.0) == 0.0);
  }
  SECTION("on-grid states read the table verbatim") {
    const int e = policy.harvest.bin(10.0);
    const int g = policy.channel.bin(1.0);
    const double table =
        policy.action_values[static_cast<std::size_t>(
            policy.actions[static_cast<std::size_t>(policy.state_index(7, e, g))])];
    CHECK(mdp_policy_act(policy, 7.0, 10.0, 1.0) == Approx(table));
    CHECK(mdp_policy_act(policy, 7.4, 10.0, 1.0) == Approx(table));  // floors to level 7
  }
  SECTION("battery above the grid clamps to the top level") {
    CHECK(mdp_policy_act(policy, 50.0, 10.0, 1.0) ==
          mdp_policy_act(policy, 20.0, 10.0, 1.0));
  }
  SECTION("lookup never spends more than the continuous battery holds") {
    MdpPolicy greedy;
    greedy.actions = {1, 1};
    greedy.battery_step = 1.0;
    greedy.power_cap = 1.0;
    greedy.action_values = {0.0, 1.0};
    greedy.harvest = QuantizedGrid{{}, {0.0}, {1.0}};
    greedy.channel = QuantizedGrid{{}, {1.0}, {1.0}};
    greedy.battery_levels = 2;
    CHECK(mdp_policy_act(greedy, 0.5, 0.0, 1.0) == Approx(0.5));
  }
  SECTION("negative state components are rejected") {
    CHECK_THROWS_AS(mdp_policy_act(policy, -1.0, 10.0, 1.0), std::invalid_argument);
  }
}

TEST_CASE("policy files round-trip") {
  SystemConfig cfg;
  const DiscretizedMdp m = build_mdp(cfg, quantize_harvest(10.0, 1.0), quantize_channel());
  const MdpPolicy policy = relative_value_iteration(m);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "ehmac_test_policy.json";
  save_mdp_policy(policy, path);
  const MdpPolicy loaded = load_mdp_policy(path);
  CHECK(loaded.gain == policy.gain);
  CHECK(loaded.actions == policy.actions);
  CHECK(loaded.action_values == policy.action_values);
  CHECK(loaded.harvest.boundaries == policy.harvest.boundaries);
  for (double b : {0.0, 3.3, 7.0, 14.9, 20.0})
    CHECK(mdp_policy_act(loaded, b, 9.7, 1.4) == mdp_policy_act(policy, b, 9.7, 1.4));

  auto j = nlohmann::json::parse(read_text_file(path));
  j["format"] = "other";
  const auto bad = dir / "ehmac_test_policy_bad.json";
  write_text_atomic(bad, j.dump());
  CHECK_THROWS_AS(load_mdp_policy(bad), std::runtime_error);
  j["format"] = "ehmac-mdp-policy-v1";
  j["actions"] = std::vector<int>{0, 1};
  write_text_atomic(bad, j.dump());
  CHECK_THROWS_AS(load_mdp_policy(bad), std::runtime_error);
  std::filesystem::remove(bad);
  std::filesystem::remove(path);
}
