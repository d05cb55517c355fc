// Discretized-MDP baseline for the single-node case: quantized state space,
// average-reward relative value iteration, and a deployable lookup policy.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehmac/config.hpp"
#include "ehmac/io.hpp"

namespace ehmac {

namespace detail {

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Rational initial guess (Acklam's approximation), then two Newton
// corrections against the erfc-based CDF. Accurate to near machine epsilon
// away from the extreme tails, which is all the quantizers need.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("normal_quantile: p outside (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int it = 0; it < 2; ++it) {
    const double pdf = normal_pdf(x);
    if (pdf <= 0.0) break;
    x -= (normal_cdf(x) - p) / pdf;
  }
  return x;
}

}  // namespace detail

/// Equiprobable quantization of a continuous nonnegative distribution.
/// `boundaries` holds the interior bin edges (levels-1 of them, increasing);
/// `values` the conditional mean inside each bin.
struct QuantizedGrid {
  std::vector<double> boundaries;
  std::vector<double> values;
  std::vector<double> probabilities;

  int levels() const { return static_cast<int>(values.size()); }

  int bin(double x) const {
    return static_cast<int>(
        std::upper_bound(boundaries.begin(), boundaries.end(), x) - boundaries.begin());
  }

  void validate() const {
    if (values.empty()) throw std::invalid_argument("grid: no levels");
    if (probabilities.size() != values.size() || boundaries.size() + 1 != values.size())
      throw std::invalid_argument("grid: size mismatch");
    double total = 0.0;
    for (double p : probabilities) {
      if (!(p >= 0.0)) throw std::invalid_argument("grid: negative probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw std::invalid_argument("grid: probabilities must sum to 1");
    if (!std::is_sorted(boundaries.begin(), boundaries.end()))
      throw std::invalid_argument("grid: boundaries must be increasing");
  }
};

/// Unit-mean exponential channel gain cut into equiprobable bins. Bin edges
/// are -ln(1 - i/L); the representative is the conditional mean, which has
/// the closed form [(a+1)e^-a - (b+1)e^-b] / (e^-a - e^-b), collapsing to
/// a+1 for the open top bin.
inline QuantizedGrid quantize_channel(int levels = 8) {
  if (levels < 2) throw std::invalid_argument("quantize_channel: need at least 2 levels");
  QuantizedGrid grid;
  const double p = 1.0 / levels;
  double lower = 0.0;
  for (int i = 0; i < levels; ++i) {
    const bool top = i + 1 == levels;
    const double upper =
        top ? std::numeric_limits<double>::infinity()
            : -std::log1p(-static_cast<double>(i + 1) / levels);
    double rep;
    if (top) {
      rep = lower + 1.0;
    } else {
      // e^-edge = 1 - i/L exactly, so each bin mass is exactly 1/L.
      const double num = (lower + 1.0) * std::exp(-lower) - (upper + 1.0) * std::exp(-upper);
      rep = num / p;
    }
    grid.values.push_back(rep);
    grid.probabilities.push_back(p);
    if (!top) grid.boundaries.push_back(upper);
    lower = upper;
  }
  return grid;
}

/// Harvest distribution (Gaussian truncated at zero) cut into equiprobable
/// bins; representatives are conditional means of the truncated parent.
inline QuantizedGrid quantize_harvest(double mean, double variance, int levels = 8) {
  if (levels < 1) throw std::invalid_argument("quantize_harvest: need at least 1 level");
  if (!(variance > 0.0)) throw std::invalid_argument("quantize_harvest: variance must be > 0");
  const double sigma = std::sqrt(variance);
  const double alpha = detail::normal_cdf(-mean / sigma);  // parent mass below zero
  const double tail = 1.0 - alpha;
  if (!(tail > 1e-12))
    throw std::invalid_argument("quantize_harvest: distribution has no mass above zero");

  QuantizedGrid grid;
  const double p = 1.0 / levels;
  double lower = 0.0;
  for (int i = 0; i < levels; ++i) {
    const bool top = i + 1 == levels;
    const double upper =
        top ? std::numeric_limits<double>::infinity()
            : mean + sigma * detail::normal_quantile(alpha + tail * (i + 1) / levels);
    const double pdf_lo = detail::normal_pdf((lower - mean) / sigma);
    const double pdf_hi = top ? 0.0 : detail::normal_pdf((upper - mean) / sigma);
    // Bin mass under the parent is exactly tail/levels by construction.
    const double rep = mean + sigma * (pdf_lo - pdf_hi) / (tail * p);
    grid.values.push_back(rep);
    grid.probabilities.push_back(p);
    if (!top) grid.boundaries.push_back(upper);
    lower = upper;
  }
  return grid;
}

/// Tabular average-reward MDP over (battery, harvest, channel) levels.
/// Transitions factorize: the next battery level is a deterministic function
/// of (battery, harvest, action) through the storage recursion, and the next
/// harvest/channel levels are drawn i.i.d. from the grids.
struct DiscretizedMdp {
  double battery_step = 1.0;
  double power_step = 1.0;
  double power_cap = 0.0;
  double battery_capacity = 0.0;
  std::vector<double> battery_values;
  std::vector<double> action_values;
  QuantizedGrid harvest;
  QuantizedGrid channel;
  std::vector<int> max_action;   // per battery level, highest feasible action index
  Eigen::MatrixXi next_battery;  // row b*ne+e, column a
  Eigen::MatrixXd rewards;       // row a, column g

  int nb() const { return static_cast<int>(battery_values.size()); }
  int ne() const { return harvest.levels(); }
  int ng() const { return channel.levels(); }
  int na() const { return static_cast<int>(action_values.size()); }
  int num_states() const { return nb() * ne() * ng(); }
  int state_index(int b, int e, int g) const { return (b * ne() + e) * ng() + g; }
};

inline DiscretizedMdp build_mdp(const SystemConfig& config, const QuantizedGrid& harvest,
                                const QuantizedGrid& channel, double battery_step = 1.0,
                                double power_step = 1.0) {
  config.validate();
  if (config.k != 1)
    throw std::invalid_argument("mdp: the baseline covers the single-node case only");
  harvest.validate();
  channel.validate();
  if (!(battery_step > 0.0) || !(power_step > 0.0))
    throw std::invalid_argument("mdp: grid steps must be > 0");

  DiscretizedMdp m;
  m.battery_step = battery_step;
  m.power_step = power_step;
  m.power_cap = config.power_cap;
  m.battery_capacity = config.battery_capacity;
  m.harvest = harvest;
  m.channel = channel;

  const int nb = static_cast<int>(std::floor(config.battery_capacity / battery_step + 1e-9)) + 1;
  for (int i = 0; i < nb; ++i) m.battery_values.push_back(i * battery_step);
  const int na = static_cast<int>(std::floor(config.power_cap / power_step + 1e-9)) + 1;
  for (int i = 0; i < na; ++i) m.action_values.push_back(i * power_step);

  m.max_action.resize(nb);
  for (int b = 0; b < nb; ++b) {
    const double cap = std::min(m.battery_values[b], config.power_cap) + 1e-9;
    int top = 0;
    while (top + 1 < na && m.action_values[top + 1] <= cap) ++top;
    m.max_action[b] = top;  // action 0 is always feasible
  }

  const int ne = harvest.levels();
  m.next_battery.resize(nb * ne, na);
  m.next_battery.setConstant(-1);
  for (int b = 0; b < nb; ++b)
    for (int e = 0; e < ne; ++e)
      for (int a = 0; a <= m.max_action[b]; ++a) {
        const double drained = m.battery_values[b] + harvest.values[e] - m.action_values[a];
        const double clipped =
            std::min(std::max(drained, 0.0), config.battery_capacity);
        const int level = std::min(
            nb - 1, std::max(0, static_cast<int>(std::floor(clipped / battery_step + 0.5))));
        m.next_battery(b * ne + e, a) = level;
      }

  const int ng = channel.levels();
  m.rewards.resize(na, ng);
  for (int a = 0; a < na; ++a)
    for (int g = 0; g < ng; ++g)
      m.rewards(a, g) = std::log1p(m.action_values[a] * channel.values[g]);
  return m;
}

/// One row of the full transition kernel, materialized on demand. Only
/// used by diagnostics and tests; the solver works on the factorized form.
inline Eigen::VectorXd transition_row(const DiscretizedMdp& m, int state, int action) {
  const int ne = m.ne(), ng = m.ng();
  if (state < 0 || state >= m.num_states()) throw std::invalid_argument("mdp: bad state");
  const int b = state / (ne * ng);
  const int e = (state / ng) % ne;
  if (action < 0 || action > m.max_action[b])
    throw std::invalid_argument("mdp: infeasible action");
  const int bn = m.next_battery(b * ne + e, action);
  Eigen::VectorXd row = Eigen::VectorXd::Zero(m.num_states());
  for (int en = 0; en < ne; ++en)
    for (int gn = 0; gn < ng; ++gn)
      row(m.state_index(bn, en, gn)) += m.harvest.probabilities[en] * m.channel.probabilities[gn];
  return row;
}

/// Deployable lookup policy plus everything needed to bin continuous states.
struct MdpPolicy {
  std::vector<int> actions;  // per state index, as laid out by DiscretizedMdp
  double gain = 0.0;         // average reward per slot
  double battery_step = 1.0;
  double power_cap = 0.0;
  std::vector<double> action_values;
  QuantizedGrid harvest;
  QuantizedGrid channel;
  int battery_levels = 0;

  int state_index(int b, int e, int g) const {
    return (b * harvest.levels() + e) * channel.levels() + g;
  }
};

/// Average-reward relative value iteration on the factorized kernel. The
/// iterate is damped halfway toward the Bellman image so that periodic
/// chains (deterministic toys) cannot cycle; the fixed point is unchanged.
/// Converged when the span of (Th - h) drops below tol, at which point the
/// span midpoint brackets the optimal gain to within tol/2.
inline MdpPolicy relative_value_iteration(const DiscretizedMdp& m, double tol = 1e-8,
                                          int max_sweeps = 200000) {
  const int nb = m.nb(), ne = m.ne(), ng = m.ng();
  const int states = m.num_states();
  if (states == 0) throw std::invalid_argument("mdp: empty state space");
  for (int b = 0; b < nb; ++b)
    if (m.max_action[b] < 0) throw std::logic_error("mdp: state without feasible action");

  const int ref = m.state_index(nb - 1, ne / 2, ng / 2);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(states);
  Eigen::VectorXd th(states);
  Eigen::VectorXd hbar(nb);
  std::vector<int> greedy(states, 0);

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (int b = 0; b < nb; ++b) {
      double acc = 0.0;
      for (int e = 0; e < ne; ++e)
        for (int g = 0; g < ng; ++g)
          acc += m.harvest.probabilities[e] * m.channel.probabilities[g] *
                 h(m.state_index(b, e, g));
      hbar(b) = acc;
    }
    for (int b = 0; b < nb; ++b)
      for (int e = 0; e < ne; ++e)
        for (int g = 0; g < ng; ++g) {
          double best = -std::numeric_limits<double>::infinity();
          int best_a = 0;
          for (int a = 0; a <= m.max_action[b]; ++a) {
            const double v = m.rewards(a, g) + hbar(m.next_battery(b * ne + e, a));
            if (v > best) {  // strict: ties keep the lowest action
              best = v;
              best_a = a;
            }
          }
          const int s = m.state_index(b, e, g);
          th(s) = best;
          greedy[s] = best_a;
        }

    const Eigen::VectorXd diff = th - h;
    const double lo = diff.minCoeff(), hi = diff.maxCoeff();
    if (hi - lo < tol) {
      MdpPolicy policy;
      policy.actions = greedy;
      policy.gain = 0.5 * (lo + hi);
      policy.battery_step = m.battery_step;
      policy.power_cap = m.power_cap;
      policy.action_values = m.action_values;
      policy.harvest = m.harvest;
      policy.channel = m.channel;
      policy.battery_levels = nb;
      return policy;
    }
    h = 0.5 * (h + th);
    h.array() -= h(ref);
  }
  throw std::runtime_error("mdp: value iteration failed to converge in " +
                           std::to_string(max_sweeps) + " sweeps");
}

/// Continuous-state deployment: floor the battery to the grid (never
/// overstates stored energy), bin harvest and channel, look up the action,
/// then clamp to the instantaneous feasible range.
inline double mdp_policy_act(const MdpPolicy& policy, double battery, double harvested,
                             double channel_gain) {
  if (!(battery >= 0.0) || !(harvested >= 0.0) || !(channel_gain >= 0.0))
    throw std::invalid_argument("mdp_policy_act: state components must be >= 0");
  int b = static_cast<int>(std::floor(battery / policy.battery_step + 1e-9));
  b = std::min(std::max(b, 0), policy.battery_levels - 1);
  const int e = policy.harvest.bin(harvested);
  const int g = policy.channel.bin(channel_gain);
  const double raw = policy.action_values[static_cast<std::size_t>(
      policy.actions[static_cast<std::size_t>(policy.state_index(b, e, g))])];
  return std::min(raw, std::min(battery, policy.power_cap));
}

namespace detail {

inline nlohmann::ordered_json grid_to_json(const QuantizedGrid& grid) {
  nlohmann::ordered_json j;
  j["boundaries"] = grid.boundaries;
  j["values"] = grid.values;
  j["probabilities"] = grid.probabilities;
  return j;
}

inline QuantizedGrid grid_from_json(const nlohmann::json& j) {
  QuantizedGrid grid;
  grid.boundaries = j.at("boundaries").get<std::vector<double>>();
  grid.values = j.at("values").get<std::vector<double>>();
  grid.probabilities = j.at("probabilities").get<std::vector<double>>();
  grid.validate();
  return grid;
}

}  // namespace detail

inline void save_mdp_policy(const MdpPolicy& policy, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format"] = "ehmac-mdp-policy-v1";
  j["gain"] = policy.gain;
  j["battery_step"] = policy.battery_step;
  j["power_cap"] = policy.power_cap;
  j["battery_levels"] = policy.battery_levels;
  j["action_values"] = policy.action_values;
  j["harvest"] = detail::grid_to_json(policy.harvest);
  j["channel"] = detail::grid_to_json(policy.channel);
  j["actions"] = policy.actions;
  write_text_atomic(path, j.dump(2) + "\n");
}

inline MdpPolicy load_mdp_policy(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& err) {
    throw std::runtime_error("mdp policy " + path.string() + ": " + err.what());
  }
  if (j.value("format", "") != "ehmac-mdp-policy-v1")
    throw std::runtime_error("mdp policy " + path.string() + ": unknown format");
  MdpPolicy policy;
  policy.gain = j.at("gain").get<double>();
  policy.battery_step = j.at("battery_step").get<double>();
  policy.power_cap = j.at("power_cap").get<double>();
  policy.battery_levels = j.at("battery_levels").get<int>();
  policy.action_values = j.at("action_values").get<std::vector<double>>();
  policy.harvest = detail::grid_from_json(j.at("harvest"));
  policy.channel = detail::grid_from_json(j.at("channel"));
  policy.actions = j.at("actions").get<std::vector<int>>();
  const std::size_t expect = static_cast<std::size_t>(policy.battery_levels) *
                             policy.harvest.levels() * policy.channel.levels();
  if (policy.actions.size() != expect)
    throw std::runtime_error("mdp policy " + path.string() + ": action table size mismatch");
  for (int a : policy.actions)
    if (a < 0 || a >= static_cast<int>(policy.action_values.size()))
      throw std::runtime_error("mdp policy " + path.string() + ": action index out of range");
  return policy;
}

}  // namespace ehmac
