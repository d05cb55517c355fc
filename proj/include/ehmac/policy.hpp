// Online transmit policies: the common interface, scripted baselines, the
// trained-network policy, and the discretized-MDP lookup adapter.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehmac/checkpoint.hpp"
#include "ehmac/envsim.hpp"
#include "ehmac/mdp.hpp"
#include "ehmac/mlp.hpp"

namespace ehmac {

/// Slot-by-slot decision rule. Implementations may return raw (infeasible)
/// powers; the rollout always clamps through clamp_feasible before the
/// battery update, so feasibility never depends on the policy being correct.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::vector<double> act(const SlotState& state) = 0;
  virtual std::string descriptor() const = 0;
};

/// Elementwise projection onto the feasible box [0, min(B_k, P_max)].
inline std::vector<double> clamp_feasible(const std::vector<double>& raw,
                                          const std::vector<double>& battery,
                                          double power_cap) {
  if (raw.size() != battery.size())
    throw std::invalid_argument("clamp_feasible: size mismatch");
  std::vector<double> out(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k)
    out[k] = std::min(std::max(raw[k], 0.0), std::min(battery[k], power_cap));
  return out;
}

class ZeroPolicy final : public Policy {
 public:
  std::vector<double> act(const SlotState& state) override {
    return std::vector<double>(state.battery.size(), 0.0);
  }
  std::string descriptor() const override { return "zero"; }
};

/// Spends everything available each slot.
class GreedyPolicy final : public Policy {
 public:
  explicit GreedyPolicy(double power_cap) : power_cap_(power_cap) {}
  std::vector<double> act(const SlotState& state) override {
    std::vector<double> p(state.battery.size());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::min(state.battery[k], power_cap_);
    return p;
  }
  std::string descriptor() const override { return "greedy"; }

 private:
  double power_cap_;
};

/// Trained network, deployed exactly as it was trained: features in
/// (harvests, batteries, gains) order, normalized with the stored stats.
/// act() returns the raw network output; the rollout clamp (or
/// dnn_policy_act) provides the feasibility projection.
class DnnPolicy final : public Policy {
 public:
  explicit DnnPolicy(Checkpoint checkpoint) : ck_(std::move(checkpoint)) {
    if (ck_.params.arch.inputs() % 3 != 0)
      throw std::invalid_argument("dnn policy: checkpoint input width is not 3K");
  }

  int nodes() const { return ck_.params.arch.inputs() / 3; }

  std::vector<double> act(const SlotState& state) override {
    const int k = static_cast<int>(state.battery.size());
    if (k != nodes())
      throw std::invalid_argument("dnn policy: checkpoint expects " +
                                  std::to_string(nodes()) + " nodes, state has " +
                                  std::to_string(k));
    Eigen::VectorXd features(3 * k);
    for (int i = 0; i < k; ++i) {
      features(i) = state.harvested[static_cast<std::size_t>(i)];
      features(k + i) = state.battery[static_cast<std::size_t>(i)];
      features(2 * k + i) = state.channel[static_cast<std::size_t>(i)];
    }
    if (!ck_.stats.empty())
      features = (features - ck_.stats.mean).cwiseQuotient(ck_.stats.scale);
    const Eigen::VectorXd out = forward(ck_.params, features);
    return std::vector<double>(out.data(), out.data() + out.size());
  }

  std::string descriptor() const override { return "dnn"; }

  const Checkpoint& checkpoint() const { return ck_; }

 private:
  Checkpoint ck_;
};

/// Full deployment pipeline for the trained network on one state.
inline std::vector<double> dnn_policy_act(const Checkpoint& checkpoint, const SlotState& state,
                                          double power_cap) {
  DnnPolicy policy(checkpoint);
  return clamp_feasible(policy.act(state), state.battery, power_cap);
}

/// Lookup-table baseline for the single-node case.
class MdpLookupPolicy final : public Policy {
 public:
  explicit MdpLookupPolicy(MdpPolicy policy) : policy_(std::move(policy)) {}

  std::vector<double> act(const SlotState& state) override {
    if (state.battery.size() != 1)
      throw std::invalid_argument("mdp policy: single-node states only");
    return {mdp_policy_act(policy_, state.battery[0], state.harvested[0], state.channel[0])};
  }

  std::string descriptor() const override { return "mdp"; }

 private:
  MdpPolicy policy_;
};

}  // namespace ehmac
