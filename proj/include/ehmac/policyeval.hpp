// Rollout engine: runs policies slot by slot under the storage dynamics and
// scores them against the offline benchmark computed on the same realization.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehmac/config.hpp"
#include "ehmac/envsim.hpp"
#include "ehmac/io.hpp"
#include "ehmac/offline.hpp"
#include "ehmac/policy.hpp"

namespace ehmac {

struct PolicyReport {
  std::string policy;
  long long slots = 0;
  double policy_rps = 0.0;   // nats per slot
  double offline_rps = 0.0;  // benchmark on the same realization
  double ratio_percent = 0.0;
  SystemConfig config;
  std::uint64_t seed = 0;
};

namespace detail {

/// Terminal battery to carry across a block boundary: the storage recursion
/// rolled under the solved powers, which keeps every unit the capacity allows.
/// The solver's own terminal split is a tie face, so this changes no objective,
/// it only refuses to discard energy the next block could still use.
inline Eigen::VectorXd carry_battery(const OfflineProgram& prog, const OfflineSolution& sol) {
  Eigen::VectorXd carried =
      stored_battery_trajectory(prog, sol.powers).row(prog.horizon).transpose();
  for (int k = 0; k < carried.size(); ++k)
    if (carried(k) < 1e-9) carried(k) = 0.0;
  return carried;
}

}  // namespace detail

/// Offline benchmark over one explicit realization: consecutive blocks of
/// `block_len` slots, each solved to optimality with the previous block's
/// terminal battery carried forward. The chain makes the number independent
/// of any policy under evaluation.
inline double offline_benchmark(const EpisodeRealization& stream, const SystemConfig& config,
                                int block_len = 20) {
  config.validate();
  const int total = stream.horizon();
  if (block_len < 1 || total % block_len != 0)
    throw std::invalid_argument("offline_benchmark: stream length must be a multiple of the block length");
  SystemConfig block_cfg = config;
  double objective = 0.0;
  Eigen::VectorXd carried;
  for (int begin = 0; begin < total; begin += block_len) {
    EpisodeRealization block;
    block.energies = stream.energies.middleRows(begin, block_len);
    block.gains = stream.gains.middleRows(begin, block_len);
    OfflineProgram prog = build_offline_program(block, block_cfg);
    if (begin > 0) prog.initial_battery = carried;
    const OfflineSolution sol = solve_offline(prog);
    objective += sol.objective;
    carried = detail::carry_battery(prog, sol);
  }
  return objective / total;
}

namespace detail {

struct RolloutAccumulator {
  double policy_nats = 0.0;
  double offline_nats = 0.0;
};

}  // namespace detail

/// Evaluates several policies on one shared realization stream. The stream
/// is produced block by block from substreams of `rng`, so the realization
/// depends only on the seed, not on the policies or their count. Each
/// policy's raw action is clamped onto the feasible box before the battery
/// update; `strict` instead rejects raw infeasibility as a policy bug.
inline std::vector<PolicyReport> evaluate_policies(
    const std::vector<Policy*>& policies, const SystemConfig& config, long long num_slots,
    Rng& rng, int block_len = 20, bool strict = false) {
  config.validate();
  if (policies.empty()) throw std::invalid_argument("evaluate: no policies");
  if (num_slots < 1 || num_slots % block_len != 0)
    throw std::invalid_argument("evaluate: slot count must be a positive multiple of the block length");
  const std::uint64_t base = rng.next_u64();
  const long long blocks = num_slots / block_len;
  const int k = config.k;

  std::vector<std::vector<double>> batteries(
      policies.size(), std::vector<double>(static_cast<std::size_t>(k), config.initial_battery));
  std::vector<double> nats(policies.size(), 0.0);
  double offline_nats = 0.0;
  Eigen::VectorXd offline_carry;

  for (long long blk = 0; blk < blocks; ++blk) {
    Rng block_rng = Rng::substream(base, "eval-block", static_cast<std::uint64_t>(blk));
    const EpisodeRealization episode = generate_episode(block_rng, config, block_len);

    OfflineProgram prog = build_offline_program(episode, config);
    if (blk > 0) prog.initial_battery = offline_carry;
    const OfflineSolution sol = solve_offline(prog);
    offline_nats += sol.objective;
    offline_carry = detail::carry_battery(prog, sol);

    for (std::size_t pi = 0; pi < policies.size(); ++pi) {
      for (int n = 0; n < block_len; ++n) {
        SlotState state;
        state.harvested.resize(static_cast<std::size_t>(k));
        state.channel.resize(static_cast<std::size_t>(k));
        for (int node = 0; node < k; ++node) {
          state.harvested[static_cast<std::size_t>(node)] = episode.energies(n, node);
          state.channel[static_cast<std::size_t>(node)] = episode.gains(n, node);
        }
        state.battery = batteries[pi];
        const std::vector<double> raw = policies[pi]->act(state);
        if (static_cast<int>(raw.size()) != k)
          throw std::logic_error("evaluate: policy emitted wrong width");
        const std::vector<double> p = clamp_feasible(raw, state.battery, config.power_cap);
        if (strict)
          for (int node = 0; node < k; ++node)
            if (std::abs(raw[static_cast<std::size_t>(node)] -
                         p[static_cast<std::size_t>(node)]) > 1e-9)
              throw std::runtime_error("evaluate: policy " + policies[pi]->descriptor() +
                                       " emitted an infeasible power in strict mode");
        nats[pi] += slot_rate(p, state.channel);
        for (int node = 0; node < k; ++node)
          batteries[pi][static_cast<std::size_t>(node)] =
              battery_step(state.battery[static_cast<std::size_t>(node)],
                           state.harvested[static_cast<std::size_t>(node)],
                           p[static_cast<std::size_t>(node)], config.battery_capacity);
      }
    }
  }

  std::vector<PolicyReport> reports;
  for (std::size_t pi = 0; pi < policies.size(); ++pi) {
    PolicyReport r;
    r.policy = policies[pi]->descriptor();
    r.slots = num_slots;
    r.policy_rps = nats[pi] / static_cast<double>(num_slots);
    r.offline_rps = offline_nats / static_cast<double>(num_slots);
    r.ratio_percent = r.offline_rps > 0.0
                          ? 100.0 * r.policy_rps / r.offline_rps
                          : std::numeric_limits<double>::quiet_NaN();
    r.config = config;
    r.seed = base;
    reports.push_back(std::move(r));
  }
  return reports;
}

inline PolicyReport evaluate_policy(Policy& policy, const SystemConfig& config,
                                    long long num_slots, Rng& rng, int block_len = 20,
                                    bool strict = false) {
  std::vector<Policy*> one{&policy};
  return evaluate_policies(one, config, num_slots, rng, block_len, strict).front();
}

/// Sweep table in the shape of the result tables: one row per sweep point,
/// columns (sweep value, offline RPS, policy RPS, percentage).
inline void generate_report(const std::vector<std::pair<double, PolicyReport>>& rows,
                            const std::string& sweep_name,
                            const std::filesystem::path& path) {
  std::string csv = sweep_name + ",offline_rps,policy_rps,percentage\n";
  for (const auto& [sweep, report] : rows) {
    csv += format_value(sweep) + "," + format_value(report.offline_rps) + "," +
           format_value(report.policy_rps) + "," + format_value(report.ratio_percent) + "\n";
  }
  write_text_atomic(path, csv);
}

}  // namespace ehmac
