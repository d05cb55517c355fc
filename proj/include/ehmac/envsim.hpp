#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ehmac/config.hpp"
#include "ehmac/rng.hpp"

namespace ehmac {

/// Per-slot system state: current harvests, start-of-slot batteries and
/// channel power gains for all K nodes.
struct SlotState {
  std::vector<double> harvested;
  std::vector<double> battery;
  std::vector<double> channel;
};

/// N-slot realization of the harvesting and fading processes.
/// Row n holds slot n for all K nodes.
struct EpisodeRealization {
  Eigen::MatrixXd energies;  // N x K
  Eigen::MatrixXd gains;     // N x K

  int horizon() const { return static_cast<int>(energies.rows()); }
  int nodes() const { return static_cast<int>(energies.cols()); }
};

/// Channel power gains under unit-mean Rayleigh fading: |h|^2 is
/// exponential with mean 1.
inline std::vector<double> sample_channel_gains(Rng& rng, int k) {
  if (k < 1) throw std::invalid_argument("sample_channel_gains: k must be >= 1");
  std::vector<double> g(static_cast<std::size_t>(k));
  for (auto& v : g) v = rng.exponential();
  return g;
}

/// One nonnegative truncated-Gaussian draw: parent N(m, v), redrawn until >= 0.
inline double sample_harvest_one(Rng& rng, double m, double v) {
  const double sigma = std::sqrt(v);
  double e;
  do {
    e = m + sigma * rng.gaussian();
  } while (e < 0.0);
  return e;
}

/// K independent harvest draws.
inline std::vector<double> sample_harvest(Rng& rng, double m, double v, int k) {
  if (!(v > 0.0)) throw std::invalid_argument("sample_harvest: variance must be > 0");
  std::vector<double> e(static_cast<std::size_t>(k));
  for (auto& x : e) x = sample_harvest_one(rng, m, v);
  return e;
}

/// Battery recursion B' = min([B + e - p]^+, B_max). The harvest of slot n
/// lands after p_n is drawn, so p_n is limited by the start-of-slot level.
/// Rejects infeasible actions outright: they indicate a policy bug, not a
/// recoverable state.
inline double battery_step(double b, double e, double p, double b_max) {
  if (p < 0.0) throw std::invalid_argument("battery_step: negative transmit energy");
  if (p > b) throw std::invalid_argument("battery_step: transmit energy exceeds battery");
  const double next = b + e - p;
  return std::min(next < 0.0 ? 0.0 : next, b_max);
}

/// Sum-rate upper bound of the MAC in one slot: ln(1 + sum_k p_k g_k), nats.
inline double slot_rate(const std::vector<double>& p, const std::vector<double>& g) {
  if (p.size() != g.size()) throw std::invalid_argument("slot_rate: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * g[i];
  return std::log1p(s);
}

/// Draws an N-slot realization. Slot order is fixed (harvests then gains,
/// slot by slot) so a given rng stream always yields the same episode.
inline EpisodeRealization generate_episode(Rng& rng, const SystemConfig& cfg, int n) {
  if (n < 1) throw std::invalid_argument("generate_episode: horizon must be >= 1");
  EpisodeRealization ep;
  ep.energies.resize(n, cfg.k);
  ep.gains.resize(n, cfg.k);
  for (int row = 0; row < n; ++row) {
    for (int k = 0; k < cfg.k; ++k)
      ep.energies(row, k) = sample_harvest_one(rng, cfg.harvest_mean, cfg.harvest_var);
    for (int k = 0; k < cfg.k; ++k) ep.gains(row, k) = rng.exponential();
  }
  return ep;
}

}  // namespace ehmac
