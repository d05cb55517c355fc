#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ehmac/config.hpp"
#include "ehmac/envsim.hpp"
#include "ehmac/io.hpp"
#include "ehmac/offline.hpp"
#include "ehmac/parallel.hpp"
#include "ehmac/rng.hpp"

namespace ehmac {

/// One supervised example: system state (E ‖ B ‖ G, length 3K, in that
/// order) mapped to the oracle power vector (length K).
struct DataPoint {
  Eigen::VectorXd features;
  Eigen::VectorXd label;
};

/// Per-feature affine normalization. Empty until computed; features are
/// normalized exactly once, so non-empty stats mean "already applied".
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  bool empty() const { return mean.size() == 0; }
};

struct DatasetProvenance {
  SystemConfig config;
  std::uint64_t seed = 0;  // master seed of the generation run
  int episodes = 0;
  int horizon = 0;
};

struct Dataset {
  std::vector<DataPoint> points;
  FeatureStats normalization_stats;
  DatasetProvenance provenance;

  int nodes() const { return provenance.config.k; }
  int feature_dim() const { return 3 * provenance.config.k; }
};

inline Eigen::VectorXd apply_normalization(const Eigen::VectorXd& features,
                                           const FeatureStats& stats) {
  if (stats.empty()) return features;
  if (features.size() != stats.mean.size())
    throw std::invalid_argument("normalization: feature length mismatch");
  return (features - stats.mean).cwiseQuotient(stats.scale);
}

/// Generates `num_episodes` realizations, solves each offline, and emits one
/// datapoint per slot. Battery features follow the physical recursion under
/// the oracle powers; with explicit spill in the solver this coincides with
/// the solver's own linear recursion up to barrier tolerance, and the oracle
/// powers stay strictly feasible against it.
///
/// Episodes are independent substreams of one master seed drawn from `rng`,
/// so any `jobs` level assembles the same dataset in episode order. A failed
/// solve is retried on one fresh realization, then aborts the run.
inline Dataset generate_training_set(const SystemConfig& cfg, int num_episodes, int n,
                                     Rng& rng, int jobs = 1) {
  if (num_episodes < 1)
    throw std::invalid_argument("generate_training_set: need num_episodes >= 1");
  if (n < 1) throw std::invalid_argument("generate_training_set: need N >= 1");
  cfg.validate();
  const std::uint64_t base = rng.next_u64();

  std::vector<std::vector<DataPoint>> per_episode(num_episodes);
  parallel_for(jobs, num_episodes, [&](int idx) {
    OfflineSolution sol;
    EpisodeRealization ep;
    for (int attempt = 0;; ++attempt) {
      Rng stream = attempt == 0 ? Rng::substream(base, "episode", idx)
                                : Rng::substream(base, "episode-retry", idx);
      ep = generate_episode(stream, cfg, n);
      try {
        sol = solve_offline(build_offline_program(ep, cfg));
        break;
      } catch (const std::exception& ex) {
        if (attempt >= 1)
          throw std::runtime_error("generate_training_set: episode " + std::to_string(idx) +
                                   " failed twice: " + ex.what());
      }
    }
    std::vector<DataPoint>& out = per_episode[idx];
    out.reserve(n);
    Eigen::VectorXd battery = Eigen::VectorXd::Constant(cfg.k, cfg.initial_battery);
    for (int slot = 0; slot < n; ++slot) {
      DataPoint pt;
      pt.features.resize(3 * cfg.k);
      pt.features.head(cfg.k) = ep.energies.row(slot).transpose();
      pt.features.segment(cfg.k, cfg.k) = battery;
      pt.features.tail(cfg.k) = ep.gains.row(slot).transpose();
      pt.label = sol.powers.row(slot).transpose();
      out.push_back(std::move(pt));
      for (int k = 0; k < cfg.k; ++k)
        battery(k) = battery_step(battery(k), ep.energies(slot, k), sol.powers(slot, k),
                                  cfg.battery_capacity);
    }
  });

  Dataset ds;
  ds.provenance.config = cfg;
  ds.provenance.seed = base;
  ds.provenance.episodes = num_episodes;
  ds.provenance.horizon = n;
  ds.points.reserve(static_cast<std::size_t>(num_episodes) * n);
  for (auto& ep_points : per_episode)
    for (auto& pt : ep_points) ds.points.push_back(std::move(pt));
  return ds;
}

/// Disjoint uniform split into (count - n_val, n_val) points.
inline std::pair<Dataset, Dataset> split_train_validation(const Dataset& dataset, int n_val,
                                                          Rng& rng) {
  const int count = static_cast<int>(dataset.points.size());
  if (n_val <= 0 || n_val >= count)
    throw std::invalid_argument("split_train_validation: need 0 < n_val < point count");
  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[i] = i;
  for (int i = count - 1; i > 0; --i)
    std::swap(order[i], order[static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1))]);

  Dataset train, val;
  train.provenance = dataset.provenance;
  val.provenance = dataset.provenance;
  train.points.reserve(count - n_val);
  val.points.reserve(n_val);
  for (int i = 0; i < count - n_val; ++i) train.points.push_back(dataset.points[order[i]]);
  for (int i = count - n_val; i < count; ++i) val.points.push_back(dataset.points[order[i]]);
  return {std::move(train), std::move(val)};
}

/// Zero-mean unit-scale normalization fitted on the training split and
/// applied to both splits. Labels are untouched. Apply exactly once.
inline FeatureStats normalize_features(Dataset& train, Dataset& validation) {
  if (train.points.empty()) throw std::invalid_argument("normalize_features: empty training set");
  if (!train.normalization_stats.empty() || !validation.normalization_stats.empty())
    throw std::invalid_argument("normalize_features: dataset already normalized");
  const int dim = static_cast<int>(train.points.front().features.size());
  FeatureStats stats;
  stats.mean = Eigen::VectorXd::Zero(dim);
  stats.scale = Eigen::VectorXd::Zero(dim);
  for (const auto& pt : train.points) stats.mean += pt.features;
  stats.mean /= static_cast<double>(train.points.size());
  for (const auto& pt : train.points)
    stats.scale += (pt.features - stats.mean).cwiseAbs2();
  stats.scale = (stats.scale / static_cast<double>(train.points.size())).cwiseSqrt();
  for (int i = 0; i < dim; ++i)
    if (stats.scale(i) < 1e-12) {
      std::cerr << "normalize_features: feature " << i << " has zero variance, scale kept at 1\n";
      stats.scale(i) = 1.0;
    }
  for (auto& pt : train.points) pt.features = apply_normalization(pt.features, stats);
  for (auto& pt : validation.points) pt.features = apply_normalization(pt.features, stats);
  train.normalization_stats = stats;
  validation.normalization_stats = stats;
  return stats;
}

namespace detail {

inline nlohmann::ordered_json config_to_json(const SystemConfig& cfg) {
  nlohmann::ordered_json j;
  j["k"] = cfg.k;
  j["b_max"] = cfg.battery_capacity;
  j["p_max"] = cfg.power_cap;
  j["harvest_mean"] = cfg.harvest_mean;
  j["harvest_var"] = cfg.harvest_var;
  j["b_init"] = cfg.initial_battery;
  j["seed"] = cfg.seed;
  return j;
}

inline SystemConfig config_from_json(const nlohmann::json& j) {
  SystemConfig cfg;
  cfg.k = j.at("k").get<int>();
  cfg.battery_capacity = j.at("b_max").get<double>();
  cfg.power_cap = j.at("p_max").get<double>();
  cfg.harvest_mean = j.at("harvest_mean").get<double>();
  cfg.harvest_var = j.at("harvest_var").get<double>();
  cfg.initial_battery = j.at("b_init").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return path.string() + ".meta.json";
}

}  // namespace detail

/// CSV with a `k=K,n=N` header line, then one row per point holding
/// e_1..e_K, b_1..b_K, g_1..g_K, p_1..p_K at 12 significant digits.
/// Provenance and normalization stats go to a JSON sidecar next to the CSV.
inline void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  const int k = dataset.nodes();
  std::ostringstream out;
  out << "k=" << k << ",n=" << dataset.provenance.horizon << "\n";
  for (const auto& pt : dataset.points) {
    if (pt.features.size() != 3 * k || pt.label.size() != k)
      throw std::invalid_argument("write_dataset: point width disagrees with provenance k");
    for (int i = 0; i < 3 * k; ++i) out << format_value(pt.features(i)) << ',';
    for (int i = 0; i < k; ++i) out << format_value(pt.label(i)) << (i + 1 < k ? ',' : '\n');
  }
  write_text_atomic(path, out.str());

  nlohmann::ordered_json meta;
  meta["config"] = detail::config_to_json(dataset.provenance.config);
  meta["seed"] = dataset.provenance.seed;
  meta["episodes"] = dataset.provenance.episodes;
  meta["horizon"] = dataset.provenance.horizon;
  meta["points"] = dataset.points.size();
  if (!dataset.normalization_stats.empty()) {
    meta["normalization"]["mean"] = std::vector<double>(
        dataset.normalization_stats.mean.data(),
        dataset.normalization_stats.mean.data() + dataset.normalization_stats.mean.size());
    meta["normalization"]["scale"] = std::vector<double>(
        dataset.normalization_stats.scale.data(),
        dataset.normalization_stats.scale.data() + dataset.normalization_stats.scale.size());
  }
  write_text_atomic(detail::sidecar_path(path), meta.dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("read_dataset: empty file");
  int k = 0, n = 0;
  if (std::sscanf(header.c_str(), "k=%d,n=%d", &k, &n) != 2 || k < 1 || n < 1)
    throw std::runtime_error("read_dataset: malformed header '" + header + "'");

  Dataset ds;
  ds.provenance.config.k = k;
  ds.provenance.horizon = n;
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    DataPoint pt;
    pt.features.resize(3 * k);
    pt.label.resize(k);
    std::istringstream row(line);
    std::string cell;
    for (int i = 0; i < 4 * k; ++i) {
      if (!std::getline(row, cell, ','))
        throw std::runtime_error("read_dataset: short row at line " + std::to_string(lineno));
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw std::runtime_error("read_dataset: bad number at line " + std::to_string(lineno));
      }
      if (used != cell.size())
        throw std::runtime_error("read_dataset: bad number at line " + std::to_string(lineno));
      if (i < 3 * k)
        pt.features(i) = v;
      else
        pt.label(i - 3 * k) = v;
    }
    if (std::getline(row, cell, ','))
      throw std::runtime_error("read_dataset: row width exceeds header k at line " +
                               std::to_string(lineno));
    ds.points.push_back(std::move(pt));
  }

  const auto meta_path = detail::sidecar_path(path);
  if (std::filesystem::exists(meta_path)) {
    const auto meta = nlohmann::json::parse(read_text_file(meta_path));
    ds.provenance.config = detail::config_from_json(meta.at("config"));
    ds.provenance.seed = meta.at("seed").get<std::uint64_t>();
    ds.provenance.episodes = meta.at("episodes").get<int>();
    ds.provenance.horizon = meta.at("horizon").get<int>();
    if (ds.provenance.config.k != k || ds.provenance.horizon != n)
      throw std::runtime_error("read_dataset: sidecar disagrees with CSV header");
    if (meta.contains("normalization")) {
      const auto mean = meta["normalization"].at("mean").get<std::vector<double>>();
      const auto scale = meta["normalization"].at("scale").get<std::vector<double>>();
      if (static_cast<int>(mean.size()) != 3 * k || static_cast<int>(scale.size()) != 3 * k)
        throw std::runtime_error("read_dataset: normalization stats width mismatch");
      ds.normalization_stats.mean =
          Eigen::Map<const Eigen::VectorXd>(mean.data(), mean.size());
      ds.normalization_stats.scale =
          Eigen::Map<const Eigen::VectorXd>(scale.data(), scale.size());
    }
  } else {
    ds.provenance.episodes = n > 0 ? static_cast<int>(ds.points.size()) / n : 0;
  }
  return ds;
}

}  // namespace ehmac
