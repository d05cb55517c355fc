#pragma once

#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ehmac/datagen.hpp"
#include "ehmac/io.hpp"
#include "ehmac/mlp.hpp"

namespace ehmac {

/// Canonical provenance fingerprint of the dataset a model was trained on.
inline std::string dataset_provenance_hash(const Dataset& ds) {
  const auto& p = ds.provenance;
  std::ostringstream s;
  s << "k=" << p.config.k << ";b_max=" << format_value(p.config.battery_capacity)
    << ";p_max=" << format_value(p.config.power_cap)
    << ";harvest_mean=" << format_value(p.config.harvest_mean)
    << ";harvest_var=" << format_value(p.config.harvest_var)
    << ";b_init=" << format_value(p.config.initial_battery) << ";cfg_seed=" << p.config.seed
    << ";seed=" << p.seed << ";episodes=" << p.episodes << ";horizon=" << p.horizon
    << ";points=" << ds.points.size();
  const std::string text = s.str();
  return hash_hex(fnv1a64_bytes(text.data(), text.size()));
}

struct Checkpoint {
  MlpParameters params;
  FeatureStats stats;
  TrainConfig train_config;
  std::string provenance_hash;
};

/// Single-file JSON checkpoint: architecture and stats in the header, weight
/// payload as decimal arrays in layer order, row-major. Doubles are written
/// with shortest-round-trip precision, so reloads are bit-exact.
inline void save_checkpoint(const MlpParameters& params, const FeatureStats& stats,
                            const std::filesystem::path& path,
                            const TrainConfig& tc = TrainConfig{},
                            const std::string& provenance_hash = "") {
  detail::check_shapes(params);
  nlohmann::ordered_json j;
  j["format"] = "ehmac-checkpoint-v1";
  j["architecture"]["sizes"] = params.arch.sizes;
  j["architecture"]["hidden_count"] = params.arch.hidden_count;
  j["architecture"]["leaky_slope"] = params.arch.leaky_slope;
  if (!stats.empty()) {
    j["normalization"]["mean"] =
        std::vector<double>(stats.mean.data(), stats.mean.data() + stats.mean.size());
    j["normalization"]["scale"] =
        std::vector<double>(stats.scale.data(), stats.scale.data() + stats.scale.size());
  }
  j["train_config"] = {{"learning_rate", tc.learning_rate}, {"batch_size", tc.batch_size},
                       {"epochs", tc.epochs},               {"optimizer", tc.optimizer},
                       {"patience", tc.patience},           {"grad_clip", tc.grad_clip},
                       {"seed", tc.seed}};
  j["dataset_provenance_hash"] = provenance_hash;
  j["layers"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const auto& w = params.weights[l];
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(w.size()));
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    nlohmann::ordered_json layer;
    layer["weights"] = std::move(flat);
    layer["bias"] = std::vector<double>(params.biases[l].data(),
                                        params.biases[l].data() + params.biases[l].size());
    j["layers"].push_back(std::move(layer));
  }
  write_text_atomic(path, j.dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  // nlohmann parse errors carry the byte position, which covers truncation.
  const nlohmann::json j = nlohmann::json::parse(read_text_file(path));
  if (j.value("format", "") != std::string("ehmac-checkpoint-v1"))
    throw std::runtime_error("checkpoint: unrecognized format field");

  Checkpoint ck;
  ck.params.arch.sizes = j.at("architecture").at("sizes").get<std::vector<int>>();
  ck.params.arch.hidden_count = j.at("architecture").at("hidden_count").get<int>();
  ck.params.arch.leaky_slope = j.at("architecture").at("leaky_slope").get<double>();
  if (ck.params.arch.layers() != ck.params.arch.hidden_count + 2)
    throw std::runtime_error("checkpoint: architecture sizes disagree with hidden count");

  if (j.contains("normalization")) {
    const auto mean = j["normalization"].at("mean").get<std::vector<double>>();
    const auto scale = j["normalization"].at("scale").get<std::vector<double>>();
    if (mean.size() != scale.size() ||
        static_cast<int>(mean.size()) != ck.params.arch.inputs())
      throw std::runtime_error("checkpoint: normalization stats width mismatch");
    ck.stats.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), mean.size());
    ck.stats.scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), scale.size());
  }

  if (j.contains("train_config")) {
    const auto& t = j["train_config"];
    ck.train_config.learning_rate = t.value("learning_rate", ck.train_config.learning_rate);
    ck.train_config.batch_size = t.value("batch_size", ck.train_config.batch_size);
    ck.train_config.epochs = t.value("epochs", ck.train_config.epochs);
    ck.train_config.optimizer = t.value("optimizer", ck.train_config.optimizer);
    ck.train_config.patience = t.value("patience", ck.train_config.patience);
    ck.train_config.grad_clip = t.value("grad_clip", ck.train_config.grad_clip);
    ck.train_config.seed = t.value("seed", ck.train_config.seed);
  }
  ck.provenance_hash = j.value("dataset_provenance_hash", "");

  const auto& layers = j.at("layers");
  if (static_cast<int>(layers.size()) != ck.params.arch.layers() - 1)
    throw std::runtime_error("checkpoint: expected " +
                             std::to_string(ck.params.arch.layers() - 1) + " layers, found " +
                             std::to_string(layers.size()));
  for (int l = 0; l + 1 < ck.params.arch.layers(); ++l) {
    const int rows = ck.params.arch.sizes[l + 1], cols = ck.params.arch.sizes[l];
    const auto flat = layers[l].at("weights").get<std::vector<double>>();
    const auto bias = layers[l].at("bias").get<std::vector<double>>();
    if (static_cast<int>(flat.size()) != rows * cols || static_cast<int>(bias.size()) != rows)
      throw std::runtime_error("checkpoint: layer " + std::to_string(l + 2) +
                               " payload size mismatch");
    Eigen::MatrixXd w(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) w(r, c) = flat[static_cast<std::size_t>(r) * cols + c];
    ck.params.weights.push_back(std::move(w));
    ck.params.biases.push_back(
        Eigen::Map<const Eigen::VectorXd>(bias.data(), bias.size()));
  }
  detail::check_shapes(ck.params);
  return ck;
}

}  // namespace ehmac
