// Subcommand front-end for the pipeline: dataset generation, imitation
// training, policy evaluation, the discretized baseline, and sweep reports.
// Every run resolves its settings as flag > config file > default, derives
// all randomness from one master seed through named substreams, and writes a
// manifest next to each output; volatile timing lives only in the manifest's
// "timing" object so artifacts from identical inputs are byte-identical.
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <exception>
#include <filesystem>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ehmac/checkpoint.hpp"
#include "ehmac/config.hpp"
#include "ehmac/datagen.hpp"
#include "ehmac/io.hpp"
#include "ehmac/mdp.hpp"
#include "ehmac/mlp.hpp"
#include "ehmac/policy.hpp"
#include "ehmac/policyeval.hpp"
#include "ehmac/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string iso_utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Collects the run description and writes `<out>.manifest.json`. Inputs and
/// outputs are recorded with content hashes; wall-clock data is grouped under
/// "timing" and is the only part of any artifact that varies between
/// identical reruns.
class ManifestWriter {
 public:
  explicit ManifestWriter(std::string subcommand) : start_(std::chrono::steady_clock::now()) {
    j_["subcommand"] = std::move(subcommand);
    j_["inputs"] = ordered_json::array();
    j_["outputs"] = ordered_json::array();
  }

  void set_config(const std::string& path, const ehmac::SystemConfig& cfg) {
    j_["config_path"] = path;
    j_["config"] = ehmac::detail::config_to_json(cfg);
  }

  void set_seeds(ordered_json seeds) { j_["seeds"] = std::move(seeds); }
  void note(const std::string& key, const ordered_json& value) { j_[key] = value; }

  void add_input(const fs::path& p) { add(j_["inputs"], p); }
  void add_output(const fs::path& p) { add(j_["outputs"], p); }

  void write(const fs::path& out) {
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_);
    j_["timing"]["finished_at"] = iso_utc_now();
    j_["timing"]["wall_seconds"] = elapsed.count();
    ehmac::write_text_atomic(fs::path(out.string() + ".manifest.json"), j_.dump(2) + "\n");
  }

 private:
  static void add(ordered_json& list, const fs::path& p) {
    list.push_back({{"path", p.string()}, {"hash", ehmac::hash_hex(ehmac::hash_file(p))}});
  }

  ordered_json j_;
  std::chrono::steady_clock::time_point start_;
};

/// System-config surface shared by the subcommands that simulate physics.
/// Flag values only take effect when the flag was actually passed, so the
/// file keeps authority over anything not overridden.
struct ConfigOptions {
  std::string path;
  int k = 1;
  double b_max = 20.0, p_max = 15.0, harvest_mean = 10.0, harvest_var = 1.0, b_init = 10.0;
  std::uint64_t seed = 1;
  CLI::Option *o_path = nullptr, *o_k = nullptr, *o_bmax = nullptr, *o_pmax = nullptr,
              *o_mean = nullptr, *o_var = nullptr, *o_binit = nullptr, *o_seed = nullptr;

  void attach(CLI::App* cmd) {
    o_path = cmd->add_option("-c,--config", path, "config file (key = value lines)");
    o_k = cmd->add_option("--k", k, "number of transmitters");
    o_bmax = cmd->add_option("--b-max", b_max, "battery capacity per node");
    o_pmax = cmd->add_option("--p-max", p_max, "per-slot transmit energy cap");
    o_mean = cmd->add_option("--harvest-mean", harvest_mean, "harvest parent-Gaussian mean");
    o_var = cmd->add_option("--harvest-var", harvest_var, "harvest parent-Gaussian variance");
    o_binit = cmd->add_option("--b-init", b_init, "initial battery (default b_max / 2)");
    o_seed = cmd->add_option("--seed", seed, "master seed; substreams derive from it");
  }

  ehmac::SystemConfig resolve() const {
    ehmac::SystemConfig cfg;
    if (o_path->count()) cfg = ehmac::load_system_config(path);
    if (o_k->count()) cfg.k = k;
    if (o_bmax->count()) cfg.battery_capacity = b_max;
    if (o_pmax->count()) cfg.power_cap = p_max;
    if (o_mean->count()) cfg.harvest_mean = harvest_mean;
    if (o_var->count()) cfg.harvest_var = harvest_var;
    if (o_binit->count())
      cfg.initial_battery = b_init;
    else if (!o_path->count())
      cfg.initial_battery = cfg.battery_capacity / 2.0;
    if (o_seed->count()) cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

ordered_json report_to_json(const ehmac::PolicyReport& r) {
  ordered_json j;
  j["format"] = "ehmac-report-v1";
  j["policy"] = r.policy;
  j["slots"] = r.slots;
  j["policy_rps"] = r.policy_rps;
  j["offline_rps"] = r.offline_rps;
  j["ratio_percent"] = r.ratio_percent;
  j["seed"] = r.seed;
  j["config"] = ehmac::detail::config_to_json(r.config);
  return j;
}

ehmac::PolicyReport report_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != std::string("ehmac-report-v1"))
    throw std::runtime_error("report: unrecognized format field");
  ehmac::PolicyReport r;
  r.policy = j.at("policy").get<std::string>();
  r.slots = j.at("slots").get<long long>();
  r.policy_rps = j.at("policy_rps").get<double>();
  r.offline_rps = j.at("offline_rps").get<double>();
  r.ratio_percent = j.at("ratio_percent").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = ehmac::detail::config_from_json(j.at("config"));
  return r;
}

void write_curves(const fs::path& path, const ehmac::TrainResult& r) {
  std::string csv = "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < r.train_curve.size(); ++e)
    csv += std::to_string(e) + "," + ehmac::format_value(r.train_curve[e]) + "," +
           ehmac::format_value(r.val_curve[e]) + "\n";
  ehmac::write_text_atomic(path, csv);
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  ConfigOptions config;
  int episodes = 10000;
  int horizon = 20;
  int jobs = 1;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a) {
  const ehmac::SystemConfig cfg = a.config.resolve();
  ManifestWriter manifest("gen-data");
  manifest.set_config(a.config.path, cfg);

  ehmac::Rng stream = ehmac::Rng::substream(cfg.seed, "dataset");
  const ehmac::Dataset ds =
      ehmac::generate_training_set(cfg, a.episodes, a.horizon, stream, a.jobs);
  ehmac::write_dataset(ds, a.out);

  manifest.set_seeds({{"master", cfg.seed}, {"dataset_base", ds.provenance.seed}});
  manifest.note("episodes", a.episodes);
  manifest.note("horizon", a.horizon);
  manifest.add_output(a.out);
  manifest.add_output(ehmac::detail::sidecar_path(a.out));
  manifest.write(a.out);
  std::cout << "gen-data: " << ds.points.size() << " points -> " << a.out << "\n";
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  int val_count = 0;  // 0 means one fifth of the dataset
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 200;
  std::string optimizer = "adam";
  int patience = 20;
  double grad_clip = 5.0;
  int hidden_layers = 30;
  bool no_normalize = false;
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string out;
  std::string curves;
};

void cmd_train(const TrainArgs& a) {
  const ehmac::Dataset full = ehmac::read_dataset(a.data);
  if (!full.normalization_stats.empty())
    throw std::runtime_error("train: dataset is already normalized; feed the raw dump");
  const int count = static_cast<int>(full.points.size());
  if (count < 2) throw std::runtime_error("train: dataset has fewer than 2 points");
  const int n_val = a.val_count > 0 ? a.val_count : std::max(1, count / 5);

  ManifestWriter manifest("train");
  manifest.set_config(a.data, full.provenance.config);
  manifest.add_input(a.data);
  if (fs::exists(ehmac::detail::sidecar_path(a.data)))
    manifest.add_input(ehmac::detail::sidecar_path(a.data));

  ehmac::Rng split_rng = ehmac::Rng::substream(a.seed, "split");
  auto [train_set, val_set] = ehmac::split_train_validation(full, n_val, split_rng);
  ehmac::FeatureStats stats;
  if (!a.no_normalize) stats = ehmac::normalize_features(train_set, val_set);

  const ehmac::MlpArchitecture arch = ehmac::build_architecture(full.nodes(), a.hidden_layers);
  ehmac::TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.batch_size = a.batch_size;
  tc.epochs = a.epochs;
  tc.optimizer = a.optimizer;
  tc.patience = a.patience;
  tc.grad_clip = a.grad_clip;
  tc.seed = ehmac::Rng::substream(a.seed, "train").next_u64();

  const fs::path curves_path = a.curves.empty() ? fs::path(a.out + ".curves.csv") : fs::path(a.curves);
  ehmac::TrainResult progress;
  ehmac::TrainResult result;
  try {
    result = ehmac::train(train_set, val_set, arch, tc, &progress);
  } catch (const std::exception&) {
    // The curves up to the failure are the diagnostics; keep them.
    write_curves(curves_path, progress);
    throw;
  }
  write_curves(curves_path, result);
  ehmac::save_checkpoint(result.params, stats, a.out, tc, ehmac::dataset_provenance_hash(full));

  manifest.set_seeds({{"master", a.seed}, {"train_seed", tc.seed}});
  manifest.note("validation_points", n_val);
  manifest.note("best_epoch", result.best_epoch);
  manifest.note("best_val_loss", result.best_val_loss);
  manifest.add_output(a.out);
  manifest.add_output(curves_path);
  manifest.write(a.out);
  std::cout << "train: best validation loss " << ehmac::format_value(result.best_val_loss)
            << " at epoch " << result.best_epoch << " -> " << a.out << "\n";
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  ConfigOptions config;
  std::string checkpoint;
  std::string mdp_policy;
  std::string baseline;
  long long slots = 100000;
  int block_len = 20;
  bool strict = false;
  int jobs = 1;
  std::string out;
};

void cmd_eval(const EvalArgs& a) {
  const ehmac::SystemConfig cfg = a.config.resolve();
  ManifestWriter manifest("eval");
  manifest.set_config(a.config.path, cfg);

  std::unique_ptr<ehmac::Policy> policy;
  if (!a.checkpoint.empty()) {
    const ehmac::Checkpoint ck = ehmac::load_checkpoint(a.checkpoint);
    if (ck.params.arch.outputs() != cfg.k)
      throw std::runtime_error("eval: checkpoint is for k = " +
                               std::to_string(ck.params.arch.outputs()) +
                               " but the config says k = " + std::to_string(cfg.k));
    manifest.add_input(a.checkpoint);
    policy = std::make_unique<ehmac::DnnPolicy>(ck);
  } else if (!a.mdp_policy.empty()) {
    ehmac::MdpPolicy mp = ehmac::load_mdp_policy(a.mdp_policy);
    if (cfg.k != 1) throw std::runtime_error("eval: the mdp baseline supports k = 1 only");
    const int nb =
        static_cast<int>(std::floor(cfg.battery_capacity / mp.battery_step + 1e-9)) + 1;
    if (mp.battery_levels != nb)
      throw std::runtime_error("eval: mdp policy battery grid disagrees with the config");
    manifest.add_input(a.mdp_policy);
    policy = std::make_unique<ehmac::MdpLookupPolicy>(std::move(mp));
  } else if (a.baseline == "zero") {
    policy = std::make_unique<ehmac::ZeroPolicy>();
  } else if (a.baseline == "greedy") {
    policy = std::make_unique<ehmac::GreedyPolicy>(cfg.power_cap);
  } else {
    throw std::runtime_error("eval: unknown baseline '" + a.baseline + "'");
  }

  ehmac::Rng rng = ehmac::Rng::substream(cfg.seed, "eval");
  const ehmac::PolicyReport r =
      ehmac::evaluate_policy(*policy, cfg, a.slots, rng, a.block_len, a.strict);

  ehmac::write_text_atomic(a.out, report_to_json(r).dump(2) + "\n");
  const fs::path row_path(a.out + ".csv");
  ehmac::write_text_atomic(row_path,
                           "policy,slots,offline_rps,policy_rps,percentage\n" + r.policy + "," +
                               std::to_string(r.slots) + "," + ehmac::format_value(r.offline_rps) +
                               "," + ehmac::format_value(r.policy_rps) + "," +
                               ehmac::format_value(r.ratio_percent) + "\n");

  manifest.set_seeds({{"master", cfg.seed}, {"eval_base", r.seed}});
  manifest.add_output(a.out);
  manifest.add_output(row_path);
  manifest.write(a.out);
  std::cout << "eval: " << r.policy << " rps " << ehmac::format_value(r.policy_rps)
            << " offline " << ehmac::format_value(r.offline_rps) << " ratio "
            << ehmac::format_value(r.ratio_percent) << "% -> " << a.out << "\n";
}

// --- mdp-solve ---------------------------------------------------------------

struct MdpSolveArgs {
  ConfigOptions config;
  int levels = 8;
  double battery_step = 1.0;
  double power_step = 1.0;
  double tol = 1e-8;
  int jobs = 1;
  std::string out;
};

void cmd_mdp_solve(const MdpSolveArgs& a) {
  const ehmac::SystemConfig cfg = a.config.resolve();
  ManifestWriter manifest("mdp-solve");
  manifest.set_config(a.config.path, cfg);

  const ehmac::DiscretizedMdp m =
      ehmac::build_mdp(cfg, ehmac::quantize_harvest(cfg.harvest_mean, cfg.harvest_var, a.levels),
                       ehmac::quantize_channel(a.levels), a.battery_step, a.power_step);
  const ehmac::MdpPolicy policy = ehmac::relative_value_iteration(m, a.tol);
  ehmac::save_mdp_policy(policy, a.out);

  manifest.set_seeds({{"master", cfg.seed}});
  manifest.note("levels", a.levels);
  manifest.note("states", m.num_states());
  manifest.note("gain", policy.gain);
  manifest.add_output(a.out);
  manifest.write(a.out);
  std::cout << "mdp-solve: " << m.num_states() << " states, gain "
            << ehmac::format_value(policy.gain) << " -> " << a.out << "\n";
}

// --- report ------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string sweep = "v";
  int jobs = 1;
  std::string out;
};

void cmd_report(const ReportArgs& a) {
  ManifestWriter manifest("report");
  std::vector<std::pair<double, ehmac::PolicyReport>> rows;
  rows.reserve(a.inputs.size());
  for (const auto& path : a.inputs) {
    const auto j = nlohmann::json::parse(ehmac::read_text_file(path));
    ehmac::PolicyReport r = report_from_json(j);
    const double key = a.sweep == "m" ? r.config.harvest_mean : r.config.harvest_var;
    rows.emplace_back(key, std::move(r));
    manifest.add_input(path);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& x, const auto& y) { return x.first < y.first; });
  ehmac::generate_report(rows, a.sweep, a.out);

  manifest.note("rows", rows.size());
  manifest.add_output(a.out);
  manifest.write(a.out);
  std::cout << "report: " << rows.size() << " rows -> " << a.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online power control for an energy-harvesting multiple access channel"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "solve offline instances into a labeled dataset");
  gen.config.attach(cmd_gen);
  cmd_gen->add_option("--episodes", gen.episodes, "number of independent episodes")
      ->capture_default_str();
  cmd_gen->add_option("--horizon", gen.horizon, "slots per episode")->capture_default_str();
  cmd_gen->add_option("--jobs", gen.jobs, "parallel episode solves")->capture_default_str();
  cmd_gen->add_option("--out", gen.out, "dataset CSV path")->required();

  TrainArgs tr;
  auto* cmd_tr = app.add_subcommand("train", "fit the imitation network on a dataset");
  cmd_tr->add_option("--data", tr.data, "dataset CSV from gen-data")->required();
  cmd_tr->add_option("--val", tr.val_count, "validation point count (default: one fifth)");
  cmd_tr->add_option("--lr", tr.lr, "learning rate")->capture_default_str();
  cmd_tr->add_option("--batch-size", tr.batch_size, "minibatch size")->capture_default_str();
  cmd_tr->add_option("--epochs", tr.epochs, "epoch budget")->capture_default_str();
  cmd_tr->add_option("--optimizer", tr.optimizer, "adam or sgd")
      ->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  cmd_tr->add_option("--patience", tr.patience, "early-stop patience, epochs")
      ->capture_default_str();
  cmd_tr->add_option("--grad-clip", tr.grad_clip, "global gradient norm cap")
      ->capture_default_str();
  cmd_tr->add_option("--hidden-layers", tr.hidden_layers, "hidden layer count")
      ->check(CLI::Range(1, 30))
      ->capture_default_str();
  cmd_tr->add_flag("--no-normalize", tr.no_normalize, "skip feature normalization");
  cmd_tr->add_option("--seed", tr.seed, "master seed for split and training")
      ->capture_default_str();
  cmd_tr->add_option("--jobs", tr.jobs, "accepted for symmetry; the update loop is sequential")
      ->capture_default_str();
  cmd_tr->add_option("--out", tr.out, "checkpoint path")->required();
  cmd_tr->add_option("--curves", tr.curves, "learning-curve CSV (default <out>.curves.csv)");

  EvalArgs ev;
  auto* cmd_ev = app.add_subcommand("eval", "roll a policy against the offline benchmark");
  ev.config.attach(cmd_ev);
  auto* source = cmd_ev->add_option_group("policy", "exactly one policy source");
  source->add_option("--checkpoint", ev.checkpoint, "trained network checkpoint");
  source->add_option("--mdp-policy", ev.mdp_policy, "solved mdp policy table");
  source->add_option("--baseline", ev.baseline, "greedy or zero")
      ->check(CLI::IsMember({"greedy", "zero"}));
  source->require_option(1);
  cmd_ev->add_option("--slots", ev.slots, "evaluation length in slots")->capture_default_str();
  cmd_ev->add_option("--block-len", ev.block_len, "offline benchmark block length")
      ->capture_default_str();
  cmd_ev->add_flag("--strict", ev.strict, "reject raw policy outputs that violate feasibility");
  cmd_ev->add_option("--jobs", ev.jobs, "accepted for symmetry; the rollout chain is ordered")
      ->capture_default_str();
  cmd_ev->add_option("--out", ev.out, "report JSON path")->required();

  MdpSolveArgs ms;
  auto* cmd_ms = app.add_subcommand("mdp-solve", "solve the discretized average-reward baseline");
  ms.config.attach(cmd_ms);
  cmd_ms->add_option("--levels", ms.levels, "quantizer levels for harvest and channel")
      ->capture_default_str();
  cmd_ms->add_option("--battery-step", ms.battery_step, "battery grid step")
      ->capture_default_str();
  cmd_ms->add_option("--power-step", ms.power_step, "action grid step")->capture_default_str();
  cmd_ms->add_option("--tol", ms.tol, "value-iteration span tolerance")->capture_default_str();
  cmd_ms->add_option("--jobs", ms.jobs, "accepted for symmetry; sweeps are ordered")
      ->capture_default_str();
  cmd_ms->add_option("--out", ms.out, "policy table path")->required();

  ReportArgs rp;
  auto* cmd_rp = app.add_subcommand("report", "merge eval reports into a sweep table");
  cmd_rp->add_option("--inputs", rp.inputs, "eval report JSON files")->required()->expected(-1);
  cmd_rp->add_option("--sweep", rp.sweep, "sweep key: m (harvest mean) or v (harvest variance)")
      ->check(CLI::IsMember({"m", "v"}))
      ->capture_default_str();
  cmd_rp->add_option("--jobs", rp.jobs, "accepted for symmetry; row merging is ordered")
      ->capture_default_str();
  cmd_rp->add_option("--out", rp.out, "sweep table CSV path")->required();

  cmd_gen->callback([&] { cmd_gen_data(gen); });
  cmd_tr->callback([&] { cmd_train(tr); });
  cmd_ev->callback([&] { cmd_eval(ev); });
  cmd_ms->callback([&] { cmd_mdp_solve(ms); });
  cmd_rp->callback([&] { cmd_report(rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "ehmac: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
