#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ehmac {

/// System-wide physical parameters. One energy unit is 10^-2 J.
struct SystemConfig {
  int k = 1;                        // number of transmitters
  double battery_capacity = 20.0;   // B_max, energy units per node
  double power_cap = 15.0;          // P_max, max transmit energy per slot
  double harvest_mean = 10.0;       // parent-Gaussian mean before truncation at 0
  double harvest_var = 1.0;         // parent-Gaussian variance
  double initial_battery = 10.0;    // battery level at slot 1
  double energy_unit_joules = 1e-2;
  std::uint64_t seed = 1;

  void validate() const {
    if (k < 1) throw std::invalid_argument("config: k must be >= 1");
    if (!(power_cap > 0.0) || power_cap > battery_capacity)
      throw std::invalid_argument("config: need 0 < p_max <= b_max");
    if (harvest_mean < 0.0) throw std::invalid_argument("config: harvest_mean must be >= 0");
    if (!(harvest_var > 0.0)) throw std::invalid_argument("config: harvest_var must be > 0");
    if (initial_battery < 0.0 || initial_battery > battery_capacity)
      throw std::invalid_argument("config: need 0 <= b_init <= b_max");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

/// Parses a flat key/value file: one `key = value` per line, `#` comments.
/// Recognized keys: k, b_max, p_max, harvest_mean, harvest_var, b_init, seed.
/// When b_init is omitted it defaults to b_max / 2.
inline SystemConfig parse_system_config(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    std::string key, value;
    if (eq != std::string::npos) {
      key = detail::trim(line.substr(0, eq));
      value = detail::trim(line.substr(eq + 1));
    } else {
      std::istringstream ls(line);
      ls >> key >> value;
    }
    if (key.empty() || value.empty())
      throw std::invalid_argument("config: malformed line " + std::to_string(lineno));
    kv[key] = value;
  }

  SystemConfig cfg;
  bool have_b_init = false;
  for (const auto& [key, value] : kv) {
    try {
      if (key == "k") cfg.k = std::stoi(value);
      else if (key == "b_max") cfg.battery_capacity = std::stod(value);
      else if (key == "p_max") cfg.power_cap = std::stod(value);
      else if (key == "harvest_mean") cfg.harvest_mean = std::stod(value);
      else if (key == "harvest_var") cfg.harvest_var = std::stod(value);
      else if (key == "b_init") { cfg.initial_battery = std::stod(value); have_b_init = true; }
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad value for key '" + key + "'");
    }
  }
  if (!have_b_init) cfg.initial_battery = cfg.battery_capacity / 2.0;
  cfg.validate();
  return cfg;
}

inline SystemConfig load_system_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  return parse_system_config(in);
}

}  // namespace ehmac
