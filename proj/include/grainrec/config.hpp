// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "grainrec/checkpoint.hpp"
#include "grainrec/dataio.hpp"
#include "grainrec/model.hpp"
#include "grainrec/training.hpp"

namespace grainrec {

/// Everything a CLI run can be configured with.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t nn_size = 100;
  std::size_t min_frequency = kDefaultMinFrequency;
  double valid_fraction = 0.1;
};

namespace detail {

template <class T>
T config_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw ConfigError("config key '" + key + "' has invalid value '" + text + "'");
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::config_number;
  if (key == "embedding_dim") c.model.embedding_dim = config_number<std::size_t>(key, value);
  else if (key == "layer_pattern") c.model.layer_pattern = value;
  else if (key == "dropout") c.model.dropout = config_number<double>(key, value);
  else if (key == "graph_mode") c.model.graph_mode = detail::parse_graph_mode(value);
  else if (key == "readout_last_item_sum") c.model.readout_last_item_sum = config_number<int>(key, value) != 0;
  else if (key == "learning_rate") c.train.learning_rate = config_number<double>(key, value);
  else if (key == "batch_size") c.train.batch_size = config_number<std::size_t>(key, value);
  else if (key == "weight_decay") c.train.weight_decay = config_number<double>(key, value);
  else if (key == "epochs") c.train.epochs = config_number<std::size_t>(key, value);
  else if (key == "seed") c.train.seed = config_number<std::uint64_t>(key, value);
  else if (key == "precision") c.train.precision = config_number<int>(key, value);
  else if (key == "clip_norm") c.train.clip_norm = config_number<double>(key, value);
  else if (key == "eval_k") c.train.eval_k = config_number<std::size_t>(key, value);
  else if (key == "nn_size") c.nn_size = config_number<std::size_t>(key, value);
  else if (key == "min_frequency") c.min_frequency = config_number<std::size_t>(key, value);
  else if (key == "valid_fraction") c.valid_fraction = config_number<double>(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// key=value lines; '#' starts a comment line.
inline void read_config(std::istream& in, RunConfig& c) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " is not key=value");
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void read_config(const std::filesystem::path& path, RunConfig& c) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  read_config(in, c);
}

}  // namespace grainrec
