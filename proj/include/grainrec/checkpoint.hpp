// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "grainrec/dataio.hpp"
#include "grainrec/error.hpp"
#include "grainrec/model.hpp"
#include "grainrec/training.hpp"

namespace grainrec {

inline constexpr int kCheckpointVersion = 1;

struct ParamShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool trainable = true;
};

/// Manifest plus float32 parameter payload of a checkpoint directory.
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t vocab_hash = 0;
  std::vector<ParamShape> shapes;
  ParamStore<float> params;
};

namespace detail {

inline std::string graph_mode_name(GraphMode m) { return m == GraphMode::merged ? "merged" : "disjoint"; }

inline GraphMode parse_graph_mode(const std::string& s) {
  if (s == "disjoint") return GraphMode::disjoint;
  if (s == "merged") return GraphMode::merged;
  throw ConfigError("graph_mode must be disjoint or merged, got '" + s + "'");
}

template <class T>
T parse_number(const std::string& field, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw CompatibilityError("manifest field '" + field + "' has invalid value '" + text + "'");
  return v;
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline bool get_f32(std::istream& in, float& f) {
  std::uint32_t bits;
  if (!get_u32(in, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

}  // namespace detail

inline void write_manifest(std::ostream& out, const Checkpoint& ck) {
  out.precision(17);
  out << "format=grainrec-checkpoint\n"
      << "version=" << kCheckpointVersion << '\n'
      << "embedding_dim=" << ck.model.embedding_dim << '\n'
      << "layer_pattern=" << ck.model.layer_pattern << '\n'
      << "dropout=" << ck.model.dropout << '\n'
      << "catalog_size=" << ck.model.catalog_size << '\n'
      << "graph_mode=" << detail::graph_mode_name(ck.model.graph_mode) << '\n'
      << "readout_last_item_sum=" << (ck.model.readout_last_item_sum ? 1 : 0) << '\n'
      << "learning_rate=" << ck.train.learning_rate << '\n'
      << "batch_size=" << ck.train.batch_size << '\n'
      << "weight_decay=" << ck.train.weight_decay << '\n'
      << "epochs=" << ck.train.epochs << '\n'
      << "seed=" << ck.train.seed << '\n'
      << "precision=" << ck.train.precision << '\n'
      << "vocab_hash=" << ck.vocab_hash << '\n';
  for (const auto& s : ck.shapes)
    out << "param " << s.name << ' ' << s.rows << ' ' << s.cols << ' ' << (s.trainable ? 1 : 0) << '\n';
}

/// Parses a manifest; any malformed line fails with the offending field name.
inline Checkpoint read_manifest(std::istream& in) {
  Checkpoint ck;
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("param ", 0) == 0) {
      std::istringstream is(line.substr(6));
      ParamShape s;
      int trainable = -1;
      std::string extra;
      if (!(is >> s.name >> s.rows >> s.cols >> trainable) || (is >> extra) || (trainable != 0 && trainable != 1)) {
        throw CompatibilityError("manifest field 'param' is malformed on line " + std::to_string(lineno));
      }
      s.trainable = trainable == 1;
      ck.shapes.push_back(s);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw CompatibilityError("manifest line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) throw CompatibilityError("manifest field '" + key + "' is missing");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  if (take("format") != "grainrec-checkpoint") throw CompatibilityError("manifest field 'format' is not grainrec-checkpoint");
  const int version = detail::parse_number<int>("version", take("version"));
  if (version != kCheckpointVersion) {
    throw CompatibilityError("manifest field 'version' is " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  ck.model.embedding_dim = detail::parse_number<std::size_t>("embedding_dim", take("embedding_dim"));
  ck.model.layer_pattern = take("layer_pattern");
  ck.model.dropout = detail::parse_number<double>("dropout", take("dropout"));
  ck.model.catalog_size = detail::parse_number<std::size_t>("catalog_size", take("catalog_size"));
  try {
    ck.model.graph_mode = detail::parse_graph_mode(take("graph_mode"));
  } catch (const ConfigError& e) {
    throw CompatibilityError(std::string("manifest field 'graph_mode': ") + e.what());
  }
  ck.model.readout_last_item_sum = detail::parse_number<int>("readout_last_item_sum", take("readout_last_item_sum")) != 0;
  ck.train.learning_rate = detail::parse_number<double>("learning_rate", take("learning_rate"));
  ck.train.batch_size = detail::parse_number<std::size_t>("batch_size", take("batch_size"));
  ck.train.weight_decay = detail::parse_number<double>("weight_decay", take("weight_decay"));
  ck.train.epochs = detail::parse_number<std::size_t>("epochs", take("epochs"));
  ck.train.seed = detail::parse_number<std::uint64_t>("seed", take("seed"));
  ck.train.precision = detail::parse_number<int>("precision", take("precision"));
  ck.vocab_hash = detail::parse_number<std::uint64_t>("vocab_hash", take("vocab_hash"));
  if (!kv.empty()) throw CompatibilityError("manifest field '" + kv.begin()->first + "' is not recognised");
  try {
    ck.model.validate();
  } catch (const ConfigError& e) {
    throw CompatibilityError(std::string("manifest describes an invalid model: ") + e.what());
  }
  return ck;
}

template <class Real>
Checkpoint make_checkpoint(const Model<Real>& model, const TrainConfig& train, std::uint64_t vocab_hash) {
  Checkpoint ck;
  ck.model = model.config();
  ck.train = train;
  ck.vocab_hash = vocab_hash;
  for (const auto& e : model.params().entries()) {
    ck.shapes.push_back({e.name, e.value.rows(), e.value.cols(), e.trainable});
    ck.params.add(e.name, e.value.template cast<float>(), e.trainable);
  }
  return ck;
}

/// Writes manifest.txt and params.bin (little-endian float32, row-major, in
/// manifest order) into `dir`.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream m(dir / "manifest.txt");
    if (!m) throw IoError("cannot write " + (dir / "manifest.txt").string());
    write_manifest(m, ck);
  }
  std::ofstream p(dir / "params.bin", std::ios::binary);
  if (!p) throw IoError("cannot write " + (dir / "params.bin").string());
  for (const auto& s : ck.shapes) {
    const auto& v = ck.params.value(s.name);
    for (std::size_t i = 0; i < v.size(); ++i) detail::put_f32(p, v[i]);
  }
  if (!p) throw IoError("error writing " + (dir / "params.bin").string());
}

template <class Real>
void save_checkpoint(const std::filesystem::path& dir, const Model<Real>& model, const TrainConfig& train,
                     std::uint64_t vocab_hash) {
  save_checkpoint(dir, make_checkpoint(model, train, vocab_hash));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw IoError("cannot read " + (dir / "manifest.txt").string());
  Checkpoint ck = read_manifest(m);
  std::ifstream p(dir / "params.bin", std::ios::binary);
  if (!p) throw IoError("cannot read " + (dir / "params.bin").string());
  for (const auto& s : ck.shapes) {
    Matrix<float> v(s.rows, s.cols);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!detail::get_f32(p, v[i])) throw CompatibilityError("params.bin is truncated inside parameter '" + s.name + "'");
    ck.params.add(s.name, std::move(v), s.trainable);
  }
  char extra;
  if (p.read(&extra, 1)) throw CompatibilityError("params.bin has trailing bytes after the last parameter");
  return ck;
}

/// Copies checkpoint values into an existing parameter table, requiring the
/// same names and shapes.
template <class Real>
void load_params_into(const Checkpoint& ck, ParamStore<Real>& target) {
  for (auto& e : target.entries()) {
    if (!ck.params.contains(e.name)) throw CompatibilityError("checkpoint lacks parameter '" + e.name + "'");
    const auto& src = ck.params.value(e.name);
    if (!src.same_shape(e.value)) {
      throw CompatibilityError("parameter '" + e.name + "' has shape " + src.shape() + " in checkpoint, expected " +
                               e.value.shape());
    }
    e.value = src.template cast<Real>();
  }
  if (ck.params.size() != target.size()) throw CompatibilityError("checkpoint has parameters the model does not");
}

template <class Real>
Model<Real> model_from_checkpoint(const Checkpoint& ck) {
  return Model<Real>(ck.model, ck.params.template cast<Real>());
}

}  // namespace grainrec
