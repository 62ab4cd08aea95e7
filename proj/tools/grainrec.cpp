// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: prepare, train, build-nn, eval, ablate, serve,
// bench, synth.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "grainrec/grainrec.hpp"

namespace fs = std::filesystem;
using namespace grainrec;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct Globals {
  std::string config_file;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_run_config(const Globals& g) {
  RunConfig c;
  if (!g.config_file.empty()) read_config(fs::path(g.config_file), c);
  if (g.seed_set) c.train.seed = g.seed;
  return c;
}

fs::path require_out(const Globals& g, const char* verb) {
  if (g.out.empty()) throw ConfigError(std::string(verb) + " needs --out DIR");
  return g.out;
}

std::vector<TrainingSequence> load_split(const fs::path& data_dir, const char* name) {
  return read_training_set(data_dir / name);
}

void print_report_table(std::ostream& out, const std::vector<std::pair<std::string, EvalReport>>& rows) {
  const std::size_t k = rows.empty() ? 10 : rows.front().second.k;
  out << "model,cases,hit@" << k << ",mrr@" << k << ",ndcg@" << k << '\n';
  out << std::setprecision(10);
  for (const auto& [name, r] : rows) out << name << ',' << r.case_count << ',' << r.hit << ',' << r.mrr << ',' << r.ndcg << '\n';
  out << '\n' << std::left << std::setw(16) << "model" << std::right << std::setw(10) << "cases" << std::setw(10)
      << ("hit@" + std::to_string(k)) << std::setw(10) << ("mrr@" + std::to_string(k)) << std::setw(10)
      << ("ndcg@" + std::to_string(k)) << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& [name, r] : rows)
    out << std::left << std::setw(16) << name << std::right << std::setw(10) << r.case_count << std::setw(10) << r.hit
        << std::setw(10) << r.mrr << std::setw(10) << r.ndcg << '\n';
  out << std::defaultfloat;
}

int cmd_synth(const Globals& g, const SyntheticSpec& spec) {
  const fs::path out = require_out(g, "synth");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw IoError("cannot write " + out.string());
  const auto sessions = synthetic_sessions(spec);
  write_sessions_jsonl(f, sessions);
  std::cout << "wrote " << sessions.size() << " sessions to " << out.string() << '\n';
  return kOk;
}

int cmd_prepare(const Globals& g, const std::string& input) {
  const RunConfig c = load_run_config(g);
  const fs::path out = require_out(g, "prepare");
  auto corpus = parse_sessions(fs::path(input));
  const auto data = prepare_corpus(corpus.sessions, c.min_frequency, c.valid_fraction);
  write_prepared(out, data);
  std::cout << "sessions parsed=" << corpus.report.parsed << " malformed=" << corpus.report.malformed
            << " blank=" << corpus.report.blank << '\n'
            << "items=" << data.vocab.size() << " train_pairs=" << data.train.size()
            << " valid_pairs=" << data.valid.size() << " short_sequences=" << data.short_sequences << '\n';
  return kOk;
}

template <class Real>
int train_and_save(const RunConfig& c, const fs::path& data_dir, const fs::path& out) {
  const Vocabulary vocab = read_vocabulary(data_dir / "vocab.tsv");
  const auto train_set = load_split(data_dir, "train.bin");
  const auto valid_set = load_split(data_dir, "valid.bin");
  ModelConfig mc = c.model;
  mc.catalog_size = vocab.size();
  mc.validate();
  Rng rng(c.train.seed);
  Model<Real> model(mc, rng);
  fs::create_directories(out);
  std::ofstream log_file(out / "training_log.csv");
  if (!log_file) throw IoError("cannot write " + (out / "training_log.csv").string());
  std::vector<EpochLog> log;
  train(model, std::span<const TrainingSequence>(train_set), std::span<const TrainingSequence>(valid_set), c.train,
        [&](const EpochLog& e) {
          log.push_back(e);
          std::cerr << "epoch " << e.epoch << " loss " << e.loss << " hit@" << c.train.eval_k << ' ' << e.hit << " ("
                    << e.wall_seconds << " s)\n";
        });
  write_training_log_csv(log_file, log, c.train.eval_k);
  save_checkpoint(out, model, c.train, vocab.hash());
  fs::copy_file(data_dir / "vocab.tsv", out / "vocab.tsv", fs::copy_options::overwrite_existing);
  std::cout << "checkpoint written to " << out.string() << '\n';
  return kOk;
}

int cmd_train(const Globals& g, const std::string& data_dir) {
  const RunConfig c = load_run_config(g);
  c.train.validate();
  const fs::path out = require_out(g, "train");
  if (c.train.precision == 64) return train_and_save<double>(c, data_dir, out);
  return train_and_save<float>(c, data_dir, out);
}

int cmd_build_nn(const Globals& g, const std::string& ckpt, std::size_t k, const std::string& metric, unsigned threads) {
  const RunConfig c = load_run_config(g);
  const Checkpoint ck = load_checkpoint(ckpt);
  const auto model = model_from_checkpoint<float>(ck);
  if (k == 0) k = std::min(c.nn_size, model.catalog_size() - 1);
  Similarity sim;
  if (metric == "cosine") sim = Similarity::cosine;
  else if (metric == "dot") sim = Similarity::dot;
  else throw ConfigError("metric must be cosine or dot");
  const auto nn = build_nn_matrix(model.item_embeddings(), k, sim, threads);
  const fs::path out = g.out.empty() ? fs::path(ckpt) / "nn_matrix.bin" : fs::path(g.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_nn_matrix(out, nn);
  std::cout << "neighbor matrix " << nn.no_items << " x " << nn.k << " written to " << out.string();
  if (nn.zero_norm_items > 0) std::cout << " (" << nn.zero_norm_items << " zero-norm items)";
  std::cout << '\n';
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& data_dir, const std::string& mode,
             std::size_t k, const std::string& split) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const Vocabulary vocab = read_vocabulary(fs::path(data_dir) / "vocab.tsv");
  if (vocab.hash() != ck.vocab_hash) throw CompatibilityError("dataset vocabulary does not match the checkpoint");
  const auto model = model_from_checkpoint<float>(ck);
  const auto train_set = load_split(data_dir, "train.bin");
  const auto test = load_split(data_dir, split == "train" ? "train.bin" : "valid.bin");
  std::vector<std::pair<std::string, EvalReport>> rows;
  if (mode == "offline" || mode == "both") rows.emplace_back("model-offline", evaluate(model, test, k));
  if (mode == "serving" || mode == "both") {
    const auto nn = read_nn_matrix(fs::path(ckpt) / "nn_matrix.bin");
    rows.emplace_back("model-serving", evaluate(model, test, k, EvalMode::serving_parity, &nn));
  }
  if (rows.empty()) throw ConfigError("mode must be offline, serving or both");
  rows.emplace_back("popularity", popularity_baseline(train_set, test, model.catalog_size(), k));
  print_report_table(std::cout, rows);
  if (!g.out.empty()) {
    std::ofstream f(g.out);
    if (!f) throw IoError("cannot write " + g.out);
    f << "model,cases,hit@" << k << ",mrr@" << k << ",ndcg@" << k << '\n' << std::setprecision(17);
    for (const auto& [name, r] : rows) f << name << ',' << r.case_count << ',' << r.hit << ',' << r.mrr << ',' << r.ndcg << '\n';
  }
  return kOk;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

int cmd_ablate(const Globals& g, const std::string& data_dir, const std::string& axis, const std::string& values,
               bool no_timing) {
  const RunConfig c = load_run_config(g);
  PreparedData data;
  data.vocab = read_vocabulary(fs::path(data_dir) / "vocab.tsv");
  data.train = load_split(data_dir, "train.bin");
  data.valid = load_split(data_dir, "valid.bin");
  AblationConfig base;
  base.model = c.model;
  base.train = c.train;
  base.nn_size = c.nn_size;
  const auto grid = ablate(axis, split_csv(values), base, data);
  write_ablation_csv(std::cout, grid, !no_timing);
  if (!g.out.empty()) {
    std::ofstream f(g.out);
    if (!f) throw IoError("cannot write " + g.out);
    write_ablation_csv(f, grid, !no_timing);
  }
  return kOk;
}

std::pair<std::string, int> split_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--bind must be HOST:PORT");
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--bind port is not a number");
  }
  if (port < 0 || port > 65535) throw ConfigError("--bind port out of range");
  return {bind.substr(0, colon), port};
}

Protocol parse_protocol(const std::string& p) {
  if (p == "http") return Protocol::http;
  if (p == "raw") return Protocol::raw;
  throw ConfigError("--protocol must be http or raw");
}

std::atomic<bool> g_stop{false};

int cmd_serve(const std::string& ckpt, const std::string& bind, std::size_t workers, const std::string& protocol) {
  auto rec = std::make_shared<const Recommender>(Recommender::load(ckpt));
  ServerOptions opts;
  std::tie(opts.host, opts.port) = split_bind(bind);
  opts.workers = workers;
  opts.protocol = parse_protocol(protocol);
  Server server(rec, opts);
  const int port = server.start();
  std::cout << "serving " << protocol << " on " << opts.host << ':' << port << " with " << workers << " worker(s)"
            << std::endl;
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return kOk;
}

/// Starts an in-process server on a free port and replays requests through
/// it sequentially, reporting end-to-end latency quantiles.
int cmd_bench(const Globals& g, const std::string& ckpt, const std::string& data_dir, std::size_t requests,
              std::size_t workers, const std::string& protocol) {
  const RunConfig c = load_run_config(g);
  auto rec = std::make_shared<const Recommender>(Recommender::load(ckpt));
  std::vector<std::string> bodies;
  if (!data_dir.empty()) {
    for (const auto& ts : load_split(data_dir, "valid.bin")) {
      nlohmann::json items = nlohmann::json::array();
      for (ItemIndex i : ts.inputs) items.push_back(rec->vocab().raw_id(i));
      bodies.push_back(nlohmann::json{{"items", items}, {"n", 10}}.dump());
    }
  }
  if (bodies.empty()) {
    Rng rng(c.train.seed);
    for (std::size_t i = 0; i < requests; ++i) {
      nlohmann::json items = nlohmann::json::array();
      const std::size_t len = 1 + rng.below(5);
      for (std::size_t j = 0; j < len; ++j) items.push_back(rec->vocab().raw_id(static_cast<ItemIndex>(rng.below(rec->vocab().size()))));
      bodies.push_back(nlohmann::json{{"items", items}, {"n", 10}}.dump());
    }
  }
  ServerOptions opts;
  opts.port = 0;
  opts.workers = workers;
  opts.protocol = parse_protocol(protocol);
  Server server(rec, opts);
  const int port = server.start();
  std::vector<double> us;
  us.reserve(requests);
  std::size_t errors = 0;
  if (opts.protocol == Protocol::http) {
    httplib::Client cli("127.0.0.1", port);
    cli.set_keep_alive(true);
    cli.set_tcp_nodelay(true);
    for (std::size_t i = 0; i < requests; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      auto res = cli.Post("/recommend", bodies[i % bodies.size()], "application/json");
      us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
      if (!res || res->status != 200) ++errors;
    }
  } else {
    RawClient cli("127.0.0.1", port);
    for (std::size_t i = 0; i < requests; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto reply = cli.call(bodies[i % bodies.size()]);
      us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
      if (reply.find("\"error\"") != std::string::npos) ++errors;
    }
  }
  server.stop();
  std::cout << "requests,errors,p50_us,p95_us,p99_us\n"
            << requests << ',' << errors << ',' << detail::quantile_of(us, 0.50) << ','
            << detail::quantile_of(us, 0.95) << ',' << detail::quantile_of(us, 0.99) << '\n';
  return errors == 0 ? kOk : kRuntime;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
  if (dynamic_cast<const CorpusError*>(&e) || dynamic_cast<const IoError*>(&e) ||
      dynamic_cast<const InputError*>(&e) || dynamic_cast<const CompatibilityError*>(&e) ||
      dynamic_cast<const KeyError*>(&e) || dynamic_cast<const EvaluationError*>(&e)) {
    return kData;
  }
  return kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Session-based next-item recommender: data preparation, training, evaluation and serving"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the verb
  Globals g;
  app.add_option("--config", g.config_file, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output path");
  app.add_option_function<std::uint64_t>(
      "--seed", [&](const std::uint64_t& s) { g.seed = s, g.seed_set = true; }, "random seed");

  SyntheticSpec spec;
  auto* synth = app.add_subcommand("synth", "write a planted-transition session corpus as JSONL");
  synth->add_option("--items", spec.items);
  synth->add_option("--sessions", spec.sessions);
  synth->add_option("--categories", spec.categories);
  synth->add_option("--corpus-seed", spec.seed);

  std::string input;
  auto* prepare = app.add_subcommand("prepare", "clean a JSONL session log into train/valid sets");
  prepare->add_option("--input", input, "JSONL session log")->required()->check(CLI::ExistingFile);

  std::string data_dir;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint directory");
  train_cmd->add_option("--data", data_dir, "prepared dataset directory")->required()->check(CLI::ExistingDirectory);

  std::string ckpt;
  std::size_t k = 0;
  std::string metric = "cosine";
  unsigned threads = 0;
  auto* build_nn = app.add_subcommand("build-nn", "precompute the item nearest-neighbor matrix");
  build_nn->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingDirectory);
  build_nn->add_option("--k", k, "neighbors per item (default nn_size)");
  build_nn->add_option("--metric", metric, "cosine or dot");
  build_nn->add_option("--threads", threads, "0 = all cores");

  std::string mode = "offline";
  std::string split = "valid";
  std::size_t eval_k = 10;
  auto* eval = app.add_subcommand("eval", "report hit/mrr/ndcg against the popularity baseline");
  eval->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--mode", mode, "offline, serving or both");
  eval->add_option("--k", eval_k);
  eval->add_option("--split", split, "valid or train");

  std::string axis, values;
  bool no_timing = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate one model per axis value");
  ablate_cmd->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  ablate_cmd->add_option("--axis", axis, "layer_pattern, nn_size or embedding_dim")->required();
  ablate_cmd->add_option("--values", values, "comma-separated axis values")->required();
  ablate_cmd->add_flag("--no-timing", no_timing, "omit the timing columns");

  std::string bind = "127.0.0.1:8080";
  std::size_t workers = 1;
  std::string protocol = "http";
  auto* serve = app.add_subcommand("serve", "serve recommendations from a checkpoint directory");
  serve->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingDirectory);
  serve->add_option("--bind", bind, "HOST:PORT");
  serve->add_option("--workers", workers);
  serve->add_option("--protocol", protocol, "http or raw");

  std::size_t requests = 1000;
  std::string bench_data;
  auto* bench = app.add_subcommand("bench", "measure end-to-end request latency against an in-process server");
  bench->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingDirectory);
  bench->add_option("--data", bench_data, "replay validation prefixes from this dataset");
  bench->add_option("--requests", requests);
  bench->add_option("--workers", workers);
  bench->add_option("--protocol", protocol, "http or raw");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    (void)load_run_config(g);  // reject a bad --config before any verb runs
    if (*synth) return cmd_synth(g, spec);
    if (*prepare) return cmd_prepare(g, input);
    if (*train_cmd) return cmd_train(g, data_dir);
    if (*build_nn) return cmd_build_nn(g, ckpt, k, metric, threads);
    if (*eval) return cmd_eval(g, ckpt, data_dir, mode, eval_k, split);
    if (*ablate_cmd) return cmd_ablate(g, data_dir, axis, values, no_timing);
    if (*serve) return cmd_serve(ckpt, bind, workers, protocol);
    if (*bench) return cmd_bench(g, ckpt, bench_data, requests, workers, protocol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kUsage;
}
