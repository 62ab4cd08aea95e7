// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "grainrec/ablation.hpp"
#include "grainrec/evaluate.hpp"
#include "grainrec/synthetic.hpp"

using namespace grainrec;
namespace fs = std::filesystem;

namespace {

// Straight from the definitions, one list at a time.
struct OracleScores {
  double hit = 0, mrr = 0, ndcg = 0;
};

OracleScores oracle(const std::vector<std::vector<double>>& lists, const std::vector<ItemIndex>& targets, std::size_t k) {
  OracleScores o;
  for (std::size_t l = 0; l < lists.size(); ++l) {
    const auto& s = lists[l];
    std::vector<ItemIndex> order(s.size());
    std::iota(order.begin(), order.end(), ItemIndex{0});
    std::stable_sort(order.begin(), order.end(), [&](ItemIndex a, ItemIndex b) { return s[a] > s[b]; });
    for (std::size_t pos = 0; pos < k && pos < order.size(); ++pos) {
      if (order[pos] != targets[l]) continue;
      o.hit += 1;
      o.mrr += 1.0 / static_cast<double>(pos + 1);
      o.ndcg += 1.0 / std::log2(static_cast<double>(pos + 2));
    }
  }
  const auto n = static_cast<double>(lists.size());
  o.hit /= n;
  o.mrr /= n;
  o.ndcg /= n;
  return o;
}

PreparedData synthetic_data(std::size_t sessions, std::size_t items, std::uint64_t seed = 7) {
  SyntheticSpec spec;
  spec.items = items;
  spec.sessions = sessions;
  spec.seed = seed;
  return prepare_corpus(synthetic_sessions(spec), 1, 0.1);
}

}  // namespace

TEST(Metrics, RankFourExample) {
  const std::vector<Rank> r{4};
  EXPECT_DOUBLE_EQ(hit_at_k(r), 1.0);
  EXPECT_DOUBLE_EQ(mrr_at_k(r), 0.25);
  EXPECT_DOUBLE_EQ(ndcg_at_k(r), 1.0 / std::log2(5.0));
}

TEST(Metrics, RankElevenAndMissScoreZero) {
  const std::vector<Rank> r{11, std::nullopt};
  EXPECT_EQ(hit_at_k(r), 0.0);
  EXPECT_EQ(mrr_at_k(r), 0.0);
  EXPECT_EQ(ndcg_at_k(r), 0.0);
  EXPECT_EQ(hit_at_k(r, 11), 0.5);
}

TEST(Metrics, EmptyListIsEvaluationError) {
  const std::vector<Rank> none;
  EXPECT_THROW(hit_at_k(none), EvaluationError);
  EXPECT_THROW(EvalReport::from_ranks(none), EvaluationError);
}

TEST(Metrics, TiesGoToSmallerItem) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.5};
  EXPECT_EQ(rank_in_catalog<double>(s, 0), 2u);
  EXPECT_EQ(rank_in_catalog<double>(s, 2), 3u);
  EXPECT_EQ(rank_in_catalog<double>(s, 3), 4u);
  EXPECT_EQ(rank_in_catalog<double>(s, 9), std::nullopt);
  const std::vector<ItemIndex> cand{7, 3, 5};
  const std::vector<double> cs{1.0, 1.0, 2.0};
  EXPECT_EQ(rank_of_target<double>(cs, cand, 7), 3u);
  EXPECT_EQ(rank_of_target<double>(cs, cand, 3), 2u);
  EXPECT_EQ(rank_of_target<double>(cs, cand, 4), std::nullopt);
}

TEST(Metrics, MatchOracleOnRandomLists) {
  Rng rng(1);
  std::vector<std::vector<double>> lists;
  std::vector<ItemIndex> targets;
  std::vector<Rank> ranks;
  for (int l = 0; l < 10000; ++l) {
    std::vector<double> s(1 + rng.below(40));
    // Coarse values so ties are common.
    for (auto& v : s) v = static_cast<double>(rng.below(8));
    const auto t = static_cast<ItemIndex>(rng.below(s.size()));
    ranks.push_back(rank_in_catalog<double>(s, t));
    lists.push_back(std::move(s));
    targets.push_back(t);
  }
  for (std::size_t k : {1u, 5u, 10u, 20u}) {
    const auto o = oracle(lists, targets, k);
    const auto r = EvalReport::from_ranks(ranks, k);
    EXPECT_NEAR(r.hit, o.hit, 1e-12) << k;
    EXPECT_NEAR(r.mrr, o.mrr, 1e-12) << k;
    EXPECT_NEAR(r.ndcg, o.ndcg, 1e-12) << k;
    EXPECT_LE(r.ndcg, r.hit + 1e-15);
    EXPECT_LE(r.mrr, r.hit + 1e-15);
    EXPECT_EQ(r.case_count, 10000u);
  }
}

TEST(Popularity, RanksByTrainingFrequency) {
  const std::vector<TrainingSequence> train{{{0}, 2}, {{1}, 2}, {{0}, 1}, {{2}, 2}};
  const std::vector<TrainingSequence> test{{{0}, 2}, {{0}, 1}, {{0}, 0}, {{0}, 3}};
  const auto r = popularity_baseline(train, test, 4, 2);
  EXPECT_DOUBLE_EQ(r.hit, 0.5);
  EXPECT_DOUBLE_EQ(r.mrr, (1.0 + 0.5) / 4);
  EXPECT_THROW(popularity_baseline(train, {}, 4), EvaluationError);
}

TEST(Evaluate, MemorizedTargetsScorePerfectly) {
  // One-hot catalog, no message passing, and a readout that keeps only the
  // last item's state, so the session vector is the successor's one-hot.
  const std::size_t m = 6;
  ModelConfig c;
  c.catalog_size = m;
  c.embedding_dim = m;
  c.layer_pattern = "G";
  Rng rng(2);
  Model<double> model(c, rng);
  auto& P = model.params();
  P.value("item_embedding") = Matrix<double>::identity(m);
  for (const char* n : {"gru.w_input", "gru.w_hidden", "gru.b_input", "gru.b_hidden", "w_neigh"}) {
    auto& v = P.value(std::string("layer0.gnn.") + n);
    v = Matrix<double>(v.rows(), v.cols());
  }
  // w_self maps item i to the one-hot of its successor i + 1.
  Matrix<double> shift(m, m);
  for (std::size_t i = 0; i < m; ++i) shift(i, (i + 1) % m) = 1;
  P.value("layer0.gnn.w_self") = shift;
  Matrix<double> w3(m, 2 * m);
  for (std::size_t i = 0; i < m; ++i) w3(i, i) = 1;
  P.value("readout.w_3") = w3;
  std::vector<TrainingSequence> test;
  for (ItemIndex i = 0; i < m; ++i) test.push_back({{i}, static_cast<ItemIndex>((i + 1) % m)});
  const auto r = evaluate(model, std::span<const TrainingSequence>(test), 1);
  EXPECT_DOUBLE_EQ(r.hit, 1.0);
  EXPECT_DOUBLE_EQ(r.mrr, 1.0);
  EXPECT_DOUBLE_EQ(r.ndcg, 1.0);
}

TEST(Evaluate, RandomModelIsNearChance) {
  const auto data = synthetic_data(4000, 200, 3);
  ModelConfig c;
  c.catalog_size = data.vocab.size();
  c.embedding_dim = 16;
  Rng rng(4);
  const Model<float> model(c, rng);
  const auto r = evaluate(model, std::span<const TrainingSequence>(data.valid), 10);
  EXPECT_NEAR(r.hit, 10.0 / static_cast<double>(c.catalog_size), 0.02);
}

TEST(Evaluate, ServingParityWithFullRowsEqualsOffline) {
  const auto data = synthetic_data(1500, 80, 5);
  ModelConfig c;
  c.catalog_size = data.vocab.size();
  c.embedding_dim = 8;
  Rng rng(6);
  const Model<float> model(c, rng);
  const auto nn = build_nn_matrix(model.item_embeddings(), c.catalog_size - 1);
  const auto valid = std::span<const TrainingSequence>(data.valid);
  EXPECT_EQ(rank_targets(model, valid, EvalMode::serving_parity, &nn), rank_targets(model, valid));
  EXPECT_THROW(rank_targets(model, valid, EvalMode::serving_parity, nullptr), EvaluationError);
  const auto small = build_nn_matrix(model.item_embeddings(), 5);
  const auto restricted = evaluate(model, valid, 10, EvalMode::serving_parity, &small);
  EXPECT_LE(restricted.hit, 1.0);
}

TEST(Ablate, UnknownAxisAndBadValues) {
  const auto data = synthetic_data(300, 60);
  AblationConfig cfg;
  EXPECT_THROW(ablate("learning_rate", {"1"}, cfg, data), ConfigError);
  EXPECT_THROW(ablate("layer_pattern", {}, cfg, data), ConfigError);
  EXPECT_THROW(ablate("nn_size", {"0"}, cfg, data), ConfigError);
  EXPECT_THROW(ablate("nn_size", {"many"}, cfg, data), ConfigError);
  EXPECT_THROW(ablate("layer_pattern", {"GQ"}, cfg, data), ConfigError);
}

TEST(Ablate, OneRowPerCellAndReproducible) {
  const auto data = synthetic_data(500, 60);
  AblationConfig cfg;
  cfg.model.embedding_dim = 8;
  cfg.train.epochs = 1;
  cfg.latency_probe = 20;
  auto run = [&](const std::string& axis, const std::vector<std::string>& values) {
    std::ostringstream os;
    write_ablation_csv(os, ablate(axis, values, cfg, data), false);
    return os.str();
  };
  const auto a = run("layer_pattern", {"GA", "AG", "GG"});
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 4);
  EXPECT_EQ(a.substr(0, a.find('\n')), "layer_pattern,ndcg@10,hit@10,mrr@10");
  EXPECT_EQ(run("layer_pattern", {"GA", "AG", "GG"}), a);

  const std::size_t m = data.vocab.size();
  const auto grid = ablate("nn_size", {"5", "20", std::to_string(m - 1)}, cfg, data);
  ASSERT_EQ(grid.rows.size(), 3u);
  // Full neighbor rows make the restricted ranking the offline one.
  Rng rng(cfg.train.seed);
  ModelConfig mc = cfg.model;
  mc.catalog_size = m;
  Model<float> model(mc, rng);
  train(model, std::span<const TrainingSequence>(data.train), {}, cfg.train);
  const auto offline = evaluate(model, std::span<const TrainingSequence>(data.valid), 10);
  EXPECT_EQ(grid.rows[2].report.hit, offline.hit);
  EXPECT_EQ(grid.rows[2].report.ndcg, offline.ndcg);
  std::ostringstream timed;
  write_ablation_csv(timed, grid, true);
  EXPECT_NE(timed.str().find("train_seconds,p95_inference_us"), std::string::npos);
}

#ifdef GRAINREC_CLI
namespace {

struct Cli {
  fs::path dir = fs::temp_directory_path() / ("grainrec_cli_" + std::to_string(::getpid()));
  Cli() {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Cli() { fs::remove_all(dir); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(GRAINREC_CLI) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                            (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string out() const {
    std::ifstream in(dir / "stdout.txt");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST(Cli, PipelineEndToEnd) {
  Cli cli;
  {
    std::ofstream cfg(cli.path("run.cfg"));
    cfg << "embedding_dim=8\nepochs=1\nmin_frequency=1\nnn_size=20\n";
  }
  ASSERT_EQ(cli.run("synth --items 60 --sessions 600 --out " + cli.path("log.jsonl")), 0);
  ASSERT_EQ(cli.run("--config " + cli.path("run.cfg") + " prepare --input " + cli.path("log.jsonl") + " --out " + cli.path("data")), 0);
  EXPECT_TRUE(fs::exists(cli.path("data/train.bin")));
  ASSERT_EQ(cli.run("--config " + cli.path("run.cfg") + " train --data " + cli.path("data") + " --out " + cli.path("ckpt")), 0);
  for (const char* f : {"manifest.txt", "params.bin", "vocab.tsv", "training_log.csv"})
    EXPECT_TRUE(fs::exists(cli.path(std::string("ckpt/") + f))) << f;
  ASSERT_EQ(cli.run("--config " + cli.path("run.cfg") + " build-nn --checkpoint " + cli.path("ckpt")), 0);
  EXPECT_TRUE(fs::exists(cli.path("ckpt/nn_matrix.bin")));
  ASSERT_EQ(cli.run("eval --checkpoint " + cli.path("ckpt") + " --data " + cli.path("data") + " --mode both"), 0);
  EXPECT_NE(cli.out().find("popularity"), std::string::npos);
  EXPECT_NE(cli.out().find("ndcg@10"), std::string::npos);
  ASSERT_EQ(cli.run("bench --checkpoint " + cli.path("ckpt") + " --requests 20"), 0);
  EXPECT_NE(cli.out().find("p95_us"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  Cli cli;
  EXPECT_EQ(cli.run("--help"), 0);
  EXPECT_EQ(cli.run(""), 1);
  EXPECT_EQ(cli.run("frobnicate"), 1);
  EXPECT_EQ(cli.run("prepare --input /nonexistent.jsonl --out " + cli.path("d")), 1);
  {
    std::ofstream bad(cli.path("bad.jsonl"));
    for (int i = 0; i < 30; ++i) bad << "not json\n";
  }
  EXPECT_EQ(cli.run("prepare --input " + cli.path("bad.jsonl") + " --out " + cli.path("d")), 2);
  {
    std::ofstream cfg(cli.path("bad.cfg"));
    cfg << "learning_rat=1\n";
  }
  EXPECT_EQ(cli.run("--config " + cli.path("bad.cfg") + " synth --out " + cli.path("x.jsonl")), 1);
  fs::create_directories(cli.path("empty"));
  EXPECT_EQ(cli.run("train --data " + cli.path("empty") + " --out " + cli.path("c")), 2);
}
#endif
