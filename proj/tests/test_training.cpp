// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "grainrec/checkpoint.hpp"
#include "grainrec/config.hpp"
#include "grainrec/synthetic.hpp"
#include "grainrec/training.hpp"

using namespace grainrec;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("grainrec_training_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

PreparedData small_corpus(std::size_t sessions = 3000, std::size_t items = 80) {
  SyntheticSpec spec;
  spec.items = items;
  spec.sessions = sessions;
  return prepare_corpus(synthetic_sessions(spec), 1, 0.1);
}

Model<double> tiny_model(std::size_t d = 4, std::uint64_t seed = 1) {
  ModelConfig c;
  c.catalog_size = 7;
  c.embedding_dim = d;
  Rng rng(seed);
  return Model<double>(c, rng);
}

}  // namespace

TEST(Optimizer, SingleStepClosedForm) {
  ParamStore<double> p;
  p.add("w", Matrix<double>{{1.0, -2.0}});
  p.at("w").grad = Matrix<double>{{0.5, -0.25}};
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  optimizer_step(p, cfg);
  // First step: bias-corrected moments are g and g^2, so the step is lr*sign(g).
  const double eps = cfg.epsilon;
  EXPECT_NEAR(p.value("w")(0, 0), 1.0 * (1 - 0.001) - 0.1 * 0.5 / (0.5 + eps), 1e-12);
  EXPECT_NEAR(p.value("w")(0, 1), -2.0 * (1 - 0.001) + 0.1 * 0.25 / (0.25 + eps), 1e-12);
  EXPECT_EQ(p.step(), 1u);
}

TEST(Optimizer, SecondStepUsesBiasCorrection) {
  ParamStore<double> p;
  p.add("w", Matrix<double>{{0.0}});
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0;
  p.at("w").grad = Matrix<double>{{1.0}};
  optimizer_step(p, cfg);
  p.at("w").grad = Matrix<double>{{3.0}};
  optimizer_step(p, cfg);
  const double m = (0.9 * 0.1 + 0.1 * 3.0) / (1 - 0.81);
  const double v = (0.999 * 0.001 + 0.001 * 9.0) / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p.value("w")(0, 0), -0.01 / (1 + cfg.epsilon) - 0.01 * m / (std::sqrt(v) + cfg.epsilon), 1e-12);
}

TEST(Optimizer, ZeroGradientOnlyDecays) {
  ParamStore<double> p;
  p.add("w", Matrix<double>{{2.0, -4.0}});
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.weight_decay = 0.1;
  optimizer_step(p, cfg);
  EXPECT_DOUBLE_EQ(p.value("w")(0, 0), 2.0 * 0.95);
  EXPECT_DOUBLE_EQ(p.value("w")(0, 1), -4.0 * 0.95);
}

TEST(Optimizer, SkipsNonTrainable) {
  ParamStore<double> p;
  p.add("stat", Matrix<double>{{3.0}}, false);
  p.at("stat").grad = Matrix<double>{{1.0}};
  optimizer_step(p, TrainConfig{});
  EXPECT_EQ(p.value("stat")(0, 0), 3.0);
}

TEST(Clip, ScalesToMaxNorm) {
  ParamStore<double> p;
  p.add("a", Matrix<double>{{0, 0}});
  p.add("b", Matrix<double>{{0}});
  p.at("a").grad = Matrix<double>{{6, 0}};
  p.at("b").grad = Matrix<double>{{8}};
  EXPECT_DOUBLE_EQ(clip_gradients(p, 5.0), 10.0);
  EXPECT_NEAR(p.at("a").grad(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(p.at("b").grad(0, 0), 4.0, 1e-12);
  EXPECT_NEAR(p.grad_norm(), 5.0, 1e-12);
}

TEST(Clip, LeavesSmallGradientsAlone) {
  ParamStore<double> p;
  p.add("a", Matrix<double>{{0.3, 0.4}});
  p.at("a").grad = Matrix<double>{{0.3, 0.4}};
  clip_gradients(p, 5.0);
  EXPECT_EQ(p.at("a").grad(0, 1), 0.4);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.precision = 16;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Train, EmptyDataIsInputError) {
  auto model = tiny_model();
  std::vector<TrainingSequence> none;
  EXPECT_THROW(train(model, std::span<const TrainingSequence>(none), {}, TrainConfig{}), InputError);
}

TEST(Train, NonFiniteLossNamesParameters) {
  auto model = tiny_model();
  model.params().value("readout.q")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrainingSequence> data{{{1, 2}, 3}};
  try {
    train(model, std::span<const TrainingSequence>(data), {}, TrainConfig{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("readout.q"), std::string::npos);
  }
}

TEST(Train, LossFallsOverFirstEpochs) {
  const auto data = small_corpus();
  ModelConfig mc;
  mc.catalog_size = data.vocab.size();
  mc.embedding_dim = 16;
  Rng rng(3);
  Model<float> model(mc, rng);
  TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 0.003;
  const auto log = train(model, std::span<const TrainingSequence>(data.train), std::span<const TrainingSequence>(data.valid), tc);
  ASSERT_EQ(log.size(), 3u);
  int upticks = 0;
  for (std::size_t e = 1; e < log.size(); ++e) {
    if (log[e].loss > log[e - 1].loss) {
      ++upticks;
      EXPECT_LE(log[e].loss, log[e - 1].loss * 1.01);
    }
  }
  EXPECT_LE(upticks, 1);
  EXPECT_LT(log.back().loss, std::log(static_cast<double>(mc.catalog_size)));
  EXPECT_TRUE(std::isfinite(log.back().hit));
}

TEST(Train, SameSeedSameParameters) {
  const auto data = small_corpus(600, 60);
  ModelConfig mc;
  mc.catalog_size = data.vocab.size();
  mc.embedding_dim = 8;
  TrainConfig tc;
  tc.epochs = 2;
  auto run = [&] {
    Rng rng(tc.seed);
    Model<float> model(mc, rng);
    train(model, std::span<const TrainingSequence>(data.train), {}, tc);
    return model;
  };
  const auto a = run();
  const auto b = run();
  EXPECT_TRUE(a.params().values_equal(b.params()));
}

TEST(Train, LogCsvColumns) {
  std::vector<EpochLog> log{{1, 2.5, 0.25, 1.0}};
  std::ostringstream with, without;
  write_training_log_csv(with, log, 10, true);
  write_training_log_csv(without, log, 10, false);
  EXPECT_EQ(with.str().substr(0, with.str().find('\n')), "epoch,loss,hit@10,wall_seconds");
  EXPECT_EQ(without.str(), "epoch,loss,hit@10\n1,2.5,0.25\n");
}

TEST(DatasetLoss, MatchesBatchLoss) {
  auto model = tiny_model(3, 9);
  std::vector<TrainingSequence> data{{{1, 2}, 3}, {{4, 5, 6}, 0}, {{2}, 1}};
  Tape<double> t(false);
  Rng rng(0);
  const double direct = t.value(model.batch_loss(t, data, Mode::eval, rng))[0];
  EXPECT_NEAR(dataset_loss(model, std::span<const TrainingSequence>(data), 2), direct, 1e-12);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  ModelConfig mc;
  mc.catalog_size = 30;
  mc.embedding_dim = 8;
  mc.layer_pattern = "GAGA";
  Rng rng(11);
  Model<float> model(mc, rng);
  const auto d1 = scratch("a"), d2 = scratch("b");
  save_checkpoint(d1, model, TrainConfig{}, 1234);
  const auto ck = load_checkpoint(d1);
  EXPECT_EQ(ck.vocab_hash, 1234u);
  EXPECT_EQ(ck.model.layer_pattern, "GAGA");
  save_checkpoint(d2, model_from_checkpoint<float>(ck), ck.train, ck.vocab_hash);
  EXPECT_EQ(slurp(d1 / "manifest.txt"), slurp(d2 / "manifest.txt"));
  EXPECT_EQ(slurp(d1 / "params.bin"), slurp(d2 / "params.bin"));
  EXPECT_TRUE(model_from_checkpoint<float>(ck).params().values_equal(model.params()));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Checkpoint, ParamsFileSizeMatchesManifest) {
  auto model = tiny_model(4);
  const auto dir = scratch("size");
  save_checkpoint(dir, model, TrainConfig{}, 0);
  std::size_t floats = 0;
  for (const auto& e : model.params().entries()) floats += e.value.size();
  EXPECT_EQ(fs::file_size(dir / "params.bin"), floats * 4);
  fs::remove_all(dir);
}

TEST(Checkpoint, LoadIntoDifferentWidthNamesParameter) {
  ModelConfig mc;
  mc.catalog_size = 12;
  mc.embedding_dim = 32;
  Rng rng(1);
  Model<float> small(mc, rng);
  const auto ck = make_checkpoint(small, TrainConfig{}, 0);
  mc.embedding_dim = 64;
  Model<float> big(mc, rng);
  try {
    load_params_into(ck, big.params());
    FAIL();
  } catch (const CompatibilityError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("item_embedding"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(12x32)"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, CorruptManifestNamesField) {
  auto model = tiny_model();
  std::ostringstream os;
  write_manifest(os, make_checkpoint(model, TrainConfig{}, 5));
  const std::string good = os.str();
  auto expect_field = [](const std::string& text, const std::string& field) {
    std::istringstream is(text);
    try {
      read_manifest(is);
      ADD_FAILURE() << "no error for " << field;
    } catch (const CompatibilityError& e) {
      EXPECT_NE(std::string(e.what()).find("'" + field + "'"), std::string::npos) << e.what();
    }
  };
  auto replace = [&](const std::string& from, const std::string& to) {
    std::string s = good;
    s.replace(s.find(from), from.size(), to);
    return s;
  };
  expect_field(replace("embedding_dim=4", "embedding_dim=four"), "embedding_dim");
  expect_field(replace("version=1", "version=9"), "version");
  expect_field(replace("dropout=", "dropout_rate="), "dropout");
  expect_field(replace("graph_mode=disjoint", "graph_mode=tangled"), "graph_mode");
  expect_field(replace("param item_embedding 7 4 1", "param item_embedding 7"), "param");
  expect_field(good + "colour=blue\n", "colour");
}

TEST(Checkpoint, TruncatedOrPaddedParamsFile) {
  auto model = tiny_model();
  const auto dir = scratch("trunc");
  save_checkpoint(dir, model, TrainConfig{}, 0);
  const auto size = fs::file_size(dir / "params.bin");
  fs::resize_file(dir / "params.bin", size - 2);
  EXPECT_THROW(load_checkpoint(dir), CompatibilityError);
  fs::resize_file(dir / "params.bin", size + 4);
  EXPECT_THROW(load_checkpoint(dir), CompatibilityError);
  fs::remove(dir / "params.bin");
  EXPECT_THROW(load_checkpoint(dir), IoError);
  fs::remove_all(dir);
}

TEST(Config, ParsesKeysAndComments) {
  std::istringstream in("# run\nembedding_dim = 16\nlayer_pattern=GAGA\n\nlearning_rate=0.001\ngraph_mode=merged\nnn_size=50\n");
  RunConfig c;
  read_config(in, c);
  EXPECT_EQ(c.model.embedding_dim, 16u);
  EXPECT_EQ(c.model.layer_pattern, "GAGA");
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 0.001);
  EXPECT_EQ(c.model.graph_mode, GraphMode::merged);
  EXPECT_EQ(c.nn_size, 50u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  RunConfig c;
  EXPECT_THROW(set_config_value(c, "emb_dim", "16"), ConfigError);
  EXPECT_THROW(set_config_value(c, "embedding_dim", "16x"), ConfigError);
  std::istringstream in("just words\n");
  EXPECT_THROW(read_config(in, c), ConfigError);
}
