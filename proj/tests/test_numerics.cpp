// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "grainrec/numerics/matrix.hpp"
#include "grainrec/numerics/ops.hpp"
#include "grainrec/numerics/param_store.hpp"
#include "grainrec/numerics/tape.hpp"

using namespace grainrec;
using grainrec::testing::gradcheck;
using M = Matrix<double>;

namespace {

// Random-weighted sum so every output element contributes a distinct slope.
Var project(Tape<double>& t, Var y, std::uint64_t seed) {
  Rng rng(seed);
  const auto& v = t.value(y);
  return ops::sum(t, ops::hadamard(t, y, t.constant(random_uniform<double>(v.rows(), v.cols(), -1, 1, rng))));
}

std::size_t dim(Rng& rng) { return 1 + rng.below(8); }

}  // namespace

TEST(Matrix, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(M(2, 3, std::vector<double>(5)), DimensionError);
  M a(2, 3), b(3, 2);
  EXPECT_THROW(a += b, DimensionError);
}

TEST(Affine, IdentityInputReturnsWeights) {
  Tape<double> t(false);
  const M w{{1, 2}, {3, 4}};
  auto y = ops::affine(t, t.constant(M::identity(2)), t.constant(w));
  EXPECT_EQ(t.value(y), w);
}

TEST(Affine, ZeroInputGivesZeros) {
  Rng rng(1);
  Tape<double> t(false);
  auto y = ops::affine(t, t.constant(M(3, 4)), t.constant(random_uniform<double>(4, 5, -1, 1, rng)));
  EXPECT_EQ(t.value(y), M(3, 5));
}

TEST(Affine, ShapeErrorNamesBothShapes) {
  Tape<double> t(false);
  try {
    ops::affine(t, t.constant(M(3, 4)), t.constant(M(5, 2)));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3x4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("5x2"), std::string::npos) << msg;
  }
}

TEST(Affine, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  ParamStore<double> p;
  p.add("x", random_uniform<double>(3, 4, -1, 1, rng));
  p.add("w", random_uniform<double>(4, 2, -1, 1, rng));
  p.add("b", random_uniform<double>(1, 2, -1, 1, rng));
  auto r = gradcheck(p, [](Tape<double>& t, ParamStore<double>& p) {
    return project(t, ops::affine(t, t.param(p.at("x")), t.param(p.at("w")), t.param(p.at("b"))), 3);
  });
  EXPECT_LT(r.rel_error, 1e-6) << r.worst;
}

// Every differentiable op on random shapes up to 8.
TEST(Gradients, EveryOpOnRandomShapes) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = dim(rng), k = dim(rng), c = dim(rng);
    ParamStore<double> p;
    p.add("a", random_uniform<double>(n, k, -1, 1, rng));
    p.add("b", random_uniform<double>(n, k, -1, 1, rng));
    p.add("w", random_uniform<double>(k, c, -1, 1, rng));
    p.add("v", random_uniform<double>(c, k, -1, 1, rng));
    p.add("row", random_uniform<double>(1, k, -1, 1, rng));
    p.add("s", random_uniform<double>(n, 1, -1, 1, rng));
    std::vector<std::size_t> idx(1 + rng.below(8));
    for (auto& i : idx) i = rng.below(n);
    std::vector<std::size_t> scatter(n);
    for (auto& i : scatter) i = rng.below(3);
    const std::size_t lo = rng.below(n), hi = lo + 1 + rng.below(n - lo);
    auto r = gradcheck(p, [&](Tape<double>& t, ParamStore<double>& p) {
      Var a = t.param(p.at("a")), b = t.param(p.at("b"));
      Var w = t.param(p.at("w")), v = t.param(p.at("v"));
      Var terms[] = {
          project(t, ops::matmul(t, a, w), 1),
          project(t, ops::matmul_nt(t, a, v), 2),
          project(t, ops::add(t, a, b), 3),
          project(t, ops::add_row(t, a, t.param(p.at("row"))), 4),
          project(t, ops::hadamard(t, a, b), 5),
          project(t, ops::scale_rows(t, a, t.param(p.at("s"))), 6),
          project(t, ops::sigmoid(t, a), 7),
          project(t, ops::tanh(t, b), 8),
          project(t, ops::gather_rows(t, a, idx), 9),
          project(t, ops::scatter_add_rows(t, b, scatter, 3), 10),
          project(t, ops::slice_rows(t, a, lo, hi), 11),
          project(t, ops::concat_cols(t, a, b), 12),
      };
      Var total = terms[0];
      for (std::size_t i = 1; i < std::size(terms); ++i) total = ops::add(t, total, terms[i]);
      return total;
    });
    EXPECT_LT(r.rel_error, 1e-6) << "trial " << trial << " worst " << r.worst;
  }
}

TEST(RowSoftmax, EqualScoresAreUniform) {
  const M s{{2.5}, {2.5}, {2.5}};
  const std::vector<std::size_t> seg{0, 0, 0};
  const auto y = ops::row_softmax(s, std::span<const std::size_t>(seg), 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3, 1e-15);
}

TEST(RowSoftmax, SingletonIsOne) {
  for (double x : {-700.0, -3.0, 0.0, 42.0, 700.0}) {
    const M s{{x}};
    const std::vector<std::size_t> seg{0};
    EXPECT_EQ(ops::row_softmax(s, std::span<const std::size_t>(seg), 1)[0], 1.0);
  }
}

TEST(RowSoftmax, ClosedFormTwoEntries) {
  const M s{{0.0}, {std::log(3.0)}};
  const std::vector<std::size_t> seg{0, 0};
  const auto y = ops::row_softmax(s, std::span<const std::size_t>(seg), 1);
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(RowSoftmax, EmptySegmentIsGroupingError) {
  const M s{{1.0}, {2.0}};
  const std::vector<std::size_t> seg{0, 2};
  EXPECT_THROW(ops::row_softmax(s, std::span<const std::size_t>(seg), 3), GroupingError);
}

TEST(RowSoftmax, SegmentsSumToOneProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t segs = 1 + rng.below(6), rows = segs + rng.below(20), cols = 1 + rng.below(3);
    std::vector<std::size_t> seg(rows);
    for (std::size_t i = 0; i < rows; ++i) seg[i] = i < segs ? i : rng.below(segs);
    const auto s = random_uniform<double>(rows, cols, -50, 50, rng);
    const auto y = ops::row_softmax(s, std::span<const std::size_t>(seg), segs);
    M total(segs, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        ASSERT_GE(y(r, c), 0.0);
        total(seg[r], c) += y(r, c);
      }
    for (std::size_t i = 0; i < total.size(); ++i) ASSERT_NEAR(total[i], 1.0, 1e-6);
  }
}

TEST(RowSoftmax, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t segs = 1 + rng.below(3), rows = segs + rng.below(6);
    std::vector<std::size_t> seg(rows);
    for (std::size_t i = 0; i < rows; ++i) seg[i] = i < segs ? i : rng.below(segs);
    ParamStore<double> p;
    p.add("s", random_uniform<double>(rows, 2, -2, 2, rng));
    auto r = gradcheck(p, [&](Tape<double>& t, ParamStore<double>& p) {
      return project(t, ops::segment_softmax(t, t.param(p.at("s")), seg, segs), 21);
    });
    EXPECT_LT(r.rel_error, 1e-6);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogM) {
  for (std::size_t m : {2u, 7u, 100u}) {
    Tape<double> t(false);
    auto l = ops::softmax_cross_entropy(t, t.constant(M(3, m, 0.25)), {0, 1, m - 1});
    EXPECT_NEAR(t.value(l)[0], std::log(static_cast<double>(m)), 1e-12);
  }
}

TEST(CrossEntropy, SaturatedTarget) {
  M logits(1, 5);
  logits(0, 2) = 30;
  Tape<double> t(false);
  auto l = ops::softmax_cross_entropy(t, t.constant(logits), {2});
  EXPECT_LT(t.value(l)[0], 1e-12);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  Tape<double> t(false);
  EXPECT_THROW(ops::softmax_cross_entropy(t, t.constant(M(2, 3)), {0, 3}), IndexError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  ParamStore<double> p;
  p.add("logits", random_uniform<double>(4, 7, -3, 3, rng));
  auto r = gradcheck(p, [](Tape<double>& t, ParamStore<double>& p) {
    return ops::softmax_cross_entropy(t, t.param(p.at("logits")), {0, 3, 6, 3});
  });
  EXPECT_LT(r.rel_error, 1e-6);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverRows) {
  const M logits{{0.0, std::log(3.0)}, {1.0, 1.0}};
  ParamStore<double> p;
  p.add("l", logits);
  Tape<double> t(true);
  t.backward(ops::softmax_cross_entropy(t, t.param(p.at("l")), {1, 0}));
  const auto& g = p.at("l").grad;
  EXPECT_NEAR(g(0, 0), 0.25 / 2, 1e-15);
  EXPECT_NEAR(g(0, 1), (0.75 - 1) / 2, 1e-15);
  EXPECT_NEAR(g(1, 0), (0.5 - 1) / 2, 1e-15);
  EXPECT_NEAR(g(1, 1), 0.5 / 2, 1e-15);
}

namespace {

ParamStore<double> gru_params(std::size_t in, std::size_t hd, Rng& rng, double scale = 0.5) {
  ParamStore<double> p;
  p.add("wx", random_uniform<double>(in, 3 * hd, -scale, scale, rng));
  p.add("wh", random_uniform<double>(hd, 3 * hd, -scale, scale, rng));
  p.add("bx", random_uniform<double>(1, 3 * hd, -scale, scale, rng));
  p.add("bh", random_uniform<double>(1, 3 * hd, -scale, scale, rng));
  return p;
}

ops::GruWeights bind_gru(Tape<double>& t, ParamStore<double>& p) {
  return {t.param(p.at("wx")), t.param(p.at("wh")), t.param(p.at("bx")), t.param(p.at("bh"))};
}

}  // namespace

TEST(Gru, ZeroParametersHalveState) {
  Rng rng(3);
  const auto h = random_uniform<double>(4, 5, -2, 2, rng);
  ParamStore<double> p;
  p.add("wx", M(3, 15));
  p.add("wh", M(5, 15));
  p.add("bx", M(1, 15));
  p.add("bh", M(1, 15));
  Tape<double> t(false);
  auto y = ops::gru_cell(t, t.constant(h), t.constant(random_uniform<double>(4, 3, -1, 1, rng)), bind_gru(t, p));
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], 0.5 * h[i]);
}

TEST(Gru, EmptyFoldReturnsInitialState) {
  Rng rng(4);
  auto p = gru_params(3, 5, rng);
  Tape<double> t(false);
  Var h = t.constant(random_uniform<double>(2, 5, -1, 1, rng));
  Var out = ops::gru_fold(t, h, std::span<const Var>{}, bind_gru(t, p));
  EXPECT_EQ(out.id, h.id);
}

TEST(Gru, RowMismatchIsDimensionError) {
  Rng rng(4);
  auto p = gru_params(3, 5, rng);
  Tape<double> t(false);
  EXPECT_THROW(ops::gru_cell(t, t.constant(M(2, 5)), t.constant(M(3, 3)), bind_gru(t, p)), DimensionError);
}

TEST(Gru, ThreeStepChainGradient) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t in = dim(rng), hd = dim(rng), n = dim(rng);
    auto p = gru_params(in, hd, rng);
    p.add("h0", random_uniform<double>(n, hd, -1, 1, rng));
    for (int s = 0; s < 3; ++s) p.add("x" + std::to_string(s), random_uniform<double>(n, in, -1, 1, rng));
    auto r = gradcheck(p, [](Tape<double>& t, ParamStore<double>& p) {
      std::vector<Var> xs;
      for (int s = 0; s < 3; ++s) xs.push_back(t.param(p.at("x" + std::to_string(s))));
      return project(t, ops::gru_fold(t, t.param(p.at("h0")), std::span<const Var>(xs), bind_gru(t, p)), 31);
    });
    EXPECT_LT(r.rel_error, 1e-5) << r.worst;
  }
}

namespace {

struct BnFixture {
  M mean, var, mean_out, var_out;
  explicit BnFixture(std::size_t d) : mean(1, d), var(1, d, 1.0), mean_out(1, d), var_out(1, d) {}
  ops::BatchNormState<double> state(Var gamma, Var beta) {
    ops::BatchNormState<double> s;
    s.gamma = gamma;
    s.beta = beta;
    s.running_mean = &mean;
    s.running_var = &var;
    s.mean_update = &mean_out;
    s.var_update = &var_out;
    return s;
  }
};

}  // namespace

TEST(BatchNormDropout, EvalWithUnitStatsAndNoDropIsIdentity) {
  Rng rng(12);
  const auto x = random_uniform<double>(6, 4, -3, 3, rng);
  BnFixture f(4);
  Tape<double> t(false);
  auto y = ops::batchnorm_dropout(t, t.constant(x), f.state(t.constant(M(1, 4, 1.0)), t.constant(M(1, 4))),
                                  Mode::eval, 0.0, rng);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(t.value(y)[i], x[i], 1e-5 * std::abs(x[i]) + 1e-12);
}

TEST(BatchNormDropout, MaskReproducibleUnderSeed) {
  Rng data(13);
  const auto x = random_uniform<double>(10, 8, -1, 1, data);
  auto run = [&] {
    BnFixture f(8);
    Rng rng(77);
    Tape<double> t(false);
    auto y = ops::batchnorm_dropout(t, t.constant(x), f.state(t.constant(M(1, 8, 1.0)), t.constant(M(1, 8))),
                                    Mode::train, 0.5, rng);
    return t.value(y);
  };
  EXPECT_EQ(run(), run());
}

TEST(BatchNormDropout, RateAtLeastOneIsConfigError) {
  Rng rng(1);
  BnFixture f(2);
  Tape<double> t(false);
  EXPECT_THROW(ops::batchnorm_dropout(t, t.constant(M(2, 2)), f.state(t.constant(M(1, 2, 1.0)), t.constant(M(1, 2))),
                                      Mode::train, 1.0, rng),
               ConfigError);
  EXPECT_THROW(ops::dropout(t, t.constant(M(2, 2)), -0.1, Mode::eval, rng), ConfigError);
}

TEST(Dropout, SurvivorScalingPreservesMean) {
  const std::size_t n = 100000;
  Rng rng(14);
  const M x(n, 1, 2.0);
  Tape<double> t(false);
  auto y = ops::dropout(t, t.constant(x), 0.146, Mode::train, rng);
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += t.value(y)[i];
  mean /= static_cast<double>(n);
  EXPECT_NEAR(mean, 2.0, 0.05 * 2.0);
}

TEST(BatchNorm, TrainModeNormalisesAndUpdatesRunningStats) {
  const M x{{1.0}, {3.0}};
  BnFixture f(1);
  Tape<double> t(false);
  auto y = ops::batchnorm(t, t.constant(x), f.state(t.constant(M(1, 1, 1.0)), t.constant(M(1, 1))), Mode::train);
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(t.value(y)[0], -s, 1e-12);
  EXPECT_NEAR(t.value(y)[1], s, 1e-12);
  EXPECT_NEAR(f.mean_out[0], 0.9 * 0 + 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(f.var_out[0], 0.9 * 1 + 0.1 * 2.0, 1e-15);  // unbiased batch variance is 2
}

TEST(BatchNorm, GradientBothModes) {
  Rng rng(15);
  for (Mode mode : {Mode::train, Mode::eval}) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t n = 2 + rng.below(7), d = dim(rng);
      ParamStore<double> p;
      p.add("x", random_uniform<double>(n, d, -2, 2, rng));
      p.add("gamma", random_uniform<double>(1, d, 0.5, 1.5, rng));
      p.add("beta", random_uniform<double>(1, d, -1, 1, rng));
      BnFixture f(d);
      f.mean = random_uniform<double>(1, d, -0.5, 0.5, rng);
      f.var = random_uniform<double>(1, d, 0.5, 2, rng);
      auto r = gradcheck(p, [&](Tape<double>& t, ParamStore<double>& p) {
        Rng drop(99);
        auto y = ops::batchnorm_dropout(t, t.param(p.at("x")), f.state(t.param(p.at("gamma")), t.param(p.at("beta"))),
                                        mode, 0.3, drop);
        return project(t, y, 41);
      });
      EXPECT_LT(r.rel_error, 1e-6) << (mode == Mode::train ? "train" : "eval") << ' ' << r.worst;
    }
  }
}

TEST(BatchNorm, TrainModeWithoutUpdateTargetsIsStateError) {
  BnFixture f(2);
  Tape<double> t(false);
  auto s = f.state(t.constant(M(1, 2, 1.0)), t.constant(M(1, 2)));
  s.mean_update = nullptr;
  EXPECT_THROW(ops::batchnorm(t, t.constant(M(3, 2)), s, Mode::train), StateError);
}

TEST(Tape, NonFiniteFreeOnFiniteInputs) {
  Rng rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    ParamStore<double> p;
    p.add("a", random_uniform<double>(4, 5, -20, 20, rng));
    p.add("w", random_uniform<double>(5, 3, -20, 20, rng));
    Tape<double> t(true);
    Var h = ops::tanh(t, ops::matmul(t, t.param(p.at("a")), t.param(p.at("w"))));
    Var l = ops::softmax_cross_entropy(t, ops::sigmoid(t, h), {0, 1, 2, 0});
    t.backward(l);
    ASSERT_TRUE(t.value(l).all_finite());
    ASSERT_TRUE(p.at("a").grad.all_finite());
    ASSERT_TRUE(p.at("w").grad.all_finite());
  }
}

TEST(Tape, BackwardOnNonRecordingTapeIsStateError) {
  Tape<double> t(false);
  auto v = t.constant(M(1, 1, 1.0));
  EXPECT_THROW(t.backward(v), StateError);
}

TEST(Tape, ForwardIsBitIdenticalAcrossRuns) {
  auto run = [] {
    Rng rng(17);
    Tape<double> t(false);
    Var a = t.constant(random_uniform<double>(5, 6, -1, 1, rng));
    Var w = t.constant(random_uniform<double>(6, 6, -1, 1, rng));
    return t.value(ops::dropout(t, ops::tanh(t, ops::matmul(t, a, w)), 0.2, Mode::train, rng));
  };
  EXPECT_EQ(run(), run());
}

TEST(ParamStore, DuplicateNameAndMissingName) {
  ParamStore<double> p;
  p.add("w", M(2, 2));
  EXPECT_THROW(p.add("w", M(1, 1)), ConfigError);
  EXPECT_THROW(p.at("missing"), KeyError);
}

TEST(ParamStore, ValueAndGradShapesMatch) {
  ParamStore<double> p;
  p.add("a", M(3, 4));
  p.add("b", M(1, 7));
  for (const auto& e : p.entries()) {
    EXPECT_TRUE(e.value.same_shape(e.grad));
    EXPECT_TRUE(e.value.same_shape(e.moment1));
    EXPECT_TRUE(e.value.same_shape(e.moment2));
  }
}

TEST(Rng, SplitAndShuffleAreDeterministic) {
  Rng a(5), b(5);
  std::vector<int> va(50), vb(50);
  std::iota(va.begin(), va.end(), 0);
  vb = va;
  a.shuffle(va);
  b.shuffle(vb);
  EXPECT_EQ(va, vb);
  EXPECT_EQ(a.split().next_u64(), b.split().next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(a.below(7), 7u);
  }
}
