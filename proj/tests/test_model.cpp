#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "braintorrent/errors.hpp"
#include "braintorrent/model.hpp"
#include "braintorrent/rng.hpp"

using namespace bt;

namespace {

Batch random_batch(const ModelSpec& spec, std::size_t n, Rng& rng) {
  Batch b{Matrix(n, spec.input_dim), std::vector<Label>(n)};
  for (auto& v : b.pixels.data) v = rng.uniform(-1.0, 1.0);
  for (auto& y : b.labels) y = static_cast<Label>(rng.below(spec.num_classes));
  return b;
}

}  // namespace

TEST(ModelSpec, ParameterCountMatchesLayerArithmetic) {
  ModelSpec spec{4, {16, 8}, 3};
  EXPECT_EQ(spec.parameter_count(), (4 + 1) * 16 + (16 + 1) * 8 + (8 + 1) * 3);
  ModelSpec softmax{5, {}, 4};
  EXPECT_EQ(softmax.parameter_count(), (5 + 1) * 4);
}

TEST(ModelSpec, RejectsDegenerateShapes) {
  EXPECT_THROW((ModelSpec{0, {}, 2}.validate()), InvalidArgument);
  EXPECT_THROW((ModelSpec{3, {}, 1}.validate()), InvalidArgument);
  EXPECT_THROW((ModelSpec{3, {0}, 2}.validate()), InvalidArgument);
}

TEST(ModelSpec, FingerprintSeparatesArchitectures) {
  EXPECT_EQ((ModelSpec{4, {8}, 4}.fingerprint()), (ModelSpec{4, {8}, 4}.fingerprint()));
  EXPECT_NE((ModelSpec{4, {8}, 4}.fingerprint()), (ModelSpec{4, {9}, 4}.fingerprint()));
  EXPECT_NE((ModelSpec{4, {8, 8}, 4}.fingerprint()), (ModelSpec{4, {8}, 4}.fingerprint()));
}

TEST(InitModel, DeterministicPerSeed) {
  ModelSpec spec{4, {16, 16}, 4};
  EXPECT_TRUE(bitwise_equal(init_model(spec, 1), init_model(spec, 1)));
  EXPECT_FALSE(bitwise_equal(init_model(spec, 1), init_model(spec, 2)));
}

TEST(InitModel, GlorotBoundsAndZeroBias) {
  ModelSpec spec{4, {16}, 3};
  const auto w = init_model(spec, 9);
  const double b0 = std::sqrt(6.0 / 20.0);
  for (std::size_t k = 0; k < 4 * 16; ++k) EXPECT_LE(std::abs(w.params[k]), b0);
  for (std::size_t k = 4 * 16; k < 5 * 16; ++k) EXPECT_EQ(w.params[k], 0.0);
  const std::size_t off = 5 * 16;
  const double b1 = std::sqrt(6.0 / 19.0);
  for (std::size_t k = 0; k < 16 * 3; ++k) EXPECT_LE(std::abs(w.params[off + k]), b1);
  for (std::size_t k = off + 48; k < w.params.size(); ++k) EXPECT_EQ(w.params[k], 0.0);
}

TEST(Forward, ShapeAndFiniteness) {
  ModelSpec spec{4, {8}, 4};
  Rng rng(3);
  const auto b = random_batch(spec, 13, rng);
  const auto logits = forward(spec, init_model(spec, 5), b.pixels);
  EXPECT_EQ(logits.rows, 13u);
  EXPECT_EQ(logits.cols, 4u);
  for (double v : logits.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, RejectsMismatchedWeightsAndInputs) {
  ModelSpec spec{4, {8}, 4};
  ModelSpec other{4, {9}, 4};
  Matrix x(2, 4);
  EXPECT_THROW(forward(spec, init_model(other, 1), x), ShapeError);
  EXPECT_THROW(forward(spec, init_model(spec, 1), Matrix(2, 3)), ShapeError);
}

TEST(Loss, UniformLogitsGiveLogOfClassCount) {
  for (std::size_t c : {2u, 4u, 7u}) {
    ModelSpec spec{3, {5}, c};
    Rng rng(c);
    const auto lg = loss_and_grad(spec, zero_model(spec), random_batch(spec, 10, rng));
    EXPECT_NEAR(lg.loss, std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Loss, GradientMatchesCentralDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    ModelSpec spec{3, {6, 5}, 4};
    auto w = init_model(spec, 100 + trial);
    for (auto& p : w.params) p += rng.uniform(-0.1, 0.1);
    const auto batch = random_batch(spec, 9, rng);
    const auto analytic = loss_and_grad(spec, w, batch).grad;
    std::size_t good = 0;
    for (std::size_t k = 0; k < w.params.size(); ++k) {
      auto plus = w;
      auto minus = w;
      plus.params[k] += 1e-5;
      minus.params[k] -= 1e-5;
      const double fd = (loss_and_grad(spec, plus, batch).loss - loss_and_grad(spec, minus, batch).loss) / 2e-5;
      const double denom = std::max({std::abs(fd), std::abs(analytic[k]), 1e-8});
      if (std::abs(fd - analytic[k]) / denom < 1e-4 || std::abs(fd - analytic[k]) < 1e-9) ++good;
    }
    EXPECT_GE(static_cast<double>(good), 0.99 * static_cast<double>(w.params.size()));
  }
}

TEST(Loss, RejectsBadBatches) {
  ModelSpec spec{2, {}, 3};
  const auto w = zero_model(spec);
  EXPECT_THROW(loss_and_grad(spec, w, Batch{Matrix(0, 2), {}}), InvalidArgument);
  EXPECT_THROW(loss_and_grad(spec, w, Batch{Matrix(2, 2), {0}}), ShapeError);
  EXPECT_THROW(loss_and_grad(spec, w, Batch{Matrix(1, 2), {3}}), InvalidArgument);
}

TEST(Adam, ZeroGradientLeavesWeightsUnchanged) {
  ModelSpec spec{3, {4}, 2};
  const auto w = init_model(spec, 1);
  const std::vector<double> g(w.params.size(), 0.0);
  const auto [next, st] = adam_step(w, g, OptimizerState::zeros(g.size()), 1e-3);
  EXPECT_TRUE(bitwise_equal(next, w));
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  // With a constant gradient both bias-corrected moments are exact, so each
  // step moves the parameter by lr * |g| / (|g| + eps).
  std::vector<double> p{0.5};
  const std::vector<double> g{0.3};
  auto st = OptimizerState::zeros(1);
  const double lr = 0.01;
  double prev = p[0];
  for (int i = 0; i < 500; ++i) {
    adam_update(p, g, st, lr);
    const double step = prev - p[0];
    EXPECT_NEAR(step, lr * 0.3 / (0.3 + 1e-8), 1e-12);
    prev = p[0];
  }
  EXPECT_EQ(st.step_count, 500u);
}

TEST(Adam, MatchesHandIteratedUpdate) {
  std::vector<double> p{1.0, -2.0};
  auto st = OptimizerState::zeros(2);
  const std::vector<std::vector<double>> grads{{0.5, -1.0}, {-0.25, 2.0}, {1.0, 0.0}};
  double m0 = 0, v0 = 0, x0 = 1.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    adam_update(p, grads[t - 1], st, 0.1);
    const double g = grads[t - 1][0];
    m0 = 0.9 * m0 + 0.1 * g;
    v0 = 0.999 * v0 + 0.001 * g * g;
    x0 -= 0.1 * (m0 / (1 - std::pow(0.9, t))) / (std::sqrt(v0 / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_DOUBLE_EQ(p[0], x0);
  }
}

TEST(Adam, PureAndValidating) {
  ModelSpec spec{3, {4}, 2};
  const auto w = init_model(spec, 1);
  std::vector<double> g(w.params.size(), 0.25);
  const auto st = OptimizerState::zeros(g.size());
  const auto a = adam_step(w, g, st, 1e-3);
  const auto b = adam_step(w, g, st, 1e-3);
  EXPECT_TRUE(bitwise_equal(a.first, b.first));
  EXPECT_EQ(a.second, b.second);

  EXPECT_THROW(adam_step(w, g, st, 0.0), InvalidArgument);
  EXPECT_THROW(adam_step(w, std::vector<double>(3, 0.0), st, 1e-3), InvalidArgument);
  g[2] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(w, g, st, 1e-3), InvalidArgument);
  g[2] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adam_step(w, g, st, 1e-3), InvalidArgument);
}

TEST(WeightsFile, RoundTripsBitwise) {
  ModelSpec spec{4, {6}, 3};
  auto w = init_model(spec, 4);
  w.params[0] = -0.0;
  const auto bytes = serialize_weights(w);
  EXPECT_EQ(bytes.size(), 4 + 1 + 8 + 4 + 8 * w.params.size());
  EXPECT_TRUE(bitwise_equal(deserialize_weights(bytes), w));

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_weights(bad), InvalidArgument);
  EXPECT_THROW(deserialize_weights(std::span(bytes).first(bytes.size() - 3)), Error);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(deserialize_weights(extra), InvalidArgument);
}

TEST(Forward, RowsAreIndependent) {
  ModelSpec spec{4, {8, 5}, 3};
  Rng rng(21);
  const auto w = init_model(spec, 2);
  const auto b = random_batch(spec, 6, rng);
  const auto all = forward(spec, w, b.pixels);
  for (std::size_t r = 0; r < 6; ++r) {
    Matrix one(1, spec.input_dim);
    std::copy(b.pixels.row(r).begin(), b.pixels.row(r).end(), one.data.begin());
    EXPECT_TRUE(bitwise_equal(forward(spec, w, one).row(0), all.row(r)));
  }
}
