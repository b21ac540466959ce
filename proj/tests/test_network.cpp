#include <gtest/gtest.h>

#include "reference.hpp"
#include "test_util.hpp"
#include "twins/training.hpp"

namespace twins {
namespace {

using T = Tensor<double>;

BnLayerState<double> single_channel_state(double frozen_mean, double frozen_var, double eps) {
  BnLayerState<double> s;
  s.running_mean = s.frozen_mean = BnLayerState<double>::Vector::Constant(1, frozen_mean);
  s.running_var = s.frozen_var = BnLayerState<double>::Vector::Constant(1, frozen_var);
  s.eps = eps;
  return s;
}

T run_bn(const T& x, const BnLayerState<double>& state, BranchMode mode, double gamma = 1, double beta = 0) {
  Tape<double> tape;
  return bn_forward(tape.constant(x), tape.constant(T({1}, {gamma})), tape.constant(T({1}, {beta})), state, mode)
      .output.value();
}

TEST(BnForward, FrozenUsesPretrainingStatistics) {
  const auto state = single_channel_state(0.0, 4.0, 0.0);
  EXPECT_EQ(run_bn(T({1, 1, 1, 1}, {4}), state, BranchMode::FrozenTrain)[0], 2.0);
  const auto centered = single_channel_state(0.7, 3.0, 1e-5);
  const T out = run_bn(T::constant({3, 1, 2, 2}, 0.7), centered, BranchMode::FrozenTrain, 1.9, -0.25);
  for (Index i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], -0.25);
}

TEST(BnForward, AdaptiveUsesBatchStatistics) {
  const auto state = single_channel_state(100.0, 100.0, 0.0);
  const T out = run_bn(T({2, 1, 1, 1}, {1, 3}), state, BranchMode::AdaptiveTrain);
  EXPECT_EQ(out[0], -1.0);
  EXPECT_EQ(out[1], 1.0);
}

TEST(BnForward, AdaptiveRejectsSingleSampleBatch) {
  EXPECT_THROW(run_bn(T({1, 1, 1, 1}, {1}), single_channel_state(0, 1, 1e-5), BranchMode::AdaptiveTrain),
               InvalidArgument);
}

TEST(BnForward, InferenceUsesRunningStatistics) {
  auto state = single_channel_state(0.0, 1.0, 0.0);
  state.running_mean(0) = 1.0;
  state.running_var(0) = 16.0;
  EXPECT_EQ(run_bn(T({1, 1, 1, 1}, {9}), state, BranchMode::Inference)[0], 2.0);
}

TEST(BnUpdateRunning, EmaExamples) {
  auto state = single_channel_state(0.0, 0.0, 1e-5);
  ChannelStats<double> batch{BnLayerState<double>::Vector::Constant(1, 1.0),
                             BnLayerState<double>::Vector::Constant(1, 1.0)};
  bn_update_running(state, batch);
  EXPECT_DOUBLE_EQ(state.running_mean(0), 0.1);

  auto fixed = single_channel_state(0.0, 0.0, 1e-5);
  fixed.running_mean(0) = 2.5;
  fixed.running_var(0) = 3.0;
  bn_update_running(fixed, {BnLayerState<double>::Vector::Constant(1, 2.5), BnLayerState<double>::Vector::Constant(1, 3.0)});
  EXPECT_DOUBLE_EQ(fixed.running_mean(0), 2.5);
  EXPECT_DOUBLE_EQ(fixed.running_var(0), 3.0);

  auto twice = single_channel_state(0.0, 0.0, 1e-5);
  const double s = 1.37;
  ChannelStats<double> sb{BnLayerState<double>::Vector::Constant(1, s), BnLayerState<double>::Vector::Constant(1, s)};
  bn_update_running(twice, sb);
  bn_update_running(twice, sb);
  EXPECT_NEAR(twice.running_mean(0), 0.19 * s, 1e-15);
  EXPECT_NEAR(twice.running_var(0), 0.19 * s, 1e-15);
}

TEST(ModelForward, ShapeContract) {
  std::mt19937_64 rng(1);
  const auto model = testing::tiny_model(rng, 5, 7);
  const T x = testing::image_batch(model, 3, rng);
  for (BranchMode mode : {BranchMode::AdaptiveTrain, BranchMode::FrozenTrain, BranchMode::Inference}) {
    for (Head head : {Head::Target, Head::Source}) {
      Tape<double> tape;
      const auto fp = forward(model, bind_constants(tape, model.params), mode, tape.constant(x), head);
      EXPECT_EQ(fp.features.shape(), (Shape{3, 4}));
      EXPECT_EQ(fp.logits.shape(), (Shape{3, head == Head::Target ? 5 : 7}));
    }
  }
}

TEST(ModelForward, MatchesLoopReference) {
  std::mt19937_64 rng(2);
  const auto model = testing::tiny_model(rng, 3, 4);
  const T x = testing::image_batch(model, 4, rng);
  for (BranchMode mode : {BranchMode::AdaptiveTrain, BranchMode::FrozenTrain, BranchMode::Inference}) {
    for (Head head : {Head::Target, Head::Source}) {
      const T logits = predict_logits(model, mode, x, head);
      const auto ref = reference::forward(model, plan_for(mode), x, head);
      for (Index i = 0; i < 4; ++i)
        for (Index k = 0; k < logits.dim(1); ++k)
          EXPECT_NEAR(logits[i * logits.dim(1) + k], ref.logits[std::size_t(i)][std::size_t(k)], 1e-12);
    }
  }
}

TEST(ModelForward, InferenceIsBitwiseDeterministic) {
  std::mt19937_64 rng(3);
  const auto model = testing::tiny_model(rng);
  const T x = testing::image_batch(model, 3, rng);
  EXPECT_TRUE(bitwise_equal(predict_logits(model, BranchMode::Inference, x),
                            predict_logits(model, BranchMode::Inference, x)));
}

TEST(ModelForward, FrozenAndAdaptiveBranchesDiffer) {
  std::mt19937_64 rng(4);
  for (int draw = 0; draw < 5; ++draw) {
    auto model = testing::tiny_model(rng);
    // Identical affines: any difference comes from the statistics alone.
    for (int l = 0; l < kBlocks; ++l)
      for (const char* which : {"gamma", "beta"})
        model.params[names::bn(l, AffineSet::Frozen, which)] = model.params[names::bn(l, AffineSet::Adaptive, which)];
    const T x = testing::image_batch(model, 4, rng);
    EXPECT_GT(testing::max_abs_diff(predict_logits(model, BranchMode::AdaptiveTrain, x),
                                    predict_logits(model, BranchMode::FrozenTrain, x)),
              1e-6);
  }
}

TEST(ModelForward, OnlyAdaptiveTrainCommitsRunningStatistics) {
  std::mt19937_64 rng(5);
  auto model = testing::tiny_model(rng);
  const T x = testing::image_batch(model, 4, rng);
  const auto before = model.bn;
  for (BranchMode mode : {BranchMode::FrozenTrain, BranchMode::Inference}) {
    Tape<double> tape;
    model_forward(model, bind_constants(tape, model.params), mode, tape.constant(x));
    for (std::size_t l = 0; l < kBlocks; ++l) {
      EXPECT_EQ(model.bn[l].running_mean, before[l].running_mean);
      EXPECT_EQ(model.bn[l].running_var, before[l].running_var);
    }
  }
  Tape<double> tape;
  model_forward(model, bind_constants(tape, model.params), BranchMode::AdaptiveTrain, tape.constant(x));
  const auto ref = reference::forward(model, plan_for(BranchMode::AdaptiveTrain), x);
  for (std::size_t l = 0; l < kBlocks; ++l) {
    for (Index c = 0; c < model.bn[l].running_mean.size(); ++c) {
      EXPECT_NEAR(model.bn[l].running_mean(c), 0.9 * before[l].running_mean(c) + 0.1 * ref.stats[l].mean[std::size_t(c)],
                  1e-12);
      EXPECT_NEAR(model.bn[l].running_var(c), 0.9 * before[l].running_var(c) + 0.1 * ref.stats[l].var[std::size_t(c)],
                  1e-12);
    }
    EXPECT_EQ(model.bn[l].frozen_mean, before[l].frozen_mean);
    EXPECT_EQ(model.bn[l].frozen_var, before[l].frozen_var);
  }
}

TEST(ModelForward, RejectsMissingHeadAndBadInput) {
  std::mt19937_64 rng(6);
  const auto model = testing::tiny_model(rng);
  Tape<double> tape;
  const auto p = bind_constants(tape, model.params);
  EXPECT_THROW(forward(model, p, BranchMode::Inference, tape.constant(testing::image_batch(model, 2, rng)), Head::Source),
               InvalidArgument);
  EXPECT_THROW(forward(model, p, BranchMode::Inference, tape.constant(T::zeros({2, 3, 6, 6}))), InvalidArgument);
}

TEST(InitModel, ParameterLayout) {
  std::mt19937_64 rng(7);
  const auto model = testing::tiny_model(rng, 6, 9);
  EXPECT_EQ(model.params.at("head.weight").shape(), (Shape{4, 6}));
  EXPECT_EQ(model.params.at("source_head.weight").shape(), (Shape{4, 9}));
  // One kernel per block, shared by both branches; two affine sets per BN layer.
  int kernels = 0, affines = 0;
  for (const auto& [name, t] : model.params) {
    kernels += name.find(".weight") != std::string::npos && !names::is_head(name);
    affines += name.find(".gamma") != std::string::npos;
  }
  EXPECT_EQ(kernels, kBlocks);
  EXPECT_EQ(affines, 2 * kBlocks);
  EXPECT_THROW(init_model<double>(ModelConfig{.target_classes = 0}, rng), InvalidArgument);
}

TEST(WeightSharing, FrozenBranchUpdateIsVisibleToAdaptiveBranch) {
  std::mt19937_64 rng(8);
  auto model = testing::tiny_model(rng);
  const T x = testing::image_batch(model, 4, rng);
  const Labels y = testing::random_labels(4, 3, rng);
  const T adaptive_before = predict_logits(model, BranchMode::AdaptiveTrain, x);

  Tape<double> tape;
  const auto p = bind_parameters(tape, model.params);
  const auto fp = forward(model, p, BranchMode::FrozenTrain, tape.constant(x), Head::Target);
  const auto grads = tape.backprop(softmax_cross_entropy(fp.logits, y));
  OptState<double> opt;
  sgd_update(model.params, grads, opt, 0.5, 0.0, 0.0, {names::conv(0)});

  EXPECT_GT(testing::max_abs_diff(predict_logits(model, BranchMode::AdaptiveTrain, x), adaptive_before), 0.0);
}

// BN-normalized map of block l, before the affine.
T block_normalized(const Model<double>& model, BranchMode mode, const T& x, int l) {
  Tape<double> tape;
  return forward(model, bind_constants(tape, model.params), mode, tape.constant(x), Head::Target)
      .blocks[std::size_t(l)]
      .normalized.value();
}

TEST(ScaleInvariance, AdaptiveBranchIgnoresKernelScale) {
  std::mt19937_64 rng(9);
  for (int draw = 0; draw < 3; ++draw) {
    auto model = testing::tiny_model(rng);
    for (auto& s : model.bn) s.eps = 0.0;
    const T x = testing::image_batch(model, 4, rng);
    for (int l = 0; l < kBlocks; ++l) {
      for (double gamma : {0.5, 2.0, 10.0}) {
        auto scaled = model;
        scaled.params.at(names::conv(l)).data() *= gamma;
        const T base = block_normalized(model, BranchMode::AdaptiveTrain, x, l);
        EXPECT_LE(testing::max_abs_diff(block_normalized(scaled, BranchMode::AdaptiveTrain, x, l), base),
                  1e-6 * testing::max_abs(base));
        const T logits = predict_logits(model, BranchMode::AdaptiveTrain, x);
        const T scaled_logits = predict_logits(scaled, BranchMode::AdaptiveTrain, x);
        EXPECT_LE(testing::max_abs_diff(scaled_logits, logits), 1e-6 * testing::max_abs(logits));
        EXPECT_EQ(argmax_rows(scaled_logits), argmax_rows(logits));
      }
    }
  }
}

TEST(ScaleInvariance, FrozenBranchRespondsToKernelScale) {
  std::mt19937_64 rng(10);
  auto model = testing::tiny_model(rng);
  for (auto& s : model.bn) s.eps = 0.0;
  const T x = testing::image_batch(model, 4, rng);
  for (int l = 0; l < kBlocks; ++l) {
    auto scaled = model;
    scaled.params.at(names::conv(l)).data() *= 2.0;
    EXPECT_GT(testing::max_abs_diff(block_normalized(scaled, BranchMode::FrozenTrain, x, l),
                                    block_normalized(model, BranchMode::FrozenTrain, x, l)),
              1e-3);
  }
}

TEST(Model, CastRoundTrip) {
  std::mt19937_64 rng(11);
  const auto model = testing::tiny_model(rng);
  const auto back = model.cast<float>().cast<double>();
  for (const auto& [name, t] : model.params) EXPECT_LE(testing::max_abs_diff(t, back.params.at(name)), 1e-6);
  EXPECT_EQ(back.config, model.config);
}

}  // namespace
}  // namespace twins
