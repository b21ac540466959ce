#ifndef TWINS_NETWORK_HPP
#define TWINS_NETWORK_HPP

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "twins/ops.hpp"

namespace twins {

/// MiniCNN: Conv3x3/s2 -> BN -> ReLU -> Conv3x3/s2 -> BN -> ReLU -> global_avg_pool -> linear head.
struct ModelConfig {
  Index channels = 3;
  Index height = 16;
  Index width = 16;
  std::array<Index, 2> widths{16, 32};
  Index target_classes = 10;
  Index source_classes = 0;  // 0: no source head

  Index feature_width() const { return widths[1]; }
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr int kBlocks = 2;

enum class BranchMode { AdaptiveTrain, FrozenTrain, Inference };
enum class Head { Target, Source };

// Which statistics normalize a BN layer and whose affine parameters follow.
enum class StatsSource { Batch, Frozen, Running };
enum class AffineSet { Adaptive, Frozen };

struct NormPlan {
  StatsSource stats;
  AffineSet affine;
};

inline NormPlan plan_for(BranchMode mode) {
  switch (mode) {
    case BranchMode::AdaptiveTrain: return {StatsSource::Batch, AffineSet::Adaptive};
    case BranchMode::FrozenTrain: return {StatsSource::Frozen, AffineSet::Frozen};
    case BranchMode::Inference: return {StatsSource::Running, AffineSet::Adaptive};
  }
  throw InvalidArgument("unknown branch mode");
}

namespace names {

inline std::string conv(int block) { return "conv" + std::to_string(block + 1) + ".weight"; }

inline std::string bn(int block, AffineSet set, const char* which) {
  return "bn" + std::to_string(block + 1) + (set == AffineSet::Adaptive ? ".adaptive." : ".frozen.") + which;
}

inline std::string head_weight(Head h) { return h == Head::Target ? "head.weight" : "source_head.weight"; }
inline std::string head_bias(Head h) { return h == Head::Target ? "head.bias" : "source_head.bias"; }

inline bool is_head(const std::string& name) {
  return name.rfind("head.", 0) == 0 || name.rfind("source_head.", 0) == 0;
}
inline bool is_frozen_affine(const std::string& name) { return name.find(".frozen.") != std::string::npos; }
inline bool is_source_head(const std::string& name) { return name.rfind("source_head.", 0) == 0; }

}  // namespace names

/// Per-channel statistics of one BN layer. Affine parameters live in the ParamStore.
template <typename Scalar>
struct BnLayerState {
  using Vector = typename Tensor<Scalar>::Vector;
  Vector running_mean;
  Vector running_var;
  Vector frozen_mean;  // pre-training population statistics; touched only by warmup
  Vector frozen_var;
  Scalar eps = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);

  template <typename To>
  BnLayerState<To> cast() const {
    return {running_mean.template cast<To>(), running_var.template cast<To>(), frozen_mean.template cast<To>(),
            frozen_var.template cast<To>(), To(eps), To(momentum)};
  }
};

/// Shared weights of both branches plus the two statistic sets of every BN layer.
template <typename Scalar>
struct Model {
  ModelConfig config;
  ParamStore<Scalar> params;
  std::array<BnLayerState<Scalar>, kBlocks> bn;

  bool has_source_head() const { return params.count(names::head_weight(Head::Source)) != 0; }

  template <typename To>
  Model<To> cast() const {
    return {config, cast_params<To>(params), {bn[0].template cast<To>(), bn[1].template cast<To>()}};
  }
};

/// He-normal convolution kernels, unit BN scales, zero shifts, N(0, 1/F) heads.
template <typename Scalar>
Model<Scalar> init_model(const ModelConfig& config, std::mt19937_64& rng) {
  if (config.target_classes < 1 || config.widths[0] < 1 || config.widths[1] < 1) {
    throw InvalidArgument("init_model: invalid model configuration");
  }
  Model<Scalar> m;
  m.config = config;
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Shape shape, double stddev) {
    Tensor<Scalar> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(normal(rng) * stddev);
    return t;
  };
  Index in_channels = config.channels;
  for (int l = 0; l < kBlocks; ++l) {
    const Index out = config.widths[static_cast<std::size_t>(l)];
    m.params[names::conv(l)] = randn({out, in_channels, 3, 3}, std::sqrt(2.0 / double(in_channels * 9)));
    for (AffineSet set : {AffineSet::Adaptive, AffineSet::Frozen}) {
      m.params[names::bn(l, set, "gamma")] = Tensor<Scalar>::constant({out}, Scalar(1));
      m.params[names::bn(l, set, "beta")] = Tensor<Scalar>::zeros({out});
    }
    auto& s = m.bn[static_cast<std::size_t>(l)];
    s.running_mean = s.frozen_mean = BnLayerState<Scalar>::Vector::Zero(out);
    s.running_var = s.frozen_var = BnLayerState<Scalar>::Vector::Ones(out);
    in_channels = out;
  }
  const Index f = config.feature_width();
  const double head_std = 1.0 / std::sqrt(double(f));
  m.params[names::head_weight(Head::Target)] = randn({f, config.target_classes}, head_std);
  m.params[names::head_bias(Head::Target)] = Tensor<Scalar>::zeros({config.target_classes});
  if (config.source_classes > 0) {
    m.params[names::head_weight(Head::Source)] = randn({f, config.source_classes}, head_std);
    m.params[names::head_bias(Head::Source)] = Tensor<Scalar>::zeros({config.source_classes});
  }
  return m;
}

template <typename Scalar>
using Bindings = std::map<std::string, Var<Scalar>>;

/// Every parameter as a named differentiable leaf.
template <typename Scalar>
Bindings<Scalar> bind_parameters(Tape<Scalar>& tape, const ParamStore<Scalar>& params) {
  Bindings<Scalar> b;
  for (const auto& [name, t] : params) b.emplace(name, tape.leaf(t, name));
  return b;
}

/// Every parameter as a constant (attacks differentiate w.r.t. the input only).
template <typename Scalar>
Bindings<Scalar> bind_constants(Tape<Scalar>& tape, const ParamStore<Scalar>& params) {
  Bindings<Scalar> b;
  for (const auto& [name, t] : params) b.emplace(name, tape.constant(t));
  return b;
}

template <typename Scalar>
struct BnOutput {
  Var<Scalar> normalized;  // before the affine
  Var<Scalar> output;
  std::optional<ChannelStats<Scalar>> batch_stats;
};

template <typename Scalar>
BnOutput<Scalar> bn_forward(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                            const BnLayerState<Scalar>& state, StatsSource stats) {
  BnOutput<Scalar> out;
  switch (stats) {
    case StatsSource::Batch: {
      ChannelStats<Scalar> s;
      out.normalized = normalize_batch(x, state.eps, &s);
      out.batch_stats = std::move(s);
      break;
    }
    case StatsSource::Frozen:
      out.normalized = normalize_fixed(x, state.frozen_mean, state.frozen_var, state.eps);
      break;
    case StatsSource::Running:
      out.normalized = normalize_fixed(x, state.running_mean, state.running_var, state.eps);
      break;
  }
  out.output = channel_affine(out.normalized, gamma, beta);
  return out;
}

template <typename Scalar>
BnOutput<Scalar> bn_forward(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                            const BnLayerState<Scalar>& state, BranchMode mode) {
  return bn_forward(x, gamma, beta, state, plan_for(mode).stats);
}

/// EMA in the convention new = (1 - m) * old + m * batch.
template <typename Scalar>
void ema_update(typename Tensor<Scalar>::Vector& target, const typename Tensor<Scalar>::Vector& batch,
                Scalar momentum) {
  target = (Scalar(1) - momentum) * target + momentum * batch;
}

template <typename Scalar>
void bn_update_running(BnLayerState<Scalar>& state, const ChannelStats<Scalar>& batch) {
  ema_update(state.running_mean, batch.mean, state.momentum);
  ema_update(state.running_var, batch.var, state.momentum);
}

template <typename Scalar>
struct BlockTrace {
  Var<Scalar> input;       // h^(l-1): the block's input activation
  Var<Scalar> pre_norm;    // convolution output
  Var<Scalar> normalized;  // BN output before the affine
  Var<Scalar> output;      // after ReLU
  std::optional<ChannelStats<Scalar>> batch_stats;
};

template <typename Scalar>
struct ForwardPass {
  Var<Scalar> features;  // global_avg_pool output
  Var<Scalar> logits;
  std::array<BlockTrace<Scalar>, kBlocks> blocks;
};

/// Pure forward pass; never touches the model's statistics.
template <typename Scalar>
ForwardPass<Scalar> forward(const Model<Scalar>& model, const Bindings<Scalar>& p, NormPlan plan,
                            const Var<Scalar>& x, Head head) {
  const auto& c = model.config;
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[1] != c.channels || xs[2] != c.height || xs[3] != c.width) {
    throw InvalidArgument("model input must be (N," + std::to_string(c.channels) + "," + std::to_string(c.height) +
                          "," + std::to_string(c.width) + "), got " + to_string(xs));
  }
  if (head == Head::Source && !model.has_source_head()) throw InvalidArgument("model has no source head");

  ForwardPass<Scalar> fp;
  Var<Scalar> h = x;
  for (int l = 0; l < kBlocks; ++l) {
    auto& b = fp.blocks[static_cast<std::size_t>(l)];
    b.input = h;
    b.pre_norm = conv2d(h, p.at(names::conv(l)), 2, 1);
    auto bn = bn_forward(b.pre_norm, p.at(names::bn(l, plan.affine, "gamma")), p.at(names::bn(l, plan.affine, "beta")),
                         model.bn[static_cast<std::size_t>(l)], plan.stats);
    b.normalized = bn.normalized;
    b.batch_stats = std::move(bn.batch_stats);
    b.output = relu(bn.output);
    h = b.output;
  }
  fp.features = global_avg_pool(h);
  fp.logits = add_bias(matmul(fp.features, p.at(names::head_weight(head))), p.at(names::head_bias(head)));
  return fp;
}

template <typename Scalar>
ForwardPass<Scalar> forward(const Model<Scalar>& model, const Bindings<Scalar>& p, BranchMode mode,
                            const Var<Scalar>& x, Head head = Head::Target) {
  return forward(model, p, plan_for(mode), x, head);
}

template <typename Scalar>
void commit_running_stats(Model<Scalar>& model, const ForwardPass<Scalar>& fp) {
  for (std::size_t l = 0; l < kBlocks; ++l) {
    if (fp.blocks[l].batch_stats) bn_update_running(model.bn[l], *fp.blocks[l].batch_stats);
  }
}

/// Training-time forward: in AdaptiveTrain the batch statistics are folded into the running statistics.
template <typename Scalar>
ForwardPass<Scalar> model_forward(Model<Scalar>& model, const Bindings<Scalar>& p, BranchMode mode,
                                  const Var<Scalar>& x, Head head = Head::Target) {
  auto fp = forward(model, p, mode, x, head);
  if (mode == BranchMode::AdaptiveTrain) commit_running_stats(model, fp);
  return fp;
}

/// Logits of a constant input through constant parameters.
template <typename Scalar>
Tensor<Scalar> predict_logits(const Model<Scalar>& model, BranchMode mode, const Tensor<Scalar>& x,
                              Head head = Head::Target) {
  Tape<Scalar> tape;
  const auto p = bind_constants(tape, model.params);
  return forward(model, p, mode, tape.constant(x), head).logits.value();
}

template <typename Scalar>
Labels argmax_rows(const Tensor<Scalar>& logits) {
  Labels out(static_cast<std::size_t>(logits.dim(0)));
  const auto m = logits.matrix();
  for (Index i = 0; i < m.rows(); ++i) {
    Index best = 0;
    m.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

/// Feature-extractor weights: every parameter except the classifier heads.
template <typename Scalar>
ParamStore<Scalar> backbone(const ParamStore<Scalar>& params) {
  ParamStore<Scalar> out;
  for (const auto& [name, t] : params)
    if (!names::is_head(name)) out.emplace(name, t);
  return out;
}

}  // namespace twins

#endif  // TWINS_NETWORK_HPP
