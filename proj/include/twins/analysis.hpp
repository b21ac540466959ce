#ifndef TWINS_ANALYSIS_HPP
#define TWINS_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "twins/attack.hpp"
#include "twins/dataset.hpp"

namespace twins {

struct GradNormStats {
  double mean = 0;
  double std = 0;  // population standard deviation
  double cv = 0;   // std / mean, 0 when mean == 0
};

inline GradNormStats grad_norm_epoch_stats(std::span<const double> log) {
  if (log.empty()) throw InvalidArgument("grad_norm_epoch_stats: empty log");
  GradNormStats s;
  for (double v : log) s.mean += v;
  s.mean /= double(log.size());
  for (double v : log) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / double(log.size()));
  s.cv = s.mean > 0 ? s.std / s.mean : 0.0;
  return s;
}

/// Euclidean norm of the concatenated difference of two parameter sets with identical names and shapes.
template <typename Scalar>
double weight_distance(const ParamStore<Scalar>& theta, const ParamStore<Scalar>& theta_pt) {
  if (theta.size() != theta_pt.size()) throw InvalidArgument("weight_distance: parameter sets differ in size");
  double total = 0;
  for (const auto& [name, t] : theta) {
    const auto it = theta_pt.find(name);
    if (it == theta_pt.end()) throw InvalidArgument("weight_distance: '" + name + "' missing from reference");
    if (it->second.shape() != t.shape()) throw InvalidArgument("weight_distance: shape mismatch for '" + name + "'");
    total += (t.data() - it->second.data()).template cast<double>().squaredNorm();
  }
  return std::sqrt(total);
}

/// l2 norm of all gradients concatenated.
template <typename Scalar>
double concatenated_norm(const GradientSet<Scalar>& grads) {
  double total = 0;
  for (const auto& [name, g] : grads) total += g.data().template cast<double>().squaredNorm();
  return std::sqrt(total);
}

struct OverfittingGap {
  double best = 0;
  double final = 0;
  double gap = 0;
};

inline OverfittingGap overfitting_gap(std::span<const double> robust_history) {
  if (robust_history.empty()) throw InvalidArgument("overfitting_gap: empty history");
  OverfittingGap g;
  g.best = *std::max_element(robust_history.begin(), robust_history.end());
  g.final = robust_history.back();
  g.gap = g.best - g.final;
  return g;
}

struct EvalResult {
  double clean_acc = 0;
  std::optional<double> robust_acc;
};

/// Clean accuracy through the inference path; robust accuracy on PGD examples
/// crafted against the same (Adaptive, running-statistics) network.
template <typename Scalar>
EvalResult evaluate(const Model<Scalar>& model, const Dataset<Scalar>& data, const std::optional<AttackConfig>& attack,
                    std::mt19937_64& rng, Index batch_size = 256) {
  EvalResult r;
  if (data.size() == 0) return r;
  Index clean_hits = 0, robust_hits = 0;
  for (Index begin = 0; begin < data.size(); begin += batch_size) {
    const Index end = std::min(begin + batch_size, data.size());
    const auto x = slice_rows(data.images, begin, end);
    const Labels y(data.labels.begin() + begin, data.labels.begin() + end);
    const auto pred = argmax_rows(predict_logits(model, BranchMode::Inference, x));
    for (std::size_t i = 0; i < y.size(); ++i) clean_hits += pred[i] == y[i];
    if (attack) {
      const auto x_adv = pgd_attack(model, BranchMode::Inference, x, y, *attack, rng);
      const double excess = (x_adv.data() - x.data()).template cast<double>().cwiseAbs().maxCoeff();
      if (excess > attack->epsilon + 1e-6 || x_adv.data().minCoeff() < Scalar(0) || x_adv.data().maxCoeff() > Scalar(1)) {
        throw Error("evaluate: adversarial batch left the epsilon ball or pixel range");
      }
      const auto adv_pred = argmax_rows(predict_logits(model, BranchMode::Inference, x_adv));
      for (std::size_t i = 0; i < y.size(); ++i) robust_hits += adv_pred[i] == y[i];
    }
  }
  r.clean_acc = double(clean_hits) / double(data.size());
  if (attack) r.robust_acc = double(robust_hits) / double(data.size());
  return r;
}

inline int block_of_layer(const std::string& layer) {
  for (int l = 0; l < kBlocks; ++l)
    if (layer == names::conv(l)) return l;
  throw InvalidArgument("'" + layer + "' does not feed a batch-normalization layer");
}

template <typename Scalar>
struct FrozenGradientCheck {
  Tensor<Scalar> autodiff;  // d loss / d conv kernel through the frozen branch
  Tensor<Scalar> analytic;  // sum over samples and positions of grad(h~) * h / sigma_pt
  double rel_error = 0;     // max |autodiff - analytic| / max |autodiff|
};

/// Compares the autodiff kernel gradient of a convolution feeding a frozen BN with the
/// closed form built from the adjoint of the normalized output and the block input.
template <typename Scalar>
FrozenGradientCheck<Scalar> frozen_gradient_check(const Model<Scalar>& model, const std::string& layer,
                                                  const Tensor<Scalar>& x, const Labels& y) {
  const int block = block_of_layer(layer);
  Tape<Scalar> tape;
  const auto p = bind_parameters(tape, model.params);
  const auto fp = forward(model, p, BranchMode::FrozenTrain, tape.constant(x), Head::Target);
  auto grads = tape.backprop(softmax_cross_entropy(fp.logits, y));

  const auto& trace = fp.blocks[static_cast<std::size_t>(block)];
  const Tensor<Scalar> grad_norm = tape.gradient(trace.normalized);
  const Tensor<Scalar>& h = trace.input.value();
  const auto& state = model.bn[static_cast<std::size_t>(block)];
  const auto& kernel = model.params.at(layer);

  const Index n_batch = h.dim(0), channels = h.dim(1), height = h.dim(2), width = h.dim(3);
  const Index out_c = grad_norm.dim(1), out_h = grad_norm.dim(2), out_w = grad_norm.dim(3);
  const Index kh = kernel.dim(2), kw = kernel.dim(3);
  const Index stride = 2, pad = 1;
  Tensor<Scalar> analytic(kernel.shape());
  for (Index j = 0; j < out_c; ++j) {
    const Scalar sigma = std::sqrt(state.frozen_var(j) + state.eps);
    for (Index c = 0; c < channels; ++c)
      for (Index ki = 0; ki < kh; ++ki)
        for (Index kj = 0; kj < kw; ++kj) {
          Scalar acc = 0;
          for (Index n = 0; n < n_batch; ++n)
            for (Index oi = 0; oi < out_h; ++oi)
              for (Index oj = 0; oj < out_w; ++oj) {
                const Index ii = oi * stride + ki - pad, jj = oj * stride + kj - pad;
                if (ii < 0 || ii >= height || jj < 0 || jj >= width) continue;
                acc += grad_norm[((n * out_c + j) * out_h + oi) * out_w + oj] *
                       h[((n * channels + c) * height + ii) * width + jj];
              }
          analytic[((j * channels + c) * kh + ki) * kw + kj] = acc / sigma;
        }
  }
  FrozenGradientCheck<Scalar> check{grads.at(layer), analytic, 0.0};
  const double scale = check.autodiff.data().template cast<double>().cwiseAbs().maxCoeff();
  const double diff = (check.autodiff.data() - analytic.data()).template cast<double>().cwiseAbs().maxCoeff();
  check.rel_error = scale > 0 ? diff / scale : diff;
  return check;
}

struct ScaleProbeRow {
  double gamma = 1;
  BranchMode branch = BranchMode::AdaptiveTrain;
  double forward_delta = 0;    // max |logits(gamma) - logits(1)| / max |logits(1)|
  double grad_norm_ratio = 1;  // ||grad w_j||(gamma) / ||grad w_j||(1)
  bool argmax_same = true;
  std::optional<double> formula_error;  // frozen branch only
};

/// Rescales output channel `channel` of a BN-fed convolution by each gamma and measures how the
/// forward pass and that channel's kernel gradient respond, for both branches.
template <typename Scalar>
std::vector<ScaleProbeRow> scale_probe(const Model<Scalar>& model, const std::string& layer, Index channel,
                                       std::span<const double> gammas, const Tensor<Scalar>& x, const Labels& y) {
  const int block = block_of_layer(layer);
  if (model.bn[static_cast<std::size_t>(block)].eps != Scalar(0)) {
    throw InvalidArgument("scale_probe: the probed BN layer must use eps = 0");
  }
  const auto& kernel = model.params.at(layer);
  if (channel < 0 || channel >= kernel.dim(0)) throw InvalidArgument("scale_probe: channel out of range");
  const Index row = kernel.size() / kernel.dim(0);

  auto run = [&](const Model<Scalar>& m, BranchMode mode) {
    Tape<Scalar> tape;
    const auto p = bind_parameters(tape, m.params);
    const auto fp = forward(m, p, mode, tape.constant(x), Head::Target);
    const auto grads = tape.backprop(softmax_cross_entropy(fp.logits, y));
    const auto& g = grads.at(layer);
    return std::pair{fp.logits.value(), g.data().segment(channel * row, row).template cast<double>().norm()};
  };

  std::vector<ScaleProbeRow> rows;
  for (BranchMode mode : {BranchMode::AdaptiveTrain, BranchMode::FrozenTrain}) {
    const auto [base_logits, base_norm] = run(model, mode);
    const auto base_pred = argmax_rows(base_logits);
    const double logit_scale = base_logits.data().template cast<double>().cwiseAbs().maxCoeff();
    for (double gamma : gammas) {
      Model<Scalar> scaled = model;
      scaled.params.at(layer).data().segment(channel * row, row) *= Scalar(gamma);
      const auto [logits, norm] = run(scaled, mode);
      ScaleProbeRow r;
      r.gamma = gamma;
      r.branch = mode;
      r.forward_delta = (logits.data() - base_logits.data()).template cast<double>().cwiseAbs().maxCoeff() / logit_scale;
      r.grad_norm_ratio = norm / base_norm;
      r.argmax_same = argmax_rows(logits) == base_pred;
      if (mode == BranchMode::FrozenTrain) r.formula_error = frozen_gradient_check(scaled, layer, x, y).rel_error;
      rows.push_back(r);
    }
  }
  return rows;
}

}  // namespace twins

#endif  // TWINS_ANALYSIS_HPP
