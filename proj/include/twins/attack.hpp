#ifndef TWINS_ATTACK_HPP
#define TWINS_ATTACK_HPP

#include <functional>
#include <random>

#include "twins/network.hpp"

namespace twins {

enum class AttackLoss { CE, KLToClean };

/// l-infinity PGD on the [0,1] pixel scale.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 10;
  bool rand_init = true;
  AttackLoss loss = AttackLoss::CE;

  void validate() const {
    if (!(alpha >= 0.0) || !(epsilon >= 0.0) || epsilon > 1.0 || steps < 0) {
      throw InvalidArgument("attack config: need alpha >= 0, 0 <= epsilon <= 1, steps >= 0");
    }
  }
};

/// Clamp into [x - eps, x + eps] and then into [0, 1].
template <typename Scalar>
Tensor<Scalar> project_linf(const Tensor<Scalar>& x_adv, const Tensor<Scalar>& x, Scalar epsilon) {
  if (x_adv.shape() != x.shape()) throw InvalidArgument("project_linf: shape mismatch");
  Tensor<Scalar> out(x.shape());
  out.data() = x_adv.data()
                   .cwiseMax((x.data().array() - epsilon).matrix())
                   .cwiseMin((x.data().array() + epsilon).matrix())
                   .cwiseMax(Scalar(0))
                   .cwiseMin(Scalar(1));
  return out;
}

template <typename Scalar>
Scalar sign(Scalar v) {
  return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
}

/// Maps an input node to logits on the same tape.
template <typename Scalar>
using LogitsFn = std::function<Var<Scalar>(Tape<Scalar>&, const Var<Scalar>&)>;

/// PGD against an arbitrary differentiable classifier. Returns a detached tensor.
template <typename Scalar>
Tensor<Scalar> pgd_attack(const LogitsFn<Scalar>& logits_of,
                          const Tensor<Scalar>& x, const Labels& labels, const AttackConfig& cfg,
                          std::mt19937_64& rng) {
  cfg.validate();
  const Scalar eps = Scalar(cfg.epsilon);
  const Scalar alpha = Scalar(cfg.alpha);
  if (cfg.epsilon == 0.0) return x;

  Tensor<Scalar> clean_logits;
  if (cfg.loss == AttackLoss::KLToClean) {
    Tape<Scalar> tape;
    clean_logits = logits_of(tape, tape.constant(x)).value();
  }

  Tensor<Scalar> x_adv = x;
  if (cfg.rand_init) {
    std::uniform_real_distribution<double> noise(-cfg.epsilon, cfg.epsilon);
    for (Index i = 0; i < x_adv.size(); ++i) x_adv[i] += Scalar(noise(rng));
    x_adv = project_linf(x_adv, x, eps);
  }
  for (int step = 0; step < cfg.steps; ++step) {
    Tape<Scalar> tape;
    const auto input = tape.leaf(x_adv);
    const auto logits = logits_of(tape, input);
    const auto loss = cfg.loss == AttackLoss::CE ? softmax_cross_entropy(logits, labels)
                                                 : kl_div_logits(logits, tape.constant(clean_logits));
    tape.backprop(loss);
    const auto grad = tape.gradient(input);
    for (Index i = 0; i < x_adv.size(); ++i) x_adv[i] += alpha * sign(grad[i]);
    x_adv = project_linf(x_adv, x, eps);
  }
  return x_adv;
}

/// PGD against one branch of the model. The attacked branch normalizes as it does
/// at train time, but attack iterates never commit running statistics.
template <typename Scalar>
Tensor<Scalar> pgd_attack(const Model<Scalar>& model, NormPlan plan, const Tensor<Scalar>& x, const Labels& labels,
                          const AttackConfig& cfg, std::mt19937_64& rng, Head head = Head::Target) {
  return pgd_attack<Scalar>(
      [&](Tape<Scalar>& tape, const Var<Scalar>& input) {
        return forward(model, bind_constants(tape, model.params), plan, input, head).logits;
      },
      x, labels, cfg, rng);
}

template <typename Scalar>
Tensor<Scalar> pgd_attack(const Model<Scalar>& model, BranchMode branch, const Tensor<Scalar>& x,
                          const Labels& labels, const AttackConfig& cfg, std::mt19937_64& rng,
                          Head head = Head::Target) {
  return pgd_attack(model, plan_for(branch), x, labels, cfg, rng, head);
}

}  // namespace twins

#endif  // TWINS_ATTACK_HPP
