#ifndef TWINS_TRAINING_HPP
#define TWINS_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "twins/analysis.hpp"
#include "twins/attack.hpp"
#include "twins/dataset.hpp"
#include "twins/network.hpp"

namespace twins {

enum class Method { Std, At, Trades, TwinsAt, TwinsTrades, Lwf, Joint };

inline Method parse_method(std::string_view s) {
  if (s == "std") return Method::Std;
  if (s == "at") return Method::At;
  if (s == "trades") return Method::Trades;
  if (s == "twins-at") return Method::TwinsAt;
  if (s == "twins-trades") return Method::TwinsTrades;
  if (s == "lwf") return Method::Lwf;
  if (s == "joint") return Method::Joint;
  throw InvalidArgument("unknown training method '" + std::string(s) + "'");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::Std: return "std";
    case Method::At: return "at";
    case Method::Trades: return "trades";
    case Method::TwinsAt: return "twins-at";
    case Method::TwinsTrades: return "twins-trades";
    case Method::Lwf: return "lwf";
    case Method::Joint: return "joint";
  }
  return "?";
}

inline bool is_twins(Method m) { return m == Method::TwinsAt || m == Method::TwinsTrades; }
inline bool is_trades_family(Method m) { return m == Method::Trades || m == Method::TwinsTrades; }

// Argument order of the TRADES divergence: AdvFirst is KL(p_adv || p_clean).
enum class KlOrder { AdvFirst, CleanFirst };

// How a TWINS sub-batch is reduced: per-sub-batch means, or plain sums.
enum class Reduction { Mean, Sum };

struct TrainConfig {
  Method method = Method::At;
  double lr = 3e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double lambda_twins = 0.3;
  double lambda_lwf = 1.0;
  double lambda_uot = 1.0;
  double beta = 6.0;
  Index batch_size = 64;
  int epochs = 20;
  std::vector<int> milestones{10, 16};
  double decay = 0.1;
  std::uint64_t seed = 0;
  AttackConfig attack;
  std::optional<AttackLoss> attack_loss;  // unset: CE for AT-family, KL-to-clean for TRADES-family
  int warmup_epochs = 0;
  KlOrder kl_order = KlOrder::AdvFirst;
  Reduction reduction = Reduction::Mean;

  AttackConfig train_attack() const {
    AttackConfig a = attack;
    a.loss = attack_loss.value_or(is_trades_family(method) ? AttackLoss::KLToClean : AttackLoss::CE);
    return a;
  }

  void validate() const {
    if (lr < 0 || weight_decay < 0 || momentum < 0 || lambda_twins < 0 || lambda_lwf < 0 || lambda_uot < 0 ||
        beta < 0 || decay < 0) {
      throw InvalidArgument("train config: rates and penalties must be non-negative");
    }
    if (batch_size < 2) throw InvalidArgument("train config: batch size must be at least 2");
    if (is_twins(method) && batch_size % 2 != 0) {
      throw InvalidArgument("train config: TWINS methods need an even batch size");
    }
    if (epochs < 0 || warmup_epochs < 0) throw InvalidArgument("train config: negative epoch count");
    attack.validate();
  }
};

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs) throw InvalidArgument("lr_at_epoch: epoch out of range");
  const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(), [&](int m) { return m <= epoch; });
  return cfg.lr * std::pow(cfg.decay, double(passed));
}

template <typename Scalar>
struct OptState {
  std::map<std::string, Tensor<Scalar>> velocity;
};

/// SGD with coupled weight decay and heavy-ball momentum on the listed parameters:
/// g' = g + wd * w;  v = momentum * v + g';  w = w - rate * v.
template <typename Scalar>
void sgd_update(ParamStore<Scalar>& params, const GradientSet<Scalar>& grads, OptState<Scalar>& opt, double rate,
                double weight_decay, double momentum, const std::vector<std::string>& trainable) {
  for (const auto& name : trainable) {
    const auto g = grads.find(name);
    if (g == grads.end()) throw Error("sgd_update: no gradient for trainable parameter '" + name + "'");
    auto& w = params.at(name);
    auto [it, fresh] = opt.velocity.try_emplace(name, Tensor<Scalar>::zeros(w.shape()));
    auto& v = it->second.data();
    v = Scalar(momentum) * v + g->second.data() + Scalar(weight_decay) * w.data();
    w.data() -= Scalar(rate) * v;
  }
}

template <typename Scalar>
void sgd_update(ParamStore<Scalar>& params, const GradientSet<Scalar>& grads, OptState<Scalar>& opt, double rate,
                double weight_decay, double momentum) {
  std::vector<std::string> all;
  for (const auto& [name, t] : params) all.push_back(name);
  sgd_update(params, grads, opt, rate, weight_decay, momentum, all);
}

/// Parameters a method actually trains: the frozen-branch affines only under TWINS,
/// the source head only under the joint objective.
template <typename Scalar>
std::vector<std::string> trainable_parameters(const Model<Scalar>& model, Method method) {
  std::vector<std::string> out;
  for (const auto& [name, t] : model.params) {
    if (names::is_frozen_affine(name) && !is_twins(method)) continue;
    if (names::is_source_head(name) && method != Method::Joint) continue;
    out.push_back(name);
  }
  return out;
}

// ---- objectives ------------------------------------------------------------
// Every objective takes precomputed adversarial inputs. AdaptiveTrain forwards
// commit their batch statistics to the running statistics; frozen ones never do.

/// Mean CE through the Adaptive branch.
template <typename Scalar>
Var<Scalar> at_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p, const Tensor<Scalar>& x_adv,
                    const Labels& y) {
  const auto fp = model_forward(model, p, BranchMode::AdaptiveTrain, tape.constant(x_adv));
  return softmax_cross_entropy(fp.logits, y);
}

namespace detail {

template <typename Scalar>
void require_even(const Tensor<Scalar>& x) {
  if (x.rank() == 0 || x.dim(0) % 2 != 0 || x.dim(0) < 4) {
    throw InvalidArgument("TWINS objectives need an even batch of at least 4 samples");
  }
}

template <typename Scalar>
Labels labels_range(const Labels& y, Index begin, Index end) {
  return Labels(y.begin() + begin, y.begin() + end);
}

// CE on adversarial inputs plus beta * KL between adversarial and clean predictions, one branch.
template <typename Scalar>
Var<Scalar> trades_terms(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p, BranchMode mode,
                         const Tensor<Scalar>& x, const Tensor<Scalar>& x_adv, const Labels& y, double beta,
                         KlOrder order) {
  const auto clean = model_forward(model, p, mode, tape.constant(x));
  const auto adv = model_forward(model, p, mode, tape.constant(x_adv));
  const auto ce = softmax_cross_entropy(adv.logits, y);
  const auto kl = order == KlOrder::AdvFirst ? kl_div_logits(adv.logits, clean.logits)
                                             : kl_div_logits(clean.logits, adv.logits);
  return add(ce, scale(kl, Scalar(beta)));
}

}  // namespace detail

/// Adaptive CE on the first half plus lambda times Frozen CE on the second half.
template <typename Scalar>
Var<Scalar> twins_at_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p,
                          const Tensor<Scalar>& x_adv, const Labels& y, double lambda,
                          Reduction reduction = Reduction::Mean) {
  detail::require_even(x_adv);
  const Index half = x_adv.dim(0) / 2, n = x_adv.dim(0);
  const auto adaptive = model_forward(model, p, BranchMode::AdaptiveTrain, tape.constant(slice_rows(x_adv, 0, half)));
  const auto frozen = model_forward(model, p, BranchMode::FrozenTrain, tape.constant(slice_rows(x_adv, half, n)));
  auto ce_a = softmax_cross_entropy(adaptive.logits, detail::labels_range<Scalar>(y, 0, half));
  auto ce_f = softmax_cross_entropy(frozen.logits, detail::labels_range<Scalar>(y, half, n));
  if (reduction == Reduction::Sum) {
    ce_a = scale(ce_a, Scalar(half));
    ce_f = scale(ce_f, Scalar(half));
  }
  return add(ce_a, scale(ce_f, Scalar(lambda)));
}

/// CE(adv) + beta * KL(adv, clean) through the Adaptive branch.
template <typename Scalar>
Var<Scalar> trades_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p, const Tensor<Scalar>& x,
                        const Tensor<Scalar>& x_adv, const Labels& y, double beta, KlOrder order = KlOrder::AdvFirst) {
  return detail::trades_terms(tape, model, p, BranchMode::AdaptiveTrain, x, x_adv, y, beta, order);
}

template <typename Scalar>
Var<Scalar> twins_trades_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p,
                              const Tensor<Scalar>& x, const Tensor<Scalar>& x_adv, const Labels& y, double beta,
                              double lambda, KlOrder order = KlOrder::AdvFirst,
                              Reduction reduction = Reduction::Mean) {
  detail::require_even(x_adv);
  if (x.shape() != x_adv.shape()) throw InvalidArgument("twins_trades_loss: clean and adversarial batches differ");
  const Index half = x.dim(0) / 2, n = x.dim(0);
  auto adaptive = detail::trades_terms(tape, model, p, BranchMode::AdaptiveTrain, slice_rows(x, 0, half),
                                       slice_rows(x_adv, 0, half), detail::labels_range<Scalar>(y, 0, half), beta, order);
  auto frozen = detail::trades_terms(tape, model, p, BranchMode::FrozenTrain, slice_rows(x, half, n),
                                     slice_rows(x_adv, half, n), detail::labels_range<Scalar>(y, half, n), beta, order);
  if (reduction == Reduction::Sum) {
    adaptive = scale(adaptive, Scalar(half));
    frozen = scale(frozen, Scalar(half));
  }
  return add(adaptive, scale(frozen, Scalar(lambda)));
}

/// CE plus lambda times the mean feature distance to the frozen pre-trained extractor. Both
/// extractors normalize with the batch's own statistics; the reference never commits them.
template <typename Scalar>
Var<Scalar> lwf_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p,
                     const Model<Scalar>& pretrained, const Tensor<Scalar>& x_adv, const Labels& y, double lambda) {
  if (pretrained.config.feature_width() != model.config.feature_width()) {
    throw InvalidArgument("lwf_loss: feature width of the pre-trained extractor differs");
  }
  const auto live = model_forward(model, p, BranchMode::AdaptiveTrain, tape.constant(x_adv));
  const auto reference =
      forward(pretrained, bind_constants(tape, pretrained.params), BranchMode::AdaptiveTrain, tape.constant(x_adv));
  const auto ce = softmax_cross_entropy(live.logits, y);
  return add(ce, scale(mean_row_distance(live.features, reference.features), Scalar(lambda)));
}

/// Target CE plus lambda times source CE through the source head. An empty source batch drops the second term.
template <typename Scalar>
Var<Scalar> joint_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p,
                       const Tensor<Scalar>& x_adv_target, const Labels& y_target, const Tensor<Scalar>& x_adv_source,
                       const Labels& y_source, double lambda) {
  if (!model.has_source_head()) throw InvalidArgument("joint_loss: model has no source head");
  const auto target = at_loss(tape, model, p, x_adv_target, y_target);
  if (x_adv_source.empty() || y_source.empty()) return target;
  const auto source = model_forward(model, p, BranchMode::AdaptiveTrain, tape.constant(x_adv_source), Head::Source);
  return add(target, scale(softmax_cross_entropy(source.logits, y_source), Scalar(lambda)));
}

/// Extra inputs some methods need.
template <typename Scalar>
struct TrainingContext {
  const Model<Scalar>* pretrained = nullptr;  // lwf
  const Dataset<Scalar>* source = nullptr;    // joint
};

/// Generates the adversarial inputs the method calls for and builds its loss on `tape`.
template <typename Scalar>
Var<Scalar> method_loss(Tape<Scalar>& tape, Model<Scalar>& model, const Bindings<Scalar>& p, const Tensor<Scalar>& x,
                        const Labels& y, const TrainConfig& cfg, const TrainingContext<Scalar>& ctx,
                        std::mt19937_64& rng) {
  const AttackConfig attack = cfg.train_attack();
  auto adversarial = [&](const Tensor<Scalar>& input, const Labels& labels, Head head) {
    return pgd_attack(model, BranchMode::AdaptiveTrain, input, labels, attack, rng, head);
  };
  switch (cfg.method) {
    case Method::Std: {
      const auto fp = model_forward(model, p, BranchMode::AdaptiveTrain, tape.constant(x));
      return softmax_cross_entropy(fp.logits, y);
    }
    case Method::At:
      return at_loss(tape, model, p, adversarial(x, y, Head::Target), y);
    case Method::Trades:
      return trades_loss(tape, model, p, x, adversarial(x, y, Head::Target), y, cfg.beta, cfg.kl_order);
    case Method::TwinsAt:
      return twins_at_loss(tape, model, p, adversarial(x, y, Head::Target), y, cfg.lambda_twins, cfg.reduction);
    case Method::TwinsTrades:
      return twins_trades_loss(tape, model, p, x, adversarial(x, y, Head::Target), y, cfg.beta, cfg.lambda_twins,
                               cfg.kl_order, cfg.reduction);
    case Method::Lwf:
      if (!ctx.pretrained) throw InvalidArgument("lwf needs a pre-trained extractor");
      return lwf_loss(tape, model, p, *ctx.pretrained, adversarial(x, y, Head::Target), y, cfg.lambda_lwf);
    case Method::Joint: {
      if (!ctx.source || ctx.source->size() < 2) throw InvalidArgument("joint needs a source dataset");
      std::uniform_int_distribution<Index> pick(0, ctx.source->size() - 1);
      std::vector<Index> rows(static_cast<std::size_t>(x.dim(0)));
      for (auto& r : rows) r = pick(rng);
      const auto src = ctx.source->subset(rows);
      const auto x_adv = adversarial(x, y, Head::Target);
      return joint_loss(tape, model, p, x_adv, y, adversarial(src.images, src.labels, Head::Source), src.labels,
                        cfg.lambda_uot);
    }
  }
  throw InvalidArgument("unhandled method");
}

/// Re-estimates the frozen statistics on adversarial target data before fine-tuning.
/// Perturbations attack the pre-trained network (frozen statistics, pre-trained head) with its own
/// argmax predictions as labels; the perturbed batch then runs through the frozen affines with
/// batch statistics, and those statistics are folded into the frozen set with the BN momentum.
template <typename Scalar>
void warmup_bn(Model<Scalar>& model, const Tensor<Scalar>& images, const AttackConfig& attack, int epochs,
               Index batch_size, std::mt19937_64& rng) {
  if (epochs <= 0 || images.empty()) return;
  const Head head = model.has_source_head() ? Head::Source : Head::Target;
  const NormPlan pretrained{StatsSource::Frozen, AffineSet::Frozen};
  const NormPlan collect{StatsSource::Batch, AffineSet::Frozen};
  const Index n = images.dim(0);
  for (int e = 0; e < epochs; ++e) {
    for (Index begin = 0; begin + 1 < n; begin += batch_size) {
      const auto x = slice_rows(images, begin, std::min(begin + batch_size, n));
      Tape<Scalar> probe;
      const auto pseudo = argmax_rows(
          forward(model, bind_constants(probe, model.params), pretrained, probe.constant(x), head).logits.value());
      const auto x_adv = pgd_attack(model, pretrained, x, pseudo, attack, rng, head);
      Tape<Scalar> tape;
      const auto fp = forward(model, bind_constants(tape, model.params), collect, tape.constant(x_adv), head);
      for (std::size_t l = 0; l < kBlocks; ++l) {
        auto& s = model.bn[l];
        ema_update(s.frozen_mean, fp.blocks[l].batch_stats->mean, s.momentum);
        ema_update(s.frozen_var, fp.blocks[l].batch_stats->var, s.momentum);
      }
    }
  }
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double clean_acc = 0;
  double pgd_acc = 0;
  double grad_norm_mean = 0;
  double grad_norm_cv = 0;
  double weight_dist = 0;
};

template <typename Scalar>
struct TrainResult {
  Model<Scalar> model;
  std::vector<EpochRecord> history;
  std::vector<std::vector<double>> grad_norms;  // per epoch, per step
};

template <typename Scalar>
struct TrainOptions {
  TrainingContext<Scalar> context;
  std::optional<AttackConfig> eval_attack;  // defaults to the training attack with CE loss
  bool evaluate_robust = true;
  Index eval_batch = 256;
};

/// Batches of one epoch. TWINS batches are trimmed to even sizes; batches too small
/// for batch statistics are dropped.
inline std::vector<std::vector<Index>> epoch_batches(const std::vector<Index>& order, Index batch_size, bool twins) {
  std::vector<std::vector<Index>> out;
  const Index n = static_cast<Index>(order.size());
  for (Index begin = 0; begin < n; begin += batch_size) {
    Index end = std::min(begin + batch_size, n);
    if (twins && (end - begin) % 2 != 0) --end;
    if (end - begin < (twins ? 4 : 2)) continue;
    out.emplace_back(order.begin() + begin, order.begin() + end);
  }
  return out;
}

/// The epoch/batch loop: per batch, attack + objective + backprop + SGD; per epoch,
/// clean and PGD validation accuracy, gradient-norm statistics and distance from the start.
template <typename Scalar>
TrainResult<Scalar> run_training(const TrainConfig& cfg, const Dataset<Scalar>& train, const Dataset<Scalar>& val,
                                 Model<Scalar> init, const TrainOptions<Scalar>& options = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::mt19937_64 eval_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult<Scalar> result{std::move(init), {}, {}};
  Model<Scalar>& model = result.model;
  TrainingContext<Scalar> ctx = options.context;
  std::optional<Model<Scalar>> lwf_reference;
  if (cfg.method == Method::Lwf && !ctx.pretrained) {
    lwf_reference = model;
    ctx.pretrained = &*lwf_reference;
  }
  if (cfg.method == Method::Joint && !model.has_source_head()) throw InvalidArgument("joint needs a source head");
  if (cfg.epochs > 0 && is_twins(cfg.method)) {
    warmup_bn(model, train.images, cfg.train_attack(), cfg.warmup_epochs, cfg.batch_size, rng);
  }

  const ParamStore<Scalar> start = backbone(model.params);
  const auto trainable = trainable_parameters(model, cfg.method);
  AttackConfig eval_attack = options.eval_attack.value_or(cfg.attack);
  if (!options.eval_attack) eval_attack.loss = AttackLoss::CE;
  OptState<Scalar> opt;
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double rate = lr_at_epoch(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> norms;
    double loss_total = 0;
    const auto batches = epoch_batches(order, cfg.batch_size, is_twins(cfg.method));
    for (const auto& rows : batches) {
      const auto batch = train.subset(rows);
      Tape<Scalar> tape;
      const auto p = bind_parameters(tape, model.params);
      const auto loss = method_loss(tape, model, p, batch.images, batch.labels, cfg, ctx, rng);
      const auto grads = tape.backprop(loss);
      GradientSet<Scalar> used;
      for (const auto& name : trainable) used.emplace(name, grads.at(name));
      norms.push_back(concatenated_norm(used));
      loss_total += double(loss.value().item());
      sgd_update(model.params, used, opt, rate, cfg.weight_decay, cfg.momentum, trainable);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = rate;
    rec.train_loss = batches.empty() ? 0.0 : loss_total / double(batches.size());
    const auto eval = evaluate(model, val, options.evaluate_robust ? std::optional(eval_attack) : std::nullopt,
                               eval_rng, options.eval_batch);
    rec.clean_acc = eval.clean_acc;
    rec.pgd_acc = eval.robust_acc.value_or(0.0);
    if (!norms.empty()) {
      const auto s = grad_norm_epoch_stats(norms);
      rec.grad_norm_mean = s.mean;
      rec.grad_norm_cv = s.cv;
    }
    rec.weight_dist = weight_distance(backbone(model.params), start);
    result.history.push_back(rec);
    result.grad_norms.push_back(std::move(norms));
  }
  return result;
}

/// Fine-tuning initialization from a pre-trained single-branch model: both branches start from the
/// pre-trained affines, the frozen and running statistics from its population statistics, the
/// pre-trained classifier becomes the source head and a fresh target head is drawn.
template <typename Scalar>
Model<Scalar> init_finetune(const Model<Scalar>& pretrained, Index target_classes, std::mt19937_64& rng) {
  ModelConfig config = pretrained.config;
  config.source_classes = pretrained.config.target_classes;
  config.target_classes = target_classes;
  Model<Scalar> m = init_model<Scalar>(config, rng);
  for (const auto& [name, t] : pretrained.params) {
    if (names::is_head(name)) continue;
    m.params[name] = t;
  }
  for (int l = 0; l < kBlocks; ++l) {
    for (const char* which : {"gamma", "beta"}) {
      m.params[names::bn(l, AffineSet::Frozen, which)] = pretrained.params.at(names::bn(l, AffineSet::Adaptive, which));
    }
    auto& s = m.bn[static_cast<std::size_t>(l)];
    const auto& src = pretrained.bn[static_cast<std::size_t>(l)];
    s = src;
    s.frozen_mean = src.running_mean;
    s.frozen_var = src.running_var;
  }
  m.params[names::head_weight(Head::Source)] = pretrained.params.at(names::head_weight(Head::Target));
  m.params[names::head_bias(Head::Source)] = pretrained.params.at(names::head_bias(Head::Target));
  return m;
}

}  // namespace twins

#endif  // TWINS_TRAINING_HPP
