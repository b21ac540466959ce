#include <cstdio>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "twins/analysis.hpp"
#include "twins/workbench/checkpoint.hpp"
#include "twins/workbench/config.hpp"
#include "twins/workbench/experiment.hpp"
#include "twins/workbench/metrics.hpp"

namespace {

using namespace twins;
using namespace twins::workbench;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run a single seed instead of the config's seed list");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--method", o.method, "fine-tuning method (std, at, trades, twins-at, twins-trades, lwf, joint)");
}

ExperimentConfig load_with_overrides(const Overrides& o) {
  auto cfg = load_experiment_config(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.out) cfg.output_dir = *o.out;
  if (o.method) {
    cfg.finetune.method = parse_method(*o.method);
    cfg.finetune.validate();
    if (cfg.finetune.method == Method::Joint && !cfg.source) throw ConfigError("method 'joint' needs a source dataset");
  }
  return cfg;
}

template <typename Scalar>
Model<Scalar> load_model_as(const std::filesystem::path& path) {
  try {
    return load_checkpoint<Scalar>(path).model;
  } catch (const CheckpointError& e) {
    if (e.kind() != CheckpointError::Kind::DtypeMismatch) throw;
  }
  if constexpr (std::is_same_v<Scalar, double>) {
    return load_checkpoint<float>(path).model.template cast<double>();
  } else {
    return load_checkpoint<double>(path).model.template cast<float>();
  }
}

int cmd_gen_data(const Overrides& o) {
  const auto cfg = load_with_overrides(o);
  std::filesystem::create_directories(cfg.output_dir);
  auto emit = [&](const DatasetSpec& spec, const std::string& prefix) {
    const auto d = load_dataset(spec);
    write_idx(d.train, cfg.output_dir / (prefix + "-train-images.idx"), cfg.output_dir / (prefix + "-train-labels.idx"));
    write_idx(d.val, cfg.output_dir / (prefix + "-val-images.idx"), cfg.output_dir / (prefix + "-val-labels.idx"));
    std::cout << prefix << ": " << d.train.size() << " train / " << d.val.size() << " val samples, " << d.train.classes
              << " classes\n";
  };
  emit(cfg.target, "target");
  if (cfg.source) emit(*cfg.source, "source");
  return 0;
}

int cmd_pretrain(const Overrides& o) {
  const auto cfg = load_with_overrides(o);
  for (auto seed : cfg.seeds) std::cout << run_pretrain(cfg, seed).string() << '\n';
  return 0;
}

int cmd_finetune(const Overrides& o, const std::optional<std::string>& init) {
  const auto cfg = load_with_overrides(o);
  std::optional<std::filesystem::path> init_path = cfg.init_checkpoint;
  if (init) init_path = *init;
  for (auto seed : cfg.seeds) {
    const auto art = run_finetune(cfg, seed, init_path);
    std::cout << art.metrics.string() << '\n';
  }
  return 0;
}

int cmd_run(const Overrides& o) {
  const auto cfg = load_with_overrides(o);
  for (const auto& art : run_experiment(cfg)) {
    const auto& last = art.history.back();
    std::printf("seed %llu: clean_acc=%.4f pgd_acc=%.4f -> %s\n", static_cast<unsigned long long>(art.seed),
                last.clean_acc, last.pgd_acc, art.metrics.c_str());
  }
  return 0;
}

template <typename Scalar>
int eval_impl(const ExperimentConfig& cfg, const std::string& checkpoint) {
  const auto model = load_model_as<Scalar>(checkpoint);
  const auto data = load_dataset(cfg.target).val.template cast<Scalar>();
  AttackConfig attack = cfg.eval_attack.value_or(cfg.finetune.attack);
  if (!cfg.eval_attack) attack.loss = AttackLoss::CE;
  std::mt19937_64 rng(cfg.seeds.front());
  const auto r = evaluate(model, data, std::optional(attack), rng);
  std::printf("clean_acc=%.6f robust_acc=%.6f\n", r.clean_acc, r.robust_acc.value_or(0.0));
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint) {
  const auto cfg = load_with_overrides(o);
  return cfg.precision == Precision::F32 ? eval_impl<float>(cfg, checkpoint) : eval_impl<double>(cfg, checkpoint);
}

int cmd_analyze(const std::vector<std::string>& metrics, const std::optional<std::string>& probe,
                const std::optional<std::string>& config) {
  for (const auto& path : metrics) {
    const auto h = read_metrics(path);
    if (h.empty()) throw Error(path + ": no epochs");
    std::vector<double> pgd, norm;
    for (const auto& r : h) {
      pgd.push_back(r.pgd_acc);
      norm.push_back(r.grad_norm_mean);
    }
    const auto gap = overfitting_gap(pgd);
    const double mean_norm = std::accumulate(norm.begin(), norm.end(), 0.0) / double(norm.size());
    const auto quarter = h[std::max<std::size_t>(1, h.size() / 4) - 1];
    std::printf("%s: epochs=%zu mean_grad_norm=%.6g weight_dist@25%%=%.6g final_weight_dist=%.6g "
                "pgd_best=%.4f pgd_final=%.4f gap=%.4f\n",
                path.c_str(), h.size(), mean_norm, quarter.weight_dist, h.back().weight_dist, gap.best, gap.final,
                gap.gap);
  }
  if (probe) {
    if (!config) throw InvalidArgument("--probe needs --config for the probe batch");
    const auto cfg = load_experiment_config(*config);
    auto model = load_model_as<double>(*probe);
    const auto data = load_dataset(cfg.target).val.cast<double>();
    const Index n = std::min<Index>(32, data.size());
    const auto x = slice_rows(data.images, 0, n);
    const Labels y(data.labels.begin(), data.labels.begin() + n);
    const double gammas[] = {0.5, 2.0, 10.0};
    for (int l = 0; l < kBlocks; ++l) {
      model.bn[std::size_t(l)].eps = 0.0;
      for (const auto& r : scale_probe(model, names::conv(l), 0, gammas, x, y)) {
        std::printf("%s gamma=%-4g branch=%-8s forward_delta=%.3e grad_ratio=%.9f argmax_same=%d",
                    names::conv(l).c_str(), r.gamma, r.branch == BranchMode::AdaptiveTrain ? "adaptive" : "frozen",
                    r.forward_delta, r.grad_norm_ratio, int(r.argmax_same));
        if (r.formula_error) std::printf(" formula_rel_err=%.3e", *r.formula_error);
        std::printf("\n");
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TWINS dual-BN robust fine-tuning workbench"};
  app.require_subcommand(1);

  Overrides gen, pre, fine, ev, run;
  std::optional<std::string> init, checkpoint_path;
  std::vector<std::string> metrics_files;
  std::optional<std::string> probe, probe_config;

  auto* c_gen = app.add_subcommand("gen-data", "write the configured datasets as IDX files");
  add_common(c_gen, gen);
  auto* c_pre = app.add_subcommand("pretrain", "robust source-task pre-training");
  add_common(c_pre, pre);
  auto* c_fine = app.add_subcommand("finetune", "robust fine-tuning on the target task");
  add_common(c_fine, fine);
  c_fine->add_option("--init", init, "pre-trained checkpoint")->check(CLI::ExistingFile);
  auto* c_eval = app.add_subcommand("eval", "clean and PGD accuracy of a checkpoint on the target validation split");
  add_common(c_eval, ev);
  std::string eval_ckpt;
  c_eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  auto* c_an = app.add_subcommand("analyze", "summarize metrics files; optionally run the BN scale probe");
  c_an->add_option("metrics", metrics_files, "metrics CSV files")->check(CLI::ExistingFile);
  c_an->add_option("--probe", probe, "checkpoint to probe")->check(CLI::ExistingFile);
  c_an->add_option("--config", probe_config, "config providing the probe batch")->check(CLI::ExistingFile);
  auto* c_run = app.add_subcommand("run", "full pipeline: pre-train, warmup, fine-tune, evaluate");
  add_common(c_run, run);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_pre) return cmd_pretrain(pre);
    if (*c_fine) return cmd_finetune(fine, init);
    if (*c_eval) return cmd_eval(ev, eval_ckpt);
    if (*c_an) return cmd_analyze(metrics_files, probe, probe_config);
    if (*c_run) return cmd_run(run);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
