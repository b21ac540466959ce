#include "twins/workbench/experiment.hpp"

#include "twins/workbench/checkpoint.hpp"
#include "twins/workbench/metrics.hpp"

namespace twins::workbench {

namespace {

std::filesystem::path run_directory(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto dir = cfg.output_dir / ("seed_" + std::to_string(seed));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
  return dir;
}

ModelConfig model_config(const ExperimentConfig& cfg, const Dataset<float>& data) {
  ModelConfig m;
  m.channels = data.images.dim(1);
  m.height = data.images.dim(2);
  m.width = data.images.dim(3);
  m.widths = cfg.widths;
  m.target_classes = data.classes;
  return m;
}

template <typename Scalar>
std::filesystem::path pretrain_impl(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (!cfg.pretrain || !cfg.source) throw ConfigError("pretraining needs 'pretrain' and 'source' sections");
  const auto dir = run_directory(cfg, seed);
  const auto source = load_dataset(*cfg.source);
  TrainConfig tc = *cfg.pretrain;
  tc.seed = seed;
  std::mt19937_64 rng(seed);
  auto init = init_model<Scalar>(model_config(cfg, source.train), rng);
  TrainOptions<Scalar> options;
  options.eval_attack = tc.attack;
  const auto result = run_training(tc, source.train.template cast<Scalar>(), source.val.template cast<Scalar>(),
                                   std::move(init), options);
  const auto ckpt = dir / "pretrain.ckpt";
  save_checkpoint(ckpt, result.model, {method_name(tc.method), "pretrain", seed, tc.epochs});
  if (!result.history.empty()) write_metrics(result.history, dir / "pretrain_metrics.csv");
  return ckpt;
}

template <typename Scalar>
RunArtifacts finetune_impl(const ExperimentConfig& cfg, std::uint64_t seed,
                           const std::optional<std::filesystem::path>& init_path) {
  const auto dir = run_directory(cfg, seed);
  const auto target = load_dataset(cfg.target);
  std::optional<SplitDataset> source;
  if (cfg.source) source = load_dataset(*cfg.source);

  TrainConfig tc = cfg.finetune;
  tc.seed = seed;
  std::mt19937_64 rng(seed + 1);
  Model<Scalar> init;
  if (init_path) {
    const auto loaded = load_checkpoint<Scalar>(*init_path);
    const auto& pc = loaded.model.config;
    if (pc.channels != target.train.images.dim(1) || pc.height != target.train.images.dim(2) ||
        pc.width != target.train.images.dim(3)) {
      throw InvalidArgument("pre-trained input shape does not match the target data");
    }
    init = init_finetune(loaded.model, target.train.classes, rng);
  } else {
    auto mc = model_config(cfg, target.train);
    if (tc.method == Method::Joint && source) mc.source_classes = source->train.classes;
    init = init_model<Scalar>(mc, rng);
  }

  TrainOptions<Scalar> options;
  options.eval_attack = cfg.eval_attack;
  Dataset<Scalar> source_train;
  if (source) {
    source_train = source->train.template cast<Scalar>();
    options.context.source = &source_train;
  }
  auto result = run_training(tc, target.train.template cast<Scalar>(), target.val.template cast<Scalar>(),
                             std::move(init), options);

  RunArtifacts art;
  art.seed = seed;
  art.directory = dir;
  art.checkpoint = dir / "finetune.ckpt";
  art.metrics = dir / "metrics.csv";
  save_checkpoint(art.checkpoint, result.model, {method_name(tc.method), "finetune", seed, tc.epochs});
  if (!result.history.empty()) write_metrics(result.history, art.metrics);
  art.history = std::move(result.history);
  return art;
}

}  // namespace

std::filesystem::path run_pretrain(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.precision == Precision::F32 ? pretrain_impl<float>(cfg, seed) : pretrain_impl<double>(cfg, seed);
}

RunArtifacts run_finetune(const ExperimentConfig& cfg, std::uint64_t seed,
                          const std::optional<std::filesystem::path>& init) {
  return cfg.precision == Precision::F32 ? finetune_impl<float>(cfg, seed, init)
                                         : finetune_impl<double>(cfg, seed, init);
}

std::vector<RunArtifacts> run_experiment(const ExperimentConfig& cfg) {
  std::vector<RunArtifacts> runs;
  for (std::uint64_t seed : cfg.seeds) {
    std::optional<std::filesystem::path> init = cfg.init_checkpoint;
    if (cfg.pretrain) init = run_pretrain(cfg, seed);
    runs.push_back(run_finetune(cfg, seed, init));
  }
  return runs;
}

}  // namespace twins::workbench
