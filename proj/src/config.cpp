#include "twins/workbench/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace twins::workbench {

namespace {

using nlohmann::json;

void require_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::filesystem::path existing_file(const json& j, const char* key, const std::string& where,
                                    const std::filesystem::path& base) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  std::filesystem::path p = j.at(key).get<std::string>();
  if (p.is_relative() && !base.empty()) p = base / p;
  if (!std::filesystem::is_regular_file(p)) throw ConfigError(where + ": file not found: " + p.string());
  return p;
}

DatasetSpec parse_dataset(const json& j, const std::string& where, const std::filesystem::path& base) {
  require_keys(j, where,
               {"source", "classes", "shape", "train_per_class", "val_per_class", "noise", "seed", "train_images",
                "train_labels", "val_images", "val_labels"});
  DatasetSpec d;
  const std::string source = j.value("source", "synthetic");
  if (source == "synthetic") {
    d.source = DatasetSpec::Source::Synthetic;
  } else if (source == "idx") {
    d.source = DatasetSpec::Source::Idx;
  } else {
    throw ConfigError(where + ": source must be 'synthetic' or 'idx'");
  }
  read(j, "classes", d.classes);
  if (j.contains("shape")) {
    const auto shape = j.at("shape").get<std::vector<Index>>();
    if (shape.size() != 3) throw ConfigError(where + ": shape must be [channels, height, width]");
    d.channels = shape[0];
    d.height = shape[1];
    d.width = shape[2];
  }
  read(j, "train_per_class", d.train_per_class);
  read(j, "val_per_class", d.val_per_class);
  read(j, "noise", d.noise);
  read(j, "seed", d.seed);
  if (d.source == DatasetSpec::Source::Idx) {
    d.train_images = existing_file(j, "train_images", where, base);
    d.train_labels = existing_file(j, "train_labels", where, base);
    d.val_images = existing_file(j, "val_images", where, base);
    d.val_labels = existing_file(j, "val_labels", where, base);
  } else if (d.classes < 2) {
    throw ConfigError(where + ": synthetic data needs at least 2 classes");
  }
  return d;
}

AttackConfig parse_attack(const json& j, const std::string& where, AttackConfig a) {
  require_keys(j, where, {"epsilon", "alpha", "steps", "rand_init", "loss"});
  read(j, "epsilon", a.epsilon);
  read(j, "alpha", a.alpha);
  read(j, "steps", a.steps);
  read(j, "rand_init", a.rand_init);
  if (j.contains("loss")) {
    const std::string loss = j.at("loss");
    if (loss == "ce") {
      a.loss = AttackLoss::CE;
    } else if (loss == "kl") {
      a.loss = AttackLoss::KLToClean;
    } else {
      throw ConfigError(where + ": attack loss must be 'ce' or 'kl'");
    }
  }
  try {
    a.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return a;
}

TrainConfig parse_train(const json& j, const std::string& where, TrainConfig t) {
  require_keys(j, where,
               {"method", "lr", "weight_decay", "momentum", "lambda_twins", "lambda_lwf", "lambda_uot", "beta",
                "batch_size", "epochs", "milestones", "decay", "warmup_epochs", "kl_order", "reduction", "attack"});
  try {
    if (j.contains("method")) t.method = parse_method(j.at("method").get<std::string>());
  } catch (const InvalidArgument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  read(j, "lr", t.lr);
  read(j, "weight_decay", t.weight_decay);
  read(j, "momentum", t.momentum);
  read(j, "lambda_twins", t.lambda_twins);
  read(j, "lambda_lwf", t.lambda_lwf);
  read(j, "lambda_uot", t.lambda_uot);
  read(j, "beta", t.beta);
  read(j, "batch_size", t.batch_size);
  read(j, "epochs", t.epochs);
  read(j, "milestones", t.milestones);
  read(j, "decay", t.decay);
  read(j, "warmup_epochs", t.warmup_epochs);
  if (j.contains("kl_order")) {
    const std::string order = j.at("kl_order");
    if (order != "adv-first" && order != "clean-first") throw ConfigError(where + ": kl_order must be adv-first or clean-first");
    t.kl_order = order == "adv-first" ? KlOrder::AdvFirst : KlOrder::CleanFirst;
  }
  if (j.contains("reduction")) {
    const std::string r = j.at("reduction");
    if (r != "mean" && r != "sum") throw ConfigError(where + ": reduction must be mean or sum");
    t.reduction = r == "mean" ? Reduction::Mean : Reduction::Sum;
  }
  if (j.contains("attack")) {
    t.attack = parse_attack(j.at("attack"), where + ".attack", t.attack);
    if (j.at("attack").contains("loss")) t.attack_loss = t.attack.loss;
  }
  try {
    t.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return t;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  require_keys(j, "config",
               {"source", "target", "model", "precision", "pretrain", "finetune", "eval_attack", "init_checkpoint",
                "output_dir", "seeds"});
  ExperimentConfig cfg;
  try {
    if (!j.contains("target")) throw ConfigError("config: missing 'target' dataset");
    cfg.target = parse_dataset(j.at("target"), "target", base_dir);
    if (j.contains("source")) cfg.source = parse_dataset(j.at("source"), "source", base_dir);
    if (j.contains("model")) {
      require_keys(j.at("model"), "model", {"widths"});
      read(j.at("model"), "widths", cfg.widths);
    }
    if (j.contains("precision")) {
      const std::string p = j.at("precision");
      if (p != "f32" && p != "f64") throw ConfigError("config: precision must be f32 or f64");
      cfg.precision = p == "f32" ? Precision::F32 : Precision::F64;
    }
    if (j.contains("pretrain")) {
      if (!cfg.source) throw ConfigError("config: 'pretrain' needs a 'source' dataset");
      TrainConfig defaults;
      defaults.attack.epsilon = 4.0 / 255.0;
      cfg.pretrain = parse_train(j.at("pretrain"), "pretrain", defaults);
    }
    cfg.finetune = parse_train(j.value("finetune", json::object()), "finetune", TrainConfig{});
    if (cfg.finetune.method == Method::Joint && !cfg.source) {
      throw ConfigError("finetune: method 'joint' needs a 'source' dataset");
    }
    if (j.contains("eval_attack")) {
      AttackConfig a = parse_attack(j.at("eval_attack"), "eval_attack", AttackConfig{});
      cfg.eval_attack = a;
    }
    if (j.contains("init_checkpoint")) cfg.init_checkpoint = existing_file(j, "init_checkpoint", "config", base_dir);
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    read(j, "seeds", cfg.seeds);
    if (cfg.seeds.empty()) throw ConfigError("config: 'seeds' must not be empty");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: wrong value type: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path.parent_path());
}

}  // namespace twins::workbench
