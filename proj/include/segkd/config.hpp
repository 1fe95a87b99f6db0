#pragma once

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "segkd/data.hpp"
#include "segkd/losses.hpp"
#include "segkd/models.hpp"
#include "segkd/train.hpp"

namespace segkd {

struct SynthDataConfig {
  bool enabled = false;
  int n_benign = 0;
  int n_malignant = 0;
  std::uint64_t seed = 7;
};

struct DataConfig {
  std::string busi_root;  // class-per-directory dataset root
  LayoutDescriptor layout;
  bool include_normal = false;
  SynthDataConfig synth;
  SplitPlan split;
  int resolution = 512;
  bool augment = false;
};

struct ModelSection {
  TeacherConfig teacher;
  StudentConfig student;
  std::string ablation_model = "student";  // "student" or "teacher"
};

struct LossSection {
  std::string preset = "double_teacher";
  LossWeights weights = LossWeights::double_teacher();
  double temperature = 1.0;
};

struct TrainSection {
  TrainConfig teacher;
  TrainConfig distill;
};

/// One experiment: a single document with {data, model, loss, train}
/// sections and an output directory. Unknown keys anywhere are rejected.
struct ExperimentConfig {
  DataConfig data;
  ModelSection model;
  LossSection loss;
  TrainSection train;
  std::string output_dir = "out";
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& section) {
  if (!j.is_object()) throw ValidationError("section " + section + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ValidationError("unknown key \"" + key + "\" in " + section);
}

inline LossWeights weights_for_preset(const std::string& preset) {
  if (preset == "supervised") return LossWeights::supervised();
  if (preset == "single_teacher") return LossWeights::single_teacher();
  if (preset == "double_teacher") return LossWeights::double_teacher();
  throw ValidationError("unknown loss preset: " + preset +
                        " (expected supervised, single_teacher, double_teacher or custom)");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& section) {
  check_keys(j,
             {"lr", "weight_decay", "batch_size", "epochs", "plateau_patience", "plateau_factor",
              "plateau_min_lr", "plateau_rel_threshold", "seed", "teacher_mode", "augment",
              "stop_at_train_dice"},
             section);
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_min_lr = j.value("plateau_min_lr", c.plateau_min_lr);
  c.plateau_rel_threshold = j.value("plateau_rel_threshold", c.plateau_rel_threshold);
  c.seed = j.value("seed", c.seed);
  c.augment = j.value("augment", c.augment);
  c.stop_at_train_dice = j.value("stop_at_train_dice", c.stop_at_train_dice);
  if (j.contains("teacher_mode")) {
    const std::string m = j.at("teacher_mode").get<std::string>();
    if (m == "frozen")
      c.teacher_mode = TeacherMode::frozen;
    else if (m == "cofinetune")
      c.teacher_mode = TeacherMode::cofinetune;
    else
      throw ValidationError("unknown teacher_mode: " + m);
  }
  c.validate();
  return c;
}

inline std::set<ClassLabel> classes_from_json(const nlohmann::json& j,
                                              const std::string& section) {
  std::set<ClassLabel> out;
  for (const auto& it : j) {
    const ClassLabel c = class_from_string(it.get<std::string>());
    if (c == ClassLabel::normal)
      throw ValidationError(section + ": split classes must be benign/malignant");
    out.insert(c);
  }
  if (out.empty()) throw ValidationError(section + ": class list is empty");
  return out;
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"data", "model", "loss", "train", "output_dir"}, "config");
  ExperimentConfig cfg;
  cfg.output_dir = j.value("output_dir", cfg.output_dir);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d,
                       {"busi_root", "layout", "include_normal", "synthetic", "split",
                        "resolution", "augment"},
                       "data");
    cfg.data.busi_root = d.value("busi_root", cfg.data.busi_root);
    cfg.data.include_normal = d.value("include_normal", cfg.data.include_normal);
    cfg.data.resolution = d.value("resolution", cfg.data.resolution);
    cfg.data.augment = d.value("augment", cfg.data.augment);
    if (d.contains("layout")) {
      const auto& l = d.at("layout");
      detail::check_keys(l, {"class_dirs", "image_extension", "mask_suffix"}, "data.layout");
      if (l.contains("class_dirs"))
        cfg.data.layout.class_dirs =
            l.at("class_dirs").get<std::map<std::string, std::string>>();
      cfg.data.layout.image_extension =
          l.value("image_extension", cfg.data.layout.image_extension);
      cfg.data.layout.mask_suffix = l.value("mask_suffix", cfg.data.layout.mask_suffix);
    }
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      detail::check_keys(s, {"enabled", "n_benign", "n_malignant", "seed"}, "data.synthetic");
      cfg.data.synth.enabled = s.value("enabled", cfg.data.synth.enabled);
      cfg.data.synth.n_benign = s.value("n_benign", cfg.data.synth.n_benign);
      cfg.data.synth.n_malignant = s.value("n_malignant", cfg.data.synth.n_malignant);
      cfg.data.synth.seed = s.value("seed", cfg.data.synth.seed);
    }
    if (d.contains("split")) {
      const auto& s = d.at("split");
      detail::check_keys(s, {"train_classes", "test_classes", "train_fraction", "seed"},
                         "data.split");
      if (s.contains("train_classes"))
        cfg.data.split.train_classes =
            detail::classes_from_json(s.at("train_classes"), "data.split");
      if (s.contains("test_classes"))
        cfg.data.split.test_classes =
            detail::classes_from_json(s.at("test_classes"), "data.split");
      cfg.data.split.train_fraction = s.value("train_fraction", cfg.data.split.train_fraction);
      cfg.data.split.seed = s.value("seed", cfg.data.split.seed);
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m, {"teacher", "student", "ablation_model"}, "model");
    cfg.model.ablation_model = m.value("ablation_model", cfg.model.ablation_model);
    if (cfg.model.ablation_model != "student" && cfg.model.ablation_model != "teacher")
      throw ValidationError("model.ablation_model must be \"student\" or \"teacher\"");
    if (m.contains("teacher")) {
      const auto& t = m.at("teacher");
      detail::check_keys(t,
                         {"in_channels", "out_channels", "stem_width", "stage_blocks",
                          "stage_widths", "decoder_widths", "seed"},
                         "model.teacher");
      TeacherConfig& tc = cfg.model.teacher;
      tc.in_channels = t.value("in_channels", tc.in_channels);
      tc.out_channels = t.value("out_channels", tc.out_channels);
      tc.stem_width = t.value("stem_width", tc.stem_width);
      if (t.contains("stage_blocks"))
        tc.stage_blocks = t.at("stage_blocks").get<std::array<int, 4>>();
      if (t.contains("stage_widths"))
        tc.stage_widths = t.at("stage_widths").get<std::array<int, 4>>();
      if (t.contains("decoder_widths"))
        tc.decoder_widths = t.at("decoder_widths").get<std::array<int, 4>>();
      tc.seed = t.value("seed", tc.seed);
    }
    if (m.contains("student")) {
      const auto& s = m.at("student");
      detail::check_keys(s, {"in_channels", "out_channels", "widths", "seed"}, "model.student");
      StudentConfig& sc = cfg.model.student;
      sc.in_channels = s.value("in_channels", sc.in_channels);
      sc.out_channels = s.value("out_channels", sc.out_channels);
      if (s.contains("widths")) sc.widths = s.at("widths").get<std::vector<int>>();
      sc.seed = s.value("seed", sc.seed);
    }
  }

  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::check_keys(l, {"preset", "lambda", "temperature"}, "loss");
    cfg.loss.preset = l.value("preset", cfg.loss.preset);
    cfg.loss.temperature = l.value("temperature", cfg.loss.temperature);
    if (!(cfg.loss.temperature > 0)) throw ValidationError("loss.temperature must be positive");
    if (cfg.loss.preset == "custom") {
      if (!l.contains("lambda"))
        throw ValidationError("loss preset \"custom\" requires a lambda array [hard, benign, malignant]");
      const auto lam = l.at("lambda").get<std::vector<double>>();
      if (lam.size() != 3) throw ValidationError("loss.lambda must have three entries");
      cfg.loss.weights = LossWeights{lam[0], lam[1], lam[2]};
    } else {
      if (l.contains("lambda"))
        throw ValidationError("loss.lambda is only valid with preset \"custom\"");
      cfg.loss.weights = detail::weights_for_preset(cfg.loss.preset);
    }
    cfg.loss.weights.validate();
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t, {"teacher", "distill"}, "train");
    if (t.contains("teacher"))
      cfg.train.teacher = detail::train_config_from_json(t.at("teacher"), "train.teacher");
    if (t.contains("distill"))
      cfg.train.distill = detail::train_config_from_json(t.at("distill"), "train.distill");
  }

  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json split{{"train_fraction", cfg.data.split.train_fraction},
                       {"seed", cfg.data.split.seed}};
  auto class_list = [](const std::set<ClassLabel>& s) {
    std::vector<std::string> v;
    for (ClassLabel c : s) v.emplace_back(to_string(c));
    return v;
  };
  split["train_classes"] = class_list(cfg.data.split.train_classes);
  split["test_classes"] = class_list(cfg.data.split.test_classes);
  auto train_json = [](const TrainConfig& c) {
    return nlohmann::json{
        {"lr", c.lr},
        {"weight_decay", c.weight_decay},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"plateau_patience", c.plateau_patience},
        {"plateau_factor", c.plateau_factor},
        {"plateau_min_lr", c.plateau_min_lr},
        {"plateau_rel_threshold", c.plateau_rel_threshold},
        {"seed", c.seed},
        {"teacher_mode", c.teacher_mode == TeacherMode::frozen ? "frozen" : "cofinetune"},
        {"augment", c.augment},
        {"stop_at_train_dice", c.stop_at_train_dice}};
  };
  return nlohmann::json{
      {"data",
       {{"busi_root", cfg.data.busi_root},
        {"include_normal", cfg.data.include_normal},
        {"synthetic",
         {{"enabled", cfg.data.synth.enabled},
          {"n_benign", cfg.data.synth.n_benign},
          {"n_malignant", cfg.data.synth.n_malignant},
          {"seed", cfg.data.synth.seed}}},
        {"split", split},
        {"resolution", cfg.data.resolution},
        {"augment", cfg.data.augment}}},
      {"model",
       {{"teacher", to_json(cfg.model.teacher)},
        {"student", to_json(cfg.model.student)},
        {"ablation_model", cfg.model.ablation_model}}},
      {"loss",
       {{"preset", cfg.loss.preset},
        {"lambda",
         {cfg.loss.weights.hard, cfg.loss.weights.benign, cfg.loss.weights.malignant}},
        {"temperature", cfg.loss.temperature}}},
      {"train", {{"teacher", train_json(cfg.train.teacher)}, {"distill", train_json(cfg.train.distill)}}},
      {"output_dir", cfg.output_dir}};
}

// ---------------------------------------------------------------------------
// Data materialization
// ---------------------------------------------------------------------------

struct MaterializedData {
  std::vector<SegSample> train;
  std::vector<SegSample> test;
  std::vector<DatasetRecord> train_records;  // empty for in-memory synthetic data
  std::vector<DatasetRecord> test_records;
};

/// Resolves the configured data source into loaded train/test sample sets.
/// Synthetic mode generates benign+malignant samples in memory and splits
/// them with the same stratified plan as disk datasets; disk mode scans the
/// layout, splits records and loads every sample at the configured
/// resolution. SEGKD_DATA_ROOT supplies a default root when the config
/// leaves it empty.
inline MaterializedData materialize_data(const DataConfig& cfg) {
  MaterializedData out;
  if (cfg.synth.enabled) {
    if (cfg.synth.n_benign < 1 || cfg.synth.n_malignant < 1)
      throw ConfigError("synthetic data needs n_benign >= 1 and n_malignant >= 1");
    std::vector<SegSample> all = synth_generate(cfg.synth.n_benign, ClassLabel::benign,
                                                cfg.resolution, mix_seed(cfg.synth.seed, 1));
    std::vector<SegSample> mal = synth_generate(cfg.synth.n_malignant, ClassLabel::malignant,
                                                cfg.resolution, mix_seed(cfg.synth.seed, 2));
    all.insert(all.end(), std::make_move_iterator(mal.begin()),
               std::make_move_iterator(mal.end()));
    std::vector<ClassLabel> labels;
    labels.reserve(all.size());
    for (const auto& s : all) labels.push_back(s.label);
    auto [train_idx, test_idx] = make_split_indices(labels, cfg.split);
    for (std::size_t i : train_idx) out.train.push_back(all[i]);
    for (std::size_t i : test_idx) out.test.push_back(all[i]);
    return out;
  }

  std::string root = cfg.busi_root;
  if (root.empty()) {
    if (const char* env = std::getenv("SEGKD_DATA_ROOT")) root = env;
  }
  if (root.empty())
    throw ConfigError(
        "no data source: set data.busi_root, SEGKD_DATA_ROOT or enable data.synthetic");
  const ScanResult scan = scan_layout(root, cfg.layout, cfg.include_normal);
  if (scan.records.empty()) throw ConfigError("no usable records under " + root);
  auto [train_recs, test_recs] = make_splits(scan.records, cfg.split);
  for (const auto& r : train_recs) out.train.push_back(load_sample(r, cfg.resolution));
  for (const auto& r : test_recs) out.test.push_back(load_sample(r, cfg.resolution));
  out.train_records = std::move(train_recs);
  out.test_records = std::move(test_recs);
  return out;
}

}  // namespace segkd
