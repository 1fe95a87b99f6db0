// Command-line front end: analyze / synth / train-teachers / distill /
// evaluate / ablation over a single JSON experiment config.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "segkd/segkd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_override;
  std::optional<std::uint64_t> seed_override;
  std::string device = "cpu";
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_config = true) {
  auto* c = cmd->add_option("--config", o.config_path, "experiment config (JSON)");
  if (needs_config) c->required();
  cmd->add_option("--out", o.out_override, "output directory (overrides config)");
  cmd->add_option("--seed", o.seed_override, "seed overriding every seed in the config");
  cmd->add_option("--device", o.device, "compute device (only cpu is supported)");
}

segkd::ExperimentConfig load_config(const CommonOpts& o) {
  if (o.device != "cpu") throw segkd::ConfigError("unsupported device: " + o.device);
  segkd::ExperimentConfig cfg;
  try {
    cfg = segkd::load_experiment_config(o.config_path);
  } catch (const std::exception& e) {
    throw segkd::ConfigError(std::string(e.what()) + " (config: " + o.config_path + ")");
  }
  if (!o.out_override.empty()) cfg.output_dir = o.out_override;
  if (o.seed_override) {
    const std::uint64_t s = *o.seed_override;
    cfg.data.split.seed = s;
    cfg.data.synth.seed = s;
    cfg.model.teacher.seed = s;
    cfg.model.student.seed = s;
    cfg.train.teacher.seed = s;
    cfg.train.distill.seed = s;
  }
  return cfg;
}

void write_config_copy(const segkd::ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  std::ofstream out(fs::path(cfg.output_dir) / "config.json");
  out << segkd::to_json(cfg).dump(2) << "\n";
}

void write_manifests(const segkd::ExperimentConfig& cfg, const segkd::MaterializedData& data) {
  if (!data.train_records.empty())
    segkd::write_manifest((fs::path(cfg.output_dir) / "train_manifest.jsonl").string(),
                          data.train_records);
  if (!data.test_records.empty())
    segkd::write_manifest((fs::path(cfg.output_dir) / "test_manifest.jsonl").string(),
                          data.test_records);
}

std::string strip_ckpt_suffix(std::string path) {
  for (const char* ext : {".bin", ".json"}) {
    if (path.size() > std::strlen(ext) && path.ends_with(ext))
      return path.substr(0, path.size() - std::strlen(ext));
  }
  return path;
}

// ---------------------------------------------------------------------------

int cmd_analyze(const std::vector<std::string>& models, const std::string& spec_file,
                int resolution, const std::string& dump_path) {
  std::printf("%-16s %10s %10s %10s\n", "model", "params/1e6", "size/MiB", "GFLOPs");
  auto print_row = [&](const std::string& name, const segkd::ArchSpec& spec) {
    const segkd::ComplexityReport r = segkd::analyze(spec, resolution);
    std::printf("%-16s %10.1f %10.1f %10.2f\n", name.c_str(),
                static_cast<double>(r.params) / 1e6, r.size_mib, r.gflops);
  };
  std::optional<segkd::ArchSpec> last;
  for (const auto& name : models) {
    last = segkd::named_arch(name);
    print_row(name, *last);
  }
  if (!spec_file.empty()) {
    std::ifstream in(spec_file);
    if (!in) throw segkd::IoError("cannot read spec: " + spec_file);
    json j;
    in >> j;
    last = segkd::arch_from_json(j);
    segkd::validate(*last);
    print_row(fs::path(spec_file).stem().string(), *last);
  }
  if (!dump_path.empty()) {
    if (!last) throw segkd::ConfigError("--dump requires a model or spec to analyze");
    std::ofstream out(dump_path);
    if (!out) throw segkd::IoError("cannot write spec: " + dump_path);
    out << segkd::to_json(*last).dump(2) << "\n";
  }
  return 0;
}

int cmd_synth(const std::string& out_dir, int n_benign, int n_malignant, int resolution,
              std::uint64_t seed) {
  std::vector<segkd::SegSample> samples =
      segkd::synth_generate(n_benign, segkd::ClassLabel::benign, resolution,
                            segkd::mix_seed(seed, 1));
  std::vector<segkd::SegSample> mal = segkd::synth_generate(
      n_malignant, segkd::ClassLabel::malignant, resolution, segkd::mix_seed(seed, 2));
  samples.insert(samples.end(), mal.begin(), mal.end());
  segkd::write_busi_layout(out_dir, samples);
  std::printf("wrote %d benign + %d malignant samples at %dx%d under %s\n", n_benign,
              n_malignant, resolution, resolution, out_dir.c_str());
  return 0;
}

int cmd_train_teachers(const CommonOpts& opts) {
  const segkd::ExperimentConfig cfg = load_config(opts);
  const segkd::MaterializedData data = segkd::materialize_data(cfg.data);
  write_config_copy(cfg);
  write_manifests(cfg, data);

  for (const segkd::Role role : {segkd::Role::benign_teacher, segkd::Role::malignant_teacher}) {
    auto [net, history] =
        segkd::train_teacher(role, data.train, cfg.model.teacher, cfg.train.teacher,
                             data.test.empty() ? nullptr : &data.test);
    const fs::path prefix = fs::path(cfg.output_dir) / segkd::to_string(role);
    segkd::save_checkpoint(net, prefix.string(),
                           static_cast<int>(history.rows.size()), cfg.train.teacher.seed);
    history.save(prefix.string() + "_history.csv");
    const auto& last = history.rows.back();
    std::string val;
    if (last.has_val) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), " val_dice=%.4f", last.val.dice);
      val = buf;
    }
    std::printf("%s: epochs=%zu final_loss=%.6f%s\n", segkd::to_string(role),
                history.rows.size(), last.total, val.c_str());
  }
  return 0;
}

int cmd_distill(const CommonOpts& opts, const std::string& preset_override,
                const std::string& benign_ckpt, const std::string& malignant_ckpt) {
  segkd::ExperimentConfig cfg = load_config(opts);
  if (!preset_override.empty()) {
    json base = segkd::to_json(cfg);
    base["loss"]["preset"] = preset_override;
    base["loss"].erase("lambda");
    cfg = segkd::experiment_config_from_json(base);
    if (!opts.out_override.empty()) cfg.output_dir = opts.out_override;
  }
  const segkd::LossWeights w = cfg.loss.weights;

  std::optional<segkd::NetworkHandle<float>> benign, malignant;
  if (!benign_ckpt.empty()) benign = segkd::load_checkpoint(strip_ckpt_suffix(benign_ckpt));
  if (!malignant_ckpt.empty())
    malignant = segkd::load_checkpoint(strip_ckpt_suffix(malignant_ckpt));
  if (w.benign > 0 && !benign)
    throw segkd::ConfigError("preset needs a benign teacher: pass --benign-ckpt");
  if (w.malignant > 0 && !malignant)
    throw segkd::ConfigError("preset needs a malignant teacher: pass --malignant-ckpt");

  const segkd::MaterializedData data = segkd::materialize_data(cfg.data);
  write_config_copy(cfg);
  write_manifests(cfg, data);

  auto [student, history] = segkd::distill_student(
      cfg.model.student, benign ? &*benign : nullptr, malignant ? &*malignant : nullptr,
      data.train, w, cfg.train.distill, cfg.loss.temperature,
      data.test.empty() ? nullptr : &data.test);

  const fs::path prefix = fs::path(cfg.output_dir) / "student";
  segkd::save_checkpoint(student, prefix.string(), static_cast<int>(history.rows.size()),
                         cfg.train.distill.seed,
                         json{{"loss_weights", {w.hard, w.benign, w.malignant}},
                              {"preset", cfg.loss.preset},
                              {"temperature", cfg.loss.temperature}});
  history.save(prefix.string() + "_history.csv");
  std::printf("student: epochs=%zu final_loss=%.6f\n", history.rows.size(),
              history.rows.back().total);
  if (!data.test.empty()) {
    const segkd::MetricsReport m = segkd::evaluate(student, data.test);
    std::printf("student test: dice=%.4f miou=%.4f (n=%d)\n", m.dice, m.miou, m.n_images);
  }
  return 0;
}

int cmd_evaluate(const CommonOpts& opts, const std::vector<std::string>& ckpts,
                 std::string csv_path) {
  const segkd::ExperimentConfig cfg = load_config(opts);
  segkd::MaterializedData data = segkd::materialize_data(cfg.data);
  if (data.test.empty()) throw segkd::ConfigError("evaluate: test split is empty");
  fs::create_directories(cfg.output_dir);
  if (csv_path.empty()) csv_path = (fs::path(cfg.output_dir) / "evaluate.csv").string();

  std::ofstream csv(csv_path);
  if (!csv) throw segkd::IoError("cannot write " + csv_path);
  csv << "model,dice,precision,recall,miou,accuracy,params_e6,size_mib,gflops\n";
  std::printf("%-20s %8s %10s %8s %8s %9s %11s %9s %8s\n", "model", "dice", "precision",
              "recall", "miou", "accuracy", "params/1e6", "size/MiB", "GFLOPs");
  for (const auto& c : ckpts) {
    segkd::NetworkHandle<float> net = segkd::load_checkpoint(strip_ckpt_suffix(c));
    const segkd::MetricsReport m = segkd::evaluate(net, data.test);
    const segkd::ComplexityReport cx = segkd::analyze(net.arch, cfg.data.resolution);
    const std::string name = fs::path(strip_ckpt_suffix(c)).stem().string();
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.1f,%.1f,%.2f", name.c_str(),
                  m.dice, m.precision, m.recall, m.miou, m.accuracy,
                  static_cast<double>(cx.params) / 1e6, cx.size_mib, cx.gflops);
    csv << row << "\n";
    std::printf("%-20s %8.4f %10.4f %8.4f %8.4f %9.4f %11.1f %9.1f %8.2f\n", name.c_str(),
                m.dice, m.precision, m.recall, m.miou, m.accuracy,
                static_cast<double>(cx.params) / 1e6, cx.size_mib, cx.gflops);
  }
  std::printf("wrote %s\n", csv_path.c_str());
  return 0;
}

int cmd_ablation(const CommonOpts& opts) {
  const segkd::ExperimentConfig cfg = load_config(opts);
  // Validate the data source before any outputs exist.
  {
    const auto probe = segkd::materialize_data(cfg.data);
    (void)probe;
  }
  write_config_copy(cfg);

  using segkd::ClassLabel;
  const std::set<ClassLabel> B{ClassLabel::benign};
  const std::set<ClassLabel> M{ClassLabel::malignant};
  const std::set<ClassLabel> All{ClassLabel::benign, ClassLabel::malignant};
  struct Row {
    const char* train_name;
    const char* test_name;
    std::set<ClassLabel> train_classes, test_classes;
  };
  const std::vector<Row> rows = {
      {"benign", "benign", B, B},       {"malignant", "malignant", M, M},
      {"benign", "malignant", B, M},    {"malignant", "benign", M, B},
      {"benign", "all", B, All},        {"malignant", "all", M, All},
      {"all", "all", All, All},
  };

  const std::string csv_path = (fs::path(cfg.output_dir) / "ablation.csv").string();
  std::ofstream csv(csv_path);
  if (!csv) throw segkd::IoError("cannot write " + csv_path);
  csv << "train_data,test_data,dice,precision,recall,miou,accuracy,n_train,n_test\n";

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& row = rows[i];
    try {
      segkd::ExperimentConfig row_cfg = cfg;
      row_cfg.data.split.train_classes = row.train_classes;
      row_cfg.data.split.test_classes = row.test_classes;
      const segkd::MaterializedData data = segkd::materialize_data(row_cfg.data);
      if (data.train.empty() || data.test.empty())
        throw segkd::ConfigError("row produced an empty split");

      // Record the shared partition's indices so disjointness is auditable.
      {
        std::vector<ClassLabel> labels;
        if (cfg.data.synth.enabled) {
          for (int k = 0; k < cfg.data.synth.n_benign; ++k) labels.push_back(ClassLabel::benign);
          for (int k = 0; k < cfg.data.synth.n_malignant; ++k)
            labels.push_back(ClassLabel::malignant);
        } else {
          const auto scan = segkd::scan_layout(row_cfg.data.busi_root, row_cfg.data.layout,
                                               row_cfg.data.include_normal);
          for (const auto& r : scan.records) labels.push_back(r.label);
        }
        auto [tr, te] = segkd::make_split_indices(labels, row_cfg.data.split);
        json idx{{"train_data", row.train_name},
                 {"test_data", row.test_name},
                 {"train_indices", tr},
                 {"test_indices", te}};
        std::ofstream f(fs::path(cfg.output_dir) / ("ablation_row" + std::to_string(i) + ".json"));
        f << idx.dump() << "\n";
        for (auto a : tr)
          for (auto b : te)
            if (a == b) throw segkd::ConfigError("train/test overlap detected");
      }

      segkd::NetworkHandle<float> net;
      if (cfg.model.ablation_model == "teacher") {
        segkd::TeacherConfig tc = cfg.model.teacher;
        tc.seed = cfg.train.teacher.seed;
        net = segkd::build_teacher<float>(tc, segkd::Role::benign_teacher);
      } else {
        segkd::StudentConfig sc = cfg.model.student;
        sc.seed = cfg.train.teacher.seed;
        net = segkd::build_student<float>(sc);
      }
      segkd::train_hard(net, data.train, cfg.train.teacher);
      const segkd::MetricsReport m = segkd::evaluate(net, data.test);
      char line[256];
      std::snprintf(line, sizeof(line), "%s,%s,%.4f,%.4f,%.4f,%.4f,%.4f,%zu,%zu",
                    row.train_name, row.test_name, m.dice, m.precision, m.recall, m.miou,
                    m.accuracy, data.train.size(), data.test.size());
      csv << line << "\n";
      csv.flush();
      std::printf("%s\n", line);
    } catch (const std::exception& e) {
      throw segkd::ConfigError("ablation row " + std::string(row.train_name) + "/" +
                               row.test_name + " failed: " + e.what());
    }
  }
  std::printf("wrote %s\n", csv_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-teacher distillation segmentation toolkit"};
  app.require_subcommand(1);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "parameter/size/GFLOP accounting");
  std::vector<std::string> analyze_models;
  std::string analyze_spec, analyze_dump;
  int analyze_res = 512;
  analyze->add_option("--model", analyze_models,
                      "built-in model name (unet_reference, teacher, student)");
  analyze->add_option("--spec", analyze_spec, "layer-graph JSON file to analyze");
  analyze->add_option("--resolution", analyze_res, "input resolution")->check(CLI::PositiveNumber);
  analyze->add_option("--dump", analyze_dump, "write the analyzed layer graph as JSON");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset on disk");
  std::string synth_out;
  int synth_benign = 8, synth_malignant = 8, synth_res = 128;
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n-benign", synth_benign, "benign sample count");
  synth->add_option("--n-malignant", synth_malignant, "malignant sample count");
  synth->add_option("--resolution", synth_res, "image resolution");
  synth->add_option("--seed", synth_seed, "generator seed");

  // train-teachers
  auto* tt = app.add_subcommand("train-teachers", "train the benign and malignant teachers");
  CommonOpts tt_opts;
  add_common(tt, tt_opts);

  // distill
  auto* distill = app.add_subcommand("distill", "distill the student from trained teachers");
  CommonOpts di_opts;
  add_common(distill, di_opts);
  std::string di_preset, di_benign, di_malignant;
  distill->add_option("--preset", di_preset,
                      "loss preset override (supervised, single_teacher, double_teacher)");
  distill->add_option("--benign-ckpt", di_benign, "benign teacher checkpoint prefix");
  distill->add_option("--malignant-ckpt", di_malignant, "malignant teacher checkpoint prefix");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate checkpoints on the test split");
  CommonOpts ev_opts;
  add_common(ev, ev_opts);
  std::vector<std::string> ev_ckpts;
  std::string ev_csv;
  ev->add_option("--ckpt", ev_ckpts, "checkpoint prefix (repeatable)")->required();
  ev->add_option("--csv", ev_csv, "CSV output path (default <out>/evaluate.csv)");

  // ablation
  auto* ab = app.add_subcommand("ablation", "run the 7-row train/test class matrix");
  CommonOpts ab_opts;
  add_common(ab, ab_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (analyze->parsed()) {
      if (analyze_models.empty() && analyze_spec.empty())
        throw segkd::ConfigError("analyze: pass --model and/or --spec");
      return cmd_analyze(analyze_models, analyze_spec, analyze_res, analyze_dump);
    }
    if (synth->parsed()) return cmd_synth(synth_out, synth_benign, synth_malignant, synth_res, synth_seed);
    if (tt->parsed()) return cmd_train_teachers(tt_opts);
    if (distill->parsed()) return cmd_distill(di_opts, di_preset, di_benign, di_malignant);
    if (ev->parsed()) return cmd_evaluate(ev_opts, ev_ckpts, ev_csv);
    if (ab->parsed()) return cmd_ablation(ab_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
