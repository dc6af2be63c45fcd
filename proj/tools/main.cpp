// centerseg command-line tool.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "centerseg/checkpoint.hpp"
#include "centerseg/config.hpp"
#include "centerseg/data.hpp"
#include "centerseg/error.hpp"
#include "centerseg/gradcheck_suite.hpp"
#include "centerseg/interpret.hpp"
#include "centerseg/metrics.hpp"
#include "centerseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace centerseg;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void append_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for appending");
  out << text;
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- generate-data --------------------------------------------------------

struct GenerateArgs {
  DatasetSpec spec;
  std::string out;
};

int run_generate(const GenerateArgs& a) {
  const Manifest m = generate_dataset(a.spec, a.out);
  std::cout << "wrote " << m.train.size() << "/" << m.val.size() << "/" << m.test.size()
            << " train/val/test samples with " << m.modes.size() << " modes to " << a.out << "\n";
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config_file;
  std::string out;
  std::string resume;
  std::size_t eval_threads = 1;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  bool baseline = false;
  bool gumbel_noise = true;
};

RunConfig config_from_args(const TrainArgs& a, RunConfig base) {
  for (const auto& [key, opt] : a.options) {
    if (opt->count() == 0) continue;
    if (key == "baseline") {
      base.baseline = a.baseline;
    } else if (key == "gumbel_noise") {
      base.gumbel_noise = a.gumbel_noise;
    } else {
      base.set(key, a.values.at(key));
    }
  }
  return base;
}

std::string log_header(const RunConfig& c) {
  std::string out;
  std::istringstream in(c.to_text());
  std::string line;
  while (std::getline(in, line)) out += "# " + line + "\n";
  return out;
}

std::string loss_row(std::uint64_t epoch, const StepRecord& r) {
  const LossReport& l = r.report;
  return std::to_string(epoch) + "," + std::to_string(r.step) + "," + fmt(l.ce) + "," +
         fmt(l.dice) + "," + fmt(l.pp1) + "," + fmt(l.pp2) + "," + fmt(l.fp1) + "," +
         fmt(l.fp2) + "," + fmt(l.total) + "\n";
}

std::string metrics_row(std::uint64_t epoch, const Metrics& m) {
  return std::to_string(epoch) + "," + fmt(m.miou) + "," + fmt(m.precision) + "," +
         fmt(m.recall) + "," + fmt(m.f1) + "," + fmt(m.oa) + "\n";
}

int run_train(const TrainArgs& a) {
  const fs::path out(a.out);
  ensure_dir(out);
  std::optional<Trainer> trainer;
  const fs::path log_path = out / "train_log.csv";
  const fs::path val_path = out / "val_metrics.csv";
  if (!a.resume.empty()) {
    Checkpoint ckpt = load_checkpoint(a.resume);
    // Only the epoch budget and the dataset location may change on resume.
    for (const auto& [key, opt] : a.options) {
      if (opt->count() > 0 && key != "epochs" && key != "dataset") {
        throw ConfigError("'" + key + "' cannot be changed when resuming");
      }
    }
    if (!a.config_file.empty()) throw ConfigError("--config cannot be combined with --resume");
    RunConfig overrides = config_from_args(a, ckpt.config);
    ckpt.config.epochs = overrides.epochs;
    ckpt.config.dataset = overrides.dataset;
    trainer.emplace(ckpt, load_manifest(ckpt.config.dataset));
    if (!fs::exists(log_path)) {
      write_text(log_path, log_header(trainer->config()) +
                               "epoch,step,ce,dice,pp1,pp2,fp1,fp2,total\n");
    }
    if (!fs::exists(val_path)) write_text(val_path, "epoch,miou,precision,recall,f1,oa\n");
  } else {
    RunConfig base;
    if (!a.config_file.empty()) base = RunConfig::from_text(read_text(a.config_file));
    const RunConfig config = config_from_args(a, base);
    if (config.dataset.empty()) throw ConfigError("no dataset given (--dataset or config file)");
    trainer.emplace(config, load_manifest(config.dataset));
    write_text(log_path,
               log_header(trainer->config()) + "epoch,step,ce,dice,pp1,pp2,fp1,fp2,total\n");
    write_text(val_path, "epoch,miou,precision,recall,f1,oa\n");
  }
  const RunConfig& config = trainer->config();
  write_text(out / "config.txt", config.to_text());
  const Manifest manifest = load_manifest(config.dataset);

  while (trainer->epoch() < config.epochs) {
    const std::uint64_t epoch = trainer->epoch();
    std::string rows;
    try {
      trainer->train_epoch([&](const StepRecord& r) { rows += loss_row(epoch, r); });
    } catch (const TrainingDiverged& e) {
      append_text(log_path, rows);
      write_text(out / "divergence_dump.txt", e.dump());
      throw;
    }
    append_text(log_path, rows);
    save_checkpoint(trainer->checkpoint(), out / "checkpoint.bin");
    if (!manifest.val.empty()) {
      const EvalResult r = evaluate(manifest, "val", trainer->backbone(), trainer->bank(),
                                    config.alpha, a.eval_threads);
      append_text(val_path, metrics_row(epoch, r.metrics));
      std::cout << "epoch " << epoch << " val mIoU " << fmt(r.metrics.miou) << " OA "
                << fmt(r.metrics.oa) << "\n";
    } else {
      std::cout << "epoch " << epoch << " done\n";
    }
  }
  return 0;
}

// ---- eval / predict / inspect ---------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string split = "test";
  std::string out;
  std::size_t threads = 1;
  bool no_render = false;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Manifest manifest = load_manifest(a.dataset.empty() ? ckpt.config.dataset : a.dataset);
  if (manifest.spec.classes != ckpt.config.classes) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.config.classes) +
                      " classes but the dataset has " + std::to_string(manifest.spec.classes));
  }
  const fs::path out(a.out);
  ensure_dir(out);
  const EvalResult r =
      evaluate(manifest, a.split, ckpt.backbone, ckpt.bank, ckpt.config.alpha, a.threads, true);
  write_text(out / "metrics.csv", metrics_csv(r.metrics));
  if (!a.no_render) {
    ensure_dir(out / "predictions");
    const Palette palette = default_palette();
    for (std::size_t i = 0; i < r.predictions.size(); ++i) {
      const std::string stem = (out / "predictions" / ("pred_" + std::to_string(i))).string();
      write_file(stem + ".pgm", encode_pgm(r.predictions[i]));
      write_file(stem + ".ppm",
                 encode_ppm(render_prediction(r.predictions[i], palette, manifest.spec.classes)));
    }
  }
  std::cout << a.split << " mIoU " << fmt(r.metrics.miou) << " F1 " << fmt(r.metrics.f1)
            << " OA " << fmt(r.metrics.oa) << "\n";
  return 0;
}

struct PredictArgs {
  std::string checkpoint;
  std::string image;
  std::string out;
  std::string preview;
};

int run_predict(const PredictArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Image image = from_rgb(decode_ppm(read_file(a.image)));
  const std::size_t d = ckpt.config.downsample;
  if (image.height % d != 0 || image.width % d != 0) {
    throw DataError("image size must be a multiple of " + std::to_string(d));
  }
  const LabelMap labels = predict_image(image, ckpt.backbone, ckpt.bank, ckpt.config.alpha);
  write_file(a.out, encode_pgm(labels));
  if (!a.preview.empty()) {
    write_file(a.preview,
               encode_ppm(render_prediction(labels, default_palette(), ckpt.config.classes)));
  }
  return 0;
}

struct InspectArgs {
  std::string checkpoint;
  std::string dataset;
  std::string split = "train";
  std::string out;
};

int run_inspect(const InspectArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Manifest manifest = load_manifest(a.dataset.empty() ? ckpt.config.dataset : a.dataset);
  if (manifest.spec.classes != ckpt.config.classes) {
    throw ConfigError("checkpoint and dataset disagree on the class count");
  }
  const fs::path out(a.out);
  ensure_dir(out);
  const CenterCollection centers = collect_dataset_centers(
      manifest, a.split, ckpt.backbone, ckpt.config.grid_rows, ckpt.config.grid_cols);
  const ExemplarReport report = find_exemplars(ckpt.bank, centers);
  write_text(out / "exemplars.csv", exemplars_csv(report));
  for (const auto& [k, i] : report.missing) {
    std::cerr << "warning: class " << k << " never occurs in split " << a.split
              << "; prototype (" << k << ", " << i << ") has no exemplar\n";
  }
  std::size_t agree = 0;
  for (const auto& e : report.exemplars) agree += e.dominant == e.k ? 1 : 0;
  std::cout << report.exemplars.size() << " exemplars, " << agree
            << " with dominant class equal to the prototype class\n";

  const std::size_t n = centers.records.size();
  if (n >= 2 && centers.feature_dim >= 2) {
    std::vector<double> data;
    data.reserve(n * centers.feature_dim);
    for (const auto& r : centers.records) data.insert(data.end(), r.center.begin(), r.center.end());
    const Projection p = pca_project(data, n, centers.feature_dim, 2);
    if (p.degenerate) std::cerr << "warning: centers have zero variance; projection is all zeros\n";
    write_text(out / "projection.csv", projection_csv(p, centers));
  } else {
    std::cerr << "warning: fewer than two centers; projection skipped\n";
  }
  return 0;
}

// ---- grad-check -----------------------------------------------------------

struct GradCheckArgs {
  std::uint64_t seed = 0;
  double threshold = 1e-3;
  double inject = 1.0;
};

int run_grad_check(const GradCheckArgs& a) {
  const GradCheckReport report = centerseg::run_grad_check(a.seed, a.threshold, a.inject);
  std::cout << report.to_text();
  return report.passed() ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-based semantic segmentation on synthetic data"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate-data", "Write a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--classes", gen.spec.classes, "Number of classes")->capture_default_str();
  gen_cmd->add_option("--modes", gen.spec.modes_per_class, "Appearance modes per class")
      ->capture_default_str();
  gen_cmd->add_option("--height", gen.spec.height)->capture_default_str();
  gen_cmd->add_option("--width", gen.spec.width)->capture_default_str();
  gen_cmd->add_option("--train", gen.spec.train, "Training samples")->capture_default_str();
  gen_cmd->add_option("--val", gen.spec.val, "Validation samples")->capture_default_str();
  gen_cmd->add_option("--test", gen.spec.test, "Test samples")->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise, "Pixel noise sigma")->capture_default_str();
  gen_cmd->add_option("--ignore-border", gen.spec.ignore_border,
                      "Ignore-label band width at region boundaries")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed)->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", train.config_file, "key=value config file");
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--resume", train.resume, "Continue from a checkpoint");
  train_cmd->add_option("--eval-threads", train.eval_threads, "Threads for validation")
      ->capture_default_str();
  for (const auto& key : RunConfig::keys()) {
    if (key == "baseline") {
      train.options[key] =
          train_cmd->add_flag("--baseline", train.baseline, "One prototype per class, no regularizers");
    } else if (key == "gumbel_noise") {
      train.options[key] = train_cmd->add_flag("--gumbel_noise", train.gumbel_noise,
                                               "Gumbel noise in the assignment (=false to disable)");
    } else {
      train.options[key] = train_cmd->add_option("--" + key, train.values[key]);
    }
  }

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--dataset", ev.dataset, "Defaults to the training dataset");
  eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember(kSplits))->capture_default_str();
  eval_cmd->add_option("--out", ev.out)->required();
  eval_cmd->add_option("--threads", ev.threads)->capture_default_str();
  eval_cmd->add_flag("--no-render", ev.no_render, "Skip writing prediction images");

  PredictArgs pred;
  auto* pred_cmd = app.add_subcommand("predict", "Label one PPM image");
  pred_cmd->add_option("--checkpoint", pred.checkpoint)->required();
  pred_cmd->add_option("--image", pred.image)->required();
  pred_cmd->add_option("--out", pred.out, "Label map (PGM)")->required();
  pred_cmd->add_option("--preview", pred.preview, "Palette rendering (PPM)");

  InspectArgs insp;
  auto* insp_cmd =
      app.add_subcommand("inspect-prototypes", "Nearest training patch for every prototype");
  insp_cmd->add_option("--checkpoint", insp.checkpoint)->required();
  insp_cmd->add_option("--dataset", insp.dataset, "Defaults to the training dataset");
  insp_cmd->add_option("--split", insp.split)->check(CLI::IsMember(kSplits))->capture_default_str();
  insp_cmd->add_option("--out", insp.out)->required();

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of the losses");
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--threshold", gc.threshold)->capture_default_str();
  gc_cmd->add_option("--inject-gradient-error", gc.inject,
                     "Scale analytic gradients (test fixture)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return run_generate(gen);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(ev);
    if (*pred_cmd) return run_predict(pred);
    if (*insp_cmd) return run_inspect(insp);
    if (*gc_cmd) return run_grad_check(gc);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
