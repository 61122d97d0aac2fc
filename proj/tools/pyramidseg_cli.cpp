// Command-line front end. Talks to the library only through the C API.
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pyramidseg/c_api.h"

namespace fs = std::filesystem;

namespace {

constexpr double kReferenceParams = 33.57e6;

struct Failure {
  int code;
};

void check(int status) {
  if (status != PSG_OK) {
    std::cerr << "error [" << psg_status_name(status) << "]: " << psg_last_error() << "\n";
    throw Failure{status};
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Flat key=value file; '#' starts a comment line.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error [not_found]: cannot open config " << path << "\n";
    throw Failure{PSG_ERR_NOT_FOUND};
  }
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      std::cerr << "error [config]: " << path << ":" << lineno << ": expected key=value\n";
      throw Failure{PSG_ERR_CONFIG};
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Options of a subcommand that may appear in a config file and in the echo.
std::vector<const CLI::Option*> echo_options(const CLI::App* sub) {
  std::vector<const CLI::Option*> out;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || opt->get_group().empty()) continue;
    out.push_back(opt);
  }
  return out;
}

// Splices config entries in front of the command-line flags so that flags,
// parsed later, win.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  if (args.size() < 2) return args;
  const CLI::App* sub = nullptr;
  for (const CLI::App* s : app.get_subcommands({})) {
    if (s->get_name() == args[1]) sub = s;
  }
  if (!sub) return args;
  std::string config_path;
  std::vector<std::string> rest;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (config_path.empty()) return args;
  std::map<std::string, const CLI::Option*> known;
  for (const CLI::Option* opt : echo_options(sub)) known[opt->get_single_name()] = opt;
  std::vector<std::string> out{args[0], args[1]};
  for (const auto& [key, value] : read_config(config_path)) {
    auto it = known.find(key);
    if (it == known.end()) {
      std::cerr << "error [config]: unknown key '" << key << "' in " << config_path << " for command " << args[1]
                << "\n";
      throw Failure{PSG_ERR_CONFIG};
    }
    out.push_back("--" + key);
    out.push_back(value);
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::string resolved_config(const CLI::App* sub) {
  std::ostringstream out;
  for (const CLI::Option* opt : echo_options(sub)) {
    out << opt->get_single_name() << "=" << opt->as<std::string>() << "\n";
  }
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) {
    std::cerr << "error [io]: cannot write " << path << "\n";
    throw Failure{PSG_ERR_IO};
  }
}

struct DatasetHandle {
  psg_dataset* ds = nullptr;
  ~DatasetHandle() { psg_dataset_free(ds); }
};
struct ModelHandle {
  psg_model* m = nullptr;
  ~ModelHandle() { psg_model_free(m); }
};
struct ReportHandle {
  psg_report* r = nullptr;
  ~ReportHandle() { psg_report_free(r); }
};

std::string report_text(const psg_report* r, int format) {
  std::size_t needed = 0;
  check(psg_report_format(r, format, nullptr, 0, &needed));
  std::string buf(needed + 1, '\0');
  check(psg_report_format(r, format, buf.data(), buf.size(), &needed));
  buf.resize(needed);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeepPyramid+ style segmentation: data synthesis, training, evaluation"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  const std::string kRun = "Run";

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a seeded synthetic dataset");
  uint64_t synth_seed = 0;
  int synth_n = 200, synth_size = 64, synth_classes = 3;
  std::string synth_out;
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str()->group(kRun);
  synth->add_option("--n", synth_n, "Number of samples")->capture_default_str()->group(kRun);
  synth->add_option("--size", synth_size, "Image side in pixels")->capture_default_str()->group(kRun);
  synth->add_option("--classes", synth_classes, "Number of classes incl. background")->capture_default_str()->group(kRun);
  synth->add_option("--out", synth_out, "Output directory")->required()->group(kRun);
  synth->add_option("--config", "key=value config file");

  // train
  auto* trn = app.add_subcommand("train", "Train on every fold except --fold");
  std::string train_manifest, train_variant = "deeppyramid_plus", train_out;
  int train_fold = 0, train_width = 8, train_batch = 4, train_augment = 1;
  long train_iters = 200, train_val_every = 0;
  double train_lr = 0.001, train_alpha = 0.5, train_momentum = 0.9;
  uint64_t train_seed = 0;
  trn->add_option("--manifest", train_manifest, "Dataset manifest.csv")->required()->group(kRun);
  trn->add_option("--fold", train_fold, "Held-out test fold")->capture_default_str()->group(kRun);
  trn->add_option("--variant", train_variant, "deeppyramid_plus | unet_plus | pvf_only")
      ->capture_default_str()
      ->group(kRun);
  trn->add_option("--iters", train_iters, "Training iterations")->capture_default_str()->group(kRun);
  trn->add_option("--lr", train_lr, "Initial learning rate")->capture_default_str()->group(kRun);
  trn->add_option("--alpha", train_alpha, "Cross-entropy weight of the loss")->capture_default_str()->group(kRun);
  trn->add_option("--seed", train_seed, "Initialisation and batching seed")->capture_default_str()->group(kRun);
  trn->add_option("--width", train_width, "Base channel width")->capture_default_str()->group(kRun);
  trn->add_option("--batch", train_batch, "Batch size")->capture_default_str()->group(kRun);
  trn->add_option("--momentum", train_momentum, "SGD momentum (0 = plain SGD)")->capture_default_str()->group(kRun);
  trn->add_option("--augment", train_augment, "1 enables augmentation")->capture_default_str()->group(kRun);
  trn->add_option("--val-every", train_val_every, "Held-out Dice every N iterations (0 = off)")
      ->capture_default_str()
      ->group(kRun);
  trn->add_option("--out", train_out, "Run directory")->required()->group(kRun);
  trn->add_option("--config", "key=value config file");

  // eval
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on --fold");
  std::string eval_manifest, eval_checkpoint, eval_predictor = "model";
  int eval_fold = 0;
  evl->add_option("--manifest", eval_manifest, "Dataset manifest.csv")->required()->group(kRun);
  evl->add_option("--fold", eval_fold, "Fold to evaluate (-1 = all rows)")->capture_default_str()->group(kRun);
  evl->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->group(kRun);
  evl->add_option("--predictor", eval_predictor, "model | truth | background")
      ->capture_default_str()
      ->check(CLI::IsMember({"model", "truth", "background"}))
      ->group(kRun);
  evl->add_option("--config", "key=value config file");

  // infer
  auto* inf = app.add_subcommand("infer", "Predict one image");
  std::string infer_checkpoint, infer_image, infer_out;
  inf->add_option("--checkpoint", infer_checkpoint, "Checkpoint file")->required()->group(kRun);
  inf->add_option("--image", infer_image, "Input PNG")->required()->group(kRun);
  inf->add_option("--out", infer_out, "Output directory for mask.png and overlay.png")->required()->group(kRun);
  inf->add_option("--config", "key=value config file");

  // gradcheck
  auto* grd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  std::string grad_module = "all";
  uint64_t grad_seed = 0;
  bool grad_sabotage = false;
  grd->add_option("--module", grad_module, "all | tensor | deform | pvf | dpr | loss")
      ->capture_default_str()
      ->group(kRun);
  grd->add_option("--seed", grad_seed, "Seed for the random instances")->capture_default_str()->group(kRun);
  grd->add_flag("--sabotage", grad_sabotage, "Corrupt analytic gradients")->group("");
  grd->add_option("--config", "key=value config file");

  // summary
  auto* sum = app.add_subcommand("summary", "Parameter counts per module");
  std::string sum_variant = "deeppyramid_plus";
  int sum_width = 64, sum_size = 512, sum_classes = 3;
  sum->add_option("--variant", sum_variant, "deeppyramid_plus | unet_plus | pvf_only")
      ->capture_default_str()
      ->group(kRun);
  sum->add_option("--width", sum_width, "Base channel width")->capture_default_str()->group(kRun);
  sum->add_option("--size", sum_size, "Input side")->capture_default_str()->group(kRun);
  sum->add_option("--classes", sum_classes, "Number of classes")->capture_default_str()->group(kRun);
  sum->add_option("--config", "key=value config file");

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(app, args);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    try {
      app.parse(reversed);
    } catch (const CLI::ParseError& e) {
      return app.exit(e);
    }

    if (synth->parsed()) {
      DatasetHandle ds;
      check(psg_dataset_generate(synth_seed, synth_n, synth_size, synth_classes, &ds.ds));
      fs::create_directories(synth_out);
      check(psg_dataset_save(ds.ds, synth_out.c_str()));
      write_text(fs::path(synth_out) / "config.txt", resolved_config(synth));
      std::printf("samples\t%d\n", synth_n);
      std::printf("class\tname\tpresent_in\n");
      for (int c = 0; c < synth_classes; ++c) {
        const char* name = nullptr;
        int present = 0;
        check(psg_dataset_class_name(ds.ds, c, &name));
        check(psg_dataset_class_presence(ds.ds, c, &present));
        std::printf("%d\t%s\t%d\n", c, name, present);
      }
    } else if (trn->parsed()) {
      DatasetHandle ds;
      check(psg_dataset_load(train_manifest.c_str(), &ds.ds));
      int classes = 0, h = 0, w = 0;
      check(psg_dataset_num_classes(ds.ds, &classes));
      check(psg_dataset_image_size(ds.ds, &h, &w));
      if (h != w) {
        std::cerr << "error [shape]: training images must be square, got " << h << "x" << w << "\n";
        return PSG_ERR_SHAPE;
      }
      psg_model_config mc;
      psg_model_config_default(&mc);
      mc.num_classes = classes;
      mc.input_size = h;
      mc.base_width = train_width;
      mc.variant = train_variant.c_str();
      mc.seed = train_seed;
      ModelHandle model;
      check(psg_model_create(&mc, &model.m));
      psg_train_config tc;
      psg_train_config_default(&tc);
      tc.batch_size = train_batch;
      tc.lr = train_lr;
      tc.iters = train_iters;
      tc.alpha = train_alpha;
      tc.seed = train_seed;
      tc.momentum = train_momentum;
      tc.augment = train_augment;
      tc.val_every = train_val_every;
      fs::create_directories(train_out);
      write_text(fs::path(train_out) / "config.txt", resolved_config(trn));
      std::ofstream curve(fs::path(train_out) / "loss.tsv", std::ios::trunc);
      struct Ctx {
        std::ofstream* curve;
        long total;
      } ctx{&curve, train_iters};
      auto on_step = [](long iter, double lr, double loss, void* user) {
        auto* c = static_cast<Ctx*>(user);
        char line[64];
        std::snprintf(line, sizeof line, "%ld\t%.9g\n", iter, loss);
        *c->curve << line;
        if (iter % 10 == 0 || iter + 1 == c->total) {
          std::fprintf(stderr, "iter %ld/%ld  lr %.3e  loss %.5f\n", iter, c->total, lr, loss);
        }
      };
      auto on_val = [](long iter, double dice, void*) { std::printf("val\t%ld\tmean_dice\t%.4f\n", iter, dice); };
      check(psg_train(model.m, ds.ds, train_fold, &tc, on_step, on_val, &ctx));
      curve.close();
      const std::string ckpt = (fs::path(train_out) / "checkpoint.dpyr").string();
      check(psg_model_save(model.m, ckpt.c_str()));
      std::printf("checkpoint\t%s\n", ckpt.c_str());
    } else if (evl->parsed()) {
      DatasetHandle ds;
      check(psg_dataset_load(eval_manifest.c_str(), &ds.ds));
      ModelHandle model;
      const int predictor = eval_predictor == "truth"        ? PSG_PREDICT_TRUTH
                            : eval_predictor == "background" ? PSG_PREDICT_BACKGROUND
                                                             : PSG_PREDICT_MODEL;
      if (predictor == PSG_PREDICT_MODEL) {
        if (eval_checkpoint.empty()) {
          std::cerr << "error [invalid_argument]: --checkpoint is required for the model predictor\n";
          return PSG_ERR_INVALID_ARGUMENT;
        }
        check(psg_model_load(eval_checkpoint.c_str(), &model.m));
      }
      ReportHandle report;
      check(psg_evaluate(model.m, ds.ds, eval_fold, predictor, &report.r));
      std::cout << report_text(report.r, PSG_FORMAT_TABLE) << "\n"
                << report_text(report.r, PSG_FORMAT_TSV) << "\n"
                << report_text(report.r, PSG_FORMAT_KEY_VALUE);
    } else if (inf->parsed()) {
      ModelHandle model;
      check(psg_model_load(infer_checkpoint.c_str(), &model.m));
      fs::create_directories(infer_out);
      const std::string mask = (fs::path(infer_out) / "mask.png").string();
      const std::string overlay = (fs::path(infer_out) / "overlay.png").string();
      check(psg_infer_file(model.m, infer_image.c_str(), mask.c_str(), overlay.c_str()));
      std::printf("mask\t%s\noverlay\t%s\n", mask.c_str(), overlay.c_str());
    } else if (grd->parsed()) {
      int failures = 0;
      auto on_check = [](const char* name, double err, int passed, void*) {
        std::printf("%s\t%.3e\t%s\n", name, err, passed ? "PASS" : "FAIL");
      };
      check(psg_gradcheck(grad_module.c_str(), grad_seed, grad_sabotage ? 1 : 0, on_check, nullptr, &failures));
      std::printf("failures\t%d\n", failures);
      if (failures > 0) {
        std::cerr << failures << " gradient check(s) failed\n";
        return PSG_ERR_NUMERIC;
      }
    } else if (sum->parsed()) {
      psg_model_config mc;
      psg_model_config_default(&mc);
      mc.num_classes = sum_classes;
      mc.input_size = sum_size;
      mc.base_width = sum_width;
      mc.variant = sum_variant.c_str();
      ModelHandle model;
      check(psg_model_create(&mc, &model.m));
      int groups = 0;
      uint64_t total = 0;
      check(psg_model_group_count(model.m, &groups));
      check(psg_model_param_count(model.m, &total));
      std::printf("%-28s %12s\n", "module", "params");
      for (int i = 0; i < groups; ++i) {
        const char* name = nullptr;
        uint64_t count = 0;
        check(psg_model_group(model.m, i, &name, &count));
        std::printf("%-28s %12" PRIu64 "\n", name, count);
      }
      std::printf("%-28s %12" PRIu64 "\n", "total", total);
      std::printf("total_params=%" PRIu64 "\n", total);
      std::printf("total_millions=%.2f\n", static_cast<double>(total) / 1e6);
      std::printf("reference_millions=%.2f\n", kReferenceParams / 1e6);
      std::printf("relative_gap_percent=%.2f\n", 100.0 * (static_cast<double>(total) - kReferenceParams) / kReferenceParams);
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
