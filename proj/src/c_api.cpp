#include "pyramidseg/c_api.h"

#include <algorithm>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "pyramidseg/checkpoint.hpp"
#include "pyramidseg/data.hpp"
#include "pyramidseg/gradcheck.hpp"
#include "pyramidseg/metrics.hpp"
#include "pyramidseg/training.hpp"

using namespace pyseg;

struct psg_dataset {
  std::vector<SegmentationSample> samples;
  int num_classes = 0;
  std::vector<std::string> class_names;
};

struct psg_model {
  std::unique_ptr<SegmentationNet<float>> net;
  std::vector<SegmentationNet<float>::ModuleCount> groups;
};

struct psg_report {
  MetricsReport report;
  std::vector<std::string> class_names;
};

namespace {

thread_local std::string g_last_error;

template <typename F>
int guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return PSG_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<int>(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PSG_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PSG_ERR_INTERNAL;
  }
}

template <typename... P>
void require(const P*... ptrs) {
  if (((ptrs == nullptr) || ...)) raise(ErrorCode::kInvalidArgument, "null argument");
}

std::vector<SegmentationSample> select_fold(const std::vector<SegmentationSample>& all, int fold, bool test) {
  std::vector<SegmentationSample> out;
  for (const auto& s : all) {
    if (fold < 0 || (s.fold == fold) == test) out.push_back(s);
  }
  return out;
}

}  // namespace

extern "C" {

const char* psg_status_name(int status) { return error_code_name(static_cast<ErrorCode>(status)); }

const char* psg_last_error(void) { return g_last_error.c_str(); }

int psg_dataset_generate(uint64_t seed, int count, int size, int num_classes, psg_dataset** out) {
  return guarded([&] {
    require(out);
    auto ds = std::make_unique<psg_dataset>();
    ds->samples = generate_synthetic(seed, count, size, num_classes);
    ds->num_classes = num_classes;
    ds->class_names = synthetic_class_names(num_classes);
    *out = ds.release();
  });
}

int psg_dataset_load(const char* manifest_path, psg_dataset** out) {
  return guarded([&] {
    require(manifest_path, out);
    const auto manifest = load_manifest(manifest_path);
    auto ds = std::make_unique<psg_dataset>();
    ds->num_classes = manifest.num_classes;
    ds->class_names = manifest.class_names;
    for (std::size_t i = 0; i < manifest.rows.size(); ++i) ds->samples.push_back(read_sample(manifest, i));
    *out = ds.release();
  });
}

int psg_dataset_save(const psg_dataset* ds, const char* dir) {
  return guarded([&] {
    require(ds, dir);
    save_dataset(dir, ds->samples, ds->class_names);
  });
}

int psg_dataset_size(const psg_dataset* ds, int* count) {
  return guarded([&] {
    require(ds, count);
    *count = static_cast<int>(ds->samples.size());
  });
}

int psg_dataset_num_classes(const psg_dataset* ds, int* num_classes) {
  return guarded([&] {
    require(ds, num_classes);
    *num_classes = ds->num_classes;
  });
}

int psg_dataset_image_size(const psg_dataset* ds, int* height, int* width) {
  return guarded([&] {
    require(ds, height, width);
    if (ds->samples.empty()) raise(ErrorCode::kState, "dataset is empty");
    *height = ds->samples[0].height;
    *width = ds->samples[0].width;
  });
}

int psg_dataset_class_name(const psg_dataset* ds, int label, const char** name) {
  return guarded([&] {
    require(ds, name);
    if (label < 0 || label >= static_cast<int>(ds->class_names.size())) {
      raise(ErrorCode::kInvalidArgument, "label " + std::to_string(label) + " out of range");
    }
    *name = ds->class_names[label].c_str();
  });
}

int psg_dataset_class_presence(const psg_dataset* ds, int label, int* samples) {
  return guarded([&] {
    require(ds, samples);
    *samples = static_cast<int>(std::count_if(ds->samples.begin(), ds->samples.end(), [&](const auto& s) {
      return std::find(s.mask.begin(), s.mask.end(), label) != s.mask.end();
    }));
  });
}

void psg_dataset_free(psg_dataset* ds) { delete ds; }

void psg_model_config_default(psg_model_config* cfg) {
  if (!cfg) return;
  const NetworkConfig d;
  cfg->num_classes = d.num_classes;
  cfg->input_size = d.input_size;
  cfg->base_width = d.base_width;
  cfg->variant = variant_name(d.variant);
  cfg->seed = d.seed;
}

namespace {

psg_model* wrap(std::unique_ptr<SegmentationNet<float>> net) {
  auto m = std::make_unique<psg_model>();
  m->groups = net->module_counts();
  m->net = std::move(net);
  return m.release();
}

}  // namespace

int psg_model_create(const psg_model_config* cfg, psg_model** out) {
  return guarded([&] {
    require(cfg, out);
    require(cfg->variant);
    NetworkConfig nc;
    nc.num_classes = cfg->num_classes;
    nc.input_size = cfg->input_size;
    nc.base_width = cfg->base_width;
    nc.variant = parse_variant(cfg->variant);
    nc.seed = cfg->seed;
    *out = wrap(std::make_unique<SegmentationNet<float>>(nc));
  });
}

int psg_model_load(const char* path, psg_model** out) {
  return guarded([&] {
    require(path, out);
    *out = wrap(load_checkpoint(path));
  });
}

int psg_model_save(const psg_model* model, const char* path) {
  return guarded([&] {
    require(model, path);
    save_checkpoint(path, *model->net);
  });
}

int psg_model_config_of(const psg_model* model, psg_model_config* cfg) {
  return guarded([&] {
    require(model, cfg);
    const auto& c = model->net->config();
    cfg->num_classes = c.num_classes;
    cfg->input_size = c.input_size;
    cfg->base_width = c.base_width;
    cfg->variant = variant_name(c.variant);
    cfg->seed = c.seed;
  });
}

int psg_model_param_count(const psg_model* model, uint64_t* count) {
  return guarded([&] {
    require(model, count);
    *count = model->net->parameter_count();
  });
}

int psg_model_group_count(const psg_model* model, int* groups) {
  return guarded([&] {
    require(model, groups);
    *groups = static_cast<int>(model->groups.size());
  });
}

int psg_model_group(const psg_model* model, int index, const char** name, uint64_t* count) {
  return guarded([&] {
    require(model, name, count);
    if (index < 0 || index >= static_cast<int>(model->groups.size())) {
      raise(ErrorCode::kInvalidArgument, "group index out of range");
    }
    *name = model->groups[index].name.c_str();
    *count = model->groups[index].count;
  });
}

void psg_model_free(psg_model* model) { delete model; }

void psg_train_config_default(psg_train_config* cfg) {
  if (!cfg) return;
  const TrainConfig d;
  cfg->batch_size = d.batch_size;
  cfg->lr = d.lr_init;
  cfg->iters = d.total_iters;
  cfg->alpha = d.alpha;
  cfg->seed = d.seed;
  cfg->momentum = d.momentum;
  cfg->augment = 1;
  cfg->val_every = 0;
}

int psg_train(psg_model* model, const psg_dataset* ds, int test_fold, const psg_train_config* cfg,
              psg_step_fn on_step, psg_val_fn on_val, void* user) {
  return guarded([&] {
    require(model, ds, cfg);
    if (ds->num_classes != model->net->config().num_classes) {
      raise(ErrorCode::kConfig, "dataset has " + std::to_string(ds->num_classes) + " classes, model " +
                                    std::to_string(model->net->config().num_classes));
    }
    TrainConfig tc;
    tc.batch_size = cfg->batch_size;
    tc.lr_init = cfg->lr;
    tc.total_iters = cfg->iters;
    tc.alpha = cfg->alpha;
    tc.seed = cfg->seed;
    tc.optimizer = cfg->momentum > 0 ? Optimizer::kSgdMomentum : Optimizer::kSgd;
    tc.momentum = cfg->momentum;
    if (!cfg->augment) tc.augmentation = AugmentationSpec::none();
    tc.val_every = cfg->val_every;
    const auto train_set = select_fold(ds->samples, test_fold, false);
    const auto val_set = test_fold < 0 ? std::vector<SegmentationSample>{} : select_fold(ds->samples, test_fold, true);
    StepCallback cb;
    if (on_step) cb = [&](const TrainStep& s) { on_step(s.iter, s.lr, s.loss, user); };
    const auto result = train(*model->net, train_set, val_set, tc, cb);
    if (on_val) {
      for (const auto& [iter, dice] : result.val_dice) on_val(iter, dice, user);
    }
  });
}

int psg_evaluate(const psg_model* model, const psg_dataset* ds, int fold, int predictor, psg_report** out) {
  return guarded([&] {
    require(ds, out);
    const auto samples = select_fold(ds->samples, fold, true);
    std::vector<std::vector<int32_t>> preds;
    switch (predictor) {
      case PSG_PREDICT_MODEL:
        require(model);
        if (model->net->config().num_classes != ds->num_classes) {
          raise(ErrorCode::kConfig, "checkpoint predicts " + std::to_string(model->net->config().num_classes) +
                                        " classes but the dataset has " + std::to_string(ds->num_classes));
        }
        preds = predict(*model->net, samples);
        break;
      case PSG_PREDICT_TRUTH:
        for (const auto& s : samples) preds.push_back(s.mask);
        break;
      case PSG_PREDICT_BACKGROUND:
        for (const auto& s : samples) preds.emplace_back(s.mask.size(), 0);
        break;
      default:
        raise(ErrorCode::kInvalidArgument, "unknown predictor " + std::to_string(predictor));
    }
    ConfusionCounts counts(ds->num_classes);
    for (std::size_t i = 0; i < samples.size(); ++i) counts.accumulate(preds[i], samples[i].mask);
    auto r = std::make_unique<psg_report>();
    r->report = iou_dice(counts, static_cast<int>(samples.size()));
    r->class_names = ds->class_names;
    *out = r.release();
  });
}

int psg_report_mean(const psg_report* report, double* mean_iou, double* mean_dice) {
  return guarded([&] {
    require(report, mean_iou, mean_dice);
    *mean_iou = report->report.mean_iou;
    *mean_dice = report->report.mean_dice;
  });
}

int psg_report_class(const psg_report* report, int label, double* iou, double* dice, uint64_t* tp, uint64_t* fp,
                     uint64_t* fn) {
  return guarded([&] {
    require(report);
    if (label < 0 || label >= static_cast<int>(report->report.classes.size())) {
      raise(ErrorCode::kInvalidArgument, "label out of range");
    }
    const auto& c = report->report.classes[label];
    if (iou) *iou = c.iou;
    if (dice) *dice = c.dice;
    if (tp) *tp = c.counts.tp;
    if (fp) *fp = c.counts.fp;
    if (fn) *fn = c.counts.fn;
  });
}

int psg_report_format(const psg_report* report, int format, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(report);
    std::string text;
    switch (format) {
      case PSG_FORMAT_TABLE: text = format_table(report->report, report->class_names); break;
      case PSG_FORMAT_TSV: text = format_tsv(report->report, report->class_names); break;
      case PSG_FORMAT_KEY_VALUE: text = format_key_values(report->report, report->class_names); break;
      default: raise(ErrorCode::kInvalidArgument, "unknown report format");
    }
    if (needed) *needed = text.size();
    if (buf && cap > 0) {
      const std::size_t n = std::min(cap - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
  });
}

void psg_report_free(psg_report* report) { delete report; }

int psg_infer_file(const psg_model* model, const char* image_path, const char* mask_path, const char* overlay_path) {
  return guarded([&] {
    require(model, image_path);
    const Image8 img = read_png(image_path);
    SegmentationSample s;
    s.height = img.height;
    s.width = img.width;
    const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
    s.image.resize(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
      for (int c = 0; c < 3; ++c) {
        s.image[c * plane + i] = (img.channels == 3 ? img.pixels[i * 3 + c] : img.pixels[i]) / 255.0f;
      }
    }
    const int S = model->net->config().input_size;
    const int K = model->net->config().num_classes;
    std::vector<int32_t> labels;
    {
      NoGradGuard guard;
      Tensor<float> x({1, 3, s.height, s.width}, s.image);
      if (s.height != S || s.width != S) x = bilinear_resize(x, S, S);
      auto logits = model->net->forward(x, false);
      if (s.height != S || s.width != S) logits = bilinear_resize(logits, s.height, s.width);
      labels = argmax_labels({logits.data().begin(), logits.data().end()}, K, s.height, s.width);
    }
    if (mask_path) {
      Image8 mask{s.width, s.height, 1, {}};
      for (int32_t v : labels) mask.pixels.push_back(static_cast<uint8_t>(v));
      write_png(mask_path, mask);
    }
    if (overlay_path) write_mask_overlay(s.image, s.height, s.width, labels, overlay_path);
  });
}

int psg_gradcheck(const char* module, uint64_t seed, int sabotage, psg_check_fn on_check, void* user,
                  int* failures) {
  return guarded([&] {
    require(module);
    set_gradcheck_sabotage(sabotage != 0);
    std::vector<GradCheckResult> results;
    try {
      results = run_gradcheck(module, seed);
    } catch (...) {
      set_gradcheck_sabotage(false);
      throw;
    }
    set_gradcheck_sabotage(false);
    int failed = 0;
    for (const auto& r : results) {
      if (!r.passed) ++failed;
      if (on_check) on_check(r.name.c_str(), r.max_error, r.passed ? 1 : 0, user);
    }
    if (failures) *failures = failed;
  });
}

}  // extern "C"
