#ifndef PYRAMIDSEG_C_API_H
#define PYRAMIDSEG_C_API_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define PSG_API __declspec(dllexport)
#else
#define PSG_API __attribute__((visibility("default")))
#endif

/* Status codes; the numeric values are stable and double as CLI exit codes. */
typedef enum {
  PSG_OK = 0,
  PSG_ERR_SHAPE = 1,
  PSG_ERR_CONFIG = 2,
  PSG_ERR_INVALID_ARGUMENT = 3,
  PSG_ERR_LABEL_RANGE = 4,
  PSG_ERR_IO = 5,
  PSG_ERR_NOT_FOUND = 6,
  PSG_ERR_MALFORMED = 7,
  PSG_ERR_BAD_MAGIC = 8,
  PSG_ERR_BAD_VERSION = 9,
  PSG_ERR_TRUNCATED = 10,
  PSG_ERR_DUPLICATE_NAME = 11,
  PSG_ERR_NUMERIC = 12,
  PSG_ERR_STATE = 13,
  PSG_ERR_INTERNAL = 99
} psg_status;

PSG_API const char* psg_status_name(int status);
/* Message of the most recent failure on the calling thread ("" if none). */
PSG_API const char* psg_last_error(void);

typedef struct psg_dataset psg_dataset;
typedef struct psg_model psg_model;
typedef struct psg_report psg_report;

/* ---- datasets ---- */
PSG_API int psg_dataset_generate(uint64_t seed, int count, int size, int num_classes, psg_dataset** out);
PSG_API int psg_dataset_load(const char* manifest_path, psg_dataset** out);
/* Writes images/, masks/, manifest.csv and classes.txt under dir. */
PSG_API int psg_dataset_save(const psg_dataset* ds, const char* dir);
PSG_API int psg_dataset_size(const psg_dataset* ds, int* count);
PSG_API int psg_dataset_num_classes(const psg_dataset* ds, int* num_classes);
PSG_API int psg_dataset_image_size(const psg_dataset* ds, int* height, int* width);
PSG_API int psg_dataset_class_name(const psg_dataset* ds, int label, const char** name);
/* Number of samples whose mask contains the label at least once. */
PSG_API int psg_dataset_class_presence(const psg_dataset* ds, int label, int* samples);
PSG_API void psg_dataset_free(psg_dataset* ds);

/* ---- models ---- */
typedef struct {
  int num_classes;
  int input_size;
  int base_width;
  const char* variant; /* deeppyramid_plus | unet_plus | pvf_only */
  uint64_t seed;
} psg_model_config;

PSG_API void psg_model_config_default(psg_model_config* cfg);
PSG_API int psg_model_create(const psg_model_config* cfg, psg_model** out);
PSG_API int psg_model_load(const char* path, psg_model** out);
PSG_API int psg_model_save(const psg_model* model, const char* path);
/* variant points at a static string. */
PSG_API int psg_model_config_of(const psg_model* model, psg_model_config* cfg);
PSG_API int psg_model_param_count(const psg_model* model, uint64_t* count);
PSG_API int psg_model_group_count(const psg_model* model, int* groups);
PSG_API int psg_model_group(const psg_model* model, int index, const char** name, uint64_t* count);
PSG_API void psg_model_free(psg_model* model);

/* ---- training ---- */
typedef struct {
  int batch_size;
  double lr;
  long iters;
  double alpha;
  uint64_t seed;
  double momentum; /* 0 selects plain SGD */
  int augment;     /* nonzero enables the default augmentation recipe */
  long val_every;  /* 0 disables held-out validation during training */
} psg_train_config;

typedef void (*psg_step_fn)(long iter, double lr, double loss, void* user);
typedef void (*psg_val_fn)(long iter, double mean_dice, void* user);

PSG_API void psg_train_config_default(psg_train_config* cfg);
/* Trains on samples whose fold differs from test_fold (-1 trains on all). */
PSG_API int psg_train(psg_model* model, const psg_dataset* ds, int test_fold, const psg_train_config* cfg,
                      psg_step_fn on_step, psg_val_fn on_val, void* user);

/* ---- evaluation ---- */
typedef enum {
  PSG_PREDICT_MODEL = 0,
  PSG_PREDICT_TRUTH = 1,
  PSG_PREDICT_BACKGROUND = 2
} psg_predictor;

typedef enum { PSG_FORMAT_TABLE = 0, PSG_FORMAT_TSV = 1, PSG_FORMAT_KEY_VALUE = 2 } psg_format;

/* Evaluates samples of fold (-1 for all). model may be NULL unless the
 * predictor is PSG_PREDICT_MODEL. */
PSG_API int psg_evaluate(const psg_model* model, const psg_dataset* ds, int fold, int predictor, psg_report** out);
PSG_API int psg_report_mean(const psg_report* report, double* mean_iou, double* mean_dice);
PSG_API int psg_report_class(const psg_report* report, int label, double* iou, double* dice, uint64_t* tp,
                             uint64_t* fp, uint64_t* fn);
/* Copies the formatted report into buf (NUL-terminated, truncated to cap)
 * and stores the untruncated length in needed. */
PSG_API int psg_report_format(const psg_report* report, int format, char* buf, size_t cap, size_t* needed);
PSG_API void psg_report_free(psg_report* report);

/* ---- inference ---- */
/* Writes the argmax label map (8-bit PNG) and an overlay (RGB PNG). Either
 * output path may be NULL. */
PSG_API int psg_infer_file(const psg_model* model, const char* image_path, const char* mask_path,
                           const char* overlay_path);

/* ---- gradient checks ---- */
typedef void (*psg_check_fn)(const char* name, double max_error, int passed, void* user);
PSG_API int psg_gradcheck(const char* module, uint64_t seed, int sabotage, psg_check_fn on_check, void* user,
                          int* failures);

#ifdef __cplusplus
}
#endif

#endif
