#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pyseg {

struct ClassCounts {
  uint64_t tp = 0;
  uint64_t fp = 0;
  uint64_t fn = 0;
};

// Per-class TP/FP/FN, accumulated over any number of masks.
struct ConfusionCounts {
  int num_classes = 0;
  std::vector<ClassCounts> classes;
  uint64_t pixels = 0;

  explicit ConfusionCounts(int k = 0) : num_classes(k), classes(k) {}
  // Throws kShape on size mismatch and kLabelRange on labels outside [0, K).
  void accumulate(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt);
  void merge(const ConfusionCounts& other);
};

ConfusionCounts confusion_counts(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt,
                                 int num_classes);

struct ClassMetrics {
  int label = 0;
  ClassCounts counts;
  double iou = 0;   // percent
  double dice = 0;  // percent
  bool empty = false;  // TP = FP = FN = 0; left out of the means
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  double mean_iou = 0;   // over non-empty foreground classes
  double mean_dice = 0;
  int foreground_classes = 0;  // how many entered the means
  int samples = 0;
};

MetricsReport iou_dice(const ConfusionCounts& counts, int samples = 0);

struct FoldSummary {
  int folds = 0;
  double mean_iou = 0;
  double std_iou = 0;  // sample standard deviation, 0 for one fold
  double mean_dice = 0;
  double std_dice = 0;
};

FoldSummary aggregate_folds(const std::vector<MetricsReport>& reports);

// Aligned table for people.
std::string format_table(const MetricsReport& report, const std::vector<std::string>& class_names = {});
// "class<TAB>iou<TAB>dice" rows for every class, then a MEAN row.
std::string format_tsv(const MetricsReport& report, const std::vector<std::string>& class_names = {});
// key=value lines (mean_iou=..., class1.dice=..., ...).
std::string format_key_values(const MetricsReport& report, const std::vector<std::string>& class_names = {});

}  // namespace pyseg
