#include "pyramidseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "pyramidseg/error.hpp"

namespace pyseg {

void ConfusionCounts::accumulate(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt) {
  if (pred.size() != gt.size()) {
    raise(ErrorCode::kShape, "prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                                 std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes) {
      raise(ErrorCode::kLabelRange, "pixel " + std::to_string(i) + ": label " +
                                        std::to_string(p < 0 || p >= num_classes ? p : g) + " outside [0, " +
                                        std::to_string(num_classes) + ")");
    }
    if (p == g) {
      ++classes[p].tp;
    } else {
      ++classes[p].fp;
      ++classes[g].fn;
    }
  }
  pixels += pred.size();
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.num_classes != num_classes) raise(ErrorCode::kShape, "cannot merge counts with different class counts");
  for (int c = 0; c < num_classes; ++c) {
    classes[c].tp += other.classes[c].tp;
    classes[c].fp += other.classes[c].fp;
    classes[c].fn += other.classes[c].fn;
  }
  pixels += other.pixels;
}

ConfusionCounts confusion_counts(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt,
                                 int num_classes) {
  ConfusionCounts c(num_classes);
  c.accumulate(pred, gt);
  return c;
}

MetricsReport iou_dice(const ConfusionCounts& counts, int samples) {
  MetricsReport r;
  r.samples = samples;
  double iou_sum = 0, dice_sum = 0;
  for (int c = 0; c < counts.num_classes; ++c) {
    ClassMetrics m;
    m.label = c;
    m.counts = counts.classes[c];
    const double tp = static_cast<double>(m.counts.tp);
    const double fp = static_cast<double>(m.counts.fp);
    const double fn = static_cast<double>(m.counts.fn);
    m.empty = tp + fp + fn == 0;
    if (!m.empty) {
      m.iou = 100.0 * tp / (tp + fp + fn);
      m.dice = 100.0 * 2 * tp / (2 * tp + fp + fn);
      if (c > 0) {
        iou_sum += m.iou;
        dice_sum += m.dice;
        ++r.foreground_classes;
      }
    }
    r.classes.push_back(m);
  }
  if (r.foreground_classes > 0) {
    r.mean_iou = iou_sum / r.foreground_classes;
    r.mean_dice = dice_sum / r.foreground_classes;
  }
  return r;
}

FoldSummary aggregate_folds(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) raise(ErrorCode::kInvalidArgument, "aggregate_folds needs at least one report");
  FoldSummary s;
  s.folds = static_cast<int>(reports.size());
  for (const auto& r : reports) {
    s.mean_iou += r.mean_iou;
    s.mean_dice += r.mean_dice;
  }
  s.mean_iou /= s.folds;
  s.mean_dice /= s.folds;
  if (s.folds > 1) {
    for (const auto& r : reports) {
      s.std_iou += (r.mean_iou - s.mean_iou) * (r.mean_iou - s.mean_iou);
      s.std_dice += (r.mean_dice - s.mean_dice) * (r.mean_dice - s.mean_dice);
    }
    s.std_iou = std::sqrt(s.std_iou / (s.folds - 1));
    s.std_dice = std::sqrt(s.std_dice / (s.folds - 1));
  }
  return s;
}

namespace {

std::string class_name(const std::vector<std::string>& names, int label) {
  if (label < static_cast<int>(names.size())) return names[label];
  return "class" + std::to_string(label);
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string format_table(const MetricsReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %10s %10s %10s %8s %8s\n", "class", "tp", "fp", "fn", "IoU%", "Dice%");
  out << line;
  for (const auto& m : report.classes) {
    std::snprintf(line, sizeof line, "%-14s %10llu %10llu %10llu %8s %8s\n", class_name(class_names, m.label).c_str(),
                  static_cast<unsigned long long>(m.counts.tp), static_cast<unsigned long long>(m.counts.fp),
                  static_cast<unsigned long long>(m.counts.fn), m.empty ? "-" : fixed(m.iou).c_str(),
                  m.empty ? "-" : fixed(m.dice).c_str());
    out << line;
  }
  std::snprintf(line, sizeof line, "%-14s %10s %10s %10s %8s %8s\n", "mean (fg)", "", "", "",
                fixed(report.mean_iou).c_str(), fixed(report.mean_dice).c_str());
  out << line;
  return out.str();
}

std::string format_tsv(const MetricsReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "class\tiou\tdice\n";
  for (const auto& m : report.classes) {
    out << class_name(class_names, m.label) << '\t' << (m.empty ? "nan" : fixed(m.iou, 4)) << '\t'
        << (m.empty ? "nan" : fixed(m.dice, 4)) << '\n';
  }
  out << "MEAN\t" << fixed(report.mean_iou, 4) << '\t' << fixed(report.mean_dice, 4) << '\n';
  return out.str();
}

std::string format_key_values(const MetricsReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "samples=" << report.samples << '\n';
  out << "foreground_classes=" << report.foreground_classes << '\n';
  out << "mean_iou=" << fixed(report.mean_iou, 4) << '\n';
  out << "mean_dice=" << fixed(report.mean_dice, 4) << '\n';
  for (const auto& m : report.classes) {
    const std::string key = class_name(class_names, m.label);
    out << key << ".tp=" << m.counts.tp << '\n' << key << ".fp=" << m.counts.fp << '\n'
        << key << ".fn=" << m.counts.fn << '\n';
    out << key << ".iou=" << (m.empty ? "nan" : fixed(m.iou, 4)) << '\n';
    out << key << ".dice=" << (m.empty ? "nan" : fixed(m.dice, 4)) << '\n';
  }
  return out.str();
}

}  // namespace pyseg
