#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pyseg {

// Image in CHW order with values in [0, 1] plus an HxW label map.
struct SegmentationSample {
  int height = 0;
  int width = 0;
  std::vector<float> image;    // 3 * height * width
  std::vector<int32_t> mask;   // height * width
  int fold = 0;
  std::string id;
};

// Scenes with three object families over a textured background:
//   recipe 0: amorphous blobs with colour/texture variation
//   recipe 1: elongated bright rods with a specular stripe
//   recipe 2: low-contrast discs with blunt edges
// Foreground class c draws recipe (c - 1) % 3. A fraction of images is
// blurred globally. Sample i is a pure function of (seed, i); folds cycle
// 0..3 over the index.
std::vector<SegmentationSample> generate_synthetic(uint64_t seed, int count, int size, int num_classes);
SegmentationSample generate_synthetic_sample(uint64_t seed, int index, int size, int num_classes);

inline constexpr int kSyntheticFolds = 4;

// Separable Gaussian blur of `planes` consecutive HxW planes, edges clamped.
void gaussian_blur_planes(std::vector<float>& image, int planes, int h, int w, double sigma);

struct ManifestRow {
  std::string image_path;  // as written in the CSV
  std::string mask_path;
  int fold = 0;
  int line = 0;            // 1-based line number in the CSV
};

struct DatasetManifest {
  std::string path;        // manifest location; relative rows resolve against its directory
  std::vector<ManifestRow> rows;
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::string resolve(const std::string& relative) const;
  int num_folds() const;
};

// Reads "image,mask,fold" CSV plus the sibling classes.txt (one class name per
// line). Missing files are kNotFound, malformed rows kMalformed; both name the
// offending line.
DatasetManifest load_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);

// Loads one row; labels >= num_classes are kLabelRange.
SegmentationSample read_sample(const DatasetManifest& manifest, std::size_t row);

// Writes PNGs for every sample plus manifest.csv and classes.txt under dir.
DatasetManifest save_dataset(const std::string& dir, const std::vector<SegmentationSample>& samples,
                             const std::vector<std::string>& class_names);

// "background" followed by the recipe name of each foreground class.
std::vector<std::string> synthetic_class_names(int num_classes);

// Rows whose fold equals (test) or differs from (train) the held-out fold.
std::vector<std::size_t> fold_rows(const DatasetManifest& manifest, int fold, bool test);

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<uint8_t> pixels;  // interleaved, row-major
};

Image8 read_png(const std::string& path);
void write_png(const std::string& path, const Image8& image);

Image8 quantize_image(const SegmentationSample& sample);
// Overlay colour of a label; label 0 is left untinted.
struct Rgb {
  uint8_t r, g, b;
};
Rgb label_color(int label);
inline constexpr float kOverlayAlpha = 0.5f;

// Alpha-blends label colours over the 8-bit image.
Image8 render_overlay(const std::vector<float>& image, int height, int width, const std::vector<int32_t>& mask);
// Argmax over the class dimension of (C,H,W) logits.
std::vector<int32_t> argmax_labels(const std::vector<float>& logits, int classes, int height, int width);
void write_mask_overlay(const std::vector<float>& image, int height, int width,
                        const std::vector<int32_t>& mask, const std::string& path);
void write_logits_overlay(const std::vector<float>& image, int height, int width,
                          const std::vector<float>& logits, int classes, const std::string& path);

}  // namespace pyseg
