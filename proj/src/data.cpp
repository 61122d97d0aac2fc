#include "pyramidseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "pyramidseg/error.hpp"
#include "pyramidseg/rng.hpp"

namespace pyseg {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Smooth random field in [0, 1]: a coarse random grid upsampled bilinearly.
std::vector<float> smooth_field(Rng& rng, int size, int grid) {
  std::vector<double> coarse(static_cast<std::size_t>(grid + 1) * (grid + 1));
  for (double& v : coarse) v = rng.uniform();
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double gy = static_cast<double>(y) / size * grid;
    const int y0 = static_cast<int>(gy);
    const double ty = gy - y0;
    for (int x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / size * grid;
      const int x0 = static_cast<int>(gx);
      const double tx = gx - x0;
      auto at = [&](int a, int b) { return coarse[a * (grid + 1) + b]; };
      const double top = (1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1);
      const double bot = (1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1);
      out[y * size + x] = static_cast<float>((1 - ty) * top + ty * bot);
    }
  }
  return out;
}

}  // namespace

void gaussian_blur_planes(std::vector<float>& image, int planes, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;
  std::vector<float> tmp(static_cast<std::size_t>(h) * w);
  for (int p = 0; p < planes; ++p) {
    float* plane = image.data() + static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * plane[y * w + std::clamp(x + i, 0, w - 1)];
        tmp[y * w + x] = static_cast<float>(acc);
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
        plane[y * w + x] = static_cast<float>(acc);
      }
    }
  }
}

namespace {

struct Canvas {
  int size;
  std::vector<float>& image;
  std::vector<int32_t>& mask;

  void blend(int y, int x, const double rgb[3], double alpha) {
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    const std::size_t idx = static_cast<std::size_t>(y) * size + x;
    for (int c = 0; c < 3; ++c) {
      image[c * plane + idx] = static_cast<float>((1 - alpha) * image[c * plane + idx] + alpha * rgb[c]);
    }
  }
};

void draw_blob(Canvas& cv, Rng& rng, int label) {
  const int s = cv.size;
  const double cy = rng.uniform(0.2, 0.8) * s, cx = rng.uniform(0.2, 0.8) * s;
  const double radius = rng.uniform(0.12, 0.22) * s;
  double amp[3], phase[3];
  for (int i = 0; i < 3; ++i) {
    amp[i] = rng.uniform(0.05, 0.18);
    phase[i] = rng.uniform(0, 2 * kPi);
  }
  const double base[3] = {rng.uniform(0.8, 0.95), rng.uniform(0.65, 0.85), rng.uniform(0.25, 0.45)};
  auto texture = smooth_field(rng, s, 6);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double theta = std::atan2(dy, dx);
      double r = radius;
      for (int i = 0; i < 3; ++i) r *= 1 + amp[i] * std::sin((i + 2) * theta + phase[i]);
      if (std::hypot(dy, dx) >= r) continue;
      const double t = 0.75 + 0.5 * texture[y * s + x];
      const double rgb[3] = {std::min(1.0, base[0] * t), std::min(1.0, base[1] * t), std::min(1.0, base[2] * t)};
      cv.blend(y, x, rgb, 1.0);
      cv.mask[y * s + x] = label;
    }
  }
}

void draw_rod(Canvas& cv, Rng& rng, int label) {
  const int s = cv.size;
  const double cy = rng.uniform(0.25, 0.75) * s, cx = rng.uniform(0.25, 0.75) * s;
  const double angle = rng.uniform(0, kPi);
  const double half_len = rng.uniform(0.25, 0.45) * s;
  const double half_width = rng.uniform(0.045, 0.07) * s;
  const double gray = rng.uniform(0.55, 0.7);
  const double uy = std::sin(angle), ux = std::cos(angle);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double along = dy * uy + dx * ux;
      const double across = -dy * ux + dx * uy;
      if (std::abs(along) > half_len || std::abs(across) > half_width) continue;
      const bool stripe = std::abs(across - 0.3 * half_width) < 0.25 * half_width;
      const double v = stripe ? 0.97 : gray * (0.9 + 0.1 * std::cos(along * 0.3));
      const double rgb[3] = {v, v, std::min(1.0, v * 1.05)};
      cv.blend(y, x, rgb, 1.0);
      cv.mask[y * s + x] = label;
    }
  }
}

void draw_disc(Canvas& cv, Rng& rng, int label) {
  const int s = cv.size;
  const double cy = rng.uniform(0.2, 0.8) * s, cx = rng.uniform(0.2, 0.8) * s;
  const double radius = rng.uniform(0.1, 0.18) * s;
  const double edge = 2.5;
  const double tint[3] = {rng.uniform(0.35, 0.5), rng.uniform(0.45, 0.6), rng.uniform(0.55, 0.75)};
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
      if (d >= radius + edge) continue;
      // Blunt boundary: opacity ramps down across the rim.
      const double alpha = 0.45 * std::clamp((radius + edge - d) / (2 * edge), 0.0, 1.0);
      cv.blend(y, x, tint, alpha);
      if (d < radius) cv.mask[y * s + x] = label;
    }
  }
}

}  // namespace

SegmentationSample generate_synthetic_sample(uint64_t seed, int index, int size, int num_classes) {
  if (size < 32) raise(ErrorCode::kConfig, "synthetic image size must be at least 32");
  if (num_classes < 2) raise(ErrorCode::kConfig, "synthetic data needs at least 2 classes");
  Rng rng = Rng(seed).split(static_cast<uint64_t>(index));
  SegmentationSample s;
  s.height = s.width = size;
  s.fold = index % kSyntheticFolds;
  std::ostringstream id;
  id << "synth_" << seed << "_" << index;
  s.id = id.str();
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  s.image.resize(3 * plane);
  s.mask.assign(plane, 0);

  const double bg[3] = {rng.uniform(0.55, 0.75), rng.uniform(0.22, 0.38), rng.uniform(0.18, 0.32)};
  auto low = smooth_field(rng, size, 3);
  auto grain = smooth_field(rng, size, 12);
  for (std::size_t i = 0; i < plane; ++i) {
    const double shade = 0.8 + 0.3 * low[i] + 0.1 * (grain[i] - 0.5);
    for (int c = 0; c < 3; ++c) s.image[c * plane + i] = static_cast<float>(bg[c] * shade + 0.02 * (rng.uniform() - 0.5));
  }

  Canvas cv{size, s.image, s.mask};
  // Draw order by recipe: discs, then blobs, then rods on top.
  for (int recipe : {2, 0, 1}) {
    for (int label = 1; label < num_classes; ++label) {
      if ((label - 1) % 3 != recipe) continue;
      Rng obj = rng.split(1000 + label);
      if (obj.uniform() >= 0.92) continue;
      if (recipe == 0) draw_blob(cv, obj, label);
      if (recipe == 1) draw_rod(cv, obj, label);
      if (recipe == 2) draw_disc(cv, obj, label);
    }
  }
  Rng post = rng.split(7);
  if (post.uniform() < 0.25) gaussian_blur_planes(s.image, 3, size, size, post.uniform(0.6, 1.2));
  for (float& v : s.image) v = std::clamp(v, 0.0f, 1.0f);
  return s;
}

std::vector<SegmentationSample> generate_synthetic(uint64_t seed, int count, int size, int num_classes) {
  if (count < 0) raise(ErrorCode::kConfig, "sample count must be non-negative");
  std::vector<SegmentationSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_sample(seed, i, size, num_classes));
  return out;
}

// ---------------------------------------------------------------------------
// PNG

Image8 read_png(const std::string& path) {
  if (!fs::exists(path)) raise(ErrorCode::kNotFound, "no such image: " + path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    raise(ErrorCode::kMalformed, "cannot decode PNG " + path + ": " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = color ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    raise(ErrorCode::kMalformed, "cannot decode PNG " + path + ": " + img.message);
  }
  return out;
}

void write_png(const std::string& path, const Image8& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    raise(ErrorCode::kShape, "write_png: pixel buffer does not match image extent");
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    raise(ErrorCode::kIo, "cannot write PNG " + path + ": " + img.message);
  }
}

Image8 quantize_image(const SegmentationSample& sample) {
  Image8 out;
  out.width = sample.width;
  out.height = sample.height;
  out.channels = 3;
  const std::size_t plane = static_cast<std::size_t>(sample.width) * sample.height;
  out.pixels.resize(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      out.pixels[i * 3 + c] = static_cast<uint8_t>(std::lround(std::clamp(sample.image[c * plane + i], 0.0f, 1.0f) * 255.0f));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

std::string DatasetManifest::resolve(const std::string& relative) const {
  fs::path p(relative);
  if (p.is_absolute()) return p.string();
  return (fs::path(path).parent_path() / p).string();
}

int DatasetManifest::num_folds() const {
  int mx = -1;
  for (const auto& r : rows) mx = std::max(mx, r.fold);
  return mx + 1;
}

namespace {

std::string trim_cr(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

std::string classes_path(const std::string& manifest_path) {
  return (fs::path(manifest_path).parent_path() / "classes.txt").string();
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::kNotFound, "cannot open manifest " + path);
  DatasetManifest m;
  m.path = path;
  std::string line;
  if (!std::getline(in, line) || trim_cr(line) != "image,mask,fold") {
    raise(ErrorCode::kMalformed, path + ":1: expected header 'image,mask,fold'");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      raise(ErrorCode::kMalformed, where + "expected 3 non-empty fields, got '" + line + "'");
    }
    ManifestRow row{fields[0], fields[1], 0, lineno};
    const auto* first = fields[2].data();
    const auto* last = first + fields[2].size();
    auto [ptr, ec] = std::from_chars(first, last, row.fold);
    if (ec != std::errc() || ptr != last || row.fold < 0) {
      raise(ErrorCode::kMalformed, where + "fold '" + fields[2] + "' is not a non-negative integer");
    }
    for (const auto* p : {&row.image_path, &row.mask_path}) {
      if (!fs::exists(m.resolve(*p))) raise(ErrorCode::kNotFound, where + "missing file " + *p);
    }
    m.rows.push_back(std::move(row));
  }
  std::set<int> folds;
  for (const auto& r : m.rows) folds.insert(r.fold);
  if (!folds.empty() && (*folds.begin() != 0 || *folds.rbegin() != static_cast<int>(folds.size()) - 1)) {
    raise(ErrorCode::kMalformed, path + ": folds must form the contiguous range 0..F-1");
  }
  std::ifstream cls(classes_path(path));
  if (!cls) raise(ErrorCode::kNotFound, "missing class list " + classes_path(path));
  while (std::getline(cls, line)) {
    line = trim_cr(line);
    if (!line.empty()) m.class_names.push_back(line);
  }
  m.num_classes = static_cast<int>(m.class_names.size());
  if (m.num_classes < 2) raise(ErrorCode::kMalformed, classes_path(path) + ": need at least 2 classes");
  return m;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorCode::kIo, "cannot write manifest " + path);
  out << "image,mask,fold\n";
  for (const auto& r : manifest.rows) out << r.image_path << ',' << r.mask_path << ',' << r.fold << '\n';
  std::ofstream cls(classes_path(path), std::ios::trunc);
  if (!cls) raise(ErrorCode::kIo, "cannot write " + classes_path(path));
  for (const auto& name : manifest.class_names) cls << name << '\n';
  if (!out || !cls) raise(ErrorCode::kIo, "short write to manifest " + path);
}

SegmentationSample read_sample(const DatasetManifest& manifest, std::size_t row_index) {
  if (row_index >= manifest.rows.size()) raise(ErrorCode::kInvalidArgument, "manifest row out of range");
  const ManifestRow& row = manifest.rows[row_index];
  const std::string where = manifest.path + ":" + std::to_string(row.line) + ": ";
  Image8 img, mask;
  try {
    img = read_png(manifest.resolve(row.image_path));
    mask = read_png(manifest.resolve(row.mask_path));
  } catch (const Error& e) {
    raise(e.code(), where + e.what());
  }
  if (mask.channels != 1) raise(ErrorCode::kMalformed, where + "mask must be single-channel");
  if (img.width != mask.width || img.height != mask.height) {
    raise(ErrorCode::kShape, where + "image and mask extents differ");
  }
  SegmentationSample s;
  s.height = img.height;
  s.width = img.width;
  s.fold = row.fold;
  s.id = fs::path(row.image_path).stem().string();
  const std::size_t plane = static_cast<std::size_t>(s.width) * s.height;
  s.image.resize(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const uint8_t v = img.channels == 3 ? img.pixels[i * 3 + c] : img.pixels[i];
      s.image[c * plane + i] = static_cast<float>(v) / 255.0f;
    }
  }
  s.mask.resize(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const int label = mask.pixels[i];
    if (label >= manifest.num_classes) {
      raise(ErrorCode::kLabelRange, where + "mask pixel (" + std::to_string(i / s.width) + "," +
                                        std::to_string(i % s.width) + ") has label " + std::to_string(label) +
                                        " >= num_classes " + std::to_string(manifest.num_classes));
    }
    s.mask[i] = label;
  }
  return s;
}

std::vector<std::string> synthetic_class_names(int num_classes) {
  static const char* kRecipeNames[] = {"blob", "rod", "disc"};
  std::vector<std::string> names{"background"};
  for (int c = 1; c < num_classes; ++c) {
    std::string name = kRecipeNames[(c - 1) % 3];
    if (c > 3) name += std::to_string((c - 1) / 3 + 1);
    names.push_back(name);
  }
  return names;
}

DatasetManifest save_dataset(const std::string& dir, const std::vector<SegmentationSample>& samples,
                             const std::vector<std::string>& class_names) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  DatasetManifest m;
  m.path = (fs::path(dir) / "manifest.csv").string();
  m.num_classes = static_cast<int>(class_names.size());
  m.class_names = class_names;
  int line = 1;
  for (const auto& s : samples) {
    const std::string image_rel = "images/" + s.id + ".png";
    const std::string mask_rel = "masks/" + s.id + ".png";
    write_png(m.resolve(image_rel), quantize_image(s));
    Image8 mask{s.width, s.height, 1, {}};
    mask.pixels.reserve(s.mask.size());
    for (int32_t v : s.mask) {
      if (v < 0 || v > 255) raise(ErrorCode::kLabelRange, "label " + std::to_string(v) + " does not fit 8 bits");
      mask.pixels.push_back(static_cast<uint8_t>(v));
    }
    write_png(m.resolve(mask_rel), mask);
    m.rows.push_back({image_rel, mask_rel, s.fold, ++line});
  }
  write_manifest(m.path, m);
  return m;
}

std::vector<std::size_t> fold_rows(const DatasetManifest& manifest, int fold, bool test) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    if ((manifest.rows[i].fold == fold) == test) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlays

Rgb label_color(int label) {
  static const Rgb kTable[] = {{0, 0, 0},       {230, 25, 75},  {60, 180, 75},  {0, 130, 200},
                               {255, 225, 25},  {245, 130, 48}, {145, 30, 180}, {70, 240, 240}};
  constexpr int n = sizeof(kTable) / sizeof(kTable[0]);
  return kTable[label <= 0 ? 0 : 1 + (label - 1) % (n - 1)];
}

Image8 render_overlay(const std::vector<float>& image, int height, int width, const std::vector<int32_t>& mask) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (image.size() != 3 * plane || mask.size() != plane) {
    raise(ErrorCode::kShape, "overlay: image and mask extents disagree");
  }
  Image8 out{width, height, 3, std::vector<uint8_t>(3 * plane)};
  for (std::size_t i = 0; i < plane; ++i) {
    const Rgb col = label_color(mask[i]);
    const float tint[3] = {col.r / 255.0f, col.g / 255.0f, col.b / 255.0f};
    for (int c = 0; c < 3; ++c) {
      float v = std::clamp(image[c * plane + i], 0.0f, 1.0f);
      if (mask[i] > 0) v = (1 - kOverlayAlpha) * v + kOverlayAlpha * tint[c];
      out.pixels[i * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

std::vector<int32_t> argmax_labels(const std::vector<float>& logits, int classes, int height, int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (logits.size() != plane * classes) raise(ErrorCode::kShape, "argmax: logits do not match extent");
  std::vector<int32_t> out(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    float best = logits[i];
    for (int c = 1; c < classes; ++c) {
      if (logits[c * plane + i] > best) {
        best = logits[c * plane + i];
        out[i] = c;
      }
    }
  }
  return out;
}

void write_mask_overlay(const std::vector<float>& image, int height, int width,
                        const std::vector<int32_t>& mask, const std::string& path) {
  write_png(path, render_overlay(image, height, width, mask));
}

void write_logits_overlay(const std::vector<float>& image, int height, int width,
                          const std::vector<float>& logits, int classes, const std::string& path) {
  write_mask_overlay(image, height, width, argmax_labels(logits, classes, height, width), path);
}

}  // namespace pyseg
