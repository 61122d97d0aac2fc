#include "pyramidseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

namespace pyseg {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      raise(ErrorCode::kTruncated, std::string("checkpoint truncated while reading ") + what + " at byte " +
                                       std::to_string(pos_));
    }
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::span<const uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const uint8_t> bytes_;
  std::size_t pos_ = 0;
};

const char* kMetaNumClasses = "meta.num_classes";
const char* kMetaInputSize = "meta.input_size";
const char* kMetaBaseWidth = "meta.base_width";
const char* kMetaVariant = "meta.variant";

}  // namespace

std::vector<uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::set<std::string> seen;
  std::vector<uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) raise(ErrorCode::kDuplicateName, "duplicate checkpoint entry " + e.name);
    if (e.shape.size() > 255) raise(ErrorCode::kShape, "rank too large for checkpoint entry " + e.name);
    if (shape_numel(e.shape) != e.values.size()) {
      raise(ErrorCode::kShape, "checkpoint entry " + e.name + " has " + std::to_string(e.values.size()) +
                                   " values for shape " + shape_str(e.shape));
    }
    put_u32(out, static_cast<uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<uint8_t>(e.shape.size()));
    for (int d : e.shape) put_u32(out, static_cast<uint32_t>(d));
    const auto* raw = reinterpret_cast<const uint8_t*>(e.values.data());
    out.insert(out.end(), raw, raw + e.values.size() * sizeof(float));
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(std::span<const uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    raise(ErrorCode::kBadMagic, "not a checkpoint file (bad magic)");
  }
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    raise(ErrorCode::kBadVersion, "unsupported checkpoint version " + std::to_string(version) +
                                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const uint32_t count = r.u32("entry count");
  std::vector<CheckpointEntry> entries;
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const uint32_t name_len = r.u32("name length");
    auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    if (!seen.insert(e.name).second) raise(ErrorCode::kDuplicateName, "duplicate checkpoint entry " + e.name);
    const uint8_t rank = r.u8("rank");
    for (uint8_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(r.u32("dims")));
    const std::size_t n = shape_numel(e.shape);
    auto payload = r.take(n * sizeof(float), "payload");
    e.values.resize(n);
    std::memcpy(e.values.data(), payload.data(), payload.size());
    entries.push_back(std::move(e));
  }
  if (!r.done()) raise(ErrorCode::kMalformed, "trailing bytes after the last checkpoint entry");
  return entries;
}

std::vector<CheckpointEntry> checkpoint_entries(const SegmentationNet<float>& net) {
  const NetworkConfig& cfg = net.config();
  std::vector<CheckpointEntry> out;
  out.push_back({kMetaNumClasses, {}, {static_cast<float>(cfg.num_classes)}});
  out.push_back({kMetaInputSize, {}, {static_cast<float>(cfg.input_size)}});
  out.push_back({kMetaBaseWidth, {}, {static_cast<float>(cfg.base_width)}});
  out.push_back({kMetaVariant, {}, {static_cast<float>(static_cast<int>(cfg.variant))}});
  for (const auto& p : net.params().entries()) {
    out.push_back({p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
  }
  for (const auto& b : net.params().buffers()) {
    const int c = static_cast<int>(b.state->running_mean.size());
    out.push_back({b.name + ".running_mean", {c}, b.state->running_mean});
    out.push_back({b.name + ".running_var", {c}, b.state->running_var});
  }
  return out;
}

std::unique_ptr<SegmentationNet<float>> network_from_entries(const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto meta = [&](const char* key) {
    auto it = by_name.find(key);
    if (it == by_name.end() || it->second->values.size() != 1) {
      raise(ErrorCode::kMalformed, std::string("checkpoint lacks configuration entry ") + key);
    }
    return static_cast<int>(it->second->values[0]);
  };
  NetworkConfig cfg;
  cfg.num_classes = meta(kMetaNumClasses);
  cfg.input_size = meta(kMetaInputSize);
  cfg.base_width = meta(kMetaBaseWidth);
  const int variant = meta(kMetaVariant);
  if (variant < 0 || variant > 2) raise(ErrorCode::kMalformed, "checkpoint names unknown variant id " + std::to_string(variant));
  cfg.variant = static_cast<Variant>(variant);
  auto net = std::make_unique<SegmentationNet<float>>(cfg);

  std::size_t used = 4;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const std::vector<float>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) raise(ErrorCode::kMalformed, "checkpoint lacks tensor " + name);
    if (it->second->shape != shape) {
      raise(ErrorCode::kMalformed, "checkpoint tensor " + name + " has shape " + shape_str(it->second->shape) +
                                       ", model expects " + shape_str(shape));
    }
    ++used;
    return it->second->values;
  };
  for (const auto& p : net->params().entries()) {
    const auto& values = fetch(p.name, p.value.shape());
    Tensor<float> t = p.value;
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  for (const auto& b : net->params().buffers()) {
    const int c = static_cast<int>(b.state->running_mean.size());
    b.state->running_mean = fetch(b.name + ".running_mean", {c});
    b.state->running_var = fetch(b.name + ".running_var", {c});
  }
  if (used != entries.size()) {
    raise(ErrorCode::kMalformed, "checkpoint holds " + std::to_string(entries.size() - used) +
                                     " tensors the model does not define");
  }
  return net;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::kNotFound, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorCode::kIo, "short write to " + path);
}

void save_checkpoint(const std::string& path, const SegmentationNet<float>& net) {
  write_file_bytes(path, encode_checkpoint(checkpoint_entries(net)));
}

std::unique_ptr<SegmentationNet<float>> load_checkpoint(const std::string& path) {
  return network_from_entries(decode_checkpoint(read_file_bytes(path)));
}

}  // namespace pyseg
