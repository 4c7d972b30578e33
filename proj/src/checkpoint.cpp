#include "stereovit/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace stereovit {

namespace {

constexpr char kMagic[4] = {'T', 'F', 'S', 'G'};

const std::array<uint32_t, 256>& crc_table() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int j = 0; j < 8; ++j) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  return table;
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const uint8_t* data, size_t len) : data_(data), len_(len) {}

  uint32_t u32() {
    need(4);
    uint32_t v = static_cast<uint32_t>(data_[pos_]) | (static_cast<uint32_t>(data_[pos_ + 1]) << 8) |
                 (static_cast<uint32_t>(data_[pos_ + 2]) << 16) |
                 (static_cast<uint32_t>(data_[pos_ + 3]) << 24);
    pos_ += 4;
    return v;
  }

  uint8_t u8() {
    need(1);
    return data_[pos_++];
  }

  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  void f32_into(float* dst, size_t count) {
    need(count * 4);
    std::memcpy(dst, data_ + pos_, count * 4);
    pos_ += count * 4;
  }

  size_t pos() const { return pos_; }

 private:
  void need(size_t n) {
    if (pos_ + n > len_) throw std::runtime_error("checkpoint: truncated file");
  }
  const uint8_t* data_;
  size_t len_;
  size_t pos_ = 0;
};

}  // namespace

uint32_t crc32_ieee(const uint8_t* data, size_t len) {
  uint32_t crc = 0xffffffffu;
  const auto& t = crc_table();
  for (size_t i = 0; i < len; ++i) crc = t[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

std::vector<uint8_t> checkpoint_bytes(const Model<float>& model, const TrainMeta& meta) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);

  nlohmann::json blob;
  blob["config"] = model.config().to_json();
  blob["meta"] = {{"epoch", meta.epoch}, {"seed", meta.seed}, {"val_mse", meta.val_mse}};
  const std::string cfg = blob.dump();
  put_u32(out, static_cast<uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());

  put_u32(out, static_cast<uint32_t>(model.parameters().size()));
  for (const auto& [name, tensor] : model.parameters()) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<uint8_t>(tensor.rank()));
    for (int64_t d : tensor.shape()) put_u32(out, static_cast<uint32_t>(d));
    for (float v : tensor.data()) put_f32(out, v);
  }
  put_u32(out, crc32_ieee(out.data(), out.size()));
  return out;
}

void save_checkpoint(const Model<float>& model, const TrainMeta& meta, const std::string& path) {
  const std::vector<uint8_t> bytes = checkpoint_bytes(model, meta);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("checkpoint: rename failed for " + path);
  }
}

LoadedCheckpoint load_checkpoint_bytes(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 12) throw std::runtime_error("checkpoint: truncated file");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  const uint32_t stored_crc = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16) |
                              (static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24);
  if (crc32_ieee(bytes.data(), bytes.size() - 4) != stored_crc) {
    throw std::runtime_error("checkpoint: CRC mismatch");
  }

  Reader r(bytes.data() + 4, bytes.size() - 8);  // between magic and CRC
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const uint32_t cfg_len = r.u32();
  nlohmann::json blob;
  try {
    blob = nlohmann::json::parse(r.str(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad config blob: ") + e.what());
  }
  ModelConfig cfg = ModelConfig::from_json(blob.at("config"));
  cfg.validate();
  TrainMeta meta;
  meta.epoch = blob.at("meta").value("epoch", 0);
  meta.seed = blob.at("meta").value("seed", static_cast<uint64_t>(0));
  meta.val_mse = blob.at("meta").value("val_mse", 0.0);

  Model<float> model = Model<float>::init(cfg, meta.seed);
  std::vector<std::string> seen;
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const uint8_t rank = r.u8();
    std::vector<int64_t> shape(rank);
    for (uint8_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(r.u32());
    if (!model.has_param(name)) {
      throw std::runtime_error("checkpoint: unexpected tensor " + name);
    }
    Tensor<float> t = model.param(name);
    if (t.shape() != shape) {
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                               ", expected " + shape_str(t.shape()));
    }
    r.f32_into(t.mutable_data().data(), static_cast<size_t>(t.size()));
    seen.push_back(name);
  }
  if (seen.size() != model.parameters().size()) {
    throw std::runtime_error("checkpoint: missing tensors (" + std::to_string(seen.size()) +
                             " of " + std::to_string(model.parameters().size()) + ")");
  }
  return LoadedCheckpoint{std::move(model), meta};
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load_checkpoint_bytes(bytes);
}

}  // namespace stereovit
