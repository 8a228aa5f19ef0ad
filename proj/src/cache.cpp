#include "dki/cache.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace dki {

namespace {

constexpr char kMagic[8] = {'D', 'K', 'I', 'C', 'A', 'C', 'H', 'E'};

std::string index_path(const std::string& dir) {
  return dir + "/cache_index.bin";
}
std::string layer_path(const std::string& dir, int layer) {
  return dir + "/cache_layer_" + std::to_string(layer) + ".bin";
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

CaptureCacheWriter::CaptureCacheWriter(std::string dir, int n_layers,
                                       int d_model)
    : dir_(std::move(dir)), n_layers_(n_layers), d_model_(d_model) {
  std::filesystem::create_directories(dir_);
  // Truncate layer files up front so append order matches the index.
  for (int l = 0; l < n_layers_; ++l)
    std::ofstream(layer_path(dir_, l), std::ios::binary | std::ios::trunc);
}

void CaptureCacheWriter::add(uint32_t sample_id, uint32_t k_len,
                             const TokenIds& tokens,
                             const AlignedTarget& target) {
  if (target.rows != static_cast<int64_t>(tokens.size()) ||
      target.d != d_model_ ||
      target.layers.size() != static_cast<size_t>(n_layers_))
    throw std::invalid_argument(
        "capture cache: target shape (" + std::to_string(target.rows) + "x" +
        std::to_string(target.d) + ", " + std::to_string(target.layers.size()) +
        " layers) does not match cache config");
  for (int l = 0; l < n_layers_; ++l) {
    std::ofstream out(layer_path(dir_, l), std::ios::binary | std::ios::app);
    out.write(reinterpret_cast<const char*>(target.layers[l].data()),
              static_cast<std::streamsize>(target.layers[l].size() *
                                           sizeof(float)));
  }
  CacheRecord rec;
  rec.sample_id = sample_id;
  rec.k_len = k_len;
  rec.tokens = tokens;
  rec.valid = target.valid;
  index_.push_back(std::move(rec));
  ++n_records_;
}

void CaptureCacheWriter::finalize() {
  std::ofstream out(index_path(dir_), std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("capture cache: cannot write " + index_path(dir_));
  out.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(out, 1);  // version
  write_pod<uint32_t>(out, static_cast<uint32_t>(n_layers_));
  write_pod<uint32_t>(out, static_cast<uint32_t>(d_model_));
  write_pod<uint32_t>(out, static_cast<uint32_t>(index_.size()));
  for (const auto& rec : index_) {
    write_pod<uint32_t>(out, rec.sample_id);
    write_pod<uint32_t>(out, rec.k_len);
    write_pod<uint32_t>(out, static_cast<uint32_t>(rec.tokens.size()));
    out.write(reinterpret_cast<const char*>(rec.tokens.data()),
              static_cast<std::streamsize>(rec.tokens.size() * sizeof(int32_t)));
    out.write(reinterpret_cast<const char*>(rec.valid.data()),
              static_cast<std::streamsize>(rec.valid.size()));
  }
}

CaptureCache CaptureCache::open(const std::string& dir) {
  std::ifstream in(index_path(dir), std::ios::binary);
  if (!in)
    throw std::runtime_error("capture cache: cannot open " + index_path(dir));
  char magic[8];
  in.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("capture cache: bad magic in " + index_path(dir));
  uint32_t version = read_pod<uint32_t>(in);
  if (version != 1)
    throw std::runtime_error("capture cache: unsupported version " +
                             std::to_string(version));
  CaptureCache cache;
  cache.dir_ = dir;
  cache.n_layers_ = static_cast<int>(read_pod<uint32_t>(in));
  cache.d_model_ = static_cast<int>(read_pod<uint32_t>(in));
  uint32_t n = read_pod<uint32_t>(in);
  cache.records_.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    CacheRecord& rec = cache.records_[i];
    rec.sample_id = read_pod<uint32_t>(in);
    rec.k_len = read_pod<uint32_t>(in);
    uint32_t t = read_pod<uint32_t>(in);
    rec.tokens.resize(t);
    in.read(reinterpret_cast<char*>(rec.tokens.data()),
            static_cast<std::streamsize>(t * sizeof(int32_t)));
    rec.valid.resize(t);
    in.read(reinterpret_cast<char*>(rec.valid.data()),
            static_cast<std::streamsize>(t));
  }
  if (!in)
    throw std::runtime_error("capture cache: truncated index " +
                             index_path(dir));
  return cache;
}

std::vector<std::vector<float>> CaptureCache::load_layer(int layer) const {
  if (layer < 0 || layer >= n_layers_)
    throw std::invalid_argument("capture cache: layer " +
                                std::to_string(layer) + " outside [0, " +
                                std::to_string(n_layers_) + ")");
  std::ifstream in(layer_path(dir_, layer), std::ios::binary);
  if (!in)
    throw std::runtime_error("capture cache: cannot open " +
                             layer_path(dir_, layer));
  std::vector<std::vector<float>> out;
  out.reserve(records_.size());
  for (const auto& rec : records_) {
    std::vector<float> buf(rec.tokens.size() * static_cast<size_t>(d_model_));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    out.push_back(std::move(buf));
  }
  if (!in)
    throw std::runtime_error("capture cache: truncated layer file " +
                             layer_path(dir_, layer));
  return out;
}

}  // namespace dki
