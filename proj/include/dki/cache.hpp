#pragma once

// On-disk capture cache: per-layer record streams plus a shared index, so a
// single encoder's training job reads only its own layer file.
//
//   <dir>/cache_index.bin   magic, n_layers, d_model, then per record:
//                           sample id, k_len, token ids, validity mask
//   <dir>/cache_layer_<l>.bin
//                           little-endian float32 target rows in index order

#include <cstdint>
#include <string>
#include <vector>

#include "dki/injection.hpp"
#include "dki/tensor.hpp"

namespace dki {

struct CacheRecord {
  uint32_t sample_id = 0;
  uint32_t k_len = 0;
  TokenIds tokens;  // knowledge-run token sequence (|K|+|x|)
  Mask valid;       // loss-validity mask over positions
};

class CaptureCacheWriter {
 public:
  CaptureCacheWriter(std::string dir, int n_layers, int d_model);
  void add(uint32_t sample_id, uint32_t k_len, const TokenIds& tokens,
           const AlignedTarget& target);
  void finalize();
  int records_written() const { return n_records_; }

 private:
  std::string dir_;
  int n_layers_;
  int d_model_;
  int n_records_ = 0;
  std::vector<CacheRecord> index_;
};

class CaptureCache {
 public:
  static CaptureCache open(const std::string& dir);

  int n_layers() const { return n_layers_; }
  int d_model() const { return d_model_; }
  const std::vector<CacheRecord>& records() const { return records_; }

  // All target matrices for one layer, one rows*d_model buffer per record.
  std::vector<std::vector<float>> load_layer(int layer) const;

  const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
  int n_layers_ = 0;
  int d_model_ = 0;
  std::vector<CacheRecord> records_;
};

}  // namespace dki
