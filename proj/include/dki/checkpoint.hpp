#pragma once

// Self-describing binary checkpoint: a JSON header (configs, parameter
// manifest, decoder hash) followed by little-endian raw float32 payloads.
// The decoder hash stored at save time is re-verified on every load.

#include <optional>
#include <string>

#include "dki/model.hpp"
#include "dki/tensor.hpp"

namespace dki {

struct Checkpoint {
  DecoderModel decoder;
  std::optional<EncoderBank> bank;
  std::optional<AdamState> adam;
  uint64_t decoder_hash = 0;
};

void save_checkpoint(const std::string& path, const DecoderModel& decoder,
                     const EncoderBank* bank = nullptr,
                     const AdamState* adam = nullptr);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace dki
