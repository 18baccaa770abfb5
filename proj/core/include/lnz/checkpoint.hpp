#pragma once

#include <optional>
#include <string>

#include "lnz/model.hpp"

namespace lnz::checkpoint {

// File layout: magic "LNZ1", u32 version, u32 tensor count, then per
// tensor: u16 name length, UTF-8 name, u8 rank, u64 dims, f32 payload,
// all little-endian; a JSON meta block with the model/mixer configs and
// the training cursor runs to end of file.

inline constexpr char kMagic[4] = {'L', 'N', 'Z', '1'};
inline constexpr uint32_t kVersion = 1;

void save(const std::string& path, const model::Model& m);

// Two-pass load: the meta block is validated (and, when `expect` is given,
// checked against it) before tensor payloads are materialized.
model::Model load(const std::string& path,
                  const std::optional<model::ModelConfig>& expect = std::nullopt);

// Reads only the meta block.
struct Meta {
    model::ModelConfig config;
    std::optional<mixer::MixerConfig> mixer;
    model::TrainingCursor cursor;
};
Meta peek(const std::string& path);

uint64_t file_hash(const std::string& path);

}  // namespace lnz::checkpoint
