#pragma once

#include <cstdint>
#include <filesystem>

#include "ucam/config.hpp"
#include "ucam/model.hpp"

namespace ucam {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything a checkpoint file holds. extras carries named tensors outside
/// the model: optimizer moments, EMA shadow, best weights, LIN transforms
/// (lin.<speaker>). meta is free-form training state.
struct Checkpoint {
    AcousticModelConfig config;
    std::uint64_t step = 0;
    ModelParams<float> params;
    NamedTensors<float> extras;
    Json meta = Json::object();

    const Tensor<float>* extra(const std::string& name) const;
};

/// Layout: "UCAM", u32 version, u32 length + UTF-8 JSON header (config,
/// step, tensor count, meta), then per tensor: u32 name length, name, u32
/// rank, rank x u32 dims, float32 values. Little-endian throughout.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws BadMagicError, VersionMismatchError, TruncatedFileError or
/// PayloadError for damaged files and StructureError when the tensors do not
/// fit the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// load_checkpoint, then StructureError unless the stored model matches
/// expected.
Checkpoint load_checkpoint(const std::filesystem::path& path, const AcousticModelConfig& expected);

}  // namespace ucam
