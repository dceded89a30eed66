#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "refseg/data.hpp"
#include "refseg/nn.hpp"
#include "refseg/tensor.hpp"

namespace refseg {

enum class VolumeType : std::uint8_t { Mask = 0, Float = 1 };

/// Contents of a .v3d file. `data` is [D, H, W].
struct Volume3d {
  Tensor data;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  VolumeType type = VolumeType::Float;
};

/// Layout (little-endian): "V3D1", u8 type, 3 x u32 dims (D, H, W),
/// 3 x f32 spacing, then the row-major payload (u8 or f32).
void write_volume(const std::string& path, const Tensor& data, const std::array<float, 3>& spacing, VolumeType type);
Volume3d read_volume(const std::string& path);

std::vector<std::uint8_t> encode_volume(const Tensor& data, const std::array<float, 3>& spacing, VolumeType type);
Volume3d decode_volume(const std::vector<std::uint8_t>& bytes);

/// Layout (little-endian): "RSCK", u32 version, u32 tensor count, then per
/// tensor: u32 name length + name, u8 frozen, u8 origin, u32 rank,
/// rank x u64 extents, raw f64 values; finally u32 length + config text.
struct Checkpoint {
  std::vector<Parameter> params;
  std::string config_text;
};

void write_checkpoint(const std::string& path, const ParamStore& params, const std::string& config_text);
Checkpoint read_checkpoint(const std::string& path);
/// Copies checkpoint values into `params`; names, tags and shapes must match.
void load_checkpoint(ParamStore& params, const Checkpoint& ckpt);

/// On-disk dataset: images/<id>.v3d (float), masks/<id>.v3d (mask) and
/// cases.jsonl with one {"id", "prompt", "target", "classes"} object per case.
struct CaseRecord {
  std::string id;
  std::string prompt;
  std::string target;
  std::vector<std::string> classes;
};

std::string case_id(std::size_t index);
void write_dataset(const std::string& dir, const std::vector<VolumeSample>& samples);
std::vector<CaseRecord> read_cases(const std::string& path);
/// Loads every case; labels mark only the referred object.
std::vector<VolumeSample> read_dataset(const std::string& dir);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace refseg
