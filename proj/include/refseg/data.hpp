#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/tensor.hpp"

namespace refseg {

/// A volume, the mask of the referred object and the referring prompt.
struct VolumeSample {
  Tensor volume;  // [C_in, D, H, W], intensities in [0, 1]
  Tensor mask;    // [D, H, W], 0/1
  std::string prompt;
  std::string target;                // referred class
  std::vector<std::uint8_t> labels;  // per voxel: 0 background, i + 1 for classes[i]
  std::vector<std::string> classes;  // classes present, in label order

  Triple dims() const { return {mask.size(0), mask.size(1), mask.size(2)}; }
};

/// Mask of one class present in the sample (all zeros when absent).
Tensor class_mask(const VolumeSample& sample, const std::string& cls);

/// Nominal intensity of a shape class before per-sample jitter and noise.
double class_intensity(const std::string& cls);

/// Each volume holds 2 or 3 non-overlapping shapes of distinct classes; the
/// prompt refers to one of them. Sample i depends only on (seed, i).
std::vector<VolumeSample> synth_dataset(std::uint64_t seed, std::size_t n, const DataConfig& spec, double noise_sigma = 0.1);
VolumeSample synth_sample(std::uint64_t seed, std::size_t index, const DataConfig& spec, double noise_sigma = 0.1);

/// Resampling to 1-unit isotropic spacing. Synthetic volumes are generated at
/// unit spacing, so this returns them unchanged; other spacings are rejected.
VolumeSample resample_isotropic(const VolumeSample& s, const std::array<double, 3>& spacing);

/// Geometric transforms hit volume, mask and labels alike.
VolumeSample flip(const VolumeSample& s, int axis);
/// Rotates by k quarter turns in the plane of two spatial axes of equal extent.
VolumeSample rotate90(const VolumeSample& s, int axis_a, int axis_b, int k);
/// Zeroes a box of the volume; mask untouched.
VolumeSample erase(const VolumeSample& s, const Triple& origin, const Triple& size);

/// Applies each listed transform with probability 1/2.
VolumeSample augment(const VolumeSample& s, std::mt19937_64& rng, const std::vector<std::string>& policy);

struct PatchSet {
  std::vector<VolumeSample> patches;
  std::vector<Triple> origins;
  std::vector<bool> foreground;
  std::string warning;  // empty unless the 1:1 split was impossible
};

/// Alternates foreground-containing and background-only crops, starting with
/// foreground. Falls back to one kind (with a warning) when the other does
/// not exist.
PatchSet sample_patches(const VolumeSample& s, const Triple& patch, std::size_t count, std::mt19937_64& rng);
VolumeSample crop(const VolumeSample& s, const Triple& origin, const Triple& size);

}  // namespace refseg
