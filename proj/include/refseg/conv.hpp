#pragma once

#include <array>
#include <cstddef>

#include "refseg/tensor.hpp"

namespace refseg {

using Triple = std::array<std::size_t, 3>;

/// Geometry of a 3D convolution. Zero padding.
///
/// Weight layouts follow the usual convention:
///   forward    [C_out, C_in / groups, k_d, k_h, k_w]
///   transposed [C_in, C_out / groups, k_d, k_h, k_w]
struct ConvSpec {
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  std::size_t groups = 1;
  bool transposed = false;
};

/// Output spatial extent along each axis, or DimensionError naming the axis.
Triple conv3d_output_dims(const Triple& input_dims, const ConvSpec& spec);

/// Expected weight shape for a layer mapping `in_channels` to `out_channels`.
Shape conv3d_weight_shape(std::size_t in_channels, std::size_t out_channels, const ConvSpec& spec);

/// input [B, C_in, D, H, W] -> [B, C_out, D', H', W']. `bias` may be undefined.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);

/// 2D convolution on [B, C, H, W] (kernel/stride/padding use the h,w entries).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec);

/// 1D convolution on [B, C, L] (uses the w entries).
Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec);

}  // namespace refseg
