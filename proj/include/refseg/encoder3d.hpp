#pragma once

#include <optional>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// Tokens laid out as [B, D_t * H_t * W_t, C] with depth-major order.
struct TokenGrid {
  Tensor tokens;
  Triple dims{0, 0, 0};

  std::size_t count() const { return dims[0] * dims[1] * dims[2]; }
};

/// [B, C, D, H, W] -> TokenGrid
TokenGrid grid_from_dense(const Tensor& dense);
/// TokenGrid -> [B, C, D, H, W]
Tensor grid_to_dense(const TokenGrid& grid);

/// Factorized patch embedding: an in-plane (1, k, k) convolution followed by a
/// depthwise (dp, 1, 1) convolution along depth.
struct PatchEmbed {
  Conv3d plane;
  Conv3d depth;
  std::size_t patch_k = 0;
  std::size_t depth_patch = 0;

  static PatchEmbed create(ParamStore& ps, Init& init, const std::string& name, const EncoderConfig& cfg);
};

TokenGrid patch_embed(const Tensor& volume, const PatchEmbed& pe);

/// Adds hw_table[h, w] (frozen, [H_max, W_max, C]) and d_table[d]
/// (trainable, [D_max, C]) to every token.
TokenGrid position_encode(const TokenGrid& grid, const Tensor& hw_table, const Tensor& d_table);

/// Residual adapter: X + GELU(DWConv3d(X W_down + b_down)) W_up + b_up.
struct Adapter {
  Linear down;
  Conv3d dw;
  Linear up;

  static Adapter create(ParamStore& ps, Init& init, const std::string& name, std::size_t dim, std::size_t rank, std::size_t kernel);
};

Tensor adapter_apply(const Tensor& x, const Adapter& adapter, const Triple& grid_dims);

/// Pre-norm block: windowed self-attention, adapter, MLP.
struct EncoderBlock {
  LayerNorm norm1;
  MultiHeadAttention attn;
  std::optional<Adapter> adapter;
  LayerNorm norm2;
  Mlp mlp;
  Triple window{4, 4, 4};

  static EncoderBlock create(ParamStore& ps, Init& init, const std::string& name, const EncoderConfig& cfg);
};

/// Self-attention restricted to non-overlapping 3D windows (clipped to the
/// grid). Grids that do not tile are zero-padded, padded keys are masked out
/// and the result is cropped back.
Tensor window_attention(const Tensor& x, const Triple& grid_dims, const Triple& window, const MultiHeadAttention& attn);

TokenGrid attention_block(const TokenGrid& grid, const EncoderBlock& block);

/// Two 3D convolutions: 1x1x1 to C_b, then a C_b -> C_b convolution.
struct Bottleneck {
  Conv3d reduce;
  Conv3d mix;

  static Bottleneck create(ParamStore& ps, Init& init, const std::string& name, const EncoderConfig& cfg);
  /// Sets both convolutions to the identity map (needs C_b == C, kernel 1 or odd).
  void set_identity();
};

Tensor bottleneck(const TokenGrid& grid, const Bottleneck& b);

/// Everything the rest of the model reads from one encoder pass.
struct EncoderTrace {
  std::vector<TokenGrid> stages;  // output of each stage, in order
  Tensor embedding;               // [B, C_b, D_t, H_t, W_t]
  Triple grid{0, 0, 0};
};

class Encoder3d {
 public:
  Encoder3d() = default;
  Encoder3d(ParamStore& ps, Init& init, const EncoderConfig& cfg, const std::string& name = "encoder");

  EncoderTrace forward(const Tensor& volume) const;

  const EncoderConfig& config() const { return cfg_; }
  PatchEmbed& patch() { return patch_; }
  std::vector<EncoderBlock>& blocks() { return blocks_; }
  Bottleneck& neck() { return neck_; }
  const Tensor& hw_table() const { return hw_table_; }
  const Tensor& d_table() const { return d_table_; }

 private:
  EncoderConfig cfg_;
  PatchEmbed patch_;
  Tensor hw_table_;
  Tensor d_table_;
  std::vector<EncoderBlock> blocks_;
  Bottleneck neck_;
};

}  // namespace refseg
