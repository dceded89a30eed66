#pragma once

#include <optional>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/crossmodal.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// Pre-norm two-way layer: token self-attention, token-to-image attention,
/// token MLP, then image-to-token attention. Every sub-block is residual, so
/// zeroing the output projections turns the layer into the identity.
struct TwoWayLayer {
  LayerNorm tok_norm1;
  MultiHeadAttention self_attn;
  LayerNorm tok_norm2, img_norm2;
  MultiHeadAttention tok_to_img;
  LayerNorm tok_norm3;
  Mlp mlp;
  LayerNorm img_norm4, tok_norm4;
  MultiHeadAttention img_to_tok;

  static TwoWayLayer create(ParamStore& ps, Init& init, const std::string& name, std::size_t dim, const DecoderConfig& cfg);
  void zero_outputs();
};

/// Adds the dense prompt to the image embedding and runs the two-way layers
/// between the sparse prompt tokens and the image tokens.
/// Returns the updated image features [B, C, D_t, H_t, W_t].
Tensor decode_tokens(const Tensor& image_embedding, const CrossModalPrompt& prompt, const std::vector<TwoWayLayer>& layers);

struct UpsampleLayer {
  Conv3d up;                  // transposed
  std::optional<Conv3d> skip; // 1x1x1 projection of the matching encoder stage
  Triple scale{1, 1, 1};      // resolution relative to the token grid after this layer
};

struct Upsampler {
  std::vector<UpsampleLayer> layers;
  bool mlam = true;
};

/// Transposed-convolution stack with GELU; after layer i the projected skip
/// skips[i] (token-grid resolution, nearest-resized) is added when MLAM is on.
Tensor progressive_upsample(const Tensor& features, const std::vector<Tensor>& skips, const Upsampler& up);

struct FinalFuse {
  Conv3d conv;
  bool with_input = true;
};

/// Concatenates the original volume on the channel axis and maps to one
/// channel of mask logits.
Tensor final_fuse(const Tensor& upsampled, const Tensor& original, const FinalFuse& fuse);

/// Per-layer strides for a token grid downsampled by `factor` per axis.
std::vector<Triple> upsample_plan(const Triple& factor, std::size_t layers);

class MaskDecoder {
 public:
  MaskDecoder() = default;
  /// `factor` is the encoder downsampling per axis (d, h, w).
  MaskDecoder(ParamStore& ps, Init& init, const DecoderConfig& cfg, std::size_t embed_dim, std::size_t skip_dim, std::size_t in_channels,
              const Triple& factor, const std::string& name = "decoder");

  /// skips are the encoder stage outputs in stage order; they are consumed
  /// deepest-first (layer 0 takes the last stage).
  Tensor forward(const Tensor& image_embedding, const CrossModalPrompt& prompt, const std::vector<TokenGrid>& stages,
                 const Tensor& original) const;

  const DecoderConfig& config() const { return cfg_; }
  std::vector<TwoWayLayer>& transformer() { return layers_; }
  Upsampler& upsampler() { return up_; }
  FinalFuse& fuse() { return fuse_; }

 private:
  DecoderConfig cfg_;
  std::vector<TwoWayLayer> layers_;
  Upsampler up_;
  FinalFuse fuse_;
};

}  // namespace refseg
