#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refseg/conv.hpp"

namespace refseg {

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::size_t embed_dim = 64;  // C
  std::size_t patch_k = 4;     // in-plane patch extent (k)
  std::size_t depth_patch = 4;
  std::size_t num_stages = 4;  // N
  std::size_t blocks_per_stage = 1;
  Triple window{4, 4, 4};
  bool window_shift = false;  // reserved; shifted windows are not implemented
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  bool use_adapters = true;
  std::size_t adapter_rank = 8;  // N'
  std::size_t adapter_kernel = 3;
  Triple max_grid{8, 8, 8};  // positional table extents (d, h, w)
  std::size_t bottleneck_dim = 64;
  std::size_t bottleneck_kernel = 1;
};

struct TextConfig {
  std::string vocab;  // empty: built-in vocabulary
  std::size_t embed_dim = 32;  // C_e
  std::size_t max_len = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::string pooling = "mean";  // mean | eos
  bool frozen = true;
};

struct CrossModalConfig {
  bool use_text = true;
  bool use_projector = true;
  std::size_t projector_hidden = 64;
  std::vector<std::size_t> stages{1, 2, 3, 4};  // 1-based encoder stages feeding cross-attention
  std::size_t heads = 1;
  std::size_t sparse_tokens = 4;  // S
};

struct DecoderConfig {
  std::size_t num_upsample_layers = 4;
  std::size_t transformer_layers = 2;
  std::size_t heads = 4;
  std::size_t attn_dim = 32;
  std::size_t mlp_dim = 64;
  std::vector<std::size_t> channels{32, 16, 8, 8};
  bool mlam_enabled = true;
  bool fuse_with_input = true;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 1;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string schedule = "linear";
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 10;
  std::size_t max_steps = 0;  // 0: no cap
  std::vector<std::string> augment{"flip", "rotate90", "erase", "scale-intensity", "contrast", "brightness"};
  Triple patch{32, 32, 32};
};

struct DataConfig {
  Triple dims{32, 32, 32};
  std::vector<std::string> classes{"sphere", "cube"};
  std::size_t samples = 200;
  double min_fraction = 0.01;
  double max_fraction = 0.20;
};

struct ModelConfig {
  EncoderConfig encoder;
  TextConfig text;
  CrossModalConfig crossmodal;
  DecoderConfig decoder;
  TrainConfig train;
  DataConfig data;

  /// Every violated invariant, one message each (empty when valid).
  std::vector<std::string> violations() const;
  /// Throws ConfigError listing all violations.
  void validate() const;

  bool operator==(const ModelConfig&) const;
};

/// Parses `[section]` headers and `key = value` lines. Missing keys keep
/// their defaults; unknown keys and malformed values raise ConfigError.
ModelConfig parse_config(const std::string& text);
ModelConfig load_config(const std::string& path);
std::string serialize_config(const ModelConfig& config);

/// Per-layer upsampling strides for one axis whose encoder downsampling
/// factor is `factor`; the product of the result equals `factor`.
std::vector<std::size_t> upsample_strides(std::size_t factor, std::size_t layers);

}  // namespace refseg
