#include "refseg/maskdec.hpp"

#include "refseg/errors.hpp"

namespace refseg {

TwoWayLayer TwoWayLayer::create(ParamStore& ps, Init& init, const std::string& name, std::size_t dim, const DecoderConfig& cfg) {
  const auto tag = ParamTag::new_3d();
  TwoWayLayer l;
  l.tok_norm1 = LayerNorm::create(ps, name + ".tok_norm1", dim, tag);
  l.self_attn = MultiHeadAttention::create(ps, init, name + ".self_attn", dim, cfg.attn_dim, cfg.heads, tag);
  l.tok_norm2 = LayerNorm::create(ps, name + ".tok_norm2", dim, tag);
  l.img_norm2 = LayerNorm::create(ps, name + ".img_norm2", dim, tag);
  l.tok_to_img = MultiHeadAttention::create(ps, init, name + ".tok_to_img", dim, cfg.attn_dim, cfg.heads, tag);
  l.tok_norm3 = LayerNorm::create(ps, name + ".tok_norm3", dim, tag);
  l.mlp = Mlp::create(ps, init, name + ".mlp", dim, cfg.mlp_dim, dim, tag);
  l.img_norm4 = LayerNorm::create(ps, name + ".img_norm4", dim, tag);
  l.tok_norm4 = LayerNorm::create(ps, name + ".tok_norm4", dim, tag);
  l.img_to_tok = MultiHeadAttention::create(ps, init, name + ".img_to_tok", dim, cfg.attn_dim, cfg.heads, tag);
  return l;
}

void TwoWayLayer::zero_outputs() {
  self_attn.out.set_zero();
  tok_to_img.out.set_zero();
  mlp.fc2.set_zero();
  img_to_tok.out.set_zero();
}

Tensor decode_tokens(const Tensor& image_embedding, const CrossModalPrompt& prompt, const std::vector<TwoWayLayer>& layers) {
  if (image_embedding.shape() != prompt.dense.shape()) {
    throw DimensionError("dense prompt " + shape_str(prompt.dense.shape()) + " does not match image embedding " +
                         shape_str(image_embedding.shape()));
  }
  TokenGrid img = grid_from_dense(add(image_embedding, prompt.dense));
  Tensor x = img.tokens;
  Tensor t = prompt.sparse;
  if (t.size(0) != x.size(0) || t.size(2) != x.size(2)) {
    throw DimensionError("sparse prompt " + shape_str(t.shape()) + " does not match image tokens " + shape_str(x.shape()));
  }
  for (const auto& l : layers) {
    Tensor h = l.tok_norm1(t);
    t = add(t, l.self_attn(h, h, h));
    Tensor xi = l.img_norm2(x);
    t = add(t, l.tok_to_img(l.tok_norm2(t), xi, xi));
    t = add(t, l.mlp(l.tok_norm3(t)));
    Tensor tk = l.tok_norm4(t);
    x = add(x, l.img_to_tok(l.img_norm4(x), tk, tk));
  }
  return grid_to_dense({x, img.dims});
}

Tensor progressive_upsample(const Tensor& features, const std::vector<Tensor>& skips, const Upsampler& up) {
  if (up.mlam && skips.size() != up.layers.size()) {
    throw DimensionError(std::to_string(skips.size()) + " skip features for " + std::to_string(up.layers.size()) + " upsampling layers");
  }
  Tensor x = features;
  for (std::size_t i = 0; i < up.layers.size(); ++i) {
    const auto& layer = up.layers[i];
    x = gelu(layer.up(x));
    if (up.mlam) {
      Tensor s = (*layer.skip)(skips[i]);
      if (layer.scale != Triple{1, 1, 1}) s = upsample_nearest3d(s, layer.scale);
      if (s.shape() != x.shape()) {
        throw DimensionError("skip " + std::to_string(i) + " resized to " + shape_str(s.shape()) + " but layer output is " + shape_str(x.shape()));
      }
      x = add(x, s);
    }
  }
  return x;
}

Tensor final_fuse(const Tensor& upsampled, const Tensor& original, const FinalFuse& fuse) {
  if (!fuse.with_input) return fuse.conv(upsampled);
  if (upsampled.dim() != 5 || original.dim() != 5 || upsampled.size(0) != original.size(0)) {
    throw DimensionError("cannot fuse " + shape_str(upsampled.shape()) + " with " + shape_str(original.shape()));
  }
  const char* axis[3] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a) {
    if (upsampled.size(2 + a) != original.size(2 + a)) {
      throw DimensionError(std::string(axis[a]) + " mismatch in final fuse: " + std::to_string(upsampled.size(2 + a)) + " vs " +
                           std::to_string(original.size(2 + a)));
    }
  }
  return fuse.conv(concat({upsampled, original}, 1));
}

std::vector<Triple> upsample_plan(const Triple& factor, std::size_t layers) {
  std::vector<Triple> plan(layers);
  for (int a = 0; a < 3; ++a) {
    const auto s = upsample_strides(factor[a], layers);
    std::size_t prod = 1;
    for (std::size_t i = 0; i < layers; ++i) {
      plan[i][a] = s[i];
      prod *= s[i];
    }
    if (prod != factor[a]) throw ConfigError("upsampling strides do not multiply to the downsampling factor " + std::to_string(factor[a]));
  }
  return plan;
}

MaskDecoder::MaskDecoder(ParamStore& ps, Init& init, const DecoderConfig& cfg, std::size_t embed_dim, std::size_t skip_dim,
                         std::size_t in_channels, const Triple& factor, const std::string& name)
    : cfg_(cfg) {
  if (cfg.channels.size() != cfg.num_upsample_layers) throw ConfigError("decoder.channels needs one entry per upsampling layer");
  for (std::size_t i = 0; i < cfg.transformer_layers; ++i)
    layers_.push_back(TwoWayLayer::create(ps, init, name + ".twoway" + std::to_string(i), embed_dim, cfg));

  const auto plan = upsample_plan(factor, cfg.num_upsample_layers);
  up_.mlam = cfg.mlam_enabled;
  std::size_t in = embed_dim;
  Triple scale{1, 1, 1};
  for (std::size_t i = 0; i < plan.size(); ++i) {
    ConvSpec spec;
    spec.transposed = true;
    for (int a = 0; a < 3; ++a) {
      spec.stride[a] = plan[i][a];
      spec.kernel[a] = plan[i][a] > 1 ? plan[i][a] : 3;
      spec.padding[a] = plan[i][a] > 1 ? 0 : 1;
      scale[a] *= plan[i][a];
    }
    UpsampleLayer layer;
    const std::string ln = name + ".up" + std::to_string(i);
    layer.up = Conv3d::create(ps, init, ln, in, cfg.channels[i], spec, ParamTag::new_3d());
    if (cfg.mlam_enabled) layer.skip = Conv3d::create(ps, init, ln + ".skip", skip_dim, cfg.channels[i], ConvSpec{}, ParamTag::new_3d());
    layer.scale = scale;
    up_.layers.push_back(layer);
    in = cfg.channels[i];
  }
  ConvSpec fs;
  fs.kernel = {3, 3, 3};
  fs.padding = {1, 1, 1};
  fuse_.with_input = cfg.fuse_with_input;
  fuse_.conv = Conv3d::create(ps, init, name + ".fuse", in + (cfg.fuse_with_input ? in_channels : 0), 1, fs, ParamTag::new_3d());
}

Tensor MaskDecoder::forward(const Tensor& image_embedding, const CrossModalPrompt& prompt, const std::vector<TokenGrid>& stages,
                            const Tensor& original) const {
  const Tensor feats = decode_tokens(image_embedding, prompt, layers_);
  std::vector<Tensor> skips;
  if (up_.mlam) {
    if (stages.size() != up_.layers.size()) {
      throw DimensionError(std::to_string(stages.size()) + " encoder stages for " + std::to_string(up_.layers.size()) + " skip inputs");
    }
    for (std::size_t i = 0; i < stages.size(); ++i) skips.push_back(grid_to_dense(stages[stages.size() - 1 - i]));
  }
  return final_fuse(progressive_upsample(feats, skips, up_), original, fuse_);
}

}  // namespace refseg
