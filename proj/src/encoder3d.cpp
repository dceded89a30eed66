#include "refseg/encoder3d.hpp"

#include <algorithm>

#include "refseg/errors.hpp"

namespace refseg {

TokenGrid grid_from_dense(const Tensor& dense) {
  if (dense.dim() != 5) throw DimensionError("expected [B, C, D, H, W], got " + shape_str(dense.shape()));
  const Shape& s = dense.shape();
  TokenGrid g;
  g.dims = {s[2], s[3], s[4]};
  g.tokens = reshape(permute(dense, {0, 2, 3, 4, 1}), {s[0], s[2] * s[3] * s[4], s[1]});
  return g;
}

Tensor grid_to_dense(const TokenGrid& grid) {
  const Shape& s = grid.tokens.shape();
  if (s.size() != 3 || s[1] != grid.count()) {
    throw DimensionError("token count " + std::to_string(s.size() == 3 ? s[1] : 0) + " does not match grid " +
                         shape_str({grid.dims[0], grid.dims[1], grid.dims[2]}));
  }
  return permute(reshape(grid.tokens, {s[0], grid.dims[0], grid.dims[1], grid.dims[2], s[2]}), {0, 4, 1, 2, 3});
}

PatchEmbed PatchEmbed::create(ParamStore& ps, Init& init, const std::string& name, const EncoderConfig& cfg) {
  PatchEmbed pe;
  pe.patch_k = cfg.patch_k;
  pe.depth_patch = cfg.depth_patch;
  ConvSpec plane;
  plane.kernel = {1, cfg.patch_k, cfg.patch_k};
  plane.stride = plane.kernel;
  pe.plane = Conv3d::create(ps, init, name + ".plane", cfg.in_channels, cfg.embed_dim, plane, ParamTag::pretrained_2d());

  ConvSpec depth;
  depth.kernel = {cfg.depth_patch, 1, 1};
  depth.stride = depth.kernel;
  depth.groups = cfg.embed_dim;
  const Shape ws = conv3d_weight_shape(cfg.embed_dim, cfg.embed_dim, depth);
  pe.depth.spec = depth;
  pe.depth.w = ps.add(name + ".depth.w", Tensor(ws, 1.0 / static_cast<double>(cfg.depth_patch)), ParamTag::new_3d());
  pe.depth.b = ps.add(name + ".depth.b", Tensor::zeros({cfg.embed_dim}), ParamTag::new_3d());
  return pe;
}

TokenGrid patch_embed(const Tensor& volume, const PatchEmbed& pe) {
  if (volume.dim() != 5) throw DimensionError("volume must be [B, C, D, H, W], got " + shape_str(volume.shape()));
  const Shape& s = volume.shape();
  const char* axis[3] = {"depth", "height", "width"};
  const std::size_t need[3] = {pe.depth_patch, pe.patch_k, pe.patch_k};
  for (int a = 0; a < 3; ++a) {
    if (s[2 + a] % need[a]) {
      throw DimensionError(std::string(axis[a]) + " extent " + std::to_string(s[2 + a]) + " must be a multiple of " +
                           std::to_string(need[a]));
    }
  }
  return grid_from_dense(pe.depth(pe.plane(volume)));
}

TokenGrid position_encode(const TokenGrid& grid, const Tensor& hw_table, const Tensor& d_table) {
  const auto [D, H, W] = grid.dims;
  if (hw_table.size(0) < H || hw_table.size(1) < W || d_table.size(0) < D) {
    throw ConfigError("positional tables " + shape_str(hw_table.shape()) + " / " + shape_str(d_table.shape()) +
                      " smaller than grid " + shape_str({D, H, W}));
  }
  const std::size_t B = grid.tokens.size(0), C = grid.tokens.size(2);
  Tensor hw = slice(slice(hw_table, 0, 0, H), 1, 0, W);      // [H, W, C]
  Tensor d = reshape(slice(d_table, 0, 0, D), {D, 1, 1, C});  // [D, 1, 1, C]
  Tensor x = reshape(grid.tokens, {B, D, H, W, C});
  x = add(add(x, hw), d);
  return {reshape(x, {B, D * H * W, C}), grid.dims};
}

Adapter Adapter::create(ParamStore& ps, Init& init, const std::string& name, std::size_t dim, std::size_t rank, std::size_t kernel) {
  Adapter a;
  a.down = Linear::create(ps, init, name + ".down", dim, rank, ParamTag::adapter());
  ConvSpec dw;
  dw.kernel = {kernel, kernel, kernel};
  dw.padding = {kernel / 2, kernel / 2, kernel / 2};
  dw.groups = rank;
  a.dw = Conv3d::create(ps, init, name + ".dw", rank, rank, dw, ParamTag::adapter());
  a.up = Linear::create(ps, init, name + ".up", rank, dim, ParamTag::adapter());
  a.up.set_zero();
  return a;
}

Tensor adapter_apply(const Tensor& x, const Adapter& adapter, const Triple& grid_dims) {
  const std::size_t T = grid_dims[0] * grid_dims[1] * grid_dims[2];
  if (x.dim() != 3 || x.size(1) != T) {
    throw DimensionError("adapter input " + shape_str(x.shape()) + " inconsistent with grid " +
                         shape_str({grid_dims[0], grid_dims[1], grid_dims[2]}));
  }
  TokenGrid h{adapter.down(x), grid_dims};
  h = grid_from_dense(adapter.dw(grid_to_dense(h)));
  return add(x, adapter.up(gelu(h.tokens)));
}

EncoderBlock EncoderBlock::create(ParamStore& ps, Init& init, const std::string& name, const EncoderConfig& cfg) {
  const auto frozen = ParamTag::pretrained_2d();
  const std::size_t C = cfg.embed_dim;
  EncoderBlock b;
  b.norm1 = LayerNorm::create(ps, name + ".norm1", C, frozen);
  b.attn = MultiHeadAttention::create(ps, init, name + ".attn", C, C, cfg.num_heads, frozen);
  if (cfg.use_adapters) b.adapter = Adapter::create(ps, init, name + ".adapter", C, cfg.adapter_rank, cfg.adapter_kernel);
  b.norm2 = LayerNorm::create(ps, name + ".norm2", C, frozen);
  b.mlp = Mlp::create(ps, init, name + ".mlp", C, C * cfg.mlp_ratio, C, frozen);
  b.window = cfg.window;
  return b;
}

Tensor window_attention(const Tensor& x, const Triple& grid_dims, const Triple& window, const MultiHeadAttention& attn) {
  const std::size_t B = x.size(0), C = x.size(2);
  Triple w, n, padded;
  bool needs_pad = false;
  for (int a = 0; a < 3; ++a) {
    if (window[a] == 0) throw ConfigError("window extents must be positive");
    w[a] = std::min(window[a], grid_dims[a]);
    n[a] = (grid_dims[a] + w[a] - 1) / w[a];
    padded[a] = n[a] * w[a];
    needs_pad |= padded[a] != grid_dims[a];
  }
  if (n[0] * n[1] * n[2] == 1 && !needs_pad) return attn(x, x, x);

  Tensor v = reshape(x, {B, grid_dims[0], grid_dims[1], grid_dims[2], C});
  for (int a = 0; a < 3; ++a)
    if (padded[a] != grid_dims[a]) v = pad(v, a + 1, 0, padded[a] - grid_dims[a]);
  v = reshape(v, {B, n[0], w[0], n[1], w[1], n[2], w[2], C});
  v = permute(v, {0, 1, 3, 5, 2, 4, 6, 7});
  const std::size_t windows = B * n[0] * n[1] * n[2];
  const std::size_t wlen = w[0] * w[1] * w[2];
  v = reshape(v, {windows, wlen, C});

  Tensor mask;
  if (needs_pad) {
    mask = Tensor::zeros({windows, 1, 1, wlen});
    auto md = mask.data();
    std::size_t widx = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n[0]; ++i)
        for (std::size_t j = 0; j < n[1]; ++j)
          for (std::size_t k = 0; k < n[2]; ++k, ++widx) {
            std::size_t t = 0;
            for (std::size_t a = 0; a < w[0]; ++a)
              for (std::size_t bb = 0; bb < w[1]; ++bb)
                for (std::size_t c = 0; c < w[2]; ++c, ++t) {
                  const bool outside = i * w[0] + a >= grid_dims[0] || j * w[1] + bb >= grid_dims[1] || k * w[2] + c >= grid_dims[2];
                  if (outside) md[widx * wlen + t] = -1e9;
                }
          }
  }

  Tensor o = attn(v, v, v, mask);
  o = reshape(o, {B, n[0], n[1], n[2], w[0], w[1], w[2], C});
  o = permute(o, {0, 1, 4, 2, 5, 3, 6, 7});
  o = reshape(o, {B, padded[0], padded[1], padded[2], C});
  for (int a = 0; a < 3; ++a)
    if (padded[a] != grid_dims[a]) o = slice(o, a + 1, 0, grid_dims[a]);
  return reshape(o, {B, grid_dims[0] * grid_dims[1] * grid_dims[2], C});
}

TokenGrid attention_block(const TokenGrid& grid, const EncoderBlock& block) {
  Tensor x = add(grid.tokens, window_attention(block.norm1(grid.tokens), grid.dims, block.window, block.attn));
  if (block.adapter) x = adapter_apply(x, *block.adapter, grid.dims);
  x = add(x, block.mlp(block.norm2(x)));
  return {x, grid.dims};
}

Bottleneck Bottleneck::create(ParamStore& ps, Init& init, const std::string& name, const EncoderConfig& cfg) {
  Bottleneck b;
  b.reduce = Conv3d::create(ps, init, name + ".reduce", cfg.embed_dim, cfg.bottleneck_dim, ConvSpec{}, ParamTag::new_3d());
  ConvSpec mix;
  const std::size_t k = cfg.bottleneck_kernel;
  mix.kernel = {k, k, k};
  mix.padding = {k / 2, k / 2, k / 2};
  b.mix = Conv3d::create(ps, init, name + ".mix", cfg.bottleneck_dim, cfg.bottleneck_dim, mix, ParamTag::new_3d());
  return b;
}

void Bottleneck::set_identity() {
  for (Conv3d* c : {&reduce, &mix}) {
    const Shape& s = c->w.shape();
    if (s[0] != s[1]) throw ConfigError("identity bottleneck needs equal channel counts");
    auto w = c->w.data();
    std::fill(w.begin(), w.end(), 0.0);
    const std::size_t kvol = s[2] * s[3] * s[4];
    const std::size_t centre = (s[2] / 2) * s[3] * s[4] + (s[3] / 2) * s[4] + s[4] / 2;
    for (std::size_t o = 0; o < s[0]; ++o) w[(o * s[1] + o) * kvol + centre] = 1.0;
    std::fill(c->b.data().begin(), c->b.data().end(), 0.0);
  }
}

Tensor bottleneck(const TokenGrid& grid, const Bottleneck& b) { return b.mix(b.reduce(grid_to_dense(grid))); }

Encoder3d::Encoder3d(ParamStore& ps, Init& init, const EncoderConfig& cfg, const std::string& name) : cfg_(cfg) {
  patch_ = PatchEmbed::create(ps, init, name + ".patch", cfg);
  const auto [Dm, Hm, Wm] = cfg.max_grid;
  Init pos = init.derive(name + ".pos");
  hw_table_ = ps.add(name + ".pos.hw", pos.normal({Hm, Wm, cfg.embed_dim}, 0.02), ParamTag::pretrained_2d());
  d_table_ = ps.add(name + ".pos.d", pos.normal({Dm, cfg.embed_dim}, 0.02), ParamTag::new_3d());
  for (std::size_t s = 0; s < cfg.num_stages; ++s)
    for (std::size_t k = 0; k < cfg.blocks_per_stage; ++k)
      blocks_.push_back(EncoderBlock::create(ps, init, name + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(k), cfg));
  neck_ = Bottleneck::create(ps, init, name + ".neck", cfg);
}

EncoderTrace Encoder3d::forward(const Tensor& volume) const {
  EncoderTrace trace;
  TokenGrid g = position_encode(patch_embed(volume, patch_), hw_table_, d_table_);
  trace.grid = g.dims;
  for (std::size_t s = 0; s < cfg_.num_stages; ++s) {
    for (std::size_t k = 0; k < cfg_.blocks_per_stage; ++k) g = attention_block(g, blocks_[s * cfg_.blocks_per_stage + k]);
    trace.stages.push_back(g);
  }
  trace.embedding = bottleneck(g, neck_);
  return trace;
}

}  // namespace refseg
