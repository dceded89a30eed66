#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "refseg/encoder3d.hpp"
#include "refseg/errors.hpp"
#include "refseg/grad_check.hpp"
#include "refseg/model.hpp"

using namespace refseg;

namespace {

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.bottleneck_dim = 16;
  c.patch_k = 2;
  c.depth_patch = 2;
  c.num_heads = 2;
  c.adapter_rank = 4;
  c.window = {2, 2, 2};
  c.max_grid = {4, 4, 4};
  return c;
}

Tensor random_tensor(Shape s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(s), rng, sd);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// Token index inside a [B, T, C] grid tensor.
std::size_t flat(const Triple& g, std::size_t d, std::size_t h, std::size_t w) { return (d * g[1] + h) * g[2] + w; }

// Runs global attention separately on each (clipped) window and scatters
// the results back.
Tensor per_window_oracle(const Tensor& x, const Triple& g, const Triple& win, const MultiHeadAttention& attn) {
  const std::size_t B = x.size(0), C = x.size(2);
  Tensor y(x.shape());
  for (std::size_t d0 = 0; d0 < g[0]; d0 += win[0])
    for (std::size_t h0 = 0; h0 < g[1]; h0 += win[1])
      for (std::size_t w0 = 0; w0 < g[2]; w0 += win[2]) {
        std::vector<std::size_t> idx;
        for (std::size_t d = d0; d < std::min(g[0], d0 + win[0]); ++d)
          for (std::size_t h = h0; h < std::min(g[1], h0 + win[1]); ++h)
            for (std::size_t w = w0; w < std::min(g[2], w0 + win[2]); ++w) idx.push_back(flat(g, d, h, w));
        Tensor sub({B, idx.size(), C});
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < idx.size(); ++t)
            for (std::size_t c = 0; c < C; ++c) sub.at({b, t, c}) = x.at({b, idx[t], c});
        const Tensor out = attn(sub, sub, sub);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < idx.size(); ++t)
            for (std::size_t c = 0; c < C; ++c) y.at({b, idx[t], c}) = out.at({b, t, c});
      }
  return y;
}

}  // namespace

TEST(PatchEmbed, GridArithmetic) {
  ParamStore ps;
  Init init(1);
  EncoderConfig c;
  const PatchEmbed pe = PatchEmbed::create(ps, init, "pe", c);
  const TokenGrid g = patch_embed(random_tensor({1, 1, 8, 8, 8}, 2), pe);
  EXPECT_EQ(g.dims, (Triple{2, 2, 2}));
  EXPECT_EQ(g.count(), 8u);
  EXPECT_EQ(g.tokens.shape(), (Shape{1, 8, c.embed_dim}));
}

TEST(PatchEmbed, ZeroVolumeZeroBiasGivesZeroTokens) {
  ParamStore ps;
  Init init(1);
  PatchEmbed pe = PatchEmbed::create(ps, init, "pe", EncoderConfig{});
  for (auto& v : pe.plane.b.data()) v = 0.0;
  const TokenGrid g = patch_embed(Tensor::zeros({1, 1, 8, 8, 8}), pe);
  for (double v : g.tokens.data()) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, DiracDepthKernelEqualsPerSliceEmbedding) {
  ParamStore ps;
  Init init(3);
  EncoderConfig c;
  c.in_channels = 2;
  c.embed_dim = 8;
  PatchEmbed pe = PatchEmbed::create(ps, init, "pe", c);
  const std::size_t dp = c.depth_patch, k = c.patch_k, centre = dp / 2;
  for (std::size_t o = 0; o < c.embed_dim; ++o)
    for (std::size_t j = 0; j < dp; ++j) pe.depth.w.at({o, 0, j, 0, 0}) = j == centre ? 1.0 : 0.0;
  const Tensor x = random_tensor({1, 2, 8, 8, 12}, 4);
  const TokenGrid g = patch_embed(x, pe);
  ASSERT_EQ(g.dims, (Triple{2, 2, 3}));
  double err = 0.0;
  for (std::size_t td = 0; td < 2; ++td)
    for (std::size_t th = 0; th < 2; ++th)
      for (std::size_t tw = 0; tw < 3; ++tw)
        for (std::size_t o = 0; o < c.embed_dim; ++o) {
          // 2D k x k embedding of slice td * dp + centre
          double ref = pe.plane.b.data()[o];
          for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t b = 0; b < k; ++b) ref += x.at({0, i, td * dp + centre, th * k + a, tw * k + b}) * pe.plane.w.at({o, i, 0, a, b});
          err = std::max(err, std::abs(ref - g.tokens.at({0, flat(g.dims, td, th, tw), o})));
        }
  EXPECT_LE(err, 1e-12);
}

TEST(PatchEmbed, IndivisibleExtentNamesTheAxis) {
  ParamStore ps;
  Init init(1);
  const PatchEmbed pe = PatchEmbed::create(ps, init, "pe", EncoderConfig{});
  try {
    patch_embed(Tensor::zeros({1, 1, 8, 6, 8}), pe);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("multiple of 4"), std::string::npos) << e.what();
  }
}

TEST(PositionEncode, AdditiveConstruction) {
  const std::size_t C = 5;
  const Triple g{3, 2, 2};
  const Tensor hw = random_tensor({4, 4, C}, 1), dt = random_tensor({4, C}, 2);
  const TokenGrid zero{Tensor::zeros({1, g[0] * g[1] * g[2], C}), g};

  // Zero grid: the broadcast sum of both tables.
  const TokenGrid z = position_encode(zero, hw, dt);
  for (std::size_t d = 0; d < g[0]; ++d)
    for (std::size_t h = 0; h < g[1]; ++h)
      for (std::size_t w = 0; w < g[2]; ++w)
        for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(z.tokens.at({0, flat(g, d, h, w), c}), hw.at({h, w, c}) + dt.at({d, c}));

  // Tokens differing only in d differ by d_table[d1] - d_table[d2].
  for (std::size_t c = 0; c < C; ++c)
    EXPECT_NEAR(z.tokens.at({0, flat(g, 2, 1, 0), c}) - z.tokens.at({0, flat(g, 0, 1, 0), c}), dt.at({2, c}) - dt.at({0, c}), 1e-15);

  // Zero depth table: only the in-plane encoding remains.
  const TokenGrid x{random_tensor({1, g[0] * g[1] * g[2], C}, 3), g};
  const TokenGrid p = position_encode(x, hw, Tensor::zeros({4, C}));
  for (std::size_t d = 0; d < g[0]; ++d)
    for (std::size_t h = 0; h < g[1]; ++h)
      for (std::size_t w = 0; w < g[2]; ++w)
        for (std::size_t c = 0; c < C; ++c)
          EXPECT_EQ(p.tokens.at({0, flat(g, d, h, w), c}), x.tokens.at({0, flat(g, d, h, w), c}) + hw.at({h, w, c}));
}

TEST(PositionEncode, GridLargerThanTableIsAnError) {
  const TokenGrid g{Tensor::zeros({1, 5 * 1 * 1, 3}), {5, 1, 1}};
  EXPECT_THROW(position_encode(g, Tensor::zeros({4, 4, 3}), Tensor::zeros({4, 3})), ConfigError);
}

class WindowAttention : public ::testing::Test {
 protected:
  ParamStore ps;
  Init init{7};
  MultiHeadAttention attn = MultiHeadAttention::create(ps, init, "attn", 8, 8, 2, ParamTag::new_3d());
};

TEST_F(WindowAttention, WindowCoveringGridEqualsGlobal) {
  for (const Triple g : {Triple{2, 2, 2}, Triple{3, 2, 4}, Triple{1, 3, 3}, Triple{3, 3, 3}}) {
    const Tensor x = random_tensor({2, g[0] * g[1] * g[2], 8}, g[0] * 100 + g[1] * 10 + g[2]);
    for (const Triple win : {Triple{4, 4, 4}, g}) EXPECT_LE(max_abs_diff(window_attention(x, g, win, attn), attn(x, x, x)), 1e-8);
  }
}

TEST_F(WindowAttention, MatchesPerWindowOracleIncludingPartialWindows) {
  for (const Triple g : {Triple{4, 2, 2}, Triple{3, 2, 2}, Triple{3, 5, 2}, Triple{1, 1, 3}}) {
    const Tensor x = random_tensor({2, g[0] * g[1] * g[2], 8}, 11 + g[1]);
    const Triple win{2, 2, 2};
    EXPECT_LE(max_abs_diff(window_attention(x, g, win, attn), per_window_oracle(x, g, win, attn)), 1e-10) << shape_str({g[0], g[1], g[2]});
  }
}

TEST_F(WindowAttention, SingleTokenAttendsToItself) {
  const Tensor x = random_tensor({1, 1, 8}, 5);
  const Tensor y = window_attention(x, {1, 1, 1}, {4, 4, 4}, attn);
  EXPECT_LE(max_abs_diff(y, attn.out(attn.v(x))), 1e-14);
}

TEST_F(WindowAttention, ShapePreserved) {
  const Tensor x = random_tensor({1, 27, 8}, 6);
  EXPECT_EQ(window_attention(x, {3, 3, 3}, {3, 3, 3}, attn).shape(), (Shape{1, 27, 8}));
}

TEST_F(WindowAttention, PermutationInsideOneWindowIsEquivariant) {
  const Triple g{4, 2, 2}, win{2, 2, 2};
  const Tensor x = random_tensor({1, 16, 8}, 9);
  // First window holds tokens with d in {0, 1}: flat indices 0..7.
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(3);
  std::shuffle(perm.begin(), perm.begin() + 8, rng);
  Tensor xp(x.shape());
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t c = 0; c < 8; ++c) xp.at({0, t, c}) = x.at({0, perm[t], c});
  const Tensor y = window_attention(x, g, win, attn), yp = window_attention(xp, g, win, attn);
  double err = 0.0;
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t c = 0; c < 8; ++c) err = std::max(err, std::abs(yp.at({0, t, c}) - y.at({0, perm[t], c})));
  EXPECT_LE(err, 1e-12);
}

TEST(Adapter, ParameterCountForDefaultWidth) {
  ParamStore ps;
  Init init(1);
  Adapter::create(ps, init, "a", 64, 8, 3);
  std::size_t n = 0;
  for (const auto& p : ps.all()) {
    n += p.value.numel();
    EXPECT_FALSE(p.tag.frozen);
    EXPECT_EQ(p.tag.origin, Origin::Adapter);
  }
  EXPECT_EQ(n, 1320u);
  EXPECT_LT(n, 64u * 64u);
}

TEST(Adapter, ZeroUpProjectionIsIdentity) {
  ParamStore ps;
  Init init(2);
  Adapter a = Adapter::create(ps, init, "a", 64, 8, 3);
  const Tensor x = random_tensor({2, 27, 64}, 3);
  const Tensor y = adapter_apply(x, a, {3, 3, 3});
  EXPECT_EQ(y.shape(), (Shape{2, 27, 64}));
  EXPECT_TRUE(bit_identical(y, x));

  // Once W_up is non-zero the adapter contributes.
  a.up.w.data()[0] = 0.5;
  EXPECT_FALSE(bit_identical(adapter_apply(x, a, {3, 3, 3}), x));
}

TEST(Adapter, GridMismatchIsAnError) {
  ParamStore ps;
  Init init(2);
  const Adapter a = Adapter::create(ps, init, "a", 16, 4, 3);
  EXPECT_THROW(adapter_apply(Tensor::zeros({1, 8, 16}), a, {3, 3, 3}), DimensionError);
}

TEST(Encoder, ZeroAdaptersMatchAdapterFreeEncoderBitForBit) {
  EncoderConfig with = small_encoder(), without = small_encoder();
  without.use_adapters = false;
  ParamStore ps1, ps2;
  Init i1(5), i2(5);
  const Encoder3d e1(ps1, i1, with), e2(ps2, i2, without);
  EXPECT_GT(ps1.all().size(), ps2.all().size());
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor v = random_tensor({1, 1, 8, 8, 8}, 100 + s);
    const EncoderTrace a = e1.forward(v), b = e2.forward(v);
    ASSERT_EQ(a.stages.size(), b.stages.size());
    for (std::size_t k = 0; k < a.stages.size(); ++k) EXPECT_TRUE(bit_identical(a.stages[k].tokens, b.stages[k].tokens));
    EXPECT_TRUE(bit_identical(a.embedding, b.embedding));
  }
}

TEST(Encoder, TraceShapes) {
  const EncoderConfig c = small_encoder();
  ParamStore ps;
  Init init(1);
  const Encoder3d e(ps, init, c);
  const EncoderTrace t = e.forward(random_tensor({1, 1, 8, 4, 8}, 2));
  EXPECT_EQ(t.grid, (Triple{4, 2, 4}));
  ASSERT_EQ(t.stages.size(), c.num_stages);
  for (const auto& s : t.stages) EXPECT_EQ(s.tokens.shape(), (Shape{1, 32, c.embed_dim}));
  EXPECT_EQ(t.embedding.shape(), (Shape{1, c.bottleneck_dim, 4, 2, 4}));
}

TEST(Bottleneck, IdentityInitReproducesTokens) {
  ParamStore ps;
  Init init(1);
  EncoderConfig c;
  Bottleneck b = Bottleneck::create(ps, init, "neck", c);
  b.set_identity();
  const TokenGrid g{random_tensor({1, 8, 64}, 3), {2, 2, 2}};
  const Tensor y = bottleneck(g, b);
  EXPECT_EQ(y.shape(), (Shape{1, c.bottleneck_dim, 2, 2, 2}));
  EXPECT_EQ(max_abs_diff(y, grid_to_dense(g)), 0.0);
}

TEST(Bottleneck, GradientsMatchFiniteDifferences) {
  ParamStore ps;
  Init init(2);
  EncoderConfig c = small_encoder();
  c.bottleneck_kernel = 3;
  Bottleneck b = Bottleneck::create(ps, init, "neck", c);
  const TokenGrid g{random_tensor({1, 8, 16}, 3), {2, 2, 2}};
  const Tensor r = random_tensor({1, 16, 2, 2, 2}, 4);
  NamedTensors params;
  for (auto& p : ps.all()) params.emplace_back(p.name, p.value);
  GradCheckOptions o;
  o.tolerance = 1e-5;
  o.max_coords = 40;
  const auto rep = grad_check([&] { return sum(mul(bottleneck(g, b), r)); }, params, o);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Encoder, FrozenParametersSurviveAnOptimizerStep) {
  ModelConfig cfg;
  cfg.encoder = small_encoder();
  cfg.text.embed_dim = 8;
  cfg.decoder.channels = {8, 8, 4, 4};
  cfg.decoder.attn_dim = 8;
  cfg.decoder.heads = 2;
  cfg.crossmodal.projector_hidden = 8;
  cfg.data.dims = {8, 8, 8};
  cfg.train.patch = {8, 8, 8};
  Model m(cfg);
  std::vector<Tensor> before;
  for (const auto& p : m.params().all()) before.push_back(p.value.clone());
  AdamW opt(m.params().trainable(), 0.9, 0.999, 1e-8, 0.0);
  Tensor loss = segmentation_loss(m.forward(random_tensor({1, 1, 8, 8, 8}, 1), "segment the sphere"), Tensor::ones({1, 1, 8, 8, 8}));
  loss.backward();
  opt.step(1e-3);
  std::size_t frozen = 0, moved = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const Parameter& p = m.params().all()[i];
    if (p.tag.frozen) {
      ++frozen;
      EXPECT_TRUE(bit_identical(p.value, before[i])) << p.name;
      continue;
    }
    bool nonzero = false;
    if (p.value.has_grad())
      for (double gv : p.value.grad()) nonzero = nonzero || gv != 0.0;
    if (nonzero) {
      ++moved;
      EXPECT_FALSE(bit_identical(p.value, before[i])) << p.name;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}
