#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "refseg/errors.hpp"
#include "refseg/grad_check.hpp"
#include "refseg/maskdec.hpp"

using namespace refseg;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(s), rng, sd);
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

DecoderConfig small_decoder() {
  DecoderConfig c;
  c.heads = 2;
  c.attn_dim = 8;
  c.mlp_dim = 16;
  c.channels = {8, 8, 4, 4};
  return c;
}

CrossModalPrompt prompt_for(const Tensor& fused, const Triple& grid, std::size_t S, std::uint64_t seed) {
  return to_prompt(fused, grid, random_tensor({S, fused.size(2)}, seed));
}

std::vector<TokenGrid> random_stages(std::size_t n, std::size_t C, const Triple& g, std::uint64_t seed) {
  std::vector<TokenGrid> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back({random_tensor({1, g[0] * g[1] * g[2], C}, seed + i), g});
  return s;
}

std::vector<Tensor> dense_skips(const std::vector<TokenGrid>& stages) {
  std::vector<Tensor> out;
  for (auto it = stages.rbegin(); it != stages.rend(); ++it) out.push_back(grid_to_dense(*it));
  return out;
}

}  // namespace

TEST(DecodeTokens, ZeroPromptAndZeroedOutputsIsIdentity) {
  ParamStore ps;
  Init init(1);
  std::vector<TwoWayLayer> layers;
  for (int i = 0; i < 2; ++i) layers.push_back(TwoWayLayer::create(ps, init, "l" + std::to_string(i), 16, small_decoder()));
  for (auto& l : layers) l.zero_outputs();
  const Triple g{2, 2, 2};
  const Tensor emb = random_tensor({1, 16, 2, 2, 2}, 2);
  const CrossModalPrompt p = to_prompt(Tensor::zeros({1, 8, 16}), g, Tensor::zeros({3, 16}));
  const Tensor out = decode_tokens(emb, p, layers);
  EXPECT_TRUE(bit_identical(out, emb));
}

TEST(DecodeTokens, GridPreservedAndMismatchRejected) {
  ParamStore ps;
  Init init(2);
  const std::vector<TwoWayLayer> layers{TwoWayLayer::create(ps, init, "l", 16, small_decoder())};
  const Tensor emb = random_tensor({1, 16, 2, 1, 3}, 3);
  const CrossModalPrompt p = prompt_for(random_tensor({1, 6, 16}, 4), {2, 1, 3}, 2, 5);
  EXPECT_EQ(decode_tokens(emb, p, layers).shape(), emb.shape());
  const CrossModalPrompt wrong = prompt_for(random_tensor({1, 8, 16}, 4), {2, 2, 2}, 2, 5);
  EXPECT_THROW(decode_tokens(emb, wrong, layers), DimensionError);
}

TEST(DecodeTokens, GradientsThroughBothLayersMatchFiniteDifferences) {
  ParamStore ps;
  Init init(3);
  std::vector<TwoWayLayer> layers;
  for (int i = 0; i < 2; ++i) layers.push_back(TwoWayLayer::create(ps, init, "l" + std::to_string(i), 8, small_decoder()));
  Tensor emb = random_tensor({1, 8, 2, 2, 1}, 4);
  Tensor fused = random_tensor({1, 4, 8}, 5);
  emb.set_requires_grad(true);
  fused.set_requires_grad(true);
  const Tensor queries = random_tensor({2, 8}, 6), r = random_tensor({1, 8, 2, 2, 1}, 7);
  NamedTensors params{{"embedding", emb}, {"fused", fused}};
  for (auto& p : ps.all()) params.emplace_back(p.name, p.value);
  GradCheckOptions o;
  o.tolerance = 1e-5;
  o.max_coords = 6;
  const auto rep = grad_check([&] { return sum(mul(decode_tokens(emb, to_prompt(fused, {2, 2, 1}, queries), layers), r)); }, params, o);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(UpsamplePlan, StridesMultiplyToTheFactor) {
  for (std::size_t f = 1; f <= 64; ++f)
    for (std::size_t layers = 1; layers <= 5; ++layers) {
      const auto s = upsample_strides(f, layers);
      ASSERT_EQ(s.size(), layers);
      std::size_t p = 1;
      for (auto v : s) p *= v;
      EXPECT_EQ(p, f) << "factor " << f << " layers " << layers;
    }
  EXPECT_EQ(upsample_strides(16, 4), (std::vector<std::size_t>{2, 2, 2, 2}));
  EXPECT_EQ(upsample_strides(4, 4), (std::vector<std::size_t>{2, 2, 1, 1}));
  const auto plan = upsample_plan({2, 4, 4}, 4);
  EXPECT_EQ(plan[0], (Triple{2, 2, 2}));
  EXPECT_EQ(plan[1], (Triple{1, 2, 2}));
  EXPECT_EQ(plan[3], (Triple{1, 1, 1}));
}

class Upsampling : public ::testing::Test {
 protected:
  Tensor run(const Triple& factor, bool mlam, const std::vector<Tensor>* skips_override = nullptr) {
    ParamStore ps;
    Init init(4);
    DecoderConfig cfg = small_decoder();
    cfg.mlam_enabled = mlam;
    MaskDecoder dec(ps, init, cfg, 16, 8, 1, factor);
    const Tensor x = random_tensor({1, 16, 2, 2, 2}, 5);
    const std::vector<Tensor> skips = skips_override ? *skips_override : dense_skips(random_stages(4, 8, {2, 2, 2}, 6));
    return progressive_upsample(x, skips, dec.upsampler());
  }
};

TEST_F(Upsampling, SixteenFoldFactorReachesThirtyTwo) {
  EXPECT_EQ(run({16, 16, 16}, true).shape(), (Shape{1, 4, 32, 32, 32}));
}

TEST_F(Upsampling, DeskFactorFourReachesEight) {
  EXPECT_EQ(run({4, 4, 4}, true).shape(), (Shape{1, 4, 8, 8, 8}));
}

TEST_F(Upsampling, DisabledAggregationIgnoresSkips) {
  const std::vector<Tensor> zeros(4, Tensor::zeros({1, 8, 2, 2, 2}));
  EXPECT_TRUE(bit_identical(run({4, 4, 4}, false), run({4, 4, 4}, false, &zeros)));
  EXPECT_FALSE(bit_identical(run({4, 4, 4}, true), run({4, 4, 4}, true, &zeros)));
}

TEST(FinalFuse, ShapeFinitenessAndInputIndependence) {
  ParamStore ps;
  Init init(7);
  MaskDecoder dec(ps, init, small_decoder(), 16, 8, 1, {4, 4, 4});
  FinalFuse& f = dec.fuse();
  const Tensor up = random_tensor({2, 4, 8, 8, 8}, 8);
  const Tensor orig = random_tensor({2, 1, 8, 8, 8}, 9);
  const Tensor y = final_fuse(up, orig, f);
  EXPECT_EQ(y.shape(), (Shape{2, 1, 8, 8, 8}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(final_fuse(up, random_tensor({2, 1, 8, 8, 4}, 9), f), DimensionError);

  // Zero the weights reading the original-volume channel (the last input channel).
  const Shape& ws = f.conv.w.shape();  // [out, in, kd, kh, kw]
  ASSERT_EQ(ws[1], 5u);
  for (std::size_t a = 0; a < ws[2]; ++a)
    for (std::size_t b = 0; b < ws[3]; ++b)
      for (std::size_t c = 0; c < ws[4]; ++c) f.conv.w.at({0, 4, a, b, c}) = 0.0;
  EXPECT_TRUE(bit_identical(final_fuse(up, orig, f), final_fuse(up, random_tensor({2, 1, 8, 8, 8}, 10), f)));
}

TEST(MaskDecoder, LogitsAtInputResolution) {
  for (const Triple factor : {Triple{2, 2, 2}, Triple{4, 4, 4}, Triple{2, 4, 4}}) {
    ParamStore ps;
    Init init(8);
    const MaskDecoder dec(ps, init, small_decoder(), 16, 8, 1, factor);
    const Triple g{2, 2, 2};
    const Tensor emb = random_tensor({1, 16, 2, 2, 2}, 1);
    const CrossModalPrompt p = prompt_for(random_tensor({1, 8, 16}, 2), g, 4, 3);
    const Tensor orig = random_tensor({1, 1, 2 * factor[0], 2 * factor[1], 2 * factor[2]}, 4);
    EXPECT_EQ(dec.forward(emb, p, random_stages(4, 8, g, 5), orig).shape(), (Shape{1, 1, 2 * factor[0], 2 * factor[1], 2 * factor[2]}));
  }
}

TEST(MaskDecoder, WholeDecoderGradientsMatchFiniteDifferences) {
  ParamStore ps;
  Init init(9);
  MaskDecoder dec(ps, init, small_decoder(), 8, 8, 1, {2, 2, 2});
  for (auto& l : dec.transformer()) {
    std::mt19937_64 rng(1);
    for (Linear* p : {&l.self_attn.out, &l.tok_to_img.out, &l.img_to_tok.out, &l.mlp.fc2})
      for (auto& w : p->w.data()) w += 0.05 * std::normal_distribution<double>()(rng);
  }
  const Triple g{2, 2, 2};
  Tensor emb = random_tensor({1, 8, 2, 2, 2}, 1);
  emb.set_requires_grad(true);
  const Tensor fused = random_tensor({1, 8, 8}, 2), queries = random_tensor({2, 8}, 3);
  const auto stages = random_stages(4, 8, g, 4);
  const Tensor orig = random_tensor({1, 1, 4, 4, 4}, 5), r = random_tensor({1, 1, 4, 4, 4}, 6);
  NamedTensors params{{"embedding", emb}};
  for (auto& p : ps.all()) params.emplace_back(p.name, p.value);
  GradCheckOptions o;
  o.tolerance = 1e-4;
  o.max_coords = 4;
  const auto rep = grad_check([&] { return sum(mul(dec.forward(emb, to_prompt(fused, g, queries), stages, orig), r)); }, params, o);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}
