#include "refseg/grad_suite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "refseg/data.hpp"
#include "refseg/model.hpp"
#include "refseg/ops.hpp"

namespace refseg {

namespace {

struct Case {
  std::string name;
  std::function<Tensor()> f;
  NamedTensors params;
  std::size_t max_coords = 0;
};

// sum(out * R) with a fixed random R, so every output element matters.
std::function<Tensor()> weighted(std::function<Tensor()> g, std::mt19937_64& rng) {
  auto r = std::make_shared<Tensor>();
  auto gen = std::make_shared<std::mt19937_64>(rng());
  return [g = std::move(g), r, gen]() {
    Tensor out = g();
    if (!r->defined()) *r = Tensor::randn(out.shape(), *gen);
    return sum(mul(out, *r));
  };
}

ModelConfig small_model_config() {
  ModelConfig c;
  c.train.seed = 3;
  c.data.dims = {8, 8, 8};
  c.train.patch = {8, 8, 8};
  return c;
}

std::vector<Case> op_cases(std::mt19937_64& rng) {
  std::vector<Case> cs;
  auto rn = [&](Shape s, double sd = 1.0) { return Tensor::randn(std::move(s), rng, sd); };

  {
    Tensor a = rn({2, 3, 4}), b = rn({3, 1});
    cs.push_back({"add/sub/mul broadcast", weighted([=] { return mul(add(a, b), sub(a, b)); }, rng), {{"a", a}, {"b", b}}});
  }
  {
    Tensor x = rn({3, 5});
    cs.push_back({"scalar ops", weighted([=] { return add_scalar(mul_scalar(x, 1.7), -0.3); }, rng), {{"x", x}}});
  }
  {
    Tensor x = rn({4, 5}, 2.0);
    cs.push_back({"gelu", weighted([=] { return gelu(x); }, rng), {{"x", x}}});
    cs.push_back({"sigmoid", weighted([=] { return sigmoid(x); }, rng), {{"x", x}}});
    cs.push_back({"softmax", weighted([=] { return softmax(x, 0); }, rng), {{"x", x}}});
    cs.push_back({"sum/mean axis", weighted([=] { return add(sum_axis(x, 1, true), mean_axis(x, 1, true)); }, rng), {{"x", x}}});
    cs.push_back({"sum/mean", [=] { return add(sum(mul(x, x)), mean(x)); }, {{"x", x}}});
  }
  {
    Tensor x = rn({2, 3, 6}), g = rn({6}), b = rn({6});
    cs.push_back({"layernorm", weighted([=] { return layernorm(x, g, b); }, rng), {{"x", x}, {"gamma", g}, {"beta", b}}});
  }
  {
    Tensor a = rn({2, 3, 4}), b = rn({2, 4, 5}), w = rn({4, 3}), bias = rn({3});
    cs.push_back({"matmul", weighted([=] { return matmul(a, b); }, rng), {{"a", a}, {"b", b}}});
    cs.push_back({"linear", weighted([=] { return linear(a, w, bias); }, rng), {{"x", a}, {"w", w}, {"b", bias}}});
  }
  {
    Tensor x = rn({2, 3, 4});
    cs.push_back({"layout ops", weighted([=] {
                    Tensor p = permute(x, {2, 0, 1});
                    Tensor s = slice(reshape(p, {4, 6}), 1, 1, 4);
                    return concat({pad(s, 0, 1, 1), transpose_last(reshape(x, {4, 6}))}, 1);
                  }, rng),
                  {{"x", x}}});
  }
  {
    Tensor table = rn({6, 3});
    const std::vector<int> ids{1, 4, 1, 0};
    cs.push_back({"embedding", weighted([=] { return embedding(table, ids); }, rng), {{"table", table}}});
  }
  {
    Tensor x = rn({1, 2, 2, 3, 2});
    cs.push_back({"upsample_nearest3d", weighted([=] { return upsample_nearest3d(x, {2, 1, 3}); }, rng), {{"x", x}}});
  }
  {
    Tensor z = rn({2, 5}, 2.0);
    Tensor t({2, 5}, std::vector<double>{1, 0, 1, 1, 0, 0, 0, 1, 0, 1});
    cs.push_back({"bce_with_logits", [=] { return bce_with_logits(z, t); }, {{"logits", z}}});
  }
  {
    ConvSpec s;
    s.kernel = {3, 2, 3};
    s.stride = {2, 1, 2};
    s.padding = {1, 0, 1};
    Tensor x = rn({1, 2, 5, 4, 5}), w = rn(conv3d_weight_shape(2, 3, s)), b = rn({3});
    cs.push_back({"conv3d", weighted([=] { return conv3d(x, w, b, s); }, rng), {{"x", x}, {"w", w}, {"b", b}}});
  }
  {
    ConvSpec s;
    s.kernel = {3, 3, 3};
    s.padding = {1, 1, 1};
    s.groups = 4;
    Tensor x = rn({1, 4, 3, 3, 3}), w = rn(conv3d_weight_shape(4, 4, s)), b = rn({4});
    cs.push_back({"conv3d depthwise", weighted([=] { return conv3d(x, w, b, s); }, rng), {{"x", x}, {"w", w}, {"b", b}}});
  }
  {
    ConvSpec s;
    s.kernel = {2, 3, 2};
    s.stride = {2, 1, 2};
    s.padding = {0, 1, 0};
    s.transposed = true;
    Tensor x = rn({1, 3, 2, 3, 2}), w = rn(conv3d_weight_shape(3, 2, s)), b = rn({2});
    cs.push_back({"conv3d transposed", weighted([=] { return conv3d(x, w, b, s); }, rng), {{"x", x}, {"w", w}, {"b", b}}});
  }
  {
    ConvSpec s;
    s.kernel = {1, 3, 3};
    s.padding = {0, 1, 1};
    Tensor x = rn({1, 2, 4, 4}), w = rn({3, 2, 3, 3}), b = rn({3});
    cs.push_back({"conv2d", weighted([=] { return conv2d(x, w, b, s); }, rng), {{"x", x}, {"w", w}, {"b", b}}});
  }
  {
    ConvSpec s;
    s.kernel = {1, 1, 3};
    s.groups = 2;
    Tensor x = rn({1, 2, 6}), w = rn({2, 1, 3}), b = rn({2});
    cs.push_back({"conv1d grouped", weighted([=] { return conv1d(x, w, b, s); }, rng), {{"x", x}, {"w", w}, {"b", b}}});
  }
  {
    Tensor q = rn({1, 2, 3, 4}), k = rn({1, 2, 5, 4}), v = rn({1, 2, 5, 4});
    cs.push_back({"scaled_dot_attention", weighted([=] { return scaled_dot_attention(q, k, v); }, rng), {{"q", q}, {"k", k}, {"v", v}}});
  }
  {
    Tensor z = rn({1, 1, 2, 3, 3}, 2.0);
    Tensor m = Tensor::zeros({2, 3, 3});
    for (std::size_t i = 0; i < m.numel(); i += 3) m.data()[i] = 1.0;
    cs.push_back({"soft dice + bce loss", [=] { return segmentation_loss(z, m); }, {{"logits", z}}});
  }
  return cs;
}

NamedTensors trainable_of(const ParamStore& ps, const std::string& prefix) {
  NamedTensors out;
  for (const auto& p : ps.all())
    if (!p.tag.frozen && p.name.rfind(prefix, 0) == 0) out.emplace_back(p.name, p.value);
  return out;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::vector<Case> cases = op_cases(rng);

  // Component checks share one small model.
  ModelConfig cfg = small_model_config();
  cfg.text.frozen = false;  // lets the text encoder be differentiated too
  auto model = std::make_shared<Model>(cfg);
  // Non-zero adapter up-projections so gradients reach every adapter tensor.
  std::mt19937_64 perturb(options.seed + 11);
  for (auto& p : model->params().all())
    if (p.name.find(".adapter.up") != std::string::npos || p.name.find("twoway") != std::string::npos)
      for (auto& v : p.value.data()) v += 0.05 * std::normal_distribution<double>()(perturb);

  const Tensor volume = reshape(synth_sample(5, 0, cfg.data).volume, {1, 1, 8, 8, 8});
  const Tensor mask = synth_sample(5, 0, cfg.data).mask;
  const std::string prompt = "sphere";

  {
    auto trace = std::make_shared<EncoderTrace>();
    {
      NoGradGuard g;
      *trace = model->encoder().forward(volume);
    }
    Tensor x = trace->stages[0].tokens.detach();
    const Triple dims = trace->stages[0].dims;
    const Adapter ad = *model->encoder().blocks()[0].adapter;
    NamedTensors ps = trainable_of(model->params(), "encoder.stage1.block0.adapter");
    ps.emplace_back("x", x);
    cases.push_back({"adapter", weighted([=] { return adapter_apply(x, ad, dims); }, rng), ps});

    const EncoderBlock blk = model->encoder().blocks()[1];
    Tensor xw = Tensor::randn({1, 12, cfg.encoder.embed_dim}, rng);
    cases.push_back({"window attention (padded)", weighted([=] { return window_attention(xw, {3, 2, 2}, {2, 2, 2}, blk.attn); }, rng),
                     {{"x", xw}, {"q.w", blk.attn.q.w}, {"v.w", blk.attn.v.w}}, 40});

    const Bottleneck neck = model->encoder().neck();
    const TokenGrid last{trace->stages.back().tokens.detach(), trace->stages.back().dims};
    cases.push_back({"bottleneck", weighted([=] { return bottleneck(last, neck); }, rng), trainable_of(model->params(), "encoder.neck"), 40});
  }
  {
    const TextEncoder& te = model->text();
    const TokenSequence seq = model->tokenize("segment the sphere");
    NamedTensors ps;
    for (const auto& p : model->params().all())
      if (p.name.rfind("text.", 0) == 0) ps.emplace_back(p.name, p.value);
    cases.push_back({"text encoder", weighted([=] { return encode_text(seq, te); }, rng), ps, 12});
  }
  {
    Tensor words;
    StageFeatures feats;
    {
      NoGradGuard g;
      words = model->text().encode(model->tokenize("segment the cube"));
      feats = collect_features(model->encoder().forward(volume), cfg.encoder.num_stages);
    }
    const CrossModal& cm = model->crossmodal();
    cases.push_back({"cross-modal prompt", weighted([=] {
                       const CrossModalPrompt p = cm.forward(words, feats);
                       return concat({reshape(p.fused, {p.fused.numel()}), reshape(p.sparse, {p.sparse.numel()})}, 0);
                     }, rng),
                     trainable_of(model->params(), "crossmodal"), 12});
  }
  {
    ForwardTrace tr;
    {
      NoGradGuard g;
      tr = model->trace(volume, prompt);
    }
    const MaskDecoder& dec = model->decoder();
    cases.push_back({"mask decoder", weighted([=] { return dec.forward(tr.encoder.embedding, tr.prompt, tr.encoder.stages, volume); }, rng),
                     trainable_of(model->params(), "decoder"), 8});
  }
  if (options.include_model) {
    NamedTensors ps;
    for (const auto& p : model->params().all()) ps.emplace_back(p.name, p.value);
    auto m = model;
    cases.push_back({"full model forward + loss (8^3, one-word prompt)", [=] { return segmentation_loss(m->forward(volume, prompt), mask); }, ps,
                     options.model_coords});
  }

  std::vector<GradSuiteEntry> out;
  for (auto& c : cases) {
    GradCheckOptions go;
    go.eps = options.eps;
    go.tolerance = options.tolerance;
    go.floor = options.floor;
    go.max_coords = c.max_coords;
    go.seed = options.seed;
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteEntry e{c.name, grad_check(c.f, c.params, go), 0.0};
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace refseg
