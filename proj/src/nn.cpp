#include "refseg/nn.hpp"

#include <cmath>
#include <cstring>

#include "refseg/errors.hpp"

namespace refseg {

std::string_view origin_name(Origin o) {
  switch (o) {
    case Origin::Pretrained2d:
      return "pretrained-2d";
    case Origin::New3d:
      return "new-3d";
    case Origin::Adapter:
      return "adapter";
    case Origin::PretrainedText:
      return "pretrained-text";
  }
  return "?";
}

Origin parse_origin(std::string_view s) {
  if (s == "pretrained-2d") return Origin::Pretrained2d;
  if (s == "new-3d") return Origin::New3d;
  if (s == "adapter") return Origin::Adapter;
  if (s == "pretrained-text") return Origin::PretrainedText;
  throw FormatError("unknown parameter origin '" + std::string(s) + "'");
}

Tensor ParamStore::add(std::string name, Tensor init, ParamTag tag) {
  if (find(name)) throw InternalError("duplicate parameter name " + name);
  init.set_requires_grad(!tag.frozen);
  params_.push_back({std::move(name), init, tag});
  return init;
}

const Parameter& ParamStore::get(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw InternalError("no parameter named " + std::string(name));
}

Parameter* ParamStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

ParamCensus ParamStore::census() const {
  ParamCensus c;
  for (const auto& p : params_) (p.tag.frozen ? c.frozen_count : c.trainable_count) += p.value.numel();
  return c;
}

std::vector<Tensor> ParamStore::trainable() const {
  std::vector<Tensor> out;
  for (const auto& p : params_)
    if (!p.tag.frozen) out.push_back(p.value);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

std::uint64_t ParamStore::frozen_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    if (!p.tag.frozen) continue;
    const auto d = p.value.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Init Init::derive(const std::string& name) const {
  std::uint64_t h = 1469598103934665603ULL ^ seed_;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32), static_cast<std::uint32_t>(seed_)};
  Init out(seed_);
  out.rng_.seed(seq);
  return out;
}

Tensor Init::fan_in_uniform(Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng_, -bound, bound);
}

Tensor Init::normal(Shape shape, double stddev) { return Tensor::randn(std::move(shape), rng_, stddev); }

Tensor activate(const Tensor& x, Activation act) { return act == Activation::Gelu ? gelu(x) : x; }

Linear Linear::create(ParamStore& ps, Init& init, const std::string& name, std::size_t in, std::size_t out, ParamTag tag, bool bias) {
  Linear l;
  Init local = init.derive(name);
  l.w = ps.add(name + ".w", local.fan_in_uniform({in, out}, in), tag);
  if (bias) l.b = ps.add(name + ".b", local.fan_in_uniform({out}, in), tag);
  return l;
}

void Linear::set_identity() {
  if (w.size(0) != w.size(1)) throw ConfigError("identity init needs a square linear layer");
  auto d = w.data();
  std::fill(d.begin(), d.end(), 0.0);
  for (std::size_t i = 0; i < w.size(0); ++i) d[i * w.size(1) + i] = 1.0;
  if (b.defined()) std::fill(b.data().begin(), b.data().end(), 0.0);
}

void Linear::set_zero() {
  std::fill(w.data().begin(), w.data().end(), 0.0);
  if (b.defined()) std::fill(b.data().begin(), b.data().end(), 0.0);
}

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& name, std::size_t dim, ParamTag tag) {
  LayerNorm ln;
  ln.gamma = ps.add(name + ".gamma", Tensor::ones({dim}), tag);
  ln.beta = ps.add(name + ".beta", Tensor::zeros({dim}), tag);
  return ln;
}

Mlp Mlp::create(ParamStore& ps, Init& init, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, ParamTag tag,
                Activation act) {
  Mlp m;
  m.fc1 = Linear::create(ps, init, name + ".fc1", in, hidden, tag);
  m.fc2 = Linear::create(ps, init, name + ".fc2", hidden, out, tag);
  m.act = act;
  return m;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] % heads) throw ConfigError("width " + std::to_string(s.back()) + " not divisible by heads " + std::to_string(heads));
  if (heads == 1) return reshape(x, {s[0], 1, s[1], s[2]});
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const Shape& s = x.shape();
  if (s[1] == 1) return reshape(x, {s[0], s[2], s[3]});
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = mul_scalar(matmul(q, transpose_last(k)), scale);
  if (mask.defined()) scores = add(scores, mask);
  return matmul(softmax(scores, -1), v);
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& ps, Init& init, const std::string& name, std::size_t dim,
                                              std::size_t internal_dim, std::size_t heads, ParamTag tag) {
  if (heads == 0 || internal_dim % heads) {
    throw ConfigError(name + ": width " + std::to_string(internal_dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  MultiHeadAttention a;
  a.q = Linear::create(ps, init, name + ".q", dim, internal_dim, tag);
  a.k = Linear::create(ps, init, name + ".k", dim, internal_dim, tag);
  a.v = Linear::create(ps, init, name + ".v", dim, internal_dim, tag);
  a.out = Linear::create(ps, init, name + ".out", internal_dim, dim, tag);
  a.heads = heads;
  return a;
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys, const Tensor& values, const Tensor& mask) const {
  Tensor o = scaled_dot_attention(split_heads(q(queries), heads), split_heads(k(keys), heads), split_heads(v(values), heads), mask);
  return out(merge_heads(o));
}

Conv3d Conv3d::create(ParamStore& ps, Init& init, const std::string& name, std::size_t in, std::size_t out, ConvSpec spec, ParamTag tag,
                      bool bias) {
  Conv3d c;
  c.spec = spec;
  const Shape ws = conv3d_weight_shape(in, out, spec);
  const std::size_t fan_in = (spec.transposed ? out : in) / spec.groups * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
  Init local = init.derive(name);
  c.w = ps.add(name + ".w", local.fan_in_uniform(ws, fan_in), tag);
  if (bias) c.b = ps.add(name + ".b", local.fan_in_uniform({out}, fan_in), tag);
  return c;
}

}  // namespace refseg
