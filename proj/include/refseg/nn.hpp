#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "refseg/conv.hpp"
#include "refseg/ops.hpp"
#include "refseg/tensor.hpp"

namespace refseg {

/// Where a parameter comes from. Pretrained origins stand in for weights
/// that would be loaded from a foundation model and stay frozen.
enum class Origin : std::uint8_t { Pretrained2d = 0, New3d = 1, Adapter = 2, PretrainedText = 3 };

std::string_view origin_name(Origin o);
Origin parse_origin(std::string_view s);

struct ParamTag {
  bool frozen = false;
  Origin origin = Origin::New3d;

  static ParamTag pretrained_2d() { return {true, Origin::Pretrained2d}; }
  static ParamTag pretrained_text() { return {true, Origin::PretrainedText}; }
  static ParamTag new_3d() { return {false, Origin::New3d}; }
  static ParamTag adapter() { return {false, Origin::Adapter}; }
};

struct Parameter {
  std::string name;
  Tensor value;
  ParamTag tag;
};

struct ParamCensus {
  std::size_t frozen_count = 0;
  std::size_t trainable_count = 0;
  std::size_t total() const { return frozen_count + trainable_count; }
};

/// Owns every named parameter of a model in registration order.
class ParamStore {
 public:
  /// Registers a parameter; trainable ones get requires_grad.
  Tensor add(std::string name, Tensor init, ParamTag tag);

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  const Parameter& get(std::string_view name) const;
  Parameter* find(std::string_view name);

  ParamCensus census() const;
  std::vector<Tensor> trainable() const;
  void zero_grad();

  /// FNV-1a over the raw bytes of the frozen parameters, in order.
  std::uint64_t frozen_hash() const;

 private:
  std::vector<Parameter> params_;
};

/// Seeded initializer. Layer factories draw from derive(name), so a
/// parameter's initial value depends only on the seed and its own name.
class Init {
 public:
  explicit Init(std::uint64_t seed) : seed_(seed), rng_(seed) {}
  Init derive(const std::string& name) const;
  std::uint64_t seed() const { return seed_; }
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor fan_in_uniform(Shape shape, std::size_t fan_in);
  Tensor normal(Shape shape, double stddev);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 rng_;
};

enum class Activation { Gelu, Identity };
Tensor activate(const Tensor& x, Activation act);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], may be undefined

  static Linear create(ParamStore& ps, Init& init, const std::string& name, std::size_t in, std::size_t out, ParamTag tag,
                       bool bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  void set_identity();
  void set_zero();
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  static LayerNorm create(ParamStore& ps, const std::string& name, std::size_t dim, ParamTag tag);
  Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }
};

struct Mlp {
  Linear fc1, fc2;
  Activation act = Activation::Gelu;

  static Mlp create(ParamStore& ps, Init& init, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                    ParamTag tag, Activation act = Activation::Gelu);
  Tensor operator()(const Tensor& x) const { return fc2(activate(fc1(x), act)); }
};

/// Multi-head attention with separate q/k/v/out projections. The internal
/// width may be smaller than the model width.
struct MultiHeadAttention {
  Linear q, k, v, out;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParamStore& ps, Init& init, const std::string& name, std::size_t dim, std::size_t internal_dim,
                                   std::size_t heads, ParamTag tag);
  /// queries [B, Tq, C], keys/values [B, Tk, C]; optional additive mask
  /// broadcastable to [B, heads, Tq, Tk].
  Tensor operator()(const Tensor& queries, const Tensor& keys, const Tensor& values, const Tensor& mask = {}) const;
};

/// [B, T, D] -> [B, heads, T, D / heads]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [B, heads, T, d] -> [B, T, heads * d]
Tensor merge_heads(const Tensor& x);
/// softmax(q k^T / sqrt(d) + mask) v over the last two axes.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask = {});

/// 3D convolution layer with its parameters.
struct Conv3d {
  Tensor w, b;
  ConvSpec spec;

  static Conv3d create(ParamStore& ps, Init& init, const std::string& name, std::size_t in, std::size_t out, ConvSpec spec,
                       ParamTag tag, bool bias = true);
  Tensor operator()(const Tensor& x) const { return conv3d(x, w, b, spec); }
};

}  // namespace refseg
