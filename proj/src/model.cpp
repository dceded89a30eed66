#include "refseg/model.hpp"

#include <cmath>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

// Re-raises a library error with the failing stage prepended, keeping its type.
template <class F>
auto in_stage(const char* stage, F&& f) -> decltype(f()) {
  const std::string pre = std::string(stage) + ": ";
  try {
    return f();
  } catch (const DimensionError& e) {
    throw DimensionError(pre + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(pre + e.what());
  } catch (const InputError& e) {
    throw InputError(pre + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(pre + e.what());
  } catch (const EvaluationError& e) {
    throw EvaluationError(pre + e.what());
  } catch (const InternalError& e) {
    throw InternalError(pre + e.what());
  }
}

Vocabulary load_vocab(const TextConfig& cfg) { return cfg.vocab.empty() ? Vocabulary::builtin() : Vocabulary::from_file(cfg.vocab); }

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

Model::Model(const ModelConfig& config) : config_(validated(config)), vocab_(load_vocab(config.text)) {
  Init init(config.train.seed);
  encoder_ = Encoder3d(params_, init, config.encoder);
  text_ = TextEncoder(params_, init, config.text, vocab_.size());
  crossmodal_ = CrossModal(params_, init, config.crossmodal, config.text.embed_dim, config.encoder.embed_dim);
  decoder_ = MaskDecoder(params_, init, config.decoder, config.encoder.bottleneck_dim, config.encoder.embed_dim, config.encoder.in_channels,
                         downsample());
}

Triple Model::downsample() const { return {config_.encoder.depth_patch, config_.encoder.patch_k, config_.encoder.patch_k}; }

TokenSequence Model::tokenize(const std::string& prompt) const { return refseg::tokenize(prompt, vocab_, config_.text.max_len); }

ForwardTrace Model::trace(const Tensor& volume, const std::string& prompt) const {
  if (volume.dim() != 5 || volume.size(0) != 1) throw DimensionError("trace expects a single volume [1, C, D, H, W], got " + shape_str(volume.shape()));
  if (volume.size(1) != config_.encoder.in_channels) {
    throw DimensionError("volume has " + std::to_string(volume.size(1)) + " channels, model expects " + std::to_string(config_.encoder.in_channels));
  }
  ForwardTrace t;
  t.encoder = in_stage("encoder", [&] { return encoder_.forward(volume); });
  if (config_.crossmodal.use_text) {
    t.words = in_stage("text encoder", [&] { return text_.encode(tokenize(prompt)); });
    t.prompt = in_stage("cross-modal prompt", [&] {
      return crossmodal_.forward(t.words, collect_features(t.encoder, config_.encoder.num_stages));
    });
  } else {
    t.prompt = crossmodal_.empty_prompt(1, t.encoder.grid);
  }
  t.logits = in_stage("mask decoder", [&] { return decoder_.forward(t.encoder.embedding, t.prompt, t.encoder.stages, volume); });
  return t;
}

Tensor Model::forward(const Tensor& volume, const std::vector<std::string>& prompts) const {
  if (volume.dim() != 5) throw DimensionError("volume must be [B, C, D, H, W], got " + shape_str(volume.shape()));
  const std::size_t B = volume.size(0);
  if (prompts.size() != 1 && prompts.size() != B) {
    throw InputError(std::to_string(prompts.size()) + " prompts for a batch of " + std::to_string(B));
  }
  if (B == 1) return trace(volume, prompts[0]).logits;
  std::vector<Tensor> outs;
  for (std::size_t b = 0; b < B; ++b) outs.push_back(trace(slice(volume, 0, b, 1), prompts[prompts.size() == 1 ? 0 : b]).logits);
  return concat(outs, 0);
}

ParamCensus build_census(const ModelConfig& config) { return Model(config).census(); }

Tensor soft_dice_loss(const Tensor& logits, const Tensor& mask, double eps) {
  if (logits.numel() != mask.numel()) {
    throw InputError("logits " + shape_str(logits.shape()) + " and mask " + shape_str(mask.shape()) + " differ in size");
  }
  const auto z = logits.data();
  const auto m = mask.data();
  const std::size_t n = z.size();
  std::vector<double> p(n);
  double S = 0, I = 0, G = 0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = 1.0 / (1.0 + std::exp(-z[i]));
    S += p[i];
    I += p[i] * m[i];
    G += m[i];
  }
  const double den = S + G + eps;
  const double num = 2.0 * I + eps;
  std::vector<double> mv(m.begin(), m.end());
  return make_result({1}, {1.0 - num / den}, {logits}, [p = std::move(p), mv = std::move(mv), den, num](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double go = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double dl_dp = -(2.0 * mv[i] * den - num) / (den * den);
      g[i] += go * dl_dp * p[i] * (1.0 - p[i]);
    }
  });
}

Tensor segmentation_loss(const Tensor& logits, const Tensor& mask) {
  if (logits.numel() != mask.numel()) {
    throw InputError("logits " + shape_str(logits.shape()) + " and mask " + shape_str(mask.shape()) + " differ in size");
  }
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw InputError("mask is not binary (found " + std::to_string(v) + ")");
  const Tensor target = reshape(mask.detach(), logits.shape());
  return add(soft_dice_loss(logits, target), bce_with_logits(logits, target));
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.data();
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= lr * (mh / (std::sqrt(vh) + eps_) + wd_ * w[i]);
    }
  }
}

double scheduled_lr(const std::string& schedule, double base, std::size_t epoch, std::size_t epochs) {
  if (schedule == "constant") return base;
  if (schedule != "linear") throw ConfigError("unknown learning-rate schedule " + schedule);
  if (epochs == 0) throw ConfigError("schedule needs a positive epoch count");
  return base * (1.0 - static_cast<double>(epoch) / static_cast<double>(epochs));
}

Tensor predict_mask(const Model& model, const Tensor& volume, const std::string& prompt) {
  if (volume.dim() != 4) throw DimensionError("expected a volume [C, D, H, W], got " + shape_str(volume.shape()));
  NoGradGuard guard;
  const Shape& s = volume.shape();
  const Tensor logits = model.forward(reshape(volume, {1, s[0], s[1], s[2], s[3]}), prompt);
  Tensor mask = Tensor::zeros({s[1], s[2], s[3]});
  auto md = mask.data();
  const auto ld = logits.data();
  for (std::size_t i = 0; i < md.size(); ++i) md[i] = ld[i] > 0.0 ? 1.0 : 0.0;
  return mask;
}

}  // namespace refseg
