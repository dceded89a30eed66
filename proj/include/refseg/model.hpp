#pragma once

#include <string>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/crossmodal.hpp"
#include "refseg/encoder3d.hpp"
#include "refseg/maskdec.hpp"
#include "refseg/nn.hpp"
#include "refseg/textenc.hpp"

namespace refseg {

/// Intermediate values of one forward pass, for inspection and tests.
struct ForwardTrace {
  EncoderTrace encoder;
  Tensor words;  // [L, C_e]
  CrossModalPrompt prompt;
  Tensor logits;  // [1, 1, D, H, W]
};

class Model {
 public:
  /// Validates the config (ConfigError listing every violation) and
  /// initializes all parameters deterministically from train.seed.
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// volume [B, C_in, D, H, W]; one prompt per batch entry, or a single
  /// prompt shared by all. Returns mask logits [B, 1, D, H, W].
  Tensor forward(const Tensor& volume, const std::vector<std::string>& prompts) const;
  Tensor forward(const Tensor& volume, const std::string& prompt) const { return forward(volume, std::vector<std::string>{prompt}); }
  /// Single-volume pass keeping intermediates. volume [1, C_in, D, H, W].
  ForwardTrace trace(const Tensor& volume, const std::string& prompt) const;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParamCensus census() const { return params_.census(); }
  const Vocabulary& vocab() const { return vocab_; }
  TokenSequence tokenize(const std::string& prompt) const;

  Encoder3d& encoder() { return encoder_; }
  TextEncoder& text() { return text_; }
  CrossModal& crossmodal() { return crossmodal_; }
  MaskDecoder& decoder() { return decoder_; }
  /// Encoder downsampling factor per axis (d, h, w).
  Triple downsample() const;

 private:
  ModelConfig config_;
  ParamStore params_;
  Vocabulary vocab_;
  Encoder3d encoder_;
  TextEncoder text_;
  CrossModal crossmodal_;
  MaskDecoder decoder_;
};

/// Binary mask [D, H, W] (logits > 0) for one volume [C_in, D, H, W], computed
/// without recording a graph.
Tensor predict_mask(const Model& model, const Tensor& volume, const std::string& prompt);

/// Parameter count of a model built from `config` (no forward pass needed).
ParamCensus build_census(const ModelConfig& config);

/// 1 - softDice(sigmoid(logits), mask) with smoothing eps.
Tensor soft_dice_loss(const Tensor& logits, const Tensor& mask, double eps = 1.0);
/// soft Dice loss + mean binary cross-entropy. Throws InputError when the
/// mask is not binary or the element counts differ.
Tensor segmentation_loss(const Tensor& logits, const Tensor& mask);

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay);
  /// Updates every parameter that received a gradient.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

/// Learning rate for `epoch` (0-based) of `epochs`: base * (1 - epoch / epochs)
/// for "linear", base for "constant".
double scheduled_lr(const std::string& schedule, double base, std::size_t epoch, std::size_t epochs);

}  // namespace refseg
