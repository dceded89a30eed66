#pragma once

#include <vector>

#include "refseg/config.hpp"
#include "refseg/encoder3d.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// Per-word text embeddings mapped into the image feature width: [L, C_v].
struct ProjectedText {
  Tensor tokens;
};

/// Row-wise MLP C_e -> hidden -> C_v. Without a projector the rows are
/// zero-padded up to C_v.
struct TextProjector {
  bool enabled = true;
  Mlp mlp;
  std::size_t out_dim = 0;

  static TextProjector create(ParamStore& ps, Init& init, const std::string& name, std::size_t text_dim, std::size_t hidden,
                              std::size_t out_dim, bool enabled, Activation act = Activation::Gelu);
};

ProjectedText project_text(const Tensor& word_embeddings, const TextProjector& projector);

/// Stage outputs of the encoder, in stage order.
struct StageFeatures {
  std::vector<TokenGrid> stages;
};

StageFeatures collect_features(const EncoderTrace& trace, std::size_t expected_stages);

/// A_i = softmax(Q_i K^T / sqrt(d_k)) over the text axis, O_i = A_i V_text.
/// Q comes from the image tokens, K and V from the projected text.
/// image [B, M, C], text [L, C] -> [B, M, C]
Tensor cross_attention_stage(const Tensor& image_tokens, const ProjectedText& text, const Linear& q, const Linear& k, const Linear& v,
                             std::size_t heads);
/// The attention map of the stage above, [B, heads, M, L].
Tensor cross_attention_scores(const Tensor& image_tokens, const ProjectedText& text, const Linear& q, const Linear& k,
                              std::size_t heads);

/// sum_i softmax(weights)_i * O_i
Tensor fuse_stages(const std::vector<Tensor>& stage_outputs, const Tensor& weights);

struct CrossModalPrompt {
  Tensor fused;   // [B, M, C]
  Tensor sparse;  // [B, S, C]
  Tensor dense;   // [B, C, D_t, H_t, W_t]
  Triple grid{0, 0, 0};
};

/// Dense prompt is the fused tokens in volume layout; sparse tokens are
/// attention pools of the fused tokens with learned queries [S, C].
CrossModalPrompt to_prompt(const Tensor& fused, const Triple& grid_dims, const Tensor& pool_queries);

/// Projection heads and fusion weights for the selected encoder stages.
class CrossModal {
 public:
  CrossModal() = default;
  CrossModal(ParamStore& ps, Init& init, const CrossModalConfig& cfg, std::size_t text_dim, std::size_t image_dim,
             const std::string& name = "crossmodal");

  /// Full prompt generation from word embeddings and encoder stages.
  CrossModalPrompt forward(const Tensor& word_embeddings, const StageFeatures& features) const;
  /// Prompt used when text conditioning is disabled: all zeros.
  CrossModalPrompt empty_prompt(std::size_t batch, const Triple& grid) const;

  const CrossModalConfig& config() const { return cfg_; }
  TextProjector& projector() { return projector_; }
  std::vector<Linear>& queries() { return q_; }
  Linear& keys() { return k_; }
  std::vector<Linear>& values() { return v_; }
  const Tensor& fusion_weights() const { return fuse_; }
  const Tensor& pool_queries() const { return pool_; }

 private:
  CrossModalConfig cfg_;
  std::size_t image_dim_ = 0;
  TextProjector projector_;
  std::vector<Linear> q_;
  Linear k_;
  std::vector<Linear> v_;
  Tensor fuse_;
  Tensor pool_;
};

}  // namespace refseg
