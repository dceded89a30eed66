#include "refseg/crossmodal.hpp"

#include <cmath>

#include "refseg/errors.hpp"

namespace refseg {

TextProjector TextProjector::create(ParamStore& ps, Init& init, const std::string& name, std::size_t text_dim, std::size_t hidden,
                                    std::size_t out_dim, bool enabled, Activation act) {
  TextProjector p;
  p.enabled = enabled;
  p.out_dim = out_dim;
  if (enabled) {
    p.mlp = Mlp::create(ps, init, name, text_dim, hidden, out_dim, ParamTag::new_3d(), act);
  } else if (text_dim > out_dim) {
    throw ConfigError("text width " + std::to_string(text_dim) + " exceeds image width " + std::to_string(out_dim) + " and no projector");
  }
  return p;
}

ProjectedText project_text(const Tensor& word_embeddings, const TextProjector& projector) {
  if (word_embeddings.dim() != 2) throw DimensionError("word embeddings must be [L, C_e], got " + shape_str(word_embeddings.shape()));
  if (!projector.enabled) {
    const std::size_t ce = word_embeddings.size(1);
    if (ce == projector.out_dim) return {word_embeddings};
    return {pad(word_embeddings, 1, 0, projector.out_dim - ce)};
  }
  if (word_embeddings.size(1) != projector.mlp.fc1.w.size(0)) {
    throw DimensionError("word embedding width " + std::to_string(word_embeddings.size(1)) + " does not match projector input " +
                         std::to_string(projector.mlp.fc1.w.size(0)));
  }
  return {projector.mlp(word_embeddings)};
}

StageFeatures collect_features(const EncoderTrace& trace, std::size_t expected_stages) {
  if (trace.stages.size() != expected_stages) {
    throw InternalError("encoder trace holds " + std::to_string(trace.stages.size()) + " stages, expected " + std::to_string(expected_stages));
  }
  for (const auto& s : trace.stages)
    if (!s.tokens.defined()) throw InternalError("encoder trace has an unrecorded stage");
  return {trace.stages};
}

namespace {

Tensor batched_text(const Tensor& t, std::size_t batch) {
  Tensor r = reshape(t, {1, t.size(0), t.size(1)});
  if (batch == 1) return r;
  return concat(std::vector<Tensor>(batch, r), 0);
}

}  // namespace

Tensor cross_attention_scores(const Tensor& image_tokens, const ProjectedText& text, const Linear& q, const Linear& k, std::size_t heads) {
  if (image_tokens.dim() != 3) throw DimensionError("image tokens must be [B, M, C], got " + shape_str(image_tokens.shape()));
  if (!text.tokens.defined() || text.tokens.dim() != 2 || text.tokens.size(0) == 0) throw InputError("cross-attention needs at least one text token");
  if (text.tokens.size(1) != image_tokens.size(2)) {
    throw DimensionError("text width " + std::to_string(text.tokens.size(1)) + " differs from image width " +
                         std::to_string(image_tokens.size(2)));
  }
  const Tensor qh = split_heads(q(image_tokens), heads);
  const Tensor kh = split_heads(batched_text(k(text.tokens), image_tokens.size(0)), heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(qh.shape().back()));
  return softmax(mul_scalar(matmul(qh, transpose_last(kh)), scale), -1);
}

Tensor cross_attention_stage(const Tensor& image_tokens, const ProjectedText& text, const Linear& q, const Linear& k, const Linear& v,
                             std::size_t heads) {
  const Tensor a = cross_attention_scores(image_tokens, text, q, k, heads);
  const Tensor vh = split_heads(batched_text(v(text.tokens), image_tokens.size(0)), heads);
  return merge_heads(matmul(a, vh));
}

Tensor fuse_stages(const std::vector<Tensor>& stage_outputs, const Tensor& weights) {
  if (stage_outputs.empty()) throw InputError("no stage outputs to fuse");
  if (weights.numel() != stage_outputs.size()) {
    throw DimensionError(std::to_string(weights.numel()) + " fusion weights for " + std::to_string(stage_outputs.size()) + " stages");
  }
  for (const auto& o : stage_outputs) {
    if (o.shape() != stage_outputs[0].shape()) {
      throw DimensionError("stage outputs disagree: " + shape_str(o.shape()) + " vs " + shape_str(stage_outputs[0].shape()));
    }
  }
  const Tensor w = softmax(reshape(weights, {stage_outputs.size()}), 0);
  Tensor out;
  for (std::size_t i = 0; i < stage_outputs.size(); ++i) {
    Tensor term = mul(stage_outputs[i], slice(w, 0, i, 1));
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

CrossModalPrompt to_prompt(const Tensor& fused, const Triple& grid_dims, const Tensor& pool_queries) {
  if (fused.dim() != 3 || fused.size(1) != grid_dims[0] * grid_dims[1] * grid_dims[2]) {
    throw DimensionError("fused tokens " + shape_str(fused.shape()) + " do not match grid " +
                         shape_str({grid_dims[0], grid_dims[1], grid_dims[2]}));
  }
  CrossModalPrompt p;
  p.fused = fused;
  p.grid = grid_dims;
  p.dense = grid_to_dense({fused, grid_dims});
  const double scale = 1.0 / std::sqrt(static_cast<double>(fused.size(2)));
  // [S, C] x [B, C, M] -> [B, S, M]
  const Tensor scores = mul_scalar(matmul(batched_text(pool_queries, fused.size(0)), transpose_last(fused)), scale);
  p.sparse = matmul(softmax(scores, -1), fused);
  return p;
}

CrossModal::CrossModal(ParamStore& ps, Init& init, const CrossModalConfig& cfg, std::size_t text_dim, std::size_t image_dim,
                       const std::string& name)
    : cfg_(cfg), image_dim_(image_dim) {
  if (!cfg.use_text) return;
  projector_ = TextProjector::create(ps, init, name + ".projector", text_dim, cfg.projector_hidden, image_dim, cfg.use_projector);
  for (std::size_t s : cfg.stages) {
    q_.push_back(Linear::create(ps, init, name + ".stage" + std::to_string(s) + ".q", image_dim, image_dim, ParamTag::new_3d()));
    v_.push_back(Linear::create(ps, init, name + ".stage" + std::to_string(s) + ".v", image_dim, image_dim, ParamTag::new_3d()));
  }
  k_ = Linear::create(ps, init, name + ".k", image_dim, image_dim, ParamTag::new_3d());
  fuse_ = ps.add(name + ".fuse", Tensor::zeros({cfg.stages.size()}), ParamTag::new_3d());
  pool_ = ps.add(name + ".pool", init.derive(name + ".pool").normal({cfg.sparse_tokens, image_dim}, 0.02), ParamTag::new_3d());
}

CrossModalPrompt CrossModal::forward(const Tensor& word_embeddings, const StageFeatures& features) const {
  const ProjectedText text = project_text(word_embeddings, projector_);
  std::vector<Tensor> outs;
  for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
    const std::size_t s = cfg_.stages[i];
    if (s == 0 || s > features.stages.size()) throw InternalError("stage " + std::to_string(s) + " not collected");
    outs.push_back(cross_attention_stage(features.stages[s - 1].tokens, text, q_[i], k_, v_[i], cfg_.heads));
  }
  return to_prompt(fuse_stages(outs, fuse_), features.stages.back().dims, pool_);
}

CrossModalPrompt CrossModal::empty_prompt(std::size_t batch, const Triple& grid) const {
  CrossModalPrompt p;
  p.grid = grid;
  p.fused = Tensor::zeros({batch, grid[0] * grid[1] * grid[2], image_dim_});
  p.dense = Tensor::zeros({batch, image_dim_, grid[0], grid[1], grid[2]});
  p.sparse = Tensor::zeros({batch, cfg_.sparse_tokens, image_dim_});
  return p;
}

}  // namespace refseg
