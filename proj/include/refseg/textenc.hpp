#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// Word-level vocabulary. Ids 0..3 are reserved; file line i maps to id 4 + i.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  /// One token per line; blank lines are skipped.
  static Vocabulary from_text(const std::string& text);
  static Vocabulary from_file(const std::string& path);
  /// The vocabulary compiled into the library.
  static Vocabulary builtin();

  std::size_t size() const { return words_.size(); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  bool contains(const std::string& word) const { return index_.count(word) > 0; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct TokenSequence {
  std::vector<int> ids;  // BOS ... EOS
  bool truncated = false;

  std::size_t length() const { return ids.size(); }
};

/// Lowercases, splits on whitespace and punctuation, wraps in BOS/EOS.
/// Sequences longer than max_len are cut (keeping EOS) and flagged.
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, std::size_t max_len);
/// Space-joined words, reserved ids dropped.
std::string detokenize(const TokenSequence& tokens, const Vocabulary& vocab);

struct TextBlock {
  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  Mlp mlp;
};

/// Token + learned position embedding followed by unmasked pre-norm
/// transformer blocks.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore& ps, Init& init, const TextConfig& cfg, std::size_t vocab_size, const std::string& name = "text");

  /// [L, C_e]
  Tensor encode(const TokenSequence& tokens) const;

  const TextConfig& config() const { return cfg_; }
  const Tensor& token_table() const { return token_table_; }

 private:
  TextConfig cfg_;
  Tensor token_table_;
  Tensor position_table_;
  std::vector<TextBlock> blocks_;
  LayerNorm final_norm_;
};

Tensor encode_text(const TokenSequence& tokens, const TextEncoder& encoder);

/// Arithmetic mean over rows of [L, C_e].
Tensor pool_sentence(const Tensor& word_embeddings);
/// Last row (the EOS position).
Tensor pool_sentence_eos(const Tensor& word_embeddings);

}  // namespace refseg
