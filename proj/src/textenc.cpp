#include "refseg/textenc.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "refseg/errors.hpp"

namespace refseg {

extern const char* const kBuiltinVocabulary;

Vocabulary Vocabulary::from_text(const std::string& text) {
  Vocabulary v;
  v.words_ = {"<pad>", "<unk>", "<bos>", "<eos>"};
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (line.empty()) continue;
    v.words_.push_back(line);
  }
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_.emplace(v.words_[i], static_cast<int>(i));
  return v;
}

Vocabulary Vocabulary::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open vocabulary file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str());
}

Vocabulary Vocabulary::builtin() { return from_text(kBuiltinVocabulary); }

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw CorruptionError("token id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("max_len must be at least 3");
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  if (words.empty()) throw InputError("prompt text is empty");

  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kBos);
  for (const auto& w : words) seq.ids.push_back(vocab.id(w));
  if (seq.ids.size() + 1 > max_len) {
    seq.ids.resize(max_len - 1);
    seq.truncated = true;
  }
  seq.ids.push_back(Vocabulary::kEos);
  return seq;
}

std::string detokenize(const TokenSequence& tokens, const Vocabulary& vocab) {
  std::string out;
  for (int id : tokens.ids) {
    if (id < 4 && id != Vocabulary::kUnk) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

TextEncoder::TextEncoder(ParamStore& ps, Init& init, const TextConfig& cfg, std::size_t vocab_size, const std::string& name) : cfg_(cfg) {
  const ParamTag tag = cfg.frozen ? ParamTag::pretrained_text() : ParamTag{false, Origin::PretrainedText};
  const std::size_t C = cfg.embed_dim;
  Init emb = init.derive(name + ".embed");
  token_table_ = ps.add(name + ".embed.tokens", emb.normal({vocab_size, C}, 1.0), tag);
  position_table_ = ps.add(name + ".embed.positions", emb.normal({cfg.max_len, C}, 0.5), tag);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string bn = name + ".block" + std::to_string(i);
    TextBlock b;
    b.norm1 = LayerNorm::create(ps, bn + ".norm1", C, tag);
    b.attn = MultiHeadAttention::create(ps, init, bn + ".attn", C, C, cfg.heads, tag);
    b.norm2 = LayerNorm::create(ps, bn + ".norm2", C, tag);
    b.mlp = Mlp::create(ps, init, bn + ".mlp", C, C * cfg.mlp_ratio, C, tag);
    blocks_.push_back(b);
  }
  final_norm_ = LayerNorm::create(ps, name + ".final_norm", C, tag);
}

Tensor TextEncoder::encode(const TokenSequence& tokens) const {
  const std::size_t L = tokens.length();
  if (L == 0 || L > cfg_.max_len) throw DimensionError("token sequence length " + std::to_string(L) + " outside 1.." + std::to_string(cfg_.max_len));
  Tensor x = add(embedding(token_table_, tokens.ids), slice(position_table_, 0, 0, L));
  x = reshape(x, {1, L, cfg_.embed_dim});
  for (const auto& b : blocks_) {
    Tensor h = b.norm1(x);
    x = add(x, b.attn(h, h, h));
    x = add(x, b.mlp(b.norm2(x)));
  }
  return reshape(final_norm_(x), {L, cfg_.embed_dim});
}

Tensor encode_text(const TokenSequence& tokens, const TextEncoder& encoder) { return encoder.encode(tokens); }

Tensor pool_sentence(const Tensor& word_embeddings) {
  if (word_embeddings.dim() != 2) throw DimensionError("expected [L, C_e], got " + shape_str(word_embeddings.shape()));
  return mean_axis(word_embeddings, 0);
}

Tensor pool_sentence_eos(const Tensor& word_embeddings) {
  if (word_embeddings.dim() != 2) throw DimensionError("expected [L, C_e], got " + shape_str(word_embeddings.shape()));
  return reshape(slice(word_embeddings, 0, word_embeddings.size(0) - 1, 1), {word_embeddings.size(1)});
}

}  // namespace refseg
