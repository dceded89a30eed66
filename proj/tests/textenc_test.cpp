#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "refseg/errors.hpp"
#include "refseg/grad_check.hpp"
#include "refseg/textenc.hpp"

using namespace refseg;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::builtin();
  return v;
}

TextConfig small_text() {
  TextConfig c;
  c.embed_dim = 8;
  c.heads = 2;
  c.frozen = false;
  return c;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(Tokenize, ReferringCommand) {
  const TokenSequence t = tokenize("perform liver segmentation", vocab(), 32);
  const std::vector<int> want{Vocabulary::kBos, vocab().id("perform"), vocab().id("liver"), vocab().id("segmentation"), Vocabulary::kEos};
  EXPECT_EQ(t.ids, want);
  EXPECT_EQ(t.length(), 5u);
  EXPECT_FALSE(t.truncated);
  for (int id : want) EXPECT_NE(id, Vocabulary::kUnk);
}

TEST(Tokenize, EmptyTextIsAnError) {
  EXPECT_THROW(tokenize("", vocab(), 32), InputError);
  EXPECT_THROW(tokenize("  \t\n", vocab(), 32), InputError);
}

TEST(Tokenize, UnknownWordMapsToUnk) {
  EXPECT_FALSE(vocab().contains("xyzzy"));
  EXPECT_EQ(tokenize("xyzzy", vocab(), 32).ids, (std::vector<int>{Vocabulary::kBos, Vocabulary::kUnk, Vocabulary::kEos}));
}

TEST(Tokenize, LowercasesAndSplitsOnPunctuation) {
  EXPECT_EQ(tokenize("Segment, the   SPHERE!", vocab(), 32).ids, tokenize("segment the sphere", vocab(), 32).ids);
}

TEST(Tokenize, TruncationKeepsEosAndFlags) {
  const TokenSequence t = tokenize("segment the liver and the kidney and the spleen", vocab(), 5);
  EXPECT_TRUE(t.truncated);
  ASSERT_EQ(t.length(), 5u);
  EXPECT_EQ(t.ids.front(), Vocabulary::kBos);
  EXPECT_EQ(t.ids.back(), Vocabulary::kEos);
  EXPECT_EQ(t.ids[1], vocab().id("segment"));
}

TEST(Tokenize, RoundTripOnVocabularyText) {
  for (const std::string s : {"segment the sphere", "perform liver segmentation", "CT images, pancreas tumor segmentation"}) {
    std::string norm;
    for (char c : s) norm += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : ' ';
    std::istringstream in(norm);
    std::string w, joined;
    while (in >> w) joined += (joined.empty() ? "" : " ") + w;
    EXPECT_EQ(detokenize(tokenize(s, vocab(), 32), vocab()), joined);
  }
}

TEST(Vocabulary, CoversDatasetPromptWords) {
  // Alphabetic words of the dataset prompt descriptions the model is meant to read.
  const std::string prompts =
      "CT images, kidneys, tumors, and cysts segmentation, spacing to, dimensions to. "
      "CT images, pancreas tumor segmentation, resolution, slices to. "
      "CT images, liver tumor segmentation, axial resolution mm, z-direction resolution mm. "
      "CT images, colon cancer segmentation, abdominal scans. "
      "MRI images, cardiac structure segmentation (LVC, RVC, LAC, RAC, AA), resolution, voxel spacing mm. "
      "CT images, abdominal organ segmentation (organs), slice thickness mm, in-plane resolution. "
      "CT and MRI images, abdominal organ segmentation (organs), varying modalities and resolutions.";
  const TokenSequence t = tokenize(prompts, vocab(), 1000);
  for (std::size_t i = 1; i + 1 < t.length(); ++i) EXPECT_NE(t.ids[i], Vocabulary::kUnk) << "word " << i;
}

TEST(Vocabulary, ReservedIdsAndRangeChecks) {
  const Vocabulary v = Vocabulary::from_text("alpha\n\nbeta\n");
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("alpha"), 4);
  EXPECT_EQ(v.id("beta"), 5);
  EXPECT_EQ(v.word(5), "beta");
  EXPECT_THROW(v.word(6), CorruptionError);
  EXPECT_THROW(v.word(-1), CorruptionError);
}

TEST(TextEncoder, ShapeAndDeterminism) {
  ParamStore ps;
  Init init(1);
  const TextEncoder enc(ps, init, small_text(), vocab().size());
  const TokenSequence t = tokenize("segment the left kidney", vocab(), 32);
  const Tensor a = encode_text(t, enc), b = encode_text(t, enc);
  EXPECT_EQ(a.shape(), (Shape{t.length(), 8}));
  EXPECT_TRUE(bit_identical(a, b));
}

TEST(TextEncoder, FrozenByDefault) {
  ParamStore ps;
  Init init(1);
  TextEncoder(ps, init, TextConfig{}, vocab().size());
  for (const auto& p : ps.all()) {
    EXPECT_TRUE(p.tag.frozen) << p.name;
    EXPECT_EQ(p.tag.origin, Origin::PretrainedText);
  }
}

TEST(TextEncoder, SwappingInteriorTokensChangesOutput) {
  ParamStore ps;
  Init init(2);
  const TextEncoder enc(ps, init, small_text(), vocab().size());
  TokenSequence t = tokenize("segment the left kidney", vocab(), 32);
  const Tensor a = encode_text(t, enc);
  std::swap(t.ids[2], t.ids[3]);
  const Tensor b = encode_text(t, enc);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(TextEncoder, OutOfRangeIdIsCorruption) {
  ParamStore ps;
  Init init(2);
  const TextEncoder enc(ps, init, small_text(), vocab().size());
  TokenSequence t = tokenize("segment", vocab(), 32);
  t.ids[1] = static_cast<int>(vocab().size());
  EXPECT_THROW(encode_text(t, enc), CorruptionError);
}

TEST(TextEncoder, GradientsMatchFiniteDifferences) {
  ParamStore ps;
  Init init(3);
  const TextEncoder enc(ps, init, small_text(), vocab().size());
  const TokenSequence t = tokenize("segment the sphere", vocab(), 32);
  std::mt19937_64 rng(4);
  const Tensor r = Tensor::randn({t.length(), 8}, rng);
  NamedTensors params;
  for (auto& p : ps.all()) params.emplace_back(p.name, p.value);
  GradCheckOptions o;
  o.tolerance = 1e-5;
  o.max_coords = 8;
  const auto rep = grad_check([&] { return sum(mul(encode_text(t, enc), r)); }, params, o);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(PoolSentence, MeanOfRows) {
  EXPECT_EQ(pool_sentence(Tensor({2, 2}, {1, 1, 3, 3})).data()[0], 2.0);
  EXPECT_EQ(pool_sentence(Tensor({2, 2}, {1, 1, 3, 3})).data()[1], 2.0);
  const Tensor one({1, 3}, {0.25, -1.5, 7.0});
  const Tensor p = pool_sentence(one);
  EXPECT_EQ(p.shape(), (Shape{3}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p.data()[i], one.data()[i]);
}

TEST(PoolSentence, RowPermutationInvariant) {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::randn({5, 4}, rng);
  Tensor y({5, 4});
  const std::size_t perm[5] = {3, 0, 4, 1, 2};
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) y.at({r, c}) = x.at({perm[r], c});
  const Tensor a = pool_sentence(x), b = pool_sentence(y);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a.data()[c], b.data()[c], 1e-15);
}

TEST(PoolSentence, EosPoolingTakesLastRow) {
  const Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor p = pool_sentence_eos(x);
  EXPECT_EQ(p.data()[0], 5.0);
  EXPECT_EQ(p.data()[1], 6.0);
}
