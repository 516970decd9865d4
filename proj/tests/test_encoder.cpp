#include <gtest/gtest.h>

#include <sstream>
#include <string>
#include <vector>

#include "nlimoe/encoder.hpp"
#include "nlimoe/gradcheck.hpp"

using namespace nlimoe;

namespace {

NliExample ex(std::string p, std::string h) {
  NliExample e;
  e.premise = std::move(p);
  e.hypothesis = std::move(h);
  return e;
}

EncoderConfig tiny(std::size_t layers = 1) {
  EncoderConfig c;
  c.dim = 8;
  c.layers = layers;
  c.heads = 2;
  c.ff_width = 12;
  c.max_length = 16;
  return c;
}

Tensor random_matrix(std::size_t r, std::size_t c, CounterRng& rng) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor::matrix(r, c, std::move(v));
}

}  // namespace

TEST(Vocab, BuildExamples) {
  const std::vector<NliExample> corpus = {ex("a b", "a")};
  const auto v = Vocab::build(corpus, 1);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  const auto v2 = Vocab::build(corpus, 2);
  EXPECT_EQ(v2.size(), 5u);
  EXPECT_TRUE(v2.contains("a"));
  EXPECT_FALSE(v2.contains("b"));
  EXPECT_EQ(v2.id("b"), Vocab::kUnk);
  EXPECT_EQ(Vocab::build(corpus, 1), v);
}

TEST(Vocab, OrderIsFrequencyThenLexicographic) {
  const auto v = Vocab::build({ex("zeta beta alpha", "beta zeta"), ex("gamma", "zeta")}, 1);
  const std::vector<std::string> want = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "zeta", "beta", "alpha", "gamma"};
  EXPECT_EQ(v.tokens(), want);
}

TEST(Vocab, Errors) {
  EXPECT_THROW(Vocab::build({}, 1), ConfigError);
  EXPECT_THROW(Vocab::build({ex("a", "b")}, 0), ConfigError);
}

TEST(Vocab, ReservedIdsNeverReassigned) {
  const auto v = Vocab::build({ex("[PAD] x [SEP]", "[CLS] y")}, 1);
  EXPECT_EQ(v.id("[PAD]"), 0);
  EXPECT_EQ(v.id("[UNK]"), 1);
  EXPECT_EQ(v.id("[CLS]"), 2);
  EXPECT_EQ(v.id("[SEP]"), 3);
  EXPECT_EQ(v.size(), 6u);
}

TEST(Vocab, FileRoundTrip) {
  const auto v = Vocab::build({ex("the cat sat", "a dog")}, 1);
  std::stringstream buf;
  v.save(buf);
  const std::string text = buf.str();
  EXPECT_EQ(text.rfind("[PAD]\n[UNK]\n[CLS]\n[SEP]\n", 0), 0u);
  std::stringstream in(text);
  EXPECT_EQ(Vocab::load(in), v);
  std::stringstream bad("[PAD]\n[CLS]\n");
  EXPECT_THROW(Vocab::load(bad), DataError);
}

TEST(EncodePair, Layout) {
  const auto v = Vocab::build({ex("a b", "c")}, 1);
  const auto p = encode_pair("a b", "c", v, 8);
  const std::vector<std::int32_t> ids = {Vocab::kCls, v.id("a"), v.id("b"), Vocab::kSep, v.id("c"), Vocab::kSep, 0, 0};
  EXPECT_EQ(p.ids, ids);
  EXPECT_EQ(p.premise_length, 2u);
  EXPECT_EQ(p.hypothesis_length, 1u);
  EXPECT_EQ(p.length(), 6u);
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 1, 0, 0};
  EXPECT_EQ(p.mask, mask);
}

TEST(EncodePair, UnknownTokenBecomesUnk) {
  const auto v = Vocab::build({ex("a b", "c")}, 1);
  const auto p = encode_pair("a zzz", "c", v, 8);
  EXPECT_EQ(p.ids[2], Vocab::kUnk);
}

TEST(EncodePair, TruncationKeepsSeparators) {
  const auto v = Vocab::build({ex("p1 p2 p3 p4 p5 p6", "h1 h2 h3")}, 1);
  // 6 + 3 + 3 = 12 > 9: drop premise tokens until lengths tie, then premise first.
  const auto p = encode_pair("p1 p2 p3 p4 p5 p6", "h1 h2 h3", v, 9);
  EXPECT_EQ(p.premise_length, 3u);
  EXPECT_EQ(p.hypothesis_length, 3u);
  const std::vector<std::int32_t> ids = {Vocab::kCls, v.id("p1"), v.id("p2"), v.id("p3"), Vocab::kSep,
                                         v.id("h1"),  v.id("h2"), v.id("h3"), Vocab::kSep};
  EXPECT_EQ(p.ids, ids);
  const auto q = encode_pair("p1 p2 p3 p4 p5 p6", "h1 h2 h3", v, 8);
  EXPECT_EQ(q.premise_length, 2u);
  EXPECT_EQ(q.hypothesis_length, 3u);
  EXPECT_EQ(q.ids.back(), Vocab::kSep);
}

TEST(EncodePair, EmptyTextIsDataErrorWithIndex) {
  const auto v = Vocab::build({ex("a", "b")}, 1);
  try {
    encode_pair("   ", "b", v, 8, 17);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
  }
  EXPECT_THROW(encode_pair("a", "", v, 8), DataError);
}

TEST(EncodePair, MaskCountsRealTokensProperty) {
  CounterRng rng(4);
  std::vector<std::string> words = {"w0", "w1", "w2", "w3", "w4", "w5"};
  std::vector<NliExample> corpus = {ex("w0 w1 w2", "w3 w4 w5")};
  const auto v = Vocab::build(corpus, 1);
  for (int t = 0; t < 300; ++t) {
    std::string p, h;
    const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) p += words[rng.below(6)] + " ";
    for (std::size_t i = 0; i < m; ++i) h += words[rng.below(6)] + " ";
    const auto e = encode_pair(p, h, v, 16);
    std::size_t ones = 0;
    for (auto x : e.mask) ones += x;
    EXPECT_EQ(ones, n + m + 3);
    EXPECT_EQ(e.length(), n + m + 3);
    // Decoding the ids gives back the tokens.
    std::string back;
    for (std::size_t i = 1; i <= n; ++i) back += v.token(e.ids[i]) + " ";
    EXPECT_EQ(back, p);
  }
}

TEST(Embedding, Examples) {
  const auto v = Vocab::build({ex("a b", "c")}, 1);
  EncoderParams params;
  params.token_embedding = Tensor::zeros({v.size(), 4});
  params.sinusoid = Tensor::zeros({8, 4});
  const auto pair = encode_pair("a a", "c", v, 8);
  for (double x : embed_with_positions(pair, params).values()) EXPECT_EQ(x, 0.0);

  CounterRng rng(1);
  params.token_embedding = random_matrix(v.size(), 4, rng);
  params.sinusoid = sinusoidal_table(8, 4);
  const auto x = embed_with_positions(pair, params);
  // Rows 1 and 2 hold the same token.
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_NEAR(x.at(2, j) - x.at(1, j), params.sinusoid.at(2, j) - params.sinusoid.at(1, j), 1e-15);

  std::vector<double> onehot(v.size() * v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) onehot[i * v.size() + i] = 1.0;
  params.token_embedding = Tensor::matrix(v.size(), v.size(), onehot);
  params.sinusoid = sinusoidal_table(8, v.size());
  const auto y = embed_with_positions(pair, params);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t j = 0; j < v.size(); ++j)
      EXPECT_EQ(y.at(r, j), (static_cast<std::int32_t>(j) == pair.ids[r] ? 1.0 : 0.0) + params.sinusoid.at(r, j));
}

TEST(Embedding, IdOutOfRangeIsContractError) {
  EncoderParams params;
  params.token_embedding = Tensor::zeros({5, 2});
  params.sinusoid = Tensor::zeros({8, 2});
  EncodedPair p;
  p.ids = {2, 9, 3, 4, 3};
  p.mask = {1, 1, 1, 1, 1};
  p.premise_length = 1;
  p.hypothesis_length = 1;
  EXPECT_THROW(embed_with_positions(p, params), ContractError);
}

TEST(Encode, ZeroLayersIsIdentity) {
  CounterRng rng(2);
  auto c = tiny(0);
  const auto params = init_encoder(c, 10, rng);
  const auto x = random_matrix(5, 8, rng);
  const std::vector<std::uint8_t> mask(5, 1);
  const auto h = encode(x, mask, params, c);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(h[i], x[i]);
}

TEST(Attention, SingleRealKeyReturnsItsValue) {
  CounterRng rng(3);
  auto c = tiny();
  const auto params = init_encoder(c, 10, rng);
  const auto x = random_matrix(4, 8, rng);
  const std::vector<std::uint8_t> mask = {1, 0, 0, 0};
  AttentionProbe probe;
  multi_head_attention(x, mask, params.layers[0], c.heads, &probe);
  for (std::size_t h = 0; h < c.heads; ++h) {
    const auto& v = probe.values[h];
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(probe.context.at(i, h * 4 + j), v.at(0, j), 1e-15);
  }
}

TEST(Attention, PadKeysGetZeroWeightAndRowsSumToOne) {
  CounterRng rng(5);
  auto c = tiny(2);
  const auto params = init_encoder(c, 10, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = 3 + rng.below(8);
    const auto x = random_matrix(len, 8, rng);
    std::vector<std::uint8_t> mask(len, 1);
    const std::size_t real = 1 + rng.below(len);
    for (std::size_t i = real; i < len; ++i) mask[i] = 0;
    std::vector<AttentionProbe> probes;
    encode(x, mask, params, c, &probes);
    for (const auto& probe : probes)
      for (const auto& w : probe.weights)
        for (std::size_t i = 0; i < len; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            if (!mask[j]) { EXPECT_EQ(w.at(i, j), 0.0); }
            s += w.at(i, j);
          }
          EXPECT_NEAR(s, 1.0, 1e-9);
        }
  }
}

TEST(Pool, Examples) {
  const auto one = pool(Tensor::matrix(1, 3, {1, 2, 3}), std::vector<std::uint8_t>{1});
  EXPECT_EQ(one[0], 1.0);
  EXPECT_EQ(one[2], 3.0);
  const auto two = pool(Tensor::matrix(2, 2, {1, 2, 3, 6}), std::vector<std::uint8_t>{1, 1});
  EXPECT_EQ(two[0], 2.0);
  EXPECT_EQ(two[1], 4.0);
  const auto junk = pool(Tensor::matrix(3, 2, {1, 2, 3, 6, 1e9, -7}), std::vector<std::uint8_t>{1, 1, 0});
  EXPECT_EQ(junk[0], 2.0);
  EXPECT_EQ(junk[1], 4.0);
  EXPECT_THROW(pool(Tensor::matrix(1, 2, {1, 2}), std::vector<std::uint8_t>{0}), ContractError);
}

TEST(Pool, PadContentNeverChangesOutput) {
  CounterRng rng(6);
  auto c = tiny(2);
  const auto params = init_encoder(c, 10, rng);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t len = 10, real = 2 + rng.below(7);
    std::vector<std::uint8_t> mask(len, 0);
    for (std::size_t i = 0; i < real; ++i) mask[i] = 1;
    auto a = random_matrix(len, 8, rng);
    std::vector<double> bv(a.values().begin(), a.values().end());
    for (std::size_t i = real * 8; i < bv.size(); ++i) bv[i] = rng.uniform(-100, 100);
    const Tensor b = Tensor::matrix(len, 8, bv);
    const auto sa = pool(encode(a, mask, params, c), mask);
    const auto sb = pool(encode(b, mask, params, c), mask);
    // The real rows on their own, without any pad rows.
    const std::vector<double> head(bv.begin(), bv.begin() + static_cast<std::ptrdiff_t>(real * 8));
    const std::vector<std::uint8_t> all(real, 1);
    const auto st = pool(encode(Tensor::matrix(real, 8, head), all, params, c), all);
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_EQ(sa[j], sb[j]);
      EXPECT_NEAR(sa[j], st[j], 1e-12);
    }
  }
}

TEST(Encode, PooledGradientPassesFiniteDifferences) {
  CounterRng rng(7);
  for (auto kind : {PositionalEncoding::sinusoidal, PositionalEncoding::learned}) {
    auto c = tiny(1);
    c.positions = kind;
    const auto v = Vocab::build({ex("a b c d", "e f")}, 1);
    const auto params = init_encoder(c, v.size(), rng);
    const auto pair = encode_pair("a b c", "d e f", v, c.max_length);
    const auto readout = random_matrix(1, 8, rng);
    std::vector<NamedParameter> named;
    params.collect(named);
    std::vector<Tensor> ps;
    for (auto& p : named) ps.push_back(p.tensor);
    const auto f = [&] {
      const auto s = pool(encode(embed_with_positions(pair, params), pair.mask, params, c), pair.mask);
      return sum(mul(reshape(s, {1, 8}), readout));
    };
    EXPECT_LE(finite_diff_check(f, ps, 1e-5).max_relative_error, 1e-4);
  }
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny();
  c.dim = 0;
  EXPECT_THROW(validate(c), ConfigError);
}
