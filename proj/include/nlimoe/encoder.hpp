#pragma once

// Whitespace vocabulary, [CLS] p [SEP] h [SEP] pair encoding, and a compact
// post-LayerNorm transformer encoder with masked mean pooling.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "nlimoe/corpus.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/rng.hpp"
#include "nlimoe/tensor.hpp"

namespace nlimoe {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::size_t kReservedCount = 4;
  static constexpr std::array<std::string_view, kReservedCount> kReserved = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};

  Vocab() {
    for (auto r : kReserved) append(std::string(r));
  }

  /// Non-reserved tokens, in id order starting at 4.
  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (const auto& t : tokens) {
      if (v.index_.count(t)) throw DataError("vocabulary token \"" + t + "\" listed twice");
      v.append(t);
    }
    return v;
  }

  /// Tokens with frequency >= min_freq, ordered by frequency (descending)
  /// then lexicographically.
  static Vocab build(const std::vector<NliExample>& corpus, std::size_t min_freq = 1) {
    if (corpus.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
    if (min_freq == 0) throw ConfigError("min_freq must be at least 1");
    std::map<std::string, std::size_t, std::less<>> counts;
    for (const auto& ex : corpus) {
      for (auto& t : tokenize(ex.premise)) ++counts[t];
      for (auto& t : tokenize(ex.hypothesis)) ++counts[t];
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, n] : counts) {
      if (n < min_freq) continue;
      if (std::find(kReserved.begin(), kReserved.end(), tok) != kReserved.end()) continue;
      kept.emplace_back(tok, n);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [tok, n] : kept) tokens.push_back(tok);
    return from_tokens(tokens);
  }

  std::size_t size() const { return tokens_.size(); }

  std::int32_t id(std::string_view token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.find(token) != index_.end(); }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// All tokens including the reserved header.
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; the first four lines are the reserved tokens.
  void save(std::ostream& out) const {
    for (const auto& t : tokens_) out << t << '\n';
  }
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary file " + path);
    save(out);
  }

  static Vocab load(std::istream& in, const std::string& source = "<vocab>") {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    if (lines.size() < kReservedCount) throw DataError(source + ": missing reserved header");
    for (std::size_t i = 0; i < kReservedCount; ++i) {
      if (lines[i] != kReserved[i]) {
        throw DataError(source + ":" + std::to_string(i + 1) + ": expected reserved token " + std::string(kReserved[i]));
      }
    }
    return from_tokens(std::vector<std::string>(lines.begin() + kReservedCount, lines.end()));
  }
  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file " + path);
    return load(in, path);
  }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void append(std::string t) {
    index_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t, std::less<>> index_;
};

struct EncodedPair {
  std::vector<std::int32_t> ids;  // padded to max_length
  std::vector<std::uint8_t> mask;
  std::size_t premise_length = 0;
  std::size_t hypothesis_length = 0;

  /// Unpadded length n + m + 3.
  std::size_t length() const { return premise_length + hypothesis_length + 3; }
};

/// Lays out [CLS] p [SEP] h [SEP] and pads with [PAD] to max_length.
///
/// When n + m + 3 exceeds max_length, tokens are dropped from the end of the
/// longer side (premise on ties) one at a time until the pair fits.
inline EncodedPair encode_pair(std::string_view premise, std::string_view hypothesis, const Vocab& vocab,
                               std::size_t max_length, std::optional<std::size_t> example_index = std::nullopt) {
  auto where = [&] { return example_index ? "example " + std::to_string(*example_index) + ": " : std::string(); };
  auto p = tokenize(premise);
  auto h = tokenize(hypothesis);
  if (p.empty()) throw DataError(where() + "empty premise");
  if (h.empty()) throw DataError(where() + "empty hypothesis");
  if (max_length < 5) throw ConfigError("max_length must be at least 5, got " + std::to_string(max_length));
  while (p.size() + h.size() + 3 > max_length) {
    if (p.size() >= h.size()) {
      p.pop_back();
    } else {
      h.pop_back();
    }
  }

  EncodedPair out;
  out.premise_length = p.size();
  out.hypothesis_length = h.size();
  out.ids.reserve(max_length);
  out.ids.push_back(Vocab::kCls);
  for (const auto& t : p) out.ids.push_back(vocab.id(t));
  out.ids.push_back(Vocab::kSep);
  for (const auto& t : h) out.ids.push_back(vocab.id(t));
  out.ids.push_back(Vocab::kSep);
  out.mask.assign(out.ids.size(), 1);
  out.ids.resize(max_length, Vocab::kPad);
  out.mask.resize(max_length, 0);
  return out;
}

enum class PositionalEncoding { sinusoidal, learned };

struct EncoderConfig {
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_width = 128;
  std::size_t max_length = 64;
  PositionalEncoding positions = PositionalEncoding::sinusoidal;

  bool operator==(const EncoderConfig&) const = default;
};

inline void validate(const EncoderConfig& c) {
  if (c.dim == 0) throw ConfigError("encoder dim must be positive");
  if (c.heads == 0 || c.dim % c.heads != 0) {
    throw ConfigError("encoder dim " + std::to_string(c.dim) + " is not divisible by " + std::to_string(c.heads) +
                      " heads");
  }
  if (c.layers > 0 && c.ff_width == 0) throw ConfigError("encoder ff_width must be positive");
  if (c.max_length < 5) throw ConfigError("max_length must be at least 5");
}

struct EncoderLayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gamma, ln1_beta;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gamma, ln2_beta;
};

struct EncoderParams {
  Tensor token_embedding;     // [vocab x d]
  Tensor position_embedding;  // [max_length x d], learned only
  Tensor sinusoid;            // [max_length x d], constant
  std::vector<EncoderLayerParams> layers;

  void collect(std::vector<NamedParameter>& out) const {
    out.push_back({"encoder.token_embedding", token_embedding});
    if (position_embedding.defined()) out.push_back({"encoder.position_embedding", position_embedding});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "encoder.layer" + std::to_string(i) + ".";
      for (auto& [n, t] : std::vector<std::pair<const char*, Tensor>>{
               {"wq", l.wq}, {"bq", l.bq}, {"wk", l.wk}, {"bk", l.bk}, {"wv", l.wv}, {"bv", l.bv},
               {"wo", l.wo}, {"bo", l.bo}, {"ln1_gamma", l.ln1_gamma}, {"ln1_beta", l.ln1_beta},
               {"w1", l.w1}, {"b1", l.b1}, {"w2", l.w2}, {"b2", l.b2}, {"ln2_gamma", l.ln2_gamma},
               {"ln2_beta", l.ln2_beta}}) {
        out.push_back({p + n, t});
      }
    }
  }
};

inline Tensor uniform_tensor(Shape shape, double bound, CounterRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor sinusoidal_table(std::size_t length, std::size_t dim) {
  std::vector<double> v(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      v[pos * dim + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return Tensor({length, dim}, std::move(v));
}

/// Weights ~ U(+-1/sqrt(fan_in)), biases 0, LayerNorm gamma 1 / beta 0,
/// token embeddings ~ U(+-1).
inline EncoderParams init_encoder(const EncoderConfig& c, std::size_t vocab_size, CounterRng& rng) {
  validate(c);
  EncoderParams p;
  const std::size_t d = c.dim;
  p.token_embedding = uniform_tensor({vocab_size, d}, 1.0, rng);
  if (c.positions == PositionalEncoding::learned) {
    p.position_embedding = uniform_tensor({c.max_length, d}, 1.0, rng);
  } else {
    p.sinusoid = sinusoidal_table(c.max_length, d);
  }
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double bf = 1.0 / std::sqrt(static_cast<double>(c.ff_width));
  for (std::size_t i = 0; i < c.layers; ++i) {
    EncoderLayerParams l;
    l.wq = uniform_tensor({d, d}, bd, rng);
    l.wk = uniform_tensor({d, d}, bd, rng);
    l.wv = uniform_tensor({d, d}, bd, rng);
    l.wo = uniform_tensor({d, d}, bd, rng);
    l.bq = Tensor::zeros({d}, true);
    l.bk = Tensor::zeros({d}, true);
    l.bv = Tensor::zeros({d}, true);
    l.bo = Tensor::zeros({d}, true);
    l.ln1_gamma = Tensor::full({d}, 1.0, true);
    l.ln1_beta = Tensor::zeros({d}, true);
    l.w1 = uniform_tensor({d, c.ff_width}, bd, rng);
    l.b1 = Tensor::zeros({c.ff_width}, true);
    l.w2 = uniform_tensor({c.ff_width, d}, bf, rng);
    l.b2 = Tensor::zeros({d}, true);
    l.ln2_gamma = Tensor::full({d}, 1.0, true);
    l.ln2_beta = Tensor::zeros({d}, true);
    p.layers.push_back(std::move(l));
  }
  return p;
}

/// X = E[ids] + P for the first `rows` positions (all positions by default).
inline Tensor embed_with_positions(const EncodedPair& pair, const EncoderParams& params, std::size_t rows = 0) {
  if (rows == 0) rows = pair.ids.size();
  if (rows > pair.ids.size()) throw ContractError("embed_with_positions: more rows than encoded ids");
  const std::span<const std::int32_t> ids(pair.ids.data(), rows);
  const Tensor tokens = gather_rows(params.token_embedding, ids);
  std::vector<std::int32_t> positions(rows);
  for (std::size_t i = 0; i < rows; ++i) positions[i] = static_cast<std::int32_t>(i);
  const Tensor& table = params.position_embedding.defined() ? params.position_embedding : params.sinusoid;
  if (rows > table.dim(0)) {
    throw ContractError("embed_with_positions: " + std::to_string(rows) + " positions exceed table of " +
                        std::to_string(table.dim(0)));
  }
  return add(tokens, gather_rows(table, positions));
}

/// Optional probe filled by multi_head_attention, one entry per head.
struct AttentionProbe {
  std::vector<Tensor> weights;  // [L x L] per head
  std::vector<Tensor> values;   // [L x d_head] per head
  Tensor context;               // heads concatenated, before the output projection
};

inline Tensor multi_head_attention(const Tensor& x, std::span<const std::uint8_t> mask, const EncoderLayerParams& l,
                                   std::size_t heads, AttentionProbe* probe = nullptr) {
  const std::size_t len = x.dim(0), d = x.dim(1), dh = d / heads;
  if (mask.size() != len) throw DimensionError("attention mask length does not match sequence length");
  const Tensor q = add_rowwise(matmul(x, l.wq), l.bq);
  const Tensor k = add_rowwise(matmul(x, l.wk), l.bk);
  const Tensor v = add_rowwise(matmul(x, l.wv), l.bv);

  const bool has_pad = std::any_of(mask.begin(), mask.end(), [](auto m) { return m == 0; });
  Tensor key_mask;
  if (has_pad) {
    std::vector<double> m(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j)
        if (!mask[j]) m[i * len + j] = -std::numeric_limits<double>::infinity();
    key_mask = Tensor({len, len}, std::move(m));
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> contexts;
  contexts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    const Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    const Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (has_pad) scores = add(scores, key_mask);
    const Tensor w = softmax_rows(scores);
    contexts.push_back(matmul(w, vh));
    if (probe) {
      probe->weights.push_back(w);
      probe->values.push_back(vh);
    }
  }
  const Tensor context = heads == 1 ? contexts.front() : concat_cols(contexts);
  if (probe) probe->context = context;
  return add_rowwise(matmul(context, l.wo), l.bo);
}

/// Stack of post-LN transformer layers. Pad keys receive no attention.
inline Tensor encode(const Tensor& x, std::span<const std::uint8_t> mask, const EncoderParams& params,
                     const EncoderConfig& config, std::vector<AttentionProbe>* probes = nullptr) {
  Tensor h = x;
  for (const auto& l : params.layers) {
    AttentionProbe* probe = nullptr;
    if (probes) probe = &probes->emplace_back();
    const Tensor attn = multi_head_attention(h, mask, l, config.heads, probe);
    const Tensor h1 = layer_norm(add(h, attn), l.ln1_gamma, l.ln1_beta);
    const Tensor ff = add_rowwise(matmul(relu(add_rowwise(matmul(h1, l.w1), l.b1)), l.w2), l.b2);
    h = layer_norm(add(h1, ff), l.ln2_gamma, l.ln2_beta);
  }
  return h;
}

/// Mean of the real (mask = 1) rows of H, special tokens included.
inline Tensor pool(const Tensor& h, std::span<const std::uint8_t> mask) { return masked_mean_rows(h, mask); }

}  // namespace nlimoe
