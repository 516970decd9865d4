#pragma once

// Encoder + routed expert block + classifier, with batched losses.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/moe.hpp"
#include "nlimoe/objectives.hpp"
#include "nlimoe/rng.hpp"
#include "nlimoe/tensor.hpp"

namespace nlimoe {

struct ModelConfig {
  EncoderConfig encoder;
  RouterConfig router;

  bool operator==(const ModelConfig&) const = default;
};

struct BatchOptions {
  ForwardMode mode = ForwardMode::eval;
  const CounterRng* rng = nullptr;                      // example k uses rng->split(k)
  const std::vector<ExpertMask>* forced_masks = nullptr;  // one per example
  bool trim_padding = true;  // run the encoder on the real tokens only
};

struct BatchOutput {
  Tensor loss;    // scalar, differentiable
  Tensor logits;  // [B x 3]
  LossBreakdown breakdown;
  std::vector<RoutingTrace> traces;
  std::vector<int> predictions;
};

/// Index of the largest value, lowest index on ties.
inline int argmax(std::span<const double> v) {
  if (v.empty()) throw ContractError("argmax: empty input");
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

class NliMoeModel {
 public:
  NliMoeModel(const ModelConfig& config, std::size_t vocab_size, std::uint64_t seed) : config_(config) {
    validate(config.encoder);
    validate(config.router);
    if (vocab_size <= Vocab::kReserved.size()) throw ConfigError("vocabulary holds only reserved tokens");
    CounterRng root(seed);
    CounterRng enc_rng = root.split(0);
    CounterRng moe_rng = root.split(1);
    encoder_ = init_encoder(config.encoder, vocab_size, enc_rng);
    moe_ = init_moe(config.encoder.dim, config.router, moe_rng);
  }

  const ModelConfig& config() const { return config_; }
  std::size_t vocab_size() const { return encoder_.token_embedding.dim(0); }
  const EncoderParams& encoder() const { return encoder_; }
  const MoeParams& moe() const { return moe_; }

  /// Switches the routing rule, e.g. to evaluate a dynamically trained model
  /// with dense or top-K routing. The expert count cannot change.
  void set_router(const RouterConfig& router) {
    validate(router);
    if (router.num_experts != config_.router.num_experts) {
      throw ConfigError("set_router: model has " + std::to_string(config_.router.num_experts) + " experts, not " +
                        std::to_string(router.num_experts));
    }
    config_.router = router;
  }

  /// Every parameter, in a fixed order with stable names.
  std::vector<NamedParameter> named_parameters() const {
    std::vector<NamedParameter> out;
    encoder_.collect(out);
    moe_.collect(out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
  }

  /// Parameters handed to the optimizer. The complexity gate never receives
  /// a gradient; freezing it simply keeps it out of the optimizer.
  std::vector<Tensor> trainable_parameters(bool freeze_complexity_gate = false) const {
    std::vector<Tensor> out;
    for (const auto& p : named_parameters()) {
      if (freeze_complexity_gate && (p.name == "moe.complexity_w" || p.name == "moe.complexity_b")) continue;
      out.push_back(p.tensor);
    }
    return out;
  }

  void zero_grad() const {
    for (const auto& p : named_parameters()) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }

  /// Pooled sentence-pair representation s.
  Tensor represent(const EncodedPair& pair, bool trim_padding = true) const {
    if (trim_padding) {
      const std::size_t rows = pair.length();
      const std::vector<std::uint8_t> mask(rows, 1);
      const Tensor h = encode(embed_with_positions(pair, encoder_, rows), mask, encoder_, config_.encoder);
      return pool(h, mask);
    }
    const Tensor h = encode(embed_with_positions(pair, encoder_), pair.mask, encoder_, config_.encoder);
    return pool(h, pair.mask);
  }

  MoeOutput forward(const EncodedPair& pair, const MoeForwardOptions& options = {}, bool trim_padding = true) const {
    return moe_forward(represent(pair, trim_padding), moe_, config_.router, options);
  }

  BatchOutput forward_batch(std::span<const EncodedPair> pairs, std::span<const int> labels, const LossWeights& weights,
                            const BatchOptions& options = {}) const {
    if (pairs.empty()) throw ContractError("forward_batch: empty batch");
    if (labels.size() != pairs.size()) throw ContractError("forward_batch: label count differs from batch size");
    if (options.forced_masks && options.forced_masks->size() != pairs.size()) {
      throw ContractError("forward_batch: forced mask count differs from batch size");
    }
    BatchOutput out;
    std::vector<Tensor> logits, probs;
    std::vector<std::vector<std::uint8_t>> masks;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      MoeForwardOptions o;
      o.mode = options.mode;
      CounterRng stream(0);
      if (options.rng) {
        stream = options.rng->split(k);
        o.rng = &stream;
      }
      if (options.forced_masks) o.forced_mask = &(*options.forced_masks)[k];
      MoeOutput r = forward(pairs[k], o, options.trim_padding);
      out.predictions.push_back(argmax(r.logits.values()));
      logits.push_back(reshape(r.logits, {1, kNumLabels}));
      if (config_.router.enabled) {
        probs.push_back(reshape(r.gate_probs, {1, r.gate_probs.numel()}));
        masks.push_back(r.trace.mask);
      }
      out.traces.push_back(std::move(r.trace));
    }
    out.logits = stack_rows(logits);
    const Tensor ce = cross_entropy(out.logits, labels);
    Tensor d = Tensor::scalar(0.0), b = Tensor::scalar(0.0);
    if (config_.router.enabled) {
      const Tensor p = stack_rows(probs);
      d = dynamic_loss(p);
      b = load_balance_loss(masks, p);
    }
    out.loss = total_loss(ce, d, b, weights);
    out.breakdown = total_loss(ce.item(), d.item(), b.item(), weights, pairs.size());
    return out;
  }

 private:
  ModelConfig config_;
  EncoderParams encoder_;
  MoeParams moe_;
};

}  // namespace nlimoe
