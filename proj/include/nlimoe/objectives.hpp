#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nlimoe/corpus.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/tensor.hpp"

namespace nlimoe {

struct LossWeights {
  double alpha = 1e-3;  // dynamic (entropy) loss
  double beta = 1e-2;   // load-balance loss

  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double ce = 0.0;
  double dynamic = 0.0;
  double balance = 0.0;
  double total = 0.0;
  std::size_t batch_size = 0;
  double alpha = 0.0;
  double beta = 0.0;
};

/// Mean over the batch of -log softmax(logits)[gold].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(1) != kNumLabels) {
    throw DimensionError("cross_entropy: expected [B x 3] logits, got " + shape_str(logits.shape()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= static_cast<int>(kNumLabels)) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " at batch position " + std::to_string(i) +
                      " is not in {0,1,2}");
    }
  }
  return neg(mean(pick(log_softmax_rows(logits), labels)));
}

/// Per sample -(1/E) sum_i P_i log P_i, averaged over the batch.
inline Tensor dynamic_loss(const Tensor& gate_probs) {
  if (gate_probs.rank() != 2) throw DimensionError("dynamic_loss: expected [B x E], got " + shape_str(gate_probs.shape()));
  const double b = static_cast<double>(gate_probs.dim(0));
  const double e = static_cast<double>(gate_probs.dim(1));
  return scale(sum(mul(gate_probs, log(gate_probs))), -1.0 / (e * b));
}

/// E * sum_i f_i Q_i with f_i the batch mean of the mask (a constant) and
/// Q_i the batch mean of the gate probabilities.
inline Tensor load_balance_loss(const std::vector<std::vector<std::uint8_t>>& masks, const Tensor& gate_probs) {
  if (gate_probs.rank() != 2 || masks.size() != gate_probs.dim(0)) {
    throw DimensionError("load_balance_loss: " + std::to_string(masks.size()) + " masks for probabilities " +
                         shape_str(gate_probs.shape()));
  }
  const std::size_t b = gate_probs.dim(0), e = gate_probs.dim(1);
  std::vector<double> f(e, 0.0);
  for (const auto& m : masks) {
    if (m.size() != e) throw DimensionError("load_balance_loss: mask width differs from expert count");
    for (std::size_t i = 0; i < e; ++i) f[i] += m[i] ? 1.0 : 0.0;
  }
  for (auto& x : f) x /= static_cast<double>(b);
  const Tensor q = mean_rows(gate_probs);
  return scale(sum(mul(Tensor::vector(std::move(f)), q)), static_cast<double>(e));
}

/// total = ce + alpha * dynamic + beta * balance, evaluated left to right.
inline LossBreakdown total_loss(double ce, double dynamic, double balance, const LossWeights& w,
                                std::size_t batch_size = 0) {
  LossBreakdown out;
  out.ce = ce;
  out.dynamic = dynamic;
  out.balance = balance;
  out.alpha = w.alpha;
  out.beta = w.beta;
  out.batch_size = batch_size;
  out.total = ce + w.alpha * dynamic + w.beta * balance;
  return out;
}

/// Differentiable counterpart of total_loss with identical arithmetic order.
inline Tensor total_loss(const Tensor& ce, const Tensor& dynamic, const Tensor& balance, const LossWeights& w) {
  return add(add(ce, scale(dynamic, w.alpha)), scale(balance, w.beta));
}

}  // namespace nlimoe
