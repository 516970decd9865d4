#pragma once

// Mixture-of-experts block: gate softmax, complexity gate, dynamic
// threshold, expert mask, per-expert feed-forward networks, normalised
// aggregation and the LayerNorm + linear classification head.
//
// Routing is per sentence pair. The mask M is a gradient constant, so the
// complexity gate (W_c, b_c) only influences the forward pass through the
// threshold comparison and receives no gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "nlimoe/corpus.hpp"
#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/rng.hpp"
#include "nlimoe/tensor.hpp"

namespace nlimoe {

inline constexpr double kAggregateEpsilon = 1e-9;

enum class RoutingMode { dynamic, topk, dense };

struct RouterConfig {
  std::size_t num_experts = 7;
  RoutingMode mode = RoutingMode::dynamic;
  std::size_t top_k = 1;  // used when mode == topk
  double rho_static = 0.1;
  double gamma = 0.1;
  double expert_dropout = 0.4;
  bool enabled = true;  // false removes the MoE block: O = S

  bool operator==(const RouterConfig&) const = default;
};

inline void validate(const RouterConfig& c) {
  if (c.num_experts == 0) throw ConfigError("num_experts must be at least 1");
  if (c.mode == RoutingMode::topk && (c.top_k == 0 || c.top_k > c.num_experts)) {
    throw ConfigError("top_k must be in [1, " + std::to_string(c.num_experts) + "], got " + std::to_string(c.top_k));
  }
  if (!(c.rho_static >= 0.0 && c.rho_static < 1.0)) throw ConfigError("rho_static must be in [0,1)");
  if (!(c.gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
  if (!(c.rho_static + c.gamma < 1.0)) throw ConfigError("rho_static + gamma must be below 1");
  if (!(c.expert_dropout >= 0.0 && c.expert_dropout < 1.0)) throw ConfigError("expert_dropout must be in [0,1)");
}

inline std::string routing_name(const RouterConfig& c) {
  switch (c.mode) {
    case RoutingMode::dynamic:
      return "dynamic";
    case RoutingMode::dense:
      return "dense";
    case RoutingMode::topk:
      return "topk:" + std::to_string(c.top_k);
  }
  return "dynamic";
}

/// Accepts "dynamic", "dense" or "topk:K".
inline void parse_routing(std::string_view text, RouterConfig& c) {
  if (text == "dynamic") {
    c.mode = RoutingMode::dynamic;
  } else if (text == "dense") {
    c.mode = RoutingMode::dense;
  } else if (text.rfind("topk:", 0) == 0) {
    const std::string k(text.substr(5));
    std::size_t used = 0;
    unsigned long value = 0;
    try {
      value = std::stoul(k, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != k.size()) throw ConfigError("invalid routing \"" + std::string(text) + "\"");
    c.mode = RoutingMode::topk;
    c.top_k = value;
  } else {
    throw ConfigError("invalid routing \"" + std::string(text) + "\" (expected dynamic, dense or topk:K)");
  }
}

struct MoeParams {
  Tensor gate_w;        // [d x E]
  Tensor gate_b;        // [E]
  Tensor complexity_w;  // [d x 1]
  Tensor complexity_b;  // [1]
  std::vector<Tensor> expert_w;  // E x [d x d]
  std::vector<Tensor> expert_b;  // E x [d]
  Tensor cls_gamma, cls_beta;    // [d]
  Tensor cls_w;                  // [3 x d]
  Tensor cls_b;                  // [3]

  std::size_t num_experts() const { return expert_w.size(); }
  std::size_t dim() const { return cls_gamma.numel(); }

  void collect(std::vector<NamedParameter>& out) const {
    out.push_back({"moe.gate_w", gate_w});
    out.push_back({"moe.gate_b", gate_b});
    out.push_back({"moe.complexity_w", complexity_w});
    out.push_back({"moe.complexity_b", complexity_b});
    for (std::size_t i = 0; i < expert_w.size(); ++i) {
      out.push_back({"moe.expert" + std::to_string(i) + ".w", expert_w[i]});
      out.push_back({"moe.expert" + std::to_string(i) + ".b", expert_b[i]});
    }
    out.push_back({"moe.cls_gamma", cls_gamma});
    out.push_back({"moe.cls_beta", cls_beta});
    out.push_back({"moe.cls_w", cls_w});
    out.push_back({"moe.cls_b", cls_b});
  }
};

/// Weights ~ U(+-1/sqrt(d)), biases 0.
inline MoeParams init_moe(std::size_t d, const RouterConfig& c, CounterRng& rng) {
  validate(c);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  MoeParams p;
  p.gate_w = uniform_tensor({d, c.num_experts}, bound, rng);
  p.gate_b = Tensor::zeros({c.num_experts}, true);
  p.complexity_w = uniform_tensor({d, 1}, bound, rng);
  p.complexity_b = Tensor::zeros({1}, true);
  for (std::size_t i = 0; i < c.num_experts; ++i) {
    p.expert_w.push_back(uniform_tensor({d, d}, bound, rng));
    p.expert_b.push_back(Tensor::zeros({d}, true));
  }
  p.cls_gamma = Tensor::full({d}, 1.0, true);
  p.cls_beta = Tensor::zeros({d}, true);
  p.cls_w = uniform_tensor({kNumLabels, d}, bound, rng);
  p.cls_b = Tensor::zeros({kNumLabels}, true);
  return p;
}

namespace detail {

// s . W for a vector s and a [d x k] matrix W.
inline Tensor vecmat(const Tensor& s, const Tensor& w) {
  return reshape(matmul(reshape(s, {1, s.numel()}), w), {w.dim(1)});
}

// W . s for a [k x d] matrix W and a vector s.
inline Tensor matvec(const Tensor& w, const Tensor& s) {
  return reshape(matmul(w, reshape(s, {s.numel(), 1})), {w.dim(0)});
}

}  // namespace detail

/// P = softmax(W_g S + b_g).
inline Tensor gate_probabilities(const Tensor& s, const MoeParams& p) {
  return softmax_rows(add(detail::vecmat(s, p.gate_w), p.gate_b));
}

/// C = sigmoid(W_c S + b_c), a scalar tensor.
inline Tensor complexity_score(const Tensor& s, const MoeParams& p) {
  return sigmoid(add(reshape(detail::vecmat(s, p.complexity_w), {}), p.complexity_b));
}

inline double dynamic_threshold(double complexity, const RouterConfig& c) { return c.rho_static + c.gamma * complexity; }

struct ExpertMask {
  std::vector<std::uint8_t> bits;
  bool fallback = false;

  std::size_t active() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
  }
};

/// Dynamic: M_i = [P_i > rho], falling back to the argmax (lowest index on
/// ties) when nothing clears the threshold. Top-K: the K largest P_i, lowest
/// index first on ties. Dense: every expert.
inline ExpertMask build_mask(std::span<const double> p, double rho, const RouterConfig& c) {
  ExpertMask m;
  m.bits.assign(p.size(), 0);
  switch (c.mode) {
    case RoutingMode::dense:
      std::fill(m.bits.begin(), m.bits.end(), 1);
      break;
    case RoutingMode::topk: {
      std::vector<std::size_t> order(p.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
      for (std::size_t i = 0; i < std::min(c.top_k, order.size()); ++i) m.bits[order[i]] = 1;
      break;
    }
    case RoutingMode::dynamic: {
      for (std::size_t i = 0; i < p.size(); ++i) m.bits[i] = p[i] > rho ? 1 : 0;
      if (m.active() == 0 && !p.empty()) {
        const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        m.bits[best] = 1;
        m.fallback = true;
      }
      break;
    }
  }
  return m;
}

/// FFN_i(S) = ReLU(Dropout(W_e_i S + b_e_i)).
inline Tensor expert_forward(const Tensor& s, std::size_t i, const MoeParams& p, double dropout_rate, ForwardMode mode,
                             CounterRng* rng) {
  if (i >= p.num_experts()) {
    throw ContractError("expert index " + std::to_string(i) + " out of range for " + std::to_string(p.num_experts()) +
                        " experts");
  }
  const Tensor linear = add(detail::matvec(p.expert_w[i], s), p.expert_b[i]);
  return relu(dropout(linear, dropout_rate, mode, rng));
}

/// O = sum_i M_i P_i F_i / (sum_i M_i P_i + eps). Outputs of inactive experts
/// are never read and may be undefined.
inline Tensor aggregate(const Tensor& p, std::span<const std::uint8_t> m, const std::vector<Tensor>& outputs,
                        double eps = kAggregateEpsilon) {
  if (m.size() != p.numel() || outputs.size() != p.numel()) {
    throw DimensionError("aggregate: mask, probabilities and expert outputs disagree on the expert count");
  }
  Tensor numerator, denominator;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    if (!outputs[i].defined()) throw ContractError("aggregate: active expert " + std::to_string(i) + " has no output");
    const Tensor pi = index(p, i);
    const Tensor term = mul(pi, outputs[i]);
    numerator = numerator.defined() ? add(numerator, term) : term;
    denominator = denominator.defined() ? add(denominator, pi) : pi;
  }
  if (!numerator.defined()) throw ContractError("aggregate: no active expert");
  return div(numerator, add(denominator, Tensor::scalar(eps)));
}

struct ClassifierOutput {
  Tensor logits;
  Tensor probabilities;
};

/// softmax(W_cls LayerNorm(O) + b_cls); label order entailment, contradiction, neutral.
inline ClassifierOutput classify(const Tensor& o, const MoeParams& p) {
  const Tensor normed = layer_norm(o, p.cls_gamma, p.cls_beta);
  ClassifierOutput out;
  out.logits = add(detail::matvec(p.cls_w, normed), p.cls_b);
  out.probabilities = softmax_rows(out.logits);
  return out;
}

struct RoutingTrace {
  std::vector<double> gate_probs;
  double complexity = 0.0;
  double rho_dynamic = 0.0;
  std::vector<std::uint8_t> mask;
  std::size_t active_count = 0;
  bool fallback = false;
};

struct MoeForwardOptions {
  ForwardMode mode = ForwardMode::eval;
  CounterRng* rng = nullptr;              // expert i draws from rng->split(i)
  const ExpertMask* forced_mask = nullptr;  // replaces the computed mask (gradient checks)
};

struct MoeOutput {
  Tensor logits;
  Tensor gate_probs;  // undefined when the block is disabled
  RoutingTrace trace;
};

/// gate -> complexity -> threshold -> mask -> active experts -> aggregate -> classify.
inline MoeOutput moe_forward(const Tensor& s, const MoeParams& p, const RouterConfig& c,
                             const MoeForwardOptions& options = {}) {
  MoeOutput out;
  if (!c.enabled) {
    out.logits = classify(s, p).logits;
    return out;
  }
  out.gate_probs = gate_probabilities(s, p);
  const double complexity = complexity_score(s, p).item();
  const double rho = dynamic_threshold(complexity, c);
  const ExpertMask mask = options.forced_mask ? *options.forced_mask : build_mask(out.gate_probs.values(), rho, c);
  if (mask.bits.size() != p.num_experts()) throw DimensionError("forced mask does not match the expert count");

  std::vector<Tensor> outputs(p.num_experts());
  for (std::size_t i = 0; i < p.num_experts(); ++i) {
    if (!mask.bits[i]) continue;
    if (options.mode == ForwardMode::train && options.rng) {
      CounterRng stream = options.rng->split(i);
      outputs[i] = expert_forward(s, i, p, c.expert_dropout, options.mode, &stream);
    } else {
      outputs[i] = expert_forward(s, i, p, c.expert_dropout, options.mode, nullptr);
    }
  }
  const Tensor o = aggregate(out.gate_probs, mask.bits, outputs);
  out.logits = classify(o, p).logits;

  auto& t = out.trace;
  t.gate_probs.assign(out.gate_probs.values().begin(), out.gate_probs.values().end());
  t.complexity = complexity;
  t.rho_dynamic = rho;
  t.mask = mask.bits;
  t.active_count = mask.active();
  t.fallback = mask.fallback;
  return out;
}

/// Fraction of traces in which each expert was active.
inline std::vector<double> expert_utilization(const std::vector<RoutingTrace>& traces) {
  if (traces.empty()) throw ContractError("expert_utilization: no traces");
  const std::size_t e = traces.front().mask.size();
  std::vector<double> freq(e, 0.0);
  for (const auto& t : traces) {
    if (t.mask.size() != e) throw DimensionError("expert_utilization: traces disagree on the expert count");
    for (std::size_t i = 0; i < e; ++i) freq[i] += t.mask[i] ? 1.0 : 0.0;
  }
  for (auto& f : freq) f /= static_cast<double>(traces.size());
  return freq;
}

/// Utilisation grouped by tag; a trace contributes to every tag it carries.
inline std::map<std::string, std::vector<double>> expert_utilization_by_tag(
    const std::vector<RoutingTrace>& traces, const std::vector<std::vector<std::string>>& tags) {
  if (traces.size() != tags.size()) throw ContractError("expert_utilization_by_tag: one tag list per trace required");
  std::map<std::string, std::vector<RoutingTrace>> groups;
  for (std::size_t i = 0; i < traces.size(); ++i)
    for (const auto& tag : tags[i]) groups[tag].push_back(traces[i]);
  std::map<std::string, std::vector<double>> out;
  for (const auto& [tag, group] : groups) out[tag] = expert_utilization(group);
  return out;
}

/// max - min activation frequency.
inline double utilization_skew(const std::vector<double>& freq) {
  if (freq.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(freq.begin(), freq.end());
  return *hi - *lo;
}

/// Tab-separated: id, complexity, rho_dynamic, p0..pE-1, m0..mE-1, fallback.
inline void write_traces(std::ostream& out, const std::vector<RoutingTrace>& traces,
                         const std::vector<std::string>& ids) {
  if (traces.size() != ids.size()) throw ContractError("write_traces: one id per trace required");
  const std::size_t e = traces.empty() ? 0 : traces.front().mask.size();
  out << "id\tcomplexity\trho_dynamic";
  for (std::size_t i = 0; i < e; ++i) out << "\tp" << i;
  for (std::size_t i = 0; i < e; ++i) out << "\tm" << i;
  out << "\tfallback\n";
  const auto old = out.precision(17);
  for (std::size_t k = 0; k < traces.size(); ++k) {
    const auto& t = traces[k];
    out << ids[k] << '\t' << t.complexity << '\t' << t.rho_dynamic;
    for (double p : t.gate_probs) out << '\t' << p;
    for (auto m : t.mask) out << '\t' << static_cast<int>(m);
    out << '\t' << (t.fallback ? 1 : 0) << '\n';
  }
  out.precision(old);
}

}  // namespace nlimoe
