#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations whose inputs are
// tracked record their inputs and a backward rule on the result node; the
// Tape linearises the reachable graph in topological order and replays the
// rules in reverse. Leaf gradients accumulate across backward calls until
// zero_grad(); intermediate gradients are reset on every pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nlimoe/errors.hpp"
#include "nlimoe/rng.hpp"

namespace nlimoe {

using Shape = std::vector<std::size_t>;

enum class ForwardMode { train, eval };

inline constexpr double kLogClamp = 1e-12;

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool track = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Node&)> backward;

  std::span<double> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

// Gradient destination for an input, or an empty span when it is untracked.
inline std::span<double> sink(Node* n) { return n->track ? n->grad_buffer() : std::span<double>{}; }

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool track = false) : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                           " values");
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero dimension");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->track = track;
  }

  static Tensor zeros(Shape shape, bool track = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), track);
  }
  static Tensor full(Shape shape, double v, bool track = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), track);
  }
  static Tensor scalar(double v, bool track = false) { return Tensor({}, {v}, track); }
  static Tensor vector(std::vector<double> v, bool track = false) {
    const auto n = v.size();
    return Tensor({n}, std::move(v), track);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool track = false) {
    return Tensor({rows, cols}, std::move(v), track);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  bool is_scalar() const { return numel() == 1; }

  std::span<const double> values() const& { return node_->value; }
  // A temporary hands back a copy so range-for over it cannot dangle.
  std::vector<double> values() const&& { return node_->value; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.at(1) + c]; }

  /// Writable storage. Only leaves may be written (parameters, inputs).
  std::span<double> mutable_values() {
    if (node_->backward) throw ContractError("cannot write to the values of an operation result");
    return node_->value;
  }

  bool tracked() const { return node_->track; }
  void set_tracked(bool t) {
    if (node_->backward) throw ContractError("cannot change tracking of an operation result");
    node_->track = t;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// Untracked copy of the current values.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds an operation result. The result is tracked iff any input is; the
/// backward rule receives the output gradient and must accumulate into the
/// inputs (use detail::sink to skip untracked ones). This is also the hook
/// for custom operations.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs, Backward&& backward) {
  Tensor out(std::move(shape), std::move(value), false);
  auto* node = out.node();
  const bool track = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.tracked(); });
  if (track) {
    node->track = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = [bw = std::forward<Backward>(backward)](const detail::Node& n) {
      bw(std::span<const double>(n.grad));
    };
  }
  return out;
}

/// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.defined() || !root.tracked()) return tape;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; each frame is (node, next input index).
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        auto* child = node->inputs[next++].get();
        if (child->track && child->backward && seen.insert(child).second) stack.emplace_back(child, 0);
        continue;
      }
      if (node->backward) tape.ops_.push_back(node);
      stack.pop_back();
    }
    return tape;
  }

  std::size_t size() const { return ops_.size(); }
  std::span<detail::Node* const> operations() const { return ops_; }

  /// Replays backward rules from the last recorded operation to the first.
  void replay() const {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)->backward(**it);
  }

 private:
  std::vector<detail::Node*> ops_;
};

/// Populates gradients of every tracked leaf reachable from a scalar loss.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.tracked()) return;
  const auto tape = Tape::record(loss);
  for (auto* op : tape.operations()) op->grad.assign(op->value.size(), 0.0);
  loss.node()->grad_buffer()[0] = 1.0;
  tape.replay();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Broadcasting: equal shapes, or one side a scalar
// (a single element), in which case the result takes the other side's shape.

namespace detail {

struct Broadcast {
  Shape shape;
  std::size_t n;
  bool a_scalar;
  bool b_scalar;
};

inline Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), a.numel(), false, false};
  if (b.is_scalar()) return {a.shape(), a.numel(), false, true};
  if (a.is_scalar()) return {b.shape(), b.numel(), true, false};
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  const auto bc = broadcast(a, b, name);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(bc.n);
  for (std::size_t i = 0; i < bc.n; ++i) out[i] = fwd(av[bc.a_scalar ? 0 : i], bv[bc.b_scalar ? 0 : i]);
  auto* an = a.node();
  auto* bn = b.node();
  return make_result(bc.shape, std::move(out), {a, b}, [an, bn, bc, da, db](std::span<const double> g) {
    auto ga = sink(an);
    auto gb = sink(bn);
    const auto& av = an->value;
    const auto& bv = bn->value;
    for (std::size_t i = 0; i < bc.n; ++i) {
      const std::size_t ia = bc.a_scalar ? 0 : i;
      const std::size_t ib = bc.b_scalar ? 0 : i;
      if (!ga.empty()) ga[ia] += da(g[i], av[ia], bv[ib]);
      if (!gb.empty()) gb[ib] += db(g[i], av[ia], bv[ib]);
    }
  });
}

template <class Fwd, class D>
Tensor unary(const Tensor& a, Fwd fwd, D d) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto* an = a.node();
  return make_result(a.shape(), std::move(out), {a}, [an, d](std::span<const double> g) {
    auto ga = sink(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += d(g[i], an->value[i]);
  });
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

// Rows/cols view: rank-1 tensors are a single row.
inline std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError("expected a vector or matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double g, double) { return c * g; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

/// log(max(x, eps)); the clamped region has zero gradient.
inline Tensor log(const Tensor& a, double eps = kLogClamp) {
  return detail::unary(
      a, [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double g, double x) { return x > eps ? g / x : 0.0; });
}

inline Tensor sum(const Tensor& a) {
  const auto av = a.values();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  auto* an = a.node();
  return make_result({}, {s}, {a}, [an](std::span<const double> g) {
    auto ga = detail::sink(an);
    for (auto& x : ga) x += g[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor sigmoid(const Tensor& a) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    if (x >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  auto* an = a.node();
  auto y = out;
  return make_result(a.shape(), std::move(out), {a}, [an, y = std::move(y)](std::span<const double> g) {
    auto ga = detail::sink(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double g, double x) { return x > 0.0 ? g : 0.0; });
}

/// Inverted dropout. Eval mode (or rate 0) returns the input unchanged.
inline Tensor dropout(const Tensor& a, double rate, ForwardMode mode, CounterRng* rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (mode == ForwardMode::eval || rate == 0.0) return a;
  if (rng == nullptr) throw ContractError("dropout in train mode needs a random stream");
  const double keep = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.numel());
  for (auto& m : mask) m = rng->uniform() >= rate ? keep : 0.0;
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * mask[i];
  auto* an = a.node();
  return make_result(a.shape(), std::move(out), {a}, [an, mask = std::move(mask)](std::span<const double> g) {
    auto ga = detail::sink(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto* an = a.node();
  return make_result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()), {a},
                     [an](std::span<const double> g) {
                       auto ga = detail::sink(an);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  auto* an = a.node();
  return make_result({c, r}, std::move(out), {a}, [an, r, c](std::span<const double> g) {
    auto ga = detail::sink(an);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

/// Columns [start, start + count) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank2(a, "slice_cols");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (count == 0 || start + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  const auto av = a.values();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(i * c + start), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  auto* an = a.node();
  return make_result({r, count}, std::move(out), {a}, [an, r, c, start, count](std::span<const double> g) {
    auto ga = detail::sink(an);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * c + start + j] += g[i * count + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts.front().dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.dim(0) != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  std::vector<detail::Node*> nodes;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * total + offset + j] = p.values()[i * c + j];
    offset += c;
    nodes.push_back(p.node());
  }
  return make_result({r, total}, std::move(out), parts, [nodes, r, total](std::span<const double> g) {
    std::size_t offset = 0;
    for (auto* n : nodes) {
      const std::size_t c = n->shape[1];
      auto gp = detail::sink(n);
      if (!gp.empty())
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offset + j];
      offset += c;
    }
  });
}

/// Stacks equally sized tensors as the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no inputs");
  const std::size_t c = rows.front().numel();
  std::vector<double> out;
  out.reserve(rows.size() * c);
  std::vector<detail::Node*> nodes;
  for (const auto& t : rows) {
    if (t.numel() != c) {
      throw DimensionError("stack_rows: row sizes differ " + shape_str(rows.front().shape()) + " vs " +
                           shape_str(t.shape()));
    }
    out.insert(out.end(), t.values().begin(), t.values().end());
    nodes.push_back(t.node());
  }
  return make_result({rows.size(), c}, std::move(out), rows, [nodes, c](std::span<const double> g) {
    for (std::size_t r = 0; r < nodes.size(); ++r) {
      auto gr = detail::sink(nodes[r]);
      if (!gr.empty())
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[r * c + j];
    }
  });
}

/// Element i of a tensor, as a scalar.
inline Tensor index(const Tensor& a, std::size_t i) {
  if (i >= a.numel()) throw DimensionError("index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  auto* an = a.node();
  return make_result({}, {a[i]}, {a}, [an, i](std::span<const double> g) {
    auto ga = detail::sink(an);
    ga[i] += g[0];
  });
}

/// out[r] = a[r, idx[r]].
inline Tensor pick(const Tensor& a, std::span<const int> idx) {
  detail::require_rank2(a, "pick");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (idx.size() != r) throw DimensionError("pick: " + std::to_string(idx.size()) + " indices for " + shape_str(a.shape()));
  std::vector<std::size_t> cols(r);
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= c) {
      throw DimensionError("pick: column " + std::to_string(idx[i]) + " out of range for " + shape_str(a.shape()));
    }
    cols[i] = static_cast<std::size_t>(idx[i]);
    out[i] = a.values()[i * c + cols[i]];
  }
  auto* an = a.node();
  return make_result({r}, std::move(out), {a}, [an, c, cols = std::move(cols)](std::span<const double> g) {
    auto ga = detail::sink(an);
    for (std::size_t i = 0; i < cols.size(); ++i) ga[i * c + cols[i]] += g[i];
  });
}

/// Rows of an embedding table selected by id.
inline Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  detail::require_rank2(table, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: no ids");
  const std::size_t v = table.dim(0), c = table.dim(1);
  std::vector<double> out(ids.size() * c);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ContractError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) +
                          " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  auto* tn = table.node();
  return make_result({ids.size(), c}, std::move(out), {table}, [tn, c, rows = std::move(rows)](std::span<const double> g) {
    auto gt = detail::sink(tn);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[rows[i] * c + j] += g[i * c + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and row-wise reductions

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * c;
      double* orow = out.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] += x * brow[j];
    }
  auto* an = a.node();
  auto* bn = b.node();
  return make_result({r, c}, std::move(out), {a, b}, [an, bn, r, k, c](std::span<const double> g) {
    auto ga = detail::sink(an);
    auto gb = detail::sink(bn);
    const auto& av = an->value;
    const auto& bv = bn->value;
    if (!ga.empty()) {
      // ga = g * b^T, accumulated row by row against a transposed copy of b
      std::vector<double> bt(k * c);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < c; ++j) bt[j * k + p] = bv[p * c + j];
      for (std::size_t i = 0; i < r; ++i) {
        double* garow = ga.data() + i * k;
        for (std::size_t j = 0; j < c; ++j) {
          const double x = g[i * c + j];
          if (x == 0.0) continue;
          const double* btrow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += x * btrow[p];
        }
      }
    }
    if (!gb.empty()) {
      // gb = a^T * g
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < c; ++j) gb[p * c + j] += x * g[i * c + j];
        }
    }
  });
}

/// x[r, :] + v for every row r.
inline Tensor add_rowwise(const Tensor& x, const Tensor& v) {
  const auto [r, c] = detail::as_rows(x);
  if (v.numel() != c) {
    throw DimensionError("add_rowwise: cannot add " + shape_str(v.shape()) + " to rows of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v[j];
  auto* xn = x.node();
  auto* vn = v.node();
  return make_result(x.shape(), std::move(out), {x, v}, [xn, vn, r = r, c = c](std::span<const double> g) {
    auto gx = detail::sink(xn);
    auto gv = detail::sink(vn);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        if (!gx.empty()) gx[i * c + j] += g[i * c + j];
        if (!gv.empty()) gv[j] += g[i * c + j];
      }
  });
}

/// Mean over the rows of a matrix: [R x C] -> [C].
inline Tensor mean_rows(const Tensor& x) {
  const auto [r, c] = detail::as_rows(x);
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.values()[i * c + j];
  for (auto& v : out) v /= static_cast<double>(r);
  auto* xn = x.node();
  return make_result({c}, std::move(out), {x}, [xn, r = r, c = c](std::span<const double> g) {
    auto gx = detail::sink(xn);
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
  });
}

/// Mean over the rows whose mask entry is non-zero.
inline Tensor masked_mean_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
  const auto [r, c] = detail::as_rows(x);
  if (mask.size() != r) {
    throw DimensionError("masked_mean_rows: mask of " + std::to_string(mask.size()) + " for " + shape_str(x.shape()));
  }
  const auto real = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (real == 0) throw ContractError("masked_mean_rows: mask selects no rows");
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < c; ++j) out[j] += x.values()[i * c + j];
  }
  const double inv = 1.0 / static_cast<double>(real);
  for (auto& v : out) v *= inv;
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  auto* xn = x.node();
  return make_result({c}, std::move(out), {x}, [xn, c = c, inv, keep = std::move(keep)](std::span<const double> g) {
    auto gx = detail::sink(xn);
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (!keep[i]) continue;
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
    }
  });
}

/// Row-wise softmax with max subtraction. A vector is treated as one row.
inline Tensor softmax_rows(const Tensor& x) {
  const auto [r, c] = detail::as_rows(x);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  auto y = out;
  auto* xn = x.node();
  return make_result(x.shape(), std::move(out), {x}, [xn, r = r, c = c, y = std::move(y)](std::span<const double> g) {
    auto gx = detail::sink(xn);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

/// Row-wise log-softmax in log-sum-exp form.
inline Tensor log_softmax_rows(const Tensor& x) {
  const auto [r, c] = detail::as_rows(x);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> soft(xv.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = row[j] - lse;
      soft[i * c + j] = std::exp(out[i * c + j]);
    }
  }
  auto* xn = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [xn, r = r, c = c, soft = std::move(soft)](std::span<const double> g) {
                       auto gx = detail::sink(xn);
                       for (std::size_t i = 0; i < r; ++i) {
                         double total = 0.0;
                         for (std::size_t j = 0; j < c; ++j) total += g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] - soft[i * c + j] * total;
                       }
                     });
}

/// Per-row normalisation to zero mean and unit variance, then gamma * x + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const auto [r, c] = detail::as_rows(x);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match rows of " + shape_str(x.shape()));
  }
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = gamma[j] * xhat[i * c + j] + beta[j];
    }
  }
  auto* xn = x.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xn, gn, bn, r = r, c = c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const double> g) {
                       auto gx = detail::sink(xn);
                       auto gg = detail::sink(gn);
                       auto gb = detail::sink(bn);
                       const auto& gamma = gn->value;
                       const double n = static_cast<double>(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double dxhat = g[i * c + j] * gamma[j];
                           mean_dxhat += dxhat;
                           mean_dxhat_xhat += dxhat * xhat[i * c + j];
                           if (!gg.empty()) gg[j] += g[i * c + j] * xhat[i * c + j];
                           if (!gb.empty()) gb[j] += g[i * c + j];
                         }
                         if (gx.empty()) continue;
                         mean_dxhat /= n;
                         mean_dxhat_xhat /= n;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double dxhat = g[i * c + j] * gamma[j];
                           gx[i * c + j] += inv_std[i] * (dxhat - mean_dxhat - xhat[i * c + j] * mean_dxhat_xhat);
                         }
                       }
                     });
}

}  // namespace nlimoe
