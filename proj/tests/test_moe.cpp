#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>
#include <vector>

#include "nlimoe/gradcheck.hpp"
#include "nlimoe/moe.hpp"

using namespace nlimoe;

namespace {

RouterConfig router(std::size_t e, RoutingMode mode = RoutingMode::dynamic, std::size_t k = 1) {
  RouterConfig c;
  c.num_experts = e;
  c.mode = mode;
  c.top_k = k;
  return c;
}

Tensor random_vector(std::size_t d, CounterRng& rng, double spread = 1.0) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.uniform(-spread, spread);
  return Tensor::vector(std::move(v));
}

void fill(Tensor t, double v) {
  for (auto& x : t.mutable_values()) x = v;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.numel() == b.numel() && std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST(Gate, Examples) {
  CounterRng rng(1);
  auto p = init_moe(4, router(7), rng);
  fill(p.gate_w, 0.0);
  const auto s = random_vector(4, rng);
  for (double x : gate_probabilities(s, p).values()) EXPECT_NEAR(x, 1.0 / 7.0, 1e-15);

  auto q = init_moe(4, router(2), rng);
  fill(q.gate_w, 0.0);
  q.gate_b.mutable_values()[0] = std::log(2.0);
  const auto pr = gate_probabilities(s, q);
  EXPECT_NEAR(pr[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(pr[1], 1.0 / 3.0, 1e-15);

  for (int t = 0; t < 100; ++t) {
    const auto g = gate_probabilities(random_vector(4, rng, 20.0), p);
    double sum = 0;
    for (double x : g.values()) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Complexity, Examples) {
  CounterRng rng(2);
  auto p = init_moe(3, router(2), rng);
  const auto s = Tensor::vector({0.5, -1.0, 2.0});
  fill(p.complexity_w, 0.0);
  EXPECT_EQ(complexity_score(s, p).item(), 0.5);
  p.complexity_b.mutable_values()[0] = 800.0;
  EXPECT_EQ(complexity_score(s, p).item(), 1.0);
  // W_c s + b_c = ln 3.
  auto wc = p.complexity_w.mutable_values();
  wc[0] = 2.0;
  p.complexity_b.mutable_values()[0] = std::log(3.0) - 1.0;
  EXPECT_NEAR(complexity_score(s, p).item(), 0.75, 1e-15);
}

TEST(Threshold, Examples) {
  RouterConfig c = router(7);
  EXPECT_NEAR(dynamic_threshold(0.5, c), 0.15, 1e-15);
  c.gamma = 0.0;
  for (double x : {0.0, 0.3, 0.99}) EXPECT_EQ(dynamic_threshold(x, c), 0.1);
  c.gamma = 0.1;
  EXPECT_NEAR(dynamic_threshold(1e-12, c), 0.1, 1e-12);
  double prev = -1;
  for (double x = 0.0; x < 1.0; x += 0.01) {
    EXPECT_GT(dynamic_threshold(x, c), prev);
    prev = dynamic_threshold(x, c);
  }
}

TEST(Mask, Examples) {
  const std::vector<double> p = {0.5, 0.3, 0.2};
  auto m = build_mask(p, 0.25, router(3));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 1, 0}));
  EXPECT_FALSE(m.fallback);

  const std::vector<double> uniform(7, 1.0 / 7.0);
  m = build_mask(uniform, 0.15, router(7));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 0, 0, 0, 0, 0, 0}));
  EXPECT_TRUE(m.fallback);

  m = build_mask(std::vector<double>(5, 0.2), 0.9, router(5, RoutingMode::dense));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>(5, 1)));
}

TEST(Mask, StrictInequalityAndTopkTies) {
  const std::vector<double> p = {0.25, 0.5, 0.25};
  auto m = build_mask(p, 0.25, router(3));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{0, 1, 0}));
  m = build_mask(p, 0.5, router(3));  // nothing strictly above: fallback to argmax
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_TRUE(m.fallback);
  m = build_mask(p, 0.0, router(3, RoutingMode::topk, 2));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 1, 0}));
  m = build_mask(std::vector<double>(4, 0.25), 0.0, router(4, RoutingMode::topk, 3));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 1, 1, 0}));
}

TEST(Mask, ConsistencyProperty) {
  CounterRng rng(3);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t e = 1 + rng.below(8);
    std::vector<double> logits(e);
    for (auto& x : logits) x = rng.uniform(-2, 2);
    const auto pt = softmax_rows(Tensor::vector(logits));
    const std::vector<double> p(pt.values().begin(), pt.values().end());
    const double rho = rng.uniform(0.0, 0.6);
    const auto m = build_mask(p, rho, router(e));
    EXPECT_GE(m.active(), 1u);
    if (m.fallback) {
      EXPECT_EQ(m.active(), 1u);
      const auto best = std::max_element(p.begin(), p.end()) - p.begin();
      EXPECT_EQ(m.bits[static_cast<std::size_t>(best)], 1);
      for (double x : p) EXPECT_LE(x, rho);
    } else {
      for (std::size_t i = 0; i < e; ++i) EXPECT_EQ(m.bits[i] == 1, p[i] > rho);
    }
  }
}

TEST(Expert, Examples) {
  CounterRng rng(4);
  auto p = init_moe(2, router(2), rng);
  fill(p.expert_w[0], 0.0);
  const auto s = Tensor::vector({0.3, -0.7});
  for (double x : expert_forward(s, 0, p, 0.4, ForwardMode::eval, nullptr).values()) EXPECT_EQ(x, 0.0);
  p.expert_b[0].mutable_values()[0] = -1.0;
  p.expert_b[0].mutable_values()[1] = 2.0;
  const auto out = expert_forward(s, 0, p, 0.4, ForwardMode::eval, nullptr);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 2.0);
  EXPECT_TRUE(bit_equal(expert_forward(s, 1, p, 0.4, ForwardMode::eval, nullptr),
                        expert_forward(s, 1, p, 0.4, ForwardMode::eval, nullptr)));
  EXPECT_THROW(expert_forward(s, 2, p, 0.4, ForwardMode::eval, nullptr), ContractError);
}

TEST(Expert, DropoutBeforeRelu) {
  // With W = 0 and b = -1, relu(dropout(-1)) is 0 for every mask, while
  // dropout(relu(-1)) would also be 0; use b = +1 to see the scale.
  CounterRng rng(5);
  auto p = init_moe(4, router(1), rng);
  fill(p.expert_w[0], 0.0);
  fill(p.expert_b[0], 1.0);
  CounterRng drop(9);
  const auto out = expert_forward(Tensor::vector({1, 2, 3, 4}), 0, p, 0.5, ForwardMode::train, &drop);
  for (double x : out.values()) EXPECT_TRUE(x == 0.0 || x == 2.0);
}

TEST(Aggregate, Examples) {
  const std::vector<Tensor> f = {Tensor::vector({1, 2}), Tensor::vector({3, -4}), Tensor::vector({5, 6})};
  const auto p = Tensor::vector({0.2, 0.3, 0.5});
  // Error up to |F| eps / sum(M P) from the denominator guard.
  auto o = aggregate(p, std::vector<std::uint8_t>{0, 1, 0}, f);
  EXPECT_NEAR(o[0], 3.0, 1e-7);
  EXPECT_NEAR(o[1], -4.0, 1e-7);
  o = aggregate(Tensor::vector({0.5, 0.5, 0.0}), std::vector<std::uint8_t>{1, 1, 0}, f);
  EXPECT_NEAR(o[0], 2.0, 1e-7);
  EXPECT_NEAR(o[1], -1.0, 1e-7);
  const double third = 1.0 / 3.0;
  o = aggregate(Tensor::vector({third, third, third}), std::vector<std::uint8_t>{1, 1, 1}, f);
  EXPECT_NEAR(o[0], 3.0, 1e-7);
  EXPECT_NEAR(o[1], 4.0 / 3.0, 1e-7);
}

TEST(Aggregate, ScaleInvarianceProperty) {
  CounterRng rng(6);
  for (int t = 0; t < 500; ++t) {
    const std::size_t e = 2 + rng.below(5);
    std::vector<Tensor> f;
    std::vector<double> p(e);
    std::vector<std::uint8_t> m(e);
    for (std::size_t i = 0; i < e; ++i) {
      f.push_back(random_vector(3, rng));
      p[i] = rng.uniform(0.05, 1.0);
      m[i] = rng.below(2);
    }
    m[rng.below(e)] = 1;
    const double k = rng.uniform(0.1, 10.0);
    std::vector<double> scaled(p);
    for (auto& x : scaled) x *= k;
    const auto a = aggregate(Tensor::vector(p), m, f);
    const auto b = aggregate(Tensor::vector(scaled), m, f);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a[j], b[j], 1e-7);
  }
}

TEST(Classify, Examples) {
  CounterRng rng(7);
  auto p = init_moe(4, router(2), rng);
  fill(p.cls_w, 0.0);
  const auto o = random_vector(4, rng);
  for (double x : classify(o, p).probabilities.values()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
  p.cls_b.mutable_values()[0] = std::log(2.0);
  const auto pr = classify(o, p).probabilities;
  EXPECT_NEAR(pr[0], 0.5, 1e-15);
  EXPECT_NEAR(pr[1], 0.25, 1e-15);
  EXPECT_NEAR(pr[2], 0.25, 1e-15);
  auto q = init_moe(4, router(2), rng);
  const auto r = classify(random_vector(4, rng, 5.0), q).probabilities;
  EXPECT_NEAR(r[0] + r[1] + r[2], 1.0, 1e-12);
}

TEST(MoeForward, SingleDenseExpert) {
  CounterRng rng(8);
  const auto c = router(1, RoutingMode::dense);
  const auto p = init_moe(6, c, rng);
  const auto s = random_vector(6, rng);
  const auto out = moe_forward(s, p, c);
  const auto want = classify(expert_forward(s, 0, p, c.expert_dropout, ForwardMode::eval, nullptr), p).logits;
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.logits[j], want[j], 1e-12);
}

TEST(MoeForward, TopkOfAllEqualsDense) {
  CounterRng rng(9);
  const auto dense = router(7, RoutingMode::dense);
  const auto topk = router(7, RoutingMode::topk, 7);
  const auto p = init_moe(8, dense, rng);
  for (int t = 0; t < 1000; ++t) {
    const auto s = random_vector(8, rng, 3.0);
    const auto a = moe_forward(s, p, dense).logits;
    const auto b = moe_forward(s, p, topk).logits;
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a[j], b[j], 1e-9);
  }
}

TEST(MoeForward, TraceInvariants) {
  CounterRng rng(10);
  const auto c = router(7);
  const auto p = init_moe(8, c, rng);
  for (int t = 0; t < 1000; ++t) {
    const auto tr = moe_forward(random_vector(8, rng, 4.0), p, c).trace;
    double sum = 0;
    for (double x : tr.gate_probs) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_GT(tr.complexity, 0.0);
    EXPECT_LT(tr.complexity, 1.0);
    EXPECT_EQ(tr.rho_dynamic, c.rho_static + c.gamma * tr.complexity);
    EXPECT_GE(tr.rho_dynamic, 0.1);
    EXPECT_LE(tr.rho_dynamic, 0.2);
    EXPECT_GE(tr.active_count, 1u);
    std::size_t active = 0;
    for (std::size_t i = 0; i < 7; ++i) {
      active += tr.mask[i];
      if (!tr.fallback) { EXPECT_EQ(tr.mask[i] == 1, tr.gate_probs[i] > tr.rho_dynamic); }
    }
    EXPECT_EQ(active, tr.active_count);
  }
}

TEST(MoeForward, InactiveExpertsAreNeverEvaluated) {
  CounterRng rng(11);
  const auto c = router(7);
  auto p = init_moe(8, c, rng);
  int checked = 0;
  for (int t = 0; t < 200; ++t) {
    const auto s = random_vector(8, rng, 3.0);
    const auto before = moe_forward(s, p, c);
    for (std::size_t i = 0; i < 7; ++i) {
      if (before.trace.mask[i]) continue;
      const std::vector<double> saved(p.expert_w[i].values().begin(), p.expert_w[i].values().end());
      for (auto& x : p.expert_w[i].mutable_values()) x = rng.uniform(-100, 100);
      p.expert_b[i].mutable_values()[0] += 1e6;
      const auto after = moe_forward(s, p, c);
      EXPECT_TRUE(bit_equal(before.logits, after.logits));
      std::copy(saved.begin(), saved.end(), p.expert_w[i].mutable_values().begin());
      p.expert_b[i].mutable_values()[0] -= 1e6;
      ++checked;
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(MoeForward, LogitGradientsPassFiniteDifferences) {
  CounterRng rng(12);
  for (const auto mode : {RoutingMode::dynamic, RoutingMode::topk, RoutingMode::dense}) {
    const auto c = router(3, mode, 2);
    const auto p = init_moe(5, c, rng);
    Tensor s = random_vector(5, rng);
    s.set_tracked(true);
    const auto mask = [&] {
      const auto r = moe_forward(s, p, c).trace;
      return ExpertMask{r.mask, r.fallback};
    }();
    MoeForwardOptions o;
    o.forced_mask = &mask;
    const auto readout = random_vector(3, rng);
    std::vector<NamedParameter> named;
    p.collect(named);
    std::vector<Tensor> ps = {s};
    for (auto& n : named) ps.push_back(n.tensor);
    const auto f = [&] { return sum(mul(moe_forward(s, p, c, o).logits, readout)); };
    EXPECT_LE(finite_diff_check(f, ps, 1e-5).max_relative_error, 1e-4);
  }
}

TEST(MoeForward, DisabledBlockClassifiesInput) {
  CounterRng rng(13);
  auto c = router(3);
  c.enabled = false;
  const auto p = init_moe(4, c, rng);
  const auto s = random_vector(4, rng);
  const auto out = moe_forward(s, p, c);
  EXPECT_TRUE(bit_equal(out.logits, classify(s, p).logits));
  EXPECT_FALSE(out.gate_probs.defined());
}

TEST(Utilization, Examples) {
  RoutingTrace a, b;
  a.mask = {1, 1, 1};
  EXPECT_EQ(expert_utilization({a, a}), (std::vector<double>{1, 1, 1}));
  a.mask = {1, 0, 1};
  EXPECT_EQ(expert_utilization({a}), (std::vector<double>{1, 0, 1}));
  a.mask = {1, 0};
  b.mask = {0, 1};
  EXPECT_EQ(expert_utilization({a, b}), (std::vector<double>{0.5, 0.5}));
  EXPECT_THROW(expert_utilization({}), ContractError);
  EXPECT_EQ(utilization_skew({0.9, 0.2, 0.5}), 0.9 - 0.2);
}

TEST(Utilization, ByTag) {
  RoutingTrace a, b;
  a.mask = {1, 0};
  b.mask = {0, 1};
  const auto by = expert_utilization_by_tag({a, b, a}, {{"SLI"}, {"SLI", "LR"}, {}});
  ASSERT_EQ(by.size(), 2u);
  EXPECT_EQ(by.at("SLI"), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(by.at("LR"), (std::vector<double>{0, 1}));
}

TEST(Router, ValidationAndParsing) {
  RouterConfig c = router(7, RoutingMode::topk, 8);
  EXPECT_THROW(validate(c), ConfigError);
  c = router(7);
  c.rho_static = 0.6;
  c.gamma = 0.5;
  EXPECT_THROW(validate(c), ConfigError);
  c = router(0);
  EXPECT_THROW(validate(c), ConfigError);
  c = router(7);
  parse_routing("topk:3", c);
  EXPECT_EQ(c.mode, RoutingMode::topk);
  EXPECT_EQ(c.top_k, 3u);
  EXPECT_EQ(routing_name(c), "topk:3");
  EXPECT_THROW(parse_routing("topk:x", c), ConfigError);
  EXPECT_THROW(parse_routing("sparse", c), ConfigError);
}

TEST(Traces, ExportFormat) {
  RoutingTrace t;
  t.gate_probs = {0.75, 0.25};
  t.complexity = 0.5;
  t.rho_dynamic = 0.15;
  t.mask = {1, 0};
  t.active_count = 1;
  std::ostringstream out;
  write_traces(out, {t}, {"ex1"});
  EXPECT_EQ(out.str(),
            "id\tcomplexity\trho_dynamic\tp0\tp1\tm0\tm1\tfallback\n"
            "ex1\t0.5\t0.14999999999999999\t0.75\t0.25\t1\t0\t0\n");
}
