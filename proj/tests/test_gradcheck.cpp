#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "nlimoe/commands.hpp"
#include "nlimoe/gradcheck.hpp"
#include "nlimoe/tensor.hpp"

using namespace nlimoe;

namespace {

Tensor random_param(Shape shape, CounterRng& rng, double spread = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-spread, spread);
  return Tensor(std::move(shape), std::move(v), true);
}

// A random composition of the differentiable ops on a small matrix.
struct RandomGraph {
  std::vector<Tensor> params;
  std::vector<std::function<Tensor(const Tensor&)>> steps;
  Tensor input;
  Tensor readout;

  explicit RandomGraph(CounterRng& rng) {
    std::size_t r = 2 + rng.below(3), c = 2 + rng.below(4);
    input = random_param({r, c}, rng);
    params.push_back(input);
    const std::size_t depth = 2 + rng.below(5);
    for (std::size_t d = 0; d < depth; ++d) {
      switch (rng.below(11)) {
        case 0: {
          const std::size_t k = 2 + rng.below(4);
          Tensor w = random_param({c, k}, rng);
          params.push_back(w);
          steps.push_back([w](const Tensor& x) { return matmul(x, w); });
          c = k;
          break;
        }
        case 1: {
          Tensor b = random_param({r, c}, rng);
          params.push_back(b);
          steps.push_back([b](const Tensor& x) { return add(x, b); });
          break;
        }
        case 2: {
          Tensor b = random_param({r, c}, rng);
          params.push_back(b);
          steps.push_back([b](const Tensor& x) { return mul(x, b); });
          break;
        }
        case 3:
          steps.push_back([](const Tensor& x) { return sigmoid(x); });
          break;
        case 4:
          steps.push_back([](const Tensor& x) { return softmax_rows(x); });
          break;
        case 5:
          steps.push_back([](const Tensor& x) { return log_softmax_rows(x); });
          break;
        case 6: {
          Tensor g = random_param({c}, rng);
          Tensor b = random_param({c}, rng);
          params.push_back(g);
          params.push_back(b);
          steps.push_back([g, b](const Tensor& x) { return layer_norm(x, g, b); });
          break;
        }
        case 7: {
          Tensor v = random_param({c}, rng);
          params.push_back(v);
          steps.push_back([v](const Tensor& x) { return add_rowwise(x, v); });
          break;
        }
        case 8:
          steps.push_back([](const Tensor& x) { return transpose(x); });
          std::swap(r, c);
          break;
        case 9: {
          Tensor s = random_param({}, rng);
          params.push_back(s);
          steps.push_back([s](const Tensor& x) { return sub(scale(x, 0.5), s); });
          break;
        }
        default:
          steps.push_back([](const Tensor& x) { return log(add(sigmoid(x), Tensor::scalar(0.1))); });
          break;
      }
    }
    std::vector<double> w(r * c);
    for (auto& x : w) x = rng.uniform(-1, 1);
    readout = Tensor::matrix(r, c, std::move(w));
  }

  Tensor operator()() const {
    Tensor x = input;
    for (const auto& s : steps) x = s(x);
    return sum(mul(x, readout));
  }
};

}  // namespace

TEST(FiniteDiff, QuadraticIsExact) {
  Tensor x = Tensor::vector({0.3, -1.2, 2.0}, true);
  std::vector<Tensor> ps = {x};
  const auto f = [&] { return add(sum(mul(x, x)), scale(sum(x), 3.0)); };
  const auto report = finite_diff_check(f, ps, 1e-5);
  EXPECT_LE(report.max_relative_error, 1e-8);
  EXPECT_EQ(report.coordinates, 3u);
}

TEST(FiniteDiff, RestoresParametersExactly) {
  CounterRng rng(1);
  Tensor x = random_param({3, 2}, rng);
  const std::vector<double> before(x.values().begin(), x.values().end());
  std::vector<Tensor> ps = {x};
  finite_diff_check([&] { return sum(sigmoid(x)); }, ps, 1e-4);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(x[i], before[i]);
}

TEST(FiniteDiff, NonDeterministicObjectiveIsRejected) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  std::vector<Tensor> ps = {x};
  CounterRng rng(3);
  const auto f = [&] { return sum(dropout(x, 0.5, ForwardMode::train, &rng)); };
  EXPECT_THROW(finite_diff_check(f, ps, 1e-4), ContractError);
  EXPECT_THROW(finite_diff_check([&] { return sum(x); }, ps, 0.0), ContractError);
}

TEST(FiniteDiff, DisconnectedParameter) {
  Tensor used = Tensor::vector({1.0, 2.0}, true);
  Tensor unused = Tensor::vector({3.0}, true);
  std::vector<Tensor> ps = {used, unused};
  const double h = 1e-4;
  const auto report = finite_diff_check([&] { return sum(mul(used, used)); }, ps, h, {"used", "unused"});
  ASSERT_EQ(report.parameters.size(), 2u);
  EXPECT_FALSE(report.parameters[0].no_gradient_path);
  EXPECT_TRUE(report.parameters[1].no_gradient_path);
  EXPECT_EQ(report.parameters[1].max_abs_analytic, 0.0);
  EXPECT_LE(report.parameters[1].max_abs_numeric, h * h);
}

TEST(FiniteDiff, HundredRandomGraphs) {
  CounterRng rng(2024);
  double worst = 0.0;
  for (int g = 0; g < 100; ++g) {
    RandomGraph graph(rng);
    const auto report = finite_diff_check(graph, graph.params, 1e-5);
    EXPECT_LE(report.max_relative_error, 1e-4) << "graph " << g;
    worst = std::max(worst, report.max_relative_error);
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(FiniteDiff, RelativeErrorDefinition) {
  EXPECT_EQ(relative_error(0.5, 0.25), 0.25);
  EXPECT_EQ(relative_error(10.0, 8.0), 0.2);
  EXPECT_EQ(relative_error(-4.0, -4.0), 0.0);
}

TEST(ModelGradcheck, ToyObjectivePasses) {
  RunConfig cfg = profile("toy");
  const auto outcome = cmd_gradcheck(cfg);
  EXPECT_TRUE(outcome.passed) << outcome.report.max_relative_error;
  EXPECT_LE(outcome.report.max_relative_error, 1e-4);
  EXPECT_EQ(cfg.encoder.dim, 8u);
  EXPECT_EQ(cfg.router.num_experts, 3u);
  EXPECT_EQ(cfg.batch_size, 4u);
  // The complexity gate only feeds the hard threshold.
  std::vector<std::string> want = {"moe.complexity_w", "moe.complexity_b"};
  EXPECT_EQ(outcome.no_gradient_path, want);
  std::ostringstream text;
  write_gradcheck_report(text, outcome);
  EXPECT_NE(text.str().find("PASS"), std::string::npos);
}

TEST(ModelGradcheck, FrozenGateIsListedNotChecked) {
  RunConfig cfg = profile("toy");
  cfg.freeze_complexity_gate = true;
  const auto outcome = cmd_gradcheck(cfg);
  EXPECT_TRUE(outcome.passed);
  std::vector<std::string> want = {"moe.complexity_w", "moe.complexity_b"};
  EXPECT_EQ(outcome.no_gradient_path, want);
  for (const auto& p : outcome.report.parameters) EXPECT_NE(p.name.rfind("moe.complexity", 0), 0u) << p.name;
}

TEST(ModelGradcheck, CorruptedOpIsCaught) {
  // Forward is the identity, backward doubles the gradient.
  auto broken = [](const Tensor& x) {
    auto* xn = x.node();
    return make_result(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), {x},
                       [xn](std::span<const double> g) {
                         auto gx = detail::sink(xn);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * g[i];
                       });
  };
  const auto outcome = cmd_gradcheck(profile("toy"), broken);
  EXPECT_FALSE(outcome.passed);
  EXPECT_GT(outcome.report.max_relative_error, 1e-2);
  std::ostringstream text;
  write_gradcheck_report(text, outcome);
  EXPECT_NE(text.str().find("FAIL"), std::string::npos);
}

TEST(ModelGradcheck, DenseAndTopkAndNoRouter) {
  for (const std::string routing : {"dense", "topk:2"}) {
    RunConfig cfg = profile("toy");
    parse_routing(routing, cfg.router);
    EXPECT_TRUE(cmd_gradcheck(cfg).passed) << routing;
  }
  RunConfig cfg = profile("toy");
  cfg.router.enabled = false;
  EXPECT_TRUE(cmd_gradcheck(cfg).passed);
}

TEST(ModelGradcheck, LargeModelRefused) {
  RunConfig cfg = profile("desk");
  EXPECT_THROW(cmd_gradcheck(cfg), ConfigError);
}
