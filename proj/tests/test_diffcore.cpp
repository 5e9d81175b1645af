#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "bhn/graph.hpp"
#include "test_support.hpp"

using namespace bhn;
using namespace bhn::diff;
using bhn::testing::max_rel_err;
using bhn::testing::numeric_gradient;

namespace {

double eval_scalar(const Graph& g, Bindings b, const std::string& leaf, const Tensor& x) {
  b[leaf] = x;
  return evaluate(g, b).item();
}

// Compares reverse-mode gradients of `out` against central differences for
// every leaf in `b`.
void expect_gradients_match(const Graph& g, const Bindings& b, double tol = 1e-4) {
  std::vector<std::string> names;
  for (const auto& [name, _] : b) names.push_back(name);
  const auto grads = gradient(g, b, "out", names);
  for (const auto& name : names) {
    const Tensor num = numeric_gradient(
        [&](const Tensor& x) { return eval_scalar(g, b, name, x); }, b.at(name));
    EXPECT_LT(max_rel_err(grads.at(name), num), tol) << "leaf " << name;
  }
}

}  // namespace

TEST(Evaluate, SquareOfLeaf) {
  Graph g;
  auto x = g.leaf("x");
  g.set_output("out", x * x);
  EXPECT_DOUBLE_EQ(evaluate(g, {{"x", Tensor::scalar(3)}}).item(), 9.0);
  auto grad = gradient(g, {{"x", Tensor::scalar(3)}}, "out", {"x"});
  EXPECT_DOUBLE_EQ(grad.at("x").item(), 6.0);
}

TEST(Evaluate, MatmulShape) {
  Graph g;
  g.set_output("out", matmul(g.leaf("A"), g.leaf("B")));
  auto r = evaluate(g, {{"A", Tensor(Shape{2, 3}, 1.0)}, {"B", Tensor(Shape{3, 1}, 2.0)}});
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(r[0], 6.0);
}

TEST(Evaluate, SoftplusAtZero) {
  Graph g;
  g.set_output("out", softplus(g.leaf("x")));
  EXPECT_NEAR(evaluate(g, {{"x", Tensor::scalar(0)}}).item(), std::log(2.0), 1e-15);
}

TEST(Evaluate, UnboundLeafIsAnError) {
  Graph g;
  g.set_output("out", g.leaf("x") + g.leaf("y"));
  EXPECT_THROW(evaluate(g, {{"x", Tensor::scalar(1)}}), BindingError);
}

TEST(Evaluate, ShapeMismatchNamesTheNode) {
  Graph g;
  auto m = matmul(g.leaf("A"), g.leaf("B"));
  g.label(m, "layer0.pre");
  g.set_output("out", m);
  try {
    evaluate(g, {{"A", Tensor(Shape{2, 3})}, {"B", Tensor(Shape{2, 3})}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.pre"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Evaluate, BroadcastMismatchIsAnError) {
  Graph g;
  g.set_output("out", g.leaf("a") + g.leaf("b"));
  EXPECT_THROW(evaluate(g, {{"a", Tensor(Shape{2, 3})}, {"b", Tensor(Shape{3, 2})}}), ShapeError);
}

TEST(Evaluate, IsPure) {
  Rng rng(3);
  Graph g;
  auto x = g.leaf("x");
  g.set_output("out", sum(tanh(matmul(x, transpose(x))) * exp(x * 0.1 - 1.0)));
  Bindings b{{"x", rng.uniform_tensor({4, 4}, -2, 2)}};
  const Tensor first = evaluate(g, b);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(evaluate(g, b), first);
}

TEST(Gradient, ConstantGraphGivesZero) {
  Graph g;
  g.leaf("x");
  g.set_output("out", g.scalar(4.0));
  auto grad = gradient(g, {{"x", Tensor(Shape{2, 2}, 1.0)}}, "out", {"x"});
  EXPECT_EQ(grad.at("x"), Tensor(Shape{2, 2}, 0.0));
}

TEST(Gradient, NonScalarOutputIsAnError) {
  Graph g;
  g.set_output("out", g.leaf("x") * 2.0);
  EXPECT_THROW(gradient(g, {{"x", Tensor(Shape{3})}}, "out", {"x"}), ShapeError);
}

TEST(Gradient, NonLeafRequestIsAnError) {
  Graph g;
  g.set_output("out", sum(g.leaf("x")));
  EXPECT_THROW(gradient(g, {{"x", Tensor(Shape{3})}}, "out", {"out"}), BindingError);
}

TEST(Gradient, ClipPassesOnlyInsideRange) {
  Graph g;
  g.set_output("out", sum(g.clip(g.leaf("x"), -0.5, 0.5)));
  Tensor x = Tensor::vector({-1.0, -0.5, -0.2, 0.0, 0.3, 0.5, 2.0});
  auto grad = gradient(g, {{"x", x}}, "out", {"x"}).at("x");
  const std::vector<double> want{0, 0, 1, 1, 1, 0, 0};
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(grad[i], want[i]) << "x=" << x[i];
}

TEST(Gradient, SignIsFlat) {
  Graph g;
  g.set_output("out", sum(g.sign(g.leaf("x")) * g.leaf("x")));
  Tensor x = Tensor::vector({-1.5, 0.7});
  auto grad = gradient(g, {{"x", x}}, "out", {"x"}).at("x");
  // d/dx [sign(x) * x] with flat sign = sign(x)
  EXPECT_EQ(grad[0], -1.0);
  EXPECT_EQ(grad[1], 1.0);
}

// Each primitive, wrapped as sum(w * op(...)) with random weights w.
struct PrimitiveCase {
  const char* name;
  std::function<Var(Graph&)> build;
  Bindings inputs;
};

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

std::vector<PrimitiveCase> primitive_cases() {
  Rng rng(11);
  auto U = [&](Shape s, double lo = -2, double hi = 2) { return rng.uniform_tensor(std::move(s), lo, hi); };
  std::vector<PrimitiveCase> cs;
  auto weighted = [](Graph& g, Var y) { return sum(y * g.leaf("w")); };
  cs.push_back({"add", [=](Graph& g) { return weighted(g, g.leaf("a") + g.leaf("b")); },
                {{"a", U({3, 4})}, {"b", U({1, 4})}, {"w", U({3, 4})}}});
  cs.push_back({"subtract", [=](Graph& g) { return weighted(g, g.leaf("a") - g.leaf("b")); },
                {{"a", U({3, 4})}, {"b", U({3, 1})}, {"w", U({3, 4})}}});
  cs.push_back({"multiply", [=](Graph& g) { return weighted(g, g.leaf("a") * g.leaf("b")); },
                {{"a", U({3, 4})}, {"b", U({4})}, {"w", U({3, 4})}}});
  cs.push_back({"divide", [=](Graph& g) { return weighted(g, g.leaf("a") / g.leaf("b")); },
                {{"a", U({3, 4})}, {"b", U({3, 4}, 0.5, 2)}, {"w", U({3, 4})}}});
  cs.push_back({"matmul", [=](Graph& g) { return weighted(g, matmul(g.leaf("a"), g.leaf("b"))); },
                {{"a", U({3, 5})}, {"b", U({5, 2})}, {"w", U({3, 2})}}});
  cs.push_back({"exp", [=](Graph& g) { return weighted(g, exp(g.leaf("a"))); }, {{"a", U({2, 3})}, {"w", U({2, 3})}}});
  cs.push_back({"log", [=](Graph& g) { return weighted(g, log(g.leaf("a"))); },
                {{"a", U({2, 3}, 0.2, 2)}, {"w", U({2, 3})}}});
  cs.push_back({"tanh", [=](Graph& g) { return weighted(g, tanh(g.leaf("a"))); }, {{"a", U({2, 3})}, {"w", U({2, 3})}}});
  cs.push_back({"sigmoid", [=](Graph& g) { return weighted(g, sigmoid(g.leaf("a"))); },
                {{"a", U({2, 3})}, {"w", U({2, 3})}}});
  cs.push_back({"relu", [=](Graph& g) { return weighted(g, relu(g.leaf("a"))); }, {{"a", U({2, 3})}, {"w", U({2, 3})}}});
  cs.push_back({"softplus", [=](Graph& g) { return weighted(g, softplus(g.leaf("a"))); },
                {{"a", U({2, 3})}, {"w", U({2, 3})}}});
  cs.push_back({"square", [=](Graph& g) { return weighted(g, square(g.leaf("a"))); }, {{"a", U({2, 3})}, {"w", U({2, 3})}}});
  cs.push_back({"sqrt", [=](Graph& g) { return weighted(g, g.sqrt(g.leaf("a"))); },
                {{"a", U({2, 3}, 0.2, 2)}, {"w", U({2, 3})}}});
  cs.push_back({"affine", [=](Graph& g) { return weighted(g, g.leaf("a") * 1.7 - 0.3); }, {{"a", U({4})}, {"w", U({4})}}});
  cs.push_back({"sum", [=](Graph& g) { return sum(g.leaf("a")) * g.leaf("w"); }, {{"a", U({2, 3})}, {"w", U({})}}});
  cs.push_back({"mean", [=](Graph& g) { return mean(g.leaf("a")) * g.leaf("w"); }, {{"a", U({2, 3})}, {"w", U({})}}});
  cs.push_back({"sum_axis0", [=](Graph& g) { return weighted(g, sum(g.leaf("a"), 0)); }, {{"a", U({3, 4})}, {"w", U({1, 4})}}});
  cs.push_back({"sum_axis1", [=](Graph& g) { return weighted(g, sum(g.leaf("a"), 1)); }, {{"a", U({3, 4})}, {"w", U({3, 1})}}});
  cs.push_back({"l2norm_axis1", [=](Graph& g) { return weighted(g, g.l2norm(g.leaf("a"), 1)); },
                {{"a", U({3, 4})}, {"w", U({3, 1})}}});
  cs.push_back({"l2norm_axis0", [=](Graph& g) { return weighted(g, g.l2norm(g.leaf("a"), 0)); },
                {{"a", U({3, 4})}, {"w", U({1, 4})}}});
  cs.push_back({"transpose", [=](Graph& g) { return weighted(g, transpose(g.leaf("a"))); }, {{"a", U({2, 3})}, {"w", U({3, 2})}}});
  cs.push_back({"softmax", [=](Graph& g) { return weighted(g, g.softmax(g.leaf("a"))); }, {{"a", U({3, 4})}, {"w", U({3, 4})}}});
  cs.push_back({"clip", [=](Graph& g) { return weighted(g, g.clip(g.leaf("a"), -1.0, 1.0)); }, {{"a", U({3, 4})}, {"w", U({3, 4})}}});
  cs.push_back({"gather", [=](Graph& g) { return weighted(g, g.gather(g.leaf("a"), {3, 0, 3})); },
                {{"a", U({2, 4})}, {"w", U({2, 3})}}});
  cs.push_back({"scatter", [=](Graph& g) { return weighted(g, g.scatter(g.leaf("a"), {4, 1}, 5)); },
                {{"a", U({2, 2})}, {"w", U({2, 5})}}});
  cs.push_back({"gather_rows", [=](Graph& g) { return weighted(g, g.gather_rows(g.leaf("a"), g.constant(Tensor::vector({1, 1, 0})))); },
                {{"a", U({2, 3})}, {"w", U({3, 3})}}});
  cs.push_back({"pick", [=](Graph& g) { return weighted(g, g.pick(g.leaf("a"), g.constant(Tensor::vector({2, 0, 1})))); },
                {{"a", U({3, 3})}, {"w", U({3, 1})}}});
  cs.push_back({"negate", [=](Graph& g) { return weighted(g, -g.leaf("a")); }, {{"a", U({3})}, {"w", U({3})}}});
  return cs;
}

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  auto cases = primitive_cases();
  auto& c = cases[static_cast<std::size_t>(GetParam())];
  Graph g;
  g.set_output("out", c.build(g));
  SCOPED_TRACE(c.name);
  expect_gradients_match(g, c.inputs);
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range(0, static_cast<int>(primitive_cases().size())),
                         [](const auto& info) { return std::string(primitive_cases()[info.param].name); });

TEST(Gradient, ThreeLayerMlpMatchesFiniteDifferences) {
  Rng rng(5);
  Graph g;
  auto x = g.leaf("x");
  auto h1 = tanh(matmul(x, g.leaf("W1")) + g.leaf("b1"));
  auto h2 = softplus(matmul(h1, g.leaf("W2")) + g.leaf("b2"));
  auto logits = matmul(h2, g.leaf("W3")) + g.leaf("b3");
  auto p = g.softmax(logits);
  g.set_output("out", -sum(log(g.pick(p, g.leaf("y")))));
  Bindings b{{"x", rng.uniform_tensor({6, 4}, -2, 2)},   {"W1", rng.uniform_tensor({4, 5}, -1, 1)},
             {"b1", rng.uniform_tensor({5}, -1, 1)},     {"W2", rng.uniform_tensor({5, 5}, -1, 1)},
             {"b2", rng.uniform_tensor({5}, -1, 1)},     {"W3", rng.uniform_tensor({5, 3}, -1, 1)},
             {"b3", rng.uniform_tensor({3}, -1, 1)},     {"y", Tensor::vector({0, 1, 2, 2, 1, 0})}};
  auto grads = gradient(g, b, "out", {"x", "W1", "b1", "W2", "b2", "W3", "b3"});
  for (const auto& [name, gr] : grads) {
    auto num = numeric_gradient([&](const Tensor& t) { return eval_scalar(g, b, name, t); }, b.at(name));
    EXPECT_LT(max_rel_err(gr, num), 1e-4) << name;
  }
}

TEST(Gradient, UnreachableLeafGetsZeros) {
  Graph g;
  auto x = g.leaf("x");
  g.leaf("unused");
  g.set_output("out", sum(x));
  auto grad = gradient(g, {{"x", Tensor(Shape{2})}, {"unused", Tensor(Shape{3}, 7.0)}}, "out", {"unused"});
  EXPECT_EQ(grad.at("unused"), Tensor(Shape{3}, 0.0));
}
