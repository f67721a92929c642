#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "lmdepth/decoder.hpp"
#include "oracles.hpp"
#include "grad_cases.hpp"

using namespace th;

TEST(Tensor, ShapeInvariants) {
  Tensor<D> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(shape_numel(t.shape()), t.size());
  EXPECT_THROW(Tensor<D>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<D>(Shape{2, 2}, std::vector<D>{1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor<D>::scalar(3.0).size(), 1u);
}

TEST(Tensor, GradHasValueShape) {
  auto x = Var<D>::parameter(Tensor<D>::from(Shape{2, 2}, {1, 2, 3, 4}));
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(x.grad_tensor().shape(), x.shape());
}

TEST(Matmul, Examples) {
  auto I = constant(Tensor<D>::from(Shape{2, 2}, {1, 0, 0, 1}));
  auto v = constant(Tensor<D>::from(Shape{2, 1}, {3, 4}));
  EXPECT_EQ(ops::matmul(I, v).value(), v.value());
  auto a = constant(Tensor<D>::from(Shape{1, 2}, {1, 2}));
  EXPECT_EQ(ops::matmul(a, v).item(), 11.0);
  EXPECT_THROW(ops::matmul(a, a), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = rand(Shape{4, 5}, rng), b = rand(Shape{5, 3}, rng);
    EXPECT_LT(max_abs_diff(ops::matmul(constant(a), constant(b)).value(), oracle::matmul(a, b)), 1e-12);
  }
}

TEST(Conv2d, Examples) {
  auto x = constant(Tensor<D>(Shape{1, 3, 3}, 1.0));
  auto w = constant(Tensor<D>(Shape{1, 1, 1, 1}, 2.0));
  EXPECT_EQ(ops::conv2d(x, w, Var<D>{}).value(), Tensor<D>(Shape{1, 3, 3}, 2.0));
  auto x2 = constant(Tensor<D>::from(Shape{1, 2, 2}, {1, 2, 3, 4}));
  auto w2 = constant(Tensor<D>(Shape{1, 1, 2, 2}, 1.0));
  EXPECT_EQ(ops::conv2d(x2, w2, Var<D>{}).item(), 10.0);
}

TEST(Conv2d, NonIntegralOutputIsShapeError) {
  auto x = constant(Tensor<D>(Shape{1, 4, 4}, 1.0));
  auto w = constant(Tensor<D>(Shape{1, 1, 3, 3}, 1.0));
  EXPECT_THROW(ops::conv2d(x, w, Var<D>{}, {2, 1, 1}), ShapeError);
  auto w2 = constant(Tensor<D>(Shape{2, 1, 1, 1}, 1.0));
  auto x3 = constant(Tensor<D>(Shape{3, 2, 2}, 1.0));
  EXPECT_THROW(ops::conv2d(x3, w2, Var<D>{}, {1, 0, 2}), ShapeError);
}

TEST(Conv2d, MatchesDirectLoop) {
  Rng rng(2);
  struct Case {
    std::size_t cin, cout, k, stride, pad, groups, h, w;
  };
  for (Case c : {Case{3, 4, 3, 1, 1, 1, 6, 5}, Case{4, 6, 3, 2, 1, 2, 7, 7}, Case{5, 5, 3, 2, 0, 5, 9, 7},
                 Case{3, 8, 1, 1, 0, 1, 4, 4}, Case{6, 6, 3, 1, 1, 6, 5, 6}}) {
    auto x = rand(Shape{c.cin, c.h, c.w}, rng);
    auto w = rand(Shape{c.cout, c.cin / c.groups, c.k, c.k}, rng);
    auto b = rand(Shape{c.cout}, rng);
    auto y = ops::conv2d(constant(x), constant(w), constant(b), {c.stride, c.pad, c.groups});
    auto ref = oracle::conv2d(x, w, {b.data().begin(), b.data().end()}, c.stride, c.pad, c.groups);
    EXPECT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y.value(), ref), 1e-12);
  }
}

TEST(Conv1d, Examples) {
  auto x = constant(Tensor<D>::from(Shape{3, 1}, {1, 2, 3}));
  auto id = ops::conv1d_depthwise(x, constant(Tensor<D>(Shape{1, 1}, 1.0)), Var<D>{});
  EXPECT_EQ(id.value(), x.value());
  auto w01 = ops::conv1d_depthwise(x, constant(Tensor<D>::from(Shape{1, 2}, {0, 1})), Var<D>{});
  EXPECT_EQ(w01.value(), Tensor<D>::from(Shape{3, 1}, {1, 2, 3}));
  auto w10 = ops::conv1d_depthwise(x, constant(Tensor<D>::from(Shape{1, 2}, {1, 0})), Var<D>{});
  EXPECT_EQ(w10.value(), Tensor<D>::from(Shape{3, 1}, {0, 1, 2}));
}

TEST(Conv1d, MatchesPaddedLoop) {
  Rng rng(3);
  for (std::size_t k : {1u, 2u, 3u, 5u}) {
    auto x = rand(Shape{9, 4}, rng), w = rand(Shape{4, k}, rng), b = rand(Shape{4}, rng);
    auto y = ops::conv1d_depthwise(constant(x), constant(w), constant(b));
    auto ref = oracle::conv1d_depthwise(x, w, {b.data().begin(), b.data().end()});
    EXPECT_LT(max_abs_diff(y.value(), ref), 1e-12);
  }
}

TEST(Pointwise, Examples) {
  auto z = constant(Tensor<D>::from(Shape{1}, {0.0}));
  EXPECT_EQ(ops::silu(z).item(), 0.0);
  EXPECT_NEAR(ops::softplus(z).item(), std::log(2.0), 1e-15);
  EXPECT_THROW(ops::log(z), DomainError);
  EXPECT_THROW(ops::log(constant(Tensor<D>::from(Shape{2}, {1.0, -1.0}))), DomainError);
  EXPECT_THROW(ops::add(z, constant(Tensor<D>(Shape{2}))), ShapeError);
}

TEST(Pointwise, SiluMatchesFormula) {
  Rng rng(4);
  auto x = rand(Shape{64}, rng, -6, 6);
  auto y = ops::silu(constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] * (1.0 / (1.0 + std::exp(-x[i]))), 1e-12);
}

TEST(Softmax, Examples) {
  auto a = ops::softmax(constant(Tensor<D>::from(Shape{2}, {0, 0})), 0).value();
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(a[1], 0.5);
  auto b = ops::softmax(constant(Tensor<D>::from(Shape{2}, {std::log(1.0), std::log(3.0)})), 0).value();
  EXPECT_NEAR(b[0], 0.25, 1e-15);
  EXPECT_NEAR(b[1], 0.75, 1e-15);
}

TEST(Softmax, ProbabilityVectorAndShiftInvariance) {
  Rng rng(5);
  auto x = rand(Shape{16, 64}, rng, -10, 10);
  auto p = ops::softmax(constant(x), 1).value();
  Tensor<D> shifted = x;
  for (auto& v : shifted.storage()) v += 7.25;
  auto q = ops::softmax(constant(shifted), 1).value();
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 64; ++c) {
      EXPECT_GE(p.at(r, c), 0.0);
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_LT(max_abs_diff(p, q), 1e-10);
  // Axis 0 normalizes columns.
  auto pc = ops::softmax(constant(x), 0).value();
  for (std::size_t c = 0; c < 64; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 16; ++r) s += pc.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LayerNorm, Examples) {
  auto g = constant(Tensor<D>(Shape{3}, 1.0)), b = constant(Tensor<D>(Shape{3}));
  auto y = ops::layer_norm(constant(Tensor<D>(Shape{1, 3}, 4.0)), g, b);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
  auto g2 = constant(Tensor<D>(Shape{2}, 1.0)), b2 = constant(Tensor<D>(Shape{2}));
  auto y2 = ops::layer_norm(constant(Tensor<D>::from(Shape{1, 2}, {-1, 1})), g2, b2, 1e-300).value();
  EXPECT_NEAR(y2[0], -1.0, 1e-15);
  EXPECT_NEAR(y2[1], 1.0, 1e-15);
}

TEST(LayerNorm, RowStatistics) {
  Rng rng(6);
  const std::size_t L = 8, Dm = 32;
  auto x = rand(Shape{L, Dm}, rng, -3, 5);
  auto y = ops::layer_norm(constant(x), constant(Tensor<D>(Shape{Dm}, 1.0)), constant(Tensor<D>(Shape{Dm}))).value();
  for (std::size_t r = 0; r < L; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < Dm; ++c) m += y.at(r, c);
    m /= Dm;
    for (std::size_t c = 0; c < Dm; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= Dm;
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_LT(std::abs(v - 1.0), 1e-4);
  }
}

TEST(PoolUpsample, Examples) {
  auto x = constant(Tensor<D>::from(Shape{1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(ops::pool_avg(x, 2).item(), 2.5);
  EXPECT_EQ(ops::pool_avg(x, 1).value(), x.value());
  EXPECT_THROW(ops::pool_avg(constant(Tensor<D>(Shape{1, 3, 3})), 2), ShapeError);
  auto c = ops::upsample_bilinear(constant(Tensor<D>(Shape{1, 2, 2}, 5.0)), 4, 4);
  EXPECT_EQ(c.value(), Tensor<D>(Shape{1, 4, 4}, 5.0));
}

TEST(Backward, Examples) {
  auto x = Var<D>::parameter(Tensor<D>(Shape{2, 3}, 0.7));
  backward(ops::sum(x));
  for (auto g : x.grad()) EXPECT_EQ(g, 1.0);
  auto y = Var<D>::parameter(Tensor<D>::from(Shape{1}, {3.0}));
  backward(ops::sum(ops::mul(y, y)));
  EXPECT_EQ(y.grad()[0], 6.0);
  EXPECT_THROW(backward(ops::mul(x, x)), ContractError);
}

TEST(Backward, AccumulatesUntilZeroed) {
  auto x = Var<D>::parameter(Tensor<D>::from(Shape{2}, {1.0, -2.0}));
  backward(ops::sum(ops::scale(x, 3.0)));
  backward(ops::sum(ops::scale(x, 3.0)));
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  backward(ops::sum(x));
  EXPECT_EQ(x.grad()[1], 1.0);
}

TEST(Graph, TopologicalAndVisitedOnce) {
  auto a = Var<D>::parameter(Tensor<D>(Shape{3}, 2.0));
  auto b = ops::mul(a, a);
  auto c = ops::add(b, a);  // a feeds two nodes, b feeds one
  auto loss = ops::sum(ops::add(c, b));
  Graph<D> g(loss);
  const auto& nodes = g.nodes();
  std::map<const void*, std::size_t> pos;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    EXPECT_TRUE(pos.emplace(nodes[i], i).second) << "node listed twice";
  }
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i]->inputs) {
      if (!in->requires_grad) continue;
      auto it = pos.find(in.get());
      ASSERT_NE(it, pos.end());
      EXPECT_LT(it->second, i);
    }
  backward(loss);
  // d/da sum(2a^2 + a) = 4a + 1
  for (auto v : a.grad()) EXPECT_EQ(v, 9.0);
}

TEST(FiniteDiff, Examples) {
  Rng rng(7);
  EXPECT_EQ(finite_diff_check<D>([](const Var<D>& x) { return ops::sum(x); }, rand(Shape{1}, rng)), 0.0);
  EXPECT_LT(finite_diff_check<D>([](const Var<D>& x) { return ops::sum(x); }, rand(Shape{4, 3}, rng)), 1e-10);
  EXPECT_LT(finite_diff_check<D>([](const Var<D>& x) { return ops::sum(ops::silu(x)); }, rand(Shape{10}, rng, -3, 3)),
            1e-4);
}

// Every differentiable primitive, 10 random inputs each.
TEST(GradientSoundness, AllPrimitives) {
  PrimitiveGradSuite suite(8);
  auto& cases = suite.cases;
  for (auto& c : cases) {
    for (int trial = 0; trial < 10; ++trial) {
      const double err = finite_diff_check<D>(c.f, c.input());
      EXPECT_LT(err, 1e-4) << c.name << " trial " << trial;
    }
  }
}

TEST(Linearity, LinearOps) {
  Rng rng(9);
  auto check = [](const std::function<Tensor<D>(const Tensor<D>&)>& f, const Tensor<D>& a, const Tensor<D>& b) {
    Tensor<D> s = a;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += b[i];
    Tensor<D> fa = f(a), fb = f(b), fs = f(s);
    for (std::size_t i = 0; i < fs.size(); ++i) fa[i] += fb[i];
    return max_abs_diff(fs, fa);
  };
  auto W = rand(Shape{5, 3}, rng);
  auto X = rand(Shape{4, 5}, rng);
  auto cw = rand(Shape{3, 2, 3, 3}, rng);
  auto cx = rand(Shape{2, 7, 7}, rng);
  auto k = rand(Shape{4, 3}, rng);
  auto tx = rand(Shape{7, 4}, rng);
  for (int t = 0; t < 5; ++t) {
    EXPECT_LT(check([&](const Tensor<D>& a) { return ops::matmul(constant(a), constant(W)).value(); },
                    rand(Shape{4, 5}, rng), rand(Shape{4, 5}, rng)),
              1e-10);
    EXPECT_LT(check([&](const Tensor<D>& b) { return ops::matmul(constant(X), constant(b)).value(); },
                    rand(Shape{5, 3}, rng), rand(Shape{5, 3}, rng)),
              1e-10);
    EXPECT_LT(check([&](const Tensor<D>& x) { return ops::conv2d(constant(x), constant(cw), Var<D>{}, {1, 1, 1}).value(); },
                    rand(Shape{2, 6, 6}, rng), rand(Shape{2, 6, 6}, rng)),
              1e-10);
    EXPECT_LT(check([&](const Tensor<D>& w) { return ops::conv2d(constant(cx), constant(w), Var<D>{}, {2, 1, 1}).value(); },
                    rand(Shape{3, 2, 3, 3}, rng), rand(Shape{3, 2, 3, 3}, rng)),
              1e-10);
    EXPECT_LT(check([&](const Tensor<D>& x) { return ops::conv1d_depthwise(constant(x), constant(k), Var<D>{}).value(); },
                    rand(Shape{7, 4}, rng), rand(Shape{7, 4}, rng)),
              1e-10);
    EXPECT_LT(check([&](const Tensor<D>& w) { return ops::conv1d_depthwise(constant(tx), constant(w), Var<D>{}).value(); },
                    rand(Shape{4, 3}, rng), rand(Shape{4, 3}, rng)),
              1e-10);
    EXPECT_LT(check([](const Tensor<D>& x) { return ops::pool_avg(constant(x), 3).value(); }, rand(Shape{2, 6, 9}, rng),
                    rand(Shape{2, 6, 9}, rng)),
              1e-10);
  }
}

TEST(Determinism, BitIdenticalRuns) {
  auto run = [] {
    Rng rng(42);
    auto x = Var<D>::parameter(rand(Shape{3, 8, 8}, rng));
    auto w = constant(rand(Shape{4, 3, 3, 3}, rng));
    auto y = ops::softmax(ops::reshape(ops::conv2d(x, w, Var<D>{}, {1, 1, 1}), Shape{4, 64}), 1);
    backward(weighted_sum(y));
    return std::make_pair(y.value(), x.grad_tensor());
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}
