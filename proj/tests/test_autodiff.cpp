#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "btgat/autodiff.hpp"
#include "btgat/gradcheck.hpp"
#include "btgat/random.hpp"
#include "support/grad_suite.hpp"

using namespace btgat;

namespace {

Tensor iota(Shape shape, double start = 0.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = start + static_cast<double>(i);
  return t;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({1, 1, 1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(strides_of(t.shape()), (std::vector<std::size_t>{12, 4, 1}));
  t.at({1, 2, 3}) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_EQ(Tensor::scalar(3.0).shape(), Shape{1});
}

TEST(Primitives, MatmulIdentity) {
  Rng rng(3);
  Tensor I({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) I.at({i, i}) = 1.0;
  const Tensor A = suite::random_tensor({3, 3}, rng);
  EXPECT_EQ(ops::matmul(Var(I), Var(A)).value(), A);
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  auto s = ops::softmax(Var(Tensor({3}, 0.0)), 0).value();
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Primitives, ConvAllOnesSamePadding) {
  Tensor x({4, 4, 1}, 1.0);
  Tensor w({3, 3, 1, 1}, 1.0);
  const Tensor y = ops::conv2d(Var(x), Var(w)).value();
  const double expected[4][4] = {{4, 6, 6, 4}, {6, 9, 9, 6}, {6, 9, 9, 6}, {4, 6, 6, 4}};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at({r, c, 0}), expected[r][c]);
}

TEST(Primitives, ConvBatchedMatchesPerImage) {
  Rng rng(9);
  const Tensor x = suite::random_tensor({2, 3, 4, 2}, rng);
  const Tensor w = suite::random_tensor({3, 3, 2, 3}, rng);
  const Tensor y = ops::conv2d(Var(x), Var(w)).value();
  for (std::size_t n = 0; n < 2; ++n) {
    const Tensor one = ops::conv2d(ops::reshape(ops::slice(Var(x), 0, n, 1), {3, 4, 2}), Var(w)).value();
    for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(one[i], y[n * one.size() + i]);
  }
}

TEST(Primitives, MaxPoolFirstOccurrenceTieBreak) {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 2, 1}, 1.0));
  Var y = ops::max_pool2d(x);
  EXPECT_EQ(y.value().item(), 1.0);
  const Tensor g = tape.backward(ops::sum(y))[x];
  EXPECT_EQ(g, Tensor::from({2, 2, 1}, {1, 0, 0, 0}));
}

TEST(Primitives, UpsampleNearest) {
  const Tensor y = ops::nearest_upsample2d(Var(Tensor::from({1, 2, 1}, {1, 2}))).value();
  EXPECT_EQ(y, Tensor::from({2, 4, 1}, {1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Primitives, ShapeErrorsNameTheOp) {
  try {
    ops::add(Var(Tensor({2, 3})), Var(Tensor({4})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(Var(Tensor({2, 3})), Var(Tensor({2, 3}))), ShapeError);
  EXPECT_THROW(ops::conv2d(Var(Tensor({4, 4, 2})), Var(Tensor({2, 2, 2, 1}))), ShapeError);
}

TEST(Primitives, CheckFiniteAttribute) {
  OpAttrs a;
  a.check_finite = true;
  const Var in[] = {Var(Tensor::from({1}, {-1.0}))};
  EXPECT_THROW(apply_primitive(Op::sqrt, in, a), NonFiniteError);
  EXPECT_NO_THROW(apply_primitive(Op::sqrt, in));
}

TEST(Primitives, DispatchMatchesDirectCalls) {
  Rng rng(4);
  const Tensor a = suite::random_tensor({2, 3}, rng);
  const Var in[] = {Var(a)};
  OpAttrs sum_attrs;
  sum_attrs.axes = {1};
  EXPECT_EQ(apply_primitive(Op::sum, in, sum_attrs).value(), ops::sum(Var(a), {1}).value());
  OpAttrs tr;
  tr.perm = {1, 0};
  EXPECT_EQ(apply_primitive(Op::transpose, in, tr).value(), ops::transpose(Var(a), {1, 0}).value());
}

TEST(Primitives, SoftmaxAndLayerNormProperties) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor x = suite::random_tensor({3, 5}, rng, -20.0, 20.0);
    const Tensor s = ops::softmax(Var(x), 1).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_GE(s.at({r, c}), 0.0);
        total += s.at({r, c});
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    const Tensor n = ops::layer_norm(Var(x)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < 5; ++c) mean += n.at({r, c}) / 5.0;
      for (std::size_t c = 0; c < 5; ++c) var += (n.at({r, c}) - mean) * (n.at({r, c}) - mean) / 5.0;
      EXPECT_LT(std::abs(mean), 1e-9);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
  }
}

TEST(Primitives, RoundTripsAreBitExact) {
  Rng rng(5);
  const Tensor x = suite::random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(ops::reshape(ops::reshape(Var(x), {6, 4}), {2, 3, 4}).value(), x);
  EXPECT_EQ(ops::transpose(ops::transpose(Var(x), {2, 0, 1}), {1, 2, 0}).value(), x);
  const Var parts[] = {ops::slice(Var(x), 1, 0, 1), ops::slice(Var(x), 1, 1, 2)};
  EXPECT_EQ(ops::concat(parts, 1).value(), x);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Var x = tape.leaf(iota({2, 3}));
  EXPECT_EQ(tape.backward(ops::sum(x))[x], Tensor({2, 3}, 1.0));
}

TEST(Backward, MseAtMinimumIsZero) {
  Tape tape;
  const Tensor v = iota({4});
  Var x = tape.leaf(v);
  Var y = tape.leaf(v);
  auto g = tape.backward(ops::mean(ops::square(ops::sub(x, y))));
  EXPECT_EQ(g[x], Tensor({4}, 0.0));
}

TEST(Backward, SigmoidChainRule) {
  Tape tape;
  Var w = tape.leaf(Tensor({2}, 0.0));
  Var root = ops::sigmoid(ops::sum(ops::mul(w, Var(Tensor::from({2}, {1, 2})))));
  const Tensor g = tape.backward(root)[w];
  EXPECT_DOUBLE_EQ(g[0], 0.25);
  EXPECT_DOUBLE_EQ(g[1], 0.5);
}

TEST(Backward, UnreachableLeafGetsZeros) {
  Tape tape;
  Var x = tape.leaf(iota({3}));
  Var unused = tape.leaf(iota({2, 2}));
  auto g = tape.backward(ops::sum(x));
  EXPECT_EQ(g[unused], Tensor({2, 2}, 0.0));
}

TEST(Backward, RejectsNonScalarAndConsumedTape) {
  Tape tape;
  Var x = tape.leaf(iota({3}));
  EXPECT_THROW(tape.backward(ops::square(x)), std::invalid_argument);
  Var s = ops::sum(x);
  tape.backward(s);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(s), std::logic_error);
}

TEST(GradCheck, SumOfSquares) {
  auto f = [](Tape&, const Var& x) { return ops::sum(ops::square(x)); };
  const auto r = grad_check(f, Tensor::from({3}, {1, -2, 3}), 1e-5, 1e-6);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, ConstantFunctionPasses) {
  auto f = [](Tape&, const Var&) { return Var(Tensor::scalar(4.0)); };
  EXPECT_TRUE(grad_check(f, Tensor({2}, 1.0), 1e-5, 1e-4).passed);
}

TEST(GradCheck, RejectsBadEpsAndNonFinite) {
  auto f = [](Tape&, const Var& x) { return ops::sum(x); };
  EXPECT_THROW(grad_check(f, Tensor({1}, 1.0), 1e-2, 1e-4), std::invalid_argument);
  auto g = [](Tape&, const Var& x) { return ops::sum(ops::log(x)); };
  EXPECT_THROW(grad_check(g, Tensor({1}, 0.0), 1e-5, 1e-4), NonFiniteError);
}

TEST(GradCheck, DetectsWrongGradient) {
  // relu' at exactly 0 is one-sided; a kink straddled by the stencil fails.
  auto f = [](Tape&, const Var& x) { return ops::sum(ops::relu(x)); };
  EXPECT_FALSE(grad_check(f, Tensor({1}, 0.0), 1e-5, 1e-4).passed);
}

namespace {

using Unary = std::function<Var(const Var&)>;

struct PrimitiveCase {
  const char* name;
  Unary op;
  double lo, hi;
  bool spatial;  // needs (H, W, C) input with even extents
};

}  // namespace

TEST(GradCheck, EveryPrimitiveOverTwentySeeds) {
  const std::vector<PrimitiveCase> cases = {
      {"sigmoid", [](const Var& x) { return ops::sigmoid(x); }, -2, 2, false},
      {"tanh", [](const Var& x) { return ops::tanh(x); }, -2, 2, false},
      {"relu", [](const Var& x) { return ops::relu(x); }, -2, 2, false},
      {"square", [](const Var& x) { return ops::square(x); }, -2, 2, false},
      {"sqrt", [](const Var& x) { return ops::sqrt(x); }, 0.5, 2, false},
      {"log", [](const Var& x) { return ops::log(x); }, 0.5, 2, false},
      {"exp", [](const Var& x) { return ops::exp(x); }, -1, 1, false},
      {"pow", [](const Var& x) { return ops::pow(x, -1.5); }, 0.5, 2, false},
      {"clamp_min", [](const Var& x) { return ops::clamp_min(x, 0.1); }, -1, 1, false},
      {"softmax", [](const Var& x) { return ops::softmax(x, -1); }, -2, 2, false},
      {"layer_norm", [](const Var& x) { return ops::layer_norm(x); }, -2, 2, false},
      {"mean", [](const Var& x) { return ops::mean(x, {0}, true); }, -2, 2, false},
      {"sum", [](const Var& x) { return ops::sum(x, {1}); }, -2, 2, false},
      {"transpose", [](const Var& x) { return ops::transpose(x, {1, 0, 2}); }, -2, 2, false},
      {"slice", [](const Var& x) { return ops::slice(x, 1, 1, x.shape()[1] - 1); }, -2, 2, false},
      {"reshape", [](const Var& x) { return ops::reshape(x, {x.value().size()}); }, -2, 2, false},
      {"broadcast", [](const Var& x) {
         Shape s = x.shape();
         s.insert(s.begin(), 2);
         return ops::broadcast(x, s);
       }, -2, 2, false},
      {"concat", [](const Var& x) { const Var xs[] = {x, ops::square(x)}; return ops::concat(xs, 0); }, -2, 2, false},
      {"gather_rows", [](const Var& x) { return ops::gather_rows(x, {1, 0, 1}); }, -2, 2, false},
      {"mul", [](const Var& x) { return ops::mul(x, ops::tanh(x)); }, -2, 2, false},
      {"div", [](const Var& x) { return ops::div(ops::tanh(x), ops::add_scalar(ops::square(x), 1.0)); }, -2, 2, false},
      {"sub", [](const Var& x) { return ops::sub(ops::square(x), x); }, -2, 2, false},
      {"max_pool2d", [](const Var& x) { return ops::max_pool2d(x); }, -2, 2, true},
      {"nearest_upsample2d", [](const Var& x) { return ops::nearest_upsample2d(x); }, -2, 2, true},
  };
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 131 + 7);
      Shape shape = c.spatial ? Shape{2 * (1 + rng.below(2)), 2 * (1 + rng.below(2)), 1 + rng.below(3)}
                              : Shape{2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(3)};
      const Tensor point = suite::random_tensor(shape, rng, c.lo, c.hi);
      auto probe = c.op(Var(point)).value();
      const Tensor R = suite::random_tensor(probe.shape(), rng);
      auto f = [&](Tape&, const Var& x) { return suite::project(c.op(x), R); };
      const auto r = grad_check(f, point, 1e-5, 1e-4);
      EXPECT_TRUE(r.passed) << c.name << " seed " << seed << " err " << r.max_rel_error;
    }
  }
}

TEST(GradCheck, BinaryPrimitivesWithBroadcasting) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t M = 1 + rng.below(3), K = 1 + rng.below(4), N = 1 + rng.below(3);
    const Tensor A = suite::random_tensor({M, K}, rng);
    const Tensor B = suite::random_tensor({K, N}, rng);
    const Tensor row = suite::random_tensor({1, K}, rng, 0.5, 2.0);
    const Tensor Rm = suite::random_tensor({M, N}, rng);
    const Tensor Rk = suite::random_tensor({M, K}, rng);
    auto mm_a = [&](Tape&, const Var& x) { return suite::project(ops::matmul(x, Var(B)), Rm); };
    auto mm_b = [&](Tape&, const Var& x) { return suite::project(ops::matmul(Var(A), x), Rm); };
    auto bc_add = [&](Tape&, const Var& x) { return suite::project(ops::add(Var(A), x), Rk); };
    auto bc_div = [&](Tape&, const Var& x) { return suite::project(ops::div(Var(A), x), Rk); };
    auto bc_mul = [&](Tape&, const Var& x) { return suite::project(ops::mul(x, Var(row)), Rk); };
    EXPECT_TRUE(grad_check(mm_a, A, 1e-5, 1e-4).passed) << seed;
    EXPECT_TRUE(grad_check(mm_b, B, 1e-5, 1e-4).passed) << seed;
    EXPECT_TRUE(grad_check(bc_add, row, 1e-5, 1e-4).passed) << seed;
    EXPECT_TRUE(grad_check(bc_div, row, 1e-5, 1e-4).passed) << seed;
    EXPECT_TRUE(grad_check(bc_mul, A, 1e-5, 1e-4).passed) << seed;
  }
}

TEST(GradCheck, ConvolutionOverTwentySeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t H = 1 + rng.below(4), W = 1 + rng.below(4), Ci = 1 + rng.below(3), Co = 1 + rng.below(3);
    const std::size_t K = rng.below(2) ? 3 : 1;
    const Tensor x = suite::random_tensor({H, W, Ci}, rng);
    const Tensor w = suite::random_tensor({K, K, Ci, Co}, rng);
    const Tensor R = suite::random_tensor({H, W, Co}, rng);
    auto fx = [&](Tape&, const Var& v) { return suite::project(ops::conv2d(v, Var(w)), R); };
    auto fw = [&](Tape&, const Var& v) { return suite::project(ops::conv2d(Var(x), v), R); };
    EXPECT_TRUE(grad_check(fx, x, 1e-5, 1e-4).passed) << seed;
    EXPECT_TRUE(grad_check(fw, w, 1e-5, 1e-4).passed) << seed;
  }
}
