#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "test_util.hpp"
#include "twins/finite_diff.hpp"
#include "twins/ops.hpp"

namespace twins {
namespace {

using testing::random_tensor;
using T = Tensor<double>;
using V = Var<double>;
using Build = std::function<V(Tape<double>&, const Bindings<double>&)>;

T eval(const Build& build, const ParamStore<double>& params) {
  Tape<double> tape;
  return build(tape, bind_constants(tape, params)).value();
}

// Contracts an op's output with a fixed random weighting so every output coordinate matters.
double max_fd_rel_error(const Build& op, const ParamStore<double>& params, std::mt19937_64& rng) {
  const T probe = eval(op, params);
  const T weights = random_tensor(probe.shape(), rng);
  const Build loss = [&](Tape<double>& tape, const Bindings<double>& p) {
    return sum(mul(op(tape, p), tape.constant(weights)));
  };
  Tape<double> tape;
  const auto grads = tape.backprop(loss(tape, bind_parameters(tape, params)));
  const auto fd = finite_diff_grad<double>([&](const ParamStore<double>& q) { return eval(loss, q).item(); },
                                           params, 1e-5);
  double worst = 0;
  for (const auto& [name, g] : grads) {
    const T& f = fd.at(name);
    for (Index i = 0; i < g.size(); ++i) {
      if (std::abs(g[i]) <= 1e-8) continue;
      worst = std::max(worst, std::abs(g[i] - f[i]) / std::max(std::abs(g[i]), std::abs(f[i])));
    }
  }
  return worst;
}

TEST(Matmul, HandArithmetic) {
  Tape<double> tape;
  const auto c = matmul(tape.constant(T({2, 2}, {1, 2, 3, 4})), tape.constant(T({2, 2}, {5, 6, 7, 8})));
  EXPECT_TRUE(bitwise_equal(c.value(), T({2, 2}, {19, 22, 43, 50})));
}

TEST(Matmul, IdentityAndZero) {
  std::mt19937_64 rng(1);
  const T a = random_tensor({2, 3}, rng);
  Tape<double> tape;
  EXPECT_TRUE(bitwise_equal(matmul(tape.constant(T({2, 2}, {1, 0, 0, 1})), tape.constant(a)).value(), a));
  EXPECT_EQ(testing::max_abs(matmul(tape.constant(a), tape.constant(T::zeros({3, 4}))).value()), 0.0);
}

TEST(Matmul, RejectsShapeMismatch) {
  Tape<double> tape;
  EXPECT_THROW(matmul(tape.constant(T::zeros({2, 3})), tape.constant(T::zeros({2, 3}))), InvalidArgument);
}

TEST(Conv2d, HandArithmetic) {
  Tape<double> tape;
  const auto y = conv2d(tape.constant(T({1, 1, 2, 2}, {1, 2, 3, 4})), tape.constant(T({1, 1, 2, 2}, {1, 0, 0, 1})), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 5.0);
}

TEST(Conv2d, IdentityAndZeroKernels) {
  std::mt19937_64 rng(2);
  const T x = random_tensor({2, 1, 4, 5}, rng);
  Tape<double> tape;
  EXPECT_TRUE(bitwise_equal(conv2d(tape.constant(x), tape.constant(T({1, 1, 1, 1}, {1})), 1, 0).value(), x));
  const auto z = conv2d(tape.constant(x), tape.constant(T::zeros({3, 1, 3, 3})), 2, 1);
  EXPECT_EQ(z.shape(), (Shape{2, 3, 2, 3}));
  EXPECT_EQ(testing::max_abs(z.value()), 0.0);
}

TEST(Conv2d, RejectsChannelMismatch) {
  Tape<double> tape;
  EXPECT_THROW(conv2d(tape.constant(T::zeros({1, 2, 4, 4})), tape.constant(T::zeros({1, 3, 3, 3})), 1, 1),
               InvalidArgument);
}

TEST(Relu, ValuesAndAdjointMask) {
  Tape<double> tape;
  const auto x = tape.leaf(T({3}, {-1, 0, 2}), "x");
  const auto y = relu(x);
  EXPECT_TRUE(bitwise_equal(y.value(), T({3}, {0, 0, 2})));
  const auto g = tape.backprop(sum(y));
  EXPECT_TRUE(bitwise_equal(g.at("x"), T({3}, {0, 0, 1})));
}

TEST(GlobalAvgPool, ValuesAndAdjoint) {
  Tape<double> tape;
  const auto x = tape.leaf(T({1, 1, 2, 2}, {1, 3, 5, 7}), "x");
  const auto y = global_avg_pool(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y.value()[0], 4.0);
  EXPECT_TRUE(bitwise_equal(tape.backprop(sum(y)).at("x"), T::constant({1, 1, 2, 2}, 0.25)));
  Tape<double> t2;
  EXPECT_EQ(global_avg_pool(t2.constant(T::constant({2, 3, 3, 3}, 1.5))).value()[4], 1.5);
}

TEST(SoftmaxCrossEntropy, HandValues) {
  Tape<double> tape;
  const Labels zero{0};
  EXPECT_NEAR(softmax_cross_entropy(tape.constant(T({1, 2}, {1, 0})), zero).value().item(), 0.31326168751822286, 1e-15);
  EXPECT_NEAR(softmax_cross_entropy(tape.constant(T::zeros({2, 5})), Labels{1, 4}).value().item(), std::log(5.0),
              1e-15);
  EXPECT_LT(softmax_cross_entropy(tape.constant(T({1, 3}, {60, 0, 0})), zero).value().item(), 1e-20);
}

TEST(SoftmaxCrossEntropy, RejectsBadLabels) {
  Tape<double> tape;
  const auto logits = tape.constant(T::zeros({2, 3}));
  EXPECT_THROW(softmax_cross_entropy(logits, Labels{0, 3}), InvalidArgument);
  EXPECT_THROW(softmax_cross_entropy(logits, Labels{-1, 0}), InvalidArgument);
  EXPECT_THROW(softmax_cross_entropy(logits, Labels{0}), InvalidArgument);
}

TEST(SoftmaxCrossEntropy, ShiftInvariantPerRow) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    T logits = random_tensor({4, 6}, rng, -5, 5);
    const Labels y = testing::random_labels(4, 6, rng);
    T shifted = logits;
    for (Index r = 0; r < 4; ++r) shifted.matrix().row(r).array() += random_tensor({1}, rng, -50, 50)[0];
    Tape<double> tape;
    EXPECT_NEAR(softmax_cross_entropy(tape.constant(logits), y).value().item(),
                softmax_cross_entropy(tape.constant(shifted), y).value().item(), 1e-12);
  }
}

TEST(KlDivLogits, HandValue) {
  // softmax([0,0]) = (1/2, 1/2), softmax([ln 3, 0]) = (3/4, 1/4):
  // KL = 1/2 ln(2/3) + 1/2 ln 2 = 1/2 ln(4/3).
  Tape<double> tape;
  const double kl = kl_div_logits(tape.constant(T({1, 2}, {0, 0})), tape.constant(T({1, 2}, {std::log(3.0), 0})))
                        .value()
                        .item();
  EXPECT_NEAR(kl, 0.5 * std::log(4.0 / 3.0), 1e-15);
  EXPECT_NEAR(kl, 0.14384103622589045, 1e-15);
}

TEST(KlDivLogits, SelfDivergenceZeroAndGibbs) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const T p = random_tensor({3, 5}, rng, -4, 4), q = random_tensor({3, 5}, rng, -4, 4);
    Tape<double> tape;
    EXPECT_LE(std::abs(kl_div_logits(tape.constant(p), tape.constant(p)).value().item()), 1e-12);
    EXPECT_GE(kl_div_logits(tape.constant(p), tape.constant(q)).value().item(), 0.0);
  }
}

TEST(MeanRowDistance, HandNorm) {
  Tape<double> tape;
  const auto d = mean_row_distance(tape.constant(T({2, 2}, {3, 4, 1, 1})), tape.constant(T({2, 2}, {0, 0, 1, 1})));
  EXPECT_EQ(d.value().item(), 2.5);
}

TEST(Backprop, LinearAndDeadUnit) {
  Tape<double> tape;
  const T x({3}, {0.5, -2, 7});
  const auto w = tape.leaf(T({3}, {1, 2, 3}), "w");
  EXPECT_TRUE(bitwise_equal(tape.backprop(sum(mul(w, tape.constant(x)))).at("w"), x));

  Tape<double> t2;
  const auto v = t2.leaf(T({1}, {-1}), "v");
  EXPECT_EQ(t2.backprop(sum(relu(v))).at("v")[0], 0.0);
}

TEST(Backprop, RejectsNonScalarLoss) {
  Tape<double> tape;
  const auto w = tape.leaf(T::zeros({2}), "w");
  EXPECT_THROW(tape.backprop(w), InvalidArgument);
}

TEST(Backprop, UnreachedLeafGetsZeroGradient) {
  Tape<double> tape;
  const auto a = tape.leaf(T({2}, {1, 2}), "a");
  tape.leaf(T({3}, {1, 2, 3}), "unused");
  const auto g = tape.backprop(sum(a));
  EXPECT_TRUE(bitwise_equal(g.at("unused"), T::zeros({3})));
}

TEST(FiniteDiff, QuadraticAndLinear) {
  ParamStore<double> p{{"x", T({1}, {3})}};
  const auto g = finite_diff_grad<double>([](const ParamStore<double>& q) { return q.at("x")[0] * q.at("x")[0]; }, p,
                                          1e-4);
  EXPECT_NEAR(g.at("x")[0], 6.0, 1e-6);
  for (double h : {1e-1, 1e-3, 0.5}) {
    const auto lin = finite_diff_grad<double>([](const ParamStore<double>& q) { return 4 * q.at("x")[0] - 1; }, p, h);
    EXPECT_NEAR(lin.at("x")[0], 4.0, 1e-12);
  }
  EXPECT_THROW(finite_diff_grad<double>([](const ParamStore<double>&) { return 0.0; }, p, 0.0), InvalidArgument);
}

struct OpCase {
  const char* name;
  ParamStore<double> params;
  Build op;
};

std::vector<OpCase> op_cases(std::mt19937_64& rng) {
  auto r = [&](Shape s, double lo = -1, double hi = 1) { return random_tensor(std::move(s), rng, lo, hi); };
  const Labels y{2, 0, 1};
  const T mean = r({3}), var = r({3}, 0.5, 2);
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {{"a", r({3, 4})}, {"b", r({4, 2})}},
                   [](auto&, const auto& p) { return matmul(p.at("a"), p.at("b")); }});
  cases.push_back({"add_bias", {{"x", r({3, 4})}, {"b", r({4})}},
                   [](auto&, const auto& p) { return add_bias(p.at("x"), p.at("b")); }});
  cases.push_back({"add_sub_mul_scale", {{"a", r({2, 3})}, {"b", r({2, 3})}}, [](auto&, const auto& p) {
                     return scale(mul(add(p.at("a"), p.at("b")), sub(p.at("a"), p.at("b"))), 1.7);
                   }});
  cases.push_back({"relu", {{"x", r({4, 5})}}, [](auto&, const auto& p) { return relu(p.at("x")); }});
  cases.push_back({"conv2d_s1p0", {{"x", r({2, 2, 5, 4})}, {"k", r({3, 2, 3, 3})}},
                   [](auto&, const auto& p) { return conv2d(p.at("x"), p.at("k"), 1, 0); }});
  cases.push_back({"conv2d_s2p1", {{"x", r({2, 2, 6, 5})}, {"k", r({3, 2, 3, 3})}},
                   [](auto&, const auto& p) { return conv2d(p.at("x"), p.at("k"), 2, 1); }});
  cases.push_back({"global_avg_pool", {{"x", r({2, 3, 3, 2})}},
                   [](auto&, const auto& p) { return global_avg_pool(p.at("x")); }});
  cases.push_back({"softmax_cross_entropy", {{"z", r({3, 4}, -3, 3)}},
                   [y](auto&, const auto& p) { return softmax_cross_entropy(p.at("z"), y); }});
  cases.push_back({"kl_div_logits", {{"p", r({3, 4}, -3, 3)}, {"q", r({3, 4}, -3, 3)}},
                   [](auto&, const auto& p) { return kl_div_logits(p.at("p"), p.at("q")); }});
  cases.push_back({"mean_row_distance", {{"a", r({3, 4})}, {"b", r({3, 4})}},
                   [](auto&, const auto& p) { return mean_row_distance(p.at("a"), p.at("b")); }});
  cases.push_back({"normalize_batch", {{"x", r({4, 3, 2, 2})}},
                   [](auto&, const auto& p) { return normalize_batch(p.at("x"), 1e-5); }});
  cases.push_back({"normalize_fixed", {{"x", r({4, 3, 2, 2})}}, [mean, var](auto&, const auto& p) {
                     return normalize_fixed(p.at("x"), mean.data(), var.data(), 1e-5);
                   }});
  cases.push_back({"channel_affine", {{"x", r({2, 3, 2, 2})}, {"g", r({3})}, {"b", r({3})}},
                   [](auto&, const auto& p) { return channel_affine(p.at("x"), p.at("g"), p.at("b")); }});
  return cases;
}

TEST(Backprop, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int draw = 0; draw < 3; ++draw) {
    for (auto& c : op_cases(rng)) {
      SCOPED_TRACE(c.name);
      EXPECT_LE(max_fd_rel_error(c.op, c.params, rng), 1e-4);
    }
  }
}

TEST(Backprop, TwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const T x = random_tensor({5, 4}, rng);
  const Labels y{0, 1, 2, 1, 0};
  ParamStore<double> params{{"w1", random_tensor({4, 6}, rng)}, {"b1", random_tensor({6}, rng)},
                            {"w2", random_tensor({6, 3}, rng)}, {"b2", random_tensor({3}, rng)}};
  const Build net = [&](Tape<double>& tape, const Bindings<double>& p) {
    const auto h = relu(add_bias(matmul(tape.constant(x), p.at("w1")), p.at("b1")));
    return softmax_cross_entropy(add_bias(matmul(h, p.at("w2")), p.at("b2")), y);
  };
  EXPECT_LE(max_fd_rel_error(net, params, rng), 1e-4);
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  std::mt19937_64 rng(7);
  const T x = random_tensor({3, 2, 5, 5}, rng), k = random_tensor({4, 2, 3, 3}, rng), w = random_tensor({4, 3}, rng);
  auto run = [&] {
    Tape<double> tape;
    const auto kv = tape.leaf(k, "k"), wv = tape.leaf(w, "w");
    const auto h = global_avg_pool(relu(normalize_batch(conv2d(tape.constant(x), kv, 2, 1), 1e-5)));
    return tape.backprop(softmax_cross_entropy(matmul(h, wv), Labels{0, 2, 1}));
  };
  const auto a = run(), b = run();
  for (const auto& [name, g] : a) EXPECT_TRUE(bitwise_equal(g, b.at(name))) << name;
}

TEST(NormalizeBatch, RejectsSingleSample) {
  Tape<double> tape;
  EXPECT_THROW(normalize_batch(tape.constant(T::zeros({1, 2, 2, 2})), 1e-5), InvalidArgument);
}

TEST(Tensor, ShapeValidation) {
  EXPECT_THROW(T({2, 0}), InvalidArgument);
  EXPECT_THROW(T({2}, {1, 2, 3}), InvalidArgument);
  EXPECT_THROW(T::zeros({2, 2}).item(), InvalidArgument);
  const T t({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_TRUE(bitwise_equal(slice_rows(t, 1, 3), T({2, 2}, {3, 4, 5, 6})));
  EXPECT_TRUE(bitwise_equal(gather_rows(t, {2, 0}), T({2, 2}, {5, 6, 1, 2})));
  EXPECT_THROW(slice_rows(t, 2, 4), InvalidArgument);
}

}  // namespace
}  // namespace twins
