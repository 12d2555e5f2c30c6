#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pivot/diffcore/checkpoint.hpp"
#include "pivot/diffcore/graph.hpp"
#include "support/finite_diff.hpp"

using namespace pivot;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

/// Gradient check of a function of a single input tensor.
double input_grad_error(const Tensor<double>& x0, const std::function<Var<double>(Var<double>)>& f) {
  Graph<double> g;
  auto x = g.variable(x0);
  auto loss = f(x);
  g.backward(loss);
  const auto analytic = g.grad_of(x);
  double worst = 0;
  Tensor<double> x1 = x0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    auto at = [&](double v) {
      x1[i] = v;
      Graph<double> h(nullptr, false);
      return f(h.constant(x1)).item();
    };
    const double num = (at(x0[i] + 1e-5) - at(x0[i] - 1e-5)) / 2e-5;
    x1[i] = x0[i];
    worst = std::max(worst, test_support::rel_error(analytic[i], num));
  }
  return worst;
}

}  // namespace

TEST(Forward, SoftmaxOfZerosIsUniform) {
  Graph<double> g;
  auto y = softmax_rows(g.constant(Tensor<double>(Shape{1, 3}, 0.0)));
  for (double v : y.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Forward, L2NormalizeGivesUnitNorm) {
  std::mt19937_64 rng(3);
  Graph<double> g;
  auto y = l2_normalize_rows(g.constant(random_tensor({5, 7}, rng, 3.0)));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (double v : y.value().row(r)) s += v * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-14);
  }
}

TEST(Forward, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  for (auto backend : {MatmulBackend::reference, MatmulBackend::eigen}) {
    ScopedMatmulBackend scope(backend);
    Graph<double> g;
    auto c = matmul(g.constant(a), g.constant(b)).value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
        EXPECT_NEAR(c(i, j), s, 1e-12);
      }
  }
}

TEST(Forward, TransposedMatmulVariantsAgree) {
  std::mt19937_64 rng(12);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  Graph<double> g;
  auto A = g.constant(a), B = g.constant(b);
  auto ref = matmul(A, B).value();
  auto tn = matmul(transpose(A), B, true, false).value();
  auto nt = matmul(A, transpose(B), false, true).value();
  auto tt = matmul(transpose(A), transpose(B), true, true).value();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_NEAR(tn[i], ref[i], 1e-12);
    EXPECT_NEAR(nt[i], ref[i], 1e-12);
    EXPECT_NEAR(tt[i], ref[i], 1e-12);
  }
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, g.constant(Tensor<double>(Shape{3, 2}))), std::invalid_argument);
}

TEST(Backward, SquareAtThree) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>::scalar(3.0));
  g.backward(mul(x, x));
  EXPECT_DOUBLE_EQ(g.grad_of(x)[0], 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  std::mt19937_64 rng(5);
  Graph<double> g;
  auto x = g.variable(random_tensor({1, 6}, rng));
  g.backward(sum(softmax_rows(x)));
  for (double v : g.grad_of(x)) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, NonScalarLossIsRejected) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>(Shape{2, 2}, 1.0));
  EXPECT_THROW(g.backward(x), std::invalid_argument);
}

TEST(Backward, UnreachableParametersGetZeroGradient) {
  ParamStore<double> store;
  store.add("used", Tensor<double>(Shape{2}, 1.0));
  store.add("unused", Tensor<double>(Shape{3}, 1.0));
  Graph<double> g(&store);
  g.backward(sum(g.param("used")));
  EXPECT_EQ(store.get("used").grad(), std::vector<double>(2, 1.0));
  EXPECT_EQ(store.get("unused").grad(), std::vector<double>(3, 0.0));
}

TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  auto x = random_tensor({3, 4}, rng);
  auto pos = x;
  for (auto& v : pos.data()) v = std::abs(v) + 0.5;
  auto w = random_tensor({3, 4}, rng);
  auto m = random_tensor({4, 5}, rng);
  auto g4 = random_tensor({4}, rng);
  auto b4 = random_tensor({4}, rng);
  const double tol = 1e-6;

  auto weighted = [&](Var<double> y) {
    std::mt19937_64 r2(99);
    return weighted_sum(y, random_tensor(y.shape(), r2));
  };
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(matmul(v, v.graph().constant(m))); }), tol);
  EXPECT_LT(input_grad_error(m, [&](Var<double> v) { return weighted(matmul(v.graph().constant(x), v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(matmul(v, v, false, true)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(matmul(v, v, true, false)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(transpose(v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(add(v, mul(v, v))); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(sub(v, v.graph().constant(w))); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(add_row(v, v.graph().constant(b4))); }), tol);
  EXPECT_LT(input_grad_error(b4, [&](Var<double> v) { return weighted(add_row(v.graph().constant(x), v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(scale(add_scalar(v, 0.3), 2.5)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(gelu(v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(tanh(v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(exp(v)); }), tol);
  EXPECT_LT(input_grad_error(pos, [&](Var<double> v) { return weighted(log(v)); }), tol);
  EXPECT_LT(input_grad_error(pos, [&](Var<double> v) { return weighted(cbrt(v)); }), tol);
  EXPECT_LT(input_grad_error(pos, [&](Var<double> v) { return weighted(relu(add_scalar(v, -1.0))); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(softmax_rows(v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(log_softmax_rows(v)); }), tol);
  std::vector<std::uint8_t> mask(12, 0);
  mask[0] = mask[5] = mask[10] = 1;
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(log_softmax_rows(v, mask)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) {
              auto& g = v.graph();
              return weighted(layer_norm_rows(v, g.constant(g4), g.constant(b4)));
            }),
            tol);
  EXPECT_LT(input_grad_error(g4, [&](Var<double> v) {
              auto& g = v.graph();
              return weighted(layer_norm_rows(g.constant(x), v, g.constant(b4)));
            }),
            tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(l2_normalize_rows(v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(gather_rows(v, {2, 0, 2, 1})); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(slice_cols(v, 1, 2)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(slice_rows(v, 1, 2)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(diagonal(slice_cols(v, 1, 3))); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(concat_cols<double>({v, mul(v, v)})); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return weighted(concat_rows<double>({v, exp(v)})); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return mean(mul(v, v)); }), tol);
  EXPECT_LT(input_grad_error(x, [&](Var<double> v) { return dot(v, exp(v)); }), tol);
  std::vector<std::uint8_t> valid = {1, 1, 0, 1, 0, 0};
  auto seq = random_tensor({6, 3}, rng);
  EXPECT_LT(input_grad_error(seq, [&](Var<double> v) { return weighted(masked_mean(v, valid, 2, 3)); }), tol);
}

TEST(Backward, AttentionMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  const std::size_t batch = 2, len = 3, d = 4;
  auto q0 = random_tensor({batch * len, d}, rng);
  auto k0 = random_tensor({batch * len, d}, rng);
  auto v0 = random_tensor({batch * len, d}, rng);
  std::vector<std::uint8_t> valid = {1, 1, 1, 1, 1, 0};
  auto run = [&](int which) {
    return [&, which](Var<double> x) {
      auto& g = x.graph();
      auto q = which == 0 ? x : g.constant(q0);
      auto k = which == 1 ? x : g.constant(k0);
      auto v = which == 2 ? x : g.constant(v0);
      std::mt19937_64 r2(5);
      return weighted_sum(attention(q, k, v, valid, batch, len, 2, 0.5), random_tensor({batch * len, d}, r2));
    };
  };
  EXPECT_LT(input_grad_error(q0, run(0)), 1e-6);
  EXPECT_LT(input_grad_error(k0, run(1)), 1e-6);
  EXPECT_LT(input_grad_error(v0, run(2)), 1e-6);
}

TEST(Backward, TwoLayerEncoderWithCosineLoss) {
  std::mt19937_64 rng(41);
  ParamStore<double> store;
  store.add("w1", random_tensor({5, 6}, rng, 0.5));
  store.add("b1", random_tensor({6}, rng, 0.1));
  store.add("w2", random_tensor({6, 4}, rng, 0.5));
  store.add("b2", random_tensor({4}, rng, 0.1));
  auto xa = random_tensor({3, 5}, rng);
  auto xb = random_tensor({3, 5}, rng);
  auto loss = [&](Graph<double>& g) {
    auto enc = [&](const Tensor<double>& x) {
      auto h = gelu(add_row(matmul(g.constant(x), g.param("w1")), g.param("b1")));
      return l2_normalize_rows(add_row(matmul(h, g.param("w2")), g.param("b2")));
    };
    auto za = enc(xa), zb = enc(xb);
    return scale(sum(mul(za, zb)), -1.0);
  };
  auto res = test_support::check_gradients(store, loss);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param << "[" << res.worst_index << "]";
}

TEST(Backward, IsLinearInTheLoss) {
  std::mt19937_64 rng(51);
  ParamStore<double> store;
  store.add("w", random_tensor({4, 3}, rng));
  auto x = random_tensor({2, 4}, rng);
  auto l1 = [&](Graph<double>& g) { return sum(tanh(matmul(g.constant(x), g.param("w")))); };
  auto l2 = [&](Graph<double>& g) { return sum(exp(scale(matmul(g.constant(x), g.param("w")), 0.3))); };
  auto grad_of = [&](auto f) {
    store.zero_grad();
    Graph<double> g(&store);
    g.backward(f(g));
    return store.get("w").grad();
  };
  const double a = 1.7, b = -0.4;
  auto g1 = grad_of(l1);
  auto g2 = grad_of(l2);
  auto gc = grad_of([&](Graph<double>& g) { return add(scale(l1(g), a), scale(l2(g), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * g1[i] + b * g2[i], 1e-12);
}

TEST(Backward, DeterministicGivenSeedAndInputs) {
  auto run = [] {
    std::mt19937_64 rng(61);
    ParamStore<double> store;
    store.add("w", random_tensor({4, 4}, rng));
    auto x = random_tensor({3, 4}, rng);
    Graph<double> g(&store);
    auto y = softmax_rows(matmul(g.constant(x), g.param("w")));
    g.backward(sum(mul(y, y)));
    return std::make_pair(y.value().storage(), store.get("w").grad());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore<double> store;
  store.add("p", Tensor<double>(Shape{3}, 2.0));
  store.zero_grad();
  for (auto& g : store.get("p").grad()) g = 1.0;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  adam_step(store, cfg);
  for (double v : store.get("p").data()) EXPECT_NEAR(v - 2.0, -1e-3, 1e-10);
  EXPECT_EQ(store.get("p").grad(), std::vector<double>(3, 0.0));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParamStore<double> store;
  store.add("p", Tensor<double>(Shape{2}, 0.5));
  store.zero_grad();
  adam_step(store, AdamConfig{});
  EXPECT_EQ(store.get("p").storage(), std::vector<double>(2, 0.5));
  EXPECT_EQ(store.step(), 1u);
}

TEST(Adam, TwoStepsMatchScalarOracle) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, grad = 0.7;
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
  }
  ParamStore<double> store;
  store.add("p", Tensor<double>::scalar(1.0));
  AdamConfig cfg{lr, b1, b2, eps};
  for (int t = 0; t < 2; ++t) {
    store.zero_grad();
    store.get("p").grad()[0] = grad;
    adam_step(store, cfg);
  }
  EXPECT_NEAR(store.get("p")[0], x, 1e-12);
}

TEST(Adam, MissingGradientNamesTheParameter) {
  ParamStore<double> store;
  store.add("lonely", Tensor<double>::scalar(1.0));
  try {
    adam_step(store, AdamConfig{});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos);
  }
}

TEST(ParamStoreTest, DuplicateNamesRejected) {
  ParamStore<float> store;
  store.add("a", Tensor<float>(Shape{1}));
  EXPECT_THROW(store.add("a", Tensor<float>(Shape{1})), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  std::mt19937_64 rng(71);
  ParamStore<float> store;
  store.add("emb", random_tensor({4, 3}, rng).cast<float>());
  store.add("bias", random_tensor({3}, rng).cast<float>());
  store.set_step(17);
  const std::string bytes = encode_checkpoint(store);
  EXPECT_EQ(bytes.substr(0, 4), "GTCK");

  ParamStore<float> other;
  other.add("emb", Tensor<float>(Shape{4, 3}));
  other.add("bias", Tensor<float>(Shape{3}));
  load_into(other, decode_checkpoint(bytes));
  EXPECT_EQ(other.get("emb"), store.get("emb"));
  EXPECT_EQ(other.step(), 17u);
  EXPECT_EQ(encode_checkpoint(other), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  EXPECT_THROW(decode_checkpoint("NOPE0000000000000000"), DataError);
  ParamStore<double> store;
  store.add("x", Tensor<double>(Shape{2}, 1.0));
  auto bytes = encode_checkpoint(store);
  ParamStore<double> wrong;
  wrong.add("x", Tensor<double>(Shape{3}));
  EXPECT_THROW(load_into(wrong, decode_checkpoint(bytes)), DataError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 4)), DataError);
}

TEST(Softmax, NanInputPropagates) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({2, 3}, {NAN, 1, 2, 0, 1, 2}));
  auto ls = log_softmax_rows(x).value();
  auto sm = softmax_rows(x).value();
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_TRUE(std::isnan(ls(0, j)));
    EXPECT_TRUE(std::isnan(sm(0, j)));
    EXPECT_TRUE(std::isfinite(ls(1, j)));
  }
}
