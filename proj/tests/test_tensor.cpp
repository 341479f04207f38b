#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "glyphgen/gradcheck.hpp"
#include "glyphgen/optim.hpp"
#include "glyphgen/rng.hpp"
#include "glyphgen/tensor.hpp"

using namespace glyphgen;

namespace {

template <class S>
TensorT<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return TensorT<S>(std::move(shape), std::move(v));
}

// Values bounded away from zero so kinked ops (relu, leaky_relu) stay
// differentiable at every probe point.
template <class S>
TensorT<S> random_tensor_offzero(Shape shape, Rng& rng) {
  std::vector<S> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) {
    double m = rng.uniform(0.2, 1.0);
    x = static_cast<S>(rng.uniform() < 0.5 ? -m : m);
  }
  return TensorT<S>(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("unary ops: definition points") {
  Tensor x({3}, {-1.f, 0.f, 2.f});
  auto y = relu(x);
  CHECK(y.values() == std::vector<float>{0.f, 0.f, 2.f});

  CHECK(glyphgen::tanh(Tensor({1}, {0.f})).value() == 0.f);

  auto l = leaky_relu(Tensor({2}, {-1.f, 3.f}), 0.2);
  CHECK(l[0] == doctest::Approx(-0.2f));
  CHECK(l[1] == 3.f);

  auto c = clamp(Tensor({3}, {-2.f, 0.5f, 9.f}), 0.0, 1.0);
  CHECK(c.values() == std::vector<float>{0.f, 0.5f, 1.f});
}

TEST_CASE("leaky_relu derivative at x=-3 matches finite differences") {
  TensorT<double> at({1}, {-3.0});
  auto err = grad_check<double>(
      [](TapeT<double>&, const TensorT<double>& x) { return sum_all(leaky_relu(x, 0.2)); }, at,
      1e-4);
  CHECK(err < 1e-6);
  // and the analytic value itself is the slope
  TapeT<double> tape;
  auto x = tape.leaf(at);
  auto y = sum_all(leaky_relu(x, 0.2));
  tape.backward(y);
  CHECK(tape.grad(x)[0] == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("log rejects non-positive input naming the index") {
  Tensor x({3}, {1.f, -1.f, 2.f});
  CHECK_THROWS_WITH_AS(glyphgen::log(x), doctest::Contains("index 1"), std::domain_error);
}

TEST_CASE("binary ops and broadcasting") {
  auto y = add(Tensor({2}, {1.f, 2.f}), Tensor({2}, {3.f, 4.f}));
  CHECK(y.values() == std::vector<float>{4.f, 6.f});

  auto m = mul(Tensor({2, 1}, {1.f, 2.f}), Tensor({1, 3}, {10.f, 20.f, 30.f}));
  CHECK(m.shape() == Shape{2, 3});
  CHECK(m.values() == std::vector<float>{10.f, 20.f, 30.f, 20.f, 40.f, 60.f});

  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("grad of sum(a*b) w.r.t. a equals b") {
  Rng rng(11);
  auto a = random_tensor<float>({2, 3}, rng);
  auto b = random_tensor<float>({2, 3}, rng);
  Tape tape;
  auto aw = tape.leaf(a);
  auto y = sum_all(mul(aw, b));
  tape.backward(y);
  auto g = tape.grad(aw);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(b[i]));

  // and the finite-difference oracle agrees
  TensorT<double> ad({2, 3}, std::vector<double>(a.values().begin(), a.values().end()));
  TensorT<double> bd({2, 3}, std::vector<double>(b.values().begin(), b.values().end()));
  auto err = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& x) { return sum_all(mul(x, bd)); }, ad, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("broadcast gradients reduce over expanded axes") {
  // d/db sum(a*b) with b of shape [1,3] sums contributions over rows
  Tensor a({2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f});
  Tensor b({1, 3}, {1.f, 1.f, 1.f});
  Tape tape;
  auto bw = tape.leaf(b);
  auto y = sum_all(mul(a, bw));
  tape.backward(y);
  auto g = tape.grad(bw);
  CHECK(g == std::vector<float>{5.f, 7.f, 9.f});
}

TEST_CASE("matmul basics") {
  Tensor eye({2, 2}, {1.f, 0.f, 0.f, 1.f});
  Tensor m({2, 2}, {1.f, 2.f, 3.f, 4.f});
  CHECK(matmul(eye, m).values() == m.values());

  auto p = matmul(Tensor({1, 2}, {1.f, 2.f}), Tensor({2, 1}, {3.f, 4.f}));
  CHECK(p.shape() == Shape{1, 1});
  CHECK(p.value() == 11.f);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("matmul gradient check") {
  Rng rng(5);
  auto a = random_tensor<double>({4, 5}, rng);
  auto b = random_tensor<double>({5, 3}, rng);
  auto err_a = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& x) { return sum_all(tanh(matmul(x, b))); }, a,
      1e-5);
  auto err_b = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& x) { return sum_all(tanh(matmul(a, x))); }, b,
      1e-5);
  CHECK(err_a < 1e-4);
  CHECK(err_b < 1e-4);
}

TEST_CASE("conv2d trivial kernels") {
  auto x = Tensor::ones({1, 1, 3, 3});
  auto k = Tensor::ones({1, 1, 2, 2});
  auto y = conv2d(x, k, Tensor::zeros({1}), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 4.f);

  Rng rng(3);
  auto img = random_tensor<float>({1, 1, 3, 3}, rng);
  auto delta = Tensor({1, 1, 1, 1}, {1.f});
  auto ident = conv2d(img, delta, Tensor::zeros({1}), 1, 0);
  CHECK(ident.values() == img.values());

  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 4, 4}),
                         Tensor::zeros({1}), 1, 0),
                  std::invalid_argument);
}

TEST_CASE("conv2d gradient check, 32-bit and 64-bit modes") {
  Rng rng(17);
  // Positive ranges in the 32-bit mode keep the functional's per-element
  // sensitivities away from zero, where float finite differences are pure
  // rounding noise. The 64-bit mode below covers sign-mixed inputs.
  auto xf = random_tensor<float>({2, 3, 8, 8}, rng, 0.2, 1.0);
  auto kf = random_tensor<float>({4, 3, 3, 3}, rng, 0.2, 1.0);
  auto bf = random_tensor<float>({4}, rng, 0.2, 1.0);

  auto f32 = [&](const Tensor& x, const Tensor& k, const Tensor& b) {
    return sum_all(tanh(conv2d(x, k, b, 2, 1) * 0.1));
  };
  auto err_x32 = grad_check<float>(
      [&](TapeT<float>&, const TensorT<float>& x) { return f32(x, kf, bf); }, xf, 5e-2);
  auto err_k32 = grad_check<float>(
      [&](TapeT<float>&, const TensorT<float>& k) { return f32(xf, k, bf); }, kf, 5e-2);
  CHECK(err_x32 < 1e-3);
  CHECK(err_k32 < 1e-3);

  rng = Rng(18);
  xf = random_tensor<float>({2, 3, 8, 8}, rng);
  kf = random_tensor<float>({4, 3, 3, 3}, rng);
  bf = random_tensor<float>({4}, rng);
  TensorT<double> xd(xf.shape(), std::vector<double>(xf.values().begin(), xf.values().end()));
  TensorT<double> kd(kf.shape(), std::vector<double>(kf.values().begin(), kf.values().end()));
  TensorT<double> bd(bf.shape(), std::vector<double>(bf.values().begin(), bf.values().end()));
  auto err_x64 = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& x) {
        return mean_all(tanh(conv2d(x, kd, bd, 2, 1)));
      },
      xd, 1e-5);
  auto err_k64 = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& k) {
        return mean_all(tanh(conv2d(xd, k, bd, 2, 1)));
      },
      kd, 1e-5);
  auto err_b64 = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& b) {
        return mean_all(tanh(conv2d(xd, kd, b, 2, 1)));
      },
      bd, 1e-5);
  CHECK(err_x64 < 1e-5);
  CHECK(err_k64 < 1e-5);
  CHECK(err_b64 < 1e-5);
}

TEST_CASE("conv_transpose2d trivial placements") {
  auto x = Tensor::ones({1, 1, 2, 2});
  auto k = Tensor::ones({1, 1, 2, 2});
  auto y = conv_transpose2d(x, k, Tensor::zeros({1}), 2, 0);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 1.f);

  Rng rng(9);
  auto img = random_tensor<float>({1, 1, 3, 3}, rng);
  auto kk = Tensor({1, 1, 1, 1}, {2.5f});
  auto scaled = conv_transpose2d(img, kk, Tensor::zeros({1}), 1, 0);
  for (std::int64_t i = 0; i < img.size(); ++i)
    CHECK(scaled[i] == doctest::Approx(2.5f * img[i]));
}

TEST_CASE("conv / conv_transpose adjoint identity") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    const int stride = 1 + rng.uniform_int(2);
    const int pad = rng.uniform_int(2);
    const int c = 1 + rng.uniform_int(3), f = 1 + rng.uniform_int(3);
    const int kh = 1 + rng.uniform_int(3), kw = 1 + rng.uniform_int(3);
    const int h = kh + 2 + rng.uniform_int(4), w = kw + 2 + rng.uniform_int(4);
    auto x = random_tensor<float>({2, c, h, w}, rng);
    auto k = random_tensor<float>({f, c, kh, kw}, rng);
    auto y_shape = conv2d(x, k, Tensor::zeros({f}), stride, pad).shape();
    auto y = random_tensor<float>(y_shape, rng);

    // <conv(x,K), y> vs <x, convT(y,K)>
    auto cx = conv2d(x, k, Tensor::zeros({f}), stride, pad);
    double lhs = 0;
    for (std::int64_t i = 0; i < cx.size(); ++i) lhs += double(cx[i]) * double(y[i]);
    auto ty = conv_transpose2d(y, k, Tensor::zeros({c}), stride, pad);
    // When conv dropped a stride remainder the transpose output is smaller
    // than x; the dropped rows/cols never contributed, so the inner product
    // runs over the transpose extent.
    const int th = ty.dim(2), tw = ty.dim(3);
    REQUIRE(th <= h);
    REQUIRE(tw <= w);
    double rhs = 0;
    for (int b = 0; b < 2; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < th; ++i)
          for (int j = 0; j < tw; ++j) {
            const auto tyv = ty[((std::int64_t(b) * c + ch) * th + i) * tw + j];
            const auto xv = x[((std::int64_t(b) * c + ch) * h + i) * w + j];
            rhs += double(tyv) * double(xv);
          }
    CHECK(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)) < 1e-4);
  }
}

TEST_CASE("conv_transpose2d gradient check (64-bit)") {
  Rng rng(31);
  auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({2}, rng);
  auto err_x = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& t) {
        return mean_all(tanh(conv_transpose2d(t, k, b, 2, 1)));
      },
      x, 1e-5);
  auto err_k = grad_check<double>(
      [&](TapeT<double>&, const TensorT<double>& t) {
        return mean_all(tanh(conv_transpose2d(x, t, b, 2, 1)));
      },
      k, 1e-5);
  CHECK(err_x < 1e-5);
  CHECK(err_k < 1e-5);
}

TEST_CASE("reduce ops") {
  CHECK(reduce_mean(Tensor({3}, {1.f, 2.f, 3.f}), {0}).value() == 2.f);
  CHECK(reduce_var(Tensor({3}, {1.f, 1.f, 1.f}), {0}).value() == 0.f);

  auto s = reduce_sum(Tensor({2, 2}, {1.f, 2.f, 3.f, 4.f}), {0});
  CHECK(s.shape() == Shape{1, 2});
  CHECK(s.values() == std::vector<float>{4.f, 6.f});

  CHECK_THROWS_AS(reduce_sum(Tensor::zeros({2, 2}), {0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(reduce_sum(Tensor::zeros({2, 2}), {5}), std::invalid_argument);

  // population variance of [1,2,3] is 2/3
  CHECK(reduce_var(Tensor({3}, {1.f, 2.f, 3.f}), {0}).value() ==
        doctest::Approx(2.f / 3.f));
}

TEST_CASE("reduce gradient checks (64-bit)") {
  Rng rng(41);
  auto x = random_tensor<double>({3, 4}, rng);
  for (auto op : {ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Var}) {
    auto err = grad_check<double>(
        [&](TapeT<double>&, const TensorT<double>& t) {
          return sum_all(tanh(reduce(t, {1}, op)));
        },
        x, 1e-5);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("backward: analytic cases") {
  // y = sum(x^2)
  Tensor x({3}, {1.f, 2.f, 3.f});
  Tape tape;
  auto xw = tape.leaf(x);
  auto y = sum_all(mul(xw, xw));
  tape.backward(y);
  CHECK(tape.grad(xw) == std::vector<float>{2.f, 4.f, 6.f});

  // shared parameter: y = sum(p*a) + sum(p*b) -> grad(p) = a + b
  Tensor p({2}, {1.f, 1.f});
  Tensor a({2}, {2.f, 3.f});
  Tensor b({2}, {5.f, 7.f});
  Tape tape2;
  auto p1 = tape2.leaf(p);
  auto p2 = tape2.leaf(p);  // same storage -> same node
  CHECK(p1.node() == p2.node());
  auto y2 = add(sum_all(mul(p1, a)), sum_all(mul(p2, b)));
  tape2.backward(y2);
  CHECK(tape2.grad(p1) == std::vector<float>{7.f, 10.f});

  CHECK_THROWS_AS(tape2.backward(p1), std::invalid_argument);  // non-scalar
}

TEST_CASE("grad_check of constant-gradient and smooth functions") {
  Rng rng(51);
  auto x = random_tensor<double>({4}, rng);
  auto err_const = grad_check<double>(
      [](TapeT<double>&, const TensorT<double>& t) { return sum_all(t); }, x, 1e-4);
  CHECK(err_const < 1e-7);

  auto xt = random_tensor<double>({2, 5}, rng);
  auto err_tanh = grad_check<double>(
      [](TapeT<double>&, const TensorT<double>& t) { return sum_all(tanh(t)); }, xt, 1e-3);
  CHECK(err_tanh < 1e-4);
}

TEST_CASE("every elementwise op passes randomized grad checks") {
  // 64-bit mode: < 1e-5; 32-bit spot checks: < 1e-3. 50 randomized trials.
  Rng rng(7);
  using Fd = std::function<TensorT<double>(TapeT<double>&, const TensorT<double>&)>;
  std::vector<std::pair<const char*, Fd>> ops = {
      {"relu", [](TapeT<double>&, const TensorT<double>& t) { return sum_all(relu(t)); }},
      {"leaky_relu",
       [](TapeT<double>&, const TensorT<double>& t) { return sum_all(leaky_relu(t, 0.2)); }},
      {"tanh", [](TapeT<double>&, const TensorT<double>& t) { return sum_all(tanh(t)); }},
      {"sigmoid", [](TapeT<double>&, const TensorT<double>& t) { return sum_all(sigmoid(t)); }},
      {"exp", [](TapeT<double>&, const TensorT<double>& t) { return sum_all(exp(t)); }},
      {"neg", [](TapeT<double>&, const TensorT<double>& t) { return sum_all(neg(t)); }},
      {"square",
       [](TapeT<double>&, const TensorT<double>& t) { return sum_all(mul(t, t)); }},
  };
  for (int trial = 0; trial < 50; ++trial) {
    Shape shape{1 + rng.uniform_int(4), 1 + rng.uniform_int(5)};
    auto x = random_tensor_offzero<double>(shape, rng);
    for (auto& [name, f] : ops) {
      auto err = grad_check<double>(f, x, 1e-5);
      INFO(name, " trial ", trial);
      CHECK(err < 1e-5);
    }
  }
  // float mode, looser threshold
  for (int trial = 0; trial < 10; ++trial) {
    Shape shape{1 + rng.uniform_int(3), 1 + rng.uniform_int(4)};
    auto x = random_tensor_offzero<float>(shape, rng);
    auto err = grad_check<float>(
        [](TapeT<float>&, const TensorT<float>& t) { return sum_all(tanh(t)); }, x, 1e-2);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("slice and reshape gradients") {
  Rng rng(61);
  auto x = random_tensor<double>({3, 6}, rng);
  auto err = grad_check<double>(
      [](TapeT<double>&, const TensorT<double>& t) {
        return sum_all(tanh(slice(t, 1, 2, 3)));
      },
      x, 1e-5);
  CHECK(err < 1e-5);

  auto err_r = grad_check<double>(
      [](TapeT<double>&, const TensorT<double>& t) {
        return sum_all(tanh(reshape(t, {2, 9})));
      },
      x, 1e-5);
  CHECK(err_r < 1e-5);

  auto s = slice(Tensor({2, 4}, {0.f, 1.f, 2.f, 3.f, 4.f, 5.f, 6.f, 7.f}), 1, 1, 2);
  CHECK(s.values() == std::vector<float>{1.f, 2.f, 5.f, 6.f});
}

TEST_CASE("same seed gives bitwise-identical op outputs") {
  auto run = [] {
    Rng rng(99);
    auto x = random_tensor<float>({2, 3, 6, 6}, rng);
    auto k = random_tensor<float>({4, 3, 3, 3}, rng);
    auto b = random_tensor<float>({4}, rng);
    Tape tape;
    auto xw = tape.leaf(x);
    auto y = mean_all(tanh(conv2d(xw, k, b, 2, 1)));
    tape.backward(y);
    auto g = tape.grad(xw);
    g.push_back(y.value());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("adam: first step size and zero-grad behavior") {
  ParamStoreT<float> store;
  auto theta = store.create("theta", Tensor::scalar(1.0f));
  AdamStateT<float> st;
  AdamConfig cfg;
  cfg.lr = 1e-4;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.eps = 1e-8;

  theta->grad = {0.5f};
  adam_step<float>({theta}, st, cfg);
  // bias-corrected m=g, v=g^2 on step 1 -> delta = -lr * g / (|g| + eps)
  CHECK(theta->value.value() == doctest::Approx(1.0f - 1e-4f).epsilon(1e-7));
  CHECK(st.step == 1);

  // zero gradient: parameter and moments unchanged except the counter
  ParamStoreT<float> store2;
  auto q = store2.create("q", Tensor::scalar(2.0f));
  AdamStateT<float> st2;
  q->grad = {0.f};
  adam_step<float>({q}, st2, cfg);
  CHECK(q->value.value() == 2.0f);
  CHECK(st2.step == 1);
  CHECK(st2.moments["q"].first[0] == 0.f);
  CHECK(st2.moments["q"].second[0] == 0.f);

  // missing grad errors with the parameter name
  ParamStoreT<float> store3;
  auto r = store3.create("r_param", Tensor::scalar(1.f));
  AdamStateT<float> st3;
  CHECK_THROWS_WITH_AS(adam_step<float>({r}, st3, cfg), doctest::Contains("r_param"),
                       std::runtime_error);
}

TEST_CASE("adam drives theta^2 toward zero") {
  ParamStoreT<float> store;
  auto theta = store.create("theta", Tensor::scalar(1.0f));
  AdamStateT<float> st;
  AdamConfig cfg;
  cfg.lr = 0.1;
  for (int i = 0; i < 100; ++i) {
    Tape tape;
    auto t = tape.leaf(theta->value);
    auto loss = sum_all(mul(t, t));
    tape.backward(loss);
    zero_grads<float>({theta});
    accumulate_grads(tape, {theta});
    adam_step<float>({theta}, st, cfg);
  }
  CHECK(std::abs(theta->value.value()) < 0.05f);
}

TEST_CASE("parameter store rejects duplicate names, dedups shared pointers") {
  ParamStoreT<float> store;
  auto p = store.create("w", Tensor::scalar(1.f));
  store.adopt(p);  // same pointer: fine
  CHECK(store.size() == 1);
  CHECK_THROWS_AS(store.create("w", Tensor::scalar(2.f)), std::logic_error);
}
