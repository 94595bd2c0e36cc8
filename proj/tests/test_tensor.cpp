#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "detq/rng.hpp"
#include "detq/tensor.hpp"
#include "test_util.hpp"

using namespace detq;
using detq::test::grad_check;
using detq::test::random_tensor;

TEST_CASE("construction rejects non-finite values and bad shapes") {
  CHECK_THROWS_AS(Tensor::from_data({2}, {1.0, std::nan("")}), Error);
  CHECK_THROWS_AS(Tensor::from_data({3}, {1.0, 2.0}), Error);
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.requires_grad());
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("relu forward") {
  Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
  Tensor y = relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);
}

TEST_CASE("softmax symmetry and row sums") {
  Tensor x = Tensor::from_data({1, 2}, {0.0, 0.0});
  Tensor y = softmax(x, 1);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  Rng rng(7);
  Tensor r = random_tensor({4, 5}, rng, false, -8, 8);
  Tensor s = softmax(r, 1);
  for (int i = 0; i < 4; ++i) {
    double acc = 0;
    for (int j = 0; j < 5; ++j) acc += s.data()[i * 5 + j];
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("conv2d hand examples") {
  // all-ones 3x3 against all-ones kernel
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 0);
  CHECK(y.numel() == 1);
  CHECK(y.item() == doctest::Approx(9.0));

  // scalar kernel is an affine map
  Tensor x2 = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w2 = Tensor::from_data({1, 1, 1, 1}, {2});
  Tensor b2 = Tensor::from_data({1}, {1});
  Tensor y2 = conv2d(x2, w2, b2, 1, 0);
  CHECK(y2.data()[0] == doctest::Approx(3));
  CHECK(y2.data()[1] == doctest::Approx(5));
  CHECK(y2.data()[2] == doctest::Approx(7));
  CHECK(y2.data()[3] == doctest::Approx(9));
}

TEST_CASE("conv2d matches loop-nest oracle") {
  Rng rng(42);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, false);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, false);
  Tensor b = random_tensor({4}, rng, false);
  int stride = 2, pad = 1;
  Tensor y = conv2d(x, w, b, stride, pad);
  REQUIRE(y.shape() == Shape{2, 4, 4, 4});
  // direct 6-nested-loop reference
  for (int n = 0; n < 2; ++n) {
    for (int oc = 0; oc < 4; ++oc) {
      for (int oy = 0; oy < 4; ++oy) {
        for (int ox = 0; ox < 4; ++ox) {
          double acc = b.data()[oc];
          for (int c = 0; c < 3; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                int iy = oy * stride - pad + ky;
                int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= 8 || ix < 0 || ix >= 8) continue;
                acc += x.data()[((n * 3 + c) * 8 + iy) * 8 + ix] *
                       w.data()[((oc * 3 + c) * 3 + ky) * 3 + kx];
              }
          double got = y.data()[((n * 4 + oc) * 4 + oy) * 4 + ox];
          CHECK(got == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("conv2d shape errors name the offending dimension") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  Tensor w = Tensor::zeros({2, 4, 3, 3});
  Tensor b = Tensor::zeros({2});
  CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1),
                       doctest::Contains("input channels (3) != weight in-channels (4)"), Error);
}

TEST_CASE("max_pool2d matches window-scan oracle") {
  Rng rng(3);
  Tensor x = random_tensor({1, 1, 4, 4}, rng, false);
  Tensor y = max_pool2d(x, 2, 2);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      double m = -1e300;
      for (int ky = 0; ky < 2; ++ky)
        for (int kx = 0; kx < 2; ++kx)
          m = std::max(m, x.data()[(oy * 2 + ky) * 4 + (ox * 2 + kx)]);
      CHECK(y.data()[oy * 2 + ox] == m);
    }
}

TEST_CASE("backward analytic examples") {
  Tensor x = Tensor::from_data({2}, {1.0, -2.0}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));

  Tensor x2 = Tensor::from_data({2}, {-1.0, 3.0}, true);
  Tensor loss2 = sum(relu(x2));
  backward(loss2);
  CHECK(x2.grad()[0] == 0.0);
  CHECK(x2.grad()[1] == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), Error);
}

TEST_CASE("constants never receive gradient buffers") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor c = Tensor::from_data({2}, {5.0, 6.0}, false);
  Tensor loss = sum(mul(x, c));
  backward(loss);
  CHECK_FALSE(c.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("finite-difference sweep across all ops") {
  int trials_per_op = 100;
  struct Case {
    const char* name;
    // builds the op expression; the weighting tensor w is fixed per trial so
    // the checked function is identical across FD evaluations
    std::function<Tensor(const std::vector<Tensor>&, const Tensor& w)> fn;
    std::vector<Shape> shapes;
    Shape out_shape;
  };
  auto ws = [](const Tensor& t, const Tensor& w) { return sum(mul(t, w)); };

  // relu is not differentiable at 0: keep samples away from the kink so
  // central differences measure the one-sided derivative cleanly
  auto nudge_from_zero = [](Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
      if (std::fabs(t.data()[i]) < 1e-3) t.data()[i] += t.data()[i] >= 0 ? 2e-3 : -2e-3;
  };

  std::vector<Case> cases = {
      {"relu", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(relu(v[0]), w); }, {{3, 4}}, {3, 4}},
      {"sigmoid", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(sigmoid(v[0]), w); }, {{3, 4}}, {3, 4}},
      {"add", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(add(v[0], v[1]), w); }, {{2, 3}, {2, 3}}, {2, 3}},
      {"sub", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(sub(v[0], v[1]), w); }, {{2, 3}, {2, 3}}, {2, 3}},
      {"mul", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(mul(v[0], v[1]), w); }, {{2, 3}, {2, 3}}, {2, 3}},
      {"mul_scalar", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(mul_scalar(v[0], -1.7), w); }, {{5}}, {5}},
      {"add_scalar", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(add_scalar(v[0], 0.3), w); }, {{5}}, {5}},
      {"smooth_l1", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(smooth_l1(v[0], v[1], 0.5), w); }, {{4, 2}, {4, 2}}, {4, 2}},
      {"reshape", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(reshape(v[0], {6}), w); }, {{2, 3}}, {6}},
      {"permute", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(permute(v[0], {2, 0, 1}), w); }, {{2, 3, 4}}, {4, 2, 3}},
      {"concat", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(concat({v[0], v[1]}, 1), w); }, {{2, 3}, {2, 2}}, {2, 5}},
      {"sum", [&](const std::vector<Tensor>& v, const Tensor&) { return sum(v[0]); }, {{3, 3}}, {1}},
      {"mean", [&](const std::vector<Tensor>& v, const Tensor&) { return mean(v[0]); }, {{3, 3}}, {1}},
      {"softmax", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(softmax(v[0], 1), w); }, {{3, 5}}, {3, 5}},
      {"log_softmax", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(log_softmax(v[0], 1), w); }, {{3, 5}}, {3, 5}},
      {"conv2d", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(conv2d(v[0], v[1], v[2], 2, 1), w); },
       {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}}, {2, 4, 3, 3}},
      {"max_pool2d", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(max_pool2d(v[0], 2, 2), w); }, {{2, 2, 6, 6}}, {2, 2, 3, 3}},
      {"linear", [&](const std::vector<Tensor>& v, const Tensor& w) { return ws(linear(v[0], v[1], v[2]), w); },
       {{4, 5}, {3, 5}, {3}}, {4, 3}},
      {"lp_pow_sum", [&](const std::vector<Tensor>& v, const Tensor&) { return lp_pow_sum(v[0], v[1], 2.5); }, {{3, 4}, {3, 4}}, {1}},
  };

  for (const auto& c : cases) {
    INFO("op: " << c.name);
    double worst = 0;
    for (int t = 0; t < trials_per_op; ++t) {
      Rng rng(derive_seed(1234, c.name, uint64_t(t)));
      std::vector<Tensor> leaves;
      for (const auto& s : c.shapes) leaves.push_back(random_tensor(s, rng, true));
      if (std::string_view(c.name) == "relu")
        for (auto& l : leaves) nudge_from_zero(l);
      Tensor w = random_tensor(c.out_shape, rng, false, -1, 1);
      auto bound = [&](const std::vector<Tensor>& v) { return c.fn(v, w); };
      worst = std::max(worst, grad_check(bound, leaves));
    }
    CHECK_MESSAGE(worst < 1e-4, c.name << " worst rel err " << worst);
  }
}

TEST_CASE("composed network gradient matches finite differences") {
  for (int t = 0; t < 5; ++t) {
    Rng rng(derive_seed(77, "composed", uint64_t(t)));
    Tensor x = random_tensor({1, 2, 8, 8}, rng, true, -1, 1);
    Tensor w1 = random_tensor({4, 2, 3, 3}, rng, true, -0.5, 0.5);
    Tensor b1 = random_tensor({4}, rng, true, -0.1, 0.1);
    Tensor w2 = random_tensor({3, 4 * 4 * 4}, rng, true, -0.3, 0.3);
    Tensor b2 = random_tensor({3}, rng, true, -0.1, 0.1);
    auto net = [](const std::vector<Tensor>& v) {
      Tensor h = relu(conv2d(v[0], v[1], v[2], 1, 1));
      h = max_pool2d(h, 2, 2);
      h = reshape(h, {1, 4 * 4 * 4});
      h = linear(h, v[3], v[4]);
      return mean(mul(log_softmax(h, 1), h));
    };
    double worst = grad_check(net, {x, w1, b1, w2, b2});
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("determinism: identical seeds give bit-identical forward and grads") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({2, 3, 8, 8}, rng, true);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, true);
    Tensor b = random_tensor({4}, rng, true);
    Tensor loss = lp_pow_sum(conv2d(x, w, b, 1, 1), Tensor::zeros({2, 4, 8, 8}), 3.0);
    backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), w.grad(), w.grad() + w.numel());
    return out;
  };
  auto a = run(5);
  auto b = run(5);
  CHECK(a == b);
}

TEST_CASE("adam closed-form first step and convergence") {
  // zero grad leaves the parameter unchanged
  Tensor p0 = Tensor::scalar(1.5, true);
  std::vector<Tensor> params0{p0};
  AdamState st0;
  st0.init(params0);
  p0.zero_grad();
  adam_step(params0, st0);
  CHECK(p0.item() == doctest::Approx(1.5));

  // first step with g=1 moves by ~lr
  Tensor p = Tensor::scalar(0.0, true);
  std::vector<Tensor> params{p};
  AdamState st;
  st.lr = 0.1;
  st.init(params);
  p.grad()[0] = 1.0;
  adam_step(params, st);
  CHECK(p.item() == doctest::Approx(-0.1).epsilon(1e-6));

  // 100 steps on (p-3)^2 approaches 3
  Tensor q = Tensor::scalar(0.0, true);
  std::vector<Tensor> qp{q};
  AdamState st2;
  st2.lr = 0.1;
  st2.init(qp);
  for (int i = 0; i < 100; ++i) {
    q.zero_grad();
    Tensor d = add_scalar(q, -3.0);
    Tensor loss = sum(mul(d, d));
    backward(loss);
    adam_step(qp, st2);
  }
  CHECK(std::fabs(q.item() - 3.0) < 0.5);
}
