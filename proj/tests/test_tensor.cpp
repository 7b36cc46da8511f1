#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "msod/gradcheck.hpp"
#include "msod/rng.hpp"
#include "msod/tensor.hpp"

using namespace msod;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = false) {
  int n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// plain triple loop, independent of the implementation's traversal
std::vector<double> matmul_naive(const std::vector<double>& a, const std::vector<double>& b,
                                 int m, int k, int n) {
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

// naive zero-padded cross-correlation
std::vector<double> conv_naive(const std::vector<double>& x, int cin, int h, int w,
                               const std::vector<double>& ker, const std::vector<double>& bias,
                               int cout, int ks, int stride, bool same, int& ho, int& wo) {
  const int p = same ? (ks - 1) / 2 : 0;
  ho = (h + 2 * p - ks) / stride + 1;
  wo = (w + 2 * p - ks) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(cout) * ho * wo, 0.0);
  for (int co = 0; co < cout; ++co)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        double acc = bias[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < ks; ++ky)
            for (int kx = 0; kx < ks; ++kx) {
              const int yy = y * stride + ky - p;
              const int xi = xx * stride + kx - p;
              if (yy < 0 || yy >= h || xi < 0 || xi >= w) continue;
              acc += x[(ci * h + yy) * w + xi] * ker[((co * cin + ci) * ks + ky) * ks + kx];
            }
        out[(co * ho + y) * wo + xx] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("matmul basics") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto a = Tensor::from({2, 2}, {5, 6, 7, 8});
  auto left = matmul(eye, a);
  auto right = matmul(a, eye);
  for (int i = 0; i < 4; ++i) {
    CHECK(left.data()[i] == a.data()[i]);
    CHECK(right.data()[i] == a.data()[i]);
  }

  auto r = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  CHECK(r.value() == doctest::Approx(11.0).epsilon(1e-15));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("matmul matches naive loops") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = rng.uniform_int(1, 6), k = rng.uniform_int(1, 6), n = rng.uniform_int(1, 6);
    auto a = random_tensor(rng, {m, k});
    auto b = random_tensor(rng, {k, n});
    auto out = matmul(a, b);
    auto ref = matmul_naive(a.data(), b.data(), m, k, n);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-13));
  }
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(7);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 2});
  auto res = finite_difference_check(
      "matmul", [](const std::vector<Tensor>& v) { return reduce_sum(matmul(v[0], v[1])); },
      {a, b}, 1e-6);
  CHECK(res.pass);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax values") {
  auto s = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.data()[1] == doctest::Approx(0.5).epsilon(1e-15));

  auto t = softmax(Tensor::from({2}, {0.0, std::log(3.0)}), 0);
  CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-14));

  CHECK_THROWS_AS(softmax(Tensor::zeros({2}), 1), std::invalid_argument);
}

TEST_CASE("softmax slices sum to one and shift invariance") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor(rng, {5});
    auto s = softmax(x, 0);
    double sum = 0.0;
    for (double v : s.data()) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    std::vector<double> shifted = x.data();
    for (double& v : shifted) v += 17.25;
    auto s2 = softmax(Tensor::from({5}, shifted), 0);
    for (int i = 0; i < 5; ++i) CHECK(std::abs(s2.data()[i] - s.data()[i]) <= 1e-9);
  }
  // along a middle axis of a rank-3 tensor
  auto x = random_tensor(rng, {2, 4, 3});
  auto s = softmax(x, 1);
  for (int o = 0; o < 2; ++o)
    for (int in = 0; in < 3; ++in) {
      double sum = 0.0;
      for (int l = 0; l < 4; ++l) sum += s.data()[(o * 4 + l) * 3 + in];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("conv2d identity and constant cases") {
  Rng rng(5);
  auto x = random_tensor(rng, {1, 4, 4});
  auto w1 = Tensor::from({1, 1, 1, 1}, {1.0});
  auto b0 = Tensor::zeros({1});
  auto y = conv2d(x, w1, b0, 1, Padding::kSame);
  for (int i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);

  auto wz = Tensor::zeros({1, 1, 3, 3});
  auto b2 = Tensor::from({1}, {2.0});
  auto c = conv2d(x, wz, b2, 1, Padding::kSame);
  for (double v : c.data()) CHECK(v == 2.0);

  auto wbad = Tensor::zeros({1, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(x, wbad, b0, 1, Padding::kSame), std::invalid_argument);
}

TEST_CASE("conv2d matches naive loops") {
  Rng rng(17);
  for (int trial = 0; trial < 8; ++trial) {
    const int cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(3, 7), w = rng.uniform_int(3, 7);
    const int ks = rng.uniform_int(0, 1) ? 1 : 3;
    const bool same = rng.chance(0.5);
    const int stride = rng.uniform_int(1, 2);
    auto x = random_tensor(rng, {cin, h, w});
    auto ker = random_tensor(rng, {cout, cin, ks, ks});
    auto bias = random_tensor(rng, {cout});
    if ((h + (same ? ks - 1 : 0) - ks) / stride < 0) continue;
    auto out = conv2d(x, ker, bias, stride, same ? Padding::kSame : Padding::kValid);
    int ho = 0, wo = 0;
    auto ref = conv_naive(x.data(), cin, h, w, ker.data(), bias.data(), cout, ks, stride, same, ho, wo);
    REQUIRE(out.shape() == Shape{cout, ho, wo});
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d gradient vs finite differences") {
  Rng rng(23);
  auto x = random_tensor(rng, {2, 5, 5});
  auto w = random_tensor(rng, {3, 2, 3, 3});
  auto b = random_tensor(rng, {3});
  auto res = finite_difference_check(
      "conv2d",
      [](const std::vector<Tensor>& v) { return reduce_sum(conv2d(v[0], v[1], v[2], 1, Padding::kSame)); },
      {x, w, b}, 1e-5);
  CHECK(res.pass);
}

TEST_CASE("relu and sigmoid") {
  auto x = Tensor::from({3}, {-1.0, 0.0, 2.0});
  auto r = relu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 2.0);

  CHECK(sigmoid(Tensor::scalar(0.0)).value() == doctest::Approx(0.5).epsilon(1e-15));

  // analytic sigmoid'(0) = 0.25, compared against central differences
  auto x0 = Tensor::scalar(0.0, true);
  Tape tape;
  auto y = sigmoid(x0);
  tape.backward(y);
  const double h = 1e-5;
  const double fd = (sigmoid(Tensor::scalar(h)).value() - sigmoid(Tensor::scalar(-h)).value()) / (2 * h);
  CHECK(std::abs(x0.grad()[0] - 0.25) <= 1e-12);
  CHECK(std::abs(x0.grad()[0] - fd) <= 1e-9);
}

TEST_CASE("upsample_bilinear identity is bit-exact") {
  Rng rng(29);
  auto x = random_tensor(rng, {2, 4, 4});
  auto y = upsample_bilinear(x, 4, 4);
  CHECK(x.data() == y.data());

  auto c = Tensor::full({1, 3, 3}, 0.7);
  auto up = upsample_bilinear(c, 9, 5);
  for (double v : up.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("upsample_bilinear interpolates corner-aligned") {
  auto x = Tensor::from({1, 2, 2}, {0, 1, 0, 1});
  auto y = upsample_bilinear(x, 2, 4);
  // columns sample x positions 0, 1/3, 2/3, 1
  const double expected[4] = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
  for (int row = 0; row < 2; ++row)
    for (int col = 0; col < 4; ++col)
      CHECK(y.data()[row * 4 + col] == doctest::Approx(expected[col]).epsilon(1e-15));
}

TEST_CASE("global_avg_pool") {
  auto c = Tensor::full({3, 2, 2}, 1.25);
  auto g = global_avg_pool(c);
  for (double v : g.data()) CHECK(v == doctest::Approx(1.25).epsilon(1e-15));

  auto x = Tensor::from({1, 2, 2}, {0, 1, 1, 0});
  CHECK(global_avg_pool(x).data()[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("fully_connected") {
  auto x = Tensor::from({3}, {1, 2, 3});
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto b0 = Tensor::zeros({3});
  auto y = fully_connected(x, eye, b0);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == x.data()[i]);

  auto wz = Tensor::zeros({2, 3});
  auto b = Tensor::from({2}, {4, 5});
  auto z = fully_connected(x, wz, b);
  CHECK(z.data()[0] == 4.0);
  CHECK(z.data()[1] == 5.0);

  CHECK_THROWS_AS(fully_connected(x, Tensor::zeros({2, 4}), b), std::invalid_argument);
}

TEST_CASE("concat, mul, maxpool basics") {
  Rng rng(31);
  auto a = random_tensor(rng, {1, 2, 2});
  auto b = random_tensor(rng, {2, 2, 2});
  auto cat = concat({a, b});
  CHECK(cat.shape() == Shape{3, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(cat.data()[i] == a.data()[i]);
  for (int i = 0; i < 8; ++i) CHECK(cat.data()[4 + i] == b.data()[i]);
  CHECK_THROWS_AS(concat({a, random_tensor(rng, {1, 3, 2})}), std::invalid_argument);

  auto ones = Tensor::full(b.shape(), 1.0);
  auto gated = mul(b, ones);
  CHECK(gated.data() == b.data());
  CHECK_THROWS_AS(mul(a, b), std::invalid_argument);

  auto c = Tensor::full({1, 4, 4}, 3.5);
  auto p = maxpool2d(c, 2);
  CHECK(p.shape() == Shape{1, 2, 2});
  for (double v : p.data()) CHECK(v == 3.5);
}

TEST_CASE("backward basics") {
  Rng rng(37);
  auto x = random_tensor(rng, {2, 3}, true);
  {
    Tape tape;
    auto loss = reduce_sum(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    auto loss = reduce_sum(mul(x, x));
    tape.backward(loss);
    auto g = x.grad();
    for (int i = 0; i < x.size(); ++i) CHECK(g[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-14));
  }
  {
    Tape tape;
    auto y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
}

TEST_CASE("backward through a small composite graph") {
  Rng rng(41);
  auto x = random_tensor(rng, {1, 4, 4}, true);
  auto w = random_tensor(rng, {2, 1, 3, 3}, true);
  auto b = random_tensor(rng, {2}, true);
  auto res = finite_difference_check(
      "composite",
      [](const std::vector<Tensor>& v) {
        auto h = relu(conv2d(v[0], v[1], v[2], 1, Padding::kSame));
        auto pooled = maxpool2d(h, 2);
        return reduce_sum(mul(sigmoid(pooled), pooled));
      },
      {x, w, b}, 1e-4);
  CHECK(res.pass);
}

TEST_CASE("op gradient suite passes and covers every op") {
  for (std::uint64_t seed : {1ULL, 2ULL}) {
    auto results = run_op_gradient_suite(seed);
    auto names = registered_op_names();
    CHECK(results.size() == names.size());
    for (const auto& r : results) {
      INFO(r.name << " max rel err " << r.max_rel_err);
      CHECK(r.pass);
      CHECK(std::find(names.begin(), names.end(), r.name) != names.end());
    }
  }
}

namespace {

// forward x^2 with a deliberately wrong backward rule (3x instead of 2x)
Tensor bad_square(const Tensor& x) {
  std::vector<double> v = x.data();
  for (double& e : v) e = e * e;
  Tensor out = Tensor::from(x.shape(), std::move(v));
  out.node()->requires_grad = x.requires_grad();
  if (x.requires_grad() && Tape::active() != nullptr) {
    auto xn = x.node();
    auto on = out.node();
    Tape::active()->push({xn, on}, [xn, on] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < xn->data.size(); ++i)
        xn->grad[i] += 3.0 * xn->data[i] * on->grad[i];
    });
  }
  return out;
}

}  // namespace

TEST_CASE("finite-difference checker flags a corrupted backward rule") {
  Rng rng(43);
  auto x = random_tensor(rng, {4});
  auto res = finite_difference_check(
      "bad_square", [](const std::vector<Tensor>& v) { return reduce_sum(bad_square(v[0])); },
      {x}, 1e-3);
  CHECK_FALSE(res.pass);
}

TEST_CASE("values are immutable; grads accumulate only in grad buffers") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  const std::vector<double> before = x.data();
  Tape tape;
  auto loss = reduce_sum(mul(x, x));
  tape.backward(loss);
  CHECK(x.data() == before);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}
