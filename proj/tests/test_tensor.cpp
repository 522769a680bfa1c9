#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "test_util.hpp"
#include "volforecast/tensor.hpp"

using volf::Tensor;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_CASE("backward of w*x gives dloss/dw = x", "[tensor]") {
  Tensor<double> w = Tensor<double>::scalar(3.0, true);
  Tensor<double> x = Tensor<double>::scalar(2.0, true);
  Tensor<double> loss = mul(w, x);
  loss.backward();
  CHECK(w.grad()[0] == Catch::Approx(2.0));
  CHECK(x.grad()[0] == Catch::Approx(3.0));
}

TEST_CASE("relu(-x) at positive x has all-zero gradient", "[tensor]") {
  Tensor<double> x({4}, {0.5, 1.0, 2.0, 0.1}, true);
  Tensor<double> loss = sum(relu(scale(x, -1.0)));
  loss.backward();
  CHECK(loss.item() == 0.0);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("repeated backward calls accumulate", "[tensor]") {
  Tensor<double> w = Tensor<double>::scalar(3.0, true);
  Tensor<double> x = Tensor<double>::scalar(2.0, false);
  mul(w, x).backward();
  mul(w, x).backward();
  CHECK(w.grad()[0] == Catch::Approx(4.0));
}

TEST_CASE("backward requires a scalar", "[tensor]") {
  Tensor<double> x = Tensor<double>::zeros({2}, true);
  CHECK_THROWS_AS(x.backward(), std::invalid_argument);
}

TEST_CASE("softmax of (0,0) is (0.5,0.5) and rows sum to 1", "[tensor]") {
  Tensor<double> x({1, 2}, {0.0, 0.0});
  Tensor<double> y = volf::softmax_lastdim(x);
  CHECK(y.values()[0] == Catch::Approx(0.5));
  CHECK(y.values()[1] == Catch::Approx(0.5));

  std::mt19937_64 rng(7);
  Tensor<double> z = random_tensor<double>({3, 5}, rng, -4, 4, false);
  Tensor<double> s = volf::softmax_lastdim(z);
  for (int r = 0; r < 3; ++r) {
    double acc = 0;
    for (int c = 0; c < 5; ++c) acc += s.values()[static_cast<size_t>(r * 5 + c)];
    CHECK(acc == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("NoGradGuard suppresses graph recording", "[tensor]") {
  Tensor<double> w = Tensor<double>::scalar(3.0, true);
  volf::NoGradGuard ng;
  Tensor<double> y = scale(w, 2.0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("elementwise and reduction ops match finite differences", "[tensor]") {
  std::mt19937_64 rng(42);
  Tensor<double> a = random_tensor<double>({2, 3}, rng);
  Tensor<double> b = random_tensor<double>({2, 3}, rng);

  CHECK(gradcheck([&] { return sum(add(a, b)); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return sum(sub(a, b)); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return sum(mul(a, b)); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return mean(mul(a, a)); }, {a}) < 1e-6);
  CHECK(gradcheck([&] { return sum(scale(a, 1.7)); }, {a}) < 1e-6);
  CHECK(gradcheck([&] { return sum(add_scalar(a, 0.3)); }, {a}) < 1e-6);
  CHECK(gradcheck([&] { return sum(tanh_op(a)); }, {a}) < 1e-6);
  CHECK(gradcheck([&] { return sum(gelu(a)); }, {a}) < 1e-6);
  // keep relu inputs away from the kink
  Tensor<double> shifted = random_tensor<double>({2, 3}, rng, 0.5, 1.5);
  CHECK(gradcheck([&] { return sum(relu(shifted)); }, {shifted}) < 1e-6);
  CHECK(gradcheck([&] { return sum(mul(volf::softmax_lastdim(a), b)); }, {a, b}) < 1e-6);
  CHECK(gradcheck([&] { return sum(mul(reshape(a, {6}), reshape(b, {6}))); }, {a, b}) < 1e-6);
}

TEST_CASE("concat_channels layout and gradient", "[tensor]") {
  Tensor<double> a({1, 2, 1, 1, 2}, {1, 2, 3, 4});
  Tensor<double> b({1, 1, 1, 1, 2}, {5, 6});
  Tensor<double> c = volf::concat_channels(a, b);
  REQUIRE(c.shape() == std::vector<int>{1, 3, 1, 1, 2});
  CHECK(c.values() == std::vector<double>{1, 2, 3, 4, 5, 6});

  std::mt19937_64 rng(3);
  Tensor<double> x = random_tensor<double>({2, 2, 1, 2, 2}, rng);
  Tensor<double> y = random_tensor<double>({2, 3, 1, 2, 2}, rng);
  Tensor<double> w = random_tensor<double>({2, 5, 1, 2, 2}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::concat_channels(x, y), w)); }, {x, y}) < 1e-6);
}

TEST_CASE("bmm matches hand matmul and finite differences", "[tensor]") {
  // [1,2,2] x [1,2,2]
  Tensor<double> a({1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> b({1, 2, 2}, {5, 6, 7, 8});
  Tensor<double> c = volf::bmm(a, b);
  CHECK(c.values() == std::vector<double>{19, 22, 43, 50});

  std::mt19937_64 rng(11);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Tensor<double> x = random_tensor<double>(ta ? std::vector<int>{2, 4, 3} : std::vector<int>{2, 3, 4}, rng);
      Tensor<double> y = random_tensor<double>(tb ? std::vector<int>{2, 2, 4} : std::vector<int>{2, 4, 2}, rng);
      Tensor<double> w = random_tensor<double>({2, 3, 2}, rng, -1, 1, false);
      CHECK(gradcheck([&] { return sum(mul(volf::bmm(x, y, ta, tb), w)); }, {x, y}) < 1e-6);
    }
}

TEST_CASE("linear forward and gradient", "[tensor]") {
  Tensor<double> x({1, 2}, {1.0, 2.0});
  Tensor<double> w({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor<double> bias({3}, {0.5, 0.5, 0.5});
  Tensor<double> y = linear(x, w, bias);
  CHECK(y.values() == std::vector<double>{1.5, 2.5, 3.5});

  std::mt19937_64 rng(5);
  Tensor<double> xi = random_tensor<double>({2, 3, 4}, rng);
  Tensor<double> wi = random_tensor<double>({5, 4}, rng);
  Tensor<double> bi = random_tensor<double>({5}, rng);
  Tensor<double> gw = random_tensor<double>({2, 3, 5}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(linear(xi, wi, bi), gw)); }, {xi, wi, bi}) < 1e-6);
  CHECK(gradcheck([&] { return sum(mul(linear(xi, wi), gw)); }, {xi, wi}) < 1e-6);
}

TEST_CASE("forward values are bit-identical across repeated runs", "[tensor]") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tensor<double> a = random_tensor<double>({2, 3}, rng, -2, 2, false);
    Tensor<double> b = random_tensor<double>({2, 3}, rng, -2, 2, false);
    return sum(mul(volf::softmax_lastdim(a), gelu(b))).item();
  };
  const double r1 = run(), r2 = run();
  CHECK(std::memcmp(&r1, &r2, sizeof(double)) == 0);
}

TEST_CASE("no non-finite values appear in forward or backward", "[tensor]") {
  std::mt19937_64 rng(123);
  Tensor<double> a = random_tensor<double>({4, 4}, rng, -3, 3);
  Tensor<double> loss = mean(mul(volf::softmax_lastdim(a), tanh_op(a)));
  loss.backward();
  CHECK(loss.all_finite());
  for (double g : a.grad()) CHECK(std::isfinite(g));
}
