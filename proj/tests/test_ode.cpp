#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "volforecast/ode.hpp"

using volf::Tensor;
using volf::integrate_rk4;

TEST_CASE("zero vector field returns z0", "[ode]") {
  Tensor<double> z0({2}, {1.5, -0.5});
  auto f = [](const Tensor<double>& z, double) { return Tensor<double>::zeros(z.shape()); };
  Tensor<double> z = integrate_rk4<double>(f, z0, 0.0, 24.0, 4);
  CHECK(z.values()[0] == Catch::Approx(1.5));
  CHECK(z.values()[1] == Catch::Approx(-0.5));
}

TEST_CASE("linear decay matches the exponential solution", "[ode]") {
  auto f = [](const Tensor<double>& z, double) { return scale(z, -0.1); };
  Tensor<double> z = integrate_rk4<double>(f, Tensor<double>::scalar(1.0), 0.0, 24.0, 8);
  CHECK(std::abs(z.item() - std::exp(-2.4)) < 1e-4);
}

TEST_CASE("state-independent f(z,t)=t integrates exactly to t^2/2", "[ode]") {
  auto f = [](const Tensor<double>& z, double t) { return Tensor<double>::full(z.shape(), t); };
  Tensor<double> z = integrate_rk4<double>(f, Tensor<double>::scalar(0.0), 0.0, 24.0, 3);
  CHECK(z.item() == Catch::Approx(288.0).margin(1e-9));
}

TEST_CASE("zero-length integration is a no-op", "[ode]") {
  auto f = [](const Tensor<double>& z, double) { return scale(z, 100.0); };
  Tensor<double> z0 = Tensor<double>::scalar(3.0);
  CHECK(integrate_rk4<double>(f, z0, 5.0, 5.0, 8).item() == 3.0);
}

TEST_CASE("error shrinks by roughly 16x per step-halving", "[ode]") {
  auto f = [](const Tensor<double>& z, double) { return scale(z, -0.1); };
  const double exact = std::exp(-2.4);
  std::vector<double> errs;
  for (int steps : {4, 8, 16, 32}) {
    Tensor<double> z = integrate_rk4<double>(f, Tensor<double>::scalar(1.0), 0.0, 24.0, steps);
    errs.push_back(std::abs(z.item() - exact));
  }
  double geo = 1.0;
  for (size_t i = 0; i + 1 < errs.size(); ++i) {
    const double ratio = errs[i] / errs[i + 1];
    CHECK(ratio > 10.0);
    CHECK(ratio < 24.0);
    geo *= ratio;
  }
  geo = std::cbrt(geo);
  CHECK(geo > 12.0);
  CHECK(geo < 20.0);
}

TEST_CASE("step composition with aligned steps is exact", "[ode]") {
  auto f = [](const Tensor<double>& z, double t) {
    return add(scale(z, -0.07), Tensor<double>::full(z.shape(), 0.01 * t));
  };
  Tensor<double> z0({2}, {1.0, 0.4});
  Tensor<double> whole = integrate_rk4<double>(f, z0, 0.0, 24.0, 8);
  Tensor<double> half = integrate_rk4<double>(f, z0, 0.0, 12.0, 4);
  Tensor<double> composed = integrate_rk4<double>(f, half, 12.0, 24.0, 4);
  for (int i = 0; i < 2; ++i)
    CHECK(std::abs(composed.values()[static_cast<size_t>(i)] -
                   whole.values()[static_cast<size_t>(i)]) < 1e-6);
}

TEST_CASE("gradients flow through the integrator", "[ode]") {
  std::mt19937_64 rng(21);
  Tensor<double> z0 = testutil::random_tensor<double>({2}, rng, 0.2, 1.0);
  Tensor<double> a = testutil::random_tensor<double>({2}, rng, -0.2, 0.2);
  auto run = [&] {
    auto f = [&](const Tensor<double>& z, double) { return mul(z, a); };
    return sum(integrate_rk4<double>(f, z0, 0.0, 24.0, 4));
  };
  CHECK(testutil::gradcheck(run, {z0, a}) < 1e-6);
}

TEST_CASE("divergence aborts with the failing step index", "[ode]") {
  auto f = [](const Tensor<double>& z, double) { return scale(z, 1e150); };
  bool thrown = false;
  try {
    integrate_rk4<double>(f, Tensor<double>::scalar(1.0), 0.0, 24.0, 8);
  } catch (const volf::OdeDivergedError& e) {
    thrown = true;
    CHECK(e.step_index >= 0);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  CHECK(thrown);
}

TEST_CASE("invalid step counts and reversed intervals are rejected", "[ode]") {
  auto f = [](const Tensor<double>& z, double) { return z; };
  CHECK_THROWS_AS(integrate_rk4<double>(f, Tensor<double>::scalar(1.0), 0.0, 1.0, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(integrate_rk4<double>(f, Tensor<double>::scalar(1.0), 1.0, 0.0, 4),
                  std::invalid_argument);
}
