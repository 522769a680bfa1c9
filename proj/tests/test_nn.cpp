#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "volforecast/nn.hpp"

using volf::Tensor;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

// Independent convolution oracle: iterates the input grid and scatters each
// voxel's contribution to the outputs it touches (the library kernel instead
// gathers over the output grid).
std::vector<double> conv_oracle(const Tensor<double>& input, const Tensor<double>& weight,
                                const std::vector<double>& bias, int stride, int padding) {
  const int N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const int O = weight.dim(0), kd = weight.dim(2), kh = weight.dim(3), kw = weight.dim(4);
  const int od = (D + 2 * padding - kd) / stride + 1;
  const int oh = (H + 2 * padding - kh) / stride + 1;
  const int ow = (W + 2 * padding - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(N) * O * od * oh * ow, 0.0);
  auto oidx = [&](int n, int o, int z, int y, int x) {
    return (((static_cast<int64_t>(n) * O + o) * od + z) * oh + y) * ow + x;
  };
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int z = 0; z < od; ++z)
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) out[static_cast<size_t>(oidx(n, o, z, y, x))] = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int iz = 0; iz < D; ++iz)
        for (int iy = 0; iy < H; ++iy)
          for (int ix = 0; ix < W; ++ix) {
            const double v =
                input.values()[(((static_cast<int64_t>(n) * C + c) * D + iz) * H + iy) * W + ix];
            for (int o = 0; o < O; ++o)
              for (int dz = 0; dz < kd; ++dz)
                for (int dy = 0; dy < kh; ++dy)
                  for (int dx = 0; dx < kw; ++dx) {
                    const int zp = iz + padding - dz, yp = iy + padding - dy, xp = ix + padding - dx;
                    if (zp < 0 || yp < 0 || xp < 0) continue;
                    if (zp % stride || yp % stride || xp % stride) continue;
                    const int z = zp / stride, y = yp / stride, x = xp / stride;
                    if (z >= od || y >= oh || x >= ow) continue;
                    const double w = weight.values()[(((static_cast<int64_t>(o) * C + c) * kd + dz) * kh + dy) * kw + dx];
                    out[static_cast<size_t>(oidx(n, o, z, y, x))] += v * w;
                  }
          }
  return out;
}

}  // namespace

TEST_CASE("conv3d scalar multiply-add", "[nn]") {
  Tensor<double> x({1, 1, 1, 1, 1}, {2.0});
  Tensor<double> w({1, 1, 1, 1, 1}, {3.0});
  Tensor<double> b({1}, {1.0});
  CHECK(volf::conv3d(x, w, b).item() == Catch::Approx(7.0));
}

TEST_CASE("conv3d identity kernel preserves the input", "[nn]") {
  std::mt19937_64 rng(1);
  Tensor<double> x = random_tensor<double>({1, 1, 3, 3, 3}, rng, 0, 1, false);
  std::vector<double> wk(27, 0.0);
  wk[13] = 1.0;  // center of the 3x3x3 kernel
  Tensor<double> w({1, 1, 3, 3, 3}, std::move(wk));
  Tensor<double> y = volf::conv3d(x, w, 1, 1);
  REQUIRE(y.shape() == x.shape());
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == Catch::Approx(x.values()[i]).margin(1e-12));
}

TEST_CASE("conv3d matches the direct scatter oracle", "[nn]") {
  std::mt19937_64 rng(2);
  struct Case {
    int stride, padding;
  };
  for (const auto& cs : {Case{1, 1}, Case{1, 0}, Case{2, 1}}) {
    Tensor<double> x = random_tensor<double>({1, 2, 4, 4, 4}, rng, -1, 1, false);
    Tensor<double> w = random_tensor<double>({3, 2, 3, 3, 3}, rng, -1, 1, false);
    Tensor<double> b = random_tensor<double>({3}, rng, -1, 1, false);
    Tensor<double> y = volf::conv3d(x, w, b, cs.stride, cs.padding);
    std::vector<double> expect = conv_oracle(x, w, b.values(), cs.stride, cs.padding);
    REQUIRE(y.values().size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i)
      CHECK(y.values()[i] == Catch::Approx(expect[i]).margin(1e-6));
  }
}

TEST_CASE("conv3d gradients match finite differences", "[nn]") {
  std::mt19937_64 rng(3);
  Tensor<double> x = random_tensor<double>({1, 2, 3, 3, 3}, rng);
  Tensor<double> w = random_tensor<double>({2, 2, 3, 3, 3}, rng, -0.5, 0.5);
  Tensor<double> b = random_tensor<double>({2}, rng);
  Tensor<double> gw = random_tensor<double>({1, 2, 3, 3, 3}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::conv3d(x, w, b, 1, 1), gw)); }, {x, w, b}) < 1e-6);
  Tensor<double> gs = random_tensor<double>({1, 2, 2, 2, 2}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::conv3d(x, w, b, 2, 1), gs)); }, {x, w, b}) < 1e-6);
}

TEST_CASE("upsample factor 2 of a single voxel", "[nn]") {
  Tensor<double> x({1, 1, 1, 1, 1}, {5.0});
  Tensor<double> y = volf::upsample3d_nearest(x, 2);
  REQUIRE(y.shape() == std::vector<int>{1, 1, 2, 2, 2});
  for (double v : y.values()) CHECK(v == 5.0);
}

TEST_CASE("upsample gradient matches finite differences", "[nn]") {
  std::mt19937_64 rng(4);
  Tensor<double> x = random_tensor<double>({1, 2, 2, 2, 2}, rng);
  Tensor<double> gw = random_tensor<double>({1, 2, 4, 4, 4}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::upsample3d_nearest(x, 2), gw)); }, {x}) < 1e-6);
}

TEST_CASE("batchless_norm maps a constant channel to zero pre-affine", "[nn]") {
  Tensor<double> x = Tensor<double>::full({1, 1, 2, 2, 2}, 0.7);
  Tensor<double> gamma({1}, {1.0});
  Tensor<double> beta({1}, {0.0});
  Tensor<double> y = volf::batchless_norm(x, gamma, beta);
  for (double v : y.values()) CHECK(v == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("batchless_norm rejects non-positive eps", "[nn]") {
  Tensor<double> x = Tensor<double>::zeros({1, 1, 2, 2, 2});
  Tensor<double> g({1}, {1.0}), b({1}, {0.0});
  CHECK_THROWS_AS(volf::batchless_norm(x, g, b, 0.0), std::invalid_argument);
}

TEST_CASE("batchless_norm gradients match finite differences", "[nn]") {
  std::mt19937_64 rng(5);
  Tensor<double> x = random_tensor<double>({1, 2, 2, 2, 2}, rng);
  Tensor<double> g = random_tensor<double>({2}, rng, 0.5, 1.5);
  Tensor<double> b = random_tensor<double>({2}, rng);
  Tensor<double> gw = random_tensor<double>({1, 2, 2, 2, 2}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::batchless_norm(x, g, b), gw)); }, {x, g, b}) < 1e-6);
}

TEST_CASE("layer_norm gradients match finite differences", "[nn]") {
  std::mt19937_64 rng(6);
  Tensor<double> x = random_tensor<double>({2, 3, 4}, rng);
  Tensor<double> g = random_tensor<double>({4}, rng, 0.5, 1.5);
  Tensor<double> b = random_tensor<double>({4}, rng);
  Tensor<double> gw = random_tensor<double>({2, 3, 4}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::layer_norm(x, g, b), gw)); }, {x, g, b}) < 1e-6);
}

TEST_CASE("add_channel_bias broadcasts and differentiates", "[nn]") {
  Tensor<double> x({1, 2, 1, 1, 2}, {1, 2, 3, 4});
  Tensor<double> b({2}, {10, 20});
  Tensor<double> y = volf::add_channel_bias(x, b);
  CHECK(y.values() == std::vector<double>{11, 12, 23, 24});

  std::mt19937_64 rng(7);
  Tensor<double> xi = random_tensor<double>({1, 3, 2, 2, 2}, rng);
  Tensor<double> bi = random_tensor<double>({3}, rng);
  Tensor<double> gw = random_tensor<double>({1, 3, 2, 2, 2}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::add_channel_bias(xi, bi), gw)); }, {xi, bi}) < 1e-6);
}

TEST_CASE("grid/token round trip and gradient", "[nn]") {
  std::mt19937_64 rng(8);
  Tensor<double> x = random_tensor<double>({1, 3, 2, 2, 2}, rng, -1, 1, false);
  Tensor<double> back = volf::tokens_to_grid(volf::grid_to_tokens(x), 2, 2, 2);
  CHECK(back.values() == x.values());

  Tensor<double> xg = random_tensor<double>({1, 2, 2, 2, 2}, rng);
  Tensor<double> gw = random_tensor<double>({1, 8, 2}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(volf::grid_to_tokens(xg), gw)); }, {xg}) < 1e-6);
}

TEST_CASE("attention with one token reduces to projections", "[nn]") {
  std::mt19937_64 rng(9);
  const int E = 4;
  Tensor<double> v = random_tensor<double>({1, 1, E}, rng, -1, 1, false);
  Tensor<double> wq = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wk = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wv = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wo = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> y = volf::multi_head_attention(v, v, v, 2, wq, wk, wv, wo);
  Tensor<double> direct = linear(linear(v, wv), wo);
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == Catch::Approx(direct.values()[i]).margin(1e-9));
}

TEST_CASE("identical keys give uniform attention weights", "[nn]") {
  // all key tokens equal -> every query attends uniformly -> the context is
  // the mean value row, so all output tokens coincide
  std::mt19937_64 rng(10);
  const int E = 4, T = 3;
  Tensor<double> q = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  std::vector<double> kv(static_cast<size_t>(T * E));
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e) kv[static_cast<size_t>(t * E + e)] = 0.3 * e - 0.2;
  Tensor<double> k({1, T, E}, std::move(kv));
  Tensor<double> v = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  Tensor<double> wq = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wk = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wv = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wo = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> y = volf::multi_head_attention(q, k, v, 2, wq, wk, wv, wo);
  // mean of value rows through the same projections
  std::vector<double> mv(static_cast<size_t>(E), 0.0);
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e) mv[static_cast<size_t>(e)] += v.values()[static_cast<size_t>(t * E + e)] / T;
  Tensor<double> vbar({1, 1, E}, std::move(mv));
  Tensor<double> expect = linear(linear(vbar, wv), wo);
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e)
      CHECK(y.values()[static_cast<size_t>(t * E + e)] ==
            Catch::Approx(expect.values()[static_cast<size_t>(e)]).margin(1e-9));
}

TEST_CASE("attention matches a direct matrix oracle", "[nn]") {
  // T=3, E=4, heads=2, dh=2: everything recomputed with explicit little
  // matrices in plain double arithmetic
  std::mt19937_64 rng(11);
  const int E = 4, T = 3, heads = 2, dh = 2;
  Tensor<double> q = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  Tensor<double> k = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  Tensor<double> v = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  Tensor<double> wq = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wk = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wv = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wo = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> y = volf::multi_head_attention(q, k, v, heads, wq, wk, wv, wo);

  auto proj = [&](const Tensor<double>& x, const Tensor<double>& w, int t, int e) {
    double acc = 0;
    for (int i = 0; i < E; ++i)
      acc += x.values()[static_cast<size_t>(t * E + i)] * w.values()[static_cast<size_t>(e * E + i)];
    return acc;
  };
  std::vector<double> merged(static_cast<size_t>(T * E), 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int t = 0; t < T; ++t) {
      // attention logits for query t against all keys, this head's slice
      double logits[3];
      for (int s = 0; s < T; ++s) {
        double dot = 0;
        for (int e = 0; e < dh; ++e)
          dot += proj(q, wq, t, h * dh + e) * proj(k, wk, s, h * dh + e);
        logits[s] = dot / std::sqrt(static_cast<double>(dh));
      }
      double mx = std::max({logits[0], logits[1], logits[2]});
      double den = 0, w[3];
      for (int s = 0; s < T; ++s) den += (w[s] = std::exp(logits[s] - mx));
      for (int e = 0; e < dh; ++e) {
        double ctx = 0;
        for (int s = 0; s < T; ++s) ctx += w[s] / den * proj(v, wv, s, h * dh + e);
        merged[static_cast<size_t>(t * E + h * dh + e)] = ctx;
      }
    }
  }
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e) {
      double acc = 0;
      for (int i = 0; i < E; ++i)
        acc += merged[static_cast<size_t>(t * E + i)] * wo.values()[static_cast<size_t>(e * E + i)];
      CHECK(y.values()[static_cast<size_t>(t * E + e)] == Catch::Approx(acc).margin(1e-6));
    }
}

TEST_CASE("attention is permutation-equivariant without positional input", "[nn]") {
  std::mt19937_64 rng(12);
  const int E = 4, T = 3;
  Tensor<double> x = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  Tensor<double> wq = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wk = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wv = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> wo = random_tensor<double>({E, E}, rng, -1, 1, false);
  Tensor<double> y = volf::multi_head_attention(x, x, x, 2, wq, wk, wv, wo);
  const int perm[3] = {2, 0, 1};
  std::vector<double> pv(static_cast<size_t>(T * E));
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e)
      pv[static_cast<size_t>(t * E + e)] = x.values()[static_cast<size_t>(perm[t] * E + e)];
  Tensor<double> xp({1, T, E}, std::move(pv));
  Tensor<double> yp = volf::multi_head_attention(xp, xp, xp, 2, wq, wk, wv, wo);
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < E; ++e)
      CHECK(yp.values()[static_cast<size_t>(t * E + e)] ==
            Catch::Approx(y.values()[static_cast<size_t>(perm[t] * E + e)]).margin(1e-9));
}

TEST_CASE("attention gradients match finite differences", "[nn]") {
  std::mt19937_64 rng(13);
  const int E = 4, T = 2;
  Tensor<double> q = random_tensor<double>({1, T, E}, rng);
  Tensor<double> k = random_tensor<double>({1, T, E}, rng);
  Tensor<double> v = random_tensor<double>({1, T, E}, rng);
  Tensor<double> wq = random_tensor<double>({E, E}, rng, -0.5, 0.5);
  Tensor<double> wk = random_tensor<double>({E, E}, rng, -0.5, 0.5);
  Tensor<double> wv = random_tensor<double>({E, E}, rng, -0.5, 0.5);
  Tensor<double> wo = random_tensor<double>({E, E}, rng, -0.5, 0.5);
  Tensor<double> gw = random_tensor<double>({1, T, E}, rng, -1, 1, false);
  CHECK(gradcheck(
            [&] {
              return sum(mul(volf::multi_head_attention(q, k, v, 2, wq, wk, wv, wo), gw));
            },
            {q, k, v, wq, wk, wv, wo}) < 1e-6);
}

TEST_CASE("adam first step with unit gradient moves by ~lr", "[nn]") {
  volf::Parameter<float> p("w", Tensor<float>::scalar(1.0f, true));
  p.value.grad()[0] = 1.0f;
  volf::AdamOptions opt;
  opt.weight_decay = 0.0;
  volf::adam_step<float>({&p}, opt);
  CHECK(p.value.values()[0] == Catch::Approx(1.0 - 1e-4).epsilon(1e-6));
  CHECK(p.step_count == 1);
}

TEST_CASE("adam with zero gradient and zero decay leaves the parameter unchanged", "[nn]") {
  volf::Parameter<float> p("w", Tensor<float>::scalar(0.5f, true));
  p.value.zero_grad();
  volf::AdamOptions opt;
  opt.weight_decay = 0.0;
  volf::adam_step<float>({&p}, opt);
  CHECK(p.value.values()[0] == 0.5f);
}

TEST_CASE("adam descends f(w)=w^2 monotonically", "[nn]") {
  volf::Parameter<double> p("w", Tensor<double>::scalar(1.0, true));
  volf::AdamOptions opt;
  opt.lr = 0.05;
  opt.weight_decay = 0.0;
  double prev = 1.0;
  for (int i = 0; i < 10; ++i) {
    p.value.zero_grad();
    Tensor<double> loss = mul(p.value, p.value);
    loss.backward();
    volf::adam_step<double>({&p}, opt);
    const double f = p.value.values()[0] * p.value.values()[0];
    CHECK(f < prev);
    prev = f;
  }
}

TEST_CASE("adam throws on a missing gradient", "[nn]") {
  volf::Parameter<float> p("w", Tensor<float>::scalar(1.0f, true));
  CHECK_THROWS_AS(volf::adam_step<float>({&p}), std::runtime_error);
}
