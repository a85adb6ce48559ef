#include <doctest.h>

#include <cmath>
#include <random>

#include "mddn/ops.hpp"
#include "mddn/parameter.hpp"

using namespace mddn;
using namespace mddn::ops;

namespace {

Tensor<double> rand_tensor(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(s);
  fill_uniform(t, rng, 1.0);
  return t;
}

// Direct seven-loop convolution.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const Tensor<double>& b, const ConvSpec& s) {
  const long N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long Co = w.dim(0), k = w.dim(2);
  const long d = s.dilation, st = s.stride, p = s.pad;
  const long OH = (H + 2 * p - d * (k - 1) - 1) / st + 1;
  const long OW = (W + 2 * p - d * (k - 1) - 1) / st + 1;
  Tensor<double> y({static_cast<std::size_t>(N), static_cast<std::size_t>(Co),
                    static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < Co; ++o)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          double acc = b.empty() ? 0.0 : b[o];
          for (long c = 0; c < Ci; ++c)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                long iy = oy * st - p + ky * d, ix = ox * st - p + kx * d;
                if (s.padding == Padding::replicate) {
                  iy = std::clamp(iy, 0L, H - 1);
                  ix = std::clamp(ix, 0L, W - 1);
                } else if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                  continue;
                }
                acc += w.at(o, c, ky, kx) * x.at(n, c, iy, ix);
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches direct summation") {
  struct Case {
    std::size_t k;
    ConvSpec spec;
  };
  const Case cases[] = {
      {3, ConvSpec::same(3)},
      {3, ConvSpec::same(3, 2)},
      {3, ConvSpec::same(3, 3, Padding::replicate)},
      {1, ConvSpec::same(1)},
      {3, ConvSpec{2, 1, 1, Padding::zeros}},
      {5, ConvSpec{1, 0, 1, Padding::zeros}},
  };
  std::uint64_t seed = 1;
  for (const auto& c : cases) {
    const auto x = rand_tensor({2, 3, 9, 8}, seed++);
    const auto w = rand_tensor({4, 3, c.k, c.k}, seed++);
    const auto b = rand_tensor({4}, seed++);
    const auto y = conv2d(x, w, b, c.spec);
    const auto ref = conv_oracle(x, w, b, c.spec);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  const auto x = rand_tensor({1, 3, 4, 4}, 1);
  const auto w = rand_tensor({2, 2, 3, 3}, 2);
  CHECK_THROWS_AS(conv2d(x, w, Tensor<double>(), ConvSpec::same(3)), InputError);
}

TEST_CASE("matmul matches the triple loop") {
  const auto a = rand_tensor({5, 7}, 4), b = rand_tensor({7, 3}, 5);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a[i * 7 + k] * b[k * 3 + j];
      CHECK(c[i * 3 + j] == doctest::Approx(s).epsilon(1e-14));
    }
  CHECK_THROWS_AS(matmul(a, a), InputError);
}

TEST_CASE("softmax normalises along the axis and ignores shifts") {
  const auto x = rand_tensor({3, 4, 5}, 6);
  const auto y = softmax(x, 1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t a = 0; a < 4; ++a) {
        CHECK(y[(i * 4 + a) * 5 + j] > 0.0);
        s += y[(i * 4 + a) * 5 + j];
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
    }
  auto shifted = x;
  for (auto& v : shifted.values()) v += 100.0;
  CHECK(max_abs_diff(softmax(shifted, 1), y) < 1e-14);
}

TEST_CASE("activations at reference points") {
  Tensor<double> x({4}, std::vector<double>{-2.0, -0.5, 0.0, 1.0});
  const auto lr = activation(x, Activation::leaky_relu);
  CHECK(lr[0] == doctest::Approx(-0.2));
  CHECK(lr[1] == doctest::Approx(-0.05));
  CHECK(lr[2] == 0.0);
  CHECK(lr[3] == 1.0);
  const auto g = activation(x, Activation::gelu);
  // x * Phi(x) with Phi from tabulated normal CDF values.
  CHECK(g[0] == doctest::Approx(-2.0 * 0.022750131948179195).epsilon(1e-14));
  CHECK(g[1] == doctest::Approx(-0.5 * 0.3085375387259869).epsilon(1e-14));
  CHECK(g[2] == 0.0);
  CHECK(g[3] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
}

TEST_CASE("layer norm gives zero mean and unit variance across channels") {
  const auto x = rand_tensor({2, 6, 3, 4}, 7);
  Tensor<double> gamma({6}, 1.0), beta({6}, 0.0);
  const auto y = layer_norm(x, gamma, beta);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 4; ++w) {
        double m = 0, v = 0;
        for (std::size_t c = 0; c < 6; ++c) m += y.at(n, c, h, w) / 6;
        for (std::size_t c = 0; c < 6; ++c) v += (y.at(n, c, h, w) - m) * (y.at(n, c, h, w) - m) / 6;
        CHECK(std::abs(m) < 1e-12);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
      }
}

TEST_CASE("pixel shuffle layout and inverse") {
  Tensor<double> x({1, 4, 1, 1}, std::vector<double>{0, 1, 2, 3});
  const auto y = pixel_shuffle(x, 2);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.at(0, 0, 0, 0) == 0);
  CHECK(y.at(0, 0, 0, 1) == 1);
  CHECK(y.at(0, 0, 1, 0) == 2);
  CHECK(y.at(0, 0, 1, 1) == 3);
  const auto r = rand_tensor({2, 8, 3, 5}, 8);
  CHECK(pixel_unshuffle(pixel_shuffle(r, 2), 2) == r);
}

TEST_CASE("reflection indices and padding") {
  CHECK(reflect_index(-1, 4) == 1);
  CHECK(reflect_index(4, 4) == 2);
  CHECK(reflect_index(5, 4) == 1);
  CHECK(reflect_index(0, 1) == 0);
  const auto x = rand_tensor({1, 2, 3, 3}, 9);
  const auto p = pad_reflect(x, 2, 1);
  REQUIRE(p.shape() == Shape{1, 2, 5, 4});
  CHECK(p.at(0, 1, 3, 0) == x.at(0, 1, 1, 0));
  CHECK(p.at(0, 1, 4, 3) == x.at(0, 1, 0, 1));
  CHECK(crop(p, 3, 3) == x);
}
