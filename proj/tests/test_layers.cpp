#include <doctest.h>

#include <cmath>

#include "mddn/layers.hpp"

using namespace mddn;
using namespace mddn::layers;

namespace {

Tensor<double> rand_tensor(const Shape& s, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  Tensor<double> t(s);
  fill_uniform(t, rng, bound);
  return t;
}

std::uint64_t conv_params(std::size_t ci, std::size_t co, std::size_t k) {
  return ci * co * k * k + co;
}

}  // namespace

TEST_CASE("low-rank compose equals A B^T reshaped to Co x Ci x k x k") {
  const std::size_t ci = 5, co = 4, k = 3, r = 2;
  const auto a = rand_tensor({ci, r}, 1), b = rand_tensor({co * k * k, r}, 2);
  const auto w = low_rank_compose(a, b, co, k);
  REQUIRE(w.shape() == Shape{co, ci, k, k});
  for (std::size_t i = 0; i < ci; ++i)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t t = 0; t < k * k; ++t) {
        double s = 0;
        for (std::size_t q = 0; q < r; ++q) s += a[i * r + q] * b[(o * k * k + t) * r + q];
        CHECK(w[(o * ci + i) * k * k + t] == doctest::Approx(s).epsilon(1e-14));
      }
}

TEST_CASE("low-rank conv equals conv2d with the composed weight") {
  Rng rng(3);
  LowRankConv<double> lrc("lrc", 6, 5, 3, 2, rng, false);
  const auto x = rand_tensor({2, 6, 5, 7}, 4);
  const auto y = lrc.forward(x);
  auto& p = lrc.projection();
  const auto ref = ops::conv2d(x, p.composed_weight(), p.bias().value, ops::ConvSpec::same(3));
  CHECK(max_abs_diff(y, ref) < 1e-12);
}

TEST_CASE("rank larger than the factor bound is a config error") {
  Rng rng(5);
  CHECK_THROWS_AS(LowRankProjection<double>("p", 2, 4, 3, 3, rng, false), ConfigError);
  CHECK_NOTHROW(LowRankProjection<double>("p", 2, 4, 3, 2, rng, false));
}

TEST_CASE("deformable conv with zero offsets equals replicate-padded conv") {
  for (std::size_t d : {1u, 2u, 3u}) {
    Rng rng(10 + d);
    DeformConv<double> dc("d4c", 4, d, 3, 8, rng, true);
    fill_uniform(dc.projection().a_factor().value, rng, 0.5);
    fill_uniform(dc.projection().bias().value, rng, 0.5);
    const auto x = rand_tensor({2, 4, 7, 9}, 20 + d);
    const auto dmap = distortion_tensor<double>({{0, 0}}, 2, 7, 9);
    const auto y = dc.forward(x, dmap);
    for (double v : dc.last_offsets().values.values()) REQUIRE(v == 0.0);
    const auto ref = ops::conv2d(x, dc.projection().composed_weight(), dc.projection().bias().value,
                                 ops::ConvSpec::same(3, d, ops::Padding::replicate));
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("distortion tensor follows per-item geometry") {
  const auto t = distortion_tensor<double>({{0, 8}, {4, 8}}, 2, 4, 3);
  REQUIRE(t.shape() == Shape{2, 1, 4, 3});
  for (std::size_t h = 0; h < 4; ++h) {
    CHECK(t.at(0, 0, h, 1) == doctest::Approx(std::sin((h + 0.5) * M_PI / 8)));
    CHECK(t.at(1, 0, h, 2) == doctest::Approx(std::sin((h + 4.5) * M_PI / 8)));
  }
  CHECK_THROWS_AS(distortion_tensor<double>({{0, 8}, {4, 8}, {0, 8}}, 2, 4, 3), InputError);
}

TEST_CASE("window attention matches a direct evaluation") {
  const std::size_t C = 4, heads = 2, ws = 2, hd = C / heads;
  const auto q = rand_tensor({1, C, 2, 4}, 30), k = rand_tensor({1, C, 2, 4}, 31),
             v = rand_tensor({1, C, 2, 4}, 32);
  const auto bias = rand_tensor({(2 * ws - 1) * (2 * ws - 1), heads}, 33);
  Tensor<double> probs;
  const auto y = window_attention(q, k, v, bias, heads, ws, &probs);
  for (std::size_t wx = 0; wx < 2; ++wx)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < ws * ws; ++i) {
        const std::size_t iy = i / ws, ix = wx * ws + i % ws;
        std::vector<double> logits(ws * ws);
        double mx = -1e300;
        for (std::size_t j = 0; j < ws * ws; ++j) {
          const std::size_t jy = j / ws, jx = wx * ws + j % ws;
          double s = 0;
          for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) s += q.at(0, c, iy, ix) * k.at(0, c, jy, jx);
          const std::size_t rel = (iy - jy + ws - 1) * (2 * ws - 1) + (i % ws - j % ws + ws - 1);
          logits[j] = s / std::sqrt(double(hd)) + bias[rel * heads + h];
          mx = std::max(mx, logits[j]);
        }
        double z = 0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
          double o = 0;
          for (std::size_t j = 0; j < ws * ws; ++j) o += logits[j] / z * v.at(0, c, j / ws, wx * ws + j % ws);
          CHECK(y.at(0, c, iy, ix) == doctest::Approx(o).epsilon(1e-12));
        }
      }
}

TEST_CASE("attention rows are distributions") {
  Rng rng(40);
  Ddca<double> a("ddca", 8, 2, 4, 2, 6, rng, false);
  const auto f = rand_tensor({1, 8, 6, 7}, 41);
  const auto y = a.forward(f, distortion_tensor<double>({{2, 20}}, 1, 6, 7));
  CHECK(y.shape() == f.shape());
  const auto& p = a.last_attention();
  const std::size_t L = 16;
  for (std::size_t r = 0; r < p.numel() / L; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < L; ++j) {
      CHECK(p[r * L + j] >= 0.0);
      s += p[r * L + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("zero-initialised cross-attention outputs zero") {
  Rng rng(42);
  Ddca<double> a("ddca", 8, 2, 4, 2, 6, rng, true);
  const auto f = rand_tensor({1, 8, 4, 4}, 43);
  const auto y = a.forward(f, distortion_tensor<double>({{0, 0}}, 1, 4, 4));
  for (double v : y.values()) CHECK(v == 0.0);
  for (double v : a.last_offsets().values.values()) CHECK(v == 0.0);
}

TEST_CASE("fusion gates are per-pixel distributions") {
  Rng rng(50);
  Mff<double> m("mff", 4, 3, Fusion::mff, rng, false);
  const auto f = rand_tensor({2, 4, 3, 3}, 51);
  std::vector<Tensor<double>> br{rand_tensor({2, 4, 3, 3}, 52), rand_tensor({2, 4, 3, 3}, 53),
                                 rand_tensor({2, 4, 3, 3}, 54)};
  m.forward(f, br, {true, true, true});
  const auto& g = m.last_gates();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 9; ++p) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        CHECK(g[(n * 3 + k) * 9 + p] >= 0.0);
        s += g[(n * 3 + k) * 9 + p];
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  m.forward(f, br, {true, false, true});
  for (std::size_t p = 0; p < 18; ++p) CHECK(m.last_gates()[(p / 9 * 3 + 1) * 9 + p % 9] == 0.0);
}

TEST_CASE("zero-initialised fusion averages and a single branch passes through") {
  Rng rng(55);
  Mff<double> m("mff", 4, 3, Fusion::mff, rng, true);
  const auto f = rand_tensor({1, 4, 3, 5}, 56);
  std::vector<Tensor<double>> br{rand_tensor({1, 4, 3, 5}, 57), rand_tensor({1, 4, 3, 5}, 58),
                                 rand_tensor({1, 4, 3, 5}, 59)};
  const auto avg = m.forward(f, br, {true, true, true});
  for (std::size_t i = 0; i < avg.numel(); ++i)
    CHECK(avg[i] == (br[0][i] + br[1][i] + br[2][i]) / 3);
  const auto one = m.forward(f, {br[0], Tensor<double>(), Tensor<double>()}, {true, false, false});
  CHECK(one == br[0]);
  CHECK_THROWS_AS(m.forward(f, br, {false, false, false}), InputError);
}

TEST_CASE("addition fusion sums and has no gate") {
  Rng rng(60);
  Mff<double> m("add", 4, 2, Fusion::addition, rng, false);
  const auto f = rand_tensor({1, 4, 2, 2}, 61);
  std::vector<Tensor<double>> br{rand_tensor({1, 4, 2, 2}, 62), rand_tensor({1, 4, 2, 2}, 63)};
  const auto y = m.forward(f, br, {true, true});
  CHECK(max_abs_diff(y, br[0] + br[1]) == 0.0);
  ParamList<double> ps;
  m.collect(ps);
  CHECK(ps.empty());
}

TEST_CASE("multi-level layer parameter count decomposes by branch") {
  ModelConfig cfg = tiny_preset();
  cfg.ffn = false;
  auto count = [&](ModelConfig c) {
    Rng rng(0);
    Mddl<float> l("l", c, rng);
    ParamList<float> ps;
    l.collect(ps);
    std::uint64_t n = 0;
    for (auto* p : ps) n += p->numel();
    return n;
  };
  const std::size_t C = cfg.channels;
  ModelConfig add = cfg;
  add.fusion = Fusion::addition;
  CHECK(count(cfg) - count(add) == conv_params(C, 3, 3));
  ModelConfig two = cfg, three = cfg;
  two.branches = BranchSet({2});
  three.branches = BranchSet({3});
  CHECK(count(two) == count(three));
}

TEST_CASE("layer and block preserve shape") {
  ModelConfig cfg = tiny_preset();
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.offset_width = 6;
  cfg.rank = 2;
  Rng rng(70);
  Mddb<double> b("b", cfg, rng);
  const auto x = rand_tensor({2, 8, 5, 6}, 71);
  const auto y = b.forward(x, distortion_tensor<double>({{0, 10}, {5, 10}}, 2, 5, 6));
  CHECK(y.shape() == x.shape());
  CHECK(all_finite(y));
}
