#include <doctest.h>

#include <cmath>
#include <random>

#include "mddn/errors.hpp"
#include "mddn/metrics.hpp"

using namespace mddn;
using namespace mddn::metrics;

namespace {

Tensor<float> noise(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor<float> t({c, h, w});
  for (auto& v : t.values()) v = d(rng);
  return t;
}

double row_weight(std::size_t h, std::size_t H) {
  return std::sin((h + 0.5) * M_PI / H);
}

// Per-window SSIM over the valid region, single channel, with row weights.
double ssim_oracle(const Tensor<float>& a, const Tensor<float>& b, std::size_t c, bool weighted) {
  const std::size_t H = a.dim(1), W = a.dim(2), R = 5;
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2 * 1.5 * 1.5));
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double acc = 0, wsum = 0;
  for (std::size_t y = R; y + R < H; ++y)
    for (std::size_t x = R; x + R < W; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = -5; dy <= 5; ++dy)
        for (int dx = -5; dx <= 5; ++dx) {
          const double k = g[dy + 5] * g[dx + 5] / (gs * gs);
          const double va = a.at(c, y + dy, x + dx), vb = b.at(c, y + dy, x + dx);
          ma += k * va;
          mb += k * vb;
          saa += k * va * va;
          sbb += k * vb * vb;
          sab += k * va * vb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      const double s = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      const double w = weighted ? row_weight(y, H) : 1.0;
      acc += w * s;
      wsum += w;
    }
  return acc / wsum;
}

}  // namespace

TEST_CASE("psnr of identical images is capped") {
  const auto a = noise(3, 4, 8, 1);
  CHECK(psnr(a, a) == kMaxDb);
  CHECK(ws_psnr(a, a) == kMaxDb);
}

TEST_CASE("uniform error of 16 levels gives 20 log10(255/16)") {
  const auto a = noise(3, 6, 12, 2);
  auto b = a;
  for (auto& v : b.values()) v += 16.0f / 255;
  const double expect = 20 * std::log10(255.0 / 16.0);
  CHECK(std::abs(psnr(a, b) - expect) < 1e-3);
  CHECK(std::abs(ws_psnr(a, b) - expect) < 1e-3);
  CHECK(std::abs(psnr(a, b, 0.5) - (expect - 20 * std::log10(2.0))) < 1e-3);
}

TEST_CASE("uniform weighting reduces ws metrics to the plain ones") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = noise(3, 16, 32, 10 + seed), b = noise(3, 16, 32, 20 + seed);
    CHECK(std::abs(ws_psnr(a, b, {0, 0, true}) - psnr(a, b)) < 1e-9);
    CHECK(std::abs(ws_ssim(a, b, {0, 0, true}) - ssim(a, b)) < 1e-9);
  }
}

TEST_CASE("ws-psnr equals the latitude-weighted mse") {
  const auto a = noise(3, 7, 14, 3), b = noise(3, 7, 14, 4);
  for (std::size_t full : {7u, 20u}) {
    const std::size_t off = full == 7 ? 0 : 9;
    double num = 0, den = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t h = 0; h < 7; ++h)
        for (std::size_t w = 0; w < 14; ++w) {
          const double e = double(a.at(c, h, w)) - b.at(c, h, w), wt = row_weight(off + h, full);
          num += wt * e * e;
          den += wt;
        }
    CHECK(ws_psnr(a, b, {full, off}) == doctest::Approx(10 * std::log10(den / num)).epsilon(1e-9));
  }
}

TEST_CASE("errors near the poles cost less than at the equator") {
  Tensor<float> gt({3, 4, 8}, 0.5f);
  auto polar = gt, equator = gt;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t w = 0; w < 8; ++w) {
      polar.at(c, 0, w) += 0.1f;
      equator.at(c, 1, w) += 0.1f;
    }
  CHECK(psnr(polar, gt) == doctest::Approx(psnr(equator, gt)));
  CHECK(ws_psnr(polar, gt) > ws_psnr(equator, gt));
  const double gap = ws_psnr(polar, gt) - ws_psnr(equator, gt);
  CHECK(gap == doctest::Approx(10 * std::log10(row_weight(1, 4) / row_weight(0, 4))).epsilon(1e-6));
}

TEST_CASE("ssim matches a direct window evaluation") {
  const auto a = noise(3, 16, 18, 5);
  auto b = a;
  std::mt19937_64 rng(6);
  std::normal_distribution<float> d(0.0f, 0.1f);
  for (auto& v : b.values()) v += d(rng);
  double plain = 0, weighted = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    plain += ssim_oracle(a, b, c, false) / 3;
    weighted += ssim_oracle(a, b, c, true) / 3;
  }
  CHECK(ssim(a, b) == doctest::Approx(plain).epsilon(1e-9));
  CHECK(ws_ssim(a, b) == doctest::Approx(weighted).epsilon(1e-9));
}

TEST_CASE("ssim basic properties") {
  const auto a = noise(3, 16, 16, 7), b = noise(3, 16, 16, 8);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ws_ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  auto inv = a;
  for (auto& v : inv.values()) v = 1.0f - v;
  CHECK(ssim(a, inv) < 0.0);
  CHECK_THROWS_AS(ssim(noise(3, 8, 8, 1), noise(3, 8, 8, 2)), InputError);
  CHECK_THROWS_AS(psnr(noise(3, 8, 8, 1), noise(3, 8, 9, 2)), InputError);
}

TEST_CASE("luma conversion and border crop") {
  Tensor<float> rgb({3, 1, 2});
  rgb.at(0, 0, 1) = rgb.at(1, 0, 1) = rgb.at(2, 0, 1) = 1.0f;
  const auto y = y_channel(rgb);
  REQUIRE(y.shape() == Shape{1, 1, 2});
  CHECK(y[0] == doctest::Approx(16.0 / 255));
  CHECK(y[1] == doctest::Approx(235.0 / 255).epsilon(1e-5));

  const auto a = noise(3, 20, 40, 9), b = noise(3, 20, 40, 10);
  const auto r = evaluate(a, b, {}, {false, 3});
  const auto ca = crop_border(a, 3), cb = crop_border(b, 3);
  REQUIRE(ca.shape() == Shape{3, 14, 34});
  CHECK(ca.at(1, 0, 0) == a.at(1, 3, 3));
  CHECK(r.psnr == psnr(ca, cb));
  CHECK(r.ws_psnr == ws_psnr(ca, cb, {20, 3}));
  const auto ry = evaluate(a, b, {}, {true, 0});
  CHECK(ry.psnr == psnr(y_channel(a), y_channel(b)));
}
