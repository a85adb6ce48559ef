#include <doctest.h>

#include <cmath>

#include "mddn/ops.hpp"
#include "mddn/parameter.hpp"
#include "mddn/sampling.hpp"

using namespace mddn;
using namespace mddn::sampling;

namespace {

Tensor<double> rand_tensor(const Shape& s, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  Tensor<double> t(s);
  fill_uniform(t, rng, bound);
  return t;
}

Tensor<double> coords_at(std::vector<std::pair<double, double>> xy) {
  Tensor<double> c({1, 2, 1, xy.size()});
  for (std::size_t i = 0; i < xy.size(); ++i) {
    c.at(0, 0, 0, i) = xy[i].first;
    c.at(0, 1, 0, i) = xy[i].second;
  }
  return c;
}

}  // namespace

TEST_CASE("bilinear sampling at integer and half positions") {
  const auto f = rand_tensor({1, 2, 4, 5}, 1);
  const auto y = bilinear_sample(f, coords_at({{2.0, 1.0}, {2.5, 1.0}, {0.5, 2.5}}));
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(y.at(0, c, 0, 0) == f.at(0, c, 1, 2));
    CHECK(y.at(0, c, 0, 1) == doctest::Approx((f.at(0, c, 1, 2) + f.at(0, c, 1, 3)) / 2));
    const double q = (f.at(0, c, 2, 0) + f.at(0, c, 2, 1) + f.at(0, c, 3, 0) + f.at(0, c, 3, 1)) / 4;
    CHECK(y.at(0, c, 0, 2) == doctest::Approx(q));
  }
}

TEST_CASE("out-of-range coordinates clamp to the border") {
  const auto f = rand_tensor({1, 1, 3, 3}, 2);
  const auto y = bilinear_sample(f, coords_at({{-4.0, -1.5}, {9.0, 1.0}, {1.0, 7.2}}));
  CHECK(y[0] == f.at(0, 0, 0, 0));
  CHECK(y[1] == f.at(0, 0, 1, 2));
  CHECK(y[2] == f.at(0, 0, 2, 1));
}

TEST_CASE("warp with zero offsets is the identity") {
  const auto f = rand_tensor({2, 3, 5, 6}, 3);
  const auto off = OffsetField<double>::warp_field(Tensor<double>({2, 2, 5, 6}));
  CHECK(warp(f, off) == f);
}

TEST_CASE("warp by a whole pixel shifts the image") {
  const auto f = rand_tensor({1, 1, 4, 4}, 4);
  Tensor<double> o({1, 2, 4, 4});
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 4; ++w) o.at(0, 0, h, w) = 1.0;  // dx = +1
  const auto y = warp(f, OffsetField<double>::warp_field(o));
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 3; ++w) CHECK(y.at(0, 0, h, w) == f.at(0, 0, h, w + 1));
}

TEST_CASE("deform gather with zero offsets equals replicate-padded im2col") {
  for (std::size_t d : {1u, 2u, 3u}) {
    const auto f = rand_tensor({1, 2, 7, 6}, 10 + d);
    const auto off = OffsetField<double>::kernel_field(Tensor<double>({1, 18, 7, 6}), 3);
    const auto cols = deform_gather(f, off, d);
    Tensor<double> ref({1, 18, 7, 6});
    ops::im2col(f.data(), 2, 7, 6, 3, ops::ConvSpec::same(3, d, ops::Padding::replicate),
                ref.data());
    CHECK(cols == ref);
  }
}

TEST_CASE("offset fields must match their kind") {
  const auto f = rand_tensor({1, 1, 3, 3}, 5);
  CHECK_THROWS_AS(warp(f, OffsetField<double>::warp_field(Tensor<double>({1, 3, 3, 3}))),
                  InputError);
  CHECK_THROWS_AS(
      deform_gather(f, OffsetField<double>::kernel_field(Tensor<double>({1, 17, 3, 3}), 3), 1),
      InputError);
}
