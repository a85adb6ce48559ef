#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mddn/errors.hpp"
#include "mddn/geometry.hpp"

using namespace mddn;
using namespace mddn::geometry;

namespace {

// Row centre latitude measured from the north pole: the weight is sin(colatitude).
double colatitude_weight(std::size_t h, std::size_t H) {
  return std::sin((static_cast<double>(h) + 0.5) * std::numbers::pi / static_cast<double>(H));
}

}  // namespace

TEST_CASE("four-row map matches the closed-form cosines") {
  const auto m = distortion_map(4, 8, 0, 4);
  CHECK(m.row(0) == doctest::Approx(0.38268343236508984).epsilon(1e-15));
  CHECK(m.row(1) == doctest::Approx(0.92387953251128674).epsilon(1e-15));
  CHECK(m.row(2) == doctest::Approx(0.92387953251128674).epsilon(1e-15));
  CHECK(m.row(3) == doctest::Approx(0.38268343236508984).epsilon(1e-15));
}

TEST_CASE("map equals the colatitude sine at every row") {
  for (std::size_t H : {1u, 2u, 3u, 7u, 64u, 1024u}) {
    const auto m = distortion_map(H, 2 * H, 0, H);
    for (std::size_t h = 0; h < H; ++h) CHECK(std::abs(m.at(h, 3) - colatitude_weight(h, H)) < 1e-12);
  }
}

TEST_CASE("map is symmetric about the equator and positive") {
  for (std::size_t H : {5u, 16u, 333u}) {
    const auto m = distortion_map(H, 4, 0, H);
    for (std::size_t h = 0; h < H; ++h) {
      CHECK(m.row(h) == m.row(H - 1 - h));
      CHECK(m.row(h) > 0.0);
      CHECK(m.row(h) <= 1.0);
    }
  }
}

TEST_CASE("a band of the map equals the same rows of the full map") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t full = 8 + rng() % 200;
    const std::size_t h = 1 + rng() % full;
    const std::size_t off = rng() % (full - h + 1);
    const auto whole = distortion_map(full, 3, 0, full);
    const auto band = distortion_map(h, 3, off, full);
    for (std::size_t r = 0; r < h; ++r) REQUIRE(band.row(r) == whole.row(off + r));
  }
}

TEST_CASE("bands that leave the image are rejected") {
  CHECK_THROWS_AS(distortion_map(4, 4, 1, 4), InputError);
  CHECK_THROWS_AS(distortion_map(0, 4, 0, 4), InputError);
  CHECK_THROWS_AS(distortion_map(4, 0, 0, 4), InputError);
}

TEST_CASE("erp projection round trip and stretch") {
  const SphericalCoord p{0.7, -0.3};
  const auto q = erp_project(p);
  CHECK(q.x == 0.7);
  CHECK(q.y == -0.3);
  const auto back = erp_unproject(q);
  CHECK(back.theta == p.theta);
  CHECK(back.phi == p.phi);
  CHECK(jacobian_stretch(0.0, 1.0) == doctest::Approx(1.0));
  CHECK(jacobian_stretch(std::numbers::pi / 3, 1.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(jacobian_stretch(2.0, 1.0), InputError);
  CHECK_THROWS_AS(erp_project({0.0, std::numbers::pi / 2}), InputError);
}

TEST_CASE("only erp is a known projection") {
  CHECK(parse_projection("erp") == Projection::erp);
  CHECK_THROWS_AS(parse_projection("cubemap"), ConfigError);
}
