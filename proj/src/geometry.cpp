#include "mddn/geometry.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "mddn/errors.hpp"

namespace mddn::geometry {

namespace {

constexpr double kPi = std::numbers::pi;

void check_open_domain(double lon, double lat, const char* who) {
  if (!(lon > -kPi && lon < kPi) || !(lat > -kPi / 2 && lat < kPi / 2))
    throw InputError(std::string(who) + ": coordinate outside (-pi,pi) x (-pi/2,pi/2)");
}

}  // namespace

Projection parse_projection(std::string_view name) {
  if (name == "erp") return Projection::erp;
  throw ConfigError("unsupported projection '" + std::string(name) + "' (only erp)");
}

PlaneCoord erp_project(SphericalCoord p) {
  check_open_domain(p.theta, p.phi, "erp_project");
  return {p.theta, p.phi};
}

SphericalCoord erp_unproject(PlaneCoord q) {
  check_open_domain(q.x, q.y, "erp_unproject");
  return {q.x, q.y};
}

double jacobian_stretch(double phi, double jac_abs) {
  if (!(jac_abs > 0.0)) throw InputError("jacobian_stretch: |J| must be positive");
  if (!(phi > -kPi / 2 && phi < kPi / 2))
    throw InputError("jacobian_stretch: latitude outside (-pi/2, pi/2)");
  return std::cos(phi) / jac_abs;
}

double row_weight(std::size_t global_row, std::size_t full_height) {
  const double h = static_cast<double>(global_row);
  const double H = static_cast<double>(full_height);
  return std::cos((h + 0.5 - H / 2.0) * kPi / H);
}

DistortionMap::DistortionMap(std::size_t height, std::size_t width, std::size_t row_offset,
                             std::size_t full_height)
    : height_(height), width_(width), row_offset_(row_offset), full_height_(full_height) {
  if (height == 0 || width == 0) throw InputError("distortion_map: empty map");
  if (height > full_height || row_offset > full_height - height)
    throw InputError("distortion_map: rows [" + std::to_string(row_offset) + ", " +
                     std::to_string(row_offset + height) + ") exceed full height " +
                     std::to_string(full_height));
  rows_.resize(height);
  for (std::size_t h = 0; h < height; ++h) rows_[h] = row_weight(row_offset + h, full_height);
}

DistortionMap distortion_map(std::size_t height, std::size_t width, std::size_t row_offset,
                             std::size_t full_height) {
  return DistortionMap(height, width, row_offset, full_height);
}

}  // namespace mddn::geometry
