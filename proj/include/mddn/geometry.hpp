#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace mddn::geometry {

// Point on the unit sphere. theta is longitude in (-pi, pi), phi latitude in (-pi/2, pi/2).
struct SphericalCoord {
  double theta = 0.0;
  double phi = 0.0;
};

// Point on the projection plane. Under ERP both axes are in radians.
struct PlaneCoord {
  double x = 0.0;
  double y = 0.0;
};

enum class Projection { erp };

// Only "erp" is supported; anything else is a ConfigError.
Projection parse_projection(std::string_view name);

PlaneCoord erp_project(SphericalCoord p);
SphericalCoord erp_unproject(PlaneCoord q);

// Spherical-to-planar area ratio cos(phi) / |J|. Under ERP |J| = 1.
double jacobian_stretch(double phi, double jac_abs);

// Per-row latitude weights of an ERP image, possibly a horizontal band of it.
// Row h of the map sits at global row row_offset + h of an image with
// full_height rows; its weight is cos((h_global + 0.5 - full_height/2) * pi / full_height).
class DistortionMap {
 public:
  DistortionMap(std::size_t height, std::size_t width, std::size_t row_offset,
                std::size_t full_height);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t row_offset() const noexcept { return row_offset_; }
  std::size_t full_height() const noexcept { return full_height_; }

  double row(std::size_t h) const { return rows_.at(h); }
  double at(std::size_t h, std::size_t /*w*/) const { return rows_.at(h); }
  const std::vector<double>& rows() const noexcept { return rows_; }

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t row_offset_;
  std::size_t full_height_;
  std::vector<double> rows_;
};

DistortionMap distortion_map(std::size_t height, std::size_t width, std::size_t row_offset,
                             std::size_t full_height);

// Weight of a single global row; the formula every map is built from.
double row_weight(std::size_t global_row, std::size_t full_height);

}  // namespace mddn::geometry
