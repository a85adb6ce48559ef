#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mddn/tensor.hpp"

namespace mddn::data {

// 3 x H x W, values in [0, 1].
struct Image {
  Tensor<float> pixels;
  bool full_erp = false;  // width == 2 * height

  Image() = default;
  explicit Image(Tensor<float> p);

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

// PNG (8/16-bit, gray or RGB, alpha dropped) or binary PPM (P6), chosen by content.
Image load_image(const std::string& path);
// Extension picks the format: .png or .ppm. bit_depth 8 or 16.
void save_image(const Image& img, const std::string& path, int bit_depth = 8);

// Round-half-up to 8 bits and back.
Image quantize8(const Image& img);

// Separable Catmull-Rom (a = -0.5) downsampling with the kernel stretched by s.
Image degrade(const Image& hr, std::size_t s);
// Plain Catmull-Rom upsampling (the bicubic baseline).
Image upsample_bicubic(const Image& lr, std::size_t s);

// Degradation hook: (hr, s) -> lr.
using Degrader = std::function<Image(const Image&, std::size_t)>;

struct PatchPair {
  Tensor<float> hr;  // 3 x P x P
  Tensor<float> lr;  // 3 x P/s x P/s
  std::size_t hr_row_offset = 0;
  std::size_t hr_col_offset = 0;
  std::size_t full_hr_height = 0;
  std::size_t scale = 1;
  bool flipped = false;
};

// Aligned random crop with an optional horizontal flip. full_hr_height 0
// takes the image height.
PatchPair sample_patch(const Image& hr, const Image& lr, std::size_t P, std::size_t s,
                       std::uint64_t seed, std::size_t full_hr_height = 0);

// Relative paths, one per line; blank lines and '#' comments are skipped.
std::vector<std::string> read_manifest(const std::string& path);

struct ErpPair {
  std::string name;
  Image hr;
  Image lr;
};

// Loads every manifest entry below root. LR images come from
// root/cache/x{s}/<entry>.png when present, otherwise they are degraded,
// quantized to 8 bits and (if write_cache) stored there.
std::vector<ErpPair> load_dataset(const std::string& root, const std::string& manifest,
                                  std::size_t s, bool write_cache = true,
                                  const Degrader& degrader = degrade);

// Procedural ERP scene: sky/ground gradient, great-circle bands, spherical
// caps and fine stripes, all defined on the sphere.
Image synth_erp(std::size_t height, std::uint64_t seed);

// Writes count synthetic images plus manifest.txt into dir.
void write_synthetic_dataset(const std::string& dir, std::size_t count, std::size_t height,
                             std::uint64_t seed);

}  // namespace mddn::data
