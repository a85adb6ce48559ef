#pragma once

#include <cstddef>

#include "mddn/tensor.hpp"

namespace mddn::metrics {

inline constexpr double kMaxDb = 99.0;

// Images are C x H x W (any C), compared jointly over channels.

double psnr(const Tensor<float>& a, const Tensor<float>& b, double max_val = 1.0);

// Rows of the images sit at global rows row_offset.. of an ERP image with
// full_height rows. uniform replaces the latitude weights by ones.
struct Weighting {
  std::size_t full_height = 0;  // 0: the image height
  std::size_t row_offset = 0;
  bool uniform = false;
};

double ws_psnr(const Tensor<float>& a, const Tensor<float>& b, Weighting w = {},
               double max_val = 1.0);

// 11 x 11 Gaussian window (sigma 1.5) over the valid region, averaged over channels.
double ssim(const Tensor<float>& a, const Tensor<float>& b, double max_val = 1.0);
// The SSIM map weighted by the latitude weight of each window's centre row.
double ws_ssim(const Tensor<float>& a, const Tensor<float>& b, Weighting w = {},
               double max_val = 1.0);

struct Report {
  double psnr = 0.0, ssim = 0.0, ws_psnr = 0.0, ws_ssim = 0.0;
};

struct EvalOptions {
  bool y_channel = false;    // BT.601 luma instead of RGB
  std::size_t crop_border = 0;
};

Report evaluate(const Tensor<float>& sr, const Tensor<float>& gt, Weighting w = {},
                EvalOptions opt = {});

// 3 x H x W RGB in [0, 1] -> 1 x H x W luma (16..235 range scaled to [0, 1] units).
Tensor<float> y_channel(const Tensor<float>& rgb);
Tensor<float> crop_border(const Tensor<float>& img, std::size_t border);

}  // namespace mddn::metrics
