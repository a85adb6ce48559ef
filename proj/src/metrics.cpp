#include "mddn/metrics.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "mddn/geometry.hpp"

namespace mddn::metrics {

namespace {

constexpr std::size_t kWin = 11;
constexpr double kSigma = 1.5;

void require_same(const Tensor<float>& a, const Tensor<float>& b, const char* op) {
  if (a.shape() != b.shape())
    throw InputError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  if (a.ndim() != 3 || a.numel() == 0)
    throw InputError(std::string(op) + ": expected a non-empty C x H x W image");
}

std::vector<double> row_weights(std::size_t H, std::size_t first_row, Weighting w) {
  const std::size_t full = w.full_height ? w.full_height : H;
  if (w.row_offset + H > full && !w.uniform)
    throw InputError("metrics: rows " + std::to_string(w.row_offset) + "+" + std::to_string(H) +
                     " exceed full height " + std::to_string(full));
  std::vector<double> out(H, 1.0);
  if (w.uniform) return out;
  for (std::size_t h = 0; h < H; ++h)
    out[h] = geometry::row_weight(w.row_offset + first_row + h, full);
  return out;
}

double to_db(double mse, double max_val) {
  if (mse <= 0.0) return kMaxDb;
  return std::min(kMaxDb, 10.0 * std::log10(max_val * max_val / mse));
}

std::vector<double> gaussian_window() {
  std::vector<double> g(kWin);
  double s = 0.0;
  for (std::size_t i = 0; i < kWin; ++i) {
    const double d = static_cast<double>(i) - (kWin - 1) / 2.0;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Separable valid-region filtering of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& x, std::size_t H, std::size_t W,
                                 const std::vector<double>& g) {
  const std::size_t oh = H - kWin + 1, ow = W - kWin + 1;
  std::vector<double> tmp(H * ow), out(oh * ow);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x0 = 0; x0 < ow; ++x0) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWin; ++k) s += g[k] * x[y * W + x0 + k];
      tmp[y * ow + x0] = s;
    }
  for (std::size_t y0 = 0; y0 < oh; ++y0)
    for (std::size_t x0 = 0; x0 < ow; ++x0) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWin; ++k) s += g[k] * tmp[(y0 + k) * ow + x0];
      out[y0 * ow + x0] = s;
    }
  return out;
}

// Mean of the SSIM map, each map row weighted by weights[row].
double ssim_weighted(const Tensor<float>& a, const Tensor<float>& b,
                     const std::vector<double>& weights, double max_val) {
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const std::size_t oh = H - kWin + 1, ow = W - kWin + 1;
  const double c1 = (0.01 * max_val) * (0.01 * max_val);
  const double c2 = (0.03 * max_val) * (0.03 * max_val);
  const auto g = gaussian_window();
  double num = 0.0, den = 0.0;
  std::vector<double> x(H * W), y(H * W), xx(H * W), yy(H * W), xy(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) {
      x[i] = a[c * H * W + i];
      y[i] = b[c * H * W + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, H, W, g), my = filter_valid(y, H, W, g);
    const auto sxx = filter_valid(xx, H, W, g), syy = filter_valid(yy, H, W, g);
    const auto sxy = filter_valid(xy, H, W, g);
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t q = 0; q < ow; ++q) {
        const std::size_t i = r * ow + q;
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i];
        const double cxy = sxy[i] - mx[i] * my[i];
        const double s = ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
                         ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        num += weights[r] * s;
        den += weights[r];
      }
  }
  return num / den;
}

void require_ssim_size(const Tensor<float>& a, const char* op) {
  if (a.dim(1) < kWin || a.dim(2) < kWin)
    throw InputError(std::string(op) + ": images must be at least 11x11, got " +
                     shape_str(a.shape()));
}

}  // namespace

double psnr(const Tensor<float>& a, const Tensor<float>& b, double max_val) {
  require_same(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  return to_db(se / static_cast<double>(a.numel()), max_val);
}

double ws_psnr(const Tensor<float>& a, const Tensor<float>& b, Weighting w, double max_val) {
  require_same(a, b, "ws_psnr");
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const auto rw = row_weights(H, 0, w);
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = (c * H + h) * W + x;
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        num += rw[h] * d * d;
        den += rw[h];
      }
  return to_db(num / den, max_val);
}

double ssim(const Tensor<float>& a, const Tensor<float>& b, double max_val) {
  require_same(a, b, "ssim");
  require_ssim_size(a, "ssim");
  return ssim_weighted(a, b, std::vector<double>(a.dim(1) - kWin + 1, 1.0), max_val);
}

double ws_ssim(const Tensor<float>& a, const Tensor<float>& b, Weighting w, double max_val) {
  require_same(a, b, "ws_ssim");
  require_ssim_size(a, "ws_ssim");
  auto rw = row_weights(a.dim(1), 0, w);
  // Map row r is centred on image row r + 5.
  std::vector<double> centre(a.dim(1) - kWin + 1);
  for (std::size_t r = 0; r < centre.size(); ++r) centre[r] = rw[r + kWin / 2];
  return ssim_weighted(a, b, centre, max_val);
}

Tensor<float> y_channel(const Tensor<float>& rgb) {
  if (rgb.ndim() != 3 || rgb.dim(0) != 3)
    throw InputError("y_channel: expected 3 x H x W, got " + shape_str(rgb.shape()));
  const std::size_t n = rgb.dim(1) * rgb.dim(2);
  Tensor<float> y({1, rgb.dim(1), rgb.dim(2)});
  for (std::size_t i = 0; i < n; ++i)
    y[i] = static_cast<float>(
        (16.0 + 65.481 * rgb[i] + 128.553 * rgb[n + i] + 24.966 * rgb[2 * n + i]) / 255.0);
  return y;
}

Tensor<float> crop_border(const Tensor<float>& img, std::size_t border) {
  if (border == 0) return img;
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (2 * border >= H || 2 * border >= W)
    throw InputError("crop_border: border " + std::to_string(border) + " too large for " +
                     shape_str(img.shape()));
  Tensor<float> out({C, H - 2 * border, W - 2 * border});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H - 2 * border; ++h)
      for (std::size_t x = 0; x < W - 2 * border; ++x)
        out.at(c, h, x) = img.at(c, h + border, x + border);
  return out;
}

Report evaluate(const Tensor<float>& sr, const Tensor<float>& gt, Weighting w, EvalOptions opt) {
  require_same(sr, gt, "evaluate");
  if (!w.full_height) w.full_height = sr.dim(1) + w.row_offset;
  Tensor<float> a = opt.y_channel ? y_channel(sr) : sr;
  Tensor<float> b = opt.y_channel ? y_channel(gt) : gt;
  a = crop_border(a, opt.crop_border);
  b = crop_border(b, opt.crop_border);
  w.row_offset += opt.crop_border;
  Report r;
  r.psnr = psnr(a, b);
  r.ws_psnr = ws_psnr(a, b, w);
  r.ssim = ssim(a, b);
  r.ws_ssim = ws_ssim(a, b, w);
  return r;
}

}  // namespace mddn::metrics
