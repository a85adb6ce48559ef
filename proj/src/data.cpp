#include "mddn/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include "mddn/parameter.hpp"

namespace mddn::data {

namespace fs = std::filesystem;

Image::Image(Tensor<float> p) : pixels(std::move(p)) {
  if (pixels.ndim() != 3 || pixels.dim(0) != 3)
    throw InputError("image: expected 3 x H x W, got " + shape_str(pixels.shape()));
  full_erp = width() == 2 * height();
}

namespace {

std::uint16_t quantize(float v, std::uint32_t maxval) {
  const double q = std::floor(std::clamp(static_cast<double>(v), 0.0, 1.0) * maxval + 0.5);
  return static_cast<std::uint16_t>(q);
}

// ---- PNG ------------------------------------------------------------------------------

struct PngFile {
  std::FILE* f = nullptr;
  ~PngFile() {
    if (f) std::fclose(f);
  }
};

void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

Image read_png(const std::string& path) {
  PngFile file{std::fopen(path.c_str(), "rb")};
  if (!file.f) throw IoError("cannot open " + path);
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn,
                                           png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  png_uint_32 W = 0, H = 0;
  int depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path + ": " + (err.empty() ? "invalid PNG" : err));
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  W = png_get_image_width(png, info);
  H = png_get_image_height(png, info);
  depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * H);
  rows.resize(H);
  for (png_uint_32 y = 0; y < H; ++y) rows[y] = buf.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> t({3, H, W});
  const double maxval = depth == 16 ? 65535.0 : 255.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = 3 * x + c;
        const unsigned v = depth == 16 ? (rows[y][2 * i] << 8) | rows[y][2 * i + 1] : rows[y][i];
        t.at(c, y, x) = static_cast<float>(v / maxval);
      }
  return Image(std::move(t));
}

void write_png(const Image& img, const std::string& path, int depth) {
  const std::size_t H = img.height(), W = img.width();
  const std::size_t bytes = depth == 16 ? 2 : 1;
  const std::uint32_t maxval = depth == 16 ? 65535 : 255;
  std::vector<unsigned char> buf(H * W * 3 * bytes);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint16_t q = quantize(img.pixels.at(c, y, x), maxval);
        unsigned char* p = &buf[((y * W + x) * 3 + c) * bytes];
        if (bytes == 2) {
          p[0] = static_cast<unsigned char>(q >> 8);
          p[1] = static_cast<unsigned char>(q & 0xff);
        } else {
          p[0] = static_cast<unsigned char>(q);
        }
      }
  PngFile file{std::fopen(path.c_str(), "wb")};
  if (!file.f) throw IoError("cannot write " + path);
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn,
                                            png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(H);
  for (std::size_t y = 0; y < H; ++y) rows[y] = buf.data() + y * W * 3 * bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path + ": " + err);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), depth,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---- PPM ------------------------------------------------------------------------------

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t += c;
        break;
      }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) t += c;
    return t;
  };
  if (token() != "P6") throw IoError(path + ": not a binary PPM");
  std::size_t W = 0, H = 0, maxval = 0;
  try {
    W = std::stoul(token());
    H = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PPM header");
  }
  if (W == 0 || H == 0 || maxval == 0 || maxval > 65535)
    throw IoError(path + ": malformed PPM header");
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(W * H * 3 * bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size())
    throw IoError(path + ": truncated PPM data");
  Tensor<float> t({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = ((y * W + x) * 3 + c) * bytes;
        const unsigned v = bytes == 2 ? (buf[i] << 8) | buf[i + 1] : buf[i];
        t.at(c, y, x) = static_cast<float>(static_cast<double>(v) / maxval);
      }
  return Image(std::move(t));
}

void write_ppm(const Image& img, const std::string& path, int depth) {
  const std::uint32_t maxval = depth == 16 ? 65535 : 255;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P6\n" << img.width() << ' ' << img.height() << '\n' << maxval << '\n';
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint16_t q = quantize(img.pixels.at(c, y, x), maxval);
        if (depth == 16) out.put(static_cast<char>(q >> 8));
        out.put(static_cast<char>(q & 0xff));
      }
  if (!out) throw IoError("write failed: " + path);
}

std::string lower_ext(const std::string& path) {
  std::string e = fs::path(path).extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

// ---- resampling -----------------------------------------------------------------------

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

// Taps of one output sample: input indices (edge-clamped) and normalized weights.
struct Taps {
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

// out_len samples at input position (i + 0.5) * step - 0.5; the kernel is
// widened by `stretch` (>= 1 when shrinking).
std::vector<Taps> make_taps(std::size_t in_len, std::size_t out_len, double step,
                            double stretch) {
  std::vector<Taps> taps(out_len);
  const double support = 2.0 * stretch;
  for (std::size_t i = 0; i < out_len; ++i) {
    const double u = (static_cast<double>(i) + 0.5) * step - 0.5;
    const auto lo = static_cast<long>(std::floor(u - support)) + 1;
    const auto hi = static_cast<long>(std::ceil(u + support)) - 1;
    double sum = 0.0;
    for (long j = lo; j <= hi; ++j) {
      const double w = cubic((u - static_cast<double>(j)) / stretch);
      if (w == 0.0) continue;
      const long jc = std::clamp(j, 0L, static_cast<long>(in_len) - 1);
      taps[i].index.push_back(static_cast<std::size_t>(jc));
      taps[i].weight.push_back(w);
      sum += w;
    }
    for (auto& w : taps[i].weight) w /= sum;
  }
  return taps;
}

Image resample(const Image& src, std::size_t out_h, std::size_t out_w, double step,
               double stretch) {
  const std::size_t H = src.height(), W = src.width();
  const auto tx = make_taps(W, out_w, step, stretch);
  const auto ty = make_taps(H, out_h, step, stretch);
  std::vector<double> tmp(H * out_w);
  Tensor<float> out({3, out_h, out_w});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < tx[x].index.size(); ++k)
          s += tx[x].weight[k] * src.pixels.at(c, y, tx[x].index[k]);
        tmp[y * out_w + x] = s;
      }
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < ty[y].index.size(); ++k)
          s += ty[y].weight[k] * tmp[ty[y].index[k] * out_w + x];
        out.at(c, y, x) = static_cast<float>(s);
      }
  }
  return Image(std::move(out));
}

}  // namespace

Image load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  std::array<unsigned char, 8> sig{};
  probe.read(reinterpret_cast<char*>(sig.data()), sig.size());
  const auto n = static_cast<std::size_t>(probe.gcount());
  probe.close();
  if (n == 8 && png_sig_cmp(sig.data(), 0, 8) == 0) return read_png(path);
  if (n >= 2 && sig[0] == 'P' && sig[1] == '6') return read_ppm(path);
  throw IoError(path + ": unsupported image format (expected PNG or binary PPM)");
}

void save_image(const Image& img, const std::string& path, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw InputError("save_image: bit depth must be 8 or 16");
  const std::string ext = lower_ext(path);
  if (ext == ".png")
    write_png(img, path, bit_depth);
  else if (ext == ".ppm")
    write_ppm(img, path, bit_depth);
  else
    throw InputError("save_image: unsupported extension '" + ext + "'");
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.pixels.values()) v = static_cast<float>(quantize(v, 255) / 255.0);
  return out;
}

Image degrade(const Image& hr, std::size_t s) {
  if (s == 0 || hr.height() % s || hr.width() % s)
    throw InputError("degrade: " + std::to_string(hr.height()) + "x" +
                     std::to_string(hr.width()) + " is not divisible by " + std::to_string(s));
  if (s == 1) return hr;
  const double sd = static_cast<double>(s);
  Image lr = resample(hr, hr.height() / s, hr.width() / s, sd, sd);
  lr.full_erp = hr.full_erp;
  return lr;
}

Image upsample_bicubic(const Image& lr, std::size_t s) {
  if (s == 0) throw InputError("upsample_bicubic: scale must be positive");
  if (s == 1) return lr;
  Image hr = resample(lr, lr.height() * s, lr.width() * s, 1.0 / static_cast<double>(s), 1.0);
  hr.full_erp = lr.full_erp;
  return hr;
}

PatchPair sample_patch(const Image& hr, const Image& lr, std::size_t P, std::size_t s,
                       std::uint64_t seed, std::size_t full_hr_height) {
  if (s == 0 || P == 0 || P % s) throw InputError("sample_patch: patch size must be a multiple of the scale");
  if (lr.height() * s != hr.height() || lr.width() * s != hr.width())
    throw InputError("sample_patch: LR image is not aligned with the HR image");
  if (P > hr.height() || P > hr.width())
    throw InputError("sample_patch: patch " + std::to_string(P) + " exceeds image " +
                     std::to_string(hr.height()) + "x" + std::to_string(hr.width()));
  const std::size_t p = P / s;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> row(0, lr.height() - p), col(0, lr.width() - p);
  std::bernoulli_distribution flip(0.5);
  PatchPair out;
  const std::size_t r = row(rng), c = col(rng);
  out.flipped = flip(rng);
  out.hr_row_offset = r * s;
  out.hr_col_offset = c * s;
  out.full_hr_height = full_hr_height ? full_hr_height : hr.height();
  out.scale = s;
  auto crop = [&](const Tensor<float>& src, std::size_t y0, std::size_t x0, std::size_t n) {
    Tensor<float> t({3, n, n});
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          t.at(ch, y, out.flipped ? n - 1 - x : x) = src.at(ch, y0 + y, x0 + x);
    return t;
  };
  out.hr = crop(hr.pixels, r * s, c * s, P);
  out.lr = crop(lr.pixels, r, c, p);
  return out;
}

std::vector<std::string> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

std::vector<ErpPair> load_dataset(const std::string& root, const std::string& manifest,
                                  std::size_t s, bool write_cache, const Degrader& degrader) {
  std::vector<ErpPair> out;
  const fs::path cache = fs::path(root) / "cache" / ("x" + std::to_string(s));
  for (const auto& rel : read_manifest(manifest)) {
    ErpPair pair;
    pair.name = rel;
    pair.hr = load_image((fs::path(root) / rel).string());
    const fs::path cached = cache / (rel + ".png");
    if (fs::exists(cached)) {
      pair.lr = load_image(cached.string());
      if (pair.lr.height() * s != pair.hr.height() || pair.lr.width() * s != pair.hr.width())
        throw IoError(cached.string() + ": cached LR image does not match its HR image");
      pair.lr.full_erp = pair.hr.full_erp;
    } else {
      pair.lr = quantize8(degrader(pair.hr, s));
      if (write_cache) {
        fs::create_directories(cached.parent_path());
        save_image(pair.lr, cached.string(), 8);
      }
    }
    out.push_back(std::move(pair));
  }
  if (out.empty()) throw InputError("dataset manifest " + manifest + " lists no images");
  return out;
}

// ---- synthetic scenes -----------------------------------------------------------------

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 random_direction(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v{n(rng), n(rng), n(rng)};
  const double len = std::sqrt(dot(v, v));
  for (auto& c : v) c /= len;
  return v;
}

using Color = std::array<double, 3>;

struct Cap {
  Vec3 centre;
  double cos_radius;
  Color color;
  double stripe_freq;  // 0: flat fill
  Vec3 stripe_axis;
};

struct Band {
  Vec3 normal;
  double half_width;  // in sin(angle) units
  Color color;
};

}  // namespace

Image synth_erp(std::size_t height, std::uint64_t seed) {
  if (height < 2) throw InputError("synth_erp: height must be at least 2");
  const std::size_t H = height, W = 2 * height;
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto color = [&] { return Color{u01(rng), u01(rng), u01(rng)}; };
  const Color sky = color(), horizon = color(), ground = color();
  std::vector<Band> bands;
  const int n_bands = 2 + static_cast<int>(rng() % 3);
  for (int i = 0; i < n_bands; ++i)
    bands.push_back({random_direction(rng), 0.02 + 0.06 * u01(rng), color()});
  std::vector<Cap> caps;
  const int n_caps = 6 + static_cast<int>(rng() % 6);
  for (int i = 0; i < n_caps; ++i) {
    Cap c{random_direction(rng), std::cos(0.15 + 0.45 * u01(rng)), color(), 0.0, {}};
    if (u01(rng) < 0.4) {
      c.stripe_freq = 20.0 + 40.0 * u01(rng);
      c.stripe_axis = random_direction(rng);
    }
    caps.push_back(c);
  }

  auto shade = [&](const Vec3& v) {
    const double z = v[2];
    Color out;
    for (int c = 0; c < 3; ++c)
      out[c] = z > 0 ? horizon[c] + (sky[c] - horizon[c]) * z
                     : horizon[c] + (ground[c] - horizon[c]) * (-z);
    for (const auto& b : bands)
      if (std::abs(dot(v, b.normal)) < b.half_width) out = b.color;
    for (const auto& c : caps) {
      if (dot(v, c.centre) < c.cos_radius) continue;
      if (c.stripe_freq > 0.0 && std::sin(c.stripe_freq * dot(v, c.stripe_axis)) < 0.0) {
        for (int k = 0; k < 3; ++k) out[k] = 1.0 - c.color[k];
      } else {
        out = c.color;
      }
    }
    return out;
  };

  // 3 x 3 supersampling per pixel.
  constexpr int kSub = 3;
  Tensor<float> t({3, H, W});
  const double pi = std::numbers::pi;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      Color acc{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double phi = pi * (0.5 - (y + (sy + 0.5) / kSub) / H);
          const double theta = 2.0 * pi * ((x + (sx + 0.5) / kSub) / W - 0.5);
          const Vec3 v{std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta),
                       std::sin(phi)};
          const Color c = shade(v);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) t.at(k, y, x) = static_cast<float>(acc[k] / (kSub * kSub));
    }
  return Image(std::move(t));
}

void write_synthetic_dataset(const std::string& dir, std::size_t count, std::size_t height,
                             std::uint64_t seed) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "erp_%03zu.png", i);
    save_image(synth_erp(height, seed + i), (fs::path(dir) / name).string(), 8);
    manifest << name << '\n';
  }
}

}  // namespace mddn::data
