#include "mddn/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace mddn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t C = cfg_.channels;
  head_ = layers::Conv2d<T>("shallow", 3, C, 3, rng);
  blocks_.reserve(cfg_.n_blocks);
  for (std::size_t b = 0; b < cfg_.n_blocks; ++b)
    blocks_.emplace_back("body.blocks." + std::to_string(b), cfg_, rng);
  if (cfg_.n_blocks > 0) {
    body_conv_ = layers::Conv2d<T>("body.conv", C, C, 3, rng);
    body_d3c_ = layers::DeformConv<T>("body.d3c", C, 1, cfg_.rank, cfg_.offset_width, rng,
                                      cfg_.zero_init);
  }
  for (std::size_t i = 0; i < cfg_.upsample_stages(); ++i)
    up_.emplace_back("recon.up." + std::to_string(i), C, 4 * C, 3, rng);
  tail_ = layers::Conv2d<T>("recon.out", C, 3, 3, rng);
}

template <typename T>
Tensor<T> Model<T>::shallow(const Tensor<T>& x) {
  if (x.ndim() != 4 || x.dim(1) != 3)
    throw InputError("model: expected N x 3 x H x W input, got " + shape_str(x.shape()));
  return head_.forward(x);
}

template <typename T>
Tensor<T> Model<T>::body(const Tensor<T>& f0, const Tensor<T>& dmap) {
  if (blocks_.empty()) return f0;
  Tensor<T> x = f0;
  for (auto& b : blocks_) x = b.forward(x, dmap);
  x = body_d3c_.forward(body_conv_.forward(x), dmap);
  x += f0;
  return x;
}

template <typename T>
Tensor<T> Model<T>::reconstruct(const Tensor<T>& f) {
  Tensor<T> x = f;
  for (auto& c : up_) x = ops::pixel_shuffle(c.forward(x), 2);
  return tail_.forward(x);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, const std::vector<PatchGeometry>& geometry) {
  const Tensor<T> f0 = shallow(x);
  const Tensor<T> dmap = layers::distortion_tensor<T>(geometry, x.dim(0), x.dim(2), x.dim(3));
  return reconstruct(body(f0, dmap));
}

template <typename T>
Tensor<T> Model<T>::backward(const Tensor<T>& dy) {
  Tensor<T> d = tail_.backward(dy);
  for (auto it = up_.rbegin(); it != up_.rend(); ++it)
    d = it->backward(ops::pixel_shuffle_backward(d, 2));
  if (!blocks_.empty()) {
    Tensor<T> db = body_conv_.backward(body_d3c_.backward(d));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) db = it->backward(db);
    d += db;
  }
  return head_.backward(d);
}

namespace {

std::vector<std::size_t> tile_starts(std::size_t len, std::size_t tile, std::size_t overlap) {
  if (len <= tile) return {0};
  std::vector<std::size_t> s;
  const std::size_t step = tile - overlap;
  for (std::size_t p = 0;; p += step) {
    if (p + tile >= len) {
      s.push_back(len - tile);
      break;
    }
    s.push_back(p);
  }
  return s;
}

// Linear ramp over `ramp` pixels on the sides shared with a neighbouring tile.
double feather(std::size_t i, std::size_t n, bool low, bool high, double ramp) {
  double w = 1.0;
  if (low) w = std::min(w, (static_cast<double>(i) + 0.5) / ramp);
  if (high) w = std::min(w, (static_cast<double>(n - i) - 0.5) / ramp);
  return w;
}

}  // namespace

template <typename T>
Tensor<T> Model<T>::infer(const Tensor<T>& x, PatchGeometry geometry, TileOptions tiles) {
  if (x.ndim() != 4 || x.dim(1) != 3)
    throw InputError("infer: expected N x 3 x H x W input, got " + shape_str(x.shape()));
  if (tiles.tile == 0 || tiles.overlap >= tiles.tile)
    throw ConfigError("infer: overlap must be smaller than the tile size");
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3), s = cfg_.scale;
  const std::size_t full = geometry.full_height ? geometry.full_height : H;
  Tensor<T> out;
  if (H <= tiles.tile && W <= tiles.tile) {
    out = forward(x, {PatchGeometry{geometry.row_offset, full}});
  } else {
    out = Tensor<T>({N, 3, s * H, s * W});
    std::vector<double> wsum(s * H * s * W, 0.0);
    const auto ys = tile_starts(H, tiles.tile, tiles.overlap);
    const auto xs = tile_starts(W, tiles.tile, tiles.overlap);
    const std::size_t th = std::min(tiles.tile, H), tw = std::min(tiles.tile, W);
    const double ramp = static_cast<double>(s * tiles.overlap);
    for (std::size_t ty : ys)
      for (std::size_t tx : xs) {
        Tensor<T> patch({N, 3, th, tw});
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t h = 0; h < th; ++h)
              std::copy_n(&x.at(n, c, ty + h, tx), tw, &patch.at(n, c, h, 0));
        const Tensor<T> y = forward(patch, {PatchGeometry{geometry.row_offset + ty, full}});
        const bool top = ty > 0, bottom = ty + th < H, left = tx > 0, right = tx + tw < W;
        for (std::size_t h = 0; h < s * th; ++h) {
          const double wy = feather(h, s * th, top, bottom, ramp);
          for (std::size_t w = 0; w < s * tw; ++w) {
            const double wgt = wy * feather(w, s * tw, left, right, ramp);
            wsum[(s * ty + h) * s * W + s * tx + w] += wgt;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t c = 0; c < 3; ++c)
                out.at(n, c, s * ty + h, s * tx + w) += static_cast<T>(wgt) * y.at(n, c, h, w);
          }
        }
      }
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < wsum.size(); ++p)
          out[(n * 3 + c) * wsum.size() + p] /= static_cast<T>(wsum[p]);
  }
  for (auto& v : out.values()) v = std::clamp(v, T(0), T(1));
  return out;
}

template <typename T>
ParamList<T> Model<T>::params() {
  ParamList<T> out;
  head_.collect(out);
  for (auto& b : blocks_) b.collect(out);
  if (!blocks_.empty()) {
    body_conv_.collect(out);
    body_d3c_.collect(out);
  }
  for (auto& c : up_) c.collect(out);
  tail_.collect(out);
  return out;
}

template <typename T>
std::uint64_t Model<T>::param_count() {
  std::uint64_t n = 0;
  for (const auto* p : params()) n += p->numel();
  return n;
}

template <typename T>
std::uint64_t Model<T>::macs(std::size_t H, std::size_t W) const {
  std::uint64_t m = head_.macs(H, W);
  for (const auto& b : blocks_) m += b.macs(H, W);
  if (!blocks_.empty()) m += body_conv_.macs(H, W) + body_d3c_.macs(H, W);
  std::size_t h = H, w = W;
  for (const auto& c : up_) {
    m += c.macs(h, w);
    h *= 2;
    w *= 2;
  }
  return m + tail_.macs(h, w);
}

std::uint64_t count_params(const ModelConfig& cfg) { return Model<float>(cfg, 0).param_count(); }

std::uint64_t multiply_adds(const ModelConfig& cfg, std::size_t input_h, std::size_t input_w) {
  return Model<float>(cfg, 0).macs(input_h, input_w);
}

// ---- checkpoint encoding ------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'M', 'D', 'D', 'N', '1'};
constexpr char kTrainTag[5] = {'T', 'R', 'A', 'I', 'N'};
constexpr std::uint32_t kMaxDims = 8;

class Writer {
 public:
  template <typename V>
  void pod(V v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(V));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void table(const std::vector<NamedTensor>& ts) {
    pod(static_cast<std::uint64_t>(ts.size()));
    for (const auto& t : ts) {
      if (shape_numel(t.shape) != t.values.size())
        throw InputError("checkpoint: tensor '" + t.name + "' value count does not match shape");
      str(t.name);
      pod(static_cast<std::uint8_t>(t.dtype));
      pod(static_cast<std::uint32_t>(t.shape.size()));
      for (std::size_t d : t.shape) pod(static_cast<std::uint64_t>(d));
      if (t.dtype == DType::f32)
        for (double v : t.values) pod(static_cast<float>(v));
      else
        for (double v : t.values) pod(v);
    }
  }
  std::vector<unsigned char> buf;
};

class Reader {
 public:
  explicit Reader(std::vector<unsigned char> b) : buf_(std::move(b)) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated ") + what, pos_);
  }
  template <typename V>
  V pod(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool tag(const char (&t)[5]) const {
    return remaining() >= 5 && std::memcmp(buf_.data() + pos_, t, 5) == 0;
  }
  void skip(std::size_t n) { pos_ += n; }

  std::vector<NamedTensor> table() {
    const auto count = pod<std::uint64_t>("tensor count");
    std::vector<NamedTensor> out;
    for (std::uint64_t i = 0; i < count; ++i) {
      NamedTensor t;
      t.name = str("tensor name");
      const std::size_t at = pos_;
      const auto code = pod<std::uint8_t>("dtype");
      if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code), at);
      t.dtype = static_cast<DType>(code);
      const std::size_t ndim_at = pos_;
      const auto ndim = pod<std::uint32_t>("ndim");
      if (ndim > kMaxDims) throw FormatError("implausible tensor rank", ndim_at);
      std::uint64_t numel = 1;
      for (std::uint32_t d = 0; d < ndim; ++d) {
        const auto dim = pod<std::uint64_t>("dims");
        t.shape.push_back(static_cast<std::size_t>(dim));
        numel *= dim;
      }
      const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
      if (numel > remaining() / width)
        throw FormatError("truncated values of tensor '" + t.name + "'", pos_);
      t.values.resize(numel);
      for (auto& v : t.values)
        v = t.dtype == DType::f32 ? static_cast<double>(pod<float>("values")) : pod<double>("values");
      out.push_back(std::move(t));
    }
    return out;
  }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  Writer w;
  w.bytes(kMagic, 5);
  w.pod(kCheckpointVersion);
  w.str(data.config_text);
  w.table(data.tensors);
  if (data.train) {
    w.bytes(kTrainTag, 5);
    w.pod(static_cast<std::uint64_t>(data.train->step));
    w.pod(data.train->best_ws_psnr);
    w.pod(static_cast<std::uint64_t>(data.train->seed));
    w.str(data.train->meta);
    w.table(data.train->moments);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint '" + path + "'");
    os.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!os) throw IoError("short write to '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot move checkpoint into place at '" + path + "'");
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  Reader r(std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {}));
  if (!r.tag(kMagic)) throw FormatError("bad magic, not a checkpoint", 0);
  r.skip(5);
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 5);
  CheckpointData data;
  data.config_text = r.str("config record");
  data.tensors = r.table();
  if (r.remaining() > 0) {
    if (!r.tag(kTrainTag)) throw FormatError("unexpected trailing bytes", r.pos());
    r.skip(5);
    TrainRecord t;
    t.step = r.pod<std::uint64_t>("train step");
    t.best_ws_psnr = r.pod<double>("best ws-psnr");
    t.seed = r.pod<std::uint64_t>("seed");
    t.meta = r.str("train options");
    t.moments = r.table();
    if (r.remaining() > 0) throw FormatError("unexpected trailing bytes", r.pos());
    data.train = std::move(t);
  }
  return data;
}

template <typename T>
NamedTensor to_named(const std::string& name, const Tensor<T>& t) {
  NamedTensor nt;
  nt.name = name;
  nt.dtype = std::is_same_v<T, float> ? DType::f32 : DType::f64;
  nt.shape = t.shape();
  nt.values.assign(t.values().begin(), t.values().end());
  return nt;
}

template <typename T>
Tensor<T> from_named(const NamedTensor& nt) {
  Tensor<T> t(nt.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(nt.values[i]);
  return t;
}

template <typename T>
void assign_parameters(Model<T>& model, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (Parameter<T>* p : model.params()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end())
      throw ConfigError("checkpoint: missing tensor '" + p->name + "'");
    if (it->second->shape != p->value.shape())
      throw ConfigError("checkpoint: tensor '" + p->name + "' has shape " +
                        shape_str(it->second->shape) + ", model expects " +
                        shape_str(p->value.shape()));
    p->value = from_named<T>(*it->second);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw ConfigError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path, const TrainRecord* train) {
  CheckpointData data;
  data.config_text = model.config().serialize();
  for (const Parameter<T>* p : model.params()) data.tensors.push_back(to_named(p->name, p->value));
  if (train) data.train = *train;
  write_checkpoint(path, data);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path, TrainRecord* train, const ModelConfig* expected) {
  CheckpointData data = read_checkpoint(path);
  const ModelConfig stored = parse_model_config(data.config_text);
  Model<T> model(expected ? *expected : stored, 0);
  assign_parameters(model, data.tensors);
  if (expected) {
    ModelConfig a = stored, b = *expected;
    a.zero_init = b.zero_init;  // affects initialisation only
    if (!(a == b))
      throw ConfigError("checkpoint: stored config differs from the requested one:\n" +
                        stored.serialize());
  }
  if (train) {
    if (!data.train) throw ConfigError("checkpoint '" + path + "' has no training state");
    *train = std::move(*data.train);
  }
  return model;
}

#define MDDN_INSTANTIATE(T)                                                                   \
  template class Model<T>;                                                                    \
  template NamedTensor to_named<T>(const std::string&, const Tensor<T>&);                     \
  template Tensor<T> from_named<T>(const NamedTensor&);                                       \
  template void assign_parameters<T>(Model<T>&, const std::vector<NamedTensor>&);             \
  template void save_checkpoint<T>(Model<T>&, const std::string&, const TrainRecord*);        \
  template Model<T> load_checkpoint<T>(const std::string&, TrainRecord*, const ModelConfig*);

MDDN_INSTANTIATE(float)
MDDN_INSTANTIATE(double)
MDDN_INSTANTIATE(long double)

}  // namespace mddn
