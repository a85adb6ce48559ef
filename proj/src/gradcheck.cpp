#include "mddn/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "mddn/branch_trace.hpp"
#include "mddn/layers.hpp"
#include "mddn/model.hpp"
#include "mddn/ops.hpp"
#include "mddn/sampling.hpp"

namespace mddn::gradcheck {

namespace {

constexpr double kMinStep = 1e-10;

// Extended-precision accumulation keeps the loss difference of nearby
// evaluations free of summation noise.
template <typename V>
long double weighted_sum(const Tensor<V>& y, const Tensor<double>& cot) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < y.numel(); ++i)
    s += static_cast<long double>(y[i]) * static_cast<long double>(cot[i]);
  return s;
}

}  // namespace

namespace {

// Turns branch tracing on for the lifetime of the guard.
class TraceGuard {
 public:
  TraceGuard() : prev_(trace::enabled) { trace::enabled = true; }
  ~TraceGuard() { trace::enabled = prev_; }
  TraceGuard(const TraceGuard&) = delete;
  TraceGuard& operator=(const TraceGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace

FdResult finite_diff_check(const ForwardFn& forward, const BackwardFn& backward,
                           const std::vector<Input>& inputs, const FdOptions& opt,
                           const ReferenceFn& reference) {
  std::vector<Tensor<double>> snapshot;
  for (const auto& in : inputs) snapshot.push_back(*in.value);
  auto require_unchanged = [&](const char* stage) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (!(*inputs[i].value == snapshot[i]))
        throw ContractError(std::string("finite_diff_check: ") + stage + " modified input '" +
                            inputs[i].name + "'");
  };

  TraceGuard guard;
  trace::fingerprint = 0;
  const Tensor<double> y0 = forward();
  std::uint64_t base_print = trace::fingerprint;
  require_unchanged("forward");
  if (reference) {
    trace::fingerprint = 0;
    const Tensor<long double> r0 = reference();
    base_print = trace::fingerprint;
    require_unchanged("reference");
    if (r0.shape() != y0.shape())
      throw ContractError("finite_diff_check: reference output has shape " +
                          shape_str(r0.shape()));
  }

  if (!all_finite(y0)) throw InputError("finite_diff_check: non-finite forward output");
  Rng rng(opt.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Tensor<double> cot(y0.shape());
  for (auto& v : cot.values()) v = unit(rng);

  auto loss = [&] {
    return reference ? weighted_sum(reference(), cot) : weighted_sum(forward(), cot);
  };

  std::vector<Tensor<double>> grads = backward(cot);
  require_unchanged("backward");
  if (grads.size() != inputs.size())
    throw ContractError("finite_diff_check: backward returned " + std::to_string(grads.size()) +
                        " gradients for " + std::to_string(inputs.size()) + " inputs");
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (grads[i].shape() != inputs[i].value->shape())
      throw ContractError("finite_diff_check: gradient of '" + inputs[i].name + "' has shape " +
                          shape_str(grads[i].shape()));
  if (opt.corrupt && !grads.empty())
    for (auto& g : grads[0].values()) g *= 1.001;

  // Central difference; smooth is false when either end of the probe took a
  // different branch than the unperturbed point.
  auto central = [&](Tensor<double>& x, std::size_t i, double h, bool& smooth) {
    const double orig = x[i];
    x[i] = orig + h;
    trace::fingerprint = 0;
    const long double lp = loss();
    const std::uint64_t pp = trace::fingerprint;
    x[i] = orig - h;
    trace::fingerprint = 0;
    const long double lm = loss();
    smooth = pp == base_print && trace::fingerprint == base_print;
    x[i] = orig;
    return static_cast<double>((lp - lm) / (2.0L * h));
  };

  FdResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double>& x = *inputs[k].value;
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.coords_per_input && opt.coords_per_input < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.coords_per_input);
    }
    for (std::size_t i : coords) {
      bool smooth = true;
      double numeric = 0.0;
      if (opt.method == FdMethod::central) {
        numeric = central(x, i, opt.eps, smooth);
      } else {
        // Shrink the first step until the probe stays on one smooth piece.
        double h = opt.eps;
        double d0 = central(x, i, h, smooth);
        while (!smooth && h > kMinStep) {
          h /= 4.0;
          d0 = central(x, i, h, smooth);
        }
        if (!smooth) {
          ++res.skipped;
          continue;
        }
        // Polynomial extrapolation of central differences to h -> 0 over a
        // geometric sequence of steps, keeping the most self-consistent estimate.
        constexpr int kTab = 8;
        constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
        double a[kTab][kTab];
        double best_err = std::numeric_limits<double>::max();
        a[0][0] = numeric = d0;
        for (int col = 1; col < kTab; ++col) {
          h /= kShrink;
          bool ok = true;
          a[0][col] = central(x, i, h, ok);
          if (!ok) break;
          double fac = kShrink2;
          for (int row = 1; row <= col; ++row) {
            a[row][col] = (a[row - 1][col] * fac - a[row - 1][col - 1]) / (fac - 1.0);
            fac *= kShrink2;
            const double e = std::max(std::abs(a[row][col] - a[row - 1][col]),
                                      std::abs(a[row][col] - a[row - 1][col - 1]));
            if (e <= best_err) {
              best_err = e;
              numeric = a[row][col];
            }
          }
          if (std::abs(a[col][col] - a[col - 1][col - 1]) >= kSafe * best_err) break;
        }
      }
      const double analytic = grads[k][i];
      const double err =
          std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++res.checked;
      if (err >= res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_input = inputs[k].name;
        res.worst_index = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// ---- suites ---------------------------------------------------------------------------

namespace {

using T = double;
using Tn = Tensor<double>;
constexpr double kTol = 1e-6;

Tn uniform(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tn t(s);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Values bounded away from zero (keeps activations off their kink).
Tn away_from_zero(const Shape& s, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tn t(s);
  for (auto& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// Integer part uniform in [lo, hi], fractional part in [0.2, 0.8]: never on a
// grid line, never on the clamp boundary.
double off_grid(Rng& rng, int lo, int hi) {
  std::uniform_int_distribution<int> whole(lo, hi);
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  return whole(rng) + frac(rng);
}

FdOptions opts(bool corrupt, std::size_t coords = 0, double eps = 1e-2, std::uint64_t seed = 7) {
  FdOptions o;
  o.method = FdMethod::ridders;
  o.eps = eps;
  o.corrupt = corrupt;
  o.coords_per_input = coords;
  o.seed = seed;
  return o;
}

// Gradient check of a layer over its input(s) and every parameter.
template <typename Fwd, typename Bwd>
FdResult check_params(ParamList<T> params, std::vector<Input> inputs, Fwd fwd, Bwd bwd,
                      const FdOptions& o, const ReferenceFn& reference = {}) {
  for (auto* p : params) inputs.push_back({p->name, &p->value});
  const std::size_t n_direct = inputs.size() - params.size();
  return finite_diff_check(
      fwd,
      [&, params, n_direct](const Tn& dy) {
        for (auto* p : params) p->zero_grad();
        std::vector<Tn> g = bwd(dy);
        if (g.size() != n_direct) throw ContractError("layer check: input gradient count");
        for (auto* p : params) g.push_back(p->grad);
        return g;
      },
      inputs, o, reference);
}

std::vector<layers::PatchGeometry> toy_geometry() { return {{3, 20}, {9, 20}}; }

ModelConfig toy_config() {
  ModelConfig c;
  c.channels = 8;
  c.n_blocks = 1;
  c.n_layers = 1;
  c.rank = 2;
  c.window = 4;
  c.heads = 2;
  c.scale = 2;
  c.offset_width = 6;
  c.zero_init = false;
  return c;
}

void add_numerics(std::vector<Case>& cs) {
  auto conv_case = [](std::string name, ops::ConvSpec spec, std::size_t k) {
    return Case{"numerics", std::move(name), kTol, [spec, k](bool corrupt) {
                  Rng rng(11);
                  Tn x = uniform({2, 3, 7, 6}, rng), w = uniform({4, 3, k, k}, rng),
                     b = uniform({4}, rng);
                  return finite_diff_check(
                      [&] { return ops::conv2d(x, w, b, spec); },
                      [&](const Tn& dy) {
                        auto g = ops::conv2d_backward(x, w, true, dy, spec);
                        return std::vector<Tn>{g.dx, g.dw, g.db};
                      },
                      {{"x", &x}, {"w", &w}, {"b", &b}}, opts(corrupt));
                }};
  };
  cs.push_back(conv_case("conv2d", ops::ConvSpec::same(3), 3));
  cs.push_back(conv_case("conv2d_dilated", ops::ConvSpec::same(3, 2), 3));
  cs.push_back(conv_case("conv2d_replicate", ops::ConvSpec::same(3, 1, ops::Padding::replicate), 3));
  cs.push_back(conv_case("conv2d_strided", ops::ConvSpec{2, 1, 1, ops::Padding::zeros}, 3));
  cs.push_back(conv_case("conv2d_1x1", ops::ConvSpec::same(1), 1));

  cs.push_back({"numerics", "matmul", kTol, [](bool corrupt) {
                  Rng rng(12);
                  Tn a = uniform({5, 4}, rng), b = uniform({4, 6}, rng);
                  return finite_diff_check(
                      [&] { return ops::matmul(a, b); },
                      [&](const Tn& dy) {
                        auto g = ops::matmul_backward(a, b, dy);
                        return std::vector<Tn>{g.da, g.db};
                      },
                      {{"a", &a}, {"b", &b}}, opts(corrupt));
                }});
  cs.push_back({"numerics", "softmax", kTol, [](bool corrupt) {
                  Rng rng(13);
                  Tn x = uniform({2, 5, 3, 3}, rng, -2.0, 2.0);
                  return finite_diff_check(
                      [&] { return ops::softmax(x, 1); },
                      [&](const Tn& dy) {
                        return std::vector<Tn>{ops::softmax_backward(ops::softmax(x, 1), dy, 1)};
                      },
                      {{"x", &x}}, opts(corrupt));
                }});
  auto act_case = [](std::string name, ops::Activation kind) {
    return Case{"numerics", std::move(name), kTol, [kind](bool corrupt) {
                  Rng rng(14);
                  Tn x = away_from_zero({2, 3, 4, 4}, rng);
                  return finite_diff_check(
                      [&] { return ops::activation(x, kind); },
                      [&](const Tn& dy) {
                        return std::vector<Tn>{ops::activation_backward(x, dy, kind)};
                      },
                      {{"x", &x}}, opts(corrupt));
                }};
  };
  cs.push_back(act_case("leaky_relu", ops::Activation::leaky_relu));
  cs.push_back(act_case("gelu", ops::Activation::gelu));
  cs.push_back({"numerics", "layer_norm", kTol, [](bool corrupt) {
                  Rng rng(15);
                  Tn x = uniform({2, 6, 3, 4}, rng), g = uniform({6}, rng, 0.5, 1.5),
                     b = uniform({6}, rng);
                  return finite_diff_check(
                      [&] { return ops::layer_norm(x, g, b); },
                      [&](const Tn& dy) {
                        auto gr = ops::layer_norm_backward(x, g, dy);
                        return std::vector<Tn>{gr.dx, gr.dgamma, gr.dbeta};
                      },
                      {{"x", &x}, {"gamma", &g}, {"beta", &b}}, opts(corrupt));
                }});
  cs.push_back({"numerics", "pixel_shuffle", kTol, [](bool corrupt) {
                  Rng rng(16);
                  Tn x = uniform({2, 8, 3, 2}, rng);
                  return finite_diff_check(
                      [&] { return ops::pixel_shuffle(x, 2); },
                      [&](const Tn& dy) {
                        return std::vector<Tn>{ops::pixel_shuffle_backward(dy, 2)};
                      },
                      {{"x", &x}}, opts(corrupt));
                }});
  cs.push_back({"numerics", "pixel_unshuffle", kTol, [](bool corrupt) {
                  Rng rng(17);
                  Tn x = uniform({2, 2, 4, 6}, rng);
                  return finite_diff_check(
                      [&] { return ops::pixel_unshuffle(x, 2); },
                      [&](const Tn& dy) { return std::vector<Tn>{ops::pixel_shuffle(dy, 2)}; },
                      {{"x", &x}}, opts(corrupt));
                }});
  cs.push_back({"numerics", "pad_reflect", kTol, [](bool corrupt) {
                  Rng rng(18);
                  Tn x = uniform({1, 2, 3, 5}, rng);
                  return finite_diff_check(
                      [&] { return ops::pad_reflect(x, 4, 3); },
                      [&](const Tn& dy) {
                        return std::vector<Tn>{ops::pad_reflect_backward(dy, 3, 5)};
                      },
                      {{"x", &x}}, opts(corrupt));
                }});
}

void add_sampling(std::vector<Case>& cs) {
  cs.push_back({"sampling", "bilinear_sample", kTol, [](bool corrupt) {
                  Rng rng(21);
                  const std::size_t H = 5, W = 6;
                  Tn f = uniform({2, 3, H, W}, rng);
                  Tn coords({2, 2, 4, 3});
                  for (std::size_t n = 0; n < 2; ++n)
                    for (std::size_t i = 0; i < 12; ++i) {
                      // Mostly interior, some beyond the border (clamped region).
                      coords[(n * 2 + 0) * 12 + i] = off_grid(rng, -2, int(W));
                      coords[(n * 2 + 1) * 12 + i] = off_grid(rng, -2, int(H));
                    }
                  return finite_diff_check(
                      [&] { return sampling::bilinear_sample(f, coords); },
                      [&](const Tn& dy) {
                        auto g = sampling::bilinear_sample_backward(f, coords, dy);
                        return std::vector<Tn>{g.df, g.dcoords};
                      },
                      {{"f", &f}, {"coords", &coords}}, opts(corrupt));
                }});
  cs.push_back({"sampling", "warp", kTol, [](bool corrupt) {
                  Rng rng(22);
                  Tn f = uniform({2, 3, 5, 6}, rng);
                  Tn off({2, 2, 5, 6});
                  for (auto& v : off.values()) v = off_grid(rng, -2, 1);
                  return finite_diff_check(
                      [&] {
                        return sampling::warp(f, sampling::OffsetField<T>::warp_field(off));
                      },
                      [&](const Tn& dy) {
                        auto g = sampling::warp_backward(
                            f, sampling::OffsetField<T>::warp_field(off), dy);
                        return std::vector<Tn>{g.df, g.doffsets};
                      },
                      {{"f", &f}, {"offsets", &off}}, opts(corrupt));
                }});
  for (std::size_t d : {1, 2, 3}) {
    cs.push_back({"sampling", "deform_gather_d" + std::to_string(d), kTol, [d](bool corrupt) {
                    Rng rng(23 + d);
                    Tn f = uniform({2, 2, 6, 5}, rng);
                    Tn off({2, 18, 6, 5});
                    for (auto& v : off.values()) v = off_grid(rng, -2, 1);
                    auto field = [&] { return sampling::OffsetField<T>::kernel_field(off, 3); };
                    return finite_diff_check(
                        [&] { return sampling::deform_gather(f, field(), d); },
                        [&](const Tn& dy) {
                          auto g = sampling::deform_gather_backward(f, field(), d, dy);
                          return std::vector<Tn>{g.df, g.doffsets};
                        },
                        {{"f", &f}, {"offsets", &off}}, opts(corrupt));
                  }});
  }
}

void add_layers(std::vector<Case>& cs) {
  cs.push_back({"layers", "low_rank_compose", kTol, [](bool corrupt) {
                  Rng rng(31);
                  Tn a = uniform({5, 3}, rng), b = uniform({4 * 9, 3}, rng);
                  return finite_diff_check(
                      [&] { return layers::low_rank_compose(a, b, 4, 3); },
                      [&](const Tn& dw) {
                        auto g = layers::low_rank_compose_backward(a, b, dw);
                        return std::vector<Tn>{g.da, g.db};
                      },
                      {{"a", &a}, {"b", &b}}, opts(corrupt));
                }});
  cs.push_back({"layers", "low_rank_conv", kTol, [](bool corrupt) {
                  Rng rng(32);
                  layers::LowRankConv<T> conv("lr", 4, 5, 3, 3, rng, false);
                  Tn x = uniform({2, 4, 5, 6}, rng);
                  return check_params(
                      [&] { ParamList<T> p; conv.collect(p); return p; }(), {{"x", &x}},
                      [&] { return conv.forward(x); },
                      [&](const Tn& dy) { return std::vector<Tn>{conv.backward(dy)}; },
                      opts(corrupt));
                }});
  cs.push_back({"layers", "offset_net_warp", kTol, [](bool corrupt) {
                  Rng rng(33);
                  layers::OffsetNetWarp<T> net("onet", 6, 2, rng, false);
                  Tn d = layers::distortion_tensor<T>(toy_geometry(), 2, 6, 5);
                  return check_params(
                      [&] { ParamList<T> p; net.collect(p); return p; }(), {},
                      [&] { return net.forward(d).values; },
                      [&](const Tn& dy) { net.backward(dy); return std::vector<Tn>{}; },
                      opts(corrupt));
                }});
  cs.push_back({"layers", "offset_net_kernel", kTol, [](bool corrupt) {
                  Rng rng(34);
                  layers::OffsetNetKernel<T> net("onet", 6, 2, rng, false);
                  Tn d = layers::distortion_tensor<T>(toy_geometry(), 2, 6, 5);
                  return check_params(
                      [&] { ParamList<T> p; net.collect(p); return p; }(), {},
                      [&] { return net.forward(d).values; },
                      [&](const Tn& dy) { net.backward(dy); return std::vector<Tn>{}; },
                      opts(corrupt));
                }});
  auto deform_case = [](std::string name, std::size_t dilation) {
    return Case{"layers", std::move(name), kTol, [dilation](bool corrupt) {
                  Rng rng(35 + dilation);
                  layers::DeformConv<T> dc("dc", 4, dilation, 2, 6, rng, false);
                  Tn x = uniform({2, 4, 6, 5}, rng);
                  Tn d = layers::distortion_tensor<T>(toy_geometry(), 2, 6, 5);
                  return check_params(
                      [&] { ParamList<T> p; dc.collect(p); return p; }(), {{"x", &x}},
                      [&] { return dc.forward(x, d); },
                      [&](const Tn& dy) { return std::vector<Tn>{dc.backward(dy)}; },
                      opts(corrupt));
                }};
  };
  cs.push_back(deform_case("d3c", 1));
  cs.push_back(deform_case("d4c_level2", 2));
  cs.push_back(deform_case("d4c_level3", 3));
  cs.push_back({"layers", "window_attention", kTol, [](bool corrupt) {
                  Rng rng(41);
                  Tn q = uniform({2, 4, 4, 6}, rng), k = uniform({2, 4, 4, 6}, rng),
                     v = uniform({2, 4, 4, 6}, rng), rb = uniform({9, 2}, rng);
                  return finite_diff_check(
                      [&] { return layers::window_attention(q, k, v, rb, 2, 2, static_cast<Tn*>(nullptr)); },
                      [&](const Tn& dy) {
                        Tn probs;
                        layers::window_attention(q, k, v, rb, 2, 2, &probs);
                        auto g = layers::window_attention_backward(q, k, v, probs, 2, 2, dy);
                        return std::vector<Tn>{g.dq, g.dk, g.dv, g.drel_bias};
                      },
                      {{"q", &q}, {"k", &k}, {"v", &v}, {"rel_bias", &rb}}, opts(corrupt));
                }});
  cs.push_back({"layers", "ddca", kTol, [](bool corrupt) {
                  Rng rng(42);
                  // 6 x 7 is not a multiple of the window: exercises pad-and-crop.
                  layers::Ddca<T> att("ddca", 4, 2, 4, 2, 6, rng, false);
                  Tn x = uniform({2, 4, 6, 7}, rng);
                  Tn d = layers::distortion_tensor<T>(toy_geometry(), 2, 6, 7);
                  return check_params(
                      [&] { ParamList<T> p; att.collect(p); return p; }(), {{"x", &x}},
                      [&] { return att.forward(x, d); },
                      [&](const Tn& dy) { return std::vector<Tn>{att.backward(dy)}; },
                      opts(corrupt));
                }});
  auto mff_case = [](std::string name, std::vector<bool> active, Fusion fusion) {
    return Case{"layers", std::move(name), kTol, [active, fusion](bool corrupt) {
                  Rng rng(43);
                  layers::Mff<T> mff("mff", 4, 3, fusion, rng, false);
                  Tn f = uniform({2, 4, 5, 5}, rng);
                  std::vector<Tn> br(3);
                  std::vector<Input> in{{"f", &f}};
                  for (std::size_t s = 0; s < 3; ++s)
                    if (active[s]) br[s] = uniform({2, 4, 5, 5}, rng);
                  for (std::size_t s = 0; s < 3; ++s)
                    if (active[s]) in.push_back({"branch" + std::to_string(s), &br[s]});
                  return check_params(
                      [&] { ParamList<T> p; mff.collect(p); return p; }(), in,
                      [&] { return mff.forward(f, br, active); },
                      [&](const Tn& dy) {
                        auto g = mff.backward(dy);
                        std::vector<Tn> out{g.df};
                        for (std::size_t s = 0; s < 3; ++s)
                          if (active[s]) out.push_back(g.dbranches[s]);
                        return out;
                      },
                      opts(corrupt));
                }};
  };
  cs.push_back(mff_case("mff", {true, true, true}, Fusion::mff));
  cs.push_back(mff_case("mff_masked", {true, false, true}, Fusion::mff));
  cs.push_back(mff_case("addition_fusion", {true, true, false}, Fusion::addition));
  cs.push_back({"layers", "ffn", kTol, [](bool corrupt) {
                  Rng rng(44);
                  layers::Ffn<T> ffn("ffn", 4, rng, false);
                  Tn x = uniform({2, 4, 3, 5}, rng);
                  return check_params(
                      [&] { ParamList<T> p; ffn.collect(p); return p; }(), {{"x", &x}},
                      [&] { return ffn.forward(x); },
                      [&](const Tn& dy) { return std::vector<Tn>{ffn.backward(dy)}; },
                      opts(corrupt));
                }});
  cs.push_back({"layers", "mddl", kTol, [](bool corrupt) {
                  Rng rng(45);
                  layers::Mddl<T> layer("mddl", toy_config(), rng);
                  Tn x = uniform({2, 8, 6, 5}, rng);
                  Tn d = layers::distortion_tensor<T>(toy_geometry(), 2, 6, 5);
                  return check_params(
                      [&] { ParamList<T> p; layer.collect(p); return p; }(), {{"x", &x}},
                      [&] { return layer.forward(x, d); },
                      [&](const Tn& dy) { return std::vector<Tn>{layer.backward(dy)}; },
                      opts(corrupt, 24));
                }});
  cs.push_back({"layers", "mddb", kTol, [](bool corrupt) {
                  Rng rng(46);
                  layers::Mddb<T> block("mddb", toy_config(), rng);
                  Tn x = uniform({1, 8, 6, 5}, rng);
                  Tn d = layers::distortion_tensor<T>({{4, 20}}, 1, 6, 5);
                  return check_params(
                      [&] { ParamList<T> p; block.collect(p); return p; }(), {{"x", &x}},
                      [&] { return block.forward(x, d); },
                      [&](const Tn& dy) { return std::vector<Tn>{block.backward(dy)}; },
                      opts(corrupt, 12));
                }});
}

void add_model(std::vector<Case>& cs) {
  cs.push_back({"model", "tiny_model", kTol, [](bool corrupt) {
                  ModelConfig cfg = tiny_preset();
                  cfg.zero_init = false;  // zero-init would make most gradients vanish
                  Model<T> m(cfg, 51);
                  // Smooth pieces of the full model are narrow, so numeric
                  // derivatives come from an extended-precision twin.
                  Model<long double> ref(cfg, 51);
                  Rng rng(52);
                  Tn x = uniform({1, 3, 4, 4}, rng, 0.0, 1.0);
                  const std::vector<PatchGeometry> geo{{12, 32}};
                  auto params = m.params();
                  auto ref_params = ref.params();
                  return check_params(
                      params, {{"input", &x}}, [&] { return m.forward(x, geo); },
                      [&](const Tn& dy) { return std::vector<Tn>{m.backward(dy)}; },
                      opts(corrupt, 2), [&] {
                        for (std::size_t i = 0; i < params.size(); ++i)
                          ref_params[i]->value = params[i]->value.cast<long double>();
                        return ref.forward(x.cast<long double>(), geo);
                      });
                }});
}

}  // namespace

std::vector<Case> suites() {
  std::vector<Case> cs;
  add_numerics(cs);
  add_sampling(cs);
  add_layers(cs);
  add_model(cs);
  return cs;
}

std::vector<CaseReport> run_suites(const std::string& module, const std::string& fault,
                                   const std::function<void(const CaseReport&)>& on_case) {
  std::vector<CaseReport> out;
  for (const Case& c : suites()) {
    if (module != "all" && module != c.module) continue;
    const auto t0 = std::chrono::steady_clock::now();
    CaseReport r{c.module, c.op, c.run(c.op == fault), c.tolerance, 0.0, false};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.passed = r.result.max_rel_err <= c.tolerance;
    if (on_case) on_case(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mddn::gradcheck
