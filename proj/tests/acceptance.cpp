// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance <path-to-mddn-cli> <work-dir> [criterion ...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mddn/geometry.hpp"
#include "mddn/gradcheck.hpp"
#include "mddn/layers.hpp"
#include "mddn/metrics.hpp"
#include "mddn/model.hpp"
#include "mddn/training.hpp"

namespace fs = std::filesystem;
using namespace mddn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string g_cli;
fs::path g_work;

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + g_cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> read_keys(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::map<std::string, std::string> out;
  for (auto& [k, v] : parse_key_values(ss.str())) out[k] = v;
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) out.emplace_back();
    else out.back() += c;
  }
  return out;
}

Tensor<double> rand_tensor(const Shape& s, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  Tensor<double> t(s);
  fill_uniform(t, rng, bound);
  return t;
}

// ---- criteria -----------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = gradcheck::run_suites("all");
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_op, failed;
  for (const auto& r : reports) {
    if (r.result.max_rel_err > worst) {
      worst = r.result.max_rel_err;
      worst_op = r.op;
    }
    if (!r.passed || r.result.max_rel_err > 1e-6) failed += " " + r.op;
  }
  return {failed.empty() && secs <= 300,
          fmt("%zu ops, worst rel err %.2e (%s), %.1f s%s", reports.size(), worst, worst_op.c_str(),
              secs, failed.empty() ? "" : (", failed:" + failed).c_str())};
}

Outcome deform_oracle() {
  std::mt19937_64 pick(2024);
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t d = 1 + i % 3;
    const std::size_t C = 2 + pick() % 6, H = 3 + pick() % 8, W = 3 + pick() % 8, N = 1 + pick() % 2;
    const std::size_t rank = 1 + pick() % C, offset_width = C + pick() % 8;
    Rng rng(pick());
    layers::DeformConv<double> dc("d4c", C, d, rank, offset_width, rng, true);
    fill_uniform(dc.projection().a_factor().value, rng, 0.5);
    fill_uniform(dc.projection().bias().value, rng, 0.5);
    const auto x = rand_tensor({N, C, H, W}, pick());
    const auto y = dc.forward(x, layers::distortion_tensor<double>({{0, 0}}, N, H, W));
    const auto ref = ops::conv2d(x, dc.projection().composed_weight(), dc.projection().bias().value,
                                 ops::ConvSpec::same(3, d, ops::Padding::replicate));
    worst = std::max(worst, max_abs_diff(y, ref));
  }
  return {worst <= 1e-6, fmt("20 cases at dilations 1/2/3, max abs diff %.2e", worst)};
}

Outcome geometry_props() {
  double worst = 0;
  bool symmetric = true;
  for (std::size_t H : {1u, 2u, 5u, 64u, 255u, 1024u}) {
    const auto m = geometry::distortion_map(H, 2 * H, 0, H);
    for (std::size_t h = 0; h < H; ++h) {
      const double direct = std::sin((h + 0.5) * std::numbers::pi / H);
      for (std::size_t w = 0; w < 2 * H; w += std::max<std::size_t>(1, H / 8))
        worst = std::max(worst, std::abs(m.at(h, w) - direct));
      symmetric = symmetric && m.row(h) == m.row(H - 1 - h);
    }
  }
  std::mt19937_64 rng(7);
  int consistent = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t full = 4 + rng() % 500, h = 1 + rng() % full, off = rng() % (full - h + 1);
    const auto whole = geometry::distortion_map(full, 2, 0, full);
    const auto band = geometry::distortion_map(h, 2, off, full);
    bool ok = true;
    for (std::size_t r = 0; r < h; ++r) ok = ok && band.row(r) == whole.row(off + r);
    consistent += ok;
  }
  return {worst <= 1e-12 && symmetric && consistent == 100,
          fmt("max err %.2e, symmetric %s, %d/100 crops consistent", worst, symmetric ? "yes" : "no",
              consistent)};
}

Outcome identity_at_init() {
  bool ok = true;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    Model<double> m(tiny_preset(), seed);
    const auto x = rand_tensor({2, 3, 8, 12}, 100 + seed, 1.0);
    const std::vector<PatchGeometry> geo{{0, 16}, {8, 16}};
    const auto y = m.forward(x, geo);
    const auto f0 = m.shallow(x);
    ok = ok && m.body(f0, layers::distortion_tensor<double>(geo, 2, 8, 12)) == f0;
    ok = ok && m.reconstruct(f0) == y;
  }
  return {ok, "tiny preset, 3 seeds, body(f0) == f0 and forward == reconstruct(shallow(x)) bit-exact"};
}

Outcome metric_checks() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> a({3, 32, 64}), b({3, 32, 64});
  for (auto& v : a.values()) v = u(rng);
  for (auto& v : b.values()) v = u(rng);
  const double d_psnr = std::abs(metrics::ws_psnr(a, b, {0, 0, true}) - metrics::psnr(a, b));
  const double d_ssim = std::abs(metrics::ws_ssim(a, b, {0, 0, true}) - metrics::ssim(a, b));
  Tensor<float> c = a;
  for (auto& v : c.values()) v = std::clamp(v, 0.1f, 0.9f);
  // 24.0824 dB is 20 log10(16): a uniform error of one sixteenth of the peak.
  // Sixteen 8-bit levels (20 log10(255/16)) give 24.0484 dB instead.
  Tensor<float> e = c, e8 = c;
  for (auto& v : e.values()) v += 1.0f / 16;
  for (auto& v : e8.values()) v += 16.0f / 255;
  const double uniform_db = metrics::ws_psnr(c, e), levels_db = metrics::ws_psnr(c, e8);
  const double self = metrics::ssim(a, a);
  const bool ok = d_psnr <= 1e-9 && d_ssim <= 1e-9 && std::abs(uniform_db - 24.0824) <= 1e-3 &&
                  std::abs(levels_db - 20 * std::log10(255.0 / 16)) <= 1e-3 && self == 1.0;
  return {ok, fmt("|ws_psnr-psnr| %.1e, |ws_ssim-ssim| %.1e, uniform error peak/16 %.4f dB "
                  "(16/255: %.4f dB), ssim(x,x) %.12f",
                  d_psnr, d_ssim, uniform_db, levels_db, self)};
}

Outcome ablation_pattern() {
  const fs::path out = g_work / "ablate";
  fs::remove_all(out);
  const int rc = run_cli("ablate --out \"" + out.string() + "\"", g_work / "ablate.log");
  if (rc != 0) return {false, fmt("ablate exited with %d", rc)};
  std::ifstream in(out / "ablate.csv");
  std::string line;
  std::getline(in, line);
  std::map<std::string, double> params;
  std::string devs;
  while (std::getline(in, line)) {
    const auto f = csv_fields(line);
    if (f.size() < 8 || f[0] != "variants" || f[3] != "mff") continue;
    params[f[1]] = std::stod(f[4]);
    if (!f[7].empty()) devs += " {" + f[1] + "}:" + f[7];
  }
  const auto p = [&](const char* v) { return params.count(v) ? params[v] : -1.0; };
  const bool ok = p("2") > 0 && p("2") == p("3") && p("3") < p("2,3") && p("2,3") < p("1") &&
                  p("1") < p("1,2") && p("1,2") == p("1,3") && p("1,3") < p("1,2,3") &&
                  p("1,2,3") == p("1,2,4") && p("1,2,4") == p("1,3,4") && p("1,3,4") == p("1,2,5") &&
                  p("1,2,5") < p("1,2,3,4");
  return {ok, "ordering/equalities hold; rel. deviation vs published:" + devs};
}

// Dataset shared by the training criteria.
fs::path synthetic_dataset() {
  const fs::path data = g_work / "synth";
  if (!fs::exists(data / "manifest.txt")) {
    const int rc = run_cli("synth --out \"" + data.string() + "\" --count 10 --height 64 --seed 1",
                           g_work / "synth.log");
    if (rc != 0) throw IoError("synth exited with " + std::to_string(rc));
  }
  return data;
}

Outcome desk_learning() {
  const fs::path data = synthetic_dataset();
  const fs::path out = g_work / "train_tiny";
  fs::remove_all(out);
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run_cli("train --preset tiny --scale 2 --data \"" + data.string() + "\" --out \"" +
                             out.string() + "\" --val-images 2 --seed 0",
                         g_work / "train_tiny.log");
  const double secs = seconds_since(t0);
  if (rc != 0) return {false, fmt("train exited with %d", rc)};
  const auto s = read_keys(out / "summary.txt");
  const double ws = std::stod(s.at("val_ws_psnr")), bic = std::stod(s.at("bicubic_ws_psnr"));
  return {ws - bic >= 0.3 && secs <= 1800,
          fmt("held-out WS-PSNR %.3f dB vs bicubic %.3f dB (%+.3f dB), %.0f s", ws, bic, ws - bic, secs)};
}

Outcome determinism() {
  const fs::path data = synthetic_dataset();
  std::string ckpt[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path out = g_work / ("det" + std::to_string(r));
    fs::remove_all(out);
    const int rc = run_cli("train --preset tiny --scale 2 --data \"" + data.string() + "\" --out \"" +
                               out.string() +
                               "\" --steps 500 --patch 16 --val-every 500 --checkpoint-every 500 "
                               "--val-images 2 --seed 5",
                           g_work / ("det" + std::to_string(r) + ".log"));
    if (rc != 0) return {false, fmt("train exited with %d", rc)};
    ckpt[r] = slurp(out / "step_500.ckpt");
  }
  const bool same = !ckpt[0].empty() && ckpt[0] == ckpt[1];

  // Round trip: parse and rewrite, and load into a model and save again.
  const fs::path src = g_work / "det0" / "step_500.ckpt";
  const fs::path copy = g_work / "det0" / "rewritten.ckpt";
  write_checkpoint(copy.string(), read_checkpoint(src.string()));
  const bool rewrite = slurp(copy) == ckpt[0];
  TrainRecord rec;
  auto model = load_checkpoint<float>(src.string(), &rec);
  const fs::path resaved = g_work / "det0" / "resaved.ckpt";
  save_checkpoint(model, resaved.string(), &rec);
  const bool reload = slurp(resaved) == ckpt[0];
  return {same && rewrite && reload,
          fmt("step-500 checkpoints identical: %s (%zu bytes); rewrite bit-exact: %s; model reload bit-exact: %s",
              same ? "yes" : "no", ckpt[0].size(), rewrite ? "yes" : "no", reload ? "yes" : "no")};
}

Outcome schedule() {
  const training::Schedule s;
  const double a = training::lr_schedule(0, s), b = training::lr_schedule(260000, s),
               c = training::lr_schedule(480000, s);
  return {a == 2e-4 && b == 1e-4 && c == 1.25e-5, fmt("lr(0)=%g lr(260000)=%g lr(480000)=%g", a, b, c)};
}

Outcome mff_contract() {
  const std::size_t C = 6, H = 5, W = 7, N = 2, P = H * W;
  Rng rng(9);
  layers::Mff<double> gate("mff", C, 3, Fusion::mff, rng, false);
  const auto f = rand_tensor({N, C, H, W}, 1);
  const std::vector<Tensor<double>> br{rand_tensor({N, C, H, W}, 2), rand_tensor({N, C, H, W}, 3),
                                       rand_tensor({N, C, H, W}, 4)};
  gate.forward(f, br, {true, true, true});
  double worst_sum = 0, min_gate = 1;
  const auto& g = gate.last_gates();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        s += g[(n * 3 + k) * P + p];
        min_gate = std::min(min_gate, g[(n * 3 + k) * P + p]);
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1));
    }
  Rng rng0(10);
  layers::Mff<double> zero("mff", C, 3, Fusion::mff, rng0, true);
  const auto avg = zero.forward(f, br, {true, true, true});
  bool exact_avg = true;
  for (std::size_t i = 0; i < avg.numel(); ++i)
    exact_avg = exact_avg && avg[i] == (br[0][i] + br[1][i] + br[2][i]) / 3;
  const auto single = gate.forward(f, {br[0], Tensor<double>(), Tensor<double>()}, {true, false, false});
  const bool passthrough = single == br[0];
  return {min_gate >= 0 && worst_sum <= 1e-6 && exact_avg && passthrough,
          fmt("min gate %.3g, max |sum-1| %.1e, zero-init average exact: %s, {1} returns f1: %s", min_gate,
              worst_sum, exact_avg ? "yes" : "no", passthrough ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: acceptance <mddn-cli> <work-dir> [criterion ...]\n");
    return 2;
  }
  g_cli = fs::absolute(argv[1]).string();
  g_work = fs::absolute(argv[2]);
  fs::create_directories(g_work);
  std::set<int> only;
  for (int i = 3; i < argc; ++i) only.insert(std::atoi(argv[i]));

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"deformable-conv oracle", deform_oracle},
      {"geometry", geometry_props},
      {"identity at init", identity_at_init},
      {"metrics", metric_checks},
      {"ablation pattern", ablation_pattern},
      {"desk-scale learning", desk_learning},
      {"determinism", determinism},
      {"schedule", schedule},
      {"mff contract", mff_contract},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %-24s %s  %s\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
