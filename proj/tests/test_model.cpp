#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mddn/model.hpp"

using namespace mddn;
namespace fs = std::filesystem;

namespace {

Tensor<double> rand_image(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t({n, 3, h, w});
  fill_uniform(t, rng, 1.0);
  for (auto& v : t.values()) v = 0.5 + 0.5 * v;
  return t;
}

ModelConfig small_config() {
  ModelConfig c = tiny_preset();
  c.channels = 8;
  c.heads = 2;
  c.offset_width = 6;
  c.rank = 2;
  c.n_blocks = 1;
  c.n_layers = 1;
  c.window = 2;
  return c;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mddn_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::uint64_t conv_params(std::uint64_t ci, std::uint64_t co, std::uint64_t k) {
  return ci * co * k * k + co;
}

double table2(const std::string& branches) {
  ModelConfig c = paper_preset();
  c.branches = BranchSet::parse(branches);
  return static_cast<double>(count_params(c));
}

}  // namespace

TEST_CASE("zero-initialised body is the identity") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model<double> m(tiny_preset(), seed);
    const auto x = rand_image(2, 8, 8, 10 + seed);
    const std::vector<PatchGeometry> geo{{0, 16}, {8, 16}};
    const auto y = m.forward(x, geo);
    const auto f0 = m.shallow(x);
    const auto dmap = layers::distortion_tensor<double>(geo, 2, 8, 8);
    CHECK(m.body(f0, dmap) == f0);
    CHECK(m.reconstruct(f0) == y);
  }
}

TEST_CASE("forward output has the upscaled shape") {
  for (std::size_t s : {2u, 4u}) {
    ModelConfig c = small_config();
    c.scale = s;
    Model<double> m(c, 4);
    const auto y = m.forward(rand_image(1, 4, 6, 5), {{0, 0}});
    CHECK(y.shape() == Shape{1, 3, 4 * s, 6 * s});
  }
}

TEST_CASE("parameter count without blocks is the plain conv stack") {
  for (std::size_t s : {2u, 4u}) {
    ModelConfig c = tiny_preset();
    c.n_blocks = 0;
    c.scale = s;
    const std::uint64_t C = c.channels;
    std::uint64_t expect = conv_params(3, C, 3) + conv_params(C, 3, 3);
    for (std::size_t i = 0; i < c.upsample_stages(); ++i) expect += conv_params(C, 4 * C, 3);
    CHECK(count_params(c) == expect);
    Model<float> m(c, 0);
    CHECK(m.param_count() == expect);
  }
}

TEST_CASE("branch ablation parameter counts follow the published ordering") {
  const double b2 = table2("2"), b3 = table2("3"), b23 = table2("2,3"), b1 = table2("1"),
               b12 = table2("1,2"), b13 = table2("1,3"), b123 = table2("1,2,3"),
               b124 = table2("1,2,4"), b134 = table2("1,3,4"), b125 = table2("1,2,5"),
               b1234 = table2("1,2,3,4");
  CHECK(b2 == b3);
  CHECK(b12 == b13);
  CHECK(b123 == b124);
  CHECK(b123 == b134);
  CHECK(b123 == b125);
  CHECK(b2 < b23);
  CHECK(b23 < b1);
  CHECK(b1 < b12);
  CHECK(b12 < b123);
  CHECK(b123 < b1234);
}

TEST_CASE("parameters grow with rank") {
  std::uint64_t prev = 0;
  for (std::size_t r : {4u, 8u, 12u, 16u, 20u}) {
    ModelConfig c = paper_preset();
    c.rank = r;
    const auto n = count_params(c);
    CHECK(n > prev);
    prev = n;
  }
}

TEST_CASE("addition fusion drops exactly the gate convolutions") {
  ModelConfig c = tiny_preset();
  ModelConfig a = c;
  a.fusion = Fusion::addition;
  const std::uint64_t layers = c.n_blocks * c.n_layers;
  CHECK(count_params(c) - count_params(a) == layers * conv_params(c.channels, 3, 3));
  Model<float> m(c, 0), n(a, 0);
  CHECK(m.param_count() == count_params(c));
  CHECK(n.param_count() == count_params(a));
}

TEST_CASE("multiply-adds scale with the input area") {
  const ModelConfig c = tiny_preset();
  const auto a = multiply_adds(c, 16, 16), b = multiply_adds(c, 32, 32);
  CHECK(b == 4 * a);
  Model<float> m(c, 0);
  CHECK(m.macs(16, 16) == a);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto dir = temp_dir("ckpt");
  ModelConfig c = small_config();
  c.zero_init = false;
  {
    Model<float> m(c, 7);
    save_checkpoint(m, (dir / "f.ckpt").string());
    auto back = load_checkpoint<float>((dir / "f.ckpt").string());
    CHECK(back.config() == c);
    auto p = m.params(), q = back.params();
    REQUIRE(p.size() == q.size());
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i]->value == q[i]->value);
    const auto x = rand_image(1, 4, 4, 8).cast<float>();
    CHECK(m.forward(x, {{0, 0}}) == back.forward(x, {{0, 0}}));
  }
  {
    Model<double> m(c, 9);
    TrainRecord tr;
    tr.step = 12;
    tr.best_ws_psnr = 31.25;
    tr.seed = 5;
    tr.meta = "steps = 100\n";
    tr.moments.push_back(to_named("m/x", Tensor<double>({2}, std::vector<double>{0.1, -3e-9})));
    save_checkpoint(m, (dir / "d.ckpt").string(), &tr);
    TrainRecord got;
    auto back = load_checkpoint<double>((dir / "d.ckpt").string(), &got);
    auto p = m.params(), q = back.params();
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i]->value == q[i]->value);
    CHECK(got.step == 12);
    CHECK(got.best_ws_psnr == 31.25);
    CHECK(got.seed == 5);
    CHECK(got.meta == tr.meta);
    REQUIRE(got.moments.size() == 1);
    CHECK(got.moments[0].values == tr.moments[0].values);
  }
}

TEST_CASE("malformed checkpoints report where they break") {
  const auto dir = temp_dir("bad");
  Model<float> m(small_config(), 1);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(m, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };

  write(bytes.substr(0, bytes.size() - 3));
  try {
    read_checkpoint(path);
    FAIL("truncated checkpoint accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 0);
    CHECK(e.offset() <= bytes.size());
  }

  std::string bad = bytes;
  bad[0] = 'X';
  write(bad);
  try {
    read_checkpoint(path);
    FAIL("bad magic accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  write(bytes + "junk");
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  CHECK_THROWS_AS(read_checkpoint((dir / "missing.ckpt").string()), IoError);
}

TEST_CASE("checkpoint contents are validated against the model") {
  const auto dir = temp_dir("mismatch");
  const auto path = (dir / "m.ckpt").string();
  Model<float> m(small_config(), 1);
  save_checkpoint(m, path);
  auto data = read_checkpoint(path);

  ModelConfig other = small_config();
  other.rank = 1;
  CHECK_THROWS_AS(load_checkpoint<float>(path, nullptr, &other), ConfigError);

  auto missing = data;
  missing.tensors.pop_back();
  write_checkpoint(path, missing);
  CHECK_THROWS_AS(load_checkpoint<float>(path), ConfigError);

  auto reshaped = data;
  reshaped.tensors[0].shape.back() += 1;
  reshaped.tensors[0].values.resize(reshaped.tensors[0].values.size() * 2);
  Model<float> target(small_config(), 2);
  CHECK_THROWS_AS(assign_parameters(target, reshaped.tensors), ConfigError);
}

TEST_CASE("tiled inference is clamped and exact away from tile seams") {
  ModelConfig c = small_config();
  c.zero_init = false;
  Model<double> m(c, 3);
  const auto x = rand_image(1, 12, 16, 4);
  const auto tiled = m.infer(x, {0, 0}, {8, 4});
  const std::size_t s = c.scale;
  REQUIRE(tiled.shape() == Shape{1, 3, 12 * s, 16 * s});
  for (double v : tiled.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // At init the body is the identity, so each output pixel depends on a few
  // LR pixels only. The first tile alone covers LR rows and columns 0..3.
  Model<double> z(small_config(), 3);
  const auto whole = z.infer(x, {0, 0}, {64, 0});
  const auto split = z.infer(x, {0, 0}, {8, 4});
  for (std::size_t c2 = 0; c2 < 3; ++c2)
    for (std::size_t h = 0; h < 4 * s; ++h)
      for (std::size_t w = 0; w < 4 * s; ++w)
        CHECK(std::abs(whole.at(0, c2, h, w) - split.at(0, c2, h, w)) < 1e-12);
}
