#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mddn/training.hpp"

using namespace mddn;
using namespace mddn::training;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mddn_train_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
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
  c.scale = 2;
  return c;
}

std::vector<data::ErpPair> small_dataset(std::size_t count, std::size_t height) {
  std::vector<data::ErpPair> out;
  for (std::size_t i = 0; i < count; ++i) {
    data::ErpPair p;
    p.name = "img" + std::to_string(i);
    p.hr = data::synth_erp(height, 100 + i);
    p.lr = data::quantize8(data::degrade(p.hr, 2));
    out.push_back(std::move(p));
  }
  return out;
}

TrainOptions small_options(std::uint64_t steps) {
  TrainOptions o;
  o.steps = steps;
  o.batch = 2;
  o.patch = 8;
  o.val_every = 1000;
  o.log_every = 1;
  o.val_patches = 2;
  o.seed = 11;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("l1 loss value and subgradient") {
  Tensor<double> sr({3}, std::vector<double>{0.5, 0.2, 0.1});
  Tensor<double> gt({3}, std::vector<double>{0.1, 0.2, 0.4});
  Tensor<double> g;
  CHECK(l1_loss(sr, gt, &g) == doctest::Approx(0.7 / 3));
  CHECK(g[0] == doctest::Approx(1.0 / 3));
  CHECK(g[1] == 0.0);
  CHECK(g[2] == doctest::Approx(-1.0 / 3));
  CHECK_THROWS_AS(l1_loss(sr, Tensor<double>({2}), &g), InputError);
}

TEST_CASE("adam follows the bias-corrected update") {
  Parameter<double> p("p", {3});
  p.value = Tensor<double>({3}, std::vector<double>{1.0, 2.0, 3.0});
  Adam<double> adam({&p});
  const double lr = 1e-3, b1 = 0.9, b2 = 0.99, eps = 1e-8;
  p.grad = Tensor<double>({3}, std::vector<double>{1.0, 0.0, -0.5});
  adam.step(lr);
  CHECK(p.value[0] == doctest::Approx(1.0 - lr / (1 + eps)).epsilon(1e-14));
  CHECK(p.value[1] == 2.0);
  CHECK(p.value[2] == doctest::Approx(3.0 + lr * 0.5 / (0.5 + eps)).epsilon(1e-14));
  for (double v : p.grad.values()) CHECK(v == 0.0);

  // Second step against a hand-rolled recurrence.
  const double g1 = 1.0, g2 = 0.25;
  const double m = (1 - b1) * g1 * b1 + (1 - b1) * g2, v = (1 - b2) * g1 * g1 * b2 + (1 - b2) * g2 * g2;
  const double mh = m / (1 - b1 * b1), vh = v / (1 - b2 * b2);
  const double before = p.value[0];
  p.grad[0] = g2;
  adam.step(lr);
  CHECK(p.value[0] == doctest::Approx(before - lr * mh / (std::sqrt(vh) + eps)).epsilon(1e-14));
  CHECK(adam.steps() == 2);

  p.grad = Tensor<double>({2});
  CHECK_THROWS_AS(adam.step(lr), ContractError);
}

TEST_CASE("adam state round-trips") {
  Parameter<float> p("w", {2}), q("w", {2});
  Adam<float> a({&p}), b({&q});
  p.grad = Tensor<float>({2}, std::vector<float>{0.3f, -1.0f});
  a.step(0.1);
  b.load_state(a.state(), a.steps());
  q.value = p.value;
  p.grad = Tensor<float>({2}, std::vector<float>{0.1f, 0.2f});
  q.grad = p.grad;
  a.step(0.1);
  b.step(0.1);
  CHECK(p.value == q.value);
}

TEST_CASE("paper schedule halves at the milestones") {
  const Schedule s;
  CHECK(lr_schedule(0, s) == 2e-4);
  CHECK(lr_schedule(249999, s) == 2e-4);
  CHECK(lr_schedule(250000, s) == 1e-4);
  CHECK(lr_schedule(260000, s) == 1e-4);
  CHECK(lr_schedule(400000, s) == 5e-5);
  CHECK(lr_schedule(450000, s) == 2.5e-5);
  CHECK(lr_schedule(480000, s) == 1.25e-5);
  Schedule short_run = s;
  short_run.total = 2000;
  CHECK(scaled_milestones(short_run) == std::vector<std::uint64_t>{1000, 1600, 1800, 1900});
  CHECK(lr_schedule(1799, short_run) == 5e-5);
}

TEST_CASE("training options serialize and parse back") {
  TrainOptions o = small_options(37);
  o.clip = 0.5;
  o.out_dir = "x";
  TrainOptions back;
  for (const auto& [k, v] : parse_key_values(serialize(o))) REQUIRE(apply_train_key(back, k, v));
  CHECK(serialize(back) == serialize(o));
  CHECK_FALSE(apply_train_key(back, "channels", "3"));
}

TEST_CASE("batch seeds depend on seed and step only") {
  const auto a = Trainer::batch_seeds(1, 5, 4), b = Trainer::batch_seeds(1, 5, 4);
  CHECK(a == b);
  CHECK(a != Trainer::batch_seeds(1, 6, 4));
  CHECK(a != Trainer::batch_seeds(2, 5, 4));
  CHECK(a.size() == 4);
}

TEST_CASE("validation split holds out the last images") {
  const auto pairs = small_dataset(4, 8);
  const auto split = make_split(pairs, 1, small_options(1), 2);
  REQUIRE(split.train.size() == 3);
  CHECK(split.train.back() == &pairs[2]);
  REQUIRE(split.val.size() == 2);
  const auto again = make_split(pairs, 1, small_options(1), 2);
  CHECK(again.val[0].hr == split.val[0].hr);
  CHECK(make_split(pairs, 0, small_options(1), 2).train.size() == 4);
  CHECK_THROWS(make_split(pairs, 4, small_options(1), 2));
}

TEST_CASE("identical runs are bit-identical") {
  const auto pairs = small_dataset(3, 8);
  const auto split = make_split(pairs, 1, small_options(6), 2);
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
  auto o1 = small_options(6), o2 = small_options(6);
  o1.out_dir = d1.string();
  o2.out_dir = d2.string();
  Trainer a(small_config(), o1), b(small_config(), o2);
  const auto ra = a.run(split), rb = b.run(split);
  CHECK(slurp(d1 / "latest.ckpt") == slurp(d2 / "latest.ckpt"));
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) CHECK(ra.log[i].loss == rb.log[i].loss);
  CHECK(ra.steps_done == 6);
  REQUIRE(ra.final_val);
  CHECK(fs::exists(d1 / "best.ckpt"));
  CHECK(fs::exists(d1 / "train_log.csv"));
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  const auto pairs = small_dataset(3, 8);
  const auto split = make_split(pairs, 1, small_options(8), 2);
  const auto whole = temp_dir("whole"), part = temp_dir("part");
  auto o = small_options(8);
  o.out_dir = whole.string();
  o.checkpoint_every = 4;
  Trainer a(small_config(), o);
  a.run(split);
  REQUIRE(fs::exists(whole / "step_4.ckpt"));

  auto p = small_options(8);
  p.out_dir = part.string();
  Trainer b(small_config(), p);
  b.resume((whole / "step_4.ckpt").string());
  CHECK(b.step() == 4);
  b.run(split);
  CHECK(slurp(whole / "latest.ckpt") == slurp(part / "latest.ckpt"));

  auto other = small_options(8);
  other.lr = 1e-3;
  Trainer c(small_config(), other);
  CHECK_THROWS_AS(c.resume((whole / "step_4.ckpt").string()), ConfigError);
}

TEST_CASE("non-finite loss aborts with a dump") {
  auto pairs = small_dataset(2, 8);
  for (auto& p : pairs)
    for (auto& v : p.hr.pixels.values()) v = std::numeric_limits<float>::quiet_NaN();
  const auto dir = temp_dir("nan");
  auto o = small_options(3);
  o.out_dir = dir.string();
  const auto split = make_split(pairs, 0, o, 2);
  Trainer t(small_config(), o);
  try {
    t.run(split);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
  CHECK(fs::exists(dir / "nan_dump.txt"));
}

TEST_CASE("a single patch is memorised") {
  std::vector<data::ErpPair> pairs(1);
  pairs[0].name = "one";
  pairs[0].hr = data::synth_erp(8, 3);
  pairs[0].hr = data::Image(ops::crop(pairs[0].hr.pixels.reshaped({1, 3, 8, 16}), 8, 8).reshaped({3, 8, 8}));
  pairs[0].lr = data::quantize8(data::degrade(pairs[0].hr, 2));
  auto o = small_options(2000);
  o.batch = 1;
  o.lr = 2e-3;
  o.log_every = 100;
  const auto split = make_split(pairs, 0, o, 2);
  Trainer t(small_config(), o);
  const auto r = t.run(split);
  CHECK(r.log.front().loss > 0.1);
  CHECK(r.log.back().loss < 0.01);
}
