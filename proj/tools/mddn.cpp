// mddn command-line driver.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "mddn/config.hpp"
#include "mddn/data.hpp"
#include "mddn/geometry.hpp"
#include "mddn/gradcheck.hpp"
#include "mddn/linalg.hpp"
#include "mddn/metrics.hpp"
#include "mddn/model.hpp"
#include "mddn/training.hpp"

#ifndef MDDN_GIT_DESCRIBE
#define MDDN_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace mddn;

namespace {

constexpr int kOk = 0, kFail = 1, kUsage = 2;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string g_command_line;

void write_manifest(const std::string& out, const std::string& command, const std::string& config,
                    std::uint64_t seed) {
  if (out.empty()) return;
  fs::create_directories(out);
  std::ofstream m(fs::path(out) / "manifest.txt");
  if (!m) throw IoError("cannot write " + (fs::path(out) / "manifest.txt").string());
  m << "command = " << command << '\n'
    << "argv = " << g_command_line << '\n'
    << "seed = " << seed << '\n'
    << "started = " << utc_now() << '\n'
    << "git = " << MDDN_GIT_DESCRIBE << '\n'
    << "out = " << fs::absolute(out).string() << '\n'
    << "[config]\n"
    << config;
}

void append_manifest(const std::string& out, const std::string& line) {
  if (out.empty()) return;
  std::ofstream m(fs::path(out) / "manifest.txt", std::ios::app);
  m << line << '\n';
}

// Model configuration from a preset, an optional key = value file and flag overrides.
struct ModelArgs {
  std::string preset = "tiny";
  std::string config_file;
  std::size_t scale = 0;
  std::size_t rank = 0;
  std::string branches;
  std::string fusion;

  void add(CLI::App* app, const std::string& default_preset, bool with_fusion = true) {
    preset = default_preset;
    app->add_option("--preset", preset, "tiny or paper")->check(CLI::IsMember({"tiny", "paper"}));
    app->add_option("--config", config_file, "key = value file (model and training keys)");
    app->add_option("--scale", scale, "upscaling factor (power of two)");
    app->add_option("--rank", rank, "low-rank decomposition rank");
    app->add_option("--branches", branches, "extractor levels, e.g. 1,2,3");
    if (with_fusion)
      app->add_option("--fusion", fusion, "mff or addition")->check(CLI::IsMember({"mff", "addition"}));
  }

  // extra receives keys that are not model keys.
  ModelConfig resolve(std::map<std::string, std::string>* extra = nullptr) const {
    ModelConfig cfg = preset == "paper" ? paper_preset() : tiny_preset();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw IoError("cannot open config " + config_file);
      std::stringstream ss;
      ss << in.rdbuf();
      for (const auto& [k, v] : parse_key_values(ss.str())) {
        if (apply_model_key(cfg, k, v)) continue;
        if (!extra) throw ConfigError("config: unknown key '" + k + "'");
        (*extra)[k] = v;
      }
    }
    if (scale) cfg.scale = scale;
    if (rank) cfg.rank = rank;
    if (!branches.empty()) cfg.branches = BranchSet::parse(branches);
    if (!fusion.empty()) apply_model_key(cfg, "fusion", fusion);
    cfg.validate();
    return cfg;
  }
};

// ---- distmap --------------------------------------------------------------------------

struct DistmapArgs {
  std::size_t height = 0, width = 0, row_offset = 0, full_height = 0;
  std::string out = ".";
};

int cmd_distmap(const DistmapArgs& a) {
  const std::size_t W = a.width ? a.width : 2 * a.height;
  const std::size_t full = a.full_height ? a.full_height : a.height;
  const auto map = geometry::distortion_map(a.height, W, a.row_offset, full);
  std::ostringstream cfg;
  cfg << "height = " << a.height << "\nwidth = " << W << "\nrow_offset = " << a.row_offset
      << "\nfull_height = " << full << '\n';
  write_manifest(a.out, "distmap", cfg.str(), 0);
  Tensor<float> px({3, a.height, W});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t h = 0; h < a.height; ++h)
      for (std::size_t w = 0; w < W; ++w) px.at(c, h, w) = static_cast<float>(map.row(h));
  data::save_image(data::Image(std::move(px)), (fs::path(a.out) / "distmap.png").string(), 16);
  std::ofstream csv(fs::path(a.out) / "distmap.csv");
  csv << "row,global_row,weight\n" << std::setprecision(17);
  for (std::size_t h = 0; h < a.height; ++h)
    csv << h << ',' << a.row_offset + h << ',' << map.row(h) << '\n';
  std::cout << "wrote " << (fs::path(a.out) / "distmap.png").string() << " and distmap.csv ("
            << a.height << "x" << W << ")\n";
  return kOk;
}

// ---- gradcheck ------------------------------------------------------------------------

struct GradcheckArgs {
  std::string module = "all";
  std::string dtype = "f64";
  std::string fault;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.dtype != "f64") throw InputError("gradcheck: only --dtype f64 is supported");
  if (!a.fault.empty()) {
    bool known = false;
    for (const auto& c : gradcheck::suites()) known |= c.op == a.fault;
    if (!known) throw InputError("gradcheck: unknown op '" + a.fault + "' for --inject-fault");
  }
  write_manifest(a.out, "gradcheck", "module = " + a.module + "\ndtype = f64\ninject_fault = " + a.fault + "\n", 0);
  std::vector<std::string> failures;
  std::size_t n = 0;
  double total = 0.0;
  auto print = [&](const gradcheck::CaseReport& r) {
    ++n;
    total += r.seconds;
    std::printf("%-4s %-9s %-20s max_rel_err %.3e  tol %.0e  checked %5zu  skipped %3zu  %6.2fs\n",
                r.passed ? "PASS" : "FAIL", r.module.c_str(), r.op.c_str(), r.result.max_rel_err,
                r.tolerance, r.result.checked, r.result.skipped, r.seconds);
    std::fflush(stdout);
    if (!r.passed) {
      std::ostringstream os;
      os << r.module << '/' << r.op << ": " << r.result.worst_input << '[' << r.result.worst_index
         << "] analytic " << std::setprecision(10) << r.result.analytic << " numeric "
         << r.result.numeric;
      failures.push_back(os.str());
    }
  };
  if (a.module != "all" && a.module != "numerics" && a.module != "sampling" &&
      a.module != "layers" && a.module != "model")
    throw InputError("gradcheck: unknown module '" + a.module + "'");
  gradcheck::run_suites(a.module, a.fault, print);
  std::printf("%zu ops, %.1fs, %zu failed\n", n, total, failures.size());
  if (failures.empty()) return kOk;
  for (const auto& f : failures) std::fprintf(stderr, "gradcheck failed: %s\n", f.c_str());
  return kFail;
}

// ---- train ----------------------------------------------------------------------------

struct TrainArgs {
  ModelArgs model;
  std::string data_dir, manifest, out, resume;
  std::size_t val_images = 0;
  bool no_cache = false;
  std::optional<std::uint64_t> steps, seed, val_every, log_every, checkpoint_every;
  std::optional<std::size_t> batch, patch, val_patches, val_patch;
  std::optional<double> lr, clip;
  bool paper_schedule = false;
};

int cmd_train(const TrainArgs& a) {
  std::map<std::string, std::string> extra;
  const ModelConfig cfg = a.model.resolve(&extra);
  training::TrainOptions opt;
  if (a.model.preset == "paper") {
    opt.steps = 500000;
    opt.patch = 256;
    opt.paper_schedule = true;
  } else {
    // Desk scale: a short run needs a larger step and smaller patches.
    opt.steps = 2000;
    opt.patch = 32;
    opt.lr = 1e-3;
  }
  for (const auto& [k, v] : extra)
    if (!training::apply_train_key(opt, k, v)) throw ConfigError("config: unknown key '" + k + "'");
  if (a.steps) opt.steps = *a.steps;
  if (a.seed) opt.seed = *a.seed;
  if (a.val_every) opt.val_every = *a.val_every;
  if (a.log_every) opt.log_every = *a.log_every;
  if (a.checkpoint_every) opt.checkpoint_every = *a.checkpoint_every;
  if (a.batch) opt.batch = *a.batch;
  if (a.patch) opt.patch = *a.patch;
  if (a.val_patches) opt.val_patches = *a.val_patches;
  if (a.val_patch) opt.val_patch = *a.val_patch;
  if (a.lr) opt.lr = *a.lr;
  if (a.clip) opt.clip = *a.clip;
  if (a.paper_schedule) opt.paper_schedule = true;
  opt.out_dir = a.out;

  if (!fs::is_directory(a.data_dir)) throw IoError("dataset directory not found: " + a.data_dir);
  const std::string manifest =
      a.manifest.empty() ? (fs::path(a.data_dir) / "manifest.txt").string() : a.manifest;
  write_manifest(a.out, "train", cfg.serialize() + training::serialize(opt), opt.seed);
  const auto pairs = data::load_dataset(a.data_dir, manifest, cfg.scale, !a.no_cache);
  const std::size_t n_val =
      a.val_images ? a.val_images : (pairs.size() > 1 ? std::max<std::size_t>(1, pairs.size() / 8) : 0);
  append_manifest(a.out, "images = " + std::to_string(pairs.size()) + "\nval_images = " + std::to_string(n_val));
  const auto split = training::make_split(pairs, n_val, opt, cfg.scale);

  training::Trainer trainer(cfg, opt);
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw IoError("checkpoint not found: " + a.resume);
    trainer.resume(a.resume);
    std::printf("resumed at step %llu\n", static_cast<unsigned long long>(trainer.step()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = trainer.run(split, [&](const training::StepLog& r) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("step %7llu  loss %.5f  lr %.3e  |g| %.3e", static_cast<unsigned long long>(r.step),
                r.loss, r.lr, r.grad_norm);
    if (r.val_ws_psnr) std::printf("  val psnr %.3f ws-psnr %.3f", *r.val_psnr, *r.val_ws_psnr);
    std::printf("  %.0fs\n", sec);
    std::fflush(stdout);
  });
  if (res.final_val) {
    const auto& v = *res.final_val;
    std::printf("final  psnr %.4f ws-psnr %.4f | bicubic psnr %.4f ws-psnr %.4f | gain ws %.4f dB\n",
                v.psnr, v.ws_psnr, v.bicubic_psnr, v.bicubic_ws_psnr, v.ws_psnr - v.bicubic_ws_psnr);
    std::ofstream sum(fs::path(a.out) / "summary.txt");
    sum << std::setprecision(10) << "steps = " << res.steps_done << "\nval_psnr = " << v.psnr
        << "\nval_ws_psnr = " << v.ws_psnr << "\nbicubic_psnr = " << v.bicubic_psnr
        << "\nbicubic_ws_psnr = " << v.bicubic_ws_psnr << "\nbest_ws_psnr = " << res.best_ws_psnr
        << '\n';
  }
  return kOk;
}

// ---- eval / infer ---------------------------------------------------------------------

struct GeometryArgs {
  std::size_t full_height = 0, row_offset = 0;

  void add(CLI::App* app) {
    app->add_option("--full-height", full_height,
                    "ERP height the images are a band of (required for non 2:1 images)");
    app->add_option("--row-offset", row_offset, "global row of the first image row");
  }

  metrics::Weighting weighting(const data::Image& img, const std::string& name) const {
    if (!img.full_erp && !full_height)
      throw InputError(name + " is not a 2:1 ERP image; pass --full-height/--row-offset");
    return {full_height ? full_height : img.height(), row_offset, false};
  }
};

struct EvalArgs {
  std::string pairs, data_dir, manifest, checkpoint, out;
  bool bicubic = false, y_channel = false;
  std::size_t scale = 0, crop_border = 0, tile = 256, overlap = 16;
  GeometryArgs geo;
};

int cmd_eval(const EvalArgs& a) {
  struct Row {
    std::string name;
    metrics::Report r;
  };
  std::vector<Row> rows;
  const metrics::EvalOptions eo{a.y_channel, a.crop_border};
  std::ostringstream cfg;
  cfg << "y_channel = " << (a.y_channel ? "on" : "off") << "\ncrop_border = " << a.crop_border << '\n';
  if (!a.pairs.empty()) {
    cfg << "pairs = " << a.pairs << '\n';
    write_manifest(a.out, "eval", cfg.str(), 0);
    std::ifstream in(a.pairs);
    if (!in) throw IoError("cannot open pair list " + a.pairs);
    const fs::path base = fs::path(a.pairs).parent_path();
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string sr, gt;
      if (!(ls >> sr) || sr[0] == '#') continue;
      if (!(ls >> gt)) throw InputError("pair list line lacks a ground-truth path: " + line);
      const auto srimg = data::load_image((base / sr).string());
      const auto gtimg = data::load_image((base / gt).string());
      rows.push_back({sr, metrics::evaluate(srimg.pixels, gtimg.pixels, a.geo.weighting(gtimg, gt), eo)});
    }
  } else {
    if (a.data_dir.empty()) throw InputError("eval: pass --pairs or --data");
    if (a.bicubic == !a.checkpoint.empty())
      throw InputError("eval: with --data pass exactly one of --checkpoint or --bicubic");
    std::optional<Model<float>> model;
    std::size_t s = a.scale;
    if (!a.checkpoint.empty()) {
      if (!fs::exists(a.checkpoint)) throw IoError("checkpoint not found: " + a.checkpoint);
      model.emplace(load_checkpoint<float>(a.checkpoint));
      if (s && s != model->config().scale)
        throw InputError("eval: --scale " + std::to_string(s) + " but the checkpoint is x" +
                         std::to_string(model->config().scale));
      s = model->config().scale;
      cfg << "checkpoint = " << a.checkpoint << '\n' << model->config().serialize();
    } else {
      if (!s) throw InputError("eval: --bicubic needs --scale");
      cfg << "method = bicubic\nscale = " << s << '\n';
    }
    write_manifest(a.out, "eval", cfg.str(), 0);
    const std::string manifest =
        a.manifest.empty() ? (fs::path(a.data_dir) / "manifest.txt").string() : a.manifest;
    for (const auto& pair : data::load_dataset(a.data_dir, manifest, s, false)) {
      Tensor<float> sr;
      if (model) {
        const Tensor<float> x = pair.lr.pixels.reshaped({1, 3, pair.lr.height(), pair.lr.width()});
        const auto w = a.geo.weighting(pair.hr, pair.name);
        const Tensor<float> y =
            model->infer(x, {w.row_offset / s, w.full_height / s}, {a.tile, a.overlap});
        sr = y.reshaped({3, y.dim(2), y.dim(3)});
      } else {
        sr = data::upsample_bicubic(pair.lr, s).pixels;
        for (auto& v : sr.values()) v = std::clamp(v, 0.0f, 1.0f);
      }
      rows.push_back({pair.name, metrics::evaluate(sr, pair.hr.pixels, a.geo.weighting(pair.hr, pair.name), eo)});
    }
  }
  if (rows.empty()) throw InputError("eval: no images");
  std::ostringstream csv;
  csv << "image,psnr,ssim,ws_psnr,ws_ssim\n" << std::fixed << std::setprecision(6);
  metrics::Report mean;
  for (const auto& r : rows) {
    csv << r.name << ',' << r.r.psnr << ',' << r.r.ssim << ',' << r.r.ws_psnr << ',' << r.r.ws_ssim << '\n';
    mean.psnr += r.r.psnr / rows.size();
    mean.ssim += r.r.ssim / rows.size();
    mean.ws_psnr += r.r.ws_psnr / rows.size();
    mean.ws_ssim += r.r.ws_ssim / rows.size();
  }
  csv << "mean," << mean.psnr << ',' << mean.ssim << ',' << mean.ws_psnr << ',' << mean.ws_ssim << '\n';
  std::cout << csv.str();
  if (!a.out.empty()) std::ofstream(fs::path(a.out) / "eval.csv") << csv.str();
  return kOk;
}

struct InferArgs {
  std::string checkpoint, input, out;
  std::size_t scale = 0, tile = 256, overlap = 16;
  GeometryArgs geo;
};

int cmd_infer(const InferArgs& a) {
  if (!fs::exists(a.checkpoint)) throw IoError("checkpoint not found: " + a.checkpoint);
  if (!fs::exists(a.input)) throw IoError("input not found: " + a.input);
  Model<float> model = load_checkpoint<float>(a.checkpoint);
  const std::size_t s = model.config().scale;
  if (a.scale && a.scale != s)
    throw InputError("infer: --scale " + std::to_string(a.scale) + " but the checkpoint is x" +
                     std::to_string(s));
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input)) {
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(a.input);
  }
  if (inputs.empty()) throw InputError("infer: no PNG/PPM images in " + a.input);
  write_manifest(a.out, "infer",
                 "checkpoint = " + a.checkpoint + "\ninput = " + a.input + "\ntile = " +
                     std::to_string(a.tile) + "\noverlap = " + std::to_string(a.overlap) + "\n" +
                     model.config().serialize(),
                 0);
  for (const auto& p : inputs) {
    const data::Image lr = data::load_image(p.string());
    if (!lr.full_erp && !a.geo.full_height)
      throw InputError(p.string() + " is not a 2:1 ERP image; pass --full-height/--row-offset");
    const PatchGeometry g{a.geo.row_offset, a.geo.full_height ? a.geo.full_height : lr.height()};
    const Tensor<float> y = model.infer(lr.pixels.reshaped({1, 3, lr.height(), lr.width()}), g,
                                        {a.tile, a.overlap});
    const fs::path dst = fs::path(a.out) / (p.stem().string() + "_x" + std::to_string(s) + ".png");
    data::save_image(data::Image(y.reshaped({3, y.dim(2), y.dim(3)})), dst.string(), 8);
    std::printf("%s -> %s (%zux%zu)\n", p.string().c_str(), dst.string().c_str(), y.dim(2), y.dim(3));
  }
  return kOk;
}

// ---- ablate / params / synth -----------------------------------------------------------

struct AblateArgs {
  ModelArgs model;
  std::string variants = "1;2;3;1,2;1,3;2,3;1,2,3;1,2,4;1,3,4;1,2,5;1,2,3,4";
  std::string rank_sweep = "4,8,12,16,20";
  std::string fusion = "mff";
  std::string out;
  std::string data_dir;
  std::uint64_t train_steps = 0;
  std::uint64_t seed = 0;
};

// Published #Params(M) at x4 for the variant and rank tables.
const std::map<std::string, double> kPaperVariantParams = {
    {"1", 11.73},     {"2", 7.82},      {"3", 7.82},      {"1,2", 12.41},
    {"1,3", 12.41},   {"2,3", 8.50},    {"1,2,3", 13.04}, {"1,2,4", 13.04},
    {"1,3,4", 13.04}, {"1,2,5", 13.04}, {"1,2,3,4", 13.67}};
const std::map<std::size_t, double> kPaperRankParams = {
    {4, 12.47}, {8, 13.04}, {12, 13.62}, {16, 14.19}, {20, 14.64}};

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b == std::string::npos) throw InputError("empty entry in list '" + s + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

int cmd_ablate(const AblateArgs& a) {
  const ModelConfig base = a.model.resolve();
  std::vector<BranchSet> variants;
  for (const auto& v : split_list(a.variants, ';')) {
    try {
      variants.push_back(BranchSet::parse(v));
    } catch (const ConfigError& e) {
      throw InputError(std::string("ablate: ") + e.what());
    }
  }
  std::vector<std::size_t> ranks;
  if (!a.rank_sweep.empty())
    for (const auto& r : split_list(a.rank_sweep, ',')) {
      std::size_t pos = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(r, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != r.size() || v == 0) throw InputError("ablate: malformed rank '" + r + "'");
      ranks.push_back(v);
    }
  std::vector<Fusion> fusions;
  if (a.fusion == "mff" || a.fusion == "both") fusions.push_back(Fusion::mff);
  if (a.fusion == "addition" || a.fusion == "both") fusions.push_back(Fusion::addition);
  if (fusions.empty()) throw InputError("ablate: --fusion must be mff, addition or both");

  std::optional<std::vector<data::ErpPair>> pairs;
  if (a.train_steps) {
    if (a.data_dir.empty()) throw InputError("ablate: --train-steps needs --data");
    pairs = data::load_dataset(a.data_dir, (fs::path(a.data_dir) / "manifest.txt").string(), base.scale);
  }
  write_manifest(a.out, "ablate",
                 base.serialize() + "variants = " + a.variants + "\nrank_sweep = " + a.rank_sweep +
                     "\nfusion_mode = " + a.fusion + "\ntrain_steps = " + std::to_string(a.train_steps) + "\n",
                 a.seed);

  std::ostringstream csv;
  csv << "table,variant,rank,fusion,params,params_m,paper_params_m,rel_dev,macs_g_64,val_ws_psnr\n";
  auto emit = [&](const std::string& table, const ModelConfig& cfg, std::optional<double> paper) {
    const double p = static_cast<double>(count_params(cfg));
    const double macs = static_cast<double>(multiply_adds(cfg, 64, 64));
    csv << table << ",\"" << cfg.branches.str() << "\"," << cfg.rank << ',' << fusion_name(cfg.fusion)
        << ',' << static_cast<std::uint64_t>(p) << ',' << std::fixed << std::setprecision(4) << p / 1e6 << ',';
    if (paper) csv << *paper << ',' << std::showpos << (p / 1e6 - *paper) / *paper << std::noshowpos;
    else csv << ',';
    csv << ',' << std::setprecision(3) << macs / 1e9 << ',';
    if (pairs) {
      training::TrainOptions opt;
      opt.steps = a.train_steps;
      opt.seed = a.seed;
      opt.val_every = a.train_steps;
      const auto split = training::make_split(*pairs, pairs->size() > 1 ? std::max<std::size_t>(1, pairs->size() / 8) : 0, opt, cfg.scale);
      training::Trainer t(cfg, opt);
      const auto res = t.run(split);
      if (res.final_val) csv << std::setprecision(4) << res.final_val->ws_psnr;
    }
    csv << std::defaultfloat << '\n';
    std::cerr << "." << std::flush;
  };
  const bool paper_widths = a.model.preset == "paper" && base.scale == 4;
  for (const auto& v : variants)
    for (Fusion f : fusions) {
      ModelConfig cfg = base;
      cfg.branches = v;
      cfg.fusion = f;
      const auto it = kPaperVariantParams.find(v.str());
      emit("variants", cfg, paper_widths && f == Fusion::mff && it != kPaperVariantParams.end()
                                ? std::optional<double>(it->second) : std::nullopt);
    }
  for (std::size_t r : ranks) {
    ModelConfig cfg = base;
    cfg.rank = r;
    const auto it = kPaperRankParams.find(r);
    emit("rank", cfg, paper_widths && base.fusion == Fusion::mff && it != kPaperRankParams.end()
                          ? std::optional<double>(it->second) : std::nullopt);
  }
  std::cerr << '\n';
  std::cout << csv.str();
  if (!a.out.empty()) std::ofstream(fs::path(a.out) / "ablate.csv") << csv.str();
  return kOk;
}

int cmd_params(const ModelArgs& m, std::size_t h, std::size_t w) {
  const ModelConfig cfg = m.resolve();
  Model<float> model(cfg, 0);
  std::printf("params %llu (%.4f M)\nmulti-adds at %zux%zu: %llu (%.3f G)\n",
              static_cast<unsigned long long>(model.param_count()), model.param_count() / 1e6, h, w,
              static_cast<unsigned long long>(model.macs(h, w)), model.macs(h, w) / 1e9);
  return kOk;
}

int cmd_synth(const std::string& out, std::size_t count, std::size_t height, std::uint64_t seed) {
  if (count == 0) throw InputError("synth: --count must be positive");
  write_manifest(out, "synth", "count = " + std::to_string(count) + "\nheight = " + std::to_string(height) + "\n", seed);
  data::write_synthetic_dataset(out, count, height, seed);
  std::printf("wrote %zu images (%zux%zu) to %s\n", count, height, 2 * height, out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_command_line += (i ? " " : "") + std::string(argv[i]);
  if (const char* env = std::getenv("MDDN_NUM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) linalg::set_threads(n);
  }

  CLI::App app{"MDDN omnidirectional image super-resolution"};
  app.require_subcommand(1);

  DistmapArgs dm;
  auto* c_dm = app.add_subcommand("distmap", "render the latitude weight map");
  c_dm->add_option("--height", dm.height, "rows")->required();
  c_dm->add_option("--width", dm.width, "columns (default 2*height)");
  c_dm->add_option("--row-offset", dm.row_offset, "global row of the first row");
  c_dm->add_option("--full-height", dm.full_height, "full ERP height (default height)");
  c_dm->add_option("--out", dm.out, "output directory");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference checks of every backward rule");
  c_gc->add_option("--module", gc.module, "all|numerics|sampling|layers|model");
  c_gc->add_option("--dtype", gc.dtype, "f64");
  c_gc->add_option("--inject-fault", gc.fault, "corrupt the analytic gradient of one op");
  c_gc->add_option("--out", gc.out, "directory for manifest.txt");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "train a model");
  tr.model.add(c_tr, "tiny");
  c_tr->add_option("--data", tr.data_dir, "dataset directory")->required();
  c_tr->add_option("--manifest", tr.manifest, "manifest (default DATA/manifest.txt)");
  c_tr->add_option("--out", tr.out, "output directory")->required();
  c_tr->add_option("--resume", tr.resume, "checkpoint to continue from");
  c_tr->add_option("--val-images", tr.val_images, "held-out images (default n/8)");
  c_tr->add_flag("--no-cache", tr.no_cache, "do not write cache/x{s}/");
  c_tr->add_option("--steps", tr.steps, "iterations (tiny 2000, paper 500000)");
  c_tr->add_option("--seed", tr.seed);
  c_tr->add_option("--batch", tr.batch);
  c_tr->add_option("--patch", tr.patch, "HR patch size (tiny 32, paper 256)");
  c_tr->add_option("--lr", tr.lr, "base learning rate (tiny 1e-3, paper 2e-4)");
  c_tr->add_option("--clip", tr.clip, "gradient-norm clip (0 = off)");
  c_tr->add_option("--val-every", tr.val_every);
  c_tr->add_option("--log-every", tr.log_every);
  c_tr->add_option("--val-patches", tr.val_patches);
  c_tr->add_option("--val-patch", tr.val_patch, "HR validation patch size (default --patch)");
  c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "extra step_N.ckpt snapshots");
  c_tr->add_flag("--paper-schedule", tr.paper_schedule, "unscaled 500k-iteration milestones");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "PSNR / SSIM / WS-PSNR / WS-SSIM report");
  c_ev->add_option("--pairs", ev.pairs, "file of 'sr gt' path pairs");
  c_ev->add_option("--data", ev.data_dir, "dataset of HR images (degraded on the fly)");
  c_ev->add_option("--manifest", ev.manifest);
  c_ev->add_option("--checkpoint", ev.checkpoint);
  c_ev->add_flag("--bicubic", ev.bicubic, "evaluate bicubic upsampling");
  c_ev->add_option("--scale", ev.scale);
  c_ev->add_flag("--y-channel", ev.y_channel, "BT.601 luma");
  c_ev->add_option("--crop-border", ev.crop_border);
  c_ev->add_option("--tile", ev.tile);
  c_ev->add_option("--overlap", ev.overlap);
  c_ev->add_option("--out", ev.out);
  ev.geo.add(c_ev);

  InferArgs in;
  auto* c_in = app.add_subcommand("infer", "upscale LR images");
  c_in->add_option("--checkpoint", in.checkpoint)->required();
  c_in->add_option("--input", in.input, "image or directory")->required();
  c_in->add_option("--out", in.out)->required();
  c_in->add_option("--scale", in.scale, "must match the checkpoint");
  c_in->add_option("--tile", in.tile);
  c_in->add_option("--overlap", in.overlap);
  in.geo.add(c_in);

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "parameter accounting of ablation variants");
  ab.model.add(c_ab, "paper", false);
  c_ab->add_option("--variants", ab.variants, "';'-separated branch sets");
  c_ab->add_option("--rank-sweep", ab.rank_sweep, "','-separated ranks");
  c_ab->add_option("--fusion", ab.fusion, "mff|addition|both");
  c_ab->add_option("--out", ab.out);
  c_ab->add_option("--data", ab.data_dir, "dataset for optional smoke training");
  c_ab->add_option("--train-steps", ab.train_steps, "smoke-train each variant");
  c_ab->add_option("--seed", ab.seed);

  ModelArgs pm;
  std::size_t ph = 64, pw = 64;
  auto* c_pm = app.add_subcommand("params", "parameter count and multiply-adds");
  pm.add(c_pm, "paper");
  c_pm->add_option("--input-height", ph);
  c_pm->add_option("--input-width", pw);

  std::string sy_out;
  std::size_t sy_count = 10, sy_height = 64;
  std::uint64_t sy_seed = 0;
  auto* c_sy = app.add_subcommand("synth", "write a synthetic ERP dataset");
  c_sy->add_option("--out", sy_out)->required();
  c_sy->add_option("--count", sy_count);
  c_sy->add_option("--height", sy_height);
  c_sy->add_option("--seed", sy_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*c_dm) return cmd_distmap(dm);
    if (*c_gc) return cmd_gradcheck(gc);
    if (*c_tr) return cmd_train(tr);
    if (*c_ev) return cmd_eval(ev);
    if (*c_in) return cmd_infer(in);
    if (*c_ab) return cmd_ablate(ab);
    if (*c_pm) return cmd_params(pm, ph, pw);
    if (*c_sy) return cmd_synth(sy_out, sy_count, sy_height, sy_seed);
  } catch (const training::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFail;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
