#include "mddn/training.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "mddn/metrics.hpp"

namespace mddn::training {

namespace fs = std::filesystem;

template <typename T>
double l1_loss(const Tensor<T>& sr, const Tensor<T>& gt, Tensor<T>* grad) {
  if (sr.shape() != gt.shape())
    throw InputError("l1_loss: shapes " + shape_str(sr.shape()) + " and " +
                     shape_str(gt.shape()) + " differ");
  if (sr.numel() == 0) throw InputError("l1_loss: empty tensors");
  const double n = static_cast<double>(sr.numel());
  if (grad) *grad = Tensor<T>(sr.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < sr.numel(); ++i) {
    const double d = static_cast<double>(sr[i]) - static_cast<double>(gt[i]);
    s += std::abs(d);
    if (grad) (*grad)[i] = static_cast<T>(d > 0 ? 1.0 / n : d < 0 ? -1.0 / n : 0.0);
  }
  return s / n;
}

template <typename T>
Adam<T>::Adam(ParamList<T> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  for (auto* p : params_)
    if (p->grad.shape() != p->value.shape())
      throw ContractError("adam: parameter '" + p->name + "' has no gradient");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double mh = static_cast<double>(m[i]) / bc1;
      const double vh = static_cast<double>(v[i]) / bc2;
      p.value[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + opt_.eps));
    }
    p.zero_grad();
  }
}

template <typename T>
std::vector<NamedTensor> Adam<T>::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < params_.size(); ++k) out.push_back(to_named("m/" + params_[k]->name, m_[k]));
  for (std::size_t k = 0; k < params_.size(); ++k) out.push_back(to_named("v/" + params_[k]->name, v_[k]));
  return out;
}

template <typename T>
void Adam<T>::load_state(const std::vector<NamedTensor>& moments, std::uint64_t steps) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : moments) by_name[t.name] = &t;
  if (by_name.size() != 2 * params_.size())
    throw ConfigError("adam: expected " + std::to_string(2 * params_.size()) +
                      " moment tensors, found " + std::to_string(by_name.size()));
  for (std::size_t k = 0; k < params_.size(); ++k)
    for (auto [prefix, dst] : {std::pair{"m/", &m_[k]}, std::pair{"v/", &v_[k]}}) {
      const std::string name = prefix + params_[k]->name;
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("adam: missing moment tensor '" + name + "'");
      if (it->second->shape != params_[k]->value.shape())
        throw ConfigError("adam: moment tensor '" + name + "' has shape " +
                          shape_str(it->second->shape));
      *dst = from_named<T>(*it->second);
    }
  t_ = steps;
}

template double l1_loss<float>(const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template double l1_loss<double>(const Tensor<double>&, const Tensor<double>&, Tensor<double>*);
template class Adam<float>;
template class Adam<double>;

std::vector<std::uint64_t> scaled_milestones(const Schedule& s) {
  std::vector<std::uint64_t> out;
  for (auto m : s.milestones) {
    if (s.total == s.paper_total) {
      out.push_back(m);
    } else {
      const long double f = static_cast<long double>(m) * s.total / s.paper_total;
      out.push_back(static_cast<std::uint64_t>(std::llround(f)));
    }
  }
  return out;
}

double lr_schedule(std::uint64_t step, const Schedule& s) {
  double lr = s.base;
  for (auto m : scaled_milestones(s))
    if (step >= m) lr *= 0.5;
  return lr;
}

// ---- options ----------------------------------------------------------------------------

namespace {

template <typename V>
V parse_number(const std::string& key, const std::string& v) {
  V out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("train: '" + key + "' has an invalid value '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("train: '" + key + "' expects on/off, got '" + v + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Options that change the trajectory; a resumed run must agree on all of them.
std::map<std::string, std::string> trajectory_keys(const TrainOptions& o) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : parse_key_values(serialize(o)))
    if (k != "out_dir" && k != "checkpoint_every" && k != "log_every") out[k] = v;
  return out;
}

Tensor<float> stack(const std::vector<const Tensor<float>*>& items) {
  const Shape& s = items.front()->shape();
  Tensor<float> out({items.size(), s[0], s[1], s[2]});
  const std::size_t n = items.front()->numel();
  for (std::size_t i = 0; i < items.size(); ++i)
    std::copy_n(items[i]->data(), n, out.data() + i * n);
  return out;
}

Tensor<float> unbatch(const Tensor<float>& t, std::size_t i) {
  const std::size_t n = t.numel() / t.dim(0);
  Tensor<float> out({t.dim(1), t.dim(2), t.dim(3)});
  std::copy_n(t.data() + i * n, n, out.data());
  return out;
}

}  // namespace

bool apply_train_key(TrainOptions& o, const std::string& key, const std::string& v) {
  if (key == "steps") o.steps = parse_number<std::uint64_t>(key, v);
  else if (key == "batch") o.batch = parse_number<std::size_t>(key, v);
  else if (key == "patch") o.patch = parse_number<std::size_t>(key, v);
  else if (key == "lr") o.lr = parse_number<double>(key, v);
  else if (key == "paper_schedule") o.paper_schedule = parse_bool(key, v);
  else if (key == "seed") o.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "val_every") o.val_every = parse_number<std::uint64_t>(key, v);
  else if (key == "log_every") o.log_every = parse_number<std::uint64_t>(key, v);
  else if (key == "val_patches") o.val_patches = parse_number<std::size_t>(key, v);
  else if (key == "val_patch") o.val_patch = parse_number<std::size_t>(key, v);
  else if (key == "clip") o.clip = parse_number<double>(key, v);
  else if (key == "out_dir") o.out_dir = v;
  else if (key == "checkpoint_every") o.checkpoint_every = parse_number<std::uint64_t>(key, v);
  else return false;
  return true;
}

std::string serialize(const TrainOptions& o) {
  std::ostringstream os;
  os << "steps = " << o.steps << '\n'
     << "batch = " << o.batch << '\n'
     << "patch = " << o.patch << '\n'
     << "lr = " << fmt_double(o.lr) << '\n'
     << "paper_schedule = " << (o.paper_schedule ? "on" : "off") << '\n'
     << "seed = " << o.seed << '\n'
     << "val_every = " << o.val_every << '\n'
     << "log_every = " << o.log_every << '\n'
     << "val_patches = " << o.val_patches << '\n'
     << "val_patch = " << o.val_patch << '\n'
     << "clip = " << fmt_double(o.clip) << '\n'
     << "checkpoint_every = " << o.checkpoint_every << '\n';
  if (!o.out_dir.empty()) os << "out_dir = " << o.out_dir << '\n';
  return os.str();
}

// ---- split and validation ---------------------------------------------------------------

Split make_split(const std::vector<data::ErpPair>& pairs, std::size_t n_val,
                 const TrainOptions& opt, std::size_t scale) {
  if (pairs.empty()) throw InputError("training: empty dataset");
  if (n_val >= pairs.size() && n_val > 0)
    throw InputError("training: " + std::to_string(n_val) + " validation images leave none for training");
  Split s;
  const std::size_t n_train = pairs.size() - n_val;
  for (std::size_t i = 0; i < n_train; ++i) s.train.push_back(&pairs[i]);
  std::vector<const data::ErpPair*> val_src;
  for (std::size_t i = n_train; i < pairs.size(); ++i) val_src.push_back(&pairs[i]);
  if (val_src.empty()) val_src = s.train;
  const std::size_t P = opt.val_patch ? opt.val_patch : opt.patch;
  for (std::size_t i = 0; i < opt.val_patches; ++i) {
    const auto* img = val_src[i % val_src.size()];
    s.val.push_back(data::sample_patch(img->hr, img->lr, P, scale,
                                       splitmix64(opt.seed ^ 0x76616c6964617465ULL) + i));
  }
  return s;
}

Validation validate(Model<float>& model, const std::vector<data::PatchPair>& val) {
  Validation out;
  if (val.empty()) return out;
  for (const auto& p : val) {
    const std::size_t s = p.scale;
    const metrics::Weighting w{p.full_hr_height, p.hr_row_offset, false};
    const Tensor<float> lr = p.lr.reshaped({1, 3, p.lr.dim(1), p.lr.dim(2)});
    Tensor<float> sr = model.forward(lr, {{p.hr_row_offset / s, p.full_hr_height / s}});
    for (auto& v : sr.values()) v = std::clamp(v, 0.0f, 1.0f);
    const Tensor<float> sr3 = unbatch(sr, 0);
    out.psnr += metrics::psnr(sr3, p.hr);
    out.ws_psnr += metrics::ws_psnr(sr3, p.hr, w);
    Tensor<float> bic = data::upsample_bicubic(data::Image(p.lr), s).pixels;
    for (auto& v : bic.values()) v = std::clamp(v, 0.0f, 1.0f);
    out.bicubic_psnr += metrics::psnr(bic, p.hr);
    out.bicubic_ws_psnr += metrics::ws_psnr(bic, p.hr, w);
  }
  const double n = static_cast<double>(val.size());
  out.psnr /= n;
  out.ws_psnr /= n;
  out.bicubic_psnr /= n;
  out.bicubic_ws_psnr /= n;
  return out;
}

// ---- trainer ----------------------------------------------------------------------------

Trainer::Trainer(const ModelConfig& cfg, TrainOptions opt)
    : opt_(std::move(opt)), model_(cfg, opt_.seed), adam_(model_.params()) {
  if (opt_.batch == 0 || opt_.patch == 0 || opt_.steps == 0)
    throw ConfigError("train: steps, batch and patch must be positive");
  if (opt_.patch % cfg.scale)
    throw ConfigError("train: patch " + std::to_string(opt_.patch) +
                      " is not divisible by the scale " + std::to_string(cfg.scale));
  schedule_.base = opt_.lr;
  schedule_.total = opt_.paper_schedule ? schedule_.paper_total : opt_.steps;
}

std::vector<std::uint64_t> Trainer::batch_seeds(std::uint64_t seed, std::uint64_t step,
                                                std::size_t batch) {
  std::vector<std::uint64_t> out(batch);
  const std::uint64_t base = splitmix64(seed ^ splitmix64(step));
  for (std::size_t i = 0; i < batch; ++i) out[i] = splitmix64(base + i);
  return out;
}

void Trainer::save(const std::string& path) {
  TrainRecord rec;
  rec.step = step_;
  rec.best_ws_psnr = best_ws_psnr_;
  rec.seed = opt_.seed;
  std::ostringstream meta;
  for (const auto& [k, v] : trajectory_keys(opt_)) meta << k << " = " << v << '\n';
  rec.meta = meta.str();
  rec.moments = adam_.state();
  save_checkpoint(model_, path, &rec);
}

void Trainer::resume(const std::string& checkpoint) {
  CheckpointData data = read_checkpoint(checkpoint);
  if (!data.train) throw ConfigError(checkpoint + " holds no training state");
  if (parse_model_config(data.config_text) != model_.config())
    throw ConfigError(checkpoint + " was written for a different model configuration");
  TrainOptions stored;
  for (const auto& [k, v] : parse_key_values(data.train->meta)) apply_train_key(stored, k, v);
  const auto a = trajectory_keys(stored), b = trajectory_keys(opt_);
  for (const auto& [k, v] : b)
    if (a.count(k) && a.at(k) != v)
      throw ConfigError("resume: option '" + k + "' is " + v + " but the checkpoint used " + a.at(k));
  assign_parameters(model_, data.tensors);
  adam_.load_state(data.train->moments, data.train->step);
  step_ = data.train->step;
  best_ws_psnr_ = data.train->best_ws_psnr;
}

TrainResult Trainer::run(const Split& split, const std::function<void(const StepLog&)>& on_log) {
  if (split.train.empty()) throw InputError("train: no training images");
  const std::size_t s = model_.config().scale;
  const std::size_t P = opt_.patch;
  std::ofstream csv;
  if (!opt_.out_dir.empty()) {
    fs::create_directories(opt_.out_dir);
    const fs::path log_path = fs::path(opt_.out_dir) / "train_log.csv";
    const bool fresh = step_ == 0 || !fs::exists(log_path);
    csv.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot write " + log_path.string());
    if (fresh) csv << "step,loss,lr,val_psnr,val_ws_psnr\n";
  }
  auto params = model_.params();
  TrainResult res;
  double loss_acc = 0.0;
  std::uint64_t loss_n = 0;
  while (step_ < opt_.steps) {
    const double lr = lr_schedule(step_, schedule_);
    const auto seeds = batch_seeds(opt_.seed, step_, opt_.batch);
    std::vector<data::PatchPair> batch;
    for (auto seed : seeds) {
      Rng pick(seed);
      const auto* img = split.train[pick() % split.train.size()];
      batch.push_back(data::sample_patch(img->hr, img->lr, P, s, pick()));
    }
    std::vector<const Tensor<float>*> lr_items, hr_items;
    std::vector<PatchGeometry> geo;
    for (const auto& p : batch) {
      lr_items.push_back(&p.lr);
      hr_items.push_back(&p.hr);
      geo.push_back({p.hr_row_offset / s, p.full_hr_height / s});
    }
    const Tensor<float> x = stack(lr_items), y = stack(hr_items);
    const Tensor<float> sr = model_.forward(x, geo);
    Tensor<float> dy;
    const double loss = l1_loss(sr, y, &dy);
    for (auto* p : params) p->zero_grad();
    model_.backward(dy);
    double sq = 0.0;
    for (auto* p : params)
      for (float g : p->grad.values()) sq += static_cast<double>(g) * g;
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
      std::ostringstream msg;
      msg << "non-finite " << (std::isfinite(loss) ? "gradient" : "loss") << " at step " << step_
          << "; batch seeds:";
      for (auto seed : seeds) msg << ' ' << seed;
      if (!opt_.out_dir.empty()) {
        std::ofstream dump(fs::path(opt_.out_dir) / "nan_dump.txt");
        dump << msg.str() << '\n' << "loss = " << loss << '\n' << "grad_norm = " << gnorm << '\n';
      }
      throw NumericError(msg.str());
    }
    if (opt_.clip > 0.0 && gnorm > opt_.clip) {
      const float f = static_cast<float>(opt_.clip / gnorm);
      for (auto* p : params)
        for (auto& g : p->grad.values()) g *= f;
    }
    adam_.step(lr);
    ++step_;
    loss_acc += loss;
    ++loss_n;

    const bool do_val = opt_.val_every && (step_ % opt_.val_every == 0 || step_ == opt_.steps);
    const bool do_log = do_val || (opt_.log_every && step_ % opt_.log_every == 0);
    StepLog row{step_, loss_acc / static_cast<double>(loss_n), lr, gnorm, {}, {}};
    if (do_val && !split.val.empty()) {
      const Validation v = validate(model_, split.val);
      row.val_psnr = v.psnr;
      row.val_ws_psnr = v.ws_psnr;
      res.final_val = v;
      if (v.ws_psnr > best_ws_psnr_) {
        best_ws_psnr_ = v.ws_psnr;
        if (!opt_.out_dir.empty()) save((fs::path(opt_.out_dir) / "best.ckpt").string());
      }
    }
    if (!opt_.out_dir.empty()) {
      if (do_val || step_ == opt_.steps) save((fs::path(opt_.out_dir) / "latest.ckpt").string());
      if (opt_.checkpoint_every && step_ % opt_.checkpoint_every == 0)
        save((fs::path(opt_.out_dir) / ("step_" + std::to_string(step_) + ".ckpt")).string());
    }
    if (do_log) {
      res.log.push_back(row);
      if (csv) {
        csv << row.step << ',' << std::setprecision(9) << row.loss << ',' << row.lr << ',';
        if (row.val_psnr) csv << *row.val_psnr;
        csv << ',';
        if (row.val_ws_psnr) csv << *row.val_ws_psnr;
        csv << '\n' << std::flush;
      }
      if (on_log) on_log(row);
      loss_acc = 0.0;
      loss_n = 0;
    }
  }
  res.best_ws_psnr = best_ws_psnr_;
  res.steps_done = step_;
  return res;
}

}  // namespace mddn::training
