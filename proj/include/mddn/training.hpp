#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mddn/data.hpp"
#include "mddn/model.hpp"

namespace mddn::training {

// Non-finite loss or gradient during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mean absolute error. grad (if given) receives sign(sr - gt) / count, sign(0) = 0.
template <typename T>
double l1_loss(const Tensor<T>& sr, const Tensor<T>& gt, Tensor<T>* grad = nullptr);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(ParamList<T> params, AdamOptions opt = {});

  // Bias-corrected update with learning rate lr, then zeroes every gradient.
  // A gradient whose shape does not match its parameter is a ContractError.
  void step(double lr);

  std::uint64_t steps() const noexcept { return t_; }
  // "m/<param>" and "v/<param>" tensors.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& moments, std::uint64_t steps);

 private:
  ParamList<T> params_;
  AdamOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

struct Schedule {
  double base = 2e-4;
  std::vector<std::uint64_t> milestones{250000, 400000, 450000, 475000};
  std::uint64_t paper_total = 500000;  // iteration count the milestones refer to
  std::uint64_t total = 500000;        // configured run length; milestones scale with it
};

// base * 0.5^(number of scaled milestones <= step).
double lr_schedule(std::uint64_t step, const Schedule& s = {});
std::vector<std::uint64_t> scaled_milestones(const Schedule& s);

struct TrainOptions {
  std::uint64_t steps = 5000;
  std::size_t batch = 4;
  std::size_t patch = 64;  // HR patch side
  double lr = 2e-4;
  bool paper_schedule = false;  // keep the 500k-iteration milestones unscaled
  std::uint64_t seed = 0;
  std::uint64_t val_every = 250;
  std::uint64_t log_every = 50;
  std::size_t val_patches = 16;
  std::size_t val_patch = 0;  // 0: same as patch
  double clip = 0.0;          // global gradient-norm clip; 0 disables it
  std::string out_dir;        // checkpoints and log; empty writes nothing
  std::uint64_t checkpoint_every = 0;  // extra step_<n>.ckpt snapshots
};

// Parses/produces "key = value" lines for the keys of TrainOptions.
bool apply_train_key(TrainOptions& opt, const std::string& key, const std::string& value);
std::string serialize(const TrainOptions& opt);

struct StepLog {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::optional<double> val_psnr, val_ws_psnr;
};

struct Validation {
  double psnr = 0.0, ws_psnr = 0.0;
  double bicubic_psnr = 0.0, bicubic_ws_psnr = 0.0;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::optional<Validation> final_val;
  double best_ws_psnr = 0.0;
  std::uint64_t steps_done = 0;
};

// Training/validation split of a dataset; validation patches are fixed by the seed.
struct Split {
  std::vector<const data::ErpPair*> train;
  std::vector<data::PatchPair> val;
};

// The last n_val images are held out (n_val 0 validates on training images).
Split make_split(const std::vector<data::ErpPair>& pairs, std::size_t n_val,
                 const TrainOptions& opt, std::size_t scale);

// Model output and bicubic baseline on fixed validation patches.
Validation validate(Model<float>& model, const std::vector<data::PatchPair>& val);

class Trainer {
 public:
  // Parameters are initialised from opt.seed.
  Trainer(const ModelConfig& cfg, TrainOptions opt);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  // Restores parameters, optimizer moments and loop state. The stored
  // training options must agree with this trainer's (ConfigError otherwise).
  void resume(const std::string& checkpoint);

  // Runs until opt.steps. on_log receives each logged row.
  TrainResult run(const Split& split, const std::function<void(const StepLog&)>& on_log = {});

  Model<float>& model() { return model_; }
  std::uint64_t step() const noexcept { return step_; }

  // Seeds of the batch drawn at a step (derived from seed and step only).
  static std::vector<std::uint64_t> batch_seeds(std::uint64_t seed, std::uint64_t step,
                                                std::size_t batch);

  void save(const std::string& path);

 private:
  TrainOptions opt_;
  Model<float> model_;
  Adam<float> adam_;
  Schedule schedule_;
  std::uint64_t step_ = 0;
  double best_ws_psnr_ = 0.0;
};

}  // namespace mddn::training
