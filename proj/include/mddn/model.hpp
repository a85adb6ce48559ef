#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mddn/config.hpp"
#include "mddn/layers.hpp"

namespace mddn {

using layers::PatchGeometry;

struct TileOptions {
  std::size_t tile = 256;    // LR pixels per tile side
  std::size_t overlap = 16;  // LR pixels shared by neighbouring tiles
};

// Shallow conv -> blocks -> conv -> D3C (+ global residual) -> pixel-shuffle head.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Unclamped output used in training. geometry: one entry shared by the
  // batch or one per item.
  Tensor<T> forward(const Tensor<T>& x, const std::vector<PatchGeometry>& geometry);
  // Returns the input cotangent; parameter gradients accumulate.
  Tensor<T> backward(const Tensor<T>& dy);

  // The three stages of forward, exposed for probes. backward() follows the
  // most recent forward().
  Tensor<T> shallow(const Tensor<T>& x);
  Tensor<T> body(const Tensor<T>& f0, const Tensor<T>& dmap);
  Tensor<T> reconstruct(const Tensor<T>& f);

  // Clamped to [0, 1]; inputs larger than the tile are processed in feathered tiles.
  Tensor<T> infer(const Tensor<T>& x, PatchGeometry geometry, TileOptions tiles = {});

  ParamList<T> params();
  std::uint64_t param_count();
  std::uint64_t macs(std::size_t H, std::size_t W) const;

  std::vector<layers::Mddb<T>>& blocks() { return blocks_; }

 private:
  ModelConfig cfg_;
  layers::Conv2d<T> head_;
  std::vector<layers::Mddb<T>> blocks_;
  layers::Conv2d<T> body_conv_;
  layers::DeformConv<T> body_d3c_;
  std::vector<layers::Conv2d<T>> up_;
  layers::Conv2d<T> tail_;
};

std::uint64_t count_params(const ModelConfig& cfg);
std::uint64_t multiply_adds(const ModelConfig& cfg, std::size_t input_h, std::size_t input_w);

// ---- checkpoints -----------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened; f32 entries round-trip exactly
};

// Optimizer and loop state stored after the parameter table.
struct TrainRecord {
  std::uint64_t step = 0;
  double best_ws_psnr = 0.0;
  std::uint64_t seed = 0;
  std::string meta;                  // key = value lines of training options
  std::vector<NamedTensor> moments;  // "m/<param>" and "v/<param>"
};

struct CheckpointData {
  std::string config_text;
  std::vector<NamedTensor> tensors;
  std::optional<TrainRecord> train;
};

void write_checkpoint(const std::string& path, const CheckpointData& data);
// Throws IoError when unreadable, FormatError (with byte offset) when malformed.
CheckpointData read_checkpoint(const std::string& path);

template <typename T>
NamedTensor to_named(const std::string& name, const Tensor<T>& t);
template <typename T>
Tensor<T> from_named(const NamedTensor& nt);

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path, const TrainRecord* train = nullptr);

// Rebuilds the model from the stored config and fills every parameter.
// Shape mismatches and missing or unexpected tensors are ConfigErrors naming
// the tensor. When expected is given, a differing stored config is a ConfigError.
template <typename T>
Model<T> load_checkpoint(const std::string& path, TrainRecord* train = nullptr,
                         const ModelConfig* expected = nullptr);

// Copies stored tensors into an existing model.
template <typename T>
void assign_parameters(Model<T>& model, const std::vector<NamedTensor>& tensors);

}  // namespace mddn
