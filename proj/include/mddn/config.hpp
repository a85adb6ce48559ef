#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mddn {

enum class Fusion { mff, addition };

// Extractor levels of a multi-level layer. Level 1 is the deformable
// cross-attention branch, level i >= 2 a deformable convolution at dilation i.
class BranchSet {
 public:
  BranchSet() : levels_{1, 2, 3} {}
  explicit BranchSet(std::vector<int> levels);

  // "1,2,3" -> {1,2,3}. Throws ConfigError on malformed input.
  static BranchSet parse(std::string_view text);

  const std::vector<int>& levels() const noexcept { return levels_; }
  std::size_t size() const noexcept { return levels_.size(); }
  bool contains(int level) const;
  std::string str() const;

  friend bool operator==(const BranchSet&, const BranchSet&) = default;

 private:
  std::vector<int> levels_;  // sorted, unique, all >= 1
};

struct ModelConfig {
  std::size_t channels = 156;
  std::size_t n_blocks = 6;
  std::size_t n_layers = 6;  // layers per block
  std::size_t rank = 8;
  BranchSet branches;
  std::size_t window = 8;
  std::size_t heads = 6;
  std::size_t scale = 4;
  bool ffn = true;
  Fusion fusion = Fusion::mff;
  std::size_t offset_width = 64;  // hidden width of the offset networks
  bool zero_init = true;          // zero-init residual outputs and final offset layers

  // Throws ConfigError when the combination is invalid.
  void validate() const;

  std::size_t upsample_stages() const;

  // Flat "key = value" lines, one entry per line, in a fixed order.
  std::string serialize() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ModelConfig tiny_preset();
ModelConfig paper_preset();

// Parses "key = value" lines ('#' starts a comment). Keys not in the
// model schema are returned to the caller through `extra` if it is non-null,
// otherwise they are a ConfigError.
ModelConfig parse_model_config(std::string_view text,
                               std::map<std::string, std::string>* extra = nullptr);

// Applies one key to a config; returns false if the key is not a model key.
bool apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value);

// Splits "key = value" text into ordered pairs; throws ConfigError on syntax errors.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

std::string fusion_name(Fusion f);

}  // namespace mddn
