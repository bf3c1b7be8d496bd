#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

namespace pvseg {

enum class SelectionMode { kStochastic, kTopK };

/// How many past frames the memory selector keeps. `global_count` (x) counts
/// older frames, `local_count` (y) counts recent ones; together they form the
/// per-frame budget z. The prompt frame is always kept on top of that budget.
struct SelectionConfig {
  int global_count = 3;
  int local_count = 3;
  int local_window = 6;  ///< most recent ring entries forming the local set
  SelectionMode mode = SelectionMode::kTopK;

  int total() const { return global_count + local_count; }
  void validate() const;
};

struct EncoderConfig {
  std::vector<int64_t> channels{32, 64, 128, 256};
  std::vector<int64_t> strides{4, 8, 16, 32};
  int64_t blocks_per_stage = 2;

  int64_t final_channels() const { return channels.back(); }
  int64_t final_stride() const { return strides.back(); }
  void validate() const;
};

struct ModelConfig {
  EncoderConfig encoder;
  int64_t temporal_window = 4;

  int64_t memory_capacity = 20;
  int64_t memory_blocks = 4;
  int64_t memory_heads = 4;
  int64_t memory_mlp_dim = 512;
  int64_t max_temporal_offset = 7;  ///< offsets beyond this share one embedding
  double rope_theta = 10000.0;

  int64_t mpg_tokens = 3;  ///< 0 disables the memory prompt generator
  bool mpg_masked = true;  ///< false = plain cross-attention ablation

  int64_t decoder_dim = 128;
  int64_t decoder_depth = 2;
  int64_t decoder_heads = 4;
  int64_t decoder_mlp_dim = 512;
  int64_t num_multimask = 3;

  SelectionConfig selection;

  /// Memory entries carry as many channels as the final encoder stage so that
  /// similarity against the current frame is a plain dot product.
  int64_t memory_channels() const { return encoder.final_channels(); }
  void validate() const;
};

/// Preset sized for 64x64 clips on a single CPU core. The final stage stays
/// at stride 8 so memory masks keep an 8x8 grid.
ModelConfig desk_model_config();

void to_json(nlohmann::json& j, const SelectionConfig& c);
void from_json(const nlohmann::json& j, SelectionConfig& c);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace pvseg
