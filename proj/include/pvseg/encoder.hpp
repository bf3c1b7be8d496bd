#pragma once

#include <vector>

#include <torch/torch.h>

#include "pvseg/model_config.hpp"

namespace pvseg {

/// Per-stage spatial features S_l, each [c_l, h_l, w_l] (or batched [B, c_l, h_l, w_l]).
struct FeaturePyramid {
  std::vector<torch::Tensor> stages;
};

class ResidualBlockImpl : public torch::nn::Module {
public:
  explicit ResidualBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Hierarchical conv encoder: a strided 2D stem followed by one stage per
/// configured stride, each a transition conv plus residual blocks.
class ImageEncoderImpl : public torch::nn::Module {
public:
  explicit ImageEncoderImpl(EncoderConfig config);

  /// frame: [3, h, w] or [B, 3, h, w]; h and w must be divisible by the final
  /// stride. Stage tensors keep the batch dimension iff the input had one.
  FeaturePyramid forward(const torch::Tensor& frame);

  const EncoderConfig& config() const { return config_; }
  int64_t num_stages() const { return static_cast<int64_t>(config_.channels.size()); }

  /// Parameters of stage `l` (0-based); the stem is reported as part of stage 0.
  std::vector<torch::Tensor> stage_parameters(int64_t l);

private:
  EncoderConfig config_;
  torch::nn::ModuleList transitions_;
  torch::nn::ModuleList stages_;
};
TORCH_MODULE(ImageEncoder);

}  // namespace pvseg
