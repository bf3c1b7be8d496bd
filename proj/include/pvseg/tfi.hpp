#pragma once

#include <vector>

#include <torch/torch.h>

#include "pvseg/encoder.hpp"
#include "pvseg/model_config.hpp"

namespace pvseg {

/// Spatiotemporal features I_l, one per encoder stage, each shaped like the
/// matching FeaturePyramid stage.
struct IntegratedFeatures {
  std::vector<torch::Tensor> stages;

  const torch::Tensor& final() const { return stages.back(); }
};

/// Three residual 3D convolutions: T(i) = T(i-1) + C3d_i(T(i-1)). The time axis
/// is replicate-padded so any window length >= 1 works.
class TemporalBlockImpl : public torch::nn::Module {
public:
  explicit TemporalBlockImpl(int64_t channels);

  /// x: [B, c, t, h, w]. When `iterates` is non-null it receives T(1..3).
  torch::Tensor forward(const torch::Tensor& x, std::vector<torch::Tensor>* iterates = nullptr);

  torch::nn::ModuleList convs;
};
TORCH_MODULE(TemporalBlock);

/// Temporal branch (3D stem transitions + one temporal block per stage) and
/// integration branch that folds the current-frame temporal slice into the
/// spatial features stage by stage.
class TemporalFeatureIntegratorImpl : public torch::nn::Module {
public:
  TemporalFeatureIntegratorImpl(EncoderConfig encoder, int64_t window);

  /// window: [t, 3, h, w] with the current frame last, t <= configured window.
  /// pyramid: the encoder output for the current frame (unbatched).
  IntegratedFeatures forward(const torch::Tensor& window, const FeaturePyramid& pyramid);

  // Stage-level pieces, unbatched: temporal tensors are [c, t, h, w],
  // spatial ones [c, h, w]. `stage` is 0-based.
  torch::Tensor temporal_block(int64_t stage, const torch::Tensor& temporal);
  torch::Tensor spatial_to_temporal(int64_t stage, const torch::Tensor& spatial,
                                    const torch::Tensor& temporal);
  torch::Tensor temporal_to_spatial(int64_t stage, const torch::Tensor& spatial,
                                    const torch::Tensor& temporal);

  int64_t window() const { return window_; }

  torch::nn::ModuleList temporal_stems;  ///< stride-matching 3D convs, one per stage
  torch::nn::ModuleList temporal_blocks;
  torch::nn::ModuleList st_fusions;      ///< 1x1 over [T' last slice ; I']
  torch::nn::ModuleList ts_fusions;      ///< 1x1 over [I' ; T' last slice]
  torch::nn::ModuleList integrations;    ///< C2d, 3x3
  torch::nn::ModuleList downsamples;     ///< I_{l-1} -> stage l resolution (entry 0 unused)

private:
  torch::Tensor st_batched(int64_t stage, const torch::Tensor& spatial, const torch::Tensor& temporal);
  torch::Tensor ts_batched(int64_t stage, const torch::Tensor& spatial, const torch::Tensor& temporal);

  EncoderConfig encoder_;
  int64_t window_;
};
TORCH_MODULE(TemporalFeatureIntegrator);

}  // namespace pvseg
