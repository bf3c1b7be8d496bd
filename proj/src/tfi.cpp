#include "pvseg/tfi.hpp"

#include <string>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace nn = torch::nn;

TemporalBlockImpl::TemporalBlockImpl(int64_t channels) {
  convs = register_module("convs", nn::ModuleList());
  for (int i = 0; i < 3; ++i) {
    convs->push_back(nn::Conv3d(nn::Conv3dOptions(channels, channels, 3).padding({0, 1, 1})));
  }
}

torch::Tensor TemporalBlockImpl::forward(const torch::Tensor& x,
                                         std::vector<torch::Tensor>* iterates) {
  auto t = x;
  for (std::size_t i = 0; i < convs->size(); ++i) {
    auto a = torch::gelu(t);
    // Replicate padding along time only; space is zero-padded by the conv.
    auto padded = torch::cat({a.narrow(2, 0, 1), a, a.narrow(2, a.size(2) - 1, 1)}, 2);
    t = t + convs[i]->as<nn::Conv3d>()->forward(padded);
    if (iterates) iterates->push_back(t);
  }
  return t;
}

TemporalFeatureIntegratorImpl::TemporalFeatureIntegratorImpl(EncoderConfig encoder, int64_t window)
    : encoder_(std::move(encoder)), window_(window) {
  encoder_.validate();
  temporal_stems = register_module("temporal_stems", nn::ModuleList());
  temporal_blocks = register_module("temporal_blocks", nn::ModuleList());
  st_fusions = register_module("st_fusions", nn::ModuleList());
  ts_fusions = register_module("ts_fusions", nn::ModuleList());
  integrations = register_module("integrations", nn::ModuleList());
  downsamples = register_module("downsamples", nn::ModuleList());
  for (std::size_t l = 0; l < encoder_.channels.size(); ++l) {
    const int64_t c = encoder_.channels[l];
    if (l == 0) {
      const int64_t s = encoder_.strides[0];
      temporal_stems->push_back(
          nn::Conv3d(nn::Conv3dOptions(3, c, {1, s, s}).stride({1, s, s})));
      downsamples->push_back(nn::Identity());
    } else {
      const int64_t prev = encoder_.channels[l - 1];
      const int64_t r = encoder_.strides[l] / encoder_.strides[l - 1];
      temporal_stems->push_back(nn::Conv3d(
          nn::Conv3dOptions(prev, c, {1, 3, 3}).stride({1, r, r}).padding({0, 1, 1})));
      downsamples->push_back(
          nn::Conv2d(nn::Conv2dOptions(prev, c, 3).stride(r).padding(1)));
    }
    temporal_blocks->push_back(TemporalBlock(c));
    st_fusions->push_back(nn::Conv2d(nn::Conv2dOptions(2 * c, c, 1)));
    ts_fusions->push_back(nn::Conv2d(nn::Conv2dOptions(2 * c, c, 1)));
    integrations->push_back(nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
  }
}

torch::Tensor TemporalFeatureIntegratorImpl::st_batched(int64_t stage, const torch::Tensor& spatial,
                                                        const torch::Tensor& temporal) {
  const int64_t c = encoder_.channels[stage];
  if (temporal.size(1) != c || spatial.size(1) != c) {
    throw ShapeError("spatial-to-temporal fusion channel mismatch at stage " +
                     std::to_string(stage));
  }
  const int64_t last = temporal.size(2) - 1;
  auto current = temporal.select(2, last);
  auto fused = st_fusions[stage]->as<nn::Conv2d>()->forward(torch::cat({current, spatial}, 1));
  if (last == 0) return fused.unsqueeze(2);
  return torch::cat({temporal.narrow(2, 0, last), fused.unsqueeze(2)}, 2);
}

torch::Tensor TemporalFeatureIntegratorImpl::ts_batched(int64_t stage, const torch::Tensor& spatial,
                                                        const torch::Tensor& temporal) {
  const int64_t c = encoder_.channels[stage];
  if (temporal.size(1) != c || spatial.size(1) != c) {
    throw ShapeError("temporal-to-spatial fusion channel mismatch at stage " +
                     std::to_string(stage));
  }
  auto current = temporal.select(2, temporal.size(2) - 1);
  return ts_fusions[stage]->as<nn::Conv2d>()->forward(torch::cat({spatial, current}, 1));
}

torch::Tensor TemporalFeatureIntegratorImpl::temporal_block(int64_t stage,
                                                            const torch::Tensor& temporal) {
  if (temporal.dim() != 4 || temporal.size(1) < 1) {
    throw ShapeError("temporal features must be [c, t, h, w] with t >= 1");
  }
  return temporal_blocks[stage]->as<TemporalBlock>()->forward(temporal.unsqueeze(0)).squeeze(0);
}

torch::Tensor TemporalFeatureIntegratorImpl::spatial_to_temporal(int64_t stage,
                                                                 const torch::Tensor& spatial,
                                                                 const torch::Tensor& temporal) {
  return st_batched(stage, spatial.unsqueeze(0), temporal.unsqueeze(0)).squeeze(0);
}

torch::Tensor TemporalFeatureIntegratorImpl::temporal_to_spatial(int64_t stage,
                                                                 const torch::Tensor& spatial,
                                                                 const torch::Tensor& temporal) {
  return ts_batched(stage, spatial.unsqueeze(0), temporal.unsqueeze(0)).squeeze(0);
}

IntegratedFeatures TemporalFeatureIntegratorImpl::forward(const torch::Tensor& window,
                                                          const FeaturePyramid& pyramid) {
  if (window.dim() != 4 || window.size(1) != 3) throw ShapeError("window must be [t, 3, h, w]");
  if (window.size(0) > window_) {
    throw ValidationError("window of " + std::to_string(window.size(0)) +
                          " frames exceeds the configured " + std::to_string(window_));
  }
  if (pyramid.stages.size() != encoder_.channels.size()) {
    throw ShapeError("pyramid stage count does not match the integrator");
  }
  auto temporal = window.permute({1, 0, 2, 3}).unsqueeze(0);  // [1, 3, t, h, w]
  IntegratedFeatures out;
  torch::Tensor integrated;
  for (std::size_t l = 0; l < encoder_.channels.size(); ++l) {
    const auto stage = static_cast<int64_t>(l);
    auto spatial = pyramid.stages[l].unsqueeze(0);
    temporal = temporal_stems[l]->as<nn::Conv3d>()->forward(temporal);
    if (temporal.size(3) != spatial.size(2) || temporal.size(4) != spatial.size(3)) {
      throw ShapeError("temporal and spatial resolutions disagree at stage " +
                       std::to_string(stage));
    }
    auto t_prime = temporal_blocks[l]->as<TemporalBlock>()->forward(temporal);
    auto i_prime = l == 0 ? spatial
                          : downsamples[l]->as<nn::Conv2d>()->forward(integrated) + spatial;
    temporal = st_batched(stage, i_prime, t_prime);
    integrated = integrations[l]->as<nn::Conv2d>()->forward(ts_batched(stage, i_prime, t_prime));
    out.stages.push_back(integrated.squeeze(0));
  }
  return out;
}

}  // namespace pvseg
