#include "pvseg/encoder.hpp"

#include <string>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace nn = torch::nn;

ResidualBlockImpl::ResidualBlockImpl(int64_t channels) {
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
  norm_ = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(8, channels)));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  return torch::gelu(x + conv2_(torch::gelu(norm_(conv1_(x)))));
}

ImageEncoderImpl::ImageEncoderImpl(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  transitions_ = register_module("transitions", nn::ModuleList());
  stages_ = register_module("stages", nn::ModuleList());
  for (std::size_t l = 0; l < config_.channels.size(); ++l) {
    const int64_t c = config_.channels[l];
    if (l == 0) {
      const int64_t s = config_.strides[0];
      transitions_->push_back(nn::Conv2d(nn::Conv2dOptions(3, c, s).stride(s)));
    } else {
      const int64_t ratio = config_.strides[l] / config_.strides[l - 1];
      transitions_->push_back(nn::Conv2d(
          nn::Conv2dOptions(config_.channels[l - 1], c, 3).stride(ratio).padding(1)));
    }
    nn::Sequential blocks;
    for (int64_t b = 0; b < config_.blocks_per_stage; ++b) blocks->push_back(ResidualBlock(c));
    stages_->push_back(blocks);
  }
}

FeaturePyramid ImageEncoderImpl::forward(const torch::Tensor& frame) {
  const bool batched = frame.dim() == 4;
  if (frame.dim() != 3 && !batched) throw ShapeError("encoder input must be [3,h,w] or [B,3,h,w]");
  auto x = batched ? frame : frame.unsqueeze(0);
  if (x.size(1) != 3) throw ShapeError("encoder input must have 3 channels");
  const int64_t s = config_.final_stride();
  if (x.size(2) % s != 0 || x.size(3) % s != 0) {
    throw ShapeError("frame size " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                     " is not divisible by " + std::to_string(s));
  }
  FeaturePyramid out;
  for (std::size_t l = 0; l < stages_->size(); ++l) {
    x = torch::gelu(transitions_[l]->as<nn::Conv2d>()->forward(x));
    x = stages_[l]->as<nn::Sequential>()->forward(x);
    out.stages.push_back(batched ? x : x.squeeze(0));
  }
  return out;
}

std::vector<torch::Tensor> ImageEncoderImpl::stage_parameters(int64_t l) {
  auto params = transitions_[l]->parameters();
  auto rest = stages_[l]->parameters();
  params.insert(params.end(), rest.begin(), rest.end());
  return params;
}

}  // namespace pvseg
