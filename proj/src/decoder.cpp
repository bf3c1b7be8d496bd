#include "pvseg/decoder.hpp"

#include <cmath>
#include <numbers>

#include "pvseg/errors.hpp"
#include "pvseg/memory.hpp"

namespace pvseg {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

torch::Tensor sinusoidal_encoding(const torch::Tensor& xy, int64_t dim) {
  if (dim % 4 != 0) throw ShapeError("position encoding width must be a multiple of 4");
  const int64_t k = dim / 4;
  constexpr double kMaxFrequency = 32.0;
  auto steps = torch::arange(k, xy.options().requires_grad(false));
  auto freqs = k > 1 ? torch::pow(kMaxFrequency, steps / static_cast<double>(k - 1))
                     : torch::ones({1}, xy.options());
  auto phase_x = 2.0 * std::numbers::pi * torch::outer(xy.select(1, 0), freqs);
  auto phase_y = 2.0 * std::numbers::pi * torch::outer(xy.select(1, 1), freqs);
  return torch::cat({torch::sin(phase_x), torch::cos(phase_x), torch::sin(phase_y),
                     torch::cos(phase_y)},
                    1);
}

torch::Tensor mask_to_tensor(const BinaryMask& mask, const torch::TensorOptions& options) {
  auto t = torch::empty({mask.height(), mask.width()}, torch::kUInt8);
  std::copy(mask.data().begin(), mask.data().end(), t.data_ptr<std::uint8_t>());
  return t.to(options);
}

BinaryMask tensor_to_mask(const torch::Tensor& t) {
  if (t.dim() != 2) throw ShapeError("mask tensor must be [h, w]");
  auto bytes = t.detach().gt(0.5).to(torch::kUInt8).contiguous();
  const auto* p = bytes.data_ptr<std::uint8_t>();
  return BinaryMask(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)),
                    std::vector<std::uint8_t>(p, p + bytes.numel()));
}

PromptEncoderImpl::PromptEncoderImpl(int64_t dim) : dim_(dim) {
  point_embeddings = register_parameter("point_embeddings", torch::randn({4, dim}) * 0.5);
  no_mask_embed = register_parameter("no_mask_embed", torch::randn({dim}) * 0.02);
  const int64_t c1 = dim / 16;
  const int64_t c2 = dim / 4;
  mask_conv1_ = register_module("mask_conv1", nn::Conv2d(nn::Conv2dOptions(1, c1, 2).stride(2)));
  mask_norm1_ = register_module("mask_norm1", LayerNorm2d(c1));
  mask_conv2_ = register_module("mask_conv2", nn::Conv2d(nn::Conv2dOptions(c1, c2, 2).stride(2)));
  mask_norm2_ = register_module("mask_norm2", LayerNorm2d(c2));
  mask_conv3_ = register_module("mask_conv3", nn::Conv2d(nn::Conv2dOptions(c2, dim, 1)));
}

torch::Tensor PromptEncoderImpl::dense_pe(int64_t grid_h, int64_t grid_w,
                                          const torch::TensorOptions& options) const {
  auto ys = (torch::arange(grid_h, options) + 0.5) / static_cast<double>(grid_h);
  auto xs = (torch::arange(grid_w, options) + 0.5) / static_cast<double>(grid_w);
  auto grid = torch::meshgrid({ys, xs}, "ij");
  auto xy = torch::stack({grid[1].flatten(), grid[0].flatten()}, 1);
  return sinusoidal_encoding(xy, dim_).t().reshape({dim_, grid_h, grid_w});
}

PromptEmbeddings PromptEncoderImpl::forward(const std::vector<Prompt>& prompts, int64_t height,
                                            int64_t width, int64_t grid_h, int64_t grid_w,
                                            const torch::TensorOptions& options) {
  std::vector<double> coords;
  std::vector<int64_t> types;
  const BinaryMask* mask_prompt = nullptr;
  for (const auto& p : prompts) {
    p.validate(static_cast<int>(height), static_cast<int>(width));
    if (p.frame_index != prompts.front().frame_index) {
      throw ValidationError("all prompts passed together must target one frame", "frame");
    }
    auto add = [&](int x, int y, int64_t type) {
      coords.push_back((x + 0.5) / static_cast<double>(width));
      coords.push_back((y + 0.5) / static_cast<double>(height));
      types.push_back(type);
    };
    switch (p.kind) {
      case PromptKind::kClick:
        add(p.click.x, p.click.y, p.polarity == Polarity::kPositive ? 0 : 1);
        break;
      case PromptKind::kBox:
        add(p.box.x0, p.box.y0, 2);
        add(p.box.x1, p.box.y1, 3);
        break;
      case PromptKind::kMask:
        mask_prompt = &p.mask;
        break;
    }
  }
  PromptEmbeddings out;
  const auto k = static_cast<int64_t>(types.size());
  if (k == 0) {
    out.sparse = torch::zeros({0, dim_}, options);
  } else {
    auto xy = torch::tensor(coords, torch::TensorOptions().dtype(torch::kFloat64))
                  .reshape({k, 2})
                  .to(options);
    auto idx = torch::tensor(types, torch::kInt64);
    out.sparse = sinusoidal_encoding(xy, dim_) + point_embeddings.index_select(0, idx);
  }
  if (mask_prompt) {
    auto m = mask_to_tensor(*mask_prompt, options);
    auto coverage = area_pool_mask(m, 4 * grid_h, 4 * grid_w).unsqueeze(0).unsqueeze(0);
    auto x = torch::gelu(mask_norm1_(mask_conv1_(coverage)));
    x = torch::gelu(mask_norm2_(mask_conv2_(x)));
    out.dense = mask_conv3_(x).squeeze(0);
  } else {
    out.dense = no_mask_embed.view({dim_, 1, 1}).expand({dim_, grid_h, grid_w});
  }
  return out;
}

TwoWayBlockImpl::TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim,
                                 bool skip_first_layer_pe)
    : skip_first_layer_pe_(skip_first_layer_pe) {
  self_attn_ = register_module("self_attn", Attention(dim, heads));
  token_to_image_ = register_module("token_to_image", Attention(dim, heads, 2));
  image_to_token_ = register_module("image_to_token", Attention(dim, heads, 2));
  norm1_ = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm2_ = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm3_ = register_module("norm3", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm4_ = register_module("norm4", nn::LayerNorm(nn::LayerNormOptions({dim})));
  mlp1_ = register_module("mlp1", nn::Linear(dim, mlp_dim));
  mlp2_ = register_module("mlp2", nn::Linear(mlp_dim, dim));
}

void TwoWayBlockImpl::forward(torch::Tensor& queries, torch::Tensor& keys,
                              const torch::Tensor& query_pe, const torch::Tensor& key_pe) {
  if (skip_first_layer_pe_) {
    queries = self_attn_(queries, queries, queries);
  } else {
    auto q = queries + query_pe;
    queries = queries + self_attn_(q, q, queries);
  }
  queries = norm1_(queries);

  auto q = queries + query_pe;
  auto k = keys + key_pe;
  queries = norm2_(queries + token_to_image_(q, k, keys));

  queries = norm3_(queries + mlp2_(torch::relu(mlp1_(queries))));

  q = queries + query_pe;
  k = keys + key_pe;
  keys = norm4_(keys + image_to_token_(k, q, queries));
}

MaskDecoderImpl::MaskDecoderImpl(int64_t feature_channels, int64_t dim, int64_t depth,
                                 int64_t heads, int64_t mlp_dim, int64_t num_masks)
    : dim_(dim), num_masks_(num_masks) {
  image_proj_ = register_module("image_proj",
                                nn::Conv2d(nn::Conv2dOptions(feature_channels, dim, 1)));
  output_tokens_ = register_parameter("output_tokens", torch::randn({num_masks + 2, dim}) * 0.5);
  blocks_ = register_module("blocks", nn::ModuleList());
  for (int64_t i = 0; i < depth; ++i) blocks_->push_back(TwoWayBlock(dim, heads, mlp_dim, i == 0));
  final_attn_ = register_module("final_attn", Attention(dim, heads, 2));
  final_norm_ = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
  up1_ = register_module("up1",
                         nn::ConvTranspose2d(nn::ConvTranspose2dOptions(dim, dim / 4, 2).stride(2)));
  up_norm_ = register_module("up_norm", LayerNorm2d(dim / 4));
  up2_ = register_module(
      "up2", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(dim / 4, dim / 8, 2).stride(2)));
  hypernets_ = register_module("hypernets", nn::ModuleList());
  for (int64_t i = 0; i < num_masks; ++i) hypernets_->push_back(Mlp(dim, dim, dim / 8, 3));
  iou_head_ = register_module("iou_head", Mlp(dim, 256, num_masks, 3, true));
  object_head_ = register_module("object_head", Mlp(dim, dim, 1, 3));
}

SegmentationOutput MaskDecoderImpl::forward(const torch::Tensor& features,
                                            const torch::Tensor& sparse, const torch::Tensor& dense,
                                            const torch::Tensor& dense_pe,
                                            const torch::Tensor& memory_prompts, int64_t out_h,
                                            int64_t out_w) {
  if (features.dim() != 3) throw ShapeError("decoder features must be [c, h, w]");
  const auto grid_h = features.size(1);
  const auto grid_w = features.size(2);
  if (dense.size(0) != dim_ || dense.size(1) != grid_h || dense.size(2) != grid_w) {
    throw ShapeError("dense prompt embedding does not match the feature grid");
  }
  if (sparse.dim() != 2 || sparse.size(1) != dim_) throw ShapeError("sparse tokens must be [k, d]");

  std::vector<torch::Tensor> token_parts{output_tokens_, sparse};
  if (memory_prompts.defined() && memory_prompts.size(0) > 0) {
    if (memory_prompts.size(1) != dim_) throw ShapeError("memory prompts must be [g, d]");
    token_parts.push_back(memory_prompts);
  }
  auto tokens = torch::cat(token_parts, 0).unsqueeze(0);  // [1, T, d]

  auto src = image_proj_(features.unsqueeze(0)) + dense.unsqueeze(0);
  auto keys = src.flatten(2).transpose(1, 2);  // [1, N, d]
  auto key_pe = dense_pe.unsqueeze(0).flatten(2).transpose(1, 2);
  auto queries = tokens;
  for (const auto& block : *blocks_) {
    block->as<TwoWayBlock>()->forward(queries, keys, tokens, key_pe);
  }
  auto q = queries + tokens;
  auto k = keys + key_pe;
  queries = final_norm_(queries + final_attn_(q, k, keys));

  auto iou_token = queries.select(1, 0);
  auto object_token = queries.select(1, num_masks_ + 1);

  auto grid = keys.transpose(1, 2).reshape({1, dim_, grid_h, grid_w});
  auto up = torch::gelu(up_norm_(up1_(grid)));
  up = torch::gelu(up2_(up));  // [1, d/8, 4h, 4w]

  std::vector<torch::Tensor> hyper;
  for (int64_t i = 0; i < num_masks_; ++i) {
    hyper.push_back(hypernets_[i]->as<Mlp>()->forward(queries.select(1, 1 + i)));
  }
  auto hyper_in = torch::stack(hyper, 1);  // [1, K, d/8]
  auto low = torch::matmul(hyper_in, up.flatten(2)).reshape({1, num_masks_, up.size(2), up.size(3)});
  auto masks = F::interpolate(low, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{out_h, out_w})
                                       .mode(torch::kBilinear)
                                       .align_corners(false));

  SegmentationOutput out;
  out.mask_logits = masks.squeeze(0);
  out.iou_pred = iou_head_(iou_token).squeeze(0);
  out.object_logit = object_head_(object_token).reshape({});
  out.object_score = torch::sigmoid(out.object_logit);
  out.selected_index = static_cast<int>(out.iou_pred.detach().argmax().item<int64_t>());
  return out;
}

BinaryMask finalize_mask(const SegmentationOutput& output, double threshold) {
  const int h = static_cast<int>(output.mask_logits.size(1));
  const int w = static_cast<int>(output.mask_logits.size(2));
  if (output.object_score.item<double>() < 0.5) return BinaryMask(h, w);
  auto probs = torch::sigmoid(output.mask_logits[output.selected_index].detach().to(torch::kFloat64));
  return tensor_to_mask(probs.gt(threshold).to(torch::kFloat64));
}

}  // namespace pvseg
