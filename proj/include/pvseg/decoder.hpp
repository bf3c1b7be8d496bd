#pragma once

#include <vector>

#include <torch/torch.h>

#include "pvseg/mask.hpp"
#include "pvseg/nn_blocks.hpp"
#include "pvseg/prompt.hpp"

namespace pvseg {

/// Fixed sinusoidal encoding of normalised 2D coordinates: for each of d/4
/// geometric frequencies, sin and cos of the x and y phases.
torch::Tensor sinusoidal_encoding(const torch::Tensor& xy, int64_t dim);

/// Converts a binary mask to a float tensor [h, w].
torch::Tensor mask_to_tensor(const BinaryMask& mask, const torch::TensorOptions& options);
BinaryMask tensor_to_mask(const torch::Tensor& t);

struct PromptEmbeddings {
  torch::Tensor sparse;  ///< [k, d], k may be 0
  torch::Tensor dense;   ///< [d, h_L, w_L]
};

/// Clicks and box corners become sparse tokens (type embedding plus position
/// encoding); a mask prompt becomes the dense embedding. With no mask prompt the
/// dense embedding is a learned "no prompt" vector broadcast over the grid.
class PromptEncoderImpl : public torch::nn::Module {
public:
  explicit PromptEncoderImpl(int64_t dim);

  /// All prompts must target one frame of size h x w.
  PromptEmbeddings forward(const std::vector<Prompt>& prompts, int64_t height, int64_t width,
                           int64_t grid_h, int64_t grid_w, const torch::TensorOptions& options);

  /// Position encoding of the grid cell centres, [d, grid_h, grid_w].
  torch::Tensor dense_pe(int64_t grid_h, int64_t grid_w, const torch::TensorOptions& options) const;

  int64_t dim() const { return dim_; }

  torch::Tensor point_embeddings;  ///< [4, d]: positive, negative, box top-left, box bottom-right
  torch::Tensor no_mask_embed;     ///< [d]

private:
  int64_t dim_;
  torch::nn::Conv2d mask_conv1_{nullptr}, mask_conv2_{nullptr}, mask_conv3_{nullptr};
  LayerNorm2d mask_norm1_{nullptr}, mask_norm2_{nullptr};
};
TORCH_MODULE(PromptEncoder);

class TwoWayBlockImpl : public torch::nn::Module {
public:
  TwoWayBlockImpl(int64_t dim, int64_t heads, int64_t mlp_dim, bool skip_first_layer_pe);

  /// Updates (queries, keys) in place.
  void forward(torch::Tensor& queries, torch::Tensor& keys, const torch::Tensor& query_pe,
               const torch::Tensor& key_pe);

private:
  Attention self_attn_{nullptr}, token_to_image_{nullptr}, image_to_token_{nullptr};
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr}, norm4_{nullptr};
  torch::nn::Linear mlp1_{nullptr}, mlp2_{nullptr};
  bool skip_first_layer_pe_;
};
TORCH_MODULE(TwoWayBlock);

/// Multi-mask output for one frame.
struct SegmentationOutput {
  torch::Tensor mask_logits;   ///< [K, h, w]
  torch::Tensor iou_pred;      ///< [K], in [0, 1]
  torch::Tensor object_logit;  ///< scalar
  torch::Tensor object_score;  ///< scalar, sigmoid(object_logit)
  int selected_index = 0;      ///< argmax of iou_pred
};

/// Two-way transformer over output tokens (IoU, K mask tokens, occlusion),
/// prompt tokens and memory prompt tokens against the image grid, followed by
/// upscaling and per-mask hypernetworks.
class MaskDecoderImpl : public torch::nn::Module {
public:
  MaskDecoderImpl(int64_t feature_channels, int64_t dim, int64_t depth, int64_t heads,
                  int64_t mlp_dim, int64_t num_masks);

  /// features: memory-conditioned [c_L, h_L, w_L]; sparse: [k, d];
  /// dense/dense_pe: [d, h_L, w_L]; memory_prompts: [g, d] or undefined.
  SegmentationOutput forward(const torch::Tensor& features, const torch::Tensor& sparse,
                             const torch::Tensor& dense, const torch::Tensor& dense_pe,
                             const torch::Tensor& memory_prompts, int64_t out_h, int64_t out_w);

  int64_t num_masks() const { return num_masks_; }

private:
  int64_t dim_;
  int64_t num_masks_;
  torch::nn::Conv2d image_proj_{nullptr};
  torch::Tensor output_tokens_;  ///< [K + 2, d]: IoU, K masks, occlusion
  torch::nn::ModuleList blocks_;
  Attention final_attn_{nullptr};
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::ConvTranspose2d up1_{nullptr}, up2_{nullptr};
  LayerNorm2d up_norm_{nullptr};
  torch::nn::ModuleList hypernets_;
  Mlp iou_head_{nullptr};
  Mlp object_head_{nullptr};
};
TORCH_MODULE(MaskDecoder);

/// Occlusion-gated binarisation: an object score below 0.5 yields an empty
/// mask; otherwise pixels with sigmoid(logit) > threshold on the selected mask.
BinaryMask finalize_mask(const SegmentationOutput& output, double threshold = 0.5);

}  // namespace pvseg
