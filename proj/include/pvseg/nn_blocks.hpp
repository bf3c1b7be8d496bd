#pragma once

#include <cstdint>
#include <optional>

#include <torch/torch.h>

namespace pvseg {

/// Channel-wise layer norm over [B, C, H, W].
class LayerNorm2dImpl : public torch::nn::Module {
public:
  explicit LayerNorm2dImpl(int64_t channels, double eps = 1e-6);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;

private:
  double eps_;
};
TORCH_MODULE(LayerNorm2d);

/// Plain multi-layer perceptron with ReLU between layers.
class MlpImpl : public torch::nn::Module {
public:
  MlpImpl(int64_t in_dim, int64_t hidden_dim, int64_t out_dim, int64_t num_layers,
          bool sigmoid_output = false);
  torch::Tensor forward(torch::Tensor x);

private:
  torch::nn::ModuleList layers_;
  bool sigmoid_output_;
};
TORCH_MODULE(Mlp);

/// Precomputed cos/sin tables for axial 2D rotary embeddings over an h x w
/// grid: rows are grid positions in row-major order, columns are rotation
/// pairs. The first half of the pairs rotate by the x coordinate, the second
/// half by y.
struct RopeTables {
  torch::Tensor cos;  // [h*w, head_dim/2]
  torch::Tensor sin;
};

RopeTables make_rope_tables(int64_t head_dim, int64_t h, int64_t w, double theta,
                            const torch::TensorOptions& options);

/// Rotates [B, heads, N, head_dim] where N is a multiple of the table length
/// (memory tokens from several frames share the same grid positions).
torch::Tensor apply_rope(const torch::Tensor& x, const RopeTables& tables);

/// Multi-head attention with optional down-projected internal width and
/// optional key/value input width, operating on [B, N, C].
class AttentionImpl : public torch::nn::Module {
public:
  AttentionImpl(int64_t embedding_dim, int64_t num_heads, int64_t downsample_rate = 1,
                int64_t kv_in_dim = -1);

  /// `bias` is added to the attention logits and broadcasts against
  /// [B, heads, Nq, Nk]. `scale_logits` divides logits by sqrt(head_dim).
  torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                        const RopeTables* rope_q = nullptr, const RopeTables* rope_k = nullptr,
                        const std::optional<torch::Tensor>& bias = std::nullopt);

  int64_t num_heads() const { return num_heads_; }
  int64_t internal_dim() const { return internal_dim_; }

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

private:
  torch::Tensor separate_heads(const torch::Tensor& x) const;
  static torch::Tensor recombine_heads(const torch::Tensor& x);

  int64_t num_heads_;
  int64_t internal_dim_;
};
TORCH_MODULE(Attention);

}  // namespace pvseg
