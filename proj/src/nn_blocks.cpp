#include "pvseg/nn_blocks.hpp"

#include <cmath>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace F = torch::nn::functional;

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels, double eps) : eps_(eps) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
  auto u = x.mean(1, true);
  auto s = (x - u).pow(2).mean(1, true);
  auto y = (x - u) / torch::sqrt(s + eps_);
  return weight.view({1, -1, 1, 1}) * y + bias.view({1, -1, 1, 1});
}

MlpImpl::MlpImpl(int64_t in_dim, int64_t hidden_dim, int64_t out_dim, int64_t num_layers,
                 bool sigmoid_output)
    : sigmoid_output_(sigmoid_output) {
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (int64_t i = 0; i < num_layers; ++i) {
    const int64_t n_in = i == 0 ? in_dim : hidden_dim;
    const int64_t n_out = i == num_layers - 1 ? out_dim : hidden_dim;
    layers_->push_back(torch::nn::Linear(n_in, n_out));
  }
}

torch::Tensor MlpImpl::forward(torch::Tensor x) {
  const auto n = layers_->size();
  for (std::size_t i = 0; i < n; ++i) {
    x = layers_[i]->as<torch::nn::Linear>()->forward(x);
    if (i + 1 < n) x = torch::relu(x);
  }
  return sigmoid_output_ ? torch::sigmoid(x) : x;
}

RopeTables make_rope_tables(int64_t head_dim, int64_t h, int64_t w, double theta,
                            const torch::TensorOptions& options) {
  if (head_dim % 4 != 0) throw ShapeError("2D rotary embedding needs head_dim % 4 == 0");
  const int64_t quarter = head_dim / 4;
  auto opts = options.dtype(torch::kFloat64).requires_grad(false);
  auto freqs = 1.0 / torch::pow(theta, torch::arange(0, head_dim, 4, opts).slice(0, 0, quarter) /
                                           static_cast<double>(head_dim));
  auto idx = torch::arange(h * w, opts);
  auto xs = torch::fmod(idx, static_cast<double>(w));
  auto ys = torch::floor(idx / static_cast<double>(w));
  auto angles = torch::cat({torch::outer(xs, freqs), torch::outer(ys, freqs)}, 1);
  auto dtype = options.dtype().toScalarType();
  return {torch::cos(angles).to(dtype), torch::sin(angles).to(dtype)};
}

torch::Tensor apply_rope(const torch::Tensor& x, const RopeTables& tables) {
  const int64_t n = x.size(2);
  const int64_t grid = tables.cos.size(0);
  if (n % grid != 0) throw ShapeError("token count is not a multiple of the rope grid");
  auto cos = tables.cos.repeat({n / grid, 1});
  auto sin = tables.sin.repeat({n / grid, 1});
  auto pairs = x.unflatten(-1, {x.size(-1) / 2, 2});
  auto x0 = pairs.select(-1, 0);
  auto x1 = pairs.select(-1, 1);
  auto r0 = x0 * cos - x1 * sin;
  auto r1 = x0 * sin + x1 * cos;
  return torch::stack({r0, r1}, -1).flatten(-2);
}

AttentionImpl::AttentionImpl(int64_t embedding_dim, int64_t num_heads, int64_t downsample_rate,
                             int64_t kv_in_dim)
    : num_heads_(num_heads), internal_dim_(embedding_dim / downsample_rate) {
  if (internal_dim_ % num_heads != 0) throw ShapeError("num_heads must divide internal dim");
  const int64_t kv_dim = kv_in_dim > 0 ? kv_in_dim : embedding_dim;
  q_proj = register_module("q_proj", torch::nn::Linear(embedding_dim, internal_dim_));
  k_proj = register_module("k_proj", torch::nn::Linear(kv_dim, internal_dim_));
  v_proj = register_module("v_proj", torch::nn::Linear(kv_dim, internal_dim_));
  out_proj = register_module("out_proj", torch::nn::Linear(internal_dim_, embedding_dim));
}

torch::Tensor AttentionImpl::separate_heads(const torch::Tensor& x) const {
  const auto b = x.size(0);
  const auto n = x.size(1);
  return x.reshape({b, n, num_heads_, internal_dim_ / num_heads_}).transpose(1, 2);
}

torch::Tensor AttentionImpl::recombine_heads(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto n = x.size(2);
  return x.transpose(1, 2).reshape({b, n, -1});
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& q_in, const torch::Tensor& k_in,
                                     const torch::Tensor& v_in, const RopeTables* rope_q,
                                     const RopeTables* rope_k,
                                     const std::optional<torch::Tensor>& bias) {
  auto q = separate_heads(q_proj(q_in));
  auto k = separate_heads(k_proj(k_in));
  auto v = separate_heads(v_proj(v_in));
  if (rope_q) q = apply_rope(q, *rope_q);
  if (rope_k) k = apply_rope(k, *rope_k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  auto logits = torch::matmul(q, k.transpose(-2, -1)) * scale;
  if (bias) logits = logits + *bias;
  auto attn = torch::softmax(logits, -1);
  return out_proj(recombine_heads(torch::matmul(attn, v)));
}

}  // namespace pvseg
