#include "pvseg/mpg.hpp"

#include <limits>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace nn = torch::nn;

MemoryContext MemoryContext::from_entries(const std::vector<MemoryEntry>& entries) {
  MemoryContext ctx;
  if (entries.empty()) return ctx;
  std::vector<torch::Tensor> feats;
  std::vector<torch::Tensor> masks;
  for (const auto& e : entries) {
    feats.push_back(e.features.flatten(1).t());
    masks.push_back(e.mask_lowres.flatten().unsqueeze(1));
  }
  ctx.features = torch::cat(feats, 0);
  ctx.mask = torch::cat(masks, 0);
  return ctx;
}

MemoryPromptGeneratorImpl::MemoryPromptGeneratorImpl(int64_t num_tokens, int64_t dim,
                                                     int64_t memory_dim, bool masked)
    : masked_(masked) {
  if (num_tokens < 1) throw ConfigError("memory prompt generator needs at least one token");
  tokens = register_parameter("tokens", torch::randn({num_tokens, dim}) * 0.02);
  psi_q = register_module("psi_q", nn::Linear(dim, dim));
  psi_k = register_module("psi_k", nn::Linear(memory_dim, dim));
  psi_v = register_module("psi_v", nn::Linear(memory_dim, dim));
  self_attn = register_module("self_attn", Attention(dim, 1));
  mlp1 = register_module("mlp1", nn::Linear(dim, 2 * dim));
  mlp2 = register_module("mlp2", nn::Linear(2 * dim, dim));
}

MemoryPromptTrace MemoryPromptGeneratorImpl::trace(const MemoryContext& ctx) {
  if (ctx.features.defined() != ctx.mask.defined() ||
      (ctx.features.defined() && ctx.features.size(0) != ctx.mask.size(0))) {
    throw ShapeError("memory features and masks must have the same number of rows");
  }
  MemoryPromptTrace out;
  auto g = tokens;
  const bool any_rows = ctx.rows() > 0;
  const bool any_foreground = any_rows && ctx.mask.gt(0.5).any().item<bool>();
  if (any_rows && (!masked_ || any_foreground)) {
    auto q = psi_q(g);
    auto k = psi_k(ctx.features);
    auto v = psi_v(ctx.features);
    auto logits = torch::matmul(q, k.t());  // [g, rows]
    if (masked_) {
      auto background = ctx.mask.flatten().le(0.5).unsqueeze(0);  // columns only
      logits = logits.masked_fill(background, -std::numeric_limits<double>::infinity());
    }
    out.attention = torch::softmax(logits, -1);
    out.after_cross = torch::matmul(out.attention, v) + g;
  } else {
    out.after_cross = g;
  }
  auto batched = out.after_cross.unsqueeze(0);
  out.after_self = self_attn(batched, batched, batched).squeeze(0);
  out.output = mlp2(torch::gelu(mlp1(out.after_self)));
  return out;
}

torch::Tensor MemoryPromptGeneratorImpl::forward(const MemoryContext& ctx) {
  return trace(ctx).output;
}

}  // namespace pvseg
