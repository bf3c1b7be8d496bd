#pragma once

#include <vector>

#include <torch/torch.h>

#include "pvseg/memory.hpp"

namespace pvseg {

/// Flattened memory rows fed to the prompt generator.
struct MemoryContext {
  torch::Tensor features;  ///< F_mem [m*h*w, c_mem]
  torch::Tensor mask;      ///< M_mem [m*h*w, 1], values in {0, 1}

  static MemoryContext from_entries(const std::vector<MemoryEntry>& entries);
  int64_t rows() const { return features.defined() ? features.size(0) : 0; }
};

/// Intermediate token states of one generator pass, each [g, d].
struct MemoryPromptTrace {
  torch::Tensor after_cross;  ///< G'
  torch::Tensor after_self;   ///< G''
  torch::Tensor output;       ///< G'''
  torch::Tensor attention;    ///< cross-attention weights [g, rows]; undefined when skipped
};

/// Learnable memory prompt tokens G that gather foreground context from the
/// memories through masked cross-attention, then self-attention and an MLP.
/// Cross-attention logits are unscaled: G' = softmax(M + Q K^T) V + G.
class MemoryPromptGeneratorImpl : public torch::nn::Module {
public:
  MemoryPromptGeneratorImpl(int64_t num_tokens, int64_t dim, int64_t memory_dim, bool masked = true);

  /// Returns G''' [g, d]. With `masked` and no foreground row at all, the
  /// cross-attention is skipped and G' = G.
  torch::Tensor forward(const MemoryContext& ctx);
  MemoryPromptTrace trace(const MemoryContext& ctx);

  bool masked() const { return masked_; }
  void set_masked(bool masked) { masked_ = masked; }

  torch::Tensor tokens;  ///< G [g, d]
  torch::nn::Linear psi_q{nullptr}, psi_k{nullptr}, psi_v{nullptr};
  Attention self_attn{nullptr};
  torch::nn::Linear mlp1{nullptr}, mlp2{nullptr};

private:
  bool masked_;
};
TORCH_MODULE(MemoryPromptGenerator);

}  // namespace pvseg
