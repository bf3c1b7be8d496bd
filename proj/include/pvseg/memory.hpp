#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "pvseg/model_config.hpp"
#include "pvseg/nn_blocks.hpp"

namespace pvseg {

/// One encoded past frame.
struct MemoryEntry {
  torch::Tensor features;     ///< [c_mem, h_L, w_L]
  torch::Tensor mask_lowres;  ///< [h_L, w_L], values in {0, 1}, same dtype as features
  int frame_index = 0;
  bool is_prompt_frame = false;
};

/// Pinned prompt-frame entry plus a bounded ring of unprompted entries kept in
/// ascending frame order. The oldest ring entry is evicted first.
class MemoryBank {
public:
  explicit MemoryBank(int capacity = 20);

  void set_prompt_entry(MemoryEntry entry);
  /// Inserts in frame order; an entry for an already stored frame replaces it.
  void insert(MemoryEntry entry);
  /// Drops the entry for `frame_index`, pinned or not.
  void erase(int frame_index);
  void clear();

  const std::optional<MemoryEntry>& prompt_entry() const { return prompt_; }
  const std::deque<MemoryEntry>& ring() const { return ring_; }
  int capacity() const { return capacity_; }
  bool empty() const { return !prompt_ && ring_.empty(); }

private:
  int capacity_;
  std::optional<MemoryEntry> prompt_;
  std::deque<MemoryEntry> ring_;
};

/// Outcome of one selection. Ring positions index `MemoryBank::ring()`.
struct SimilarityResult {
  std::vector<int> local_candidates;   ///< ring positions, oldest first
  std::vector<int> global_candidates;  ///< ring positions, oldest first
  std::vector<double> scores_local;
  std::vector<double> scores_global;
  std::vector<double> dist_local;
  std::vector<double> dist_global;
  std::vector<int> chosen_local;   ///< ring positions
  std::vector<int> chosen_global;  ///< ring positions
  bool prompt_included = false;

  /// All chosen ring positions, local first.
  std::vector<int> chosen_ring() const;
};

/// Numerically stable softmax in double precision.
std::vector<double> softmax(const std::vector<double>& scores);

/// Draws `count` distinct indices: each draw samples from the renormalised
/// probabilities of the indices not yet drawn.
std::vector<int> sample_without_replacement(const std::vector<double>& probs, int count,
                                            std::mt19937_64& rng);

/// Highest-probability `count` indices; ties go to the larger index (the more
/// recent frame when candidates are in frame order).
std::vector<int> top_k_indices(const std::vector<double>& probs, int count);

/// Splits the ring into local/global pools, scores every candidate by the
/// dot product of its flattened features with the flattened current features,
/// and chooses y local and x global entries. The prompt entry is always kept.
SimilarityResult select_memories(const MemoryBank& bank, const torch::Tensor& current,
                                 const SelectionConfig& cfg, std::uint64_t seed);

/// Prompt entry (if any) followed by the chosen ring entries.
std::vector<MemoryEntry> selected_entries(const MemoryBank& bank, const SimilarityResult& result);

/// Area-pools a full-resolution binary mask [h, w] to [out_h, out_w]; the
/// resolution must divide exactly.
torch::Tensor area_pool_mask(const torch::Tensor& mask, int64_t out_h, int64_t out_w);

/// Fuses projected frame features with downsampled mask features.
class MemoryEncoderImpl : public torch::nn::Module {
public:
  MemoryEncoderImpl(int64_t feature_channels, int64_t memory_channels);

  /// features: [c_L, h_L, w_L]; mask: [h, w] binary (any dtype).
  MemoryEntry forward(const torch::Tensor& features, const torch::Tensor& mask, int frame_index,
                      bool is_prompt_frame);

private:
  torch::nn::Conv2d pix_proj_{nullptr}, mask_proj_{nullptr};
  torch::nn::Conv2d fuse1_{nullptr}, fuse2_{nullptr}, out_proj_{nullptr};
};
TORCH_MODULE(MemoryEncoder);

/// Pre-norm block: RoPE self-attention, RoPE cross-attention to memory tokens,
/// feed-forward MLP.
class MemoryAttentionBlockImpl : public torch::nn::Module {
public:
  MemoryAttentionBlockImpl(int64_t dim, int64_t memory_dim, int64_t heads, int64_t mlp_dim);

  torch::Tensor forward(torch::Tensor x, const torch::Tensor& memory, const RopeTables& rope);

  Attention self_attn{nullptr};
  Attention cross_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(MemoryAttentionBlock);

/// Conditions the current frame features on the selected memories.
class MemoryAttentionImpl : public torch::nn::Module {
public:
  MemoryAttentionImpl(int64_t dim, int64_t memory_dim, int64_t blocks, int64_t heads,
                      int64_t mlp_dim, int64_t max_temporal_offset, double rope_theta);

  /// current: [c, h, w]. Entries may be empty, in which case cross-attention
  /// is skipped. Output has the shape of `current`. The result does not depend
  /// on the order of `selected`.
  torch::Tensor forward(const torch::Tensor& current, const std::vector<MemoryEntry>& selected,
                        int current_frame);

  /// Row of the temporal embedding table used for an entry seen from `current_frame`.
  int64_t temporal_slot(const MemoryEntry& entry, int current_frame) const;

  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm final_norm{nullptr};
  torch::Tensor temporal_embedding;  ///< [max_offset + 1, memory_dim]; row 0 = prompt frame

private:
  int64_t heads_;
  int64_t max_offset_;
  double rope_theta_;
};
TORCH_MODULE(MemoryAttention);

}  // namespace pvseg
