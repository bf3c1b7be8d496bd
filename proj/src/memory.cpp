#include "pvseg/memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace nn = torch::nn;

MemoryBank::MemoryBank(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ConfigError("memory capacity must be >= 1", "memory_capacity");
}

void MemoryBank::set_prompt_entry(MemoryEntry entry) {
  entry.is_prompt_frame = true;
  // A frame cannot sit in both places.
  std::erase_if(ring_, [&](const MemoryEntry& e) { return e.frame_index == entry.frame_index; });
  prompt_ = std::move(entry);
}

void MemoryBank::insert(MemoryEntry entry) {
  if (entry.frame_index < 0) throw ValidationError("frame_index must be >= 0", "frame_index");
  if (prompt_ && prompt_->frame_index == entry.frame_index) {
    entry.is_prompt_frame = true;
    prompt_ = std::move(entry);
    return;
  }
  entry.is_prompt_frame = false;
  auto pos = std::lower_bound(
      ring_.begin(), ring_.end(), entry.frame_index,
      [](const MemoryEntry& e, int frame) { return e.frame_index < frame; });
  if (pos != ring_.end() && pos->frame_index == entry.frame_index) {
    *pos = std::move(entry);
  } else {
    ring_.insert(pos, std::move(entry));
  }
  while (static_cast<int>(ring_.size()) > capacity_) ring_.pop_front();
}

void MemoryBank::erase(int frame_index) {
  if (prompt_ && prompt_->frame_index == frame_index) prompt_.reset();
  std::erase_if(ring_, [&](const MemoryEntry& e) { return e.frame_index == frame_index; });
}

void MemoryBank::clear() {
  prompt_.reset();
  ring_.clear();
}

std::vector<int> SimilarityResult::chosen_ring() const {
  std::vector<int> out = chosen_local;
  out.insert(out.end(), chosen_global.begin(), chosen_global.end());
  return out;
}

std::vector<double> softmax(const std::vector<double>& scores) {
  if (scores.empty()) return {};
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

std::vector<int> sample_without_replacement(const std::vector<double>& probs, int count,
                                            std::mt19937_64& rng) {
  std::vector<double> remaining = probs;
  std::vector<int> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  count = std::min<int>(count, static_cast<int>(probs.size()));
  for (int k = 0; k < count; ++k) {
    const double total = std::accumulate(remaining.begin(), remaining.end(), 0.0);
    int pick = -1;
    if (total > 0.0) {
      const double u = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < remaining.size(); ++i) {
        if (remaining[i] <= 0.0) continue;
        acc += remaining[i];
        pick = static_cast<int>(i);
        if (u < acc) break;
      }
    } else {
      // Remaining mass underflowed to zero: fall back to the most recent unpicked.
      for (int i = static_cast<int>(remaining.size()) - 1; i >= 0; --i) {
        if (std::find(out.begin(), out.end(), i) == out.end()) {
          pick = i;
          break;
        }
      }
    }
    out.push_back(pick);
    remaining[pick] = 0.0;
  }
  return out;
}

std::vector<int> top_k_indices(const std::vector<double>& probs, int count) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a > b;
  });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(count, 0))));
  return order;
}

SimilarityResult select_memories(const MemoryBank& bank, const torch::Tensor& current,
                                 const SelectionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  torch::NoGradGuard no_grad;
  SimilarityResult res;
  res.prompt_included = bank.prompt_entry().has_value();
  const int ring_size = static_cast<int>(bank.ring().size());
  const int n_local = std::min(cfg.local_window, ring_size);
  for (int i = 0; i < ring_size; ++i) {
    (i >= ring_size - n_local ? res.local_candidates : res.global_candidates).push_back(i);
  }
  auto query = current.detach().flatten().to(torch::kFloat64);
  auto score = [&](int pos) {
    auto key = bank.ring()[pos].features.detach().flatten().to(torch::kFloat64);
    if (key.numel() != query.numel()) {
      throw ShapeError("memory features have " + std::to_string(key.numel()) +
                       " components, current frame has " + std::to_string(query.numel()));
    }
    return torch::dot(key, query).item<double>();
  };
  for (int pos : res.local_candidates) res.scores_local.push_back(score(pos));
  for (int pos : res.global_candidates) res.scores_global.push_back(score(pos));
  res.dist_local = softmax(res.scores_local);
  res.dist_global = softmax(res.scores_global);

  std::vector<int> pick_local;
  std::vector<int> pick_global;
  if (cfg.mode == SelectionMode::kStochastic) {
    std::mt19937_64 rng(seed);
    pick_local = sample_without_replacement(res.dist_local, cfg.local_count, rng);
    pick_global = sample_without_replacement(res.dist_global, cfg.global_count, rng);
  } else {
    pick_local = top_k_indices(res.dist_local, cfg.local_count);
    pick_global = top_k_indices(res.dist_global, cfg.global_count);
  }
  for (int i : pick_local) res.chosen_local.push_back(res.local_candidates[i]);
  for (int i : pick_global) res.chosen_global.push_back(res.global_candidates[i]);
  return res;
}

std::vector<MemoryEntry> selected_entries(const MemoryBank& bank, const SimilarityResult& result) {
  std::vector<MemoryEntry> out;
  if (result.prompt_included && bank.prompt_entry()) out.push_back(*bank.prompt_entry());
  for (int pos : result.chosen_ring()) out.push_back(bank.ring()[pos]);
  return out;
}

torch::Tensor area_pool_mask(const torch::Tensor& mask, int64_t out_h, int64_t out_w) {
  if (mask.dim() != 2) throw ShapeError("mask must be [h, w]");
  const auto h = mask.size(0);
  const auto w = mask.size(1);
  if (out_h < 1 || out_w < 1 || h % out_h != 0 || w % out_w != 0) {
    throw ShapeError("mask of " + std::to_string(h) + "x" + std::to_string(w) +
                     " cannot be area-pooled to " + std::to_string(out_h) + "x" +
                     std::to_string(out_w));
  }
  auto m = mask.dim() == 2 ? mask.unsqueeze(0).unsqueeze(0) : mask;
  if (!m.is_floating_point()) m = m.to(torch::kFloat32);
  return torch::avg_pool2d(m, {h / out_h, w / out_w}).squeeze(0).squeeze(0);
}

MemoryEncoderImpl::MemoryEncoderImpl(int64_t feature_channels, int64_t memory_channels) {
  pix_proj_ = register_module("pix_proj",
                              nn::Conv2d(nn::Conv2dOptions(feature_channels, memory_channels, 1)));
  mask_proj_ = register_module("mask_proj", nn::Conv2d(nn::Conv2dOptions(1, memory_channels, 1)));
  fuse1_ = register_module(
      "fuse1", nn::Conv2d(nn::Conv2dOptions(memory_channels, memory_channels, 3).padding(1)));
  fuse2_ = register_module(
      "fuse2", nn::Conv2d(nn::Conv2dOptions(memory_channels, memory_channels, 3).padding(1)));
  out_proj_ = register_module("out_proj",
                              nn::Conv2d(nn::Conv2dOptions(memory_channels, memory_channels, 1)));
}

MemoryEntry MemoryEncoderImpl::forward(const torch::Tensor& features, const torch::Tensor& mask,
                                       int frame_index, bool is_prompt_frame) {
  if (features.dim() != 3) throw ShapeError("memory encoder features must be [c, h, w]");
  if (mask.dim() != 2) throw ShapeError("memory encoder mask must be [h, w]");
  const auto h_l = features.size(1);
  const auto w_l = features.size(2);
  if (mask.size(0) < h_l || mask.size(1) < w_l) {
    throw ShapeError("mask resolution is below the feature resolution");
  }
  auto coverage = area_pool_mask(mask, h_l, w_l).to(features.scalar_type()).detach();
  auto x = pix_proj_(features.unsqueeze(0)) + mask_proj_(coverage.unsqueeze(0).unsqueeze(0));
  x = x + fuse2_(torch::gelu(fuse1_(x)));
  MemoryEntry entry;
  entry.features = out_proj_(x).squeeze(0);
  entry.mask_lowres = coverage.ge(0.5).to(features.scalar_type());
  entry.frame_index = frame_index;
  entry.is_prompt_frame = is_prompt_frame;
  return entry;
}

MemoryAttentionBlockImpl::MemoryAttentionBlockImpl(int64_t dim, int64_t memory_dim, int64_t heads,
                                                   int64_t mlp_dim) {
  self_attn = register_module("self_attn", Attention(dim, heads));
  cross_attn = register_module("cross_attn", Attention(dim, heads, 1, memory_dim));
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm3 = register_module("norm3", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", nn::Linear(dim, mlp_dim));
  fc2 = register_module("fc2", nn::Linear(mlp_dim, dim));
}

torch::Tensor MemoryAttentionBlockImpl::forward(torch::Tensor x, const torch::Tensor& memory,
                                                const RopeTables& rope) {
  auto n = norm1(x);
  x = x + self_attn(n, n, n, &rope, &rope);
  if (memory.defined() && memory.size(1) > 0) {
    n = norm2(x);
    x = x + cross_attn(n, memory, memory, &rope, &rope);
  }
  return x + fc2(torch::gelu(fc1(norm3(x))));
}

MemoryAttentionImpl::MemoryAttentionImpl(int64_t dim, int64_t memory_dim, int64_t num_blocks,
                                         int64_t heads, int64_t mlp_dim,
                                         int64_t max_temporal_offset, double rope_theta)
    : heads_(heads), max_offset_(max_temporal_offset), rope_theta_(rope_theta) {
  if ((dim / heads) % 4 != 0) throw ShapeError("memory attention head dim must be a multiple of 4");
  blocks = register_module("blocks", nn::ModuleList());
  for (int64_t b = 0; b < num_blocks; ++b) {
    blocks->push_back(MemoryAttentionBlock(dim, memory_dim, heads, mlp_dim));
  }
  final_norm = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
  temporal_embedding = register_parameter(
      "temporal_embedding", torch::randn({max_temporal_offset + 1, memory_dim}) * 0.02);
}

int64_t MemoryAttentionImpl::temporal_slot(const MemoryEntry& entry, int current_frame) const {
  if (entry.is_prompt_frame) return 0;
  const int64_t offset = std::abs(current_frame - entry.frame_index);
  return std::clamp<int64_t>(offset, 1, max_offset_);
}

torch::Tensor MemoryAttentionImpl::forward(const torch::Tensor& current,
                                           const std::vector<MemoryEntry>& selected,
                                           int current_frame) {
  if (current.dim() != 3) throw ShapeError("memory attention input must be [c, h, w]");
  const auto c = current.size(0);
  const auto h = current.size(1);
  const auto w = current.size(2);
  auto x = current.flatten(1).t().unsqueeze(0);  // [1, N, c]
  torch::Tensor memory;
  if (!selected.empty()) {
    std::vector<torch::Tensor> tokens;
    for (const auto& e : selected) {
      if (e.features.size(1) != h || e.features.size(2) != w) {
        throw ShapeError("memory entry resolution differs from the current frame");
      }
      tokens.push_back(e.features.flatten(1).t() + temporal_embedding[temporal_slot(e, current_frame)]);
    }
    memory = torch::cat(tokens, 0).unsqueeze(0);
  }
  const auto rope = make_rope_tables(c / heads_, h, w, rope_theta_, current.options());
  for (const auto& block : *blocks) {
    x = block->as<MemoryAttentionBlock>()->forward(x, memory, rope);
  }
  x = final_norm(x);
  return x.squeeze(0).t().reshape({c, h, w});
}

}  // namespace pvseg
