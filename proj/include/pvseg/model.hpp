#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "pvseg/data_synth.hpp"
#include "pvseg/decoder.hpp"
#include "pvseg/encoder.hpp"
#include "pvseg/memory.hpp"
#include "pvseg/model_config.hpp"
#include "pvseg/mpg.hpp"
#include "pvseg/prompt.hpp"
#include "pvseg/tfi.hpp"
#include "pvseg/tracker.hpp"

namespace pvseg {

/// Everything produced while segmenting one frame.
struct FrameResult {
  SegmentationOutput output;
  BinaryMask mask;  ///< the mask propagated to memory and returned to callers
  SimilarityResult selection;
  torch::Tensor features;  ///< I_t, kept for memory encoding
};

/// Prompts keyed by frame index.
using PromptHistory = std::map<int, std::vector<Prompt>>;

class SegmentationModelImpl : public torch::nn::Module {
public:
  explicit SegmentationModelImpl(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Final-stage spatiotemporal features I_t [c_L, h_L, w_L] for frame `t` of
  /// `frames` [n, 3, h, w]. The window ends at t and replicate-pads before 0.
  torch::Tensor frame_features(const torch::Tensor& frames, int t);

  /// Selects memories from `bank`, conditions `features`, generates memory
  /// prompts and decodes with the given prompts (possibly none).
  FrameResult segment(const torch::Tensor& features, const MemoryBank& bank, int frame,
                      const std::vector<Prompt>& prompts, const SelectionConfig& selection,
                      std::uint64_t seed, int64_t height, int64_t width);

  /// Encodes a frame and its mask into a memory entry.
  MemoryEntry encode_memory(const torch::Tensor& features, const BinaryMask& mask, int frame,
                            bool is_prompt_frame);

  /// Parameters of each top-level component, for optimiser groups.
  std::vector<torch::Tensor> encoder_stage_parameters(int64_t stage);
  std::vector<torch::Tensor> non_encoder_parameters();

  ImageEncoder encoder{nullptr};
  TemporalFeatureIntegrator tfi{nullptr};
  MemoryEncoder memory_encoder{nullptr};
  MemoryAttention memory_attention{nullptr};
  MemoryPromptGenerator mpg{nullptr};  ///< null when the config disables it
  PromptEncoder prompt_encoder{nullptr};
  MaskDecoder decoder{nullptr};

private:
  ModelConfig config_;
};
TORCH_MODULE(SegmentationModel);

/// Builds a model whose initial parameters depend only on `seed`.
SegmentationModel make_model(const ModelConfig& config, std::uint64_t seed);

/// Mask output for a frame whose only prompt is a mask: the prompt itself.
std::optional<BinaryMask> mask_prompt_override(const std::vector<Prompt>& prompts);

/// Inference tracker over a model: top-k selection, no gradients. The first
/// prompted frame is pinned in memory; every other frame enters the ring.
class ModelTracker : public Tracker {
public:
  explicit ModelTracker(SegmentationModel model);

  void start(const VideoClip& clip) override;
  BinaryMask add_prompts(int frame, const std::vector<Prompt>& prompts) override;
  BinaryMask track(int frame) override;

  /// Re-enters a frame with a known mask (no decoding), as a session does
  /// when it rebuilds memory from stored results.
  void restore(int frame, const BinaryMask& mask, bool is_prompt_frame);

  const MemoryBank& bank() const { return bank_; }

private:
  torch::Tensor features(int frame);
  void remember(int frame, const torch::Tensor& features, const BinaryMask& mask);

  SegmentationModel model_;
  torch::Tensor frames_;
  std::map<int, torch::Tensor> feature_cache_;
  MemoryBank bank_;
  std::optional<int> prompt_frame_;
};

/// Runs the tracker over frames [from_frame, n): prompted frames use their
/// prompts, others propagate. Frames before from_frame are restored from
/// `masks` to rebuild memory. Returns the full masklet (earlier frames copied).
Masklet propagate(ModelTracker& tracker, const VideoClip& clip, const PromptHistory& prompts,
                  const Masklet& masks, int from_frame);

/// Segments a single frame with its accumulated prompts after rebuilding
/// memory from earlier stored masks.
BinaryMask predict_prompted_frame(ModelTracker& tracker, const VideoClip& clip,
                                  const PromptHistory& prompts, const Masklet& masks, int frame);

/// Versioned parameter archive keyed by module path plus a config snapshot.
void save_checkpoint(SegmentationModel& model, const std::filesystem::path& path);
SegmentationModel load_checkpoint(const std::filesystem::path& path);

/// True when both models hold bitwise-equal parameters and buffers.
bool parameters_equal(SegmentationModel& a, SegmentationModel& b);

}  // namespace pvseg
