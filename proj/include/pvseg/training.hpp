#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pvseg/data_synth.hpp"
#include "pvseg/model.hpp"
#include "pvseg/prompt.hpp"

namespace pvseg {

/// Loss components for one frame or a whole sequence.
struct LossBundle {
  torch::Tensor mask_loss;    ///< wbce + wiou
  torch::Tensor iou_loss;     ///< mean absolute error of the IoU head
  torch::Tensor object_loss;  ///< binary cross-entropy of the occlusion head
  torch::Tensor total;
};

struct MaskLossTerms {
  torch::Tensor wbce;
  torch::Tensor wiou;
  torch::Tensor total;
};

/// Boundary-weighted BCE plus weighted soft IoU. The weight map is
/// 1 + 5 |avgpool31(gt) - gt| with zero padding counted in the average.
/// Throws ValidationError if gt is not binary.
MaskLossTerms weighted_mask_loss(const torch::Tensor& logits, const torch::Tensor& gt);

constexpr double kMaskLossWeight = 20.0;
constexpr double kIouLossWeight = 1.0;
constexpr double kObjectLossWeight = 1.0;

/// total = 20 mask + 1 iou + 1 object.
LossBundle total_loss(torch::Tensor mask_loss, torch::Tensor iou_loss, torch::Tensor object_loss);

/// Per-frame losses. The mask term uses the lowest-loss candidate mask; the
/// IoU head regresses the true IoU of every candidate.
LossBundle frame_loss(const SegmentationOutput& output, const BinaryMask& gt);

struct PromptProbabilities {
  double mask = 0.5;
  double click = 0.25;
  double box = 0.25;
};

struct CorrectionProbabilities {
  double error_region = 0.9;
  double ground_truth = 0.1;
};

/// Mask, positive click uniform over gt, or tight box. Throws ValidationError
/// when gt is empty.
Prompt sample_initial_prompt(const BinaryMask& gt, int frame, std::mt19937_64& rng,
                             const PromptProbabilities& probs = {});

enum class ClickSource { kErrorRegion, kGroundTruth, kFallback };

struct CorrectiveClick {
  Prompt prompt;
  ClickSource source = ClickSource::kErrorRegion;
};

/// Stochastic mode samples a pixel uniformly from the error region (pred xor
/// gt) or from gt; deterministic mode takes the interior-most pixel of the
/// largest error component. Negative polarity iff the pixel is a false
/// positive. An empty error region falls back to a positive gt click;
/// nullopt when both masks are empty.
std::optional<CorrectiveClick> sample_corrective_click(const BinaryMask& pred, const BinaryMask& gt,
                                                       int frame, std::mt19937_64& rng,
                                                       bool deterministic,
                                                       const CorrectionProbabilities& probs = {});

/// The robot user's first click: interior-most gt pixel, positive.
std::optional<Prompt> initial_robot_click(const BinaryMask& gt, int frame);

struct TrainConfig {
  int epochs = 1;
  int batch_size = 1;
  int max_steps = 0;  ///< 0 = epochs * ceil(clips / batch_size)
  int sequence_length = 8;
  int corrective_frames = 1;  ///< 0 or 1
  double image_probability = 0.2;
  PromptProbabilities prompt_probs;
  CorrectionProbabilities correction_probs;
  double lr_encoder = 3e-4;
  double lr_other = 6e-5;
  double layer_decay = 0.9;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool sgd_debug = false;  ///< plain gradient descent, no decay
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Cosine decay from `base` at step 0 to 0 at step total-1.
double cosine_lr(double base, int step, int total_steps);

struct StepMetrics {
  int step = 0;
  int epoch = 0;
  double total = 0.0;
  double mask = 0.0;
  double iou = 0.0;
  double object = 0.0;
  double lr_encoder = 0.0;
  double lr_other = 0.0;
};

nlohmann::json to_json(const StepMetrics& m);

/// One training sequence: a clip window, its target object and how it is prompted.
struct SequencePlan {
  int clip = 0;
  int object = 0;
  int start = 0;
  int length = 8;
  Prompt initial_prompt;
  std::optional<int> corrective_frame;  ///< relative to start
  std::uint64_t selection_seed = 0;
};

/// Unrolls the model over a planned sequence with stochastic memory selection
/// and returns the loss averaged over frames.
LossBundle sequence_loss(SegmentationModel& model, const ClipRecord& record,
                         const SequencePlan& plan, std::mt19937_64& rng,
                         const CorrectionProbabilities& correction = {});

class Trainer {
public:
  Trainer(SegmentationModel model, TrainConfig config, const Dataset& dataset);

  /// One optimiser step over `batch_size` sequences. Throws TrainingError on
  /// a non-finite loss.
  StepMetrics step();

  /// Draws the next sequence from the seeded order.
  SequencePlan next_plan();

  int total_steps() const { return total_steps_; }
  int steps_per_epoch() const { return steps_per_epoch_; }
  int steps_done() const { return step_; }
  SegmentationModel& model() { return model_; }
  torch::optim::Optimizer& optimizer() { return *optimizer_; }

  /// Learning rate of each parameter group in order: encoder stages first,
  /// then everything else.
  std::vector<double> group_lrs() const;

private:
  void apply_schedule();

  SegmentationModel model_;
  TrainConfig config_;
  const Dataset& dataset_;
  std::unique_ptr<torch::optim::Optimizer> optimizer_;
  std::vector<double> base_lrs_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  int step_ = 0;
  int total_steps_ = 0;
  int steps_per_epoch_ = 0;
};

struct TrainOutput {
  std::filesystem::path directory;  ///< checkpoints and metrics.ndjson go here
  std::function<void(const StepMetrics&)> on_step;
};

/// Full run: builds the model from (model_config, config.seed), trains, writes
/// one checkpoint per epoch plus checkpoint.pt and an NDJSON metrics log when
/// a directory is given.
SegmentationModel train(const ModelConfig& model_config, const TrainConfig& config,
                        const Dataset& dataset, const TrainOutput& output = {});

}  // namespace pvseg
