#include "pvseg/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace F = torch::nn::functional;

MaskLossTerms weighted_mask_loss(const torch::Tensor& logits, const torch::Tensor& gt) {
  if (logits.sizes() != gt.sizes()) throw ShapeError("logits and gt must have the same shape");
  if (logits.dim() != 2) throw ShapeError("mask loss expects [h, w]");
  auto g = gt.to(logits.scalar_type());
  if (!torch::logical_or(g.eq(0), g.eq(1)).all().item<bool>()) {
    throw ValidationError("ground-truth mask must be binary", "gt");
  }
  auto g4 = g.unsqueeze(0).unsqueeze(0);
  auto pooled = F::avg_pool2d(g4, F::AvgPool2dFuncOptions(31).stride(1).padding(15)).squeeze(0).squeeze(0);
  auto w = 1.0 + 5.0 * torch::abs(pooled - g);

  auto bce = F::binary_cross_entropy_with_logits(
      logits, g, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
  MaskLossTerms out;
  out.wbce = (w * bce).sum() / w.sum();
  auto p = torch::sigmoid(logits);
  auto inter = (w * p * g).sum();
  auto uni = (w * (p + g - p * g)).sum();
  out.wiou = 1.0 - (inter + 1.0) / (uni + 1.0);
  out.total = out.wbce + out.wiou;
  return out;
}

LossBundle total_loss(torch::Tensor mask_loss, torch::Tensor iou_loss, torch::Tensor object_loss) {
  LossBundle b;
  b.total = kMaskLossWeight * mask_loss + kIouLossWeight * iou_loss + kObjectLossWeight * object_loss;
  b.mask_loss = std::move(mask_loss);
  b.iou_loss = std::move(iou_loss);
  b.object_loss = std::move(object_loss);
  return b;
}

LossBundle frame_loss(const SegmentationOutput& output, const BinaryMask& gt) {
  const auto opts = output.mask_logits.options();
  auto g = mask_to_tensor(gt, opts);
  const auto k = output.mask_logits.size(0);
  std::vector<torch::Tensor> per_mask;
  std::vector<torch::Tensor> true_iou;
  for (int64_t i = 0; i < k; ++i) {
    const auto& logits = output.mask_logits[i];
    per_mask.push_back(weighted_mask_loss(logits, g).total);
    auto pred = logits.detach().gt(0).to(opts.dtype());
    auto inter = (pred * g).sum();
    auto uni = (pred + g - pred * g).sum();
    true_iou.push_back(torch::where(uni.gt(0), inter / uni.clamp_min(1.0), torch::ones_like(uni)));
  }
  auto mask_loss = torch::stack(per_mask).min();
  auto iou_loss = torch::abs(output.iou_pred - torch::stack(true_iou)).mean();
  auto visible = torch::full({}, gt.empty() ? 0.0 : 1.0, opts);
  auto object_loss = F::binary_cross_entropy_with_logits(output.object_logit, visible);
  return total_loss(mask_loss, iou_loss, object_loss);
}

namespace {

std::vector<int> foreground_indices(const BinaryMask& m) {
  std::vector<int> out;
  for (std::size_t i = 0; i < m.data().size(); ++i) {
    if (m.data()[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

Pixel uniform_pixel(const BinaryMask& region, std::mt19937_64& rng) {
  const auto idx = foreground_indices(region);
  std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
  const int i = idx[pick(rng)];
  return {i % region.width(), i / region.width()};
}

Prompt click_for(const BinaryMask& gt, Pixel p, int frame) {
  return Prompt::make_click(frame, p, gt.at(p) ? Polarity::kPositive : Polarity::kNegative);
}

}  // namespace

Prompt sample_initial_prompt(const BinaryMask& gt, int frame, std::mt19937_64& rng,
                             const PromptProbabilities& probs) {
  if (gt.empty()) throw ValidationError("prompt frame has an empty ground-truth mask", "gt");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  if (u < probs.mask) return Prompt::make_mask(frame, gt);
  if (u < probs.mask + probs.click) {
    return Prompt::make_click(frame, uniform_pixel(gt, rng), Polarity::kPositive);
  }
  return Prompt::make_box(frame, *tight_box(gt));
}

std::optional<CorrectiveClick> sample_corrective_click(const BinaryMask& pred, const BinaryMask& gt,
                                                       int frame, std::mt19937_64& rng,
                                                       bool deterministic,
                                                       const CorrectionProbabilities& probs) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw ShapeError("prediction and ground truth differ in size");
  }
  if (pred.empty() && gt.empty()) return std::nullopt;
  const auto error = mask_xor(pred, gt);
  auto fallback = [&]() -> std::optional<CorrectiveClick> {
    if (gt.empty()) return std::nullopt;
    Pixel p = deterministic ? *interior_most_pixel(gt) : uniform_pixel(gt, rng);
    return CorrectiveClick{Prompt::make_click(frame, p, Polarity::kPositive), ClickSource::kFallback};
  };
  if (deterministic) {
    if (error.empty()) return fallback();
    const auto p = *interior_most_pixel(largest_component(error));
    return CorrectiveClick{click_for(gt, p, frame), ClickSource::kErrorRegion};
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < probs.error_region) {
    if (error.empty()) return fallback();
    return CorrectiveClick{click_for(gt, uniform_pixel(error, rng), frame), ClickSource::kErrorRegion};
  }
  if (gt.empty()) return std::nullopt;
  return CorrectiveClick{Prompt::make_click(frame, uniform_pixel(gt, rng), Polarity::kPositive),
                         ClickSource::kGroundTruth};
}

std::optional<Prompt> initial_robot_click(const BinaryMask& gt, int frame) {
  auto p = interior_most_pixel(gt);
  if (!p) return std::nullopt;
  return Prompt::make_click(frame, *p, Polarity::kPositive);
}

void TrainConfig::validate() const {
  auto near_one = [](double s) { return std::abs(s - 1.0) <= 1e-9; };
  if (epochs < 1) throw ConfigError("epochs must be >= 1", "epochs");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1", "batch_size");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0", "max_steps");
  if (sequence_length < 1) throw ConfigError("sequence_length must be >= 1", "sequence_length");
  if (corrective_frames < 0 || corrective_frames > 1) {
    throw ConfigError("corrective_frames must be 0 or 1", "corrective_frames");
  }
  if (image_probability < 0.0 || image_probability > 1.0) {
    throw ConfigError("image_probability must lie in [0, 1]", "image_probability");
  }
  if (!near_one(prompt_probs.mask + prompt_probs.click + prompt_probs.box)) {
    throw ConfigError("prompt probabilities must sum to 1", "prompt_probs");
  }
  if (!near_one(correction_probs.error_region + correction_probs.ground_truth)) {
    throw ConfigError("corrective click probabilities must sum to 1", "correction_probs");
  }
  if (lr_encoder < 0.0 || lr_other < 0.0) throw ConfigError("learning rates must be >= 0", "lr");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},
       {"sequence_length", c.sequence_length},
       {"corrective_frames", c.corrective_frames},
       {"image_probability", c.image_probability},
       {"prompt_probs",
        {{"mask", c.prompt_probs.mask}, {"click", c.prompt_probs.click}, {"box", c.prompt_probs.box}}},
       {"correction_probs",
        {{"error_region", c.correction_probs.error_region},
         {"ground_truth", c.correction_probs.ground_truth}}},
       {"lr_encoder", c.lr_encoder},
       {"lr_other", c.lr_other},
       {"layer_decay", c.layer_decay},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"sgd_debug", c.sgd_debug},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.sequence_length = j.value("sequence_length", d.sequence_length);
  c.corrective_frames = j.value("corrective_frames", d.corrective_frames);
  c.image_probability = j.value("image_probability", d.image_probability);
  if (j.contains("prompt_probs")) {
    const auto& p = j["prompt_probs"];
    c.prompt_probs = {p.value("mask", 0.5), p.value("click", 0.25), p.value("box", 0.25)};
  }
  if (j.contains("correction_probs")) {
    const auto& p = j["correction_probs"];
    c.correction_probs = {p.value("error_region", 0.9), p.value("ground_truth", 0.1)};
  }
  c.lr_encoder = j.value("lr_encoder", d.lr_encoder);
  c.lr_other = j.value("lr_other", d.lr_other);
  c.layer_decay = j.value("layer_decay", d.layer_decay);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.sgd_debug = j.value("sgd_debug", d.sgd_debug);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

double cosine_lr(double base, int step, int total_steps) {
  if (total_steps <= 1) return base;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},         {"epoch", m.epoch},           {"loss", m.total},
          {"mask_loss", m.mask},    {"iou_loss", m.iou},          {"object_loss", m.object},
          {"lr_encoder", m.lr_encoder}, {"lr_other", m.lr_other}};
}

LossBundle sequence_loss(SegmentationModel& model, const ClipRecord& record,
                         const SequencePlan& plan, std::mt19937_64& rng,
                         const CorrectionProbabilities& correction) {
  const auto frames = record.clip.frames.narrow(0, plan.start, plan.length);
  const int64_t h = frames.size(2);
  const int64_t w = frames.size(3);
  MemoryBank bank(static_cast<int>(model->config().memory_capacity));
  SelectionConfig sel = model->config().selection;
  sel.mode = SelectionMode::kStochastic;

  torch::Tensor mask_sum;
  torch::Tensor iou_sum;
  torch::Tensor object_sum;
  for (int i = 0; i < plan.length; ++i) {
    const auto gt = record.annotation.mask(plan.object, plan.start + i);
    auto features = model->frame_features(frames, i);
    const std::uint64_t seed = plan.selection_seed + static_cast<std::uint64_t>(i);

    std::vector<Prompt> prompts;
    if (i == 0) prompts.push_back(plan.initial_prompt);
    if (plan.corrective_frame && *plan.corrective_frame == i) {
      BinaryMask first_guess;
      {
        torch::NoGradGuard no_grad;
        first_guess = model->segment(features.detach(), bank, i, {}, sel, seed, h, w).mask;
      }
      if (auto click = sample_corrective_click(first_guess, gt, i, rng, false, correction)) {
        prompts.push_back(click->prompt);
      }
    }

    auto result = model->segment(features, bank, i, prompts, sel, seed, h, w);
    auto loss = frame_loss(result.output, gt);
    mask_sum = i == 0 ? loss.mask_loss : mask_sum + loss.mask_loss;
    iou_sum = i == 0 ? loss.iou_loss : iou_sum + loss.iou_loss;
    object_sum = i == 0 ? loss.object_loss : object_sum + loss.object_loss;

    if (i + 1 < plan.length) {
      auto entry = model->encode_memory(features, result.mask, i, i == 0);
      if (i == 0) {
        bank.set_prompt_entry(std::move(entry));
      } else {
        bank.insert(std::move(entry));
      }
    }
  }
  const double n = plan.length;
  return total_loss(mask_sum / n, iou_sum / n, object_sum / n);
}

Trainer::Trainer(SegmentationModel model, TrainConfig config, const Dataset& dataset)
    : model_(std::move(model)), config_(std::move(config)), dataset_(dataset), rng_(config_.seed) {
  config_.validate();
  if (dataset_.empty()) throw ValidationError("training dataset is empty", "data");
  steps_per_epoch_ =
      (static_cast<int>(dataset_.size()) + config_.batch_size - 1) / config_.batch_size;
  total_steps_ = config_.max_steps > 0 ? config_.max_steps : config_.epochs * steps_per_epoch_;

  const auto stages = model_->encoder->num_stages();
  std::vector<std::vector<torch::Tensor>> groups;
  for (int64_t s = 0; s < stages; ++s) {
    groups.push_back(model_->encoder_stage_parameters(s));
    base_lrs_.push_back(config_.lr_encoder *
                        std::pow(config_.layer_decay, static_cast<double>(stages - 1 - s)));
  }
  groups.push_back(model_->non_encoder_parameters());
  base_lrs_.push_back(config_.lr_other);

  std::size_t grouped = 0;
  for (const auto& g : groups) grouped += g.size();
  if (grouped != model_->parameters().size()) {
    throw TrainingError("optimiser groups cover " + std::to_string(grouped) + " of " +
                        std::to_string(model_->parameters().size()) + " parameters");
  }

  std::vector<torch::optim::OptimizerParamGroup> param_groups;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (config_.sgd_debug) {
      param_groups.emplace_back(groups[i],
                                std::make_unique<torch::optim::SGDOptions>(base_lrs_[i]));
    } else {
      auto opts = std::make_unique<torch::optim::AdamWOptions>(base_lrs_[i]);
      opts->betas({config_.beta1, config_.beta2}).weight_decay(config_.weight_decay);
      param_groups.emplace_back(groups[i], std::move(opts));
    }
  }
  if (config_.sgd_debug) {
    optimizer_ = std::make_unique<torch::optim::SGD>(std::move(param_groups),
                                                     torch::optim::SGDOptions(config_.lr_other));
  } else {
    optimizer_ = std::make_unique<torch::optim::AdamW>(
        std::move(param_groups), torch::optim::AdamWOptions(config_.lr_other)
                                     .betas({config_.beta1, config_.beta2})
                                     .weight_decay(config_.weight_decay));
  }
  apply_schedule();
}

void Trainer::apply_schedule() {
  auto& groups = optimizer_->param_groups();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    groups[i].options().set_lr(cosine_lr(base_lrs_[i], step_, total_steps_));
  }
}

std::vector<double> Trainer::group_lrs() const {
  std::vector<double> out;
  for (const auto& g : optimizer_->param_groups()) out.push_back(g.options().get_lr());
  return out;
}

SequencePlan Trainer::next_plan() {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SequencePlan plan;
  const bool image_mode = unit(rng_) < config_.image_probability;
  for (std::size_t attempt = 0; attempt <= 4 * dataset_.size(); ++attempt) {
    if (cursor_ == order_.size()) {
      order_.resize(dataset_.size());
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    plan.clip = order_[cursor_++];
    const auto& rec = dataset_[static_cast<std::size_t>(plan.clip)];
    const int n = rec.clip.num_frames();
    plan.length = image_mode ? 1 : std::min(config_.sequence_length, n);
    plan.start = std::uniform_int_distribution<int>(0, n - plan.length)(rng_);
    std::vector<int> visible;
    for (int o = 0; o < rec.annotation.num_objects(); ++o) {
      if (rec.annotation.visibility[o][plan.start].item<std::uint8_t>()) visible.push_back(o);
    }
    if (visible.empty()) continue;
    plan.object = visible[std::uniform_int_distribution<std::size_t>(0, visible.size() - 1)(rng_)];
    plan.initial_prompt = sample_initial_prompt(rec.annotation.mask(plan.object, plan.start), 0,
                                                rng_, config_.prompt_probs);
    plan.corrective_frame.reset();
    if (config_.corrective_frames > 0 && plan.length > 1) {
      plan.corrective_frame = std::uniform_int_distribution<int>(1, plan.length - 1)(rng_);
    }
    plan.selection_seed = rng_();
    return plan;
  }
  throw TrainingError("no clip has a visible object to prompt");
}

StepMetrics Trainer::step() {
  apply_schedule();
  StepMetrics m;
  m.step = step_;
  m.epoch = step_ / steps_per_epoch_;
  const auto lrs = group_lrs();
  m.lr_encoder = lrs[lrs.size() - 2];
  m.lr_other = lrs.back();

  optimizer_->zero_grad();
  for (int b = 0; b < config_.batch_size; ++b) {
    const auto plan = next_plan();
    auto loss = sequence_loss(model_, dataset_[static_cast<std::size_t>(plan.clip)], plan, rng_,
                              config_.correction_probs);
    const double total = loss.total.item<double>();
    if (!std::isfinite(total)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step_) + " (clip " +
                          dataset_[static_cast<std::size_t>(plan.clip)].id + ", object " +
                          std::to_string(plan.object) +
                          "): mask=" + std::to_string(loss.mask_loss.item<double>()) +
                          " iou=" + std::to_string(loss.iou_loss.item<double>()) +
                          " object=" + std::to_string(loss.object_loss.item<double>()));
    }
    (loss.total / static_cast<double>(config_.batch_size)).backward();
    m.total += total / config_.batch_size;
    m.mask += loss.mask_loss.item<double>() / config_.batch_size;
    m.iou += loss.iou_loss.item<double>() / config_.batch_size;
    m.object += loss.object_loss.item<double>() / config_.batch_size;
  }
  optimizer_->step();
  ++step_;
  return m;
}

SegmentationModel train(const ModelConfig& model_config, const TrainConfig& config,
                        const Dataset& dataset, const TrainOutput& output) {
  Trainer trainer(make_model(model_config, config.seed), config, dataset);
  std::ofstream metrics;
  if (!output.directory.empty()) {
    std::filesystem::create_directories(output.directory);
    metrics.open(output.directory / "metrics.ndjson");
    nlohmann::json echo = config;
    std::ofstream(output.directory / "train_config.json") << echo.dump(2) << '\n';
  }
  for (int s = 0; s < trainer.total_steps(); ++s) {
    const auto m = trainer.step();
    if (metrics.is_open()) metrics << to_json(m).dump() << '\n' << std::flush;
    if (output.on_step) output.on_step(m);
    const bool epoch_end = (s + 1) % trainer.steps_per_epoch() == 0;
    if (!output.directory.empty() && epoch_end) {
      save_checkpoint(trainer.model(),
                      output.directory / ("checkpoint_epoch" + std::to_string(m.epoch) + ".pt"));
    }
  }
  if (!output.directory.empty()) save_checkpoint(trainer.model(), output.directory / "checkpoint.pt");
  return trainer.model();
}

}  // namespace pvseg
