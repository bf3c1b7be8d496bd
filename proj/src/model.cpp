#include "pvseg/model.hpp"

#include <algorithm>
#include <set>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace {

constexpr int64_t kCheckpointVersion = 1;

void append_parameters(std::vector<torch::Tensor>& out, const torch::nn::Module& m) {
  for (const auto& p : m.parameters()) out.push_back(p);
}

}  // namespace

SegmentationModelImpl::SegmentationModelImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto c_l = config_.encoder.final_channels();
  const auto c_mem = config_.memory_channels();
  encoder = register_module("encoder", ImageEncoder(config_.encoder));
  tfi = register_module("tfi", TemporalFeatureIntegrator(config_.encoder, config_.temporal_window));
  memory_encoder = register_module("memory_encoder", MemoryEncoder(c_l, c_mem));
  memory_attention = register_module(
      "memory_attention",
      MemoryAttention(c_l, c_mem, config_.memory_blocks, config_.memory_heads,
                      config_.memory_mlp_dim, config_.max_temporal_offset, config_.rope_theta));
  if (config_.mpg_tokens > 0) {
    mpg = register_module("mpg", MemoryPromptGenerator(config_.mpg_tokens, config_.decoder_dim,
                                                       c_mem, config_.mpg_masked));
  }
  prompt_encoder = register_module("prompt_encoder", PromptEncoder(config_.decoder_dim));
  decoder = register_module(
      "decoder", MaskDecoder(c_l, config_.decoder_dim, config_.decoder_depth,
                             config_.decoder_heads, config_.decoder_mlp_dim,
                             config_.num_multimask));
}

torch::Tensor SegmentationModelImpl::frame_features(const torch::Tensor& frames, int t) {
  if (frames.dim() != 4) throw ShapeError("frames must be [n, 3, h, w]");
  if (t < 0 || t >= frames.size(0)) throw ValidationError("frame index out of range", "frame");
  std::vector<int64_t> idx;
  for (int64_t i = t - config_.temporal_window + 1; i <= t; ++i) idx.push_back(std::max<int64_t>(i, 0));
  auto window = frames.index_select(0, torch::tensor(idx, torch::kInt64));
  auto pyramid = encoder(frames[t]);
  return tfi(window, pyramid).final();
}

FrameResult SegmentationModelImpl::segment(const torch::Tensor& features, const MemoryBank& bank,
                                           int frame, const std::vector<Prompt>& prompts,
                                           const SelectionConfig& selection, std::uint64_t seed,
                                           int64_t height, int64_t width) {
  FrameResult r;
  r.features = features;
  r.selection = select_memories(bank, features.detach(), selection, seed);
  const auto entries = selected_entries(bank, r.selection);
  auto conditioned = memory_attention(features, entries, frame);

  torch::Tensor memory_prompts;
  if (mpg) memory_prompts = mpg(MemoryContext::from_entries(entries));

  const auto grid_h = features.size(1);
  const auto grid_w = features.size(2);
  const auto opts = features.options();
  auto embeddings = prompt_encoder(prompts, height, width, grid_h, grid_w, opts);
  r.output = decoder(conditioned, embeddings.sparse, embeddings.dense,
                     prompt_encoder->dense_pe(grid_h, grid_w, opts), memory_prompts, height, width);
  if (auto m = mask_prompt_override(prompts)) {
    r.mask = std::move(*m);
  } else {
    r.mask = finalize_mask(r.output);
  }
  return r;
}

MemoryEntry SegmentationModelImpl::encode_memory(const torch::Tensor& features,
                                                 const BinaryMask& mask, int frame,
                                                 bool is_prompt_frame) {
  return memory_encoder(features, mask_to_tensor(mask, features.options()), frame, is_prompt_frame);
}

std::vector<torch::Tensor> SegmentationModelImpl::encoder_stage_parameters(int64_t stage) {
  auto out = encoder->stage_parameters(stage);
  const auto i = static_cast<std::size_t>(stage);
  append_parameters(out, *tfi->temporal_stems[i]);
  append_parameters(out, *tfi->temporal_blocks[i]);
  append_parameters(out, *tfi->st_fusions[i]);
  append_parameters(out, *tfi->ts_fusions[i]);
  append_parameters(out, *tfi->integrations[i]);
  append_parameters(out, *tfi->downsamples[i]);
  return out;
}

std::vector<torch::Tensor> SegmentationModelImpl::non_encoder_parameters() {
  std::vector<torch::Tensor> out;
  append_parameters(out, *memory_encoder);
  append_parameters(out, *memory_attention);
  if (mpg) append_parameters(out, *mpg);
  append_parameters(out, *prompt_encoder);
  append_parameters(out, *decoder);
  return out;
}

SegmentationModel make_model(const ModelConfig& config, std::uint64_t seed) {
  torch::manual_seed(seed);
  return SegmentationModel(config);
}

std::optional<BinaryMask> mask_prompt_override(const std::vector<Prompt>& prompts) {
  if (prompts.empty()) return std::nullopt;
  const Prompt* mask = nullptr;
  for (const auto& p : prompts) {
    if (p.kind != PromptKind::kMask) return std::nullopt;
    mask = &p;
  }
  return mask->mask;
}

ModelTracker::ModelTracker(SegmentationModel model)
    : model_(std::move(model)), bank_(static_cast<int>(model_->config().memory_capacity)) {}

void ModelTracker::start(const VideoClip& clip) {
  frames_ = clip.frames;
  feature_cache_.clear();
  bank_.clear();
  prompt_frame_.reset();
}

torch::Tensor ModelTracker::features(int frame) {
  auto it = feature_cache_.find(frame);
  if (it != feature_cache_.end()) return it->second;
  torch::NoGradGuard no_grad;
  auto f = model_->frame_features(frames_, frame);
  feature_cache_.emplace(frame, f);
  return f;
}

void ModelTracker::remember(int frame, const torch::Tensor& features, const BinaryMask& mask) {
  torch::NoGradGuard no_grad;
  const bool pinned = prompt_frame_ && *prompt_frame_ == frame;
  auto entry = model_->encode_memory(features, mask, frame, pinned);
  if (pinned) {
    bank_.set_prompt_entry(std::move(entry));
  } else {
    bank_.insert(std::move(entry));
  }
}

BinaryMask ModelTracker::add_prompts(int frame, const std::vector<Prompt>& prompts) {
  torch::NoGradGuard no_grad;
  if (!prompt_frame_) prompt_frame_ = frame;
  // A revisited frame must not attend to its own earlier memory.
  bank_.erase(frame);
  auto f = features(frame);
  SelectionConfig sel = model_->config().selection;
  sel.mode = SelectionMode::kTopK;
  auto r = model_->segment(f, bank_, frame, prompts, sel, 0, frames_.size(2), frames_.size(3));
  remember(frame, f, r.mask);
  return r.mask;
}

BinaryMask ModelTracker::track(int frame) {
  torch::NoGradGuard no_grad;
  bank_.erase(frame);
  auto f = features(frame);
  SelectionConfig sel = model_->config().selection;
  sel.mode = SelectionMode::kTopK;
  auto r = model_->segment(f, bank_, frame, {}, sel, 0, frames_.size(2), frames_.size(3));
  remember(frame, f, r.mask);
  return r.mask;
}

void ModelTracker::restore(int frame, const BinaryMask& mask, bool is_prompt_frame) {
  if (is_prompt_frame && !prompt_frame_) prompt_frame_ = frame;
  remember(frame, features(frame), mask);
}

namespace {

std::optional<int> first_prompted_frame(const PromptHistory& prompts) {
  for (const auto& [frame, list] : prompts) {
    if (!list.empty()) return frame;
  }
  return std::nullopt;
}

void rebuild_memory(ModelTracker& tracker, const VideoClip& clip, const PromptHistory& prompts,
                    const Masklet& masks, int until) {
  tracker.start(clip);
  const auto first = first_prompted_frame(prompts);
  if (!first) return;
  for (int t = *first; t < until; ++t) tracker.restore(t, masks.at(t), t == *first);
}

}  // namespace

Masklet propagate(ModelTracker& tracker, const VideoClip& clip, const PromptHistory& prompts,
                  const Masklet& masks, int from_frame) {
  const int n = clip.num_frames();
  if (from_frame < 0 || from_frame >= n) {
    throw ValidationError("from_frame " + std::to_string(from_frame) + " is outside [0, " +
                              std::to_string(n) + ")",
                          "from_frame");
  }
  if (static_cast<int>(masks.size()) != n) throw ShapeError("masklet length does not match clip");
  Masklet out = masks;
  const auto first = first_prompted_frame(prompts);
  if (!first) return out;
  const int begin = std::max(from_frame, *first);
  rebuild_memory(tracker, clip, prompts, masks, begin);
  for (int t = begin; t < n; ++t) {
    auto it = prompts.find(t);
    out[t] = (it != prompts.end() && !it->second.empty()) ? tracker.add_prompts(t, it->second)
                                                          : tracker.track(t);
  }
  return out;
}

BinaryMask predict_prompted_frame(ModelTracker& tracker, const VideoClip& clip,
                                  const PromptHistory& prompts, const Masklet& masks, int frame) {
  auto it = prompts.find(frame);
  if (it == prompts.end() || it->second.empty()) {
    throw ValidationError("frame " + std::to_string(frame) + " has no prompts", "frame");
  }
  rebuild_memory(tracker, clip, prompts, masks, frame);
  return tracker.add_prompts(frame, it->second);
}

void save_checkpoint(SegmentationModel& model, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  model->save(archive);
  archive.write("format_version", c10::IValue(kCheckpointVersion));
  nlohmann::json cfg = model->config();
  archive.write("config", c10::IValue(cfg.dump()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  archive.save_to(path.string());
}

SegmentationModel load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DatasetError("checkpoint not found: " + path.string(), path.string());
  }
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue version;
  if (!archive.try_read("format_version", version) || version.toInt() != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint format in " + path.string(), "checkpoint");
  }
  c10::IValue cfg_value;
  archive.read("config", cfg_value);
  const auto cfg = nlohmann::json::parse(cfg_value.toStringRef()).get<ModelConfig>();
  auto model = make_model(cfg, 0);
  model->load(archive);
  return model;
}

bool parameters_equal(SegmentationModel& a, SegmentationModel& b) {
  const auto pa = a->named_parameters();
  const auto pb = b->named_parameters();
  if (pa.size() != pb.size()) return false;
  for (const auto& item : pa) {
    const auto* other = pb.find(item.key());
    if (!other || !torch::equal(item.value(), *other)) return false;
  }
  const auto ba = a->named_buffers();
  const auto bb = b->named_buffers();
  if (ba.size() != bb.size()) return false;
  for (const auto& item : ba) {
    const auto* other = bb.find(item.key());
    if (!other || !torch::equal(item.value(), *other)) return false;
  }
  return true;
}

}  // namespace pvseg
