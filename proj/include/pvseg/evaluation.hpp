#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pvseg/data_synth.hpp"
#include "pvseg/mask.hpp"
#include "pvseg/tracker.hpp"

namespace pvseg {

struct EvalConfig {
  int n_click = 3;
  int n_frame = 3;
  int n_pass = 3;
  double iou_pause_threshold = 0.75;
  double boundary_tolerance = 0.008;  ///< fraction of the image diagonal

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

struct JfScore {
  double j = 0.0;
  double f = 0.0;
  double jf = 0.0;
};

/// Boundary matching radius in pixels: ceil(tolerance * diagonal), at least 1.
int boundary_radius(int height, int width, double tolerance);

/// Foreground pixels with a 4-neighbour that is background or outside the frame.
BinaryMask mask_boundary(const BinaryMask& mask);

/// Boundary F-measure of one frame. Both boundaries empty scores 1, exactly
/// one empty scores 0.
double boundary_f_measure(const BinaryMask& pred, const BinaryMask& gt, int radius);

/// Per-frame J and F averaged over `frames` (all frames when empty).
JfScore jf_metric(const Masklet& pred, const Masklet& gt, double tolerance,
                  const std::vector<int>& frames = {});

enum class Protocol { kOnline, kOffline, kSemiVos };
enum class SemiVosPrompt { kThreeClick, kBox, kMask };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);
std::string to_string(SemiVosPrompt p);
SemiVosPrompt semivos_prompt_from_string(const std::string& s);

/// One robot-user interaction: `clicks` prompts placed on `frame` during `pass`.
struct Interaction {
  int pass = 1;
  int frame = 0;
  int clicks = 0;
  double iou_before = 0.0;
  double iou_after = 0.0;
};

struct ClipReport {
  std::string clip_id;
  int object = 0;
  bool skipped = false;
  std::string skip_reason;
  JfScore score;
  std::vector<double> frame_j;
  std::vector<double> frame_f;
  std::vector<int> scored_frames;
  std::vector<Interaction> interactions;
  int pauses = 0;
  std::vector<JfScore> pass_scores;  ///< offline only, one per pass
  Masklet masks;
};

nlohmann::json to_json(const ClipReport& r);

struct EvalReport {
  Protocol protocol = Protocol::kOnline;
  SemiVosPrompt semivos_prompt = SemiVosPrompt::kThreeClick;
  EvalConfig config;
  std::vector<ClipReport> clips;
  JfScore mean;
  int evaluated = 0;
  int skipped = 0;
};

nlohmann::json to_json(const EvalReport& r);

/// Frame 0 gets n_click robot clicks; propagation pauses at the first frames
/// whose IoU drops below the threshold (at most n_frame of them) for n_click
/// corrective clicks, then resumes.
ClipReport run_online_eval(Tracker& tracker, const VideoClip& clip, const Masklet& gt,
                           const EvalConfig& cfg);

/// n_pass full passes. Pass 1 clicks frame 0; each later pass clicks the
/// lowest-IoU frame of the previous pass and re-propagates with every prompt
/// placed so far. Scored on the last pass.
ClipReport run_offline_eval(Tracker& tracker, const VideoClip& clip, const Masklet& gt,
                            const EvalConfig& cfg);

/// One frame-0 prompt and a single propagation. Frame 0 is left out of the
/// score only for the gt-mask prompt.
ClipReport run_semivos(Tracker& tracker, const VideoClip& clip, const Masklet& gt,
                       SemiVosPrompt prompt, const EvalConfig& cfg);

/// Runs a protocol on object `object_id` of every clip and averages over the
/// clips that were not skipped.
EvalReport evaluate_dataset(Tracker& tracker, const Dataset& dataset, Protocol protocol,
                            const EvalConfig& cfg, int object_id = 0,
                            SemiVosPrompt semivos_prompt = SemiVosPrompt::kThreeClick);

}  // namespace pvseg
