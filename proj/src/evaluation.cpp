#include "pvseg/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "pvseg/errors.hpp"
#include "pvseg/training.hpp"

namespace pvseg {

void EvalConfig::validate() const {
  if (n_click < 1) throw ConfigError("n_click must be >= 1", "n_click");
  if (n_frame < 0) throw ConfigError("n_frame must be >= 0", "n_frame");
  if (n_pass < 1) throw ConfigError("n_pass must be >= 1", "n_pass");
  if (!(iou_pause_threshold > 0.0 && iou_pause_threshold < 1.0)) {
    throw ConfigError("iou_pause_threshold must lie in (0, 1)", "iou_pause_threshold");
  }
  if (!(boundary_tolerance > 0.0 && boundary_tolerance < 1.0)) {
    throw ConfigError("boundary_tolerance must lie in (0, 1)", "boundary_tolerance");
  }
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"n_click", c.n_click},
       {"n_frame", c.n_frame},
       {"n_pass", c.n_pass},
       {"iou_pause_threshold", c.iou_pause_threshold},
       {"boundary_tolerance", c.boundary_tolerance}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  const EvalConfig d;
  c.n_click = j.value("n_click", d.n_click);
  c.n_frame = j.value("n_frame", d.n_frame);
  c.n_pass = j.value("n_pass", d.n_pass);
  c.iou_pause_threshold = j.value("iou_pause_threshold", d.iou_pause_threshold);
  c.boundary_tolerance = j.value("boundary_tolerance", d.boundary_tolerance);
  c.validate();
}

int boundary_radius(int height, int width, double tolerance) {
  const double diag = std::sqrt(static_cast<double>(height) * height + static_cast<double>(width) * width);
  return std::max(1, static_cast<int>(std::ceil(tolerance * diag)));
}

BinaryMask mask_boundary(const BinaryMask& mask) {
  const int h = mask.height();
  const int w = mask.width();
  BinaryMask out(h, w);
  auto bg = [&](int y, int x) { return y < 0 || x < 0 || y >= h || x >= w || !mask.at(y, x); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      if (bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1)) out.at(y, x) = 1;
    }
  }
  return out;
}

namespace {

// Share of `from` boundary pixels lying within `radius` of some `to` pixel.
double matched_fraction(const BinaryMask& from, const BinaryMask& to, int radius) {
  const int h = from.height();
  const int w = from.width();
  std::vector<Pixel> disk;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) disk.push_back({dx, dy});
    }
  }
  int64_t total = 0;
  int64_t hit = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!from.at(y, x)) continue;
      ++total;
      for (const auto& d : disk) {
        const int yy = y + d.y;
        const int xx = x + d.x;
        if (yy >= 0 && xx >= 0 && yy < h && xx < w && to.at(yy, xx)) {
          ++hit;
          break;
        }
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

double boundary_f_measure(const BinaryMask& pred, const BinaryMask& gt, int radius) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw ValidationError("prediction and ground truth differ in size", "pred");
  }
  const auto bp = mask_boundary(pred);
  const auto bg = mask_boundary(gt);
  const bool ep = bp.empty();
  const bool eg = bg.empty();
  if (ep && eg) return 1.0;
  if (ep || eg) return 0.0;
  const double precision = matched_fraction(bp, bg, radius);
  const double recall = matched_fraction(bg, bp, radius);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

JfScore jf_metric(const Masklet& pred, const Masklet& gt, double tolerance,
                  const std::vector<int>& frames) {
  if (pred.size() != gt.size()) {
    throw ValidationError("masklets differ in length: " + std::to_string(pred.size()) + " vs " +
                              std::to_string(gt.size()),
                          "pred");
  }
  std::vector<int> idx = frames;
  if (idx.empty()) {
    for (std::size_t t = 0; t < gt.size(); ++t) idx.push_back(static_cast<int>(t));
  }
  JfScore s;
  if (idx.empty()) return s;
  for (int t : idx) {
    const auto& p = pred.at(t);
    const auto& g = gt.at(t);
    if (p.height() != g.height() || p.width() != g.width()) {
      throw ValidationError("frame " + std::to_string(t) + " differs in size", "pred");
    }
    s.j += mask_iou(p, g);
    s.f += boundary_f_measure(p, g, boundary_radius(g.height(), g.width(), tolerance));
  }
  s.j /= static_cast<double>(idx.size());
  s.f /= static_cast<double>(idx.size());
  s.jf = 0.5 * (s.j + s.f);
  return s;
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::kOnline:
      return "online";
    case Protocol::kOffline:
      return "offline";
    case Protocol::kSemiVos:
      return "semivos";
  }
  return "online";
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "online") return Protocol::kOnline;
  if (s == "offline") return Protocol::kOffline;
  if (s == "semivos") return Protocol::kSemiVos;
  throw ValidationError("mode must be one of online, offline, semivos", "mode");
}

std::string to_string(SemiVosPrompt p) {
  switch (p) {
    case SemiVosPrompt::kThreeClick:
      return "3-click";
    case SemiVosPrompt::kBox:
      return "box";
    case SemiVosPrompt::kMask:
      return "gt-mask";
  }
  return "3-click";
}

SemiVosPrompt semivos_prompt_from_string(const std::string& s) {
  if (s == "3-click") return SemiVosPrompt::kThreeClick;
  if (s == "box") return SemiVosPrompt::kBox;
  if (s == "gt-mask") return SemiVosPrompt::kMask;
  throw ValidationError("semi-VOS prompt must be one of 3-click, box, gt-mask", "prompt");
}

nlohmann::json to_json(const ClipReport& r) {
  nlohmann::json j = {{"clip", r.clip_id}, {"object", r.object}, {"skipped", r.skipped}};
  if (r.skipped) {
    j["reason"] = r.skip_reason;
    return j;
  }
  j["J"] = r.score.j;
  j["F"] = r.score.f;
  j["JF"] = r.score.jf;
  j["frame_J"] = r.frame_j;
  j["frame_F"] = r.frame_f;
  j["scored_frames"] = r.scored_frames;
  j["pauses"] = r.pauses;
  auto& log = j["interactions"] = nlohmann::json::array();
  for (const auto& i : r.interactions) {
    log.push_back({{"pass", i.pass},
                   {"frame", i.frame},
                   {"clicks", i.clicks},
                   {"iou_before", i.iou_before},
                   {"iou_after", i.iou_after}});
  }
  if (!r.pass_scores.empty()) {
    auto& passes = j["pass_JF"] = nlohmann::json::array();
    for (const auto& s : r.pass_scores) passes.push_back(s.jf);
  }
  return j;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["mode"] = to_string(r.protocol);
  if (r.protocol == Protocol::kSemiVos) j["prompt"] = to_string(r.semivos_prompt);
  j["config"] = r.config;
  j["clips"] = nlohmann::json::array();
  for (const auto& c : r.clips) j["clips"].push_back(to_json(c));
  j["summary"] = {{"J", r.mean.j},
                  {"F", r.mean.f},
                  {"JF", r.mean.jf},
                  {"evaluated", r.evaluated},
                  {"skipped", r.skipped}};
  return j;
}

namespace {

Masklet empty_masklet(const Masklet& gt) {
  Masklet out;
  for (const auto& g : gt) out.emplace_back(g.height(), g.width());
  return out;
}

void check_inputs(const VideoClip& clip, const Masklet& gt) {
  if (static_cast<int>(gt.size()) != clip.num_frames()) {
    throw ValidationError("ground truth has " + std::to_string(gt.size()) + " frames, clip has " +
                              std::to_string(clip.num_frames()),
                          "gt");
  }
}

bool all_empty(const Masklet& gt) {
  return std::all_of(gt.begin(), gt.end(), [](const BinaryMask& m) { return m.empty(); });
}

// Adds up to `budget` deterministic corrective clicks to `prompts` on `frame`,
// each placed against the mask the tracker produced last. Returns clicks added.
int refine(Tracker& tracker, int frame, const BinaryMask& gt, std::vector<Prompt>& prompts,
           BinaryMask& mask, int budget) {
  std::mt19937_64 unused(0);
  int added = 0;
  for (int k = 0; k < budget; ++k) {
    auto click = sample_corrective_click(mask, gt, frame, unused, true);
    if (!click) break;
    prompts.push_back(click->prompt);
    mask = tracker.add_prompts(frame, prompts);
    ++added;
  }
  return added;
}

// First frame: robot click at the gt interior, then corrective clicks.
BinaryMask initialize(Tracker& tracker, const BinaryMask& gt0, int n_click,
                      std::vector<Prompt>& prompts) {
  prompts.push_back(*initial_robot_click(gt0, 0));
  auto mask = tracker.add_prompts(0, prompts);
  refine(tracker, 0, gt0, prompts, mask, n_click - 1);
  return mask;
}

void score(ClipReport& r, const Masklet& gt, const EvalConfig& cfg, std::vector<int> frames) {
  if (frames.empty()) {
    for (std::size_t t = 0; t < gt.size(); ++t) frames.push_back(static_cast<int>(t));
  }
  r.scored_frames = frames;
  r.frame_j.clear();
  r.frame_f.clear();
  for (int t : frames) {
    const auto& g = gt[t];
    r.frame_j.push_back(mask_iou(r.masks[t], g));
    r.frame_f.push_back(boundary_f_measure(r.masks[t], g,
                                           boundary_radius(g.height(), g.width(), cfg.boundary_tolerance)));
  }
  r.score = jf_metric(r.masks, gt, cfg.boundary_tolerance, frames);
}

bool skip_if_unpromptable(ClipReport& r, const Masklet& gt) {
  if (all_empty(gt)) {
    r.skipped = true;
    r.skip_reason = "object is empty on every frame";
  } else if (gt.front().empty()) {
    r.skipped = true;
    r.skip_reason = "object is not visible on frame 0";
  }
  return r.skipped;
}

}  // namespace

ClipReport run_online_eval(Tracker& tracker, const VideoClip& clip, const Masklet& gt,
                           const EvalConfig& cfg) {
  cfg.validate();
  check_inputs(clip, gt);
  ClipReport r;
  if (skip_if_unpromptable(r, gt)) return r;
  r.masks = empty_masklet(gt);
  tracker.start(clip);

  std::vector<Prompt> first;
  r.masks[0] = initialize(tracker, gt[0], cfg.n_click, first);
  r.interactions.push_back({1, 0, static_cast<int>(first.size()), 0.0, mask_iou(r.masks[0], gt[0])});

  for (int t = 1; t < clip.num_frames(); ++t) {
    auto mask = tracker.track(t);
    const double before = mask_iou(mask, gt[t]);
    if (before < cfg.iou_pause_threshold && r.pauses < cfg.n_frame) {
      ++r.pauses;
      std::vector<Prompt> prompts;
      const int clicks = refine(tracker, t, gt[t], prompts, mask, cfg.n_click);
      r.interactions.push_back({1, t, clicks, before, mask_iou(mask, gt[t])});
    }
    r.masks[t] = std::move(mask);
  }
  score(r, gt, cfg, {});
  return r;
}

ClipReport run_offline_eval(Tracker& tracker, const VideoClip& clip, const Masklet& gt,
                            const EvalConfig& cfg) {
  cfg.validate();
  check_inputs(clip, gt);
  ClipReport r;
  if (skip_if_unpromptable(r, gt)) return r;
  const int n = clip.num_frames();
  std::map<int, std::vector<Prompt>> history;
  std::optional<int> target;

  for (int pass = 1; pass <= cfg.n_pass; ++pass) {
    tracker.start(clip);
    r.masks = empty_masklet(gt);
    for (int t = 0; t < n; ++t) {
      auto& prompts = history[t];
      BinaryMask mask;
      if (pass == 1 && t == 0) {
        mask = initialize(tracker, gt[0], cfg.n_click, prompts);
        r.interactions.push_back({pass, 0, static_cast<int>(prompts.size()), 0.0, mask_iou(mask, gt[0])});
      } else {
        mask = prompts.empty() ? tracker.track(t) : tracker.add_prompts(t, prompts);
        if (target && *target == t) {
          const double before = mask_iou(mask, gt[t]);
          const int clicks = refine(tracker, t, gt[t], prompts, mask, cfg.n_click);
          r.interactions.push_back({pass, t, clicks, before, mask_iou(mask, gt[t])});
        }
      }
      r.masks[t] = std::move(mask);
    }
    score(r, gt, cfg, {});
    r.pass_scores.push_back(r.score);

    int worst = 0;
    for (int t = 1; t < n; ++t) {
      if (r.frame_j[t] < r.frame_j[worst]) worst = t;
    }
    target = worst;
  }
  return r;
}

ClipReport run_semivos(Tracker& tracker, const VideoClip& clip, const Masklet& gt,
                       SemiVosPrompt prompt, const EvalConfig& cfg) {
  cfg.validate();
  check_inputs(clip, gt);
  ClipReport r;
  if (skip_if_unpromptable(r, gt)) return r;
  r.masks = empty_masklet(gt);
  tracker.start(clip);
  std::vector<Prompt> prompts;
  switch (prompt) {
    case SemiVosPrompt::kThreeClick:
      r.masks[0] = initialize(tracker, gt[0], 3, prompts);
      break;
    case SemiVosPrompt::kBox:
      prompts.push_back(Prompt::make_box(0, *tight_box(gt[0])));
      r.masks[0] = tracker.add_prompts(0, prompts);
      break;
    case SemiVosPrompt::kMask:
      prompts.push_back(Prompt::make_mask(0, gt[0]));
      r.masks[0] = tracker.add_prompts(0, prompts);
      break;
  }
  r.interactions.push_back({1, 0, static_cast<int>(prompts.size()), 0.0, mask_iou(r.masks[0], gt[0])});
  for (int t = 1; t < clip.num_frames(); ++t) r.masks[t] = tracker.track(t);

  std::vector<int> frames;
  const int first = prompt == SemiVosPrompt::kMask ? 1 : 0;
  for (int t = first; t < clip.num_frames(); ++t) frames.push_back(t);
  if (frames.empty()) {
    r.skipped = true;
    r.skip_reason = "no frame left to score after the prompt frame";
    return r;
  }
  score(r, gt, cfg, frames);
  return r;
}

EvalReport evaluate_dataset(Tracker& tracker, const Dataset& dataset, Protocol protocol,
                            const EvalConfig& cfg, int object_id, SemiVosPrompt semivos_prompt) {
  cfg.validate();
  EvalReport report;
  report.protocol = protocol;
  report.semivos_prompt = semivos_prompt;
  report.config = cfg;
  for (const auto& rec : dataset) {
    ClipReport r;
    if (object_id < 0 || object_id >= rec.annotation.num_objects()) {
      r.skipped = true;
      r.skip_reason = "clip has no object " + std::to_string(object_id);
    } else {
      const auto gt = rec.annotation.masklet(object_id);
      switch (protocol) {
        case Protocol::kOnline:
          r = run_online_eval(tracker, rec.clip, gt, cfg);
          break;
        case Protocol::kOffline:
          r = run_offline_eval(tracker, rec.clip, gt, cfg);
          break;
        case Protocol::kSemiVos:
          r = run_semivos(tracker, rec.clip, gt, semivos_prompt, cfg);
          break;
      }
    }
    r.clip_id = rec.id;
    r.object = object_id;
    if (r.skipped) {
      ++report.skipped;
    } else {
      ++report.evaluated;
      report.mean.j += r.score.j;
      report.mean.f += r.score.f;
    }
    r.masks.clear();
    report.clips.push_back(std::move(r));
  }
  if (report.evaluated > 0) {
    report.mean.j /= report.evaluated;
    report.mean.f /= report.evaluated;
    report.mean.jf = 0.5 * (report.mean.j + report.mean.f);
  }
  return report;
}

}  // namespace pvseg
