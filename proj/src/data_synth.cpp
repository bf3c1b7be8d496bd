#include "pvseg/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "png_io.hpp"
#include "pvseg/errors.hpp"

namespace pvseg {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (num_frames < 1) throw ConfigError("num_frames must be >= 1", "num_frames");
  if (height < 1 || width < 1) throw ConfigError("frame size must be positive", "height");
  if (channels != 3) throw ConfigError("channels is fixed at 3", "channels");
  if (num_objects < 1) throw ConfigError("num_objects must be >= 1", "num_objects");
  if (!motion.empty() && static_cast<int>(motion.size()) != num_objects) {
    throw ConfigError("motion needs one velocity per object", "motion");
  }
  if (!radii.empty() && static_cast<int>(radii.size()) != num_objects) {
    throw ConfigError("radii needs one entry per object", "radii");
  }
  for (double r : radii) {
    if (!(r > 0.0) || 2.0 * r >= std::min(height, width)) {
      throw ConfigError("object diameter must be below min(height, width)", "radii");
    }
  }
  for (const auto& occ : occlusion_schedule) {
    if (occ.object_id < 0 || occ.object_id >= num_objects) {
      throw ConfigError("occlusion names an unknown object", "occlusion_schedule");
    }
    if (occ.start_frame < 0 || occ.start_frame > occ.end_frame || occ.end_frame >= num_frames) {
      throw ConfigError("occlusion interval must satisfy 0 <= start <= end < n",
                        "occlusion_schedule");
    }
  }
}

bool shape_contains(ShapeKind kind, double cx, double cy, double radius, int x, int y) {
  const double dx = x - cx;
  const double dy = y - cy;
  switch (kind) {
    case ShapeKind::kDisk:
      return dx * dx + dy * dy <= radius * radius;
    case ShapeKind::kRectangle:
      return std::abs(dx) <= radius && std::abs(dy) <= 0.6 * radius;
    case ShapeKind::kLShape: {
      if (std::abs(dx) > radius || std::abs(dy) > radius) return false;
      const double arm = radius / 3.0;
      return dx <= -radius + 2.0 * arm || dy >= radius - 2.0 * arm;
    }
  }
  return false;
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

// Advances one axis by one frame with reflection at [lo, hi].
void step_axis(double& pos, double& vel, double lo, double hi) {
  if (hi <= lo) {
    pos = 0.5 * (lo + hi);
    return;
  }
  pos += vel;
  for (int guard = 0; guard < 64 && (pos < lo || pos > hi); ++guard) {
    if (pos < lo) {
      pos = 2.0 * lo - pos;
      vel = -vel;
    } else if (pos > hi) {
      pos = 2.0 * hi - pos;
      vel = -vel;
    }
  }
  pos = std::clamp(pos, lo, hi);
}

bool occluded(const SynthConfig& config, int object_id, int frame) {
  return std::any_of(config.occlusion_schedule.begin(), config.occlusion_schedule.end(),
                     [&](const Occlusion& o) {
                       return o.object_id == object_id && frame >= o.start_frame &&
                              frame <= o.end_frame;
                     });
}

}  // namespace

SynthesizedClip generate_clip(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int n = config.num_frames;
  const int h = config.height;
  const int w = config.width;
  const int num_obj = config.num_objects;

  // Fixed draw order keeps the output a pure function of (config, seed).
  std::array<double, 3> bg_color{};
  const double base = uniform(rng, 0.05, 0.35);
  for (auto& c : bg_color) c = base + uniform(rng, -0.04, 0.04);

  std::vector<ObjectTrack> tracks(num_obj);
  const double min_side = std::min(h, w);
  for (int o = 0; o < num_obj; ++o) {
    auto& track = tracks[o];
    const double r_drawn = uniform(rng, 0.08, 0.16) * min_side;
    track.radius = config.radii.empty() ? r_drawn : config.radii[o];
    for (auto& c : track.color) c = quantize(uniform(rng, 0.45, 1.0));
    const double lo_x = track.radius;
    const double hi_x = w - 1 - track.radius;
    const double lo_y = track.radius;
    const double hi_y = h - 1 - track.radius;
    double x = hi_x > lo_x ? uniform(rng, lo_x, hi_x) : 0.5 * (w - 1);
    double y = hi_y > lo_y ? uniform(rng, lo_y, hi_y) : 0.5 * (h - 1);
    const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double speed = uniform(rng, 1.0, 3.0);
    double vx = config.motion.empty() ? speed * std::cos(angle) : config.motion[o].vx;
    double vy = config.motion.empty() ? speed * std::sin(angle) : config.motion[o].vy;
    track.centers.reserve(n);
    for (int t = 0; t < n; ++t) {
      track.centers.push_back({x, y});
      step_axis(x, vx, lo_x, hi_x);
      step_axis(y, vy, lo_y, hi_y);
    }
  }

  auto frames = torch::empty({n, 3, h, w}, torch::kFloat32);
  auto masks = torch::zeros({num_obj, n, h, w}, torch::kUInt8);
  auto frames_a = frames.accessor<float, 4>();
  auto masks_a = masks.accessor<std::uint8_t, 4>();
  std::uniform_real_distribution<double> noise(-0.08, 0.08);

  std::vector<int> owner(static_cast<std::size_t>(h) * w);
  for (int t = 0; t < n; ++t) {
    std::fill(owner.begin(), owner.end(), -1);
    for (int o = 0; o < num_obj; ++o) {
      if (occluded(config, o, t)) continue;
      const auto [cx, cy] = tracks[o].centers[t];
      const double r = tracks[o].radius;
      const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
      const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (shape_contains(config.shape_kind, cx, cy, r, x, y)) owner[y * w + x] = o;
        }
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int o = owner[y * w + x];
        for (int c = 0; c < 3; ++c) {
          double v = o >= 0 ? tracks[o].color[c] : bg_color[c];
          if (o < 0 && config.background == Background::kNoise) v += noise(rng);
          frames_a[t][c][y][x] = quantize(v);
        }
        if (o >= 0) masks_a[o][t][y][x] = 1;
      }
    }
  }
  auto visibility = masks.flatten(2).sum(2).gt(0).to(torch::kUInt8);
  return {VideoClip{frames}, MaskAnnotation{masks, visibility}, std::move(tracks)};
}

BinaryMask MaskAnnotation::mask(int object_id, int frame) const {
  auto m = masks[object_id][frame].contiguous();
  const int h = static_cast<int>(m.size(0));
  const int w = static_cast<int>(m.size(1));
  const auto* p = m.data_ptr<std::uint8_t>();
  return BinaryMask(h, w, std::vector<std::uint8_t>(p, p + static_cast<std::ptrdiff_t>(h) * w));
}

Masklet MaskAnnotation::masklet(int object_id) const {
  Masklet out;
  for (int t = 0; t < masks.size(1); ++t) out.push_back(mask(object_id, t));
  return out;
}

SynthConfig sample_config(const DatasetRecipe& recipe, std::uint64_t seed, int index) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(index) + 1);
  SynthConfig cfg;
  cfg.num_frames = recipe.num_frames;
  cfg.height = recipe.height;
  cfg.width = recipe.width;
  cfg.num_objects =
      std::uniform_int_distribution<int>(recipe.min_objects, recipe.max_objects)(rng);
  cfg.shape_kind = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 2)(rng));
  cfg.background = uniform(rng, 0.0, 1.0) < 0.5 ? Background::kFlat : Background::kNoise;
  for (int o = 0; o < cfg.num_objects; ++o) {
    cfg.radii.push_back(uniform(rng, recipe.min_radius, recipe.max_radius));
    const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double speed = uniform(rng, recipe.min_speed, recipe.max_speed);
    cfg.motion.push_back({speed * std::cos(angle), speed * std::sin(angle)});
    if (cfg.num_frames > 2 && uniform(rng, 0.0, 1.0) < recipe.occlusion_probability) {
      const int len =
          std::uniform_int_distribution<int>(recipe.min_occlusion, recipe.max_occlusion)(rng);
      const int last_start = std::max(1, cfg.num_frames - 1 - len);
      const int start = std::uniform_int_distribution<int>(1, last_start)(rng);
      const int end = std::min(cfg.num_frames - 1, start + len - 1);
      cfg.occlusion_schedule.push_back({o, start, end});
    }
  }
  return cfg;
}

void to_json(nlohmann::json& j, const DatasetRecipe& r) {
  j = {{"num_clips", r.num_clips},
       {"num_frames", r.num_frames},
       {"height", r.height},
       {"width", r.width},
       {"min_objects", r.min_objects},
       {"max_objects", r.max_objects},
       {"min_radius", r.min_radius},
       {"max_radius", r.max_radius},
       {"min_speed", r.min_speed},
       {"max_speed", r.max_speed},
       {"occlusion_probability", r.occlusion_probability},
       {"min_occlusion", r.min_occlusion},
       {"max_occlusion", r.max_occlusion}};
}

void from_json(const nlohmann::json& j, DatasetRecipe& r) {
  const DatasetRecipe d;
  r.num_clips = j.value("num_clips", d.num_clips);
  r.num_frames = j.value("num_frames", d.num_frames);
  r.height = j.value("height", d.height);
  r.width = j.value("width", d.width);
  r.min_objects = j.value("min_objects", d.min_objects);
  r.max_objects = j.value("max_objects", d.max_objects);
  r.min_radius = j.value("min_radius", d.min_radius);
  r.max_radius = j.value("max_radius", d.max_radius);
  r.min_speed = j.value("min_speed", d.min_speed);
  r.max_speed = j.value("max_speed", d.max_speed);
  r.occlusion_probability = j.value("occlusion_probability", d.occlusion_probability);
  r.min_occlusion = j.value("min_occlusion", d.min_occlusion);
  r.max_occlusion = j.value("max_occlusion", d.max_occlusion);
  if (r.num_clips < 0) throw ConfigError("num_clips must be >= 0", "num_clips");
  if (r.num_frames < 1) throw ConfigError("num_frames must be >= 1", "num_frames");
  if (r.height < 1 || r.width < 1) throw ConfigError("height and width must be >= 1", "height");
  if (r.min_objects < 1 || r.max_objects < r.min_objects) {
    throw ConfigError("need 1 <= min_objects <= max_objects", "min_objects");
  }
  if (r.min_radius <= 0.0 || r.max_radius < r.min_radius) {
    throw ConfigError("need 0 < min_radius <= max_radius", "min_radius");
  }
  if (2.0 * r.max_radius + 1.0 >= std::min(r.height, r.width)) {
    throw ConfigError("objects must be smaller than the frame", "max_radius");
  }
  if (r.min_speed < 0.0 || r.max_speed < r.min_speed) {
    throw ConfigError("need 0 <= min_speed <= max_speed", "min_speed");
  }
  if (r.occlusion_probability < 0.0 || r.occlusion_probability > 1.0) {
    throw ConfigError("occlusion_probability must lie in [0, 1]", "occlusion_probability");
  }
  if (r.min_occlusion < 1 || r.max_occlusion < r.min_occlusion) {
    throw ConfigError("need 1 <= min_occlusion <= max_occlusion", "min_occlusion");
  }
}

Dataset generate_dataset(const DatasetRecipe& recipe, std::uint64_t seed) {
  Dataset out;
  for (int k = 0; k < recipe.num_clips; ++k) {
    const auto cfg = sample_config(recipe, seed, k);
    auto synth = generate_clip(cfg, seed * 1000003ULL + static_cast<std::uint64_t>(k));
    out.push_back({"clip_" + std::to_string(k), synth.clip, synth.annotation});
  }
  return out;
}

namespace {

std::string frame_name(int t) {
  std::ostringstream os;
  os.width(6);
  os.fill('0');
  os << t;
  return os.str() + ".png";
}

}  // namespace

fs::path write_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  nlohmann::json manifest = {{"version", 1}, {"clips", nlohmann::json::array()}};
  for (const auto& rec : dataset) {
    const auto clip_dir = root / rec.id;
    const int n = rec.clip.num_frames();
    const int h = rec.clip.height();
    const int w = rec.clip.width();
    const int num_obj = rec.annotation.num_objects();
    fs::create_directories(clip_dir / "frames");
    auto bytes = rec.clip.frames.mul(255.0).round().clamp(0, 255).to(torch::kUInt8);
    for (int t = 0; t < n; ++t) {
      auto hwc = bytes[t].permute({1, 2, 0}).contiguous();
      detail::Image8 img{h, w, 3,
                         std::vector<std::uint8_t>(hwc.data_ptr<std::uint8_t>(),
                                                   hwc.data_ptr<std::uint8_t>() + hwc.numel())};
      detail::write_png(clip_dir / "frames" / frame_name(t), img);
    }
    for (int o = 0; o < num_obj; ++o) {
      const auto obj_dir = clip_dir / "masks" / ("obj_" + std::to_string(o));
      fs::create_directories(obj_dir);
      for (int t = 0; t < n; ++t) {
        auto m = rec.annotation.masks[o][t].mul(255).contiguous();
        detail::Image8 img{h, w, 1,
                           std::vector<std::uint8_t>(m.data_ptr<std::uint8_t>(),
                                                     m.data_ptr<std::uint8_t>() + m.numel())};
        detail::write_png(obj_dir / frame_name(t), img);
      }
    }
    manifest["clips"].push_back(
        {{"id", rec.id}, {"n", n}, {"h", h}, {"w", w}, {"num_objects", num_obj}});
  }
  const auto path = root / "manifest.json";
  std::ofstream(path) << manifest.dump(2) << "\n";
  return path;
}

Dataset read_dataset(const fs::path& root) {
  const auto manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw DatasetError("no dataset at " + root.string() + ": manifest.json missing, 0 clips listed",
                       manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    std::ifstream(manifest_path) >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("malformed manifest: ") + e.what(), manifest_path.string());
  }
  if (!manifest.contains("clips") || manifest["clips"].empty()) {
    throw DatasetError("manifest lists 0 clips", manifest_path.string());
  }
  Dataset out;
  for (const auto& entry : manifest["clips"]) {
    const auto id = entry.at("id").get<std::string>();
    const int n = entry.at("n").get<int>();
    const int h = entry.at("h").get<int>();
    const int w = entry.at("w").get<int>();
    const int num_obj = entry.at("num_objects").get<int>();
    const auto clip_dir = root / id;
    auto frames = torch::empty({n, 3, h, w}, torch::kFloat32);
    auto masks = torch::empty({num_obj, n, h, w}, torch::kUInt8);
    for (int t = 0; t < n; ++t) {
      const auto path = clip_dir / "frames" / frame_name(t);
      auto img = detail::read_png(path, 3);
      if (img.height != h || img.width != w) {
        throw DatasetError("frame size disagrees with manifest: " + path.string(), path.string());
      }
      auto hwc = torch::from_blob(img.pixels.data(), {h, w, 3}, torch::kUInt8);
      frames[t].copy_(hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0));
    }
    for (int o = 0; o < num_obj; ++o) {
      for (int t = 0; t < n; ++t) {
        const auto path = clip_dir / "masks" / ("obj_" + std::to_string(o)) / frame_name(t);
        auto img = detail::read_png(path, 1);
        if (img.height != h || img.width != w) {
          throw DatasetError("mask size disagrees with manifest: " + path.string(),
                             path.string());
        }
        auto m = torch::from_blob(img.pixels.data(), {h, w}, torch::kUInt8);
        masks[o][t].copy_(m.gt(127).to(torch::kUInt8));
      }
    }
    auto visibility = masks.flatten(2).sum(2).gt(0).to(torch::kUInt8);
    out.push_back({id, VideoClip{frames}, MaskAnnotation{masks, visibility}});
  }
  return out;
}

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisk:
      return "disk";
    case ShapeKind::kRectangle:
      return "rectangle";
    case ShapeKind::kLShape:
      return "l-shape";
  }
  return "disk";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "disk") return ShapeKind::kDisk;
  if (s == "rectangle") return ShapeKind::kRectangle;
  if (s == "l-shape") return ShapeKind::kLShape;
  throw ConfigError("unknown shape kind '" + s + "'", "shape_kind");
}

}  // namespace pvseg
