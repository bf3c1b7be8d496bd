#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pvseg/mask.hpp"

namespace pvseg {

enum class ShapeKind { kDisk, kRectangle, kLShape };
enum class Background { kFlat, kNoise };

/// Object `object_id` is not rendered on frames [start_frame, end_frame].
struct Occlusion {
  int object_id = 0;
  int start_frame = 0;
  int end_frame = 0;
};

struct Velocity {
  double vx = 0.0;
  double vy = 0.0;
};

/// Describes one synthetic clip. Empty per-object vectors are filled from the
/// seed at generation time.
struct SynthConfig {
  int num_frames = 8;
  int height = 64;
  int width = 64;
  int num_objects = 1;
  int channels = 3;
  std::vector<Occlusion> occlusion_schedule;
  std::vector<Velocity> motion;  ///< pixels per frame, one per object
  std::vector<double> radii;     ///< half-extent in pixels, one per object
  ShapeKind shape_kind = ShapeKind::kDisk;
  Background background = Background::kFlat;

  /// Throws ConfigError.
  void validate() const;
};

/// Frames as a float tensor [n, c, h, w] with values k/255.
struct VideoClip {
  torch::Tensor frames;

  int num_frames() const { return static_cast<int>(frames.size(0)); }
  int height() const { return static_cast<int>(frames.size(2)); }
  int width() const { return static_cast<int>(frames.size(3)); }
};

/// masks: uint8 [num_objects, n, h, w] in {0,1}; visibility: uint8 [num_objects, n].
struct MaskAnnotation {
  torch::Tensor masks;
  torch::Tensor visibility;

  int num_objects() const { return static_cast<int>(masks.size(0)); }
  BinaryMask mask(int object_id, int frame) const;
  Masklet masklet(int object_id) const;
};

/// Centre of every object on every frame, after reflection at frame edges.
/// Positions keep advancing while an object is occluded.
struct ObjectTrack {
  double radius = 0.0;
  std::array<float, 3> color{};
  std::vector<std::array<double, 2>> centers;  ///< (x, y) per frame
};

struct SynthesizedClip {
  VideoClip clip;
  MaskAnnotation annotation;
  std::vector<ObjectTrack> tracks;
};

SynthesizedClip generate_clip(const SynthConfig& config, std::uint64_t seed);

/// Point-in-shape test used by the renderer. Pixel centres sit on integer
/// coordinates.
bool shape_contains(ShapeKind kind, double cx, double cy, double radius, int x, int y);

/// Parameters for drawing whole datasets of varied clips.
struct DatasetRecipe {
  int num_clips = 10;
  int num_frames = 8;
  int height = 64;
  int width = 64;
  int min_objects = 1;
  int max_objects = 3;
  double min_radius = 5.0;
  double max_radius = 10.0;
  double min_speed = 1.0;
  double max_speed = 3.0;
  double occlusion_probability = 0.5;  ///< per object
  int min_occlusion = 1;
  int max_occlusion = 3;
};

/// Draws the per-clip config for clip `index` of a recipe. Object 0 (the
/// usual evaluation target) is never occluded on frame 0.
SynthConfig sample_config(const DatasetRecipe& recipe, std::uint64_t seed, int index);

/// Missing keys keep their defaults; throws ConfigError on invalid ranges.
void to_json(nlohmann::json& j, const DatasetRecipe& r);
void from_json(const nlohmann::json& j, DatasetRecipe& r);

struct ClipRecord {
  std::string id;
  VideoClip clip;
  MaskAnnotation annotation;
};

using Dataset = std::vector<ClipRecord>;

Dataset generate_dataset(const DatasetRecipe& recipe, std::uint64_t seed);

/// Layout: root/clip_<k>/frames/<t:06d>.png, root/clip_<k>/masks/obj_<o>/<t:06d>.png,
/// root/manifest.json. Returns the manifest path.
std::filesystem::path write_dataset(const Dataset& dataset, const std::filesystem::path& root);

/// Throws DatasetError naming the first missing or inconsistent file.
Dataset read_dataset(const std::filesystem::path& root);

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& s);

}  // namespace pvseg
