#pragma once

#include <vector>

#include "pvseg/data_synth.hpp"
#include "pvseg/mask.hpp"
#include "pvseg/prompt.hpp"

namespace pvseg {

/// Frame-by-frame segmentation of one object, driven by an evaluation
/// protocol or an interactive session. Frames are visited in increasing order
/// after `start`; `add_prompts` may revisit the frame just produced.
class Tracker {
public:
  virtual ~Tracker() = default;

  /// Resets all state for a new pass over `clip`.
  virtual void start(const VideoClip& clip) = 0;

  /// Segments `frame` given every prompt accumulated on it so far.
  virtual BinaryMask add_prompts(int frame, const std::vector<Prompt>& prompts) = 0;

  /// Segments `frame` from memory alone.
  virtual BinaryMask track(int frame) = 0;
};

}  // namespace pvseg
