#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pvseg/mask.hpp"

namespace pvseg {

enum class PromptKind { kClick, kBox, kMask };
enum class Polarity { kPositive, kNegative };

/// A user prompt on one frame. Only the field matching `kind` is meaningful.
struct Prompt {
  PromptKind kind = PromptKind::kClick;
  int frame_index = 0;
  Pixel click;
  Polarity polarity = Polarity::kPositive;
  Box box;
  BinaryMask mask;

  static Prompt make_click(int frame, Pixel p, Polarity polarity);
  static Prompt make_box(int frame, Box box);
  static Prompt make_mask(int frame, BinaryMask mask);

  /// Throws ValidationError naming the offending field when the prompt does
  /// not fit an h x w frame.
  void validate(int height, int width) const;

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

std::string to_string(PromptKind kind);
std::string to_string(Polarity polarity);

/// Wire form used by the HTTP API: {"frame", "kind", "payload"}.
nlohmann::json to_json(const Prompt& prompt);
Prompt prompt_from_json(const nlohmann::json& j);

}  // namespace pvseg
