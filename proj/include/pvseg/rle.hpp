#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "pvseg/mask.hpp"

namespace pvseg {

/// Uncompressed run-length encoding of a binary mask over row-major pixels.
/// Runs alternate 0s and 1s and always start with a run of zeros, which may
/// have length 0. Sum of counts equals height * width.
struct RleMask {
  int height = 0;
  int width = 0;
  std::vector<std::int64_t> counts;

  friend bool operator==(const RleMask&, const RleMask&) = default;
};

RleMask rle_encode(const BinaryMask& mask);

/// Throws ValidationError when counts do not sum to height * width or a
/// count is negative.
BinaryMask rle_decode(const RleMask& rle);

/// {"h": .., "w": .., "counts": [..]}
nlohmann::json to_json(const RleMask& rle);
RleMask rle_from_json(const nlohmann::json& j);

}  // namespace pvseg
