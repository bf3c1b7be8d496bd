#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace pvseg {

struct Pixel {
  int x = 0;
  int y = 0;

  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Inclusive pixel box: (x0, y0) top-left, (x1, y1) bottom-right.
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  friend bool operator==(const Box&, const Box&) = default;
};

/// Row-major binary mask. Values are 0 or 1.
class BinaryMask {
public:
  BinaryMask() = default;
  BinaryMask(int height, int width, std::uint8_t fill = 0);
  BinaryMask(int height, int width, std::vector<std::uint8_t> data);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::uint8_t at(int y, int x) const { return data_[index(y, x)]; }
  std::uint8_t& at(int y, int x) { return data_[index(y, x)]; }
  std::uint8_t at(Pixel p) const { return at(p.y, p.x); }
  bool contains(Pixel p) const noexcept {
    return p.x >= 0 && p.y >= 0 && p.x < width_ && p.y < height_;
  }

  const std::vector<std::uint8_t>& data() const noexcept { return data_; }
  std::vector<std::uint8_t>& data() noexcept { return data_; }

  std::int64_t count() const noexcept;
  bool empty() const noexcept { return count() == 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
  std::size_t index(int y, int x) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

using Masklet = std::vector<BinaryMask>;

/// Intersection over union; two empty masks score 1.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

BinaryMask mask_xor(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_and_not(const BinaryMask& a, const BinaryMask& b);

std::optional<Box> tight_box(const BinaryMask& mask);

/// Squared Euclidean distance from every foreground pixel to the nearest
/// background pixel. Pixels outside the frame count as background, so a
/// full-frame mask still has finite distances. Background pixels get 0.
std::vector<std::int64_t> squared_distance_to_background(const BinaryMask& mask);

/// Foreground pixel with the largest distance to background; ties resolve to
/// the first pixel in row-major order. nullopt for an empty mask.
std::optional<Pixel> interior_most_pixel(const BinaryMask& mask);

/// Largest 4-connected foreground component. Equal-sized components resolve
/// to the one whose first pixel comes first in row-major order.
BinaryMask largest_component(const BinaryMask& mask);

/// Labels 4-connected components 1..k, background 0. Returns k.
int label_components(const BinaryMask& mask, std::vector<int>& labels);

}  // namespace pvseg
