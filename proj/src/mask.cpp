#include "pvseg/mask.hpp"

#include <algorithm>
#include <deque>
#include <limits>

#include "pvseg/errors.hpp"

namespace pvseg {

BinaryMask::BinaryMask(int height, int width, std::uint8_t fill)
    : height_(height), width_(width) {
  if (height < 0 || width < 0) {
    throw ShapeError("mask dimensions must be non-negative");
  }
  data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width),
               fill ? 1 : 0);
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> data)
    : height_(height), width_(width), data_(std::move(data)) {
  if (height < 0 || width < 0 ||
      data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw ShapeError("mask data size does not match its dimensions");
  }
  for (auto v : data_) {
    if (v > 1) throw ValidationError("mask values must be 0 or 1");
  }
}

std::int64_t BinaryMask::count() const noexcept {
  std::int64_t n = 0;
  for (auto v : data_) n += v;
  return n;
}

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("mask shapes differ");
  }
}

}  // namespace

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b);
  std::int64_t inter = 0;
  std::int64_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a.data()[i] & b.data()[i];
    uni += a.data()[i] | b.data()[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask mask_xor(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b);
  BinaryMask out(a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] ^ b.data()[i];
  return out;
}

BinaryMask mask_and_not(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b);
  BinaryMask out(a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data()[i] = a.data()[i] & static_cast<std::uint8_t>(1 - b.data()[i]);
  }
  return out;
}

std::optional<Box> tight_box(const BinaryMask& mask) {
  std::optional<Box> box;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(y, x)) continue;
      if (!box) {
        box = Box{x, y, x, y};
      } else {
        box->x0 = std::min(box->x0, x);
        box->y0 = std::min(box->y0, y);
        box->x1 = std::max(box->x1, x);
        box->y1 = std::max(box->y1, y);
      }
    }
  }
  return box;
}

namespace {

// Felzenszwalb-Huttenlocher 1D squared distance transform of a sampled function.
void edt_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d) {
  const int n = static_cast<int>(f.size());
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  int first = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  d.assign(n, kInf);
  if (first < 0) return;
  v[0] = first;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = first + 1; q < n; ++q) {
    if (f[q] >= kInf) continue;
    double s = 0.0;
    while (true) {
      const int p = v[k];
      s = (static_cast<double>(f[q] + std::int64_t{q} * q) -
           static_cast<double>(f[p] + std::int64_t{p} * p)) /
          (2.0 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const std::int64_t diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

std::vector<std::int64_t> squared_distance_to_background(const BinaryMask& mask) {
  // Work on a grid padded by one background pixel on every side.
  const int h = mask.height() + 2;
  const int w = mask.width() + 2;
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> grid(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask.at(y, x)) grid[static_cast<std::size_t>(y + 1) * w + (x + 1)] = kInf;
    }
  }
  std::vector<std::int64_t> f;
  std::vector<std::int64_t> d;
  for (int x = 0; x < w; ++x) {
    f.resize(h);
    for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(f, d);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    f.assign(grid.begin() + static_cast<std::ptrdiff_t>(y) * w,
             grid.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
    edt_1d(f, d);
    std::copy(d.begin(), d.end(), grid.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  std::vector<std::int64_t> out(mask.size(), 0);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      out[static_cast<std::size_t>(y) * mask.width() + x] =
          grid[static_cast<std::size_t>(y + 1) * w + (x + 1)];
    }
  }
  return out;
}

std::optional<Pixel> interior_most_pixel(const BinaryMask& mask) {
  const auto dist = squared_distance_to_background(mask);
  std::optional<Pixel> best;
  std::int64_t best_d = 0;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask.at(y, x)) continue;
      const auto d = dist[static_cast<std::size_t>(y) * mask.width() + x];
      if (!best || d > best_d) {
        best = Pixel{x, y};
        best_d = d;
      }
    }
  }
  return best;
}

int label_components(const BinaryMask& mask, std::vector<int>& labels) {
  const int h = mask.height();
  const int w = mask.width();
  labels.assign(mask.size(), 0);
  int next = 0;
  std::deque<int> queue;
  for (int start = 0; start < h * w; ++start) {
    if (!mask.data()[start] || labels[start]) continue;
    ++next;
    labels[start] = next;
    queue.push_back(start);
    while (!queue.empty()) {
      const int idx = queue.front();
      queue.pop_front();
      const int y = idx / w;
      const int x = idx % w;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int j = n[0] * w + n[1];
        if (mask.data()[j] && !labels[j]) {
          labels[j] = next;
          queue.push_back(j);
        }
      }
    }
  }
  return next;
}

BinaryMask largest_component(const BinaryMask& mask) {
  std::vector<int> labels;
  const int k = label_components(mask, labels);
  BinaryMask out(mask.height(), mask.width());
  if (k == 0) return out;
  std::vector<std::int64_t> sizes(k + 1, 0);
  for (int l : labels) sizes[l] += (l > 0);
  // Labels are assigned in row-major order of first pixel, so the lowest
  // label wins ties.
  int best = 1;
  for (int l = 2; l <= k; ++l) {
    if (sizes[l] > sizes[best]) best = l;
  }
  for (std::size_t i = 0; i < labels.size(); ++i) out.data()[i] = labels[i] == best;
  return out;
}

}  // namespace pvseg
