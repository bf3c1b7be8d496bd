#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <vector>

#include <torch/torch.h>

#include "pvseg/data_synth.hpp"
#include "pvseg/mask.hpp"
#include "pvseg/tracker.hpp"

namespace pvseg::testing {

/// Returns the ground truth on every frame.
class PerfectTracker : public Tracker {
public:
  explicit PerfectTracker(Masklet gt) : gt_(std::move(gt)) {}
  void start(const VideoClip&) override { ++starts; }
  BinaryMask add_prompts(int frame, const std::vector<Prompt>&) override { return gt_.at(frame); }
  BinaryMask track(int frame) override { return gt_.at(frame); }
  int starts = 0;

private:
  Masklet gt_;
};

/// Always returns an empty mask.
class EmptyTracker : public Tracker {
public:
  EmptyTracker(int h, int w) : h_(h), w_(w) {}
  void start(const VideoClip&) override {}
  BinaryMask add_prompts(int, const std::vector<Prompt>&) override { return BinaryMask(h_, w_); }
  BinaryMask track(int) override { return BinaryMask(h_, w_); }

private:
  int h_;
  int w_;
};

/// Propagated frames come from `propagated`; any frame that has received a
/// prompt in the current pass, or in an earlier pass when `sticky`, returns gt.
class RefiningTracker : public Tracker {
public:
  RefiningTracker(Masklet propagated, Masklet gt, bool sticky = true)
      : propagated_(std::move(propagated)), gt_(std::move(gt)), sticky_(sticky) {}
  void start(const VideoClip&) override {
    if (!sticky_) clicked_.clear();
  }
  BinaryMask add_prompts(int frame, const std::vector<Prompt>& prompts) override {
    clicked_.insert(frame);
    calls.push_back({frame, static_cast<int>(prompts.size())});
    return gt_.at(frame);
  }
  BinaryMask track(int frame) override {
    return clicked_.count(frame) ? gt_.at(frame) : propagated_.at(frame);
  }
  std::vector<std::pair<int, int>> calls;  ///< (frame, prompts passed)

private:
  Masklet propagated_;
  Masklet gt_;
  std::set<int> clicked_;
  bool sticky_;
};

/// Square mask [x0, x0+size) x [y0, y0+size).
inline BinaryMask square(int h, int w, int x0, int y0, int size) {
  BinaryMask m(h, w);
  for (int y = y0; y < y0 + size; ++y)
    for (int x = x0; x < x0 + size; ++x)
      if (y >= 0 && x >= 0 && y < h && x < w) m.at(y, x) = 1;
  return m;
}

inline BinaryMask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution bit(p);
  BinaryMask m(h, w);
  for (auto& v : m.data()) v = bit(rng) ? 1 : 0;
  return m;
}

inline VideoClip blank_clip(int n, int h, int w) {
  return VideoClip{torch::zeros({n, 3, h, w})};
}

// Independent J&F: pixel counting for J; for F, boundaries from an explicit
// neighbour scan and matches from an all-pairs distance search.
inline std::vector<Pixel> reference_boundary(const BinaryMask& m) {
  std::vector<Pixel> out;
  const int h = m.height(), w = m.width();
  const int dx[] = {1, -1, 0, 0};
  const int dy[] = {0, 0, 1, -1};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!m.at(y, x)) continue;
      for (int k = 0; k < 4; ++k) {
        const int xx = x + dx[k], yy = y + dy[k];
        if (xx < 0 || yy < 0 || xx >= w || yy >= h || !m.at(yy, xx)) {
          out.push_back({x, y});
          break;
        }
      }
    }
  }
  return out;
}

inline double reference_matched(const std::vector<Pixel>& from, const std::vector<Pixel>& to, int r) {
  int hit = 0;
  for (const auto& p : from) {
    for (const auto& q : to) {
      if ((p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y) <= r * r) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(from.size());
}

inline std::pair<double, double> reference_jf(const BinaryMask& p, const BinaryMask& g, int r) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p.data()[i] && g.data()[i];
    uni += p.data()[i] || g.data()[i];
  }
  const double j = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
  const auto bp = reference_boundary(p);
  const auto bg = reference_boundary(g);
  double f = 0.0;
  if (bp.empty() && bg.empty()) {
    f = 1.0;
  } else if (!bp.empty() && !bg.empty()) {
    const double prec = reference_matched(bp, bg, r);
    const double rec = reference_matched(bg, bp, r);
    f = prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec);
  }
  return {j, f};
}

struct GradCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

/// Central finite difference on the element of `param` with the largest
/// analytic gradient magnitude. `loss` must rebuild the graph on each call.
/// Everything is expected to be float64 already. The relative error uses a
/// denominator of at least 1e-3 so that structurally zero gradients (a key
/// bias under softmax, say) are judged on absolute agreement instead of noise.
inline GradCheck finite_difference_check(torch::Tensor param, const std::function<torch::Tensor()>& loss,
                                         double eps = 1e-6) {
  if (param.grad().defined()) param.mutable_grad().zero_();
  loss().backward();
  auto grad = param.grad().detach().flatten();
  const auto idx = grad.abs().argmax().item<int64_t>();
  GradCheck out;
  out.analytic = grad[idx].item<double>();
  auto flat = param.detach().view({-1});
  const double original = flat[idx].item<double>();
  torch::NoGradGuard no_grad;
  flat[idx] = original + eps;
  const double up = loss().item<double>();
  flat[idx] = original - eps;
  const double down = loss().item<double>();
  flat[idx] = original;
  out.numeric = (up - down) / (2.0 * eps);
  const double denom = std::max({std::abs(out.analytic), std::abs(out.numeric), 1e-3});
  out.relative_error = std::abs(out.analytic - out.numeric) / denom;
  return out;
}

}  // namespace pvseg::testing
