#include <random>

#include <gtest/gtest.h>

#include "pvseg/errors.hpp"
#include "pvseg/evaluation.hpp"
#include "pvseg/model.hpp"
#include "test_support.hpp"

namespace pvseg {
namespace {

using testing::blank_clip;
using testing::EmptyTracker;
using testing::PerfectTracker;
using testing::random_mask;
using testing::reference_jf;
using testing::RefiningTracker;
using testing::square;

TEST(JfMetricTest, MatchesReferenceOnRandomPairs) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_mask(16, 16, 0.1 + 0.8 * (trial % 5) / 5.0, rng);
    const auto g = random_mask(16, 16, 0.4, rng);
    const double tol = trial % 2 ? 0.008 : 0.1;
    const int r = boundary_radius(16, 16, tol);
    const auto [j, f] = reference_jf(p, g, r);
    const auto s = jf_metric({p}, {g}, tol);
    ASSERT_NEAR(s.j, j, 1e-12) << "trial " << trial;
    ASSERT_NEAR(s.f, f, 1e-12) << "trial " << trial;
    ASSERT_NEAR(s.jf, 0.5 * (j + f), 1e-12);
  }
}

TEST(JfMetricTest, HalfSquareHasJaccardHalf) {
  const auto g = square(16, 16, 4, 4, 8);
  BinaryMask p(16, 16);
  for (int y = 4; y < 12; ++y) {
    for (int x = 4; x < 8; ++x) p.at(y, x) = 1;
  }
  EXPECT_DOUBLE_EQ(jf_metric({p}, {g}, 0.008).j, 0.5);
}

TEST(JfMetricTest, EdgeCases) {
  const auto g = square(16, 16, 2, 2, 5);
  const auto id = jf_metric({g}, {g}, 0.008);
  EXPECT_EQ(id.j, 1.0);
  EXPECT_EQ(id.f, 1.0);
  const auto both_empty = jf_metric({BinaryMask(16, 16)}, {BinaryMask(16, 16)}, 0.008);
  EXPECT_EQ(both_empty.jf, 1.0);
  const auto one_empty = jf_metric({BinaryMask(16, 16)}, {g}, 0.008);
  EXPECT_EQ(one_empty.j, 0.0);
  EXPECT_EQ(one_empty.f, 0.0);
  EXPECT_THROW(jf_metric({g, g}, {g}, 0.008), ValidationError);
  EXPECT_EQ(boundary_radius(480, 854, 0.008), 8);
  EXPECT_EQ(boundary_radius(16, 16, 0.008), 1);
}

TEST(JfMetricTest, FrameSubsetAverages) {
  const auto g = square(16, 16, 2, 2, 6);
  const Masklet pred{g, BinaryMask(16, 16), g};
  const Masklet gt{g, g, g};
  EXPECT_DOUBLE_EQ(jf_metric(pred, gt, 0.008).j, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(jf_metric(pred, gt, 0.008, {0, 2}).jf, 1.0);
}

Masklet moving_squares(int n) {
  Masklet out;
  for (int t = 0; t < n; ++t) out.push_back(square(32, 32, 4 + t, 6, 10));
  return out;
}

TEST(OnlineEvalTest, PerfectTrackerNeverPauses) {
  const auto gt = moving_squares(8);
  PerfectTracker tracker(gt);
  const auto r = run_online_eval(tracker, blank_clip(8, 32, 32), gt, EvalConfig{});
  EXPECT_EQ(r.pauses, 0);
  EXPECT_EQ(r.score.jf, 1.0);
  ASSERT_EQ(r.interactions.size(), 1u);
  EXPECT_EQ(r.interactions[0].frame, 0);
  EXPECT_EQ(r.interactions[0].clicks, 3);
}

TEST(OnlineEvalTest, EmptyTrackerPausesExactlyNFrame) {
  const auto gt = moving_squares(8);
  for (int n_frame = 0; n_frame <= 7; ++n_frame) {
    EmptyTracker tracker(32, 32);
    EvalConfig cfg;
    cfg.n_frame = n_frame;
    const auto r = run_online_eval(tracker, blank_clip(8, 32, 32), gt, cfg);
    EXPECT_EQ(r.pauses, n_frame);
    EXPECT_EQ(r.score.j, 0.0);
    ASSERT_EQ(static_cast<int>(r.interactions.size()), 1 + n_frame);
    for (std::size_t i = 1; i < r.interactions.size(); ++i) {
      EXPECT_EQ(r.interactions[i].frame, static_cast<int>(i));
      EXPECT_LT(r.interactions[i].iou_before, 0.75);
    }
  }
}

TEST(OnlineEvalTest, HandTracedFourFrameRun) {
  const auto gt = moving_squares(4);
  Masklet propagated = gt;
  propagated[1] = square(32, 32, 5, 6, 9);   // IoU 81/100, no pause
  propagated[2] = square(32, 32, 11, 6, 10);  // IoU 5/15 = 1/3, pause
  propagated[3] = square(32, 32, 7, 7, 9);    // IoU 81/100, no pause
  RefiningTracker tracker(propagated, gt);
  EvalConfig cfg;
  cfg.n_frame = 3;
  const auto r = run_online_eval(tracker, blank_clip(4, 32, 32), gt, cfg);

  EXPECT_EQ(r.pauses, 1);
  ASSERT_EQ(r.interactions.size(), 2u);
  EXPECT_EQ(r.interactions[1].frame, 2);
  EXPECT_EQ(r.interactions[1].clicks, 3);
  EXPECT_NEAR(r.interactions[1].iou_before, 50.0 / 150.0, 1e-12);
  EXPECT_EQ(r.interactions[1].iou_after, 1.0);

  const int radius = boundary_radius(32, 32, 0.008);
  const Masklet expected{gt[0], propagated[1], gt[2], propagated[3]};
  double j = 0, f = 0;
  for (int t = 0; t < 4; ++t) {
    EXPECT_EQ(r.masks[t], expected[t]) << "frame " << t;
    const auto [jt, ft] = reference_jf(expected[t], gt[t], radius);
    j += jt / 4;
    f += ft / 4;
  }
  EXPECT_NEAR(r.score.j, (1.0 + 0.81 + 1.0 + 0.81) / 4.0, 1e-12);
  EXPECT_NEAR(r.score.j, j, 1e-12);
  EXPECT_NEAR(r.score.f, f, 1e-12);
  EXPECT_NEAR(r.score.jf, 0.5 * (j + f), 1e-12);
}

TEST(OnlineEvalTest, SkipsUnpromptableObjects) {
  Masklet gt(4, BinaryMask(16, 16));
  EmptyTracker tracker(16, 16);
  EXPECT_TRUE(run_online_eval(tracker, blank_clip(4, 16, 16), gt, EvalConfig{}).skipped);
  gt[2] = square(16, 16, 2, 2, 4);
  const auto r = run_online_eval(tracker, blank_clip(4, 16, 16), gt, EvalConfig{});
  EXPECT_TRUE(r.skipped);
  EXPECT_NE(r.skip_reason.find("frame 0"), std::string::npos);
  EXPECT_THROW(run_online_eval(tracker, blank_clip(3, 16, 16), gt, EvalConfig{}), ValidationError);
}

TEST(OfflineEvalTest, SinglePassEqualsOnlineWithoutPauses) {
  const auto gt = moving_squares(6);
  Masklet propagated = gt;
  propagated[3] = square(32, 32, 0, 0, 4);
  EvalConfig online;
  online.n_frame = 0;
  EvalConfig offline;
  offline.n_pass = 1;
  RefiningTracker a(propagated, gt), b(propagated, gt);
  const auto ron = run_online_eval(a, blank_clip(6, 32, 32), gt, online);
  const auto roff = run_offline_eval(b, blank_clip(6, 32, 32), gt, offline);
  EXPECT_EQ(ron.masks, roff.masks);
  EXPECT_EQ(ron.score.jf, roff.score.jf);
  EXPECT_EQ(a.calls, b.calls);

  EmptyTracker e1(32, 32), e2(32, 32);
  EXPECT_EQ(run_online_eval(e1, blank_clip(6, 32, 32), gt, online).score.jf,
            run_offline_eval(e2, blank_clip(6, 32, 32), gt, offline).score.jf);
}

TEST(OfflineEvalTest, PassesRefineTheWorstFrame) {
  const auto gt = moving_squares(6);
  Masklet propagated = gt;
  propagated[2] = square(32, 32, 0, 0, 3);
  propagated[4] = square(32, 32, 9, 7, 8);
  RefiningTracker tracker(propagated, gt);
  EvalConfig cfg;
  cfg.n_pass = 3;
  const auto r = run_offline_eval(tracker, blank_clip(6, 32, 32), gt, cfg);
  ASSERT_EQ(r.pass_scores.size(), 3u);
  for (std::size_t i = 1; i < r.pass_scores.size(); ++i) {
    EXPECT_GE(r.pass_scores[i].jf, r.pass_scores[i - 1].jf);
  }
  ASSERT_EQ(r.interactions.size(), 3u);
  EXPECT_EQ(r.interactions[1].pass, 2);
  EXPECT_EQ(r.interactions[1].frame, 2);
  EXPECT_EQ(r.interactions[2].pass, 3);
  EXPECT_EQ(r.interactions[2].frame, 4);
  EXPECT_EQ(r.score.jf, 1.0);
}

TEST(SemiVosTest, MaskPromptExcludesFrameZero) {
  const auto gt = moving_squares(5);
  Masklet propagated = gt;
  propagated[0] = BinaryMask(32, 32);
  RefiningTracker tracker(propagated, gt, false);
  const auto r = run_semivos(tracker, blank_clip(5, 32, 32), gt, SemiVosPrompt::kMask, EvalConfig{});
  EXPECT_EQ(r.scored_frames, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(r.score.jf, 1.0);
  ASSERT_EQ(tracker.calls.size(), 1u);

  const auto one = Masklet{gt[0]};
  RefiningTracker single(one, one, false);
  EXPECT_TRUE(run_semivos(single, blank_clip(1, 32, 32), one, SemiVosPrompt::kMask, EvalConfig{}).skipped);
}

TEST(SemiVosTest, BoxAndClickPromptsScoreEveryFrame) {
  const auto gt = moving_squares(4);
  for (auto p : {SemiVosPrompt::kBox, SemiVosPrompt::kThreeClick}) {
    RefiningTracker tracker(gt, gt, false);
    const auto r = run_semivos(tracker, blank_clip(4, 32, 32), gt, p, EvalConfig{});
    EXPECT_EQ(r.scored_frames.size(), 4u);
    EXPECT_EQ(r.interactions[0].clicks, p == SemiVosPrompt::kBox ? 1 : 3);
  }
}

TEST(EvalConfigTest, Validation) {
  auto bad = [](auto mutate) {
    EvalConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](EvalConfig& c) { c.n_click = 0; });
  bad([](EvalConfig& c) { c.n_frame = -1; });
  bad([](EvalConfig& c) { c.n_pass = 0; });
  bad([](EvalConfig& c) { c.iou_pause_threshold = 1.0; });
  bad([](EvalConfig& c) { c.boundary_tolerance = 0.0; });
  EXPECT_EQ(protocol_from_string("offline"), Protocol::kOffline);
  EXPECT_THROW(protocol_from_string("batch"), ValidationError);
  EXPECT_EQ(semivos_prompt_from_string(to_string(SemiVosPrompt::kMask)), SemiVosPrompt::kMask);
}

TEST(EvalDatasetTest, ModelRunsAreDeterministic) {
  DatasetRecipe recipe;
  recipe.num_clips = 2;
  const auto data = generate_dataset(recipe, 3);
  auto run = [&](Protocol p) {
    ModelTracker tracker(make_model(desk_model_config(), 5));
    return to_json(evaluate_dataset(tracker, data, p, EvalConfig{})).dump();
  };
  for (auto p : {Protocol::kOnline, Protocol::kOffline, Protocol::kSemiVos}) {
    const auto a = run(p);
    EXPECT_EQ(a, run(p)) << to_string(p);
    const auto j = nlohmann::json::parse(a);
    EXPECT_EQ(j["summary"]["evaluated"].get<int>() + j["summary"]["skipped"].get<int>(), 2);
    for (const auto& clip : j["clips"]) {
      if (clip["skipped"]) continue;
      for (const auto& i : clip["interactions"]) {
        if (p == Protocol::kOnline && i["frame"] != 0) EXPECT_LT(i["iou_before"].get<double>(), 0.75);
      }
      if (p == Protocol::kOnline) EXPECT_LE(clip["pauses"].get<int>(), 3);
    }
  }
}

}  // namespace
}  // namespace pvseg
