#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "pvseg/errors.hpp"
#include "pvseg/training.hpp"
#include "test_support.hpp"

namespace pvseg {
namespace {

torch::Tensor to_tensor(const BinaryMask& m) {
  return mask_to_tensor(m, torch::TensorOptions().dtype(torch::kDouble));
}

BinaryMask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  BinaryMask m(h, w);
  std::bernoulli_distribution on(p);
  for (auto& v : m.data()) v = on(rng) ? 1 : 0;
  return m;
}

BinaryMask square(int h, int w, int x0, int y0, int x1, int y1) {
  BinaryMask m(h, w);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) m.at(y, x) = 1;
  }
  return m;
}

// Scalar reference for the weighted loss: explicit 31x31 window sums divided
// by 961, then per-pixel BCE and IoU accumulation.
std::pair<double, double> scalar_mask_loss(const std::vector<double>& logits, const BinaryMask& gt) {
  const int h = gt.height();
  const int w = gt.width();
  double wsum = 0, wbce = 0, inter = 0, uni = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double pooled = 0;
      for (int dy = -15; dy <= 15; ++dy) {
        for (int dx = -15; dx <= 15; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) pooled += gt.at(yy, xx);
        }
      }
      pooled /= 961.0;
      const double g = gt.at(y, x);
      const double wt = 1.0 + 5.0 * std::abs(pooled - g);
      const double z = logits[static_cast<std::size_t>(y * w + x)];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double bce = -(g * std::log(p) + (1 - g) * std::log(1 - p));
      wsum += wt;
      wbce += wt * bce;
      inter += wt * p * g;
      uni += wt * (p + g - p * g);
    }
  }
  return {wbce / wsum, 1.0 - (inter + 1.0) / (uni + 1.0)};
}

TEST(MaskLossTest, CheckerboardMatchesScalarReference) {
  BinaryMask gt(4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) gt.at(y, x) = (x + y) % 2;
  }
  const auto terms = weighted_mask_loss(torch::zeros({4, 4}, torch::kDouble), to_tensor(gt));
  const auto [wbce, wiou] = scalar_mask_loss(std::vector<double>(16, 0.0), gt);
  EXPECT_NEAR(terms.wbce.item<double>(), std::log(2.0), 1e-12);
  EXPECT_NEAR(terms.wbce.item<double>(), wbce, 1e-12);
  EXPECT_NEAR(terms.wiou.item<double>(), wiou, 1e-12);
  EXPECT_NEAR(terms.total.item<double>(), wbce + wiou, 1e-12);
}

TEST(MaskLossTest, RandomMasksMatchScalarReference) {
  std::mt19937_64 rng(3);
  torch::manual_seed(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 8 + static_cast<int>(rng() % 30);
    const int w = 8 + static_cast<int>(rng() % 30);
    const auto gt = random_mask(h, w, 0.3, rng);
    const auto logits = torch::randn({h, w}, torch::kDouble) * 3.0;
    const auto terms = weighted_mask_loss(logits, to_tensor(gt));
    const auto flat = logits.contiguous();
    const auto [wbce, wiou] =
        scalar_mask_loss(std::vector<double>(flat.data_ptr<double>(), flat.data_ptr<double>() + h * w), gt);
    ASSERT_NEAR(terms.wbce.item<double>(), wbce, 1e-9) << "trial " << trial;
    ASSERT_NEAR(terms.wiou.item<double>(), wiou, 1e-9) << "trial " << trial;
  }
}

TEST(MaskLossTest, PerfectPredictionIsNearZero) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto gt = to_tensor(random_mask(16, 16, 0.4, rng));
    const auto logits = gt * 80.0 - 40.0;
    EXPECT_LE(weighted_mask_loss(logits, gt).total.item<double>(), 1e-6);
  }
  const auto empty = torch::zeros({16, 16}, torch::kDouble);
  const auto terms = weighted_mask_loss(torch::full({16, 16}, -40.0, torch::kDouble), empty);
  EXPECT_LE(terms.wiou.item<double>(), 1e-6);
  EXPECT_LE(terms.total.item<double>(), 1e-6);
}

TEST(MaskLossTest, NonBinaryTruthIsRejected) {
  auto gt = torch::zeros({4, 4});
  gt[1][1] = 0.5;
  try {
    weighted_mask_loss(torch::zeros({4, 4}), gt);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "gt");
  }
  EXPECT_THROW(weighted_mask_loss(torch::zeros({4, 4}), torch::zeros({4, 5})), ShapeError);
}

TEST(TotalLossTest, WeightsAreTwentyOneOne) {
  auto s = [](double v) { return torch::tensor(v, torch::kDouble); };
  EXPECT_NEAR(total_loss(s(0.1), s(0.2), s(0.3)).total.item<double>(), 2.5, 1e-12);
  EXPECT_EQ(total_loss(s(0), s(0), s(0)).total.item<double>(), 0.0);
  const auto a = total_loss(s(0.7), s(1.1), s(0.4)).total.item<double>();
  const auto b = total_loss(s(1.4), s(2.2), s(0.8)).total.item<double>();
  EXPECT_NEAR(b, 2 * a, 1e-12);

  auto m = torch::tensor(0.3, torch::dtype(torch::kDouble).requires_grad(true));
  auto i = torch::tensor(0.2, torch::dtype(torch::kDouble).requires_grad(true));
  auto o = torch::tensor(0.1, torch::dtype(torch::kDouble).requires_grad(true));
  total_loss(m, i, o).total.backward();
  EXPECT_EQ(m.grad().item<double>(), 20.0);
  EXPECT_EQ(i.grad().item<double>(), 1.0);
  EXPECT_EQ(o.grad().item<double>(), 1.0);
}

TEST(FrameLossTest, MinOverMasksAndIouRegression) {
  const auto gt = square(8, 8, 2, 2, 5, 5);
  const auto g = to_tensor(gt);
  SegmentationOutput out;
  out.mask_logits = torch::stack({g * 10.0 - 5.0, torch::full({8, 8}, -5.0, torch::kDouble),
                                  torch::full({8, 8}, 5.0, torch::kDouble)});
  out.iou_pred = torch::full({3}, 0.5, torch::kDouble);
  out.object_logit = torch::tensor(0.0, torch::kDouble);
  const auto loss = frame_loss(out, gt);

  double best = 1e9;
  for (int k = 0; k < 3; ++k) best = std::min(best, weighted_mask_loss(out.mask_logits[k], g).total.item<double>());
  EXPECT_NEAR(loss.mask_loss.item<double>(), best, 1e-12);
  EXPECT_NEAR(best, weighted_mask_loss(out.mask_logits[0], g).total.item<double>(), 1e-12);
  // True IoUs: 1, 0 and 16/64.
  EXPECT_NEAR(loss.iou_loss.item<double>(), (0.5 + 0.5 + 0.25) / 3.0, 1e-12);
  EXPECT_NEAR(loss.object_loss.item<double>(), std::log(2.0), 1e-12);
  EXPECT_NEAR(loss.total.item<double>(),
              20 * loss.mask_loss.item<double>() + loss.iou_loss.item<double>() + std::log(2.0), 1e-9);

  // Occluded target: object term pushes the logit down.
  out.object_logit = torch::tensor(3.0, torch::kDouble);
  EXPECT_NEAR(frame_loss(out, BinaryMask(8, 8)).object_loss.item<double>(), std::log1p(std::exp(3.0)), 1e-12);
}

TEST(PromptSamplerTest, InitialKindFrequencies) {
  const auto gt = square(16, 16, 3, 4, 9, 12);
  std::mt19937_64 rng(5);
  const int n = 10000;
  std::map<PromptKind, int> counts;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_initial_prompt(gt, 2, rng);
    ++counts[p.kind];
    ASSERT_EQ(p.frame_index, 2);
    switch (p.kind) {
      case PromptKind::kMask: ASSERT_EQ(p.mask, gt); break;
      case PromptKind::kClick:
        ASSERT_EQ(gt.at(p.click), 1);
        ASSERT_EQ(p.polarity, Polarity::kPositive);
        break;
      case PromptKind::kBox: ASSERT_EQ(p.box, (Box{3, 4, 9, 12})); break;
    }
  }
  for (auto [kind, prob] : {std::pair{PromptKind::kMask, 0.5}, {PromptKind::kClick, 0.25}, {PromptKind::kBox, 0.25}}) {
    const double se = std::sqrt(prob * (1 - prob) / n);
    EXPECT_NEAR(counts[kind] / static_cast<double>(n), prob, 3 * se) << to_string(kind);
  }
  EXPECT_THROW(sample_initial_prompt(BinaryMask(4, 4), 0, rng), ValidationError);
}

TEST(PromptSamplerTest, BoxPromptIsTightBox) {
  BinaryMask gt(10, 10);
  gt.at(5, 2) = gt.at(7, 4) = gt.at(6, 3) = 1;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto p = sample_initial_prompt(gt, 0, rng);
    if (p.kind == PromptKind::kBox) {
      EXPECT_EQ(p.box, (Box{2, 5, 4, 7}));
      return;
    }
  }
  FAIL() << "no box drawn";
}

TEST(CorrectiveClickTest, SourceFrequencies) {
  const auto gt = square(16, 16, 2, 2, 9, 9);
  const auto pred = square(16, 16, 5, 5, 12, 12);
  std::mt19937_64 rng(7);
  const int n = 10000;
  int from_error = 0;
  for (int i = 0; i < n; ++i) {
    const auto c = sample_corrective_click(pred, gt, 1, rng, false);
    ASSERT_TRUE(c.has_value());
    if (c->source == ClickSource::kErrorRegion) ++from_error;
  }
  const double se = std::sqrt(0.9 * 0.1 / n);
  EXPECT_NEAR(from_error / static_cast<double>(n), 0.9, 3 * se);
}

TEST(CorrectiveClickTest, ClicksLandInTheirRegions) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto gt = random_mask(12, 12, 0.3, rng);
    const auto pred = random_mask(12, 12, 0.3, rng);
    for (bool deterministic : {false, true}) {
      const auto c = sample_corrective_click(pred, gt, 0, rng, deterministic);
      if (gt.empty() && pred.empty()) {
        ASSERT_FALSE(c.has_value());
        continue;
      }
      if (!c) {
        ASSERT_TRUE(gt.empty());
        ASSERT_EQ(c.has_value(), false);
        continue;
      }
      const auto p = c->prompt.click;
      ASSERT_EQ(c->prompt.kind, PromptKind::kClick);
      switch (c->source) {
        case ClickSource::kErrorRegion:
          ASSERT_NE(pred.at(p), gt.at(p)) << "trial " << trial;
          ASSERT_EQ(c->prompt.polarity, gt.at(p) ? Polarity::kPositive : Polarity::kNegative);
          break;
        case ClickSource::kGroundTruth:
        case ClickSource::kFallback:
          ASSERT_EQ(gt.at(p), 1);
          ASSERT_EQ(c->prompt.polarity, Polarity::kPositive);
          break;
      }
    }
  }
}

TEST(CorrectiveClickTest, PerfectPredictionFallsBackToPositive) {
  const auto gt = square(8, 8, 1, 1, 5, 5);
  std::mt19937_64 rng(9);
  for (bool deterministic : {false, true}) {
    for (int i = 0; i < 50; ++i) {
      const auto c = sample_corrective_click(gt, gt, 0, rng, deterministic);
      ASSERT_TRUE(c.has_value());
      EXPECT_EQ(gt.at(c->prompt.click), 1);
      EXPECT_EQ(c->prompt.polarity, Polarity::kPositive);
      EXPECT_NE(c->source, ClickSource::kErrorRegion);
    }
  }
  const auto c = sample_corrective_click(gt, gt, 0, rng, true);
  EXPECT_EQ(c->prompt.click, (Pixel{3, 3}));
  EXPECT_FALSE(sample_corrective_click(BinaryMask(8, 8), BinaryMask(8, 8), 0, rng, true).has_value());
}

TEST(CorrectiveClickTest, FalsePositiveBlobGetsNegativeClick) {
  const auto gt = square(16, 16, 1, 1, 4, 4);
  auto pred = gt;
  for (int y = 9; y <= 13; ++y) {
    for (int x = 9; x <= 13; ++x) pred.at(y, x) = 1;
  }
  std::mt19937_64 rng(10);
  const auto c = sample_corrective_click(pred, gt, 0, rng, true);
  ASSERT_TRUE(c.has_value());
  EXPECT_EQ(c->prompt.polarity, Polarity::kNegative);
  EXPECT_EQ(c->prompt.click, (Pixel{11, 11}));
}

TEST(CorrectiveClickTest, MissingHalfGetsFarthestPixel) {
  const auto gt = square(16, 16, 4, 4, 11, 11);
  const auto pred = square(16, 16, 9, 4, 11, 11);
  // Brute force: the missing region is x in [4, 8], y in [4, 11]; pick the
  // pixel farthest from everything outside it, first in row-major order.
  const auto missing = mask_and_not(gt, pred);
  Pixel best{-1, -1};
  std::int64_t best_d = -1;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (!missing.at(y, x)) continue;
      std::int64_t d = std::numeric_limits<std::int64_t>::max();
      for (int yy = -1; yy <= 16; ++yy) {
        for (int xx = -1; xx <= 16; ++xx) {
          const bool inside = yy >= 0 && yy < 16 && xx >= 0 && xx < 16 && missing.at(yy, xx);
          if (!inside) d = std::min<std::int64_t>(d, (x - xx) * (x - xx) + (y - yy) * (y - yy));
        }
      }
      if (d > best_d) {
        best_d = d;
        best = {x, y};
      }
    }
  }
  std::mt19937_64 rng(11);
  const auto c = sample_corrective_click(pred, gt, 0, rng, true);
  ASSERT_TRUE(c.has_value());
  EXPECT_EQ(c->prompt.polarity, Polarity::kPositive);
  EXPECT_EQ(c->prompt.click, best);
  EXPECT_EQ(best, (Pixel{6, 6}));
}

TEST(ScheduleTest, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(3e-4, 0, 100), 3e-4);
  EXPECT_NEAR(cosine_lr(3e-4, 99, 100), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(3e-4, 33, 67), 1.5e-4, 1e-15);
  double prev = 1.0;
  for (int s = 0; s < 100; ++s) {
    const double lr = cosine_lr(1.0, s, 100);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

Dataset small_dataset(int clips, std::uint64_t seed) {
  DatasetRecipe r;
  r.num_clips = clips;
  return generate_dataset(r, seed);
}

TEST(TrainerTest, LayerDecayedLearningRates) {
  const auto data = small_dataset(2, 1);
  TrainConfig tc;
  tc.max_steps = 10;
  Trainer trainer(make_model(desk_model_config(), 0), tc, data);
  const auto lrs = trainer.group_lrs();
  const auto stages = trainer.model()->encoder->num_stages();
  ASSERT_EQ(static_cast<int64_t>(lrs.size()), stages + 1);
  for (int64_t s = 0; s < stages; ++s) {
    EXPECT_NEAR(lrs[static_cast<std::size_t>(s)], 3e-4 * std::pow(0.9, static_cast<double>(stages - 1 - s)), 1e-15);
  }
  EXPECT_DOUBLE_EQ(lrs[static_cast<std::size_t>(stages - 1)], 3e-4);
  EXPECT_DOUBLE_EQ(lrs.back(), 6e-5);
}

TEST(TrainerTest, PlansAreWellFormed) {
  const auto data = small_dataset(6, 2);
  TrainConfig tc;
  tc.max_steps = 10;
  Trainer trainer(make_model(desk_model_config(), 0), tc, data);
  int images = 0;
  for (int i = 0; i < 500; ++i) {
    const auto plan = trainer.next_plan();
    const auto& rec = data[static_cast<std::size_t>(plan.clip)];
    ASSERT_TRUE(plan.length == 1 || plan.length == 8);
    ASSERT_LE(plan.start + plan.length, rec.clip.num_frames());
    ASSERT_FALSE(rec.annotation.mask(plan.object, plan.start).empty());
    if (plan.length == 1) {
      ++images;
      ASSERT_FALSE(plan.corrective_frame.has_value());
    } else {
      ASSERT_TRUE(plan.corrective_frame.has_value());
      ASSERT_GE(*plan.corrective_frame, 1);
      ASSERT_LT(*plan.corrective_frame, plan.length);
    }
  }
  EXPECT_NEAR(images / 500.0, 0.2, 3 * std::sqrt(0.2 * 0.8 / 500));
}

std::set<const void*> ids(const std::vector<torch::Tensor>& ts) {
  std::set<const void*> out;
  for (const auto& t : ts) out.insert(t.unsafeGetTensorImpl());
  return out;
}

TEST(TrainerTest, SgdDebugStepIsMinusLrTimesGradient) {
  const auto data = small_dataset(2, 3);
  TrainConfig tc;
  tc.max_steps = 4;
  tc.sgd_debug = true;
  tc.lr_encoder = 1e-2;
  tc.lr_other = 2e-3;
  Trainer trainer(make_model(desk_model_config(), 0), tc, data);
  auto& model = trainer.model();
  const auto lrs = trainer.group_lrs();
  std::vector<torch::Tensor> before;
  for (const auto& p : model->parameters()) before.push_back(p.detach().clone());
  trainer.step();

  std::vector<std::set<const void*>> groups;
  for (int64_t s = 0; s < model->encoder->num_stages(); ++s) groups.push_back(ids(model->encoder_stage_parameters(s)));
  groups.push_back(ids(model->non_encoder_parameters()));

  const auto params = model->parameters();
  int checked = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.grad().defined()) continue;
    double lr = -1;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (groups[g].count(p.unsafeGetTensorImpl())) lr = lrs[g];
    }
    ASSERT_GT(lr, 0.0);
    const auto delta = p.detach() - before[i];
    const auto expected = -lr * p.grad();
    const auto tol = 1e-6 * (1.0 + before[i].abs());
    ASSERT_TRUE((delta - expected).abs().le(tol).all().item<bool>()) << "parameter " << i;
    ++checked;
  }
  EXPECT_GT(checked, 50);
}

TEST(TrainerTest, NonFiniteLossAborts) {
  const auto data = small_dataset(2, 4);
  TrainConfig tc;
  tc.max_steps = 4;
  Trainer trainer(make_model(desk_model_config(), 0), tc, data);
  {
    torch::NoGradGuard no_grad;
    trainer.model()->named_parameters()["decoder.output_tokens"].fill_(std::numeric_limits<float>::quiet_NaN());
  }
  try {
    trainer.step();
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(TrainerTest, RunsAreBitIdentical) {
  const auto data = small_dataset(3, 5);
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 11;
  const auto dir = std::filesystem::temp_directory_path() / "pvseg_train_det";
  std::filesystem::remove_all(dir);
  auto a = train(desk_model_config(), tc, data, {dir / "a", {}});
  auto b = train(desk_model_config(), tc, data, {dir / "b", {}});
  EXPECT_TRUE(parameters_equal(a, b));
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  for (const auto* f : {"checkpoint.pt", "checkpoint_epoch0.pt", "checkpoint_epoch1.pt", "metrics.ndjson"}) {
    ASSERT_TRUE(std::filesystem::exists(dir / "a" / f)) << f;
    EXPECT_EQ(read(dir / "a" / f), read(dir / "b" / f)) << f;
  }
  std::ifstream metrics(dir / "a" / "metrics.ndjson");
  int lines = 0;
  for (std::string line; std::getline(metrics, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"], lines);
    EXPECT_TRUE(j.contains("loss") && j.contains("lr_encoder") && j.contains("lr_other"));
  }
  EXPECT_EQ(lines, 6);
  auto reloaded = load_checkpoint(dir / "a" / "checkpoint.pt");
  EXPECT_TRUE(parameters_equal(a, reloaded));
  std::filesystem::remove_all(dir);
}

TEST(TrainConfigTest, InvalidValuesAreConfigErrors) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](TrainConfig& c) { c.epochs = 0; });
  bad([](TrainConfig& c) { c.corrective_frames = 2; });
  bad([](TrainConfig& c) { c.prompt_probs.mask = 0.6; });
  bad([](TrainConfig& c) { c.correction_probs.ground_truth = 0.2; });
  bad([](TrainConfig& c) { c.image_probability = 1.5; });
  TrainConfig c;
  c.seed = 99;
  c.lr_other = 1e-3;
  nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.lr_other, 1e-3);
}

// Loss trend over a short run. With m_k the mean of losses k..k+9, a window
// k counts as decreasing when m_{k+10} < m_k. Five baseline seeds of this
// exact setup scored between 0.968 and 1.0 (tests/data/smoke_baseline.json);
// the bar sits at 0.8 to leave room for platform-level float differences.
TEST(TrainingSmokeTest, SmoothedLossDecreases) {
  const auto data = small_dataset(10, 7);
  TrainConfig tc;
  tc.max_steps = 50;
  tc.seed = 0;
  Trainer trainer(make_model(desk_model_config(), 0), tc, data);
  std::vector<double> losses;
  for (int s = 0; s < 50; ++s) losses.push_back(trainer.step().total);
  std::vector<double> smoothed;
  for (std::size_t k = 0; k + 10 <= losses.size(); ++k) {
    smoothed.push_back(std::accumulate(losses.begin() + k, losses.begin() + k + 10, 0.0) / 10.0);
  }
  int down = 0;
  const int windows = static_cast<int>(smoothed.size()) - 10;
  for (int k = 0; k < windows; ++k) down += smoothed[k + 10] < smoothed[k];
  EXPECT_GE(down / static_cast<double>(windows), 0.8) << down << " of " << windows;
}

}  // namespace
}  // namespace pvseg
