#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "pvseg/decoder.hpp"
#include "pvseg/errors.hpp"
#include "pvseg/model.hpp"
#include "test_support.hpp"

namespace pvseg {
namespace {

using testing::finite_difference_check;
using testing::square;

const auto kFloat = torch::TensorOptions().dtype(torch::kFloat32);

TEST(SinusoidalEncodingTest, SingleFrequencyByHand) {
  const auto xy = torch::tensor({{0.25, 0.5}, {0.125, 0.0}}, torch::kDouble);
  const auto pe = sinusoidal_encoding(xy, 4);
  const double tau = 2.0 * std::numbers::pi;
  const auto expected = torch::tensor({{std::sin(tau * 0.25), std::cos(tau * 0.25), std::sin(tau * 0.5), std::cos(tau * 0.5)},
                                       {std::sin(tau * 0.125), std::cos(tau * 0.125), 0.0, 1.0}},
                                      torch::kDouble);
  EXPECT_TRUE(torch::allclose(pe, expected, 0.0, 1e-12));
  EXPECT_THROW(sinusoidal_encoding(xy, 6), ShapeError);
}

TEST(PromptEncoderTest, TokenCounts) {
  torch::manual_seed(30);
  PromptEncoder enc(32);
  auto none = enc->forward({}, 64, 64, 8, 8, kFloat);
  EXPECT_EQ(none.sparse.size(0), 0);
  EXPECT_TRUE(torch::equal(none.dense, enc->no_mask_embed.view({32, 1, 1}).expand({32, 8, 8})));

  auto click = enc->forward({Prompt::make_click(0, {3, 4}, Polarity::kPositive)}, 64, 64, 8, 8, kFloat);
  EXPECT_EQ(click.sparse.sizes(), (std::vector<int64_t>{1, 32}));

  auto box = enc->forward({Prompt::make_box(0, {2, 3, 10, 12})}, 64, 64, 8, 8, kFloat);
  ASSERT_EQ(box.sparse.size(0), 2);
  const auto pe = sinusoidal_encoding(torch::tensor({{2.5 / 64, 3.5 / 64}, {10.5 / 64, 12.5 / 64}}), 32);
  EXPECT_TRUE(torch::allclose(box.sparse[0] - pe[0], enc->point_embeddings[2], 1e-5, 1e-6));
  EXPECT_TRUE(torch::allclose(box.sparse[1] - pe[1], enc->point_embeddings[3], 1e-5, 1e-6));

  auto neg = enc->forward({Prompt::make_click(0, {3, 4}, Polarity::kNegative)}, 64, 64, 8, 8, kFloat);
  EXPECT_TRUE(torch::allclose(click.sparse[0] - neg.sparse[0],
                              enc->point_embeddings[0] - enc->point_embeddings[1], 1e-5, 1e-6));

  auto mask = enc->forward({Prompt::make_mask(0, square(64, 64, 8, 8, 20))}, 64, 64, 8, 8, kFloat);
  EXPECT_EQ(mask.sparse.size(0), 0);
  EXPECT_EQ(mask.dense.sizes(), (std::vector<int64_t>{32, 8, 8}));
  EXPECT_FALSE(torch::allclose(mask.dense, none.dense));
}

TEST(PromptEncoderTest, RejectsBadPrompts) {
  PromptEncoder enc(32);
  try {
    enc->forward({Prompt::make_click(0, {64, 4}, Polarity::kPositive)}, 64, 64, 8, 8, kFloat);
    FAIL() << "out-of-bounds click accepted";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "payload.x");
  }
  try {
    enc->forward({Prompt::make_click(0, {1, 1}, Polarity::kPositive),
                  Prompt::make_click(2, {1, 1}, Polarity::kPositive)},
                 64, 64, 8, 8, kFloat);
    FAIL() << "mixed frames accepted";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "frame");
  }
  EXPECT_THROW(enc->forward({Prompt::make_box(0, {5, 3, 4, 8})}, 64, 64, 8, 8, kFloat), ValidationError);
}

struct DecoderInputs {
  torch::Tensor features, sparse, dense, dense_pe, memory_prompts;
};

DecoderInputs random_inputs(PromptEncoder& enc, int64_t c, int64_t g, torch::Dtype dtype = torch::kFloat32) {
  const auto opts = torch::TensorOptions().dtype(dtype);
  DecoderInputs in;
  in.features = torch::randn({c, 8, 8}, opts);
  auto emb = enc->forward({Prompt::make_click(0, {20, 30}, Polarity::kPositive)}, 64, 64, 8, 8, opts);
  in.sparse = emb.sparse;
  in.dense = emb.dense;
  in.dense_pe = enc->dense_pe(8, 8, opts);
  if (g > 0) in.memory_prompts = torch::randn({g, enc->dim()}, opts);
  return in;
}

TEST(MaskDecoderTest, OutputShapesAndSelection) {
  for (int seed = 0; seed < 10; ++seed) {
    torch::manual_seed(seed);
    PromptEncoder enc(32);
    MaskDecoder dec(24, 32, 2, 4, 64, 3);
    const auto in = random_inputs(enc, 24, seed % 2 ? 3 : 0);
    const auto out = dec->forward(in.features, in.sparse, in.dense, in.dense_pe, in.memory_prompts, 64, 64);
    ASSERT_EQ(out.mask_logits.sizes(), (std::vector<int64_t>{3, 64, 64}));
    ASSERT_EQ(out.iou_pred.sizes(), (std::vector<int64_t>{3}));
    EXPECT_EQ(out.selected_index, out.iou_pred.argmax().item<int64_t>());
    EXPECT_GE(out.iou_pred.min().item<float>(), 0.0f);
    EXPECT_LE(out.iou_pred.max().item<float>(), 1.0f);
    const double score = out.object_score.item<double>();
    EXPECT_TRUE(score >= 0.0 && score <= 1.0);
    EXPECT_TRUE(torch::isfinite(out.mask_logits).all().item<bool>());
  }
}

TEST(MaskDecoderTest, RunsWithoutAnyTokensBeyondOutputs) {
  torch::manual_seed(31);
  PromptEncoder enc(32);
  MaskDecoder dec(24, 32, 2, 4, 64, 3);
  const auto dense = enc->forward({}, 64, 64, 8, 8, kFloat);
  const auto out = dec->forward(torch::randn({24, 8, 8}), dense.sparse, dense.dense, enc->dense_pe(8, 8, kFloat),
                                torch::Tensor(), 64, 64);
  EXPECT_EQ(out.mask_logits.sizes(), (std::vector<int64_t>{3, 64, 64}));
  // Zero memory prompts behave like none.
  const auto empty = dec->forward(torch::randn({24, 8, 8}), dense.sparse, dense.dense,
                                  enc->dense_pe(8, 8, kFloat), torch::zeros({0, 32}), 64, 64);
  EXPECT_EQ(empty.mask_logits.sizes(), (std::vector<int64_t>{3, 64, 64}));
}

TEST(MaskDecoderTest, MemoryPromptsChangeTheOutput) {
  torch::manual_seed(32);
  PromptEncoder enc(32);
  MaskDecoder dec(24, 32, 2, 4, 64, 3);
  const auto in = random_inputs(enc, 24, 3);
  const auto with = dec->forward(in.features, in.sparse, in.dense, in.dense_pe, in.memory_prompts, 64, 64);
  const auto without = dec->forward(in.features, in.sparse, in.dense, in.dense_pe, torch::Tensor(), 64, 64);
  EXPECT_FALSE(torch::allclose(with.mask_logits, without.mask_logits));
}

SegmentationOutput output_with(torch::Tensor logits, double object_score) {
  SegmentationOutput out;
  out.mask_logits = std::move(logits);
  out.iou_pred = torch::zeros({out.mask_logits.size(0)});
  out.iou_pred[0] = 1.0;
  out.object_logit = torch::tensor(std::log(object_score / (1.0 - object_score)));
  out.object_score = torch::tensor(object_score);
  out.selected_index = 0;
  return out;
}

TEST(FinalizeMaskTest, GateAndThreshold) {
  const auto big = torch::full({3, 4, 4}, 50.0);
  EXPECT_EQ(finalize_mask(output_with(big, 0.1)).count(), 0);
  EXPECT_EQ(finalize_mask(output_with(big, 0.9)).count(), 16);

  auto logits = torch::zeros({3, 2, 2});
  logits[0] = torch::tensor({{2.0, -2.0}, {-2.0, 2.0}});
  const auto m = finalize_mask(output_with(logits, 0.9), 0.5);
  EXPECT_EQ(m.data(), (std::vector<std::uint8_t>{1, 0, 0, 1}));

  // Only the selected mask counts.
  auto other = output_with(logits, 0.9);
  other.selected_index = 1;
  EXPECT_EQ(finalize_mask(other).count(), 0);
}

TEST(FinalizeMaskTest, MonotoneInThreshold) {
  torch::manual_seed(33);
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> unit(0.01, 0.99);
  for (int trial = 0; trial < 100; ++trial) {
    const auto out = output_with(torch::randn({3, 16, 16}) * 3.0, 0.8);
    double lo = unit(rng);
    double hi = unit(rng);
    if (lo > hi) std::swap(lo, hi);
    const auto a = finalize_mask(out, lo);
    const auto b = finalize_mask(out, hi);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_LE(b.data()[i], a.data()[i]);
  }
}

class MaskDecoderGradTest : public ::testing::TestWithParam<std::string> {};

TEST_P(MaskDecoderGradTest, FiniteDifferencesAgree) {
  torch::manual_seed(34);
  PromptEncoder enc(32);
  MaskDecoder dec(24, 32, 2, 4, 64, 3);
  enc->to(torch::kDouble);
  dec->to(torch::kDouble);
  const auto in = random_inputs(enc, 24, 3, torch::kDouble);
  const auto t_mask = torch::randn({3, 16, 16}, torch::kDouble);
  const auto t_iou = torch::randn({3}, torch::kDouble);
  auto loss = [&] {
    auto out = dec->forward(in.features, in.sparse.detach(), in.dense.detach(), in.dense_pe,
                            in.memory_prompts, 16, 16);
    return (out.mask_logits * t_mask).sum() + (out.iou_pred * t_iou).sum() + out.object_logit;
  };
  torch::Tensor param;
  for (const auto& kv : dec->named_parameters()) {
    if (kv.key() == GetParam()) param = kv.value();
  }
  ASSERT_TRUE(param.defined()) << GetParam();
  const auto check = finite_difference_check(param, loss);
  EXPECT_LE(check.relative_error, 1e-3) << check.analytic << " vs " << check.numeric;
  EXPECT_NE(check.analytic, 0.0);
}

INSTANTIATE_TEST_SUITE_P(Parameters, MaskDecoderGradTest,
                         ::testing::Values("blocks.1.token_to_image.k_proj.weight", "output_tokens",
                                           "hypernets.2.layers.0.weight", "up1.weight",
                                           "iou_head.layers.2.weight", "image_proj.weight"));

TEST(EndToEndTest, MaskLossReachesEveryModule) {
  torch::manual_seed(35);
  auto model = make_model(desk_model_config(), 35);
  const auto frames = torch::rand({3, 3, 64, 64});
  const auto gt = square(64, 64, 16, 16, 32);
  MemoryBank bank(20);
  bank.set_prompt_entry(model->encode_memory(model->frame_features(frames, 0), gt, 0, true));
  bank.insert(model->encode_memory(model->frame_features(frames, 1), gt, 1, false));
  const auto result = model->segment(model->frame_features(frames, 2), bank, 2, {},
                                     model->config().selection, 0, 64, 64);
  const auto target = mask_to_tensor(gt, kFloat);
  torch::binary_cross_entropy_with_logits(result.output.mask_logits[result.output.selected_index], target)
      .backward();
  auto has_grad = [](const std::shared_ptr<torch::nn::Module>& m) {
    for (const auto& p : m->parameters()) {
      if (p.grad().defined() && p.grad().abs().max().item<float>() > 0.0f) return true;
    }
    return false;
  };
  EXPECT_TRUE(has_grad(model->encoder.ptr()));
  EXPECT_TRUE(has_grad(model->tfi.ptr()));
  EXPECT_TRUE(has_grad(model->memory_encoder.ptr()));
  EXPECT_TRUE(has_grad(model->memory_attention.ptr()));
  EXPECT_TRUE(has_grad(model->mpg.ptr()));
  EXPECT_TRUE(has_grad(model->prompt_encoder.ptr()));
  EXPECT_TRUE(has_grad(model->decoder.ptr()));
}

}  // namespace
}  // namespace pvseg
