// Model-level behavior: parameter bookkeeping, masking of empty patches,
// translation equivariance under rotary positions, conditioning, loss masks,
// and an end-to-end gradient check.

#include <gtest/gtest.h>

#include <cmath>

#include "support/testutil.hpp"
#include "varc/vit.hpp"

using namespace varc;

namespace {

VitConfig tiny_config() {
  VitConfig cfg;
  cfg.hidden_dim = 32;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.mlp_hidden = 32;
  cfg.canvas_size = 8;
  cfg.patch_size = 2;
  cfg.num_task_embeddings = 4;
  cfg.dropout = 0.0f;
  return cfg;
}

VitConfig small16() {
  VitConfig cfg = tiny_config();
  cfg.canvas_size = 16;
  return cfg;
}

Canvas place_at(const Grid& g, int r0, int c0, int S) {
  ViewTransform v;
  v.row0 = r0;
  v.col0 = c0;
  return place_input(g, v, S);
}

Grid sample_grid() {
  Grid g(3, 3);
  for (int i = 0; i < 9; ++i) g.cells[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((i * 7) % 10);
  return g;
}

}  // namespace

TEST(VitParams, TableCountsMatchTheThreeReferenceSizes) {
  VitConfig small;
  small.hidden_dim = 384;
  small.depth = 5;
  small.heads = 8;
  VitConfig mid;
  mid.hidden_dim = 512;
  mid.depth = 10;
  mid.heads = 8;
  VitConfig large;
  large.hidden_dim = 768;
  large.depth = 20;
  large.heads = 12;
  for (VitConfig* c : {&small, &mid, &large}) {
    c->mlp_hidden = 512;
    c->canvas_size = 64;
    c->patch_size = 2;
    c->num_task_embeddings = 400;
  }
  EXPECT_EQ(count_params(small), 5702704);
  EXPECT_EQ(count_params(mid), 17065520);
  EXPECT_EQ(count_params(large), 65777968);
  // Within 10% of the nominal 6M / 18M / 66M.
  EXPECT_NEAR(static_cast<double>(count_params(small)), 6e6, 0.1 * 6e6);
  EXPECT_NEAR(static_cast<double>(count_params(mid)), 18e6, 0.1 * 18e6);
  EXPECT_NEAR(static_cast<double>(count_params(large)), 66e6, 0.1 * 66e6);
}

TEST(VitParams, CanonicalShapesAndInit) {
  const VitConfig cfg = tiny_config();
  const auto shapes = param_shapes(cfg);
  ASSERT_FALSE(shapes.empty());
  EXPECT_EQ(shapes.front().first, "pixel_embed");
  EXPECT_EQ(shapes.back().first, "head.b");
  std::int64_t total = 0;
  for (const auto& [name, shape] : shapes) total += Tensor::numel_of(shape);
  EXPECT_EQ(total, count_params(cfg));

  Rng rng(1);
  VitModel model = VitModel::init(cfg, rng);
  ASSERT_EQ(model.params.size(), shapes.size());
  EXPECT_EQ(model.num_params(), total);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    EXPECT_EQ(model.params[i].name, shapes[i].first);
    EXPECT_EQ(model.params[i].value.shape, shapes[i].second);
  }
  // Norm gains start at one, biases at zero.
  for (const auto& p : model.params) {
    if (p.name.size() >= 2 && p.name.substr(p.name.size() - 2) == ".g") {
      for (float v : p.value.data) EXPECT_EQ(v, 1.0f);
    }
    if (p.name == "head.b") {
      for (float v : p.value.data) EXPECT_EQ(v, 0.0f);
    }
  }
  EXPECT_THROW(model.find("no_such_tensor"), Error);
}

TEST(VitConfigValidation, RejectsInconsistentSettings) {
  VitConfig bad = tiny_config();
  bad.heads = 5;  // 32 % 5 != 0
  EXPECT_THROW(bad.validate(), Error);
  bad = tiny_config();
  bad.canvas_size = 9;  // not a multiple of the patch
  EXPECT_THROW(bad.validate(), Error);
  bad = tiny_config();
  bad.dropout = 1.0f;
  EXPECT_THROW(bad.validate(), Error);
  bad = tiny_config();
  bad.hidden_dim = 30;  // head_dim 7.5
  EXPECT_THROW(bad.validate(), Error);
  bad = tiny_config();
  bad.heads = 16;  // head_dim 2: too small for the 2D rotary split
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(VitForward, EmptyPatchesAreMaskedAndTaskTokenIsNot) {
  const VitConfig cfg = small16();
  Rng rng(2);
  const VitModel model = VitModel::init(cfg, rng);
  const Canvas canvas = place_at(sample_grid(), 2, 4, 16);

  const TokenizeResult tok = tokenize(model, canvas);
  VitActs acts;
  Rng fwd(0);
  vit_forward(model, {&canvas}, {0}, false, fwd, acts);

  const int T = cfg.seq_len();
  EXPECT_EQ(acts.key_mask[0], 0);  // the task token is always attendable
  int masked = 0;
  for (std::int64_t n = 0; n < cfg.num_patches(); ++n) {
    EXPECT_EQ(acts.key_mask[1 + n] != 0, tok.patch_bg_mask[static_cast<std::size_t>(n)] != 0);
    masked += acts.key_mask[1 + n] != 0;
  }
  EXPECT_GT(masked, 0);
  EXPECT_LT(masked, cfg.num_patches());

  // Attention puts exactly zero weight on every masked key, in every block.
  for (const BlockActs& blk : acts.blocks) {
    for (int h = 0; h < cfg.heads; ++h) {
      for (int i = 0; i < T; ++i) {
        for (int j = 0; j < T; ++j) {
          if (!acts.key_mask[static_cast<std::size_t>(j)]) continue;
          EXPECT_EQ(blk.attn.probs.data[((0 * cfg.heads + h) * T + i) * T + j], 0.0f);
        }
      }
    }
  }
}

TEST(VitForward, BackgroundOnlyRegionsDoNotInfluencePredictions) {
  // Logits must not change when the value vectors of fully-background
  // patches would otherwise differ: placing the same grid on two canvases
  // and comparing against a canvas that was never any different only checks
  // determinism, so instead verify a patch-aligned translation moves the
  // prediction field rigidly (relative positions + masked background are the
  // only position signals).
  const VitConfig cfg = small16();
  Rng rng(3);
  const VitModel model = VitModel::init(cfg, rng);
  const Grid g = sample_grid();

  VitActs acts;
  Rng fwd(0);
  const Tensor la = vit_forward_single(model, place_at(g, 2, 2, 16), 1, false, fwd, acts);
  const Tensor lb = vit_forward_single(model, place_at(g, 6, 10, 16), 1, false, fwd, acts);

  // Compare the full placed region plus the border cells (4x4 through 2px
  // shifts stay patch-aligned: dr=4, dc=8).
  const int S = 16;
  double max_diff = 0.0;
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 5; ++c) {
      for (int sym = 0; sym < kNumSymbols; ++sym) {
        const std::size_t ia = ((static_cast<std::size_t>(2 + r) * S) + (2 + c)) * kNumSymbols + sym;
        const std::size_t ib = ((static_cast<std::size_t>(6 + r) * S) + (10 + c)) * kNumSymbols + sym;
        max_diff = std::max(max_diff, std::abs(static_cast<double>(la.data[ia]) - lb.data[ib]));
      }
    }
  }
  EXPECT_LT(max_diff, 1e-4);
}

TEST(VitForward, TaskTokenConditionsTheOutput) {
  const VitConfig cfg = small16();
  Rng rng(4);
  const VitModel model = VitModel::init(cfg, rng);
  const Canvas canvas = place_at(sample_grid(), 2, 2, 16);
  VitActs acts;
  Rng fwd(0);
  const Tensor l0 = vit_forward_single(model, canvas, 0, false, fwd, acts);
  const Tensor l1 = vit_forward_single(model, canvas, 1, false, fwd, acts);
  double diff = 0.0;
  for (std::int64_t i = 0; i < l0.numel(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(l0.data[i]) - l1.data[i]));
  EXPECT_GT(diff, 1e-4);
  EXPECT_THROW(vit_forward_single(model, canvas, cfg.num_task_embeddings, false, fwd, acts),
               Error);
}

TEST(VitForward, EvalModeIsDeterministicAndDropoutIsNot) {
  VitConfig cfg = small16();
  cfg.dropout = 0.2f;
  Rng rng(5);
  const VitModel model = VitModel::init(cfg, rng);
  const Canvas canvas = place_at(sample_grid(), 0, 0, 16);
  VitActs acts;
  Rng fwd1(1), fwd2(2), fwd3(1);
  const Tensor e1 = vit_forward_single(model, canvas, 0, false, fwd1, acts);
  const Tensor e2 = vit_forward_single(model, canvas, 0, false, fwd2, acts);
  EXPECT_EQ(e1.data, e2.data);  // dropout off in inference mode

  Rng t1(1), t2(2), t3(1);
  const Tensor d1 = vit_forward_single(model, canvas, 0, true, t1, acts);
  const Tensor d2 = vit_forward_single(model, canvas, 0, true, t2, acts);
  const Tensor d3 = vit_forward_single(model, canvas, 0, true, t3, acts);
  EXPECT_NE(d1.data, d2.data);  // different streams drop different units
  EXPECT_EQ(d1.data, d3.data);  // same stream, same result
}

TEST(VitForward, PositionalModesAllRun) {
  for (PositionalMode mode : {PositionalMode::rope2d, PositionalMode::abs2d,
                              PositionalMode::rope1d, PositionalMode::abs1d,
                              PositionalMode::none}) {
    VitConfig cfg = tiny_config();
    cfg.positional_mode = mode;
    Rng rng(6);
    const VitModel model = VitModel::init(cfg, rng);
    const Canvas canvas = place_at(Grid(2, 2, 5), 0, 0, 8);
    VitActs acts;
    Rng fwd(0);
    const Tensor logits = vit_forward_single(model, canvas, 0, false, fwd, acts);
    EXPECT_EQ(logits.numel(), 8 * 8 * kNumSymbols) << positional_mode_name(mode);
    for (float v : logits.data) ASSERT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(positional_mode_from_string("rope2d"), PositionalMode::rope2d);
  EXPECT_THROW(positional_mode_from_string("rope3d"), Error);
}

TEST(LossMask, ModesMatchManualSets) {
  const int S = 8;
  Grid gin(2, 2, 3);
  Grid gout(3, 2, 4);
  ViewTransform v;
  const Canvas in = place_input(gin, v, S);
  const Canvas out = place_target(gout, v, S);
  std::vector<std::uint8_t> mask;

  build_loss_mask(in, out, LossMaskMode::input_fg, mask);
  std::size_t count_in = 0, expect_in = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    count_in += mask[i] ? 1 : 0;
    expect_in += in.cells[i] != kBG ? 1 : 0;
    EXPECT_EQ(mask[i] != 0, in.cells[i] != kBG);
  }
  EXPECT_EQ(count_in, expect_in);
  EXPECT_EQ(count_in, 4u);  // the 2x2 placed input

  build_loss_mask(in, out, LossMaskMode::target_fg, mask);
  std::size_t count_t = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    EXPECT_EQ(mask[i] != 0, out.cells[i] != kBG);
    count_t += mask[i] ? 1 : 0;
  }
  EXPECT_EQ(count_t, 6u + 6u);  // 3x2 block + L border (3 + 4 cells, shared corner)

  build_loss_mask(in, out, LossMaskMode::union_fg, mask);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    EXPECT_EQ(mask[i] != 0, in.cells[i] != kBG || out.cells[i] != kBG);
  }

  build_loss_mask(in, out, LossMaskMode::all, mask);
  for (std::size_t i = 0; i < mask.size(); ++i) EXPECT_TRUE(mask[i]);

  EXPECT_EQ(loss_mask_mode_from_string("union_fg"), LossMaskMode::union_fg);
  EXPECT_THROW(loss_mask_mode_from_string("nope"), Error);
}

TEST(VitTraining, StepsReduceTheLossOnOneSample) {
  VitConfig cfg = tiny_config();
  Rng rng(7);
  VitModel model = VitModel::init(cfg, rng);
  Grid g(2, 2);
  g.cells = {1, 2, 3, 4};
  ViewTransform v;
  TrainSample s;
  s.input = place_input(g, v, 8);
  s.target = place_target(g, v, 8);
  s.task_index = 0;

  AdamState adam;
  VitActs acts;
  Rng train_rng(8);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 30; ++step) {
    const double loss =
        training_step(model, {s}, 3e-3f, LossMaskMode::union_fg, train_rng, adam, acts);
    if (step == 0) first = loss;
    last = loss;
  }
  EXPECT_NEAR(first, std::log(12.0), 0.25);
  EXPECT_LT(last, first * 0.5);
}

TEST(VitTraining, EndToEndGradientCheck) {
  // Finite differences through the whole model: patch embedding, both
  // blocks (rotary attention with key masking + MLP), final norm, head,
  // masked cross-entropy. Strided sampling keeps it quick; the acceptance
  // binary runs the full sweep.
  VitConfig cfg = tiny_config();
  Rng rng(9);
  VitModel model = VitModel::init(cfg, rng);
  Grid g(2, 3);
  g.cells = {1, 2, 3, 4, 5, 6};
  ViewTransform v;
  v.row0 = 1;
  v.col0 = 1;
  const Canvas input = place_input(g, v, 8);
  const Canvas target = place_target(g, v, 8);
  std::vector<std::uint8_t> mask;
  build_loss_mask(input, target, LossMaskMode::union_fg, mask);

  VitActs acts;
  const auto loss = [&] {
    Rng fwd(0);
    vit_forward(model, {&input}, {1}, false, fwd, acts);
    return cross_entropy_masked(acts.logits, target.cells.data(), mask.data(),
                                static_cast<std::int64_t>(target.cells.size()), nullptr);
  };
  // Analytic gradients.
  model.zero_grads();
  {
    Rng fwd(0);
    vit_forward(model, {&input}, {1}, false, fwd, acts);
    acts.d_logits.zero();
    cross_entropy_masked(acts.logits, target.cells.data(), mask.data(),
                         static_cast<std::int64_t>(target.cells.size()), &acts.d_logits);
    vit_backward(model, acts);
  }
  // Coordinates are judged against max(1e-2 relative, 1e-3 absolute) —
  // floor 0.1 with tol 1e-2 — at h=1e-3: small enough that curvature
  // (patch-bias shifts every token at once) stays below the slack, large
  // enough that single-precision forward jitter does too.
  double worst = 0.0;
  for (auto& p : model.params) {
    const std::size_t stride = std::max<std::size_t>(1, static_cast<std::size_t>(p.value.numel() / 40));
    const auto rep = testutil::fd_check(p.value, p.grad, loss, 1e-3, 0.1, stride);
    EXPECT_LT(rep.max_rel, 1e-2) << p.name << " worst analytic " << rep.worst_analytic
                                 << " numeric " << rep.worst_numeric;
    worst = std::max(worst, rep.max_rel);
  }
  SUCCEED() << "max rel err " << worst;
}
