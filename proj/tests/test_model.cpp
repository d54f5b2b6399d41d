#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "einmemo/errors.hpp"
#include "einmemo/evaluation.hpp"
#include "einmemo/toy_inpainter.hpp"
#include "einmemo/training.hpp"
#include "test_support.hpp"

using namespace einmemo;

class ToyModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    task_ = std::make_unique<SynthTask>(synth_task(0, 2, 10, 111, SynthOptions{4}));
    model_ = std::make_unique<PatchVqInpainter>(train_toy_frozen(task_->train, testkit::tiny_toy_config(0), &report_));
    fx_ = std::make_unique<PixelExtractor>();
    index_ = std::make_unique<RetrievalIndex>(build_index(task_->train, *fx_));
  }
  static void TearDownTestSuite() {
    index_.reset();
    fx_.reset();
    model_.reset();
    task_.reset();
  }

  static Canvas canvas_for(size_t i, size_t j) {
    const Sample& a = task_->train[i];
    const Sample& q = task_->train[j];
    return compose_canvas(a.image, mask_to_label_image(a.mask), q.image, model_->canvas_spec());
  }
  static Canvas gt_canvas_for(size_t i, size_t j) {
    const Sample& a = task_->train[i];
    const Sample& q = task_->train[j];
    return compose_gt_canvas(a.image, mask_to_label_image(a.mask), q.image, mask_to_label_image(q.mask),
                             model_->canvas_spec());
  }
  static PromptTrainConfig short_cfg() {
    PromptTrainConfig c;
    c.epochs = 2;
    c.batch_size = 8;
    return c;
  }

  static inline std::unique_ptr<SynthTask> task_;
  static inline std::unique_ptr<PatchVqInpainter> model_;
  static inline std::unique_ptr<PixelExtractor> fx_;
  static inline std::unique_ptr<RetrievalIndex> index_;
  static inline ToyTrainReport report_;
};

TEST_F(ToyModel, ShapesAndDeterminism) {
  const Canvas c = canvas_for(0, 1);
  const auto pos = masked_token_indices(model_->canvas_spec(), model_->token_grid_side());
  const Logits a = model_->predict_logits(c, pos);
  const Logits b = model_->predict_logits(c, pos);
  EXPECT_EQ(a.rows, 49);
  EXPECT_EQ(a.cols, model_->codebook().size);
  EXPECT_EQ(a.values, b.values);
  const TokenGrid g = model_->encode_tokens(c);
  EXPECT_EQ(g.side, 14);
  EXPECT_EQ(g.tokens.size(), 196u);
  const Image d = model_->decode(g);
  EXPECT_EQ(d.height(), 224);
  for (double v : d.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(ToyModel, PixelPerturbationChangesLogits) {
  Canvas c = canvas_for(0, 1);
  const auto pos = masked_token_indices(model_->canvas_spec(), 14);
  const Logits before = model_->predict_logits(c, pos);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) c.pixels.at(ch, y, x) += 0.5;
  EXPECT_NE(model_->predict_logits(c, pos).values, before.values);
}

TEST_F(ToyModel, CodebookIsIdempotent) {
  for (size_t i = 0; i < 20; ++i) {
    const Canvas c = gt_canvas_for(i % task_->train.size(), (i + 3) % task_->train.size());
    const TokenGrid t = model_->encode_tokens(c);
    const Canvas re{model_->decode(t), c.spec, CanvasKind::ground_truth};
    EXPECT_EQ(model_->encode_tokens(re), t) << "canvas " << i;
  }
}

TEST_F(ToyModel, ReconstructionWithinThreshold) {
  EXPECT_LE(report_.reconstruction_mae, model_->reconstruction_threshold());
  EXPECT_GT(model_->reconstruction_threshold(), 0.0);
}

TEST_F(ToyModel, InvalidInputs) {
  TokenGrid bad{14, std::vector<int>(196, 0)};
  bad.tokens[5] = model_->codebook().size;
  EXPECT_THROW(model_->decode(bad), UsageError);
  Canvas wrong{Image(3, 100, 100), CanvasSpec{}, CanvasKind::query};
  EXPECT_THROW(check_canvas(*model_, wrong), UsageError);
  EXPECT_THROW(load_external(testkit::scratch_dir("absent") / "nothing"), DataError);
  PatchVqConfig arch;
  arch.grid_side = 15;
  EXPECT_THROW(arch.validate(), UsageError);
}

TEST_F(ToyModel, SaveLoadKeepsDigest) {
  const auto dir = testkit::scratch_dir("model_rt");
  save_model(*model_, dir);
  const PatchVqInpainter back = load_model(dir);
  EXPECT_EQ(back.weight_digest(), model_->weight_digest());
  const auto ext = load_external(dir);
  EXPECT_EQ(ext->weight_digest(), model_->weight_digest());
  const auto pos = masked_token_indices(back.canvas_spec(), 14);
  EXPECT_EQ(ext->predict_logits(canvas_for(2, 3), pos).values, model_->predict_logits(canvas_for(2, 3), pos).values);
}

TEST_F(ToyModel, PredictTokensIsArgmax) {
  const Canvas c = canvas_for(1, 4);
  const auto pos = masked_token_indices(model_->canvas_spec(), 14);
  const Logits l = model_->predict_logits(c, pos);
  const auto tokens = predict_tokens(*model_, c, pos);
  ASSERT_EQ(tokens.size(), pos.size());
  for (int i = 0; i < l.rows; ++i) {
    const auto row = l.row(i);
    EXPECT_EQ(tokens[i], std::max_element(row.begin(), row.end()) - row.begin());
  }
  Logits tie(1, 4);
  tie.values = {1.0, 3.0, 3.0, 0.0};
  EXPECT_EQ(argmax_tokens(tie), std::vector<int>{1});
}

TEST_F(ToyModel, GradientCheck) {
  const CanvasSpec spec = model_->canvas_spec();
  const BorderPrompt zeros = init_prompt(spec, Placement::IL, 15, PromptInit::zeros, 0);
  const BorderPrompt gauss = init_prompt(spec, Placement::IL, 15, PromptInit::gaussian, 1);
  // Components below ~1e-6 sit at the finite-difference roundoff floor, so
  // agreement is checked with an absolute term as well as a relative one.
  for (const BorderPrompt* p : {&zeros, &gauss}) {
    const auto samples = grad_samples(*model_, task_->train, *index_, *fx_, *p, 32, 1e-4, 0);
    ASSERT_EQ(samples.size(), 32u);
    double max_rel = 0.0;
    for (const auto& s : samples) {
      EXPECT_NEAR(s.analytic, s.numeric, 1e-10 + 1e-5 * std::abs(s.numeric)) << "parameter " << s.index;
      if (std::abs(s.numeric) > 1e-6) max_rel = std::max(max_rel, s.relative_error());
    }
    EXPECT_LT(max_rel, 1e-5);
  }
}

TEST_F(ToyModel, TrainingLeavesModelUntouched) {
  const std::string before = to_hex(model_->weight_digest());
  const TrainResult r = train_prompt(task_->train, *model_, *index_, *fx_, short_cfg());
  EXPECT_EQ(to_hex(model_->weight_digest()), before);
  EXPECT_EQ(r.history.model_digest_before, before);
  EXPECT_EQ(r.history.model_digest_after, before);
  EXPECT_EQ(r.history.trainable_leaves, std::vector<std::string>{"prompt.values"});
  ASSERT_EQ(r.history.epochs.size(), 2u);
  EXPECT_EQ(r.prompt.values.size(), 27540u);
}

TEST_F(ToyModel, TrainingIsDeterministic) {
  const TrainResult a = train_prompt(task_->train, *model_, *index_, *fx_, short_cfg());
  const TrainResult b = train_prompt(task_->train, *model_, *index_, *fx_, short_cfg());
  EXPECT_EQ(prompt_checksum(a.prompt), prompt_checksum(b.prompt));
  EXPECT_EQ(a.history.epochs.back().mean_loss, b.history.epochs.back().mean_loss);
}

TEST_F(ToyModel, TrainingExampleExcludesSelf) {
  const BorderPrompt p = init_prompt(model_->canvas_spec(), Placement::IL, 15, PromptInit::gaussian, 3);
  const Sample& q = task_->train[0];
  const TrainingExample ex = build_training_example(q, task_->train, *index_, *fx_, p, model_->canvas_spec());
  EXPECT_NE(ex.pair_id, q.id);
  EXPECT_EQ(ex.gt_canvas.kind, CanvasKind::ground_truth);
  EXPECT_EQ(extract_cell(ex.query_canvas, Cell::bl), q.image);
  EXPECT_EQ(extract_cell(ex.gt_canvas, Cell::br), mask_to_label_image(q.mask));
  const Sample& pair = task_->train[*task_->train.find(ex.pair_id)];
  EXPECT_EQ(extract_cell(ex.gt_canvas, Cell::tl), pair.image);
  EXPECT_NE(extract_cell(ex.query_canvas, Cell::tl), pair.image);
}

TEST_F(ToyModel, SingleSampleDatasetIsError) {
  const TaskDataset one({task_->train.samples().front()}, Split::train);
  const RetrievalIndex idx = build_index(one, *fx_);
  EXPECT_THROW(train_prompt(one, *model_, idx, *fx_, short_cfg()), DataError);
}

TEST_F(ToyModel, ZeroPromptMatchesBaseline) {
  const BorderPrompt zeros = init_prompt(model_->canvas_spec(), Placement::IL, 15, PromptInit::zeros, 0);
  const EvalReport base = eval_icl(task_->test, task_->train, *index_, *model_, *fx_, nullptr);
  const EvalReport zero = eval_icl(task_->test, task_->train, *index_, *model_, *fx_, &zeros);
  EXPECT_EQ(base.mean, zero.mean);
  ASSERT_EQ(base.queries.size(), task_->test.size());
  for (size_t i = 0; i < base.queries.size(); ++i) EXPECT_EQ(base.queries[i].iou, zero.queries[i].iou);
  EXPECT_FALSE(base.metadata.at("model_digest").empty());
}

TEST(ToyTraining, SameSeedSameDigest) {
  const SynthTask t = synth_task(2, 2, 4, 111, SynthOptions{4});
  ToyTrainConfig cfg = testkit::tiny_toy_config(5);
  cfg.tokenizer_epochs = 2;
  cfg.tokenizer_patches_per_epoch = 4000;
  cfg.predictor_epochs = 1;
  cfg.max_reconstruction_mae = 1.0;
  const PatchVqInpainter a = train_toy_frozen(t.train, cfg);
  const PatchVqInpainter b = train_toy_frozen(t.train, cfg);
  EXPECT_EQ(a.weight_digest(), b.weight_digest());
}
