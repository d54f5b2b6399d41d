#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "einmemo/dataset.hpp"
#include "einmemo/frozen_model.hpp"
#include "einmemo/retrieval.hpp"

namespace einmemo {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Architecture of the patch-level VQ inpainter.
struct PatchVqConfig {
  int cell = 111;
  int gap = 2;
  int grid_side = 14;
  int codebook_size = 64;
  int code_dim = 16;
  int tokenizer_hidden = 64;
  int embed_dim = 64;
  int head_hidden = 128;

  CanvasSpec canvas() const { return CanvasSpec{cell, cell, gap, 0.0}; }
  int canvas_size() const { return 2 * cell + gap; }
  int patch() const { return canvas_size() / grid_side; }
  int patch_dim() const { return 3 * patch() * patch(); }
  int tokens() const { return grid_side * grid_side; }
  int half() const { return grid_side / 2; }
  void validate() const;

  friend bool operator==(const PatchVqConfig&, const PatchVqConfig&) = default;
};

void to_json(nlohmann::json& j, const PatchVqConfig& c);
void from_json(const nlohmann::json& j, PatchVqConfig& c);

// All weights. Tokenizer: patch -> MLP -> code (nearest codebook row) -> MLP
// -> sigmoid patch. Predictor: patch embeddings, pooled context and a
// per-position MLP head over the query, in-context image and label patches
// at the same offset.
struct PatchVqWeights {
  Mat enc1_w, enc1_b, enc2_w, enc2_b;
  Mat codebook;
  Mat dec1_w, dec1_b, dec2_w, dec2_b;
  Mat embed_w, embed_b, mask_token, pos;
  Mat head1_w, head1_b, head_pos;
  Mat head2_w, head2_b;

  static PatchVqWeights zeros(const PatchVqConfig& c);

  template <typename F>
  void for_each(F&& f) {
    f("tokenizer.enc1.weight", enc1_w); f("tokenizer.enc1.bias", enc1_b);
    f("tokenizer.enc2.weight", enc2_w); f("tokenizer.enc2.bias", enc2_b);
    f("tokenizer.codebook", codebook);
    f("tokenizer.dec1.weight", dec1_w); f("tokenizer.dec1.bias", dec1_b);
    f("tokenizer.dec2.weight", dec2_w); f("tokenizer.dec2.bias", dec2_b);
    f("predictor.embed.weight", embed_w); f("predictor.embed.bias", embed_b);
    f("predictor.mask_token", mask_token); f("predictor.pos", pos);
    f("predictor.head1.weight", head1_w); f("predictor.head1.bias", head1_b);
    f("predictor.head_pos", head_pos);
    f("predictor.head2.weight", head2_w); f("predictor.head2.bias", head2_b);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<PatchVqWeights*>(this)->for_each(
        [&](const char* name, Mat& m) { f(name, static_cast<const Mat&>(m)); });
  }
};

class PatchVqInpainter final : public FrozenInpainter {
 public:
  PatchVqInpainter(PatchVqConfig config, PatchVqWeights weights, double reconstruction_threshold = 0.0);

  std::string name() const override { return "patch-vq"; }
  const Codebook& codebook() const override { return codebook_; }
  int token_grid_side() const override { return config_.grid_side; }
  CanvasSpec canvas_spec() const override { return config_.canvas(); }

  Logits predict_logits(const Canvas& canvas, std::span<const int> positions) const override;
  Image backprop_to_canvas(const Canvas& canvas, std::span<const int> positions, const Upstream& upstream,
                           Logits* logits_out = nullptr) const override;
  Logits token_scores(const Canvas& canvas) const override;
  TokenGrid encode_tokens(const Canvas& canvas) const override;
  Image decode(const TokenGrid& tokens) const override;
  std::vector<ParameterView> parameters() const override;

  const PatchVqConfig& config() const { return config_; }
  const PatchVqWeights& weights() const { return weights_; }
  // Reconstruction MAE bound the tokenizer met at training time.
  double reconstruction_threshold() const { return reconstruction_threshold_; }

  // Pre-quantization tokenizer features of one cell-sized image.
  std::vector<double> encoder_features(const Image& cell_image) const;

 private:
  PatchVqConfig config_;
  PatchVqWeights weights_;
  Codebook codebook_;
  double reconstruction_threshold_;
};

// Retrieval features taken from the tokenizer encoder.
class ToyEncoderExtractor final : public FeatureExtractor {
 public:
  explicit ToyEncoderExtractor(const PatchVqInpainter& model) : model_(model) {}
  std::string name() const override { return "toy-encoder"; }
  std::vector<double> extract(const Image& image) const override { return model_.encoder_features(image); }

 private:
  const PatchVqInpainter& model_;
};

struct ToyTrainConfig {
  PatchVqConfig arch;
  uint64_t seed = 0;
  // Stage 1: tokenizer.
  int tokenizer_epochs = 10;
  int tokenizer_patches_per_epoch = 24000;
  int tokenizer_batch = 128;
  double tokenizer_lr = 2e-3;
  double commitment = 0.25;
  int consolidation_iters = 16;  // max merge passes
  double max_reconstruction_mae = 0.2;
  // Stage 2: masked token predictor.
  int predictor_epochs = 40;
  int predictor_batch = 16;
  double predictor_lr = 1e-3;
};

void to_json(nlohmann::json& j, const ToyTrainConfig& c);
void from_json(const nlohmann::json& j, ToyTrainConfig& c);

struct ToyTrainReport {
  std::vector<double> tokenizer_loss;  // per epoch
  std::vector<double> predictor_loss;  // per epoch
  int dead_codes_reseeded = 0;
  double reconstruction_mae = 0.0;
  double seconds = 0.0;
};

using ProgressLog = std::function<void(const std::string&)>;

// Two-stage training on gt canvases built from random in-context pairs of
// the dataset. The returned model is frozen. Throws NumericalError on a
// non-finite loss or an unusable tokenizer.
PatchVqInpainter train_toy_frozen(const TaskDataset& train, const ToyTrainConfig& cfg,
                                  ToyTrainReport* report = nullptr, const ProgressLog& log = {});

// Model directory: descriptor.json, weights.bin, digest.sha256.
void save_model(const PatchVqInpainter& model, const std::filesystem::path& dir);
PatchVqInpainter load_model(const std::filesystem::path& dir);

std::vector<uint8_t> serialize_weights(const PatchVqWeights& w);

}  // namespace einmemo
