#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "einmemo/canvas.hpp"
#include "einmemo/dataset.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/frozen_model.hpp"
#include "einmemo/prompt.hpp"
#include "einmemo/retrieval.hpp"

namespace einmemo {

struct PromptTrainConfig {
  int epochs = 70;
  int batch_size = 32;
  double learning_rate = 0.1;  // toy model; 15 for large external models
  int restart_period = 0;      // epochs per cosine cycle; 0 means a single cycle
  int restart_mult = 1;
  double delta = 1.0;
  int pad = 15;
  Placement variant = Placement::IL;
  PromptInit init = PromptInit::zeros;
  uint64_t seed = 0;

  int period() const { return restart_period > 0 ? restart_period : epochs; }
  double lr_at(int epoch) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const PromptTrainConfig& c);
void from_json(const nlohmann::json& j, PromptTrainConfig& c);

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
  std::optional<double> validation_miou;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> trainable_leaves;  // everything the optimizer updated
  std::string model_digest_before;
  std::string model_digest_after;
  int selected_epoch = 0;  // epoch whose prompt was returned (1-based)
};

struct TrainingExample {
  Canvas query_canvas;  // prompted in-context pair, query, empty output region
  Canvas gt_canvas;     // unprompted pair, query, query label
  std::string pair_id;
};

// Leave-one-out: the query's own id is excluded from retrieval.
TrainingExample build_training_example(const Sample& query, const TaskDataset& ds, const RetrievalIndex& index,
                                       const FeatureExtractor& fx, const BorderPrompt& prompt,
                                       const CanvasSpec& spec);

// Mean cross-entropy over positions; optional gradient w.r.t. the logits.
double prompt_loss(const Logits& logits, std::span<const int> gt_tokens, Logits* grad = nullptr);

struct TrainResult {
  BorderPrompt prompt;
  TrainHistory history;
};

// Thrown when the loss turns non-finite; carries the last finite prompt.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, BorderPrompt last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const BorderPrompt& last_good() const { return last_good_; }

 private:
  BorderPrompt last_good_;
};

using ValidationHook = std::function<double(const BorderPrompt&)>;
using TrainLog = std::function<void(const EpochRecord&)>;

// Optimizes only the prompt parameters; the model is used read-only. With a
// validation hook, the prompt from the best-scoring epoch is returned.
TrainResult train_prompt(const TaskDataset& ds, const FrozenInpainter& model, const RetrievalIndex& index,
                         const FeatureExtractor& fx, const PromptTrainConfig& cfg,
                         const ValidationHook& validate = {}, const TrainLog& log = {});

// Trainable leaves reachable from one prompt-training step: model parameters
// flagged trainable plus the prompt itself.
std::vector<std::string> audit_trainable_leaves(const FrozenInpainter& model);

struct GradSample {
  int64_t index = 0;  // packed prompt parameter
  double analytic = 0.0;
  double numeric = 0.0;
  // |a - n| / max(|a|, |n|, 1e-8)
  double relative_error() const;
};

// Analytic and central-difference derivatives at n_params sampled frame
// parameters (see grad_check).
std::vector<GradSample> grad_samples(const FrozenInpainter& model, const TaskDataset& ds, const RetrievalIndex& index,
                                     const FeatureExtractor& fx, const BorderPrompt& prompt, int n_params, double eps,
                                     uint64_t seed = 0);

// Max relative error between the analytic prompt gradient and central
// differences at n_params sampled frame parameters (those over image pixels),
// using the first min(2, |ds|) samples as the loss batch.
double grad_check(const FrozenInpainter& model, const TaskDataset& ds, const RetrievalIndex& index,
                  const FeatureExtractor& fx, const BorderPrompt& prompt, int n_params, double eps,
                  uint64_t seed = 0);

}  // namespace einmemo
