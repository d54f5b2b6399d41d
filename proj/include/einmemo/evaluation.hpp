#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "einmemo/dataset.hpp"
#include "einmemo/frozen_model.hpp"
#include "einmemo/prompt.hpp"
#include "einmemo/retrieval.hpp"
#include "einmemo/training.hpp"

namespace einmemo {

// Channel-mean >= 0.5 is foreground.
Mask binarize(const Image& decoded);

// |a & b| / |a | b|; two empty masks score 1.
double iou(const Mask& a, const Mask& b);

struct QueryResult {
  std::string query_id;
  std::string pair_id;
  int category_id = 0;
  double iou = 0.0;
};

struct EvalReport {
  std::string label;
  std::vector<QueryResult> queries;   // sorted by query id
  std::map<int, double> per_category; // mean IoU per category
  std::map<int, double> per_fold;     // mean of its categories
  double mean = 0.0;                  // mean of fold values
  std::map<std::string, std::string> metadata;
};

// Per-image IoU -> per-category mean -> per-fold mean -> overall mean.
EvalReport aggregate(std::string label, std::vector<QueryResult> results, const std::map<int, int>& partition);

// Score difference in mIoU points and the relative change.
struct Delta {
  double absolute = 0.0;
  double relative = 0.0;  // absolute / reference
};
Delta mean_delta(double value, double reference);

struct EvalOptions {
  bool exclude_self = true;  // skip a retrieval candidate whose id equals the query's
  std::string label = "eval";
};

// Visual in-context evaluation: retrieve a pair per query, apply the prompt if
// any, predict the output tokens, decode, binarize and score against the
// query mask.
EvalReport eval_icl(const TaskDataset& queries, const TaskDataset& retrieval_set, const RetrievalIndex& index,
                    const FrozenInpainter& model, const FeatureExtractor& fx, const BorderPrompt* prompt,
                    const EvalOptions& options = {});

// Predicted mask for a single query against a fixed in-context pair.
Mask predict_mask(const FrozenInpainter& model, const Sample& pair, const Image& query, const BorderPrompt* prompt);

struct DomainShiftReport {
  std::string source;
  std::string target;
  EvalReport baseline;
  EvalReport prompted;
  Delta baseline_drop;  // versus the in-domain reference, when given
  Delta prompted_drop;
};

// Pairs from `source`, queries from `target`; retrieval never excludes.
// In-domain reference means (same protocol without shift) are optional.
DomainShiftReport domain_shift_eval(const TaskDataset& source, const TaskDataset& target,
                                    const FrozenInpainter& model, const FeatureExtractor& fx,
                                    const BorderPrompt& prompt, std::string source_name, std::string target_name,
                                    std::optional<double> baseline_reference = {},
                                    std::optional<double> prompted_reference = {});

struct ClassGrid {
  std::vector<int> categories;
  std::vector<std::vector<double>> miou;  // [trained on][evaluated on]
  double grand_mean = 0.0;
};

// Entry (i, j): prompt trained on category i, pairs retrieved from category
// i's training samples, queries from category j's test samples.
ClassGrid class_grid_eval(const std::map<int, BorderPrompt>& per_class_prompts, const TaskDataset& train,
                          const TaskDataset& test, const FrozenInpainter& model, const FeatureExtractor& fx);

// Trains one prompt per category on that category's training samples.
std::map<int, BorderPrompt> train_per_class_prompts(const TaskDataset& train, const FrozenInpainter& model,
                                                    const FeatureExtractor& fx, const PromptTrainConfig& cfg);

struct SweepRow {
  std::string setting;  // e.g. "15", "IL", "0.2"
  double value = 0.0;   // numeric form of the setting, for sorting/plotting
  int64_t param_count = 0;
  size_t train_size = 0;
  double baseline_miou = 0.0;
  double prompt_miou = 0.0;
  double final_loss = 0.0;
};

struct SweepTable {
  std::string name;
  std::vector<SweepRow> rows;
};

struct SweepContext {
  const TaskDataset& train;
  const TaskDataset& test;
  const FrozenInpainter& model;
  const FeatureExtractor& fx;
  PromptTrainConfig base;
  std::function<void(const std::string&)> log;
};

SweepTable sweep_padding(const std::vector<int>& pads, const SweepContext& ctx);
SweepTable sweep_variants(const std::vector<Placement>& variants, const SweepContext& ctx);
SweepTable sweep_per_class(const std::vector<int>& counts, const SweepContext& ctx, uint64_t seed = 0);
SweepTable sweep_fraction(const std::vector<double>& fractions, const SweepContext& ctx, uint64_t seed = 0);

// CSV / plot output.
void write_report_csv(const EvalReport& report, const std::filesystem::path& dir);
void write_sweep_csv(const SweepTable& table, const std::filesystem::path& path);
void write_grid_csv(const ClassGrid& grid, const std::filesystem::path& path);

void plot_fold_bars(const std::vector<const EvalReport*>& reports, const std::filesystem::path& path);
void plot_sweep(const SweepTable& table, const std::filesystem::path& path);
void plot_grid_heatmap(const ClassGrid& grid, const std::filesystem::path& path);

}  // namespace einmemo
