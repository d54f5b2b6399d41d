#include "einmemo/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "einmemo/optim.hpp"
#include "einmemo/rng.hpp"

namespace einmemo {

double PromptTrainConfig::lr_at(int epoch) const {
  return cosine_warm_restarts_lr(learning_rate, epoch, period(), restart_mult);
}

void PromptTrainConfig::validate() const {
  if (epochs < 1) throw UsageError("epochs must be at least 1");
  if (batch_size < 1) throw UsageError("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  if (restart_period < 0 || restart_mult < 1) throw UsageError("invalid warm-restart schedule");
  if (pad < 0) throw UsageError("pad must be non-negative");
}

void to_json(nlohmann::json& j, const PromptTrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"restart_period", c.restart_period},
                     {"restart_mult", c.restart_mult},
                     {"delta", c.delta},
                     {"pad", c.pad},
                     {"variant", std::string(to_string(c.variant))},
                     {"init", c.init == PromptInit::zeros ? "zeros" : "gaussian"},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PromptTrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("restart_period").get_to(c.restart_period);
  j.at("restart_mult").get_to(c.restart_mult);
  j.at("delta").get_to(c.delta);
  j.at("pad").get_to(c.pad);
  c.variant = parse_placement(j.at("variant").get<std::string>());
  const auto init = j.at("init").get<std::string>();
  if (init != "zeros" && init != "gaussian") throw UsageError("prompt init must be zeros or gaussian");
  c.init = init == "zeros" ? PromptInit::zeros : PromptInit::gaussian;
  j.at("seed").get_to(c.seed);
}

TrainingExample build_training_example(const Sample& query, const TaskDataset& ds, const RetrievalIndex& index,
                                       const FeatureExtractor& fx, const BorderPrompt& prompt,
                                       const CanvasSpec& spec) {
  if (ds.size() < 2) throw DataError("leave-one-out retrieval needs at least 2 samples");
  const std::string pair_id = retrieve(index, query.image, fx, {query.id});
  const auto pos = ds.find(pair_id);
  if (!pos) throw DataError("retrieved id " + pair_id + " is not in the dataset");
  const Sample& pair = ds[*pos];
  const Image pair_label = mask_to_label_image(pair.mask);
  const PromptedImages p = apply(pair.image, pair_label, query.image, prompt);
  return TrainingExample{compose_canvas(p.pair_image, p.pair_label, p.query, spec),
                         compose_gt_canvas(pair.image, pair_label, query.image, mask_to_label_image(query.mask), spec),
                         pair_id};
}

double prompt_loss(const Logits& logits, std::span<const int> gt_tokens, Logits* grad) {
  if (static_cast<int>(gt_tokens.size()) != logits.rows) throw UsageError("logits and targets differ in length");
  if (logits.rows == 0) throw UsageError("empty logits");
  if (grad) *grad = Logits(logits.rows, logits.cols);
  double loss = 0.0;
  for (int i = 0; i < logits.rows; ++i) {
    const int t = gt_tokens[i];
    if (t < 0 || t >= logits.cols) throw UsageError("target token " + std::to_string(t) + " out of range");
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    loss += std::log(z) + mx - row[t];
    if (grad) {
      auto g = grad->row(i);
      for (int v = 0; v < logits.cols; ++v) g[v] = std::exp(row[v] - mx) / z / logits.rows;
      g[t] -= 1.0 / logits.rows;
    }
  }
  return loss / logits.rows;
}

std::vector<std::string> audit_trainable_leaves(const FrozenInpainter& model) {
  std::vector<std::string> leaves;
  for (const auto& p : model.parameters()) {
    if (p.trainable) leaves.push_back(p.name);
  }
  leaves.push_back("prompt.values");
  return leaves;
}

namespace {

// Per-query data that does not depend on the prompt.
struct PreparedQuery {
  size_t query = 0;
  size_t pair = 0;
  Image pair_label;
  std::vector<int> gt_tokens;
};

std::vector<PreparedQuery> prepare(const TaskDataset& ds, const FrozenInpainter& model, const RetrievalIndex& index,
                                   const FeatureExtractor& fx, std::span<const int> positions, size_t limit) {
  if (ds.size() < 2) throw DataError("prompt training needs at least 2 samples");
  const CanvasSpec spec = model.canvas_spec();
  std::vector<PreparedQuery> out;
  for (size_t i = 0; i < std::min(limit, ds.size()); ++i) {
    const Sample& q = ds[i];
    const std::string pair_id = retrieve(index, q.image, fx, {q.id});
    const auto pos = ds.find(pair_id);
    if (!pos) throw DataError("retrieved id " + pair_id + " is not in the training set");
    PreparedQuery p;
    p.query = i;
    p.pair = *pos;
    p.pair_label = mask_to_label_image(ds[*pos].mask);
    const Canvas gt = compose_gt_canvas(ds[*pos].image, p.pair_label, q.image, mask_to_label_image(q.mask), spec);
    const TokenGrid tokens = model.encode_tokens(gt);
    for (int l : positions) p.gt_tokens.push_back(tokens.tokens[l]);
    out.push_back(std::move(p));
  }
  return out;
}

Canvas prompted_canvas(const TaskDataset& ds, const PreparedQuery& p, const BorderPrompt& prompt,
                       std::span<const double> values) {
  const PromptedImages img = apply(ds[p.pair].image, p.pair_label, ds[p.query].image, prompt, values);
  return compose_canvas(img.pair_image, img.pair_label, img.query, prompt.canvas);
}

// Mean loss over `batch` and its gradient w.r.t. the canvas pixels, summed.
double batch_loss(const TaskDataset& ds, const FrozenInpainter& model, const std::vector<PreparedQuery>& prepared,
                  std::span<const size_t> batch, const BorderPrompt& prompt, std::span<const double> values,
                  std::span<const int> positions, Image* canvas_grad) {
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (size_t b : batch) {
    const PreparedQuery& p = prepared[b];
    const Canvas canvas = prompted_canvas(ds, p, prompt, values);
    if (canvas_grad) {
      double loss = 0.0;
      const Image g = model.backprop_to_canvas(canvas, positions, [&](const Logits& logits) {
        Logits grad;
        loss = prompt_loss(logits, p.gt_tokens, &grad);
        for (double& v : grad.values) v *= scale;
        return grad;
      });
      total += loss;
      if (canvas_grad->empty()) {
        *canvas_grad = g;
      } else {
        auto dst = canvas_grad->data();
        const auto src = g.data();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    } else {
      total += prompt_loss(model.predict_logits(canvas, positions), p.gt_tokens);
    }
  }
  return total * scale;
}

}  // namespace

TrainResult train_prompt(const TaskDataset& ds, const FrozenInpainter& model, const RetrievalIndex& index,
                         const FeatureExtractor& fx, const PromptTrainConfig& cfg, const ValidationHook& validate,
                         const TrainLog& log) {
  cfg.validate();
  const CanvasSpec spec = model.canvas_spec();
  const std::vector<int> positions = masked_token_indices(spec, model.token_grid_side());

  TrainResult result;
  TrainHistory& hist = result.history;
  hist.model_digest_before = to_hex(model.weight_digest());
  hist.trainable_leaves = audit_trainable_leaves(model);

  BorderPrompt prompt = init_prompt(spec, cfg.variant, cfg.pad, cfg.init, cfg.seed, cfg.delta);
  const std::vector<PreparedQuery> prepared = prepare(ds, model, index, fx, positions, ds.size());

  Adam adam(prompt.values.size());
  std::vector<size_t> order(prepared.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({cfg.seed, 0x7a11});
  std::optional<double> best_val;
  BorderPrompt best = prompt;
  hist.selected_epoch = cfg.epochs;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const size_t> batch(order.data() + start, end - start);
      const std::vector<double> values(prompt.values.begin(), prompt.values.end());
      Image canvas_grad;
      const double loss = batch_loss(ds, model, prepared, batch, prompt, values, positions, &canvas_grad);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite prompt loss at epoch " + std::to_string(epoch + 1), best);
      }
      loss_sum += loss * static_cast<double>(batch.size());
      const std::vector<double> grad = prompt_gradient(prompt, canvas_grad);
      adam.step<float>(prompt.values, grad, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.mean_loss = loss_sum / static_cast<double>(order.size());
    rec.learning_rate = lr;
    if (validate) {
      rec.validation_miou = validate(prompt);
      if (!best_val || *rec.validation_miou > *best_val) {
        best_val = rec.validation_miou;
        best = prompt;
        hist.selected_epoch = epoch + 1;
      }
    } else {
      best = prompt;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(rec);
    if (log) log(rec);
  }
  hist.model_digest_after = to_hex(model.weight_digest());
  result.prompt = std::move(best);
  return result;
}

std::vector<GradSample> grad_samples(const FrozenInpainter& model, const TaskDataset& ds, const RetrievalIndex& index,
                                     const FeatureExtractor& fx, const BorderPrompt& prompt, int n_params, double eps,
                                     uint64_t seed) {
  const CanvasSpec spec = model.canvas_spec();
  const std::vector<int> positions = masked_token_indices(spec, model.token_grid_side());
  const std::vector<PreparedQuery> prepared = prepare(ds, model, index, fx, positions, 2);
  std::vector<size_t> batch(prepared.size());
  std::iota(batch.begin(), batch.end(), 0);

  std::vector<double> values(prompt.values.begin(), prompt.values.end());
  Image canvas_grad;
  batch_loss(ds, model, prepared, batch, prompt, values, positions, &canvas_grad);
  const std::vector<double> analytic = prompt_gradient(prompt, canvas_grad);

  // Candidates: frame parameters that sit on image pixels.
  const PromptGeometry& g = prompt.geometry;
  const Rect region = prompt.region();
  const auto cells = perturbed_cells(prompt.variant);
  std::vector<int64_t> candidates;
  for (int64_t k = 0; k < g.per_channel(); ++k) {
    const auto [ry, rx] = g.frame_position(k);
    const bool on_image = std::any_of(cells.begin(), cells.end(), [&](Cell c) {
      return spec.cell_rect(c).contains(region.top + ry, region.left + rx);
    });
    if (on_image) {
      for (int c = 0; c < g.channels; ++c) candidates.push_back(c * g.per_channel() + k);
    }
  }
  if (candidates.empty()) throw UsageError("prompt has no parameters over image pixels");
  Rng rng = make_rng({seed, 0x6c});
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(std::min<size_t>(candidates.size(), static_cast<size_t>(n_params)));

  std::vector<GradSample> out;
  for (int64_t k : candidates) {
    std::vector<double> plus = values, minus = values;
    plus[k] += eps;
    minus[k] -= eps;
    const double lp = batch_loss(ds, model, prepared, batch, prompt, plus, positions, nullptr);
    const double lm = batch_loss(ds, model, prepared, batch, prompt, minus, positions, nullptr);
    out.push_back({k, analytic[k], (lp - lm) / (2.0 * eps)});
  }
  return out;
}

double GradSample::relative_error() const {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const FrozenInpainter& model, const TaskDataset& ds, const RetrievalIndex& index,
                  const FeatureExtractor& fx, const BorderPrompt& prompt, int n_params, double eps, uint64_t seed) {
  double max_rel = 0.0;
  for (const auto& g : grad_samples(model, ds, index, fx, prompt, n_params, eps, seed)) {
    max_rel = std::max(max_rel, g.relative_error());
  }
  return max_rel;
}

}  // namespace einmemo
