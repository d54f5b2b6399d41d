#include "einmemo/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "einmemo/digest.hpp"
#include "einmemo/errors.hpp"

namespace einmemo {

Mask binarize(const Image& decoded) {
  Mask m(decoded.height(), decoded.width());
  const int c = decoded.channels();
  for (int y = 0; y < decoded.height(); ++y) {
    for (int x = 0; x < decoded.width(); ++x) {
      double sum = 0.0;
      for (int ch = 0; ch < c; ++ch) sum += decoded.at(ch, y, x);
      m.at(y, x) = sum / c >= 0.5 ? 1 : 0;
    }
  }
  return m;
}

double iou(const Mask& a, const Mask& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw UsageError("iou: mask shapes differ");
  size_t inter = 0, uni = 0;
  const auto da = a.data(), db = b.data();
  for (size_t i = 0; i < da.size(); ++i) {
    inter += (da[i] & db[i]);
    uni += (da[i] | db[i]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

EvalReport aggregate(std::string label, std::vector<QueryResult> results, const std::map<int, int>& partition) {
  if (results.empty()) throw DataError("no query results to aggregate");
  std::sort(results.begin(), results.end(),
            [](const QueryResult& a, const QueryResult& b) { return a.query_id < b.query_id; });
  EvalReport r;
  r.label = std::move(label);
  std::map<int, std::pair<double, int>> cat;
  for (const auto& q : results) {
    cat[q.category_id].first += q.iou;
    cat[q.category_id].second += 1;
  }
  std::map<int, std::pair<double, int>> fold;
  for (const auto& [c, acc] : cat) {
    const double m = 100.0 * acc.first / acc.second;
    r.per_category[c] = m;
    const auto it = partition.find(c);
    const int f = it == partition.end() ? 0 : it->second;
    fold[f].first += m;
    fold[f].second += 1;
  }
  double total = 0.0;
  for (const auto& [f, acc] : fold) {
    r.per_fold[f] = acc.first / acc.second;
    total += r.per_fold[f];
  }
  r.mean = total / static_cast<double>(r.per_fold.size());
  r.queries = std::move(results);
  return r;
}

Delta mean_delta(double value, double reference) {
  Delta d;
  d.absolute = value - reference;
  d.relative = reference != 0.0 ? d.absolute / reference : 0.0;
  return d;
}

Mask predict_mask(const FrozenInpainter& model, const Sample& pair, const Image& query, const BorderPrompt* prompt) {
  const CanvasSpec spec = model.canvas_spec();
  Image a = pair.image, b = mask_to_label_image(pair.mask), q = query;
  if (prompt) {
    PromptedImages p = apply(a, b, q, *prompt);
    a = std::move(p.pair_image);
    b = std::move(p.pair_label);
    q = std::move(p.query);
  }
  const Canvas canvas = compose_canvas(a, b, q, spec);
  const std::vector<int> positions = masked_token_indices(spec, model.token_grid_side());
  const std::vector<int> tokens = predict_tokens(model, canvas, positions);
  const Image decoded = model.decode(scatter_tokens(model.token_grid_side(), positions, tokens));
  return binarize(decoded.crop(spec.cell_rect(Cell::br)));
}

EvalReport eval_icl(const TaskDataset& queries, const TaskDataset& retrieval_set, const RetrievalIndex& index,
                    const FrozenInpainter& model, const FeatureExtractor& fx, const BorderPrompt* prompt,
                    const EvalOptions& options) {
  std::vector<QueryResult> results;
  results.reserve(queries.size());
  for (const auto& q : queries.samples()) {
    std::set<std::string> exclude;
    if (options.exclude_self) exclude.insert(q->id);
    const std::string pair_id = retrieve(index, q->image, fx, exclude);
    const auto pos = retrieval_set.find(pair_id);
    if (!pos) throw DataError("retrieved id " + pair_id + " is not in the retrieval set");
    const Mask pred = predict_mask(model, retrieval_set[*pos], q->image, prompt);
    results.push_back(QueryResult{q->id, pair_id, q->category_id, iou(pred, q->mask)});
  }
  EvalReport r = aggregate(options.label, std::move(results), queries.partition());
  r.metadata["model_digest"] = to_hex(model.weight_digest());
  r.metadata["extractor"] = fx.name();
  r.metadata["prompt"] = prompt ? std::string(to_string(prompt->variant)) + "/pad" +
                                      std::to_string(prompt->geometry.pad) + "/" + prompt_checksum(*prompt)
                                : "none";
  r.metadata["queries"] = std::to_string(queries.size());
  r.metadata["retrieval_set"] = std::to_string(retrieval_set.size());
  return r;
}

DomainShiftReport domain_shift_eval(const TaskDataset& source, const TaskDataset& target,
                                    const FrozenInpainter& model, const FeatureExtractor& fx,
                                    const BorderPrompt& prompt, std::string source_name, std::string target_name,
                                    std::optional<double> baseline_reference,
                                    std::optional<double> prompted_reference) {
  const RetrievalIndex index = build_index(source, fx);
  DomainShiftReport r;
  r.source = std::move(source_name);
  r.target = std::move(target_name);
  const std::string tag = r.source + "->" + r.target;
  r.baseline = eval_icl(target, source, index, model, fx, nullptr, {false, "baseline " + tag});
  r.prompted = eval_icl(target, source, index, model, fx, &prompt, {false, "prompt " + tag});
  r.baseline.metadata["domain"] = tag;
  r.prompted.metadata["domain"] = tag;
  // Drops are positive when the shifted score is below the in-domain reference.
  const auto drop = [](double reference, double measured) {
    return Delta{reference - measured, reference != 0.0 ? (reference - measured) / reference : 0.0};
  };
  if (baseline_reference) r.baseline_drop = drop(*baseline_reference, r.baseline.mean);
  if (prompted_reference) r.prompted_drop = drop(*prompted_reference, r.prompted.mean);
  return r;
}

std::map<int, BorderPrompt> train_per_class_prompts(const TaskDataset& train, const FrozenInpainter& model,
                                                    const FeatureExtractor& fx, const PromptTrainConfig& cfg) {
  std::map<int, BorderPrompt> out;
  for (int c : train.categories()) {
    const TaskDataset sub = train.filter_categories({c});
    const RetrievalIndex index = build_index(sub, fx);
    out.emplace(c, train_prompt(sub, model, index, fx, cfg).prompt);
  }
  return out;
}

ClassGrid class_grid_eval(const std::map<int, BorderPrompt>& per_class_prompts, const TaskDataset& train,
                          const TaskDataset& test, const FrozenInpainter& model, const FeatureExtractor& fx) {
  ClassGrid g;
  g.categories = test.categories();
  for (int c : g.categories) {
    if (!per_class_prompts.contains(c)) throw UsageError("no prompt for category " + std::to_string(c));
  }
  const size_t k = g.categories.size();
  g.miou.assign(k, std::vector<double>(k, 0.0));
  double total = 0.0;
  for (size_t i = 0; i < k; ++i) {
    const TaskDataset pairs = train.filter_categories({g.categories[i]});
    const RetrievalIndex index = build_index(pairs, fx);
    const BorderPrompt& prompt = per_class_prompts.at(g.categories[i]);
    for (size_t j = 0; j < k; ++j) {
      const TaskDataset queries = test.filter_categories({g.categories[j]});
      g.miou[i][j] = eval_icl(queries, pairs, index, model, fx, &prompt).mean;
      total += g.miou[i][j];
    }
  }
  g.grand_mean = total / static_cast<double>(k * k);
  return g;
}

namespace {

SweepRow run_setting(const TaskDataset& train, const SweepContext& ctx, const PromptTrainConfig& cfg,
                     std::string setting, double value, std::optional<double> baseline) {
  const RetrievalIndex index = build_index(train, ctx.fx);
  SweepRow row;
  row.setting = std::move(setting);
  row.value = value;
  row.train_size = train.size();
  row.param_count = prompt_geometry(ctx.model.canvas_spec(), cfg.variant, cfg.pad).param_count();
  row.baseline_miou = baseline ? *baseline : eval_icl(ctx.test, train, index, ctx.model, ctx.fx, nullptr).mean;
  const TrainResult tr = train_prompt(train, ctx.model, index, ctx.fx, cfg);
  row.final_loss = tr.history.epochs.back().mean_loss;
  row.prompt_miou = eval_icl(ctx.test, train, index, ctx.model, ctx.fx, &tr.prompt).mean;
  if (ctx.log) {
    std::ostringstream msg;
    msg << "setting " << row.setting << ": baseline " << row.baseline_miou << " prompt " << row.prompt_miou;
    ctx.log(msg.str());
  }
  return row;
}

double baseline_for(const TaskDataset& train, const SweepContext& ctx) {
  const RetrievalIndex index = build_index(train, ctx.fx);
  return eval_icl(ctx.test, train, index, ctx.model, ctx.fx, nullptr).mean;
}

}  // namespace

SweepTable sweep_padding(const std::vector<int>& pads, const SweepContext& ctx) {
  SweepTable t{"padding", {}};
  std::vector<int> sorted = pads;
  std::sort(sorted.begin(), sorted.end());
  const double baseline = baseline_for(ctx.train, ctx);
  for (int pad : sorted) {
    PromptTrainConfig cfg = ctx.base;
    cfg.pad = pad;
    t.rows.push_back(run_setting(ctx.train, ctx, cfg, std::to_string(pad), pad, baseline));
  }
  return t;
}

SweepTable sweep_variants(const std::vector<Placement>& variants, const SweepContext& ctx) {
  SweepTable t{"variant", {}};
  const double baseline = baseline_for(ctx.train, ctx);
  for (size_t i = 0; i < variants.size(); ++i) {
    PromptTrainConfig cfg = ctx.base;
    cfg.variant = variants[i];
    t.rows.push_back(run_setting(ctx.train, ctx, cfg, std::string(to_string(variants[i])), static_cast<double>(i),
                                 baseline));
  }
  return t;
}

SweepTable sweep_per_class(const std::vector<int>& counts, const SweepContext& ctx, uint64_t seed) {
  SweepTable t{"per_class", {}};
  std::vector<int> sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  for (int m : sorted) {
    const TaskDataset sub = subset_per_class(ctx.train, m, seed);
    if (sub.size() < 2) throw UsageError("per-class subset of " + std::to_string(m) + " is too small");
    t.rows.push_back(run_setting(sub, ctx, ctx.base, std::to_string(m), m, std::nullopt));
  }
  return t;
}

SweepTable sweep_fraction(const std::vector<double>& fractions, const SweepContext& ctx, uint64_t seed) {
  SweepTable t{"fraction", {}};
  std::vector<double> sorted = fractions;
  std::sort(sorted.begin(), sorted.end());
  for (double p : sorted) {
    const TaskDataset sub = subset_fraction(ctx.train, p, seed);
    if (sub.size() < 2) throw UsageError("retrieval subset is too small for leave-one-out training");
    std::ostringstream name;
    name << p;
    t.rows.push_back(run_setting(sub, ctx, ctx.base, name.str(), p, std::nullopt));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Output

void write_report_csv(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream q(dir / "queries.csv");
  q << "query_id,pair_id,category_id,iou\n" << std::setprecision(17);
  for (const auto& r : report.queries) q << r.query_id << ',' << r.pair_id << ',' << r.category_id << ',' << r.iou << '\n';
  std::ofstream c(dir / "categories.csv");
  c << "category_id,miou\n" << std::setprecision(17);
  for (const auto& [cat, m] : report.per_category) c << cat << ',' << m << '\n';
  std::ofstream f(dir / "folds.csv");
  f << "fold,miou\n" << std::setprecision(17);
  for (const auto& [fold, m] : report.per_fold) f << fold << ',' << m << '\n';
  f << "mean," << report.mean << '\n';
  std::ofstream meta(dir / "metadata.csv");
  meta << "key,value\nlabel," << report.label << '\n';
  for (const auto& [k, v] : report.metadata) meta << k << ',' << v << '\n';
}

void write_sweep_csv(const SweepTable& table, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << table.name << ",params,train_size,baseline_miou,prompt_miou,final_loss\n" << std::setprecision(10);
  for (const auto& r : table.rows) {
    out << r.setting << ',' << r.param_count << ',' << r.train_size << ',' << r.baseline_miou << ',' << r.prompt_miou
        << ',' << r.final_loss << '\n';
  }
}

void write_grid_csv(const ClassGrid& grid, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "trained_on\\evaluated_on";
  for (int c : grid.categories) out << ',' << c;
  out << '\n' << std::setprecision(10);
  for (size_t i = 0; i < grid.categories.size(); ++i) {
    out << grid.categories[i];
    for (double v : grid.miou[i]) out << ',' << v;
    out << '\n';
  }
  out << "grand_mean," << grid.grand_mean << '\n';
}

namespace {

const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrey(200, 200, 200);
const std::vector<cv::Scalar> kPalette = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214},
                                          {189, 103, 148}, {75, 86, 140}};

void put(cv::Mat& img, const std::string& text, cv::Point at, double scale = 0.4) {
  cv::putText(img, text, at, cv::FONT_HERSHEY_SIMPLEX, scale, kBlack, 1, cv::LINE_AA);
}

std::string fmt(double v, int prec = 1) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

// Plot frame with a [0, y_max] vertical axis; returns the plot rect.
cv::Rect draw_axes(cv::Mat& img, double y_max, const std::string& title, const std::string& y_label) {
  const cv::Rect area(60, 40, img.cols - 90, img.rows - 100);
  put(img, title, {60, 24}, 0.5);
  put(img, y_label, {4, 34});
  for (int i = 0; i <= 5; ++i) {
    const int y = area.y + area.height - area.height * i / 5;
    cv::line(img, {area.x, y}, {area.x + area.width, y}, kGrey, 1);
    put(img, fmt(y_max * i / 5.0), {8, y + 4});
  }
  cv::rectangle(img, area, kBlack, 1);
  return area;
}

void save_plot(const cv::Mat& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write plot " + path.string());
}

double nice_max(double v) { return std::max(10.0, std::ceil(v / 10.0) * 10.0); }

}  // namespace

void plot_fold_bars(const std::vector<const EvalReport*>& reports, const std::filesystem::path& path) {
  if (reports.empty()) throw UsageError("nothing to plot");
  std::set<int> folds;
  double top = 0.0;
  for (const auto* r : reports) {
    for (const auto& [f, m] : r->per_fold) {
      folds.insert(f);
      top = std::max(top, m);
    }
    top = std::max(top, r->mean);
  }
  cv::Mat img(420, 640, CV_8UC3, cv::Scalar(255, 255, 255));
  const double y_max = nice_max(top);
  const cv::Rect area = draw_axes(img, y_max, "mIoU per fold", "mIoU");
  std::vector<std::string> groups;
  for (int f : folds) groups.push_back("fold " + std::to_string(f));
  groups.push_back("mean");
  const double group_w = static_cast<double>(area.width) / groups.size();
  const double bar_w = group_w * 0.8 / reports.size();
  for (size_t g = 0; g < groups.size(); ++g) {
    const int gx = area.x + static_cast<int>(g * group_w + group_w * 0.1);
    put(img, groups[g], {gx, area.y + area.height + 16});
    for (size_t k = 0; k < reports.size(); ++k) {
      double v = reports[k]->mean;
      if (g + 1 < groups.size()) {
        const auto it = reports[k]->per_fold.find(*std::next(folds.begin(), static_cast<long>(g)));
        if (it == reports[k]->per_fold.end()) continue;
        v = it->second;
      }
      const int x0 = gx + static_cast<int>(k * bar_w);
      const int h = static_cast<int>(area.height * v / y_max);
      cv::rectangle(img, cv::Rect(x0, area.y + area.height - h, std::max(1, static_cast<int>(bar_w) - 2), h),
                    kPalette[k % kPalette.size()], cv::FILLED);
    }
  }
  for (size_t k = 0; k < reports.size(); ++k) {
    const int y = img.rows - 30 + static_cast<int>(k / 3) * 14;
    const int x = 60 + static_cast<int>(k % 3) * 190;
    cv::rectangle(img, cv::Rect(x, y - 8, 10, 10), kPalette[k % kPalette.size()], cv::FILLED);
    put(img, reports[k]->label, {x + 14, y + 1});
  }
  save_plot(img, path);
}

void plot_sweep(const SweepTable& table, const std::filesystem::path& path) {
  if (table.rows.empty()) throw UsageError("nothing to plot");
  double top = 0.0;
  for (const auto& r : table.rows) top = std::max({top, r.baseline_miou, r.prompt_miou});
  cv::Mat img(420, 640, CV_8UC3, cv::Scalar(255, 255, 255));
  const double y_max = nice_max(top);
  const cv::Rect area = draw_axes(img, y_max, "mIoU vs " + table.name, "mIoU");
  const size_t n = table.rows.size();
  const auto px = [&](size_t i) {
    return area.x + (n == 1 ? area.width / 2 : static_cast<int>(area.width * (0.05 + 0.9 * i / (n - 1.0))));
  };
  const auto py = [&](double v) { return area.y + area.height - static_cast<int>(area.height * v / y_max); };
  for (int series = 0; series < 2; ++series) {
    const cv::Scalar color = kPalette[series];
    for (size_t i = 0; i < n; ++i) {
      const double v = series == 0 ? table.rows[i].baseline_miou : table.rows[i].prompt_miou;
      cv::circle(img, {px(i), py(v)}, 3, color, cv::FILLED);
      if (i > 0) {
        const double u = series == 0 ? table.rows[i - 1].baseline_miou : table.rows[i - 1].prompt_miou;
        cv::line(img, {px(i - 1), py(u)}, {px(i), py(v)}, color, 2, cv::LINE_AA);
      }
    }
  }
  for (size_t i = 0; i < n; ++i) put(img, table.rows[i].setting, {px(i) - 8, area.y + area.height + 16});
  const char* names[] = {"no prompt", "prompt"};
  for (int series = 0; series < 2; ++series) {
    const int x = 60 + series * 150, y = img.rows - 24;
    cv::rectangle(img, cv::Rect(x, y - 8, 10, 10), kPalette[series], cv::FILLED);
    put(img, names[series], {x + 14, y + 1});
  }
  save_plot(img, path);
}

void plot_grid_heatmap(const ClassGrid& grid, const std::filesystem::path& path) {
  const int k = static_cast<int>(grid.categories.size());
  if (k == 0) throw UsageError("nothing to plot");
  const int cell = std::max(28, 480 / k);
  cv::Mat img(80 + cell * k, 80 + cell * k, CV_8UC3, cv::Scalar(255, 255, 255));
  double top = 1e-9;
  for (const auto& row : grid.miou) for (double v : row) top = std::max(top, v);
  cv::Mat level(1, 1, CV_8UC1), rgb;
  for (int i = 0; i < k; ++i) {
    put(img, std::to_string(grid.categories[i]), {20, 70 + i * cell + cell / 2});
    put(img, std::to_string(grid.categories[i]), {60 + i * cell + cell / 2 - 4, 50});
    for (int j = 0; j < k; ++j) {
      level.at<uint8_t>(0, 0) = static_cast<uint8_t>(std::clamp(255.0 * grid.miou[i][j] / top, 0.0, 255.0));
      cv::applyColorMap(level, rgb, cv::COLORMAP_VIRIDIS);
      const cv::Vec3b c = rgb.at<cv::Vec3b>(0, 0);
      const cv::Rect r(60 + j * cell, 60 + i * cell, cell, cell);
      cv::rectangle(img, r, cv::Scalar(c[0], c[1], c[2]), cv::FILLED);
      if (cell >= 36) {
        cv::putText(img, fmt(grid.miou[i][j], 0), {r.x + 4, r.y + cell / 2 + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                    level.at<uint8_t>(0, 0) > 150 ? kBlack : cv::Scalar(255, 255, 255), 1, cv::LINE_AA);
      }
    }
  }
  put(img, "rows: prompt category, columns: query category", {8, 20});
  save_plot(img, path);
}

}  // namespace einmemo
