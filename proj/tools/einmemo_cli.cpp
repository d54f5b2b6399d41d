#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "einmemo/binary_io.hpp"
#include "einmemo/dataset.hpp"
#include "einmemo/digest.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/evaluation.hpp"
#include "einmemo/retrieval.hpp"
#include "einmemo/toy_inpainter.hpp"
#include "einmemo/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace einmemo;

namespace {

// ---------------------------------------------------------------------------
// Configuration

// Overlays `patch` onto `base`. Keys missing from `base` are rejected.
void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw UsageError("config " + (where.empty() ? "root" : where) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw UsageError("unknown config key: " + path);
    if (base[key].is_object() && value.is_object()) {
      merge_strict(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

void set_key(json& cfg, const std::string& dotted, const json& value) {
  json* node = &cfg;
  std::stringstream ss(dotted);
  std::string part, path;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i < parts.size(); ++i) {
    path += (i ? "." : "") + parts[i];
    if (!node->is_object() || !node->contains(parts[i])) throw UsageError("unknown config key: " + path);
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw UsageError("config key " + dotted + " is a section, not a value");
  *node = value;
}

fs::path output_root() {
  const char* env = std::getenv("EINMEMO_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path run_dir(const json& cfg, const std::string& command) {
  const std::string out = cfg.at("out").get<std::string>();
  return out.empty() ? output_root() / command : fs::path(out);
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void log(const std::string& msg) { std::cerr << msg << std::endl; }

// ---------------------------------------------------------------------------
// Shared loaders

fs::path manifest_of(const json& cfg, const std::string& data_key = "data", const std::string& manifest_key = "manifest") {
  const std::string data = cfg.at(data_key).get<std::string>();
  if (data.empty()) throw UsageError(data_key + " is required");
  const std::string manifest = cfg.at(manifest_key).get<std::string>();
  return manifest.empty() ? fs::path(data) / "manifest.tsv" : fs::path(manifest);
}

TaskDataset load_split(const std::string& root, const fs::path& manifest, Split split, int cell) {
  if (!fs::is_directory(root)) throw DataError("dataset directory not found: " + root);
  return load_pairs(root, manifest, split, cell);
}

PatchVqInpainter load_frozen(const json& cfg) {
  const std::string dir = cfg.at("model").get<std::string>();
  if (dir.empty()) throw UsageError("model is required");
  if (!fs::is_directory(dir)) throw DataError("model directory not found: " + dir);
  return load_model(dir);
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name, const PatchVqInpainter* model) {
  if (name == "pixels") return std::make_unique<PixelExtractor>(16);
  if (name == "toy-encoder") {
    if (!model) throw UsageError("the toy-encoder extractor needs a model");
    return std::make_unique<ToyEncoderExtractor>(*model);
  }
  throw UsageError("unknown extractor '" + name + "' (expected pixels or toy-encoder)");
}

PromptTrainConfig prompt_config(const json& j) {
  PromptTrainConfig c = j.get<PromptTrainConfig>();
  c.validate();
  return c;
}

// Digest of every regular file under root (sorted relative paths and contents).
std::string tree_digest(const fs::path& root, const std::vector<std::string>& skip) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), root);
    if (std::find(skip.begin(), skip.end(), rel.generic_string()) != skip.end()) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  ByteWriter w;
  for (const auto& f : files) {
    w.put_string(f.generic_string());
    const auto bytes = read_file_bytes(root / f);
    w.put<uint64_t>(bytes.size());
    w.put_bytes(bytes);
  }
  return to_hex(sha256(w.bytes()));
}

json report_json(const EvalReport& r) {
  json folds = json::object(), cats = json::object();
  for (const auto& [f, m] : r.per_fold) folds[std::to_string(f)] = m;
  for (const auto& [c, m] : r.per_category) cats[std::to_string(c)] = m;
  return json{{"label", r.label}, {"mean", r.mean}, {"per_fold", folds}, {"per_category", cats},
              {"metadata", r.metadata}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.label = j.at("label").get<std::string>();
  r.mean = j.at("mean").get<double>();
  for (const auto& [f, m] : j.at("per_fold").items()) r.per_fold[std::stoi(f)] = m.get<double>();
  for (const auto& [c, m] : j.at("per_category").items()) r.per_category[std::stoi(c)] = m.get<double>();
  return r;
}

// ---------------------------------------------------------------------------
// Commands

json gen_data_defaults() {
  return {{"seed", 0}, {"categories", 8}, {"per_class", 50}, {"test_per_class", 20}, {"cell", 111},
          {"texture_contrast", 1.0}, {"texture_scale", 1.0}, {"out", ""}};
}

void cmd_gen_data(const json& cfg, const fs::path& dir) {
  SynthOptions opt;
  opt.test_per_class = cfg.at("test_per_class").get<int>();
  opt.texture_contrast = cfg.at("texture_contrast").get<double>();
  opt.texture_scale = cfg.at("texture_scale").get<double>();
  const SynthTask task = synth_task(cfg.at("seed").get<uint64_t>(), cfg.at("categories").get<int>(),
                                    cfg.at("per_class").get<int>(), cfg.at("cell").get<int>(), opt);
  write_dataset({&task.train, &task.test}, dir);
  const std::string digest = tree_digest(dir, {"config.json", "tree.sha256"});
  std::ofstream(dir / "tree.sha256") << digest << '\n';
  log("wrote " + std::to_string(task.train.size()) + " train and " + std::to_string(task.test.size()) +
      " test samples to " + dir.string() + " (tree " + digest.substr(0, 16) + ")");
}

json train_frozen_defaults() {
  return {{"data", ""}, {"manifest", ""}, {"toy", json(ToyTrainConfig{})}, {"out", ""}};
}

void cmd_train_frozen(const json& cfg, const fs::path& dir) {
  const ToyTrainConfig tc = cfg.at("toy").get<ToyTrainConfig>();
  const TaskDataset train = load_split(cfg.at("data"), manifest_of(cfg), Split::train, tc.arch.cell);
  ToyTrainReport rep;
  const PatchVqInpainter model = train_toy_frozen(train, tc, &rep, log);
  save_model(model, dir / "model");
  std::ofstream hist(dir / "train_log.csv");
  hist << "stage,epoch,loss\n" << std::setprecision(10);
  for (size_t i = 0; i < rep.tokenizer_loss.size(); ++i) hist << "tokenizer," << i + 1 << ',' << rep.tokenizer_loss[i] << '\n';
  for (size_t i = 0; i < rep.predictor_loss.size(); ++i) hist << "predictor," << i + 1 << ',' << rep.predictor_loss[i] << '\n';
  const std::string digest = to_hex(model.weight_digest());
  log("model saved to " + (dir / "model").string() + " digest " + digest + " reconstruction MAE " +
      std::to_string(rep.reconstruction_mae));
}

json build_index_defaults() {
  return {{"data", ""}, {"manifest", ""}, {"split", "train"}, {"extractor", "pixels"}, {"model", ""}, {"out", ""}};
}

void cmd_build_index(const json& cfg, const fs::path& dir) {
  std::unique_ptr<PatchVqInpainter> model;
  if (!cfg.at("model").get<std::string>().empty()) model = std::make_unique<PatchVqInpainter>(load_frozen(cfg));
  const int cell = model ? model->config().cell : 111;
  const TaskDataset ds = load_split(cfg.at("data"), manifest_of(cfg), parse_split(cfg.at("split").get<std::string>()), cell);
  const auto fx = make_extractor(cfg.at("extractor"), model.get());
  const RetrievalIndex index = build_index(ds, *fx);
  save_index(index, dir / "index.bin");
  log("indexed " + std::to_string(index.size()) + " samples with " + fx->name());
}

json train_prompt_defaults() {
  return {{"data", ""}, {"manifest", ""}, {"model", ""}, {"extractor", "pixels"}, {"prompt", json(PromptTrainConfig{})},
          {"out", ""}};
}

void cmd_train_prompt(const json& cfg, const fs::path& dir) {
  const PatchVqInpainter model = load_frozen(cfg);
  const PromptTrainConfig pc = prompt_config(cfg.at("prompt"));
  const TaskDataset train = load_split(cfg.at("data"), manifest_of(cfg), Split::train, model.config().cell);
  const auto fx = make_extractor(cfg.at("extractor"), &model);
  const RetrievalIndex index = build_index(train, *fx);
  const TrainResult tr = train_prompt(train, model, index, *fx, pc, {}, [](const EpochRecord& e) {
    std::ostringstream msg;
    msg << "epoch " << e.epoch << " loss " << e.mean_loss << " lr " << e.learning_rate;
    log(msg.str());
  });
  const auto& last = tr.history.epochs.back();
  save_checkpoint(tr.prompt, PromptMetadata{last.epoch, last.mean_loss, pc.seed}, dir / "prompt.bin");
  std::ofstream hist(dir / "history.csv");
  hist << "epoch,mean_loss,learning_rate,seconds\n" << std::setprecision(17);
  for (const auto& e : tr.history.epochs) hist << e.epoch << ',' << e.mean_loss << ',' << e.learning_rate << ',' << e.seconds << '\n';
  write_json({{"prompt_checksum", prompt_checksum(tr.prompt)},
              {"param_count", tr.prompt.geometry.param_count()},
              {"model_digest_before", tr.history.model_digest_before},
              {"model_digest_after", tr.history.model_digest_after},
              {"trainable_leaves", tr.history.trainable_leaves},
              {"first_epoch_loss", tr.history.epochs.front().mean_loss},
              {"final_epoch_loss", last.mean_loss}},
             dir / "summary.json");
  log("prompt saved to " + (dir / "prompt.bin").string() + " checksum " + prompt_checksum(tr.prompt));
}

json eval_defaults() {
  return {{"data", ""},
          {"manifest", ""},
          {"model", ""},
          {"extractor", "pixels"},
          {"prompt", ""},
          {"no_prompt", false},
          {"folds", 1},
          {"domain_shift", {{"source", ""}, {"source_manifest", ""}, {"target", ""}, {"target_manifest", ""}}},
          {"out", ""}};
}

void cmd_eval(const json& cfg, const fs::path& dir) {
  const PatchVqInpainter model = load_frozen(cfg);
  const auto fx = make_extractor(cfg.at("extractor"), &model);
  const int cell = model.config().cell;
  const bool no_prompt = cfg.at("no_prompt").get<bool>();
  const std::string prompt_path = cfg.at("prompt").get<std::string>();
  if (!no_prompt && prompt_path.empty()) throw UsageError("eval needs --prompt or --no-prompt");
  std::optional<BorderPrompt> prompt;
  if (!no_prompt) {
    prompt = load_checkpoint(prompt_path).first;
    if (!(prompt->canvas == model.canvas_spec())) throw DataError("prompt canvas does not match the model");
  }

  const json& shift = cfg.at("domain_shift");
  const std::string source = shift.at("source"), target = shift.at("target");
  if (!source.empty() || !target.empty()) {
    if (source.empty() || target.empty()) throw UsageError("domain shift needs both source and target");
    if (!prompt) throw UsageError("domain shift evaluation needs a prompt");
    const TaskDataset src = load_split(source, manifest_of(shift, "source", "source_manifest"), Split::train, cell);
    const TaskDataset tgt_train = load_split(target, manifest_of(shift, "target", "target_manifest"), Split::train, cell);
    const TaskDataset tgt = load_split(target, manifest_of(shift, "target", "target_manifest"), Split::test, cell);
    // In-domain references: target pairs for target queries.
    const RetrievalIndex in_index = build_index(tgt_train, *fx);
    const double ref_base = eval_icl(tgt, tgt_train, in_index, model, *fx, nullptr, {false, "in-domain"}).mean;
    const double ref_prompt = eval_icl(tgt, tgt_train, in_index, model, *fx, &*prompt, {false, "in-domain"}).mean;
    const DomainShiftReport r = domain_shift_eval(src, tgt, model, *fx, *prompt, fs::path(source).filename().string(),
                                                  fs::path(target).filename().string(), ref_base, ref_prompt);
    write_report_csv(r.baseline, dir / "baseline");
    write_report_csv(r.prompted, dir / "prompt");
    std::ofstream out(dir / "domain_shift.csv");
    out << "setting,in_domain,shifted,absolute_drop,relative_drop\n" << std::setprecision(10);
    out << "baseline," << ref_base << ',' << r.baseline.mean << ',' << r.baseline_drop.absolute << ','
        << r.baseline_drop.relative << '\n';
    out << "prompt," << ref_prompt << ',' << r.prompted.mean << ',' << r.prompted_drop.absolute << ','
        << r.prompted_drop.relative << '\n';
    write_json({{"reports", {report_json(r.baseline), report_json(r.prompted)}}}, dir / "summary.json");
    plot_fold_bars({&r.baseline, &r.prompted}, dir / "fold_bars.png");
    log("domain shift " + r.source + "->" + r.target + ": baseline " + std::to_string(r.baseline.mean) + " prompt " +
        std::to_string(r.prompted.mean));
    return;
  }

  const int k = cfg.at("folds").get<int>();
  TaskDataset train = load_split(cfg.at("data"), manifest_of(cfg), Split::train, cell);
  TaskDataset test = load_split(cfg.at("data"), manifest_of(cfg), Split::test, cell);
  const auto partition = assign_folds(test.categories(), k);
  test = test.with_partition(partition);
  const RetrievalIndex index = build_index(train, *fx);
  std::vector<EvalReport> reports;
  reports.push_back(eval_icl(test, train, index, model, *fx, nullptr, {true, "no prompt"}));
  if (prompt) reports.push_back(eval_icl(test, train, index, model, *fx, &*prompt, {true, "prompt"}));
  json summary = json::array();
  std::vector<const EvalReport*> ptrs;
  for (const auto& r : reports) {
    write_report_csv(r, dir / (r.label == "prompt" ? "prompt" : "baseline"));
    summary.push_back(report_json(r));
    ptrs.push_back(&r);
    log(r.label + ": mIoU " + std::to_string(r.mean));
  }
  json out{{"reports", summary}};
  if (reports.size() == 2) {
    const Delta d = mean_delta(reports[1].mean, reports[0].mean);
    out["delta"] = {{"absolute", d.absolute}, {"relative", d.relative}};
    log("delta: " + std::to_string(d.absolute) + " points");
  }
  write_json(out, dir / "summary.json");
  plot_fold_bars(ptrs, dir / "fold_bars.png");
}

json ablate_defaults() {
  return {{"data", ""}, {"manifest", ""}, {"model", ""}, {"extractor", "pixels"}, {"prompt", json(PromptTrainConfig{})},
          {"sweep", ""}, {"grid", false}, {"grid_categories", 4}, {"subset_seed", 0}, {"out", ""}};
}

template <typename T>
std::vector<T> parse_list(const std::string& csv, const std::function<T(const std::string&)>& conv) {
  std::vector<T> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(conv(item));
    } catch (const std::logic_error&) {
      throw UsageError("bad sweep value '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("sweep needs at least one value");
  return out;
}

void cmd_ablate(const json& cfg, const fs::path& dir) {
  const PatchVqInpainter model = load_frozen(cfg);
  const auto fx = make_extractor(cfg.at("extractor"), &model);
  const int cell = model.config().cell;
  const PromptTrainConfig base = prompt_config(cfg.at("prompt"));
  const TaskDataset train = load_split(cfg.at("data"), manifest_of(cfg), Split::train, cell);
  const TaskDataset test = load_split(cfg.at("data"), manifest_of(cfg), Split::test, cell);
  const std::string sweep = cfg.at("sweep");
  const bool grid = cfg.at("grid").get<bool>();
  if (sweep.empty() && !grid) throw UsageError("ablate needs --sweep or --grid");
  const uint64_t subset_seed = cfg.at("subset_seed").get<uint64_t>();

  if (!sweep.empty()) {
    const auto eq = sweep.find('=');
    if (eq == std::string::npos) throw UsageError("sweep must look like name=v1,v2,...");
    const std::string name = sweep.substr(0, eq), values = sweep.substr(eq + 1);
    const SweepContext ctx{train, test, model, *fx, base, log};
    SweepTable table;
    if (name == "pad") {
      table = sweep_padding(parse_list<int>(values, [](const std::string& s) { return std::stoi(s); }), ctx);
    } else if (name == "variant") {
      table = sweep_variants(parse_list<Placement>(values, [](const std::string& s) { return parse_placement(s); }), ctx);
    } else if (name == "per_class") {
      table = sweep_per_class(parse_list<int>(values, [](const std::string& s) { return std::stoi(s); }), ctx, subset_seed);
    } else if (name == "fraction") {
      table = sweep_fraction(parse_list<double>(values, [](const std::string& s) { return std::stod(s); }), ctx, subset_seed);
    } else {
      throw UsageError("unknown sweep '" + name + "' (expected pad, variant, per_class or fraction)");
    }
    write_sweep_csv(table, dir / ("sweep_" + name + ".csv"));
    plot_sweep(table, dir / ("sweep_" + name + ".png"));
  }
  if (grid) {
    std::vector<int> cats = train.categories();
    const int k = cfg.at("grid_categories").get<int>();
    if (k < 1 || k > static_cast<int>(cats.size())) throw UsageError("grid_categories out of range");
    cats.resize(k);
    const TaskDataset gtrain = train.filter_categories(cats), gtest = test.filter_categories(cats);
    const auto prompts = train_per_class_prompts(gtrain, model, *fx, base);
    const ClassGrid g = class_grid_eval(prompts, gtrain, gtest, model, *fx);
    write_grid_csv(g, dir / "class_grid.csv");
    plot_grid_heatmap(g, dir / "class_grid.png");
    log("class grid mean " + std::to_string(g.grand_mean));
  }
}

json report_defaults() { return {{"runs", json::array()}, {"out", ""}}; }

void cmd_report(const json& cfg, const fs::path& dir) {
  const auto runs = cfg.at("runs").get<std::vector<std::string>>();
  if (runs.empty()) throw UsageError("report needs at least one run directory");
  std::vector<EvalReport> reports;
  for (const auto& run : runs) {
    const json s = read_json(fs::path(run) / "summary.json");
    if (!s.contains("reports")) throw DataError(run + " has no evaluation reports");
    for (const auto& r : s.at("reports")) {
      reports.push_back(report_from_json(r));
      reports.back().label = fs::path(run).filename().string() + ":" + reports.back().label;
    }
  }
  std::set<int> folds;
  for (const auto& r : reports) for (const auto& [f, m] : r.per_fold) folds.insert(f);
  std::ofstream out(dir / "report.csv");
  out << "label";
  for (int f : folds) out << ",fold" << f;
  out << ",mean,delta_vs_first\n" << std::setprecision(10);
  for (const auto& r : reports) {
    out << r.label;
    for (int f : folds) {
      out << ',';
      if (r.per_fold.contains(f)) out << r.per_fold.at(f);
    }
    out << ',' << r.mean << ',' << mean_delta(r.mean, reports.front().mean).absolute << '\n';
  }
  std::vector<const EvalReport*> ptrs;
  for (const auto& r : reports) ptrs.push_back(&r);
  plot_fold_bars(ptrs, dir / "fold_bars.png");
  log("report written to " + (dir / "report.csv").string());
}

// ---------------------------------------------------------------------------
// Wiring

struct Flag {
  std::string name;  // command-line flag
  std::string key;   // dotted config key
  std::string help;
  bool boolean = false;
};

struct Command {
  std::string name;
  std::string help;
  std::function<json()> defaults;
  std::function<void(const json&, const fs::path&)> run;
  std::vector<Flag> flags;
};

struct Parsed {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  std::vector<std::string> runs;
};

std::vector<Command> commands() {
  const Flag data{"--data", "data", "dataset root"}, manifest{"--manifest", "manifest", "manifest path"};
  const Flag model{"--model", "model", "frozen model directory"};
  const Flag extractor{"--extractor", "extractor", "retrieval features: pixels | toy-encoder"};
  const Flag out{"--out", "out", "run directory"};
  const Flag seed{"--seed", "seed", "random seed"};
  const std::vector<Flag> prompt_flags = {
      {"--epochs", "prompt.epochs", "training epochs"},
      {"--batch-size", "prompt.batch_size", "queries per step"},
      {"--lr", "prompt.learning_rate", "initial learning rate"},
      {"--pad", "prompt.pad", "frame width in pixels"},
      {"--variant", "prompt.variant", "placement: I | L | IL | Q | IQ"},
      {"--prompt-seed", "prompt.seed", "prompt training seed"},
  };
  auto with = [](std::vector<Flag> a, const std::vector<Flag>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  return {
      {"gen-data", "write a synthetic dataset", gen_data_defaults, cmd_gen_data,
       {seed, out, {"--categories", "categories", "number of shape categories"},
        {"--per-class", "per_class", "training images per category"},
        {"--test-per-class", "test_per_class", "test images per category"},
        {"--texture-contrast", "texture_contrast", "background texture amplitude multiplier"},
        {"--texture-scale", "texture_scale", "background texture frequency multiplier"}}},
      {"train-frozen", "train the toy frozen inpainter", train_frozen_defaults, cmd_train_frozen,
       {data, manifest, out, {"--seed", "toy.seed", "training seed"}}},
      {"build-index", "build a retrieval index", build_index_defaults, cmd_build_index,
       {data, manifest, model, extractor, out, {"--split", "split", "train | test"}}},
      {"train-prompt", "train a border prompt on a frozen model", train_prompt_defaults, cmd_train_prompt,
       with({data, manifest, model, extractor, out}, prompt_flags)},
      {"eval", "evaluate in-context segmentation", eval_defaults, cmd_eval,
       {data, manifest, model, extractor, out,
        {"--prompt", "prompt", "prompt checkpoint"},
        {"--no-prompt", "no_prompt", "evaluate the unprompted baseline only", true},
        {"--folds", "folds", "number of category folds"},
        {"--source", "domain_shift.source", "domain shift: dataset supplying the in-context pairs"},
        {"--target", "domain_shift.target", "domain shift: dataset supplying the queries"}}},
      {"ablate", "run ablation sweeps", ablate_defaults, cmd_ablate,
       with({data, manifest, model, extractor, out,
             {"--sweep", "sweep", "pad=..., variant=..., per_class=... or fraction=..."},
             {"--grid", "grid", "per-category prompt generalization grid", true},
             {"--grid-categories", "grid_categories", "categories in the grid"}},
            prompt_flags)},
      {"report", "combine evaluation runs into one table and plot", report_defaults, cmd_report, {out}},
  };
}

int run(int argc, char** argv) {
  CLI::App app{"Learnable border prompts for visual in-context learning"};
  app.require_subcommand(1);
  const auto cmds = commands();
  std::map<std::string, Parsed> parsed;
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    Parsed& p = parsed[c.name];
    sub->add_option("--config", p.config_file, "JSON config file");
    sub->add_option("--set", p.sets, "override a config value: key.path=value");
    for (const auto& f : c.flags) {
      if (f.boolean) {
        sub->add_flag(f.name, p.switches[f.key], f.help);
      } else {
        sub->add_option(f.name, p.values[f.key], f.help);
      }
    }
    if (c.name == "report") sub->add_option("runs", p.runs, "run directories holding summary.json")->required();
    subs[c.name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (const auto& c : cmds) {
    if (!subs[c.name]->parsed()) continue;
    const Parsed& p = parsed[c.name];
    json cfg = c.defaults();
    if (!p.config_file.empty()) merge_strict(cfg, read_json(p.config_file), "");
    for (const auto& f : c.flags) {
      if (f.boolean) {
        if (subs[c.name]->count(f.name) > 0) set_key(cfg, f.key, true);
      } else if (subs[c.name]->count(f.name) > 0) {
        set_key(cfg, f.key, parse_scalar(p.values.at(f.key)));
      }
    }
    for (const auto& s : p.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      set_key(cfg, s.substr(0, eq), parse_scalar(s.substr(eq + 1)));
    }
    if (c.name == "report") cfg["runs"] = p.runs;
    // Re-validate types by round-tripping through the defaults.
    json check = c.defaults();
    merge_strict(check, cfg, "");
    const fs::path dir = run_dir(cfg, c.name);
    fs::create_directories(dir);
    write_json(cfg, dir / "config.json");
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(cfg, dir);
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad config value: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log(c.name + " finished in " + std::to_string(secs) + " s; outputs in " + dir.string());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: invalid config: " << e.what() << std::endl;
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
}
