#include "einmemo/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "einmemo/errors.hpp"
#include "einmemo/rng.hpp"

namespace einmemo {

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

TaskDataset::TaskDataset(std::vector<SamplePtr> samples, Split split, std::map<int, int> partition)
    : samples_(std::move(samples)), split_(split), partition_(std::move(partition)) {
  if (samples_.empty()) throw DataError("dataset has no samples");
  std::set<std::string_view> ids;
  for (const auto& s : samples_) {
    if (!ids.insert(s->id).second) throw DataError("duplicate sample id " + s->id);
    if (s->image.channels() != 3 || s->image.height() != s->mask.height() ||
        s->image.width() != s->mask.width()) {
      throw DataError("image/mask shape mismatch for " + s->id);
    }
    for (uint8_t v : s->mask.data()) {
      if (v > 1) throw DataError("non-binary mask for " + s->id);
    }
  }
  if (partition_.empty()) {
    for (int c : categories()) partition_[c] = 0;
  }
  for (const auto& s : samples_) {
    if (!partition_.contains(s->category_id)) {
      throw DataError("category " + std::to_string(s->category_id) + " missing from partition");
    }
  }
}

std::vector<int> TaskDataset::categories() const {
  std::set<int> cats;
  for (const auto& s : samples_) cats.insert(s->category_id);
  return {cats.begin(), cats.end()};
}

std::optional<size_t> TaskDataset::find(std::string_view id) const {
  for (size_t i = 0; i < samples_.size(); ++i) {
    if (samples_[i]->id == id) return i;
  }
  return std::nullopt;
}

TaskDataset TaskDataset::filter_categories(const std::vector<int>& keep) const {
  std::vector<SamplePtr> out;
  for (const auto& s : samples_) {
    if (std::find(keep.begin(), keep.end(), s->category_id) != keep.end()) out.push_back(s);
  }
  return TaskDataset(std::move(out), split_, partition_);
}

TaskDataset TaskDataset::with_partition(std::map<int, int> partition) const {
  return TaskDataset(samples_, split_, std::move(partition));
}

Mask render_bbox_mask(const BBox& box, int height, int width) {
  if (box.x_min < 0 || box.y_min < 0 || box.x_min >= box.x_max || box.y_min >= box.y_max ||
      box.x_max > width || box.y_max > height) {
    throw DataError("invalid bounding box");
  }
  Mask m(height, width);
  for (int y = box.y_min; y < box.y_max; ++y) {
    for (int x = box.x_min; x < box.x_max; ++x) m.at(y, x) = 1;
  }
  return m;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  std::vector<ManifestRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestRecord r;
    std::string split;
    if (!(fields >> r.id >> r.image_path >> r.mask_path >> r.category_id >> split)) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": malformed record");
    }
    r.split = parse_split(split);
    records.push_back(std::move(r));
  }
  return records;
}

namespace {

BBox parse_bbox(std::string_view spec, const std::string& id) {
  BBox b;
  std::string body(spec.substr(5));
  std::replace(body.begin(), body.end(), ',', ' ');
  std::istringstream in(body);
  if (!(in >> b.x_min >> b.y_min >> b.x_max >> b.y_max)) {
    throw DataError("malformed bbox for " + id);
  }
  return b;
}

}  // namespace

TaskDataset load_pairs(const std::filesystem::path& root_dir, const std::filesystem::path& manifest,
                       Split split, int cell) {
  if (cell <= 0) throw UsageError("cell size must be positive");
  std::vector<TaskDataset::SamplePtr> samples;
  for (const auto& r : read_manifest(manifest)) {
    if (r.split != split) continue;
    const auto image_path = root_dir / r.image_path;
    if (!std::filesystem::exists(image_path)) throw DataError("missing image for " + r.id);
    Image image = read_image(image_path);
    Mask mask;
    if (r.mask_path.starts_with("bbox:")) {
      mask = render_bbox_mask(parse_bbox(r.mask_path, r.id), image.height(), image.width());
    } else {
      const auto mask_path = root_dir / r.mask_path;
      if (!std::filesystem::exists(mask_path)) throw DataError("missing mask for " + r.id);
      try {
        mask = read_mask(mask_path);
      } catch (const DataError& e) {
        throw DataError(r.id + ": " + e.what());
      }
    }
    if (mask.height() != image.height() || mask.width() != image.width()) {
      throw DataError("image/mask size mismatch for " + r.id);
    }
    auto s = std::make_shared<Sample>();
    s->id = r.id;
    s->image = resize_bilinear(image, cell, cell);
    s->mask = resize_nearest(mask, cell, cell);
    s->category_id = r.category_id;
    samples.push_back(std::move(s));
  }
  if (samples.empty()) {
    throw DataError("no " + std::string(to_string(split)) + " records in " + manifest.string());
  }
  return TaskDataset(std::move(samples), split);
}

std::map<int, int> assign_folds(const std::vector<int>& categories, int k) {
  if (k <= 0) throw UsageError("fold count must be positive");
  if (categories.size() % static_cast<size_t>(k) != 0) {
    throw UsageError(std::to_string(categories.size()) + " categories cannot be split into " +
                     std::to_string(k) + " folds");
  }
  std::vector<int> sorted = categories;
  std::sort(sorted.begin(), sorted.end());
  const size_t per_fold = sorted.size() / k;
  std::map<int, int> partition;
  for (size_t i = 0; i < sorted.size(); ++i) partition[sorted[i]] = static_cast<int>(i / per_fold);
  return partition;
}

std::vector<Fold> make_folds(const TaskDataset& train, const TaskDataset& test, int k) {
  std::set<int> all;
  for (int c : train.categories()) all.insert(c);
  for (int c : test.categories()) all.insert(c);
  const auto partition = assign_folds({all.begin(), all.end()}, k);
  std::vector<Fold> folds;
  for (int f = 0; f < k; ++f) {
    std::vector<int> cats;
    for (const auto& [c, fold] : partition) {
      if (fold == f) cats.push_back(c);
    }
    folds.push_back(Fold{f, cats, train.with_partition(partition).filter_categories(cats),
                         test.with_partition(partition).filter_categories(cats)});
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Synthetic task

namespace {

constexpr int kShapeFamilies = 8;

// Smooth value noise with three octaves, one independent field per channel.
class ValueNoise {
 public:
  ValueNoise(Rng& rng, int lattice) : lattice_(lattice), values_((lattice + 1) * (lattice + 1)) {
    for (double& v : values_) v = uniform(rng, -1.0, 1.0);
  }
  double at(double u, double v) const {  // u, v in [0, 1]
    const double gx = u * lattice_, gy = v * lattice_;
    const int x0 = std::min(static_cast<int>(gx), lattice_ - 1);
    const int y0 = std::min(static_cast<int>(gy), lattice_ - 1);
    const double tx = smooth(gx - x0), ty = smooth(gy - y0);
    const auto val = [&](int x, int y) { return values_[y * (lattice_ + 1) + x]; };
    const double top = val(x0, y0) * (1 - tx) + val(x0 + 1, y0) * tx;
    const double bot = val(x0, y0 + 1) * (1 - tx) + val(x0 + 1, y0 + 1) * tx;
    return top * (1 - ty) + bot * ty;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  int lattice_;
  std::vector<double> values_;
};

bool inside_shape(int family, double u, double v) {
  switch (family) {
    case 0:  // circle
      return u * u + v * v <= 1.0;
    case 1:  // square
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: {  // triangle
      const double ax = 0.0, ay = -1.0, bx = 0.87, by = 0.5, cx = -0.87, cy = 0.5;
      const auto edge = [](double px, double py, double qx, double qy, double x, double y) {
        return (qx - px) * (y - py) - (qy - py) * (x - px);
      };
      const double d1 = edge(ax, ay, bx, by, u, v);
      const double d2 = edge(bx, by, cx, cy, u, v);
      const double d3 = edge(cx, cy, ax, ay, u, v);
      return (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0);
    }
    case 3:  // cross
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 4: {  // ring
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 5:  // ellipse
      return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
    case 6:  // L-shape
      return (u >= -0.8 && u <= -0.2 && v >= -0.9 && v <= 0.9) ||
             (u >= -0.8 && u <= 0.8 && v >= 0.3 && v <= 0.9);
    default:  // bar
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.3;
  }
}

std::shared_ptr<Sample> make_shape_sample(Rng& rng, int category, int cell, const SynthOptions& opt,
                                          std::string id) {
  const int family = category % kShapeFamilies;
  auto s = std::make_shared<Sample>();
  s->id = std::move(id);
  s->category_id = category;

  // Background: base color plus three octaves of per-channel value noise.
  s->image = Image(3, cell, cell);
  const int base_lattice = std::max(2, static_cast<int>(std::lround(3 * opt.texture_scale)));
  for (int c = 0; c < 3; ++c) {
    const double base = uniform(rng, 0.25, 0.75);
    std::vector<ValueNoise> octaves;
    for (int o = 0; o < 3; ++o) octaves.emplace_back(rng, base_lattice << o);
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) {
        const double u = (x + 0.5) / cell, v = (y + 0.5) / cell;
        double n = 0.0, amp = 0.18 * opt.texture_contrast;
        for (const auto& oct : octaves) {
          n += amp * oct.at(u, v);
          amp *= 0.5;
        }
        s->image.at(c, y, x) = std::clamp(base + n, 0.0, 1.0);
      }
    }
  }

  // Shape: random color, scale, rotation and position; resampled until the
  // foreground covers between 5% and 60% of the cell.
  double color[3];
  for (;;) {
    double dist = 0.0;
    for (int c = 0; c < 3; ++c) {
      color[c] = uniform(rng, 0.0, 1.0);
      dist += std::abs(color[c] - 0.5);
    }
    if (dist > 0.45) break;
  }
  const double total = static_cast<double>(cell) * cell;
  for (;;) {
    const double radius = uniform(rng, 0.2, 0.42) * cell;
    const double angle = family == 0 || family == 4 ? 0.0 : uniform(rng, 0.0, 2 * M_PI);
    const double cx = uniform(rng, 0.3, 0.7) * cell, cy = uniform(rng, 0.3, 0.7) * cell;
    const double ca = std::cos(angle), sa = std::sin(angle);
    Mask m(cell, cell);
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) {
        const double dx = (x + 0.5 - cx) / radius, dy = (y + 0.5 - cy) / radius;
        m.at(y, x) = inside_shape(family, ca * dx + sa * dy, -sa * dx + ca * dy) ? 1 : 0;
      }
    }
    const double frac = static_cast<double>(m.count()) / total;
    if (frac >= 0.05 && frac <= 0.6) {
      s->mask = std::move(m);
      break;
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) {
        if (s->mask.at(y, x)) s->image.at(c, y, x) = std::clamp(color[c] + uniform(rng, -0.04, 0.04), 0.0, 1.0);
      }
    }
  }
  return s;
}

}  // namespace

SynthTask synth_task(uint64_t seed, int categories, int per_class, int cell, const SynthOptions& options) {
  if (categories < 2) throw UsageError("synthetic task needs at least 2 categories");
  if (per_class < 4) throw UsageError("synthetic task needs at least 4 samples per class");
  if (cell < 8) throw UsageError("cell size too small");
  const int test_per_class =
      options.test_per_class > 0 ? options.test_per_class : std::max(4, per_class * 2 / 5);
  std::vector<TaskDataset::SamplePtr> train, test;
  for (int c = 0; c < categories; ++c) {
    for (int i = 0; i < per_class + test_per_class; ++i) {
      const bool is_train = i < per_class;
      const int idx = is_train ? i : i - per_class;
      Rng rng = make_rng({seed, static_cast<uint64_t>(is_train ? 0 : 1), static_cast<uint64_t>(c),
                          static_cast<uint64_t>(idx)});
      char id[64];
      std::snprintf(id, sizeof id, "%s_c%02d_%04d", is_train ? "train" : "test", c, idx);
      auto s = make_shape_sample(rng, c, cell, options, id);
      (is_train ? train : test).push_back(std::move(s));
    }
  }
  return {TaskDataset(std::move(train), Split::train), TaskDataset(std::move(test), Split::test)};
}

TaskDataset subset_per_class(const TaskDataset& ds, int m, uint64_t seed) {
  if (m < 1) throw UsageError("per-class count must be at least 1");
  std::vector<char> keep(ds.size(), 0);
  for (int c : ds.categories()) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < ds.size(); ++i) {
      if (ds[i].category_id == c) idx.push_back(i);
    }
    Rng rng = make_rng({seed, static_cast<uint64_t>(c), 0x5c});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t j = 0; j < idx.size() && j < static_cast<size_t>(m); ++j) keep[idx[j]] = 1;
  }
  std::vector<TaskDataset::SamplePtr> out;
  for (size_t i = 0; i < ds.size(); ++i) {
    if (keep[i]) out.push_back(ds.samples()[i]);
  }
  return TaskDataset(std::move(out), ds.split(), ds.partition());
}

TaskDataset subset_fraction(const TaskDataset& ds, double p, uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0)) throw UsageError("fraction must be in (0, 1]");
  const size_t n = ds.size();
  const size_t target = std::min(n, static_cast<size_t>(std::ceil(p * n - 1e-9)));
  const auto cats = ds.categories();
  std::vector<std::vector<size_t>> members(cats.size());
  for (size_t i = 0; i < n; ++i) {
    const auto pos = std::lower_bound(cats.begin(), cats.end(), ds[i].category_id) - cats.begin();
    members[pos].push_back(i);
  }
  // Largest-remainder stratified allocation.
  std::vector<size_t> quota(cats.size());
  std::vector<std::pair<double, size_t>> remainders;
  size_t assigned = 0;
  for (size_t c = 0; c < cats.size(); ++c) {
    const double exact = static_cast<double>(target) * members[c].size() / n;
    quota[c] = static_cast<size_t>(std::floor(exact + 1e-9));
    assigned += quota[c];
    remainders.emplace_back(exact - quota[c], c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first + 1e-12; });
  for (size_t r = 0; assigned < target; r = (r + 1) % remainders.size()) {
    const size_t c = remainders[r].second;
    if (quota[c] < members[c].size()) {
      ++quota[c];
      ++assigned;
    }
  }
  std::vector<char> keep(n, 0);
  for (size_t c = 0; c < cats.size(); ++c) {
    Rng rng = make_rng({seed, static_cast<uint64_t>(cats[c]), 0xf7});
    auto idx = members[c];
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t j = 0; j < quota[c]; ++j) keep[idx[j]] = 1;
  }
  std::vector<TaskDataset::SamplePtr> out;
  for (size_t i = 0; i < n; ++i) {
    if (keep[i]) out.push_back(ds.samples()[i]);
  }
  return TaskDataset(std::move(out), ds.split(), ds.partition());
}

void write_dataset(const std::vector<const TaskDataset*>& parts, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  std::ofstream manifest(root / "manifest.tsv");
  if (!manifest) throw DataError("cannot write manifest under " + root.string());
  manifest << "# id\timage\tmask\tcategory_id\tsplit\n";
  for (const TaskDataset* ds : parts) {
    for (const auto& s : ds->samples()) {
      const std::string image_rel = "images/" + s->id + ".png";
      const std::string mask_rel = "masks/" + s->id + ".png";
      write_image(s->image, root / image_rel);
      write_mask(s->mask, root / mask_rel);
      manifest << s->id << '\t' << image_rel << '\t' << mask_rel << '\t' << s->category_id << '\t'
               << to_string(ds->split()) << '\n';
    }
  }
}

}  // namespace einmemo
