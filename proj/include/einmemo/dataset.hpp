#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "einmemo/image.hpp"

namespace einmemo {

// One input image with its binary label mask.
struct Sample {
  std::string id;
  Image image;  // 3 x H x W in [0, 1]
  Mask mask;    // H x W, {0, 1}
  int category_id = 0;
};

enum class Split { train, test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

// Immutable collection of samples. Samples are shared, so subsets are cheap.
class TaskDataset {
 public:
  using SamplePtr = std::shared_ptr<const Sample>;

  // Validates: non-empty, unique ids, image/mask shapes agree, binary masks,
  // every category present in the partition. An empty partition assigns fold 0
  // to every category.
  TaskDataset(std::vector<SamplePtr> samples, Split split, std::map<int, int> partition = {});

  size_t size() const { return samples_.size(); }
  const Sample& operator[](size_t i) const { return *samples_[i]; }
  const std::vector<SamplePtr>& samples() const { return samples_; }
  Split split() const { return split_; }
  const std::map<int, int>& partition() const { return partition_; }

  std::vector<int> categories() const;  // sorted, distinct
  std::optional<size_t> find(std::string_view id) const;

  // Same samples, filtered to the given categories (order preserved).
  TaskDataset filter_categories(const std::vector<int>& keep) const;
  TaskDataset with_partition(std::map<int, int> partition) const;

 private:
  std::vector<SamplePtr> samples_;
  Split split_;
  std::map<int, int> partition_;
};

// Detection boxes, half-open: pixels x_min <= x < x_max, y_min <= y < y_max.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;
};

Mask render_bbox_mask(const BBox& box, int height, int width);

// Manifest: one whitespace-separated record per line,
//   id  image_path  mask_path  category_id  split
// Paths are relative to the dataset root. A mask field of the form
// `bbox:x_min,y_min,x_max,y_max` (source-image pixels) renders a box mask.
// Blank lines and lines starting with '#' are skipped.
struct ManifestRecord {
  std::string id;
  std::string image_path;
  std::string mask_path;
  int category_id = 0;
  Split split = Split::train;
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& manifest);

// Loads the records of one split, resizing images (bilinear) and masks
// (nearest) to cell x cell.
TaskDataset load_pairs(const std::filesystem::path& root_dir, const std::filesystem::path& manifest,
                       Split split, int cell = 111);

struct Fold {
  int index = 0;
  std::vector<int> categories;
  TaskDataset train;
  TaskDataset test;
};

// Category-disjoint folds: sorted categories are cut into k equal contiguous
// groups; fold i keeps group i's samples from both splits.
std::map<int, int> assign_folds(const std::vector<int>& categories, int k);
std::vector<Fold> make_folds(const TaskDataset& train, const TaskDataset& test, int k);

struct SynthOptions {
  int test_per_class = -1;        // -1: 2/5 of per_class, at least 4
  double texture_contrast = 1.0;  // background noise amplitude multiplier
  double texture_scale = 1.0;     // background noise frequency multiplier
};

struct SynthTask {
  TaskDataset train;
  TaskDataset test;
};

// Colored shapes (category picks the shape family) on value-noise backgrounds.
SynthTask synth_task(uint64_t seed, int categories, int per_class, int cell,
                     const SynthOptions& options = {});

TaskDataset subset_per_class(const TaskDataset& ds, int m, uint64_t seed);
TaskDataset subset_fraction(const TaskDataset& ds, double p, uint64_t seed);

// Writes images/, masks/ and manifest.tsv under root in the load_pairs layout.
void write_dataset(const std::vector<const TaskDataset*>& parts, const std::filesystem::path& root);

}  // namespace einmemo
