#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "einmemo/dataset.hpp"
#include "einmemo/image.hpp"

namespace einmemo {

// Maps an image to a feature map of any shape, returned flattened.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> extract(const Image& image) const = 0;
};

// Area-downsampled pixels (3 x side x side).
class PixelExtractor final : public FeatureExtractor {
 public:
  explicit PixelExtractor(int side = 16) : side_(side) {}
  std::string name() const override { return "pixels-" + std::to_string(side_); }
  std::vector<double> extract(const Image& image) const override;

 private:
  int side_;
};

std::vector<double> l2_normalize(std::span<const double> v);

// Exhaustive inner-product index over unit-norm rows.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  // Rows are normalized here; `rows` holds ids.size() x dim values.
  RetrievalIndex(std::vector<std::string> ids, size_t dim, std::span<const double> rows,
                 std::string extractor_name);

  size_t size() const { return ids_.size(); }
  size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& extractor_name() const { return extractor_name_; }
  std::span<const float> row(size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  std::span<const float> vectors() const { return vectors_; }

  // Position maximizing the inner product with an already-normalized query;
  // ties go to the lowest position. Throws if everything is excluded.
  size_t best_position(std::span<const double> unit_query, const std::set<std::string>& exclude) const;

  std::vector<uint8_t> serialize() const;
  static RetrievalIndex deserialize(std::span<const uint8_t> bytes);

  friend bool operator==(const RetrievalIndex&, const RetrievalIndex&) = default;

 private:
  std::vector<std::string> ids_;
  size_t dim_ = 0;
  std::vector<float> vectors_;
  std::string extractor_name_;
};

RetrievalIndex build_index(const TaskDataset& ds, const FeatureExtractor& fx);

std::string retrieve(const RetrievalIndex& index, const Image& query_image, const FeatureExtractor& fx,
                     const std::set<std::string>& exclude = {});

void save_index(const RetrievalIndex& index, const std::filesystem::path& path);
RetrievalIndex load_index(const std::filesystem::path& path);

}  // namespace einmemo
