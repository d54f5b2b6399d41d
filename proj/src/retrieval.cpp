#include "einmemo/retrieval.hpp"

#include <cmath>
#include <unordered_set>

#include <opencv2/imgproc.hpp>

#include "einmemo/binary_io.hpp"
#include "einmemo/errors.hpp"

namespace einmemo {

std::vector<double> PixelExtractor::extract(const Image& image) const {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(image.channels()) * side_ * side_);
  for (int c = 0; c < image.channels(); ++c) {
    cv::Mat plane(image.height(), image.width(), CV_64FC1,
                  const_cast<double*>(&image.data()[static_cast<size_t>(c) * image.height() * image.width()]));
    cv::Mat small;
    cv::resize(plane, small, cv::Size(side_, side_), 0, 0, cv::INTER_AREA);
    for (int y = 0; y < side_; ++y) {
      const auto* row = small.ptr<double>(y);
      out.insert(out.end(), row, row + side_);
    }
  }
  return out;
}

std::vector<double> l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericalError("cannot normalize a zero or non-finite vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= norm;
  return out;
}

RetrievalIndex::RetrievalIndex(std::vector<std::string> ids, size_t dim, std::span<const double> rows,
                               std::string extractor_name)
    : ids_(std::move(ids)), dim_(dim), extractor_name_(std::move(extractor_name)) {
  if (dim_ == 0 || rows.size() != ids_.size() * dim_) throw UsageError("index rows do not match ids x dim");
  std::unordered_set<std::string> seen;
  for (const auto& id : ids_) {
    if (!seen.insert(id).second) throw DataError("duplicate id in index: " + id);
  }
  vectors_.resize(rows.size());
  for (size_t i = 0; i < ids_.size(); ++i) {
    std::vector<double> unit;
    try {
      unit = l2_normalize(rows.subspan(i * dim_, dim_));
    } catch (const NumericalError&) {
      throw NumericalError("features of sample " + ids_[i] + " have zero norm");
    }
    for (size_t j = 0; j < dim_; ++j) vectors_[i * dim_ + j] = static_cast<float>(unit[j]);
  }
}

size_t RetrievalIndex::best_position(std::span<const double> unit_query,
                                     const std::set<std::string>& exclude) const {
  if (unit_query.size() != dim_) throw UsageError("query feature dimension does not match index");
  size_t best = size();
  double best_score = 0.0;
  for (size_t i = 0; i < size(); ++i) {
    if (exclude.contains(ids_[i])) continue;
    double s = 0.0;
    const float* r = vectors_.data() + i * dim_;
    for (size_t j = 0; j < dim_; ++j) s += unit_query[j] * static_cast<double>(r[j]);
    if (best == size() || s > best_score) {
      best = i;
      best_score = s;
    }
  }
  if (best == size()) throw DataError("retrieval set is empty after exclusion");
  return best;
}

RetrievalIndex build_index(const TaskDataset& ds, const FeatureExtractor& fx) {
  std::vector<std::string> ids;
  std::vector<double> rows;
  size_t dim = 0;
  for (const auto& s : ds.samples()) {
    std::vector<double> f;
    try {
      f = fx.extract(s->image);
    } catch (const std::exception& e) {
      throw DataError("feature extraction failed for " + s->id + ": " + e.what());
    }
    if (dim == 0) dim = f.size();
    if (f.size() != dim || dim == 0) throw DataError("inconsistent feature size for " + s->id);
    ids.push_back(s->id);
    rows.insert(rows.end(), f.begin(), f.end());
  }
  return RetrievalIndex(std::move(ids), dim, rows, fx.name());
}

std::string retrieve(const RetrievalIndex& index, const Image& query_image, const FeatureExtractor& fx,
                     const std::set<std::string>& exclude) {
  if (fx.name() != index.extractor_name()) {
    throw UsageError("extractor '" + fx.name() + "' does not match index built with '" +
                     index.extractor_name() + "'");
  }
  const auto q = l2_normalize(fx.extract(query_image));
  return index.ids()[index.best_position(q, exclude)];
}

// Layout: "EIMX" u32 version | name | u64 n | u64 d | f32[n*d] | n ids.
namespace {
constexpr uint32_t kIndexMagic = 0x584d4945;
constexpr uint32_t kIndexVersion = 1;
}  // namespace

std::vector<uint8_t> RetrievalIndex::serialize() const {
  ByteWriter w;
  w.put(kIndexMagic);
  w.put(kIndexVersion);
  w.put_string(extractor_name_);
  w.put<uint64_t>(ids_.size());
  w.put<uint64_t>(dim_);
  w.put_array<float>(vectors_);
  for (const auto& id : ids_) w.put_string(id);
  return w.bytes();
}

RetrievalIndex RetrievalIndex::deserialize(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get<uint32_t>() != kIndexMagic) throw DataError("not a retrieval index file");
  if (r.get<uint32_t>() != kIndexVersion) throw DataError("unsupported index version");
  RetrievalIndex idx;
  idx.extractor_name_ = r.get_string();
  const auto n = r.get<uint64_t>();
  const auto d = r.get<uint64_t>();
  if (n == 0 || d == 0 || n * d * sizeof(float) > r.remaining()) throw DataError("corrupt index header");
  idx.dim_ = d;
  idx.vectors_.resize(n * d);
  r.get_array<float>(idx.vectors_);
  for (uint64_t i = 0; i < n; ++i) idx.ids_.push_back(r.get_string());
  if (r.remaining() != 0) throw DataError("trailing bytes in index file");
  return idx;
}

void save_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  write_file_bytes(path, index.serialize());
}

RetrievalIndex load_index(const std::filesystem::path& path) {
  return RetrievalIndex::deserialize(read_file_bytes(path));
}

}  // namespace einmemo
