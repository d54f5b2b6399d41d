#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "einmemo/binary_io.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/retrieval.hpp"
#include "test_support.hpp"

using namespace einmemo;

namespace {

// Returns channel 0 as the feature vector, for exact control over retrieval.
class TableExtractor final : public FeatureExtractor {
 public:
  explicit TableExtractor(std::string name = "table") : name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::vector<double> extract(const Image& image) const override {
    return {image.data().begin(), image.data().begin() + image.width()};
  }

 private:
  std::string name_;
};

Image as_image(const std::vector<double>& v) {
  Image img(3, 1, static_cast<int>(v.size()));
  std::copy(v.begin(), v.end(), img.data().begin());
  return img;
}

TaskDataset vectors_as_dataset(const std::vector<std::vector<double>>& rows) {
  std::vector<TaskDataset::SamplePtr> samples;
  for (size_t i = 0; i < rows.size(); ++i) {
    auto s = std::make_shared<Sample>();
    s->id = "v" + std::to_string(i);
    s->image = as_image(rows[i]);
    s->mask = Mask(1, static_cast<int>(rows[i].size()));
    samples.push_back(s);
  }
  return TaskDataset(samples, Split::train);
}

}  // namespace

TEST(L2Normalize, Examples) {
  const auto v = l2_normalize(std::vector<double>{3.0, 4.0});
  EXPECT_DOUBLE_EQ(v[0], 0.6);
  EXPECT_DOUBLE_EQ(v[1], 0.8);
  const auto u = l2_normalize(std::vector<double>{0.0, 1.0, 0.0});
  EXPECT_EQ(u, (std::vector<double>{0.0, 1.0, 0.0}));
  EXPECT_THROW(l2_normalize(std::vector<double>{0.0, 0.0}), NumericalError);
}

TEST(Index, RowsAreUnitNormAndDeterministic) {
  const SynthTask t = synth_task(0, 2, 5, 111, SynthOptions{4});
  const PixelExtractor fx;
  const RetrievalIndex a = build_index(t.train, fx);
  const RetrievalIndex b = build_index(t.train, fx);
  ASSERT_EQ(a.size(), t.train.size());
  EXPECT_EQ(a.dim(), 3u * 16 * 16);
  EXPECT_EQ(a, b);
  for (size_t i = 0; i < a.size(); ++i) {
    double sq = 0.0;
    for (float v : a.row(i)) sq += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
}

TEST(Index, ZeroFeatureNamesSample) {
  const TaskDataset ds = vectors_as_dataset({{1.0, 0.0}, {0.0, 0.0}});
  try {
    build_index(ds, TableExtractor());
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("v1"), std::string::npos);
  }
}

TEST(Retrieve, SelfIsBest) {
  const SynthTask t = synth_task(4, 4, 5, 111, SynthOptions{4});
  const PixelExtractor fx;
  const RetrievalIndex index = build_index(t.train, fx);
  for (size_t i = 0; i < t.train.size(); ++i) EXPECT_EQ(retrieve(index, t.train[i].image, fx), t.train[i].id);
}

TEST(Retrieve, MatchesBruteForceOnHundredRandomSets) {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> size(2, 40), dim(1, 24);
  const TableExtractor fx;
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = size(rng), d = dim(rng);
    std::vector<std::vector<double>> feats(rows, std::vector<double>(d));
    for (auto& r : feats)
      for (double& v : r) v = n(rng);
    std::vector<double> q(d);
    for (double& v : q) v = n(rng);
    const RetrievalIndex index = build_index(vectors_as_dataset(feats), fx);
    // Oracle: cosine similarity on the same float32-rounded unit rows.
    const auto qn = l2_normalize(q);
    size_t best = 0;
    double best_score = -1e300;
    for (int i = 0; i < rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += static_cast<double>(index.row(i)[j]) * qn[j];
      if (s > best_score) best_score = s, best = i;
    }
    EXPECT_EQ(retrieve(index, as_image(q), fx), "v" + std::to_string(best)) << "trial " << trial;
  }
}

TEST(Retrieve, TiesGoToLowestPosition) {
  const TableExtractor fx;
  const RetrievalIndex index = build_index(vectors_as_dataset({{0.0, 1.0}, {1.0, 1.0}, {2.0, 2.0}}), fx);
  EXPECT_EQ(retrieve(index, as_image({5.0, 5.0}), fx), "v1");
  EXPECT_EQ(retrieve(index, as_image({5.0, 5.0}), fx, {"v1"}), "v2");
}

TEST(Retrieve, ExclusionAndErrors) {
  const TableExtractor fx;
  const RetrievalIndex index = build_index(vectors_as_dataset({{1.0, 0.0}, {0.5, 0.5}}), fx);
  const std::string first = retrieve(index, as_image({1.0, 0.1}), fx);
  EXPECT_NE(retrieve(index, as_image({1.0, 0.1}), fx, {first}), first);
  EXPECT_THROW(retrieve(index, as_image({1.0, 0.1}), fx, {"v0", "v1"}), DataError);
  EXPECT_THROW(retrieve(index, as_image({1.0, 0.1}), TableExtractor("other")), UsageError);
}

TEST(Retrieve, InvariantToPositiveScaling) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> feats(30, std::vector<double>(8));
  for (auto& r : feats)
    for (double& v : r) v = n(rng);
  const TableExtractor fx;
  const RetrievalIndex index = build_index(vectors_as_dataset(feats), fx);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> q(8);
    for (double& v : q) v = n(rng);
    std::vector<double> scaled = q;
    for (double& v : scaled) v *= 37.5;
    EXPECT_EQ(retrieve(index, as_image(q), fx), retrieve(index, as_image(scaled), fx));
  }
}

TEST(Index, SerializationRoundTripIsBitExact) {
  const auto dir = testkit::scratch_dir("index_rt");
  const SynthTask t = synth_task(5, 2, 4, 111, SynthOptions{4});
  const RetrievalIndex index = build_index(t.train, PixelExtractor());
  save_index(index, dir / "index.bin");
  const RetrievalIndex back = load_index(dir / "index.bin");
  EXPECT_EQ(back, index);
  EXPECT_EQ(back.serialize(), index.serialize());

  auto bytes = read_file_bytes(dir / "index.bin");
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(RetrievalIndex::deserialize(bytes), DataError);
  bytes[0] ^= 0xff;
  EXPECT_THROW(RetrievalIndex::deserialize(bytes), DataError);
}
