#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "einmemo/errors.hpp"
#include "einmemo/evaluation.hpp"
#include "test_support.hpp"

using namespace einmemo;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Binarize, ChannelMeanThreshold) {
  Image img(3, 1, 4);
  const double px[4][3] = {{0.5, 0.5, 0.5}, {0.49, 0.5, 0.5}, {1.0, 0.5, 0.0}, {1.0, 0.0, 0.0}};
  for (int x = 0; x < 4; ++x)
    for (int c = 0; c < 3; ++c) img.at(c, 0, x) = px[x][c];
  const Mask m = binarize(img);
  EXPECT_EQ(m.at(0, 0), 1);
  EXPECT_EQ(m.at(0, 1), 0);
  EXPECT_EQ(m.at(0, 2), 1);
  EXPECT_EQ(m.at(0, 3), 0);
}

TEST(Iou, Examples) {
  Mask full(4, 4), left(4, 4), empty(4, 4), right(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      full.at(y, x) = 1;
      left.at(y, x) = x < 2;
      right.at(y, x) = x >= 2;
    }
  EXPECT_DOUBLE_EQ(iou(left, full), 0.5);
  EXPECT_DOUBLE_EQ(iou(full, full), 1.0);
  EXPECT_DOUBLE_EQ(iou(left, right), 0.0);
  EXPECT_DOUBLE_EQ(iou(empty, empty), 1.0);
  EXPECT_DOUBLE_EQ(iou(empty, full), 0.0);
  EXPECT_THROW(iou(full, Mask(3, 4)), UsageError);
}

TEST(Iou, MatchesPixelCounting) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    const Mask a = testkit::random_mask(rng, 17, 23, u(rng));
    const Mask b = testkit::random_mask(rng, 17, 23, u(rng));
    int inter = 0, uni = 0;
    for (int y = 0; y < 17; ++y)
      for (int x = 0; x < 23; ++x) {
        inter += a.at(y, x) && b.at(y, x);
        uni += a.at(y, x) || b.at(y, x);
      }
    const double expected = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    EXPECT_NEAR(iou(a, b), expected, 1e-15);
    EXPECT_NEAR(iou(a, b), iou(b, a), 1e-15);
  }
}

TEST(Aggregate, ThreeImageFixture) {
  // Categories 1 and 2 in fold 0, category 3 in fold 1.
  const std::vector<QueryResult> results = {
      {"c", "p", 3, 0.9}, {"a", "p", 1, 0.2}, {"b", "p", 1, 0.6}, {"d", "p", 2, 0.1}};
  const std::map<int, int> partition = {{1, 0}, {2, 0}, {3, 1}};
  const EvalReport r = aggregate("fixture", results, partition);
  EXPECT_EQ(r.queries.front().query_id, "a");
  EXPECT_EQ(r.queries.back().query_id, "d");
  EXPECT_NEAR(r.per_category.at(1), 40.0, 1e-12);
  EXPECT_NEAR(r.per_category.at(2), 10.0, 1e-12);
  EXPECT_NEAR(r.per_category.at(3), 90.0, 1e-12);
  EXPECT_NEAR(r.per_fold.at(0), 25.0, 1e-12);
  EXPECT_NEAR(r.per_fold.at(1), 90.0, 1e-12);
  EXPECT_NEAR(r.mean, 57.5, 1e-12);
  EXPECT_THROW(aggregate("empty", {}, partition), DataError);
}

TEST(Aggregate, MeanIsMeanOfFolds) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<QueryResult> results;
  std::map<int, int> partition;
  for (int c = 0; c < 8; ++c) {
    partition[c] = c / 2;
    for (int i = 0; i < 5; ++i) results.push_back({"q" + std::to_string(c * 5 + i), "p", c, u(rng)});
  }
  const EvalReport r = aggregate("x", results, partition);
  ASSERT_EQ(r.per_fold.size(), 4u);
  double s = 0.0;
  for (const auto& [f, v] : r.per_fold) s += v;
  EXPECT_NEAR(r.mean, s / 4.0, 1e-12);
}

TEST(Delta, ReportedExamples) {
  EXPECT_NEAR(mean_delta(43.91, 35.92).absolute, 7.99, 1e-9);
  EXPECT_NEAR(mean_delta(44.22, 27.18).absolute, 17.04, 1e-9);
  EXPECT_NEAR(mean_delta(30.0, 40.0).relative, -0.25, 1e-15);
}

TEST(ReportCsv, WritesAllTables) {
  const auto dir = testkit::scratch_dir("report_csv");
  EvalReport r = aggregate("baseline", {{"a", "p1", 1, 0.5}, {"b", "p2", 2, 0.25}}, {{1, 0}, {2, 1}});
  r.metadata["model_digest"] = "abc";
  write_report_csv(r, dir);
  EXPECT_EQ(slurp(dir / "queries.csv"), "query_id,pair_id,category_id,iou\na,p1,1,0.5\nb,p2,2,0.25\n");
  EXPECT_EQ(slurp(dir / "folds.csv"), "fold,miou\n0,50\n1,25\nmean,37.5\n");
  EXPECT_NE(slurp(dir / "metadata.csv").find("model_digest,abc"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "categories.csv"));

  const auto png = dir / "bars.png";
  plot_fold_bars({&r}, png);
  EXPECT_GT(std::filesystem::file_size(png), 0u);
}
