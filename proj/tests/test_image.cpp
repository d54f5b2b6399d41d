#include <gtest/gtest.h>

#include <opencv2/imgcodecs.hpp>

#include "einmemo/errors.hpp"
#include "einmemo/image.hpp"
#include "test_support.hpp"

using namespace einmemo;

TEST(Rect, HalfOpenContainment) {
  const Rect r{2, 3, 4, 5};
  EXPECT_EQ(r.bottom(), 6);
  EXPECT_EQ(r.right(), 8);
  EXPECT_TRUE(r.contains(2, 3));
  EXPECT_TRUE(r.contains(5, 7));
  EXPECT_FALSE(r.contains(6, 7));
  EXPECT_FALSE(r.contains(5, 8));
  EXPECT_TRUE(r.intersects(Rect{5, 7, 1, 1}));
  EXPECT_FALSE(r.intersects(Rect{6, 0, 3, 20}));
}

TEST(Image, CropPasteRoundTrip) {
  std::mt19937_64 rng(1);
  const Image src = testkit::random_image(rng, 3, 10, 12);
  Image canvas(3, 20, 20, 0.25);
  canvas.paste(src, 4, 5);
  EXPECT_EQ(canvas.crop(Rect{4, 5, 10, 12}), src);
  EXPECT_EQ(canvas.at(0, 3, 5), 0.25);
  EXPECT_THROW(canvas.paste(src, 15, 15), UsageError);
}

TEST(Image, MaskToLabelImage) {
  Mask m(2, 2);
  m.at(0, 1) = 1;
  const Image label = mask_to_label_image(m);
  ASSERT_EQ(label.channels(), 3);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(label.at(c, 0, 1), 1.0);
    EXPECT_EQ(label.at(c, 0, 0), 0.0);
  }
}

TEST(Image, ResizeShapes) {
  std::mt19937_64 rng(2);
  const Image img = testkit::random_image(rng, 3, 375, 500);
  const Image out = resize_bilinear(img, 111, 111);
  EXPECT_EQ(out.channels(), 3);
  EXPECT_EQ(out.height(), 111);
  EXPECT_EQ(out.width(), 111);
  const Mask m = testkit::random_mask(rng, 375, 500);
  const Mask r = resize_nearest(m, 111, 111);
  EXPECT_EQ(r.height(), 111);
  for (uint8_t v : r.data()) EXPECT_TRUE(v == 0 || v == 1);
}

TEST(Image, ResizeManyChannelsMatchesPerPlane) {
  std::mt19937_64 rng(3);
  const Image img = testkit::random_image(rng, 6, 20, 30);
  const Image out = resize_bilinear(img, 10, 15);
  for (int c = 0; c < 6; ++c) {
    Image plane(1, 20, 30);
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 30; ++x) plane.at(0, y, x) = img.at(c, y, x);
    const Image r = resize_bilinear(plane, 10, 15);
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 15; ++x) EXPECT_DOUBLE_EQ(out.at(c, y, x), r.at(0, y, x));
  }
}

TEST(Image, FileRoundTrip) {
  const auto dir = testkit::scratch_dir("image_io");
  std::mt19937_64 rng(4);
  Image img = testkit::random_image(rng, 3, 9, 7);
  for (double& v : img.data()) v = std::round(v * 255.0) / 255.0;
  write_image(img, dir / "a.png");
  const Image back = read_image(dir / "a.png");
  ASSERT_TRUE(back.same_shape(img));
  for (size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.data()[i], img.data()[i], 1e-12);

  const Mask m = testkit::random_mask(rng, 9, 7);
  write_mask(m, dir / "m.png");
  EXPECT_EQ(read_mask(dir / "m.png"), m);
}

TEST(Image, ReadMaskAcceptsZeroOneEncoding) {
  const auto dir = testkit::scratch_dir("mask01");
  cv::Mat raw(3, 3, CV_8UC1, cv::Scalar(0));
  raw.at<uint8_t>(1, 1) = 1;
  cv::imwrite((dir / "m.png").string(), raw);
  const Mask m = read_mask(dir / "m.png");
  EXPECT_EQ(m.count(), 1u);
  EXPECT_EQ(m.at(1, 1), 1);
}

TEST(Image, NonBinaryMaskIsDataError) {
  const auto dir = testkit::scratch_dir("mask_bad");
  cv::Mat raw(3, 3, CV_8UC1, cv::Scalar(0));
  raw.at<uint8_t>(0, 0) = 128;
  cv::imwrite((dir / "m.png").string(), raw);
  EXPECT_THROW(read_mask(dir / "m.png"), DataError);
}

TEST(Image, MissingFileIsDataError) {
  EXPECT_THROW(read_image("/nonexistent/einmemo.png"), DataError);
  EXPECT_THROW(read_mask("/nonexistent/einmemo.png"), DataError);
}
