#include "einmemo/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "einmemo/errors.hpp"

namespace einmemo {

Image Image::crop(const Rect& r) const {
  if (r.top < 0 || r.left < 0 || r.bottom() > height_ || r.right() > width_) {
    throw UsageError("crop rectangle outside image");
  }
  Image out(channels_, r.height, r.width);
  for (int c = 0; c < channels_; ++c) {
    for (int y = 0; y < r.height; ++y) {
      const double* src = &data_[index(c, r.top + y, r.left)];
      std::copy(src, src + r.width, &out.at(c, y, 0));
    }
  }
  return out;
}

void Image::paste(const Image& src, int top, int left) {
  if (src.channels_ != channels_ || top < 0 || left < 0 || top + src.height_ > height_ ||
      left + src.width_ > width_) {
    throw UsageError("paste target outside image");
  }
  for (int c = 0; c < channels_; ++c) {
    for (int y = 0; y < src.height_; ++y) {
      const double* s = &src.data_[src.index(c, y, 0)];
      std::copy(s, s + src.width_, &data_[index(c, top + y, left)]);
    }
  }
}

size_t Mask::count() const {
  return static_cast<size_t>(std::count(data_.begin(), data_.end(), uint8_t{1}));
}

Image mask_to_label_image(const Mask& m) {
  Image out(3, m.height(), m.width());
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < m.height(); ++y) {
      for (int x = 0; x < m.width(); ++x) out.at(c, y, x) = m.at(y, x) ? 1.0 : 0.0;
    }
  }
  return out;
}

namespace {

cv::Mat to_mat(const Image& img) {
  cv::Mat mat(img.height(), img.width(), CV_64FC(img.channels()));
  for (int y = 0; y < img.height(); ++y) {
    auto* row = mat.ptr<double>(y);
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) row[x * img.channels() + c] = img.at(c, y, x);
    }
  }
  return mat;
}

Image from_mat(const cv::Mat& mat) {
  Image img(mat.channels(), mat.rows, mat.cols);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<double>(y);
    for (int x = 0; x < mat.cols; ++x) {
      for (int c = 0; c < mat.channels(); ++c) img.at(c, y, x) = row[x * mat.channels() + c];
    }
  }
  return img;
}

}  // namespace

Image resize_bilinear(const Image& img, int height, int width) {
  if (img.height() == height && img.width() == width) return img;
  if (img.channels() > 4) {
    // OpenCV resize handles at most 4 interleaved channels; go plane by plane.
    Image out(img.channels(), height, width);
    for (int c = 0; c < img.channels(); ++c) {
      Image plane = Image(1, img.height(), img.width());
      std::copy_n(img.data().begin() + static_cast<std::ptrdiff_t>(c * plane.size()), plane.size(), plane.data().begin());
      Image r = resize_bilinear(plane, height, width);
      std::copy(r.data().begin(), r.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(c * r.size()));
    }
    return out;
  }
  cv::Mat dst;
  cv::resize(to_mat(img), dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_mat(dst);
}

Mask resize_nearest(const Mask& m, int height, int width) {
  if (m.height() == height && m.width() == width) return m;
  cv::Mat src(m.height(), m.width(), CV_8UC1, const_cast<uint8_t*>(m.data().data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  Mask out(height, width);
  for (int y = 0; y < height; ++y) std::copy_n(dst.ptr<uint8_t>(y), width, &out.at(y, 0));
  return out;
}

Image read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image " + path.string());
  Image img(3, bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<uint8_t>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[x * 3 + (2 - c)] / 255.0;
    }
  }
  return img;
}

Mask read_mask(const std::filesystem::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw DataError("cannot read mask " + path.string());
  double max_value = 0.0;
  cv::minMaxLoc(gray, nullptr, &max_value);
  const uint8_t on = max_value > 1.0 ? 255 : 1;
  Mask m(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y) {
    const auto* row = gray.ptr<uint8_t>(y);
    for (int x = 0; x < gray.cols; ++x) {
      if (row[x] != 0 && row[x] != on) {
        throw DataError("non-binary mask " + path.string() + " (value " +
                        std::to_string(row[x]) + ")");
      }
      m.at(y, x) = row[x] == on ? 1 : 0;
    }
  }
  return m;
}

void write_image(const Image& img, const std::filesystem::path& path) {
  cv::Mat bgr(img.height(), img.width(), CV_8UC3);
  const int channels = img.channels();
  for (int y = 0; y < img.height(); ++y) {
    auto* row = bgr.ptr<uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = img.at(channels == 3 ? c : 0, y, x);
        row[x * 3 + (2 - c)] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write " + path.string());
}

void write_mask(const Mask& m, const std::filesystem::path& path) {
  cv::Mat gray(m.height(), m.width(), CV_8UC1);
  for (int y = 0; y < m.height(); ++y) {
    auto* row = gray.ptr<uint8_t>(y);
    for (int x = 0; x < m.width(); ++x) row[x] = m.at(y, x) ? 255 : 0;
  }
  if (!cv::imwrite(path.string(), gray)) throw DataError("cannot write " + path.string());
}

}  // namespace einmemo
