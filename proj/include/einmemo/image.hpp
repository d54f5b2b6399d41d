#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace einmemo {

// Pixel rectangle, half-open: rows [top, top + height), cols [left, left + width).
struct Rect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  int bottom() const { return top + height; }
  int right() const { return left + width; }
  bool contains(int row, int col) const {
    return row >= top && row < bottom() && col >= left && col < right();
  }
  bool intersects(const Rect& o) const {
    return top < o.bottom() && o.top < bottom() && left < o.right() && o.left < right();
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

// Channel-major float image (C x H x W), nominal range [0, 1].
class Image {
 public:
  Image() = default;
  Image(int channels, int height, int width, double fill = 0.0)
      : channels_(channels), height_(height), width_(width),
        data_(static_cast<size_t>(channels) * height * width, fill) {}

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  const double& at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Image& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  // Copies the rectangle out as a new image.
  Image crop(const Rect& r) const;
  // Writes `src` with its top-left corner at (top, left).
  void paste(const Image& src, int top, int left);

  friend bool operator==(const Image&, const Image&) = default;

 private:
  size_t index(int c, int y, int x) const {
    return (static_cast<size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

// Binary mask, values in {0, 1}.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, uint8_t fill = 0)
      : height_(height), width_(width), data_(static_cast<size_t>(height) * width, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  uint8_t& at(int y, int x) { return data_[static_cast<size_t>(y) * width_ + x]; }
  uint8_t at(int y, int x) const { return data_[static_cast<size_t>(y) * width_ + x]; }
  std::span<uint8_t> data() { return data_; }
  std::span<const uint8_t> data() const { return data_; }
  size_t count() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<uint8_t> data_;
};

// Label image used inside canvases: white foreground on black, 3 channels.
Image mask_to_label_image(const Mask& m);

Image resize_bilinear(const Image& img, int height, int width);
Mask resize_nearest(const Mask& m, int height, int width);

// File I/O. Images are stored as 8-bit RGB, masks as 8-bit grayscale with {0, 255}.
Image read_image(const std::filesystem::path& path);
// Accepts {0, 1} or {0, 255} encodings; anything else throws DataError.
Mask read_mask(const std::filesystem::path& path);
void write_image(const Image& img, const std::filesystem::path& path);
void write_mask(const Mask& m, const std::filesystem::path& path);

}  // namespace einmemo
