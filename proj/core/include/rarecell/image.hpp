#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace rarecell {

/// Three-channel float image in RGB order.
///
/// Raw patches hold intensities in [0, 1]; after normalization the values are
/// channel-standardized and may be any finite float.
class Image {
 public:
  Image() = default;

  // Throws FormatError unless `pixels` is a non-empty 3-channel matrix. 8-bit
  // input is rescaled to [0, 1].
  static Image from_mat(const cv::Mat& pixels);
  static Image filled(int side, float r, float g, float b);

  int width() const noexcept { return pixels_.cols; }
  int height() const noexcept { return pixels_.rows; }
  bool empty() const noexcept { return pixels_.empty(); }
  const cv::Mat& mat() const noexcept { return pixels_; }

  Image clone() const;

 private:
  explicit Image(cv::Mat m) : pixels_(std::move(m)) {}
  cv::Mat pixels_;  // CV_32FC3
};

// Reads a PNG/JPEG file as RGB. Missing or undecodable files throw FormatError.
Image load_image(const std::filesystem::path& path);
// Writes an image in [0, 1] (clamped) as 8-bit.
void save_image(const std::filesystem::path& path, const Image& image);

// Root-mean-square per-element difference; images must have equal shape.
double rms_difference(const Image& a, const Image& b);
bool bit_identical(const Image& a, const Image& b);

/// Indexed collection of patches addressed by instance id.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::size_t size() const = 0;
  virtual const std::string& id(std::size_t i) const = 0;
  virtual Image at(std::size_t i) const = 0;
};

class InMemoryImages final : public ImageSource {
 public:
  InMemoryImages() = default;
  InMemoryImages(std::vector<std::string> ids, std::vector<Image> images);

  void push_back(std::string id, Image image);
  std::size_t size() const override { return ids_.size(); }
  const std::string& id(std::size_t i) const override { return ids_.at(i); }
  Image at(std::size_t i) const override { return images_.at(i); }

 private:
  std::vector<std::string> ids_;
  std::vector<Image> images_;
};

// Decodes from disk on every access; nothing is cached.
class FileImages final : public ImageSource {
 public:
  FileImages(std::vector<std::string> ids, std::vector<std::filesystem::path> paths);

  std::size_t size() const override { return ids_.size(); }
  const std::string& id(std::size_t i) const override { return ids_.at(i); }
  Image at(std::size_t i) const override { return load_image(paths_.at(i)); }

 private:
  std::vector<std::string> ids_;
  std::vector<std::filesystem::path> paths_;
};

// Materializes a subset of another source (by index) into memory.
InMemoryImages gather(const ImageSource& source, const std::vector<std::size_t>& indices);

}  // namespace rarecell
