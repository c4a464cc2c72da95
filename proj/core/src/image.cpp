#include "rarecell/image.hpp"

#include <cmath>
#include <cstring>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "rarecell/errors.hpp"

namespace rarecell {

Image Image::from_mat(const cv::Mat& pixels) {
  if (pixels.empty()) throw FormatError("empty image");
  if (pixels.channels() != 3) {
    throw FormatError("expected a 3-channel RGB image, got " + std::to_string(pixels.channels()) + " channel(s)");
  }
  cv::Mat out;
  switch (pixels.depth()) {
    case CV_8U:
      pixels.convertTo(out, CV_32FC3, 1.0 / 255.0);
      break;
    case CV_16U:
      pixels.convertTo(out, CV_32FC3, 1.0 / 65535.0);
      break;
    case CV_32F:
      out = pixels.clone();
      break;
    case CV_64F:
      pixels.convertTo(out, CV_32FC3);
      break;
    default:
      throw FormatError("unsupported pixel depth");
  }
  return Image(std::move(out));
}

Image Image::filled(int side, float r, float g, float b) {
  if (side <= 0) throw ArgumentError("image side must be positive");
  return Image(cv::Mat(side, side, CV_32FC3, cv::Scalar(r, g, b)));
}

Image Image::clone() const { return Image(pixels_.clone()); }

Image load_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw FormatError("cannot read image: " + path.string());
  if (raw.channels() == 4) {
    cv::cvtColor(raw, raw, cv::COLOR_BGRA2BGR);
  } else if (raw.channels() != 3) {
    throw FormatError("not an RGB image: " + path.string());
  }
  cv::cvtColor(raw, raw, cv::COLOR_BGR2RGB);
  return Image::from_mat(raw);
}

void save_image(const std::filesystem::path& path, const Image& image) {
  if (image.empty()) throw FormatError("cannot save an empty image");
  cv::Mat bgr;
  cv::cvtColor(image.mat(), bgr, cv::COLOR_RGB2BGR);
  cv::Mat out;
  bgr.convertTo(out, CV_8UC3, 255.0);  // saturating cast clamps to [0, 255]
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) throw FormatError("cannot write image: " + path.string());
}

double rms_difference(const Image& a, const Image& b) {
  if (a.mat().size() != b.mat().size()) throw FormatError("image shapes differ");
  const double n = static_cast<double>(a.mat().total() * 3);
  const double l2 = cv::norm(a.mat(), b.mat(), cv::NORM_L2);
  return l2 / std::sqrt(n);
}

bool bit_identical(const Image& a, const Image& b) {
  if (a.mat().size() != b.mat().size() || a.mat().type() != b.mat().type()) return false;
  for (int r = 0; r < a.height(); ++r) {
    const auto* pa = a.mat().ptr<unsigned char>(r);
    const auto* pb = b.mat().ptr<unsigned char>(r);
    if (std::memcmp(pa, pb, a.mat().cols * a.mat().elemSize()) != 0) return false;
  }
  return true;
}

InMemoryImages::InMemoryImages(std::vector<std::string> ids, std::vector<Image> images)
    : ids_(std::move(ids)), images_(std::move(images)) {
  if (ids_.size() != images_.size()) throw ArgumentError("ids and images differ in length");
}

void InMemoryImages::push_back(std::string id, Image image) {
  ids_.push_back(std::move(id));
  images_.push_back(std::move(image));
}

FileImages::FileImages(std::vector<std::string> ids, std::vector<std::filesystem::path> paths)
    : ids_(std::move(ids)), paths_(std::move(paths)) {
  if (ids_.size() != paths_.size()) throw ArgumentError("ids and paths differ in length");
}

InMemoryImages gather(const ImageSource& source, const std::vector<std::size_t>& indices) {
  InMemoryImages out;
  for (auto i : indices) out.push_back(source.id(i), source.at(i));
  return out;
}

}  // namespace rarecell
