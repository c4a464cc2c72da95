#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "rarecell/augment.hpp"
#include "rarecell/image.hpp"
#include "rarecell/random.hpp"
#include "rarecell/synthetic.hpp"

namespace support {

inline constexpr int kSide = 32;

inline rarecell::AugmentationPolicy small_policy(int side = kSide) {
  rarecell::AugmentationPolicy p;
  p.target_side = side;
  return p;
}

// n synthetic patches; abnormal ones alternate ring / striped texture.
inline rarecell::InMemoryImages cells(const std::string& prefix, int n, bool abnormal, std::uint64_t seed,
                                      int side = kSide) {
  rarecell::InMemoryImages out;
  for (int i = 0; i < n; ++i) {
    const auto s = rarecell::derive_seed(seed, {static_cast<std::uint64_t>(i)});
    char id[64];
    std::snprintf(id, sizeof id, "%s_%06d", prefix.c_str(), i);
    out.push_back(id, abnormal ? rarecell::synthetic::abnormal_cell(side, (s & ~1ULL) | (i & 1))
                               : rarecell::synthetic::blob_cell(side, s));
  }
  return out;
}

inline void append(rarecell::InMemoryImages& to, const rarecell::ImageSource& from) {
  for (std::size_t i = 0; i < from.size(); ++i) to.push_back(from.id(i), from.at(i));
}

inline rarecell::Image noise_image(int side, std::uint64_t seed) {
  rarecell::Rng rng(seed);
  cv::Mat m(side, side, CV_32FC3);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      m.at<cv::Vec3f>(y, x) = cv::Vec3f(static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                                        static_cast<float>(rng.uniform()));
    }
  }
  return rarecell::Image::from_mat(m);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("rarecell_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace support
