#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarecell/image.hpp"

namespace rarecell {

struct Normalization {
  // ImageNet statistics; replaced by pool statistics when estimated.
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

// Channel mean/std over up to `max_images` evenly spaced images of `source`.
Normalization estimate_normalization(const ImageSource& source, std::size_t max_images = 2000);

struct WeakParams {
  double rgb_shift = 20.0 / 255.0;  // per-channel additive shift limit
  double crop_scale_min = 0.7;      // random-resized-crop area fraction
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
};

enum class StrongTransform : int {
  center_crop_resize = 0,
  color_jitter = 1,
  grid_distortion = 2,
  elastic = 3,
};
inline constexpr int kStrongTransformCount = 4;

struct StrongParams {
  // CenterCrop(180) on a 192 px patch, expressed relative to the side.
  double crop_fraction = 180.0 / 192.0;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  // Jitter magnitudes are drawn from [jitter_floor * limit, limit].
  double jitter_floor = 0.5;
  int grid_steps = 5;
  double grid_limit = 0.3;
  double elastic_alpha = 40.0;
  double elastic_sigma = 6.0;
  std::vector<int> enabled{0, 1, 2, 3};
  // Minimum RMS change against t(x) expected on textured input.
  double min_change = 1e-2;
};

struct TtaParams {
  int n_views = 4;
  double rotation_degrees = 10.0;
};

struct AugmentationPolicy {
  int target_side = 224;
  Normalization normalization;
  WeakParams weak;
  StrongParams strong;
  TtaParams tta;
};

void to_json(nlohmann::json& j, const AugmentationPolicy& p);
void from_json(const nlohmann::json& j, AugmentationPolicy& p);

/// The augmentation regimes used by the training objectives.
///
/// Every operation returns a model-ready image: target_side square and
/// channel-normalized. Stochastic operations take an explicit seed and are
/// pure functions of (input, seed).
class Augmenter {
 public:
  explicit Augmenter(AugmentationPolicy policy);

  const AugmentationPolicy& policy() const noexcept { return policy_; }

  // a(x): channel shift + random resized crop, then t(.)
  Image apply_weak(const Image& x, std::uint64_t seed) const;
  // t(x): resize + normalize, no randomness.
  Image apply_deterministic(const Image& x) const;
  // D(x) for one member of the strong set, then t(.)
  Image apply_strong(const Image& x, int transform_id, std::uint64_t seed = 0) const;
  // Pseudo-abnormal view: weak raw augmentation, then D, then t(.)
  Image apply_pseudo_abnormal(const Image& x, int transform_id, std::uint64_t seed) const;
  // Draws one enabled strong transform id.
  int sample_strong(std::uint64_t seed) const;

  // V(x): [t(x), hflip, +rot, -rot] truncated to tta.n_views.
  std::vector<Image> tta_views(const Image& x) const;

  // Raw-domain building blocks (no resize / normalization).
  Image weak_raw(const Image& x, std::uint64_t seed) const;
  Image strong_raw(const Image& x, int transform_id, std::uint64_t seed) const;
  Image finalize(const Image& raw) const;

 private:
  AugmentationPolicy policy_;
};

Image horizontal_flip(const Image& x);
// Rotation about the center with reflected borders; output keeps the shape.
Image rotate(const Image& x, double degrees);
Image resize(const Image& x, int side);
Image center_crop(const Image& x, int side);

}  // namespace rarecell
