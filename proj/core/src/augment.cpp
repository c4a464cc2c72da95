#include "rarecell/augment.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "rarecell/errors.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

namespace {

cv::Mat clamp01(cv::Mat m) {
  cv::min(m, 1.0, m);
  cv::max(m, 0.0, m);
  return m;
}

cv::Mat normalize(const cv::Mat& raw, const Normalization& n) {
  std::vector<cv::Mat> ch;
  cv::split(raw, ch);
  for (int c = 0; c < 3; ++c) {
    ch[c].convertTo(ch[c], CV_32F, 1.0 / n.std[c], -n.mean[c] / n.std[c]);
  }
  cv::Mat out;
  cv::merge(ch, out);
  return out;
}

// Random-resized-crop window (torchvision semantics, 10 attempts then full frame).
cv::Rect crop_window(int h, int w, const WeakParams& p, Rng& rng) {
  const double area = static_cast<double>(h) * w;
  const double log_lo = std::log(p.crop_ratio_min);
  const double log_hi = std::log(p.crop_ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(p.crop_scale_min, p.crop_scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int cw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int chh = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (cw > 0 && chh > 0 && cw <= w && chh <= h) {
      const int x0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(w - cw + 1)));
      const int y0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(h - chh + 1)));
      return {x0, y0, cw, chh};
    }
  }
  return {0, 0, w, h};
}

// Signed jitter magnitude in [floor * limit, limit].
double signed_magnitude(double limit, double floor, Rng& rng) {
  const double mag = rng.uniform(floor * limit, limit);
  return rng.uniform() < 0.5 ? -mag : mag;
}

cv::Mat color_jitter(const cv::Mat& src, const StrongParams& p, Rng& rng) {
  cv::Mat m = src.clone();
  const double b = 1.0 + signed_magnitude(p.brightness, p.jitter_floor, rng);
  const double c = 1.0 + signed_magnitude(p.contrast, p.jitter_floor, rng);
  const double s = 1.0 + signed_magnitude(p.saturation, p.jitter_floor, rng);
  const double h = signed_magnitude(p.hue, p.jitter_floor, rng);

  m = clamp01(m * b);

  cv::Mat gray;
  cv::cvtColor(m, gray, cv::COLOR_RGB2GRAY);
  const double mean = cv::mean(gray)[0];
  m = clamp01((m - cv::Scalar::all(mean)) * c + cv::Scalar::all(mean));

  cv::cvtColor(m, gray, cv::COLOR_RGB2GRAY);
  cv::Mat gray3;
  cv::cvtColor(gray, gray3, cv::COLOR_GRAY2RGB);
  m = clamp01(gray3 + (m - gray3) * s);

  cv::Mat hsv;
  cv::cvtColor(m, hsv, cv::COLOR_RGB2HSV);  // H in [0, 360) for float input
  std::vector<cv::Mat> ch;
  cv::split(hsv, ch);
  ch[0] += h * 360.0;
  for (int r = 0; r < ch[0].rows; ++r) {
    auto* row = ch[0].ptr<float>(r);
    for (int col = 0; col < ch[0].cols; ++col) {
      row[col] = std::fmod(row[col] + 720.0f, 360.0f);
    }
  }
  cv::merge(ch, hsv);
  cv::cvtColor(hsv, m, cv::COLOR_HSV2RGB);
  return clamp01(m);
}

// Piecewise-linear resampling of each axis over `steps` cells with random
// per-cell stretch in [1 - limit, 1 + limit].
std::vector<float> distorted_axis(int n, int steps, double limit, Rng& rng) {
  std::vector<float> coords(static_cast<std::size_t>(n));
  const double step = static_cast<double>(n) / steps;
  double prev = 0.0;
  for (int i = 0; i < steps; ++i) {
    const int x0 = static_cast<int>(std::lround(i * step));
    const int x1 = i == steps - 1 ? n : static_cast<int>(std::lround((i + 1) * step));
    const double cur = prev + (x1 - x0) * (1.0 + rng.uniform(-limit, limit));
    const int len = x1 - x0;
    for (int k = 0; k < len; ++k) {
      coords[static_cast<std::size_t>(x0 + k)] = static_cast<float>(prev + (cur - prev) * k / len);
    }
    prev = cur;
  }
  return coords;
}

cv::Mat grid_distortion(const cv::Mat& src, const StrongParams& p, Rng& rng) {
  const auto xs = distorted_axis(src.cols, p.grid_steps, p.grid_limit, rng);
  const auto ys = distorted_axis(src.rows, p.grid_steps, p.grid_limit, rng);
  cv::Mat map_x(src.size(), CV_32F), map_y(src.size(), CV_32F);
  for (int r = 0; r < src.rows; ++r) {
    auto* mx = map_x.ptr<float>(r);
    auto* my = map_y.ptr<float>(r);
    for (int c = 0; c < src.cols; ++c) {
      mx[c] = xs[static_cast<std::size_t>(c)];
      my[c] = ys[static_cast<std::size_t>(r)];
    }
  }
  cv::Mat out;
  cv::remap(src, out, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  return out;
}

cv::Mat elastic(const cv::Mat& src, const StrongParams& p, Rng& rng) {
  cv::Mat dx(src.size(), CV_32F), dy(src.size(), CV_32F);
  for (int r = 0; r < src.rows; ++r) {
    auto* px = dx.ptr<float>(r);
    auto* py = dy.ptr<float>(r);
    for (int c = 0; c < src.cols; ++c) {
      px[c] = static_cast<float>(rng.uniform(-1.0, 1.0));
      py[c] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
  }
  cv::GaussianBlur(dx, dx, cv::Size(0, 0), p.elastic_sigma, p.elastic_sigma, cv::BORDER_REFLECT_101);
  cv::GaussianBlur(dy, dy, cv::Size(0, 0), p.elastic_sigma, p.elastic_sigma, cv::BORDER_REFLECT_101);
  cv::Mat map_x(src.size(), CV_32F), map_y(src.size(), CV_32F);
  for (int r = 0; r < src.rows; ++r) {
    auto* mx = map_x.ptr<float>(r);
    auto* my = map_y.ptr<float>(r);
    const auto* px = dx.ptr<float>(r);
    const auto* py = dy.ptr<float>(r);
    for (int c = 0; c < src.cols; ++c) {
      mx[c] = static_cast<float>(c + p.elastic_alpha * px[c]);
      my[c] = static_cast<float>(r + p.elastic_alpha * py[c]);
    }
  }
  cv::Mat out;
  cv::remap(src, out, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  return out;
}

}  // namespace

Normalization estimate_normalization(const ImageSource& source, std::size_t max_images) {
  if (source.size() == 0) return {};
  const std::size_t n = std::min(max_images, source.size());
  const double stride = static_cast<double>(source.size()) / n;
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto img = source.at(static_cast<std::size_t>(k * stride));
    cv::Scalar mean, stddev;
    cv::meanStdDev(img.mat(), mean, stddev);
    const double px = static_cast<double>(img.mat().total());
    for (int c = 0; c < 3; ++c) {
      sum[c] += mean[c] * px;
      sq[c] += (stddev[c] * stddev[c] + mean[c] * mean[c]) * px;
    }
    count += px;
  }
  Normalization out;
  for (int c = 0; c < 3; ++c) {
    const double mu = sum[c] / count;
    const double var = std::max(sq[c] / count - mu * mu, 0.0);
    out.mean[c] = static_cast<float>(mu);
    out.std[c] = static_cast<float>(std::max(std::sqrt(var), 1e-3));
  }
  return out;
}

Image horizontal_flip(const Image& x) {
  cv::Mat out;
  cv::flip(x.mat(), out, 1);
  return Image::from_mat(out);
}

Image rotate(const Image& x, double degrees) {
  const cv::Point2f center(static_cast<float>(x.width() - 1) / 2.0f, static_cast<float>(x.height() - 1) / 2.0f);
  const cv::Mat rot = cv::getRotationMatrix2D(center, degrees, 1.0);
  cv::Mat out;
  cv::warpAffine(x.mat(), out, rot, x.mat().size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  return Image::from_mat(out);
}

Image resize(const Image& x, int side) {
  if (side <= 0) throw ArgumentError("target side must be positive");
  if (x.width() == side && x.height() == side) return x.clone();
  cv::Mat out;
  const bool shrinking = x.width() > side && x.height() > side;
  cv::resize(x.mat(), out, cv::Size(side, side), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  return Image::from_mat(out);
}

Image center_crop(const Image& x, int side) {
  if (side <= 0 || side > x.width() || side > x.height()) throw ArgumentError("crop side out of range");
  const int x0 = (x.width() - side) / 2;
  const int y0 = (x.height() - side) / 2;
  return Image::from_mat(x.mat()(cv::Rect(x0, y0, side, side)).clone());
}

Augmenter::Augmenter(AugmentationPolicy policy) : policy_(std::move(policy)) {
  if (policy_.target_side <= 0) throw ArgumentError("target_side must be positive");
  if (policy_.tta.n_views < 1 || policy_.tta.n_views > 4) throw ArgumentError("tta.n_views must be in [1, 4]");
  if (policy_.strong.enabled.empty()) throw ArgumentError("strong transform set is empty");
  for (int id : policy_.strong.enabled) {
    if (id < 0 || id >= kStrongTransformCount) throw ArgumentError("unknown strong transform id " + std::to_string(id));
  }
  for (float s : policy_.normalization.std) {
    if (!(s > 0.0f)) throw ArgumentError("normalization std must be positive");
  }
}

Image Augmenter::finalize(const Image& raw) const {
  const Image sized = resize(raw, policy_.target_side);
  return Image::from_mat(normalize(sized.mat(), policy_.normalization));
}

Image Augmenter::apply_deterministic(const Image& x) const { return finalize(x); }

Image Augmenter::weak_raw(const Image& x, std::uint64_t seed) const {
  Rng rng(derive_seed(seed, {0x7765616b}));
  const auto& p = policy_.weak;
  cv::Mat m = x.mat().clone();
  if (p.rgb_shift > 0.0) {
    const cv::Scalar shift(rng.uniform(-p.rgb_shift, p.rgb_shift), rng.uniform(-p.rgb_shift, p.rgb_shift),
                           rng.uniform(-p.rgb_shift, p.rgb_shift));
    m = clamp01(m + shift);
  }
  const cv::Rect win = crop_window(m.rows, m.cols, p, rng);
  cv::Mat out;
  cv::resize(m(win), out, cv::Size(policy_.target_side, policy_.target_side), 0, 0, cv::INTER_LINEAR);
  return Image::from_mat(out);
}

Image Augmenter::apply_weak(const Image& x, std::uint64_t seed) const { return finalize(weak_raw(x, seed)); }

Image Augmenter::strong_raw(const Image& x, int transform_id, std::uint64_t seed) const {
  if (transform_id < 0 || transform_id >= kStrongTransformCount) {
    throw ArgumentError("unknown strong transform id " + std::to_string(transform_id));
  }
  Rng rng(derive_seed(seed, {0x7374726f6e67, static_cast<std::uint64_t>(transform_id)}));
  const auto& p = policy_.strong;
  switch (static_cast<StrongTransform>(transform_id)) {
    case StrongTransform::center_crop_resize: {
      const int side = std::min(x.width(), x.height());
      const int crop = std::max(1, static_cast<int>(std::lround(p.crop_fraction * side)));
      const Image cropped = center_crop(x, crop);
      cv::Mat out;
      cv::resize(cropped.mat(), out, x.mat().size(), 0, 0, cv::INTER_LINEAR);
      return Image::from_mat(out);
    }
    case StrongTransform::color_jitter:
      return Image::from_mat(color_jitter(x.mat(), p, rng));
    case StrongTransform::grid_distortion:
      return Image::from_mat(grid_distortion(x.mat(), p, rng));
    case StrongTransform::elastic:
      return Image::from_mat(elastic(x.mat(), p, rng));
  }
  throw ArgumentError("unknown strong transform id");
}

Image Augmenter::apply_strong(const Image& x, int transform_id, std::uint64_t seed) const {
  return finalize(strong_raw(x, transform_id, seed));
}

Image Augmenter::apply_pseudo_abnormal(const Image& x, int transform_id, std::uint64_t seed) const {
  return finalize(strong_raw(weak_raw(x, seed), transform_id, seed));
}

int Augmenter::sample_strong(std::uint64_t seed) const {
  Rng rng(derive_seed(seed, {0x7069636b}));
  const auto& enabled = policy_.strong.enabled;
  return enabled[rng.uniform_index(enabled.size())];
}

std::vector<Image> Augmenter::tta_views(const Image& x) const {
  const Image base = apply_deterministic(x);
  std::vector<Image> views{base};
  const int n = policy_.tta.n_views;
  if (n > 1) views.push_back(horizontal_flip(base));
  if (n > 2) views.push_back(rotate(base, policy_.tta.rotation_degrees));
  if (n > 3) views.push_back(rotate(base, -policy_.tta.rotation_degrees));
  return views;
}

void to_json(nlohmann::json& j, const AugmentationPolicy& p) {
  j = nlohmann::json{
      {"target_side", p.target_side},
      {"normalization", {{"mean", p.normalization.mean}, {"std", p.normalization.std}}},
      {"weak",
       {{"rgb_shift", p.weak.rgb_shift},
        {"crop_scale", {p.weak.crop_scale_min, p.weak.crop_scale_max}},
        {"crop_ratio", {p.weak.crop_ratio_min, p.weak.crop_ratio_max}}}},
      {"strong",
       {{"crop_fraction", p.strong.crop_fraction},
        {"brightness", p.strong.brightness},
        {"contrast", p.strong.contrast},
        {"saturation", p.strong.saturation},
        {"hue", p.strong.hue},
        {"jitter_floor", p.strong.jitter_floor},
        {"grid_steps", p.strong.grid_steps},
        {"grid_limit", p.strong.grid_limit},
        {"elastic_alpha", p.strong.elastic_alpha},
        {"elastic_sigma", p.strong.elastic_sigma},
        {"enabled", p.strong.enabled},
        {"min_change", p.strong.min_change}}},
      {"tta", {{"n_views", p.tta.n_views}, {"rotation_degrees", p.tta.rotation_degrees}}},
  };
}

void from_json(const nlohmann::json& j, AugmentationPolicy& p) {
  p = AugmentationPolicy{};
  p.target_side = j.value("target_side", p.target_side);
  if (auto n = j.find("normalization"); n != j.end()) {
    p.normalization.mean = n->value("mean", p.normalization.mean);
    p.normalization.std = n->value("std", p.normalization.std);
  }
  if (auto w = j.find("weak"); w != j.end()) {
    p.weak.rgb_shift = w->value("rgb_shift", p.weak.rgb_shift);
    if (auto s = w->find("crop_scale"); s != w->end()) {
      p.weak.crop_scale_min = s->at(0).get<double>();
      p.weak.crop_scale_max = s->at(1).get<double>();
    }
    if (auto r = w->find("crop_ratio"); r != w->end()) {
      p.weak.crop_ratio_min = r->at(0).get<double>();
      p.weak.crop_ratio_max = r->at(1).get<double>();
    }
  }
  if (auto s = j.find("strong"); s != j.end()) {
    auto& q = p.strong;
    q.crop_fraction = s->value("crop_fraction", q.crop_fraction);
    q.brightness = s->value("brightness", q.brightness);
    q.contrast = s->value("contrast", q.contrast);
    q.saturation = s->value("saturation", q.saturation);
    q.hue = s->value("hue", q.hue);
    q.jitter_floor = s->value("jitter_floor", q.jitter_floor);
    q.grid_steps = s->value("grid_steps", q.grid_steps);
    q.grid_limit = s->value("grid_limit", q.grid_limit);
    q.elastic_alpha = s->value("elastic_alpha", q.elastic_alpha);
    q.elastic_sigma = s->value("elastic_sigma", q.elastic_sigma);
    q.enabled = s->value("enabled", q.enabled);
    q.min_change = s->value("min_change", q.min_change);
  }
  if (auto t = j.find("tta"); t != j.end()) {
    p.tta.n_views = t->value("n_views", p.tta.n_views);
    p.tta.rotation_degrees = t->value("rotation_degrees", p.tta.rotation_degrees);
  }
}

}  // namespace rarecell
