#include "rarecell/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell::synthetic {

namespace {

struct Palette {
  cv::Vec3f background;
  cv::Vec3f cytoplasm;
  cv::Vec3f nucleus;
};

Palette sample_palette(Rng& rng) {
  auto jitter = [&](float v, double amount) { return static_cast<float>(v + rng.uniform(-amount, amount)); };
  Palette p;
  p.background = {jitter(0.93f, 0.02), jitter(0.88f, 0.02), jitter(0.91f, 0.02)};
  p.cytoplasm = {jitter(0.80f, 0.03), jitter(0.70f, 0.03), jitter(0.85f, 0.03)};
  p.nucleus = {jitter(0.36f, 0.05), jitter(0.20f, 0.05), jitter(0.55f, 0.05)};
  return p;
}

// Alpha-composites a nucleus over background + cytoplasm; `nucleus_alpha`
// maps (dx, dy) relative to the nucleus center to [0, 1].
template <class Alpha>
Image compose(int side, Rng& rng, Alpha nucleus_alpha) {
  if (side < 8) throw ArgumentError("synthetic patches need side >= 8");
  const Palette pal = sample_palette(rng);
  const double s = side;
  const double cx = s / 2.0 + rng.uniform(-0.06, 0.06) * s;
  const double cy = s / 2.0 + rng.uniform(-0.06, 0.06) * s;
  const double cyto_sigma = s * rng.uniform(0.26, 0.32);
  cv::Mat m(side, side, CV_32FC3);
  for (int y = 0; y < side; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double d2 = dx * dx + dy * dy;
      const double a_cyto = 0.6 * std::exp(-0.5 * d2 / (cyto_sigma * cyto_sigma));
      const double a_nuc = std::clamp(nucleus_alpha(dx, dy), 0.0, 1.0);
      cv::Vec3f px;
      for (int c = 0; c < 3; ++c) {
        double v = pal.background[c] * (1.0 - a_cyto) + pal.cytoplasm[c] * a_cyto;
        v = v * (1.0 - a_nuc) + pal.nucleus[c] * a_nuc;
        v += 0.015 * rng.normal();
        px[c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      row[x] = px;
    }
  }
  return Image::from_mat(m);
}

std::uint64_t id_hash(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Image blob_cell(int side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x626c6f62}));
  const double sigma = side * rng.uniform(0.11, 0.15);
  const double stretch = rng.uniform(0.85, 1.15);
  return compose(side, rng, [&](double dx, double dy) {
    const double d2 = dx * dx * stretch + dy * dy / stretch;
    return std::min(1.0, 1.3 * std::exp(-0.5 * d2 / (sigma * sigma)));
  });
}

Image abnormal_cell(int side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x61626e}));
  if (seed % 2 == 0) {
    const double radius = side * rng.uniform(0.18, 0.24);
    const double width = side * rng.uniform(0.035, 0.05);
    return compose(side, rng, [&](double dx, double dy) {
      const double d = std::sqrt(dx * dx + dy * dy);
      return std::exp(-0.5 * (d - radius) * (d - radius) / (width * width));
    });
  }
  const double sigma = side * rng.uniform(0.14, 0.18);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double period = side * rng.uniform(0.12, 0.18);
  return compose(side, rng, [&](double dx, double dy) {
    const double envelope = std::min(1.0, 1.3 * std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma)));
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    return envelope * (0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * u / period));
  });
}

Image checkerboard(int side, int square) {
  if (side <= 0 || square <= 0) throw ArgumentError("checkerboard sizes must be positive");
  cv::Mat m(side, side, CV_32FC3);
  for (int y = 0; y < side; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < side; ++x) {
      const float v = ((x / square) + (y / square)) % 2 == 0 ? 0.9f : 0.1f;
      row[x] = cv::Vec3f(v, v, v);
    }
  }
  return Image::from_mat(m);
}

SyntheticCounts bone_marrow_counts() { return {18369, 910, 7873, 396}; }

std::vector<PatchInstance> make_instances(const SyntheticCounts& counts) {
  std::vector<PatchInstance> out;
  out.reserve(static_cast<std::size_t>(counts.train_normal + counts.train_abnormal + counts.test_normal +
                                       counts.test_abnormal));
  // Labels are scattered over the id sequence so that id order (the ranking
  // tie-break) carries no label information.
  auto add = [&](const char* prefix, int normals, int abnormals, Split split) {
    std::vector<Label> labels(static_cast<std::size_t>(normals), Label::normal);
    labels.resize(static_cast<std::size_t>(normals + abnormals), Label::abnormal);
    Rng rng(split == Split::train ? 0x7472u : 0x7465u);
    rng.shuffle(labels);
    char buf[64];
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%06zu", prefix, i);
      PatchInstance p;
      p.instance_id = buf;
      p.image_ref = std::string("images/") + buf + ".png";
      p.true_label = labels[i];
      p.slide_id = std::string(split == Split::train ? "train_slide_" : "test_slide_") + std::to_string(i % 10);
      p.split = split;
      out.push_back(std::move(p));
    }
  };
  add("train_", counts.train_normal, counts.train_abnormal, Split::train);
  add("test_", counts.test_normal, counts.test_abnormal, Split::test);
  return out;
}

Image render(const PatchInstance& instance, int side, std::uint64_t seed) {
  const std::uint64_t s = derive_seed(seed, {id_hash(instance.instance_id)});
  return instance.true_label == Label::abnormal ? abnormal_cell(side, s) : blob_cell(side, s);
}

void write_dataset(const std::filesystem::path& dir, const SyntheticCounts& counts, int side, std::uint64_t seed) {
  const auto instances = make_instances(counts);
  std::filesystem::create_directories(dir / "images");
  for (const auto& p : instances) save_image(dir / p.image_ref, render(p, side, seed));
  write_manifest(dir / "manifest.jsonl", instances);
}

}  // namespace rarecell::synthetic
