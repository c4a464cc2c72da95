#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rarecell/dataset.hpp"
#include "rarecell/image.hpp"

namespace rarecell::synthetic {

// A stained nucleus: smooth Gaussian blob with jittered size, position, color.
Image blob_cell(int side, std::uint64_t seed);
// Abnormal morphology: a hollow ring (even seeds) or a striped texture (odd).
Image abnormal_cell(int side, std::uint64_t seed);
Image checkerboard(int side, int square);

struct SyntheticCounts {
  int train_normal = 0;
  int train_abnormal = 0;
  int test_normal = 0;
  int test_abnormal = 0;
};

// Bone-marrow cardinalities: 18,369 / 910 / 7,873 / 396.
SyntheticCounts bone_marrow_counts();

// Manifest records only (no pixels); ids are train_NNNNNN / test_NNNNNN with
// labels scattered over the sequence, image_ref = "images/<id>.png".
std::vector<PatchInstance> make_instances(const SyntheticCounts& counts);

// Renders an image for a record produced by make_instances.
Image render(const PatchInstance& instance, int side, std::uint64_t seed);

// Writes PNGs plus manifest.jsonl under `dir`.
void write_dataset(const std::filesystem::path& dir, const SyntheticCounts& counts, int side, std::uint64_t seed);

}  // namespace rarecell::synthetic
