#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rarecell/image.hpp"

namespace rarecell {

// Pins torch to one intra-op thread (reproducible reductions) and seeds its
// global generator.
void seed_torch(std::uint64_t seed);

// [3, H, W] float tensor from an RGB image.
torch::Tensor to_tensor(const Image& image);
// [B, 3, S, S]; every image must be S x S, otherwise FormatError.
torch::Tensor to_batch(const std::vector<Image>& images, int side);

// Row-wise v / (‖v‖ + 1e-12).
torch::Tensor normalize_rows(const torch::Tensor& v);

std::vector<float> row_vector(const torch::Tensor& t, std::int64_t row);

struct EpochRecord {
  int epoch = 0;
  std::map<std::string, double> values;
};

struct TrainingLog {
  std::string stage;
  std::vector<EpochRecord> epochs;
  nlohmann::json to_json() const;
};

using EpochCallback = std::function<void(const std::string& stage, const EpochRecord&)>;

// Shuffled mini-batches of indices [0, n) for one epoch. Trailing batches of a
// single element are folded into the previous batch (batch norm needs >= 2).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed);

// Throws DivergenceError when `loss` is not finite.
void check_finite(double loss, const std::string& stage, int epoch);

// Module parameters (+ buffers) to a file; metadata goes to "<path>.json".
void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module, const nlohmann::json& meta);
// Restores into an already-constructed module; returns the metadata. Throws
// FormatError on a missing file or a format version mismatch.
nlohmann::json load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);

inline constexpr int kCheckpointFormat = 1;

}  // namespace rarecell
