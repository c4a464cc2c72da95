#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rarecell/augment.hpp"
#include "rarecell/image.hpp"
#include "rarecell/tensor.hpp"

namespace rarecell {

struct EncoderConfig {
  // "resnet18", or "resnet18-mini" (narrow, one block per stage, no stem
  // downsampling) for small patches and quick experiments.
  std::string backbone = "resnet18";
  // Width of the final linear layer; 0 returns the pooled backbone features.
  int latent_dim = 32;
  int input_side = 224;
  // Drops every bias / affine shift (DSVDD feature map).
  bool bias_free = false;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct BackboneSpec {
  std::vector<int> widths;
  std::vector<int> blocks;
  int stem_kernel = 7;
  int stem_stride = 2;
  bool stem_pool = true;
};

// Throws ArgumentError for an unknown tag.
BackboneSpec backbone_spec(const std::string& tag);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in, int out, int stride, bool affine);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  torch::nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

/// 18-layer residual CNN feature map φ: [B, 3, S, S] -> [B, d].
class ResidualEncoderImpl : public torch::nn::Module {
 public:
  explicit ResidualEncoderImpl(EncoderConfig config);

  // Throws FormatError unless x is [B, 3, input_side, input_side].
  torch::Tensor forward(torch::Tensor x);

  const EncoderConfig& config() const noexcept { return config_; }
  int output_dim() const noexcept { return output_dim_; }
  // Spatial reduction between input and the last feature map.
  int downsample() const noexcept { return downsample_; }
  int feature_width() const noexcept { return spec_.widths.back(); }

 private:
  EncoderConfig config_;
  BackboneSpec spec_;
  int output_dim_ = 0;
  int downsample_ = 1;
  torch::nn::Sequential stem{nullptr};
  torch::nn::Sequential stages{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ResidualEncoder);

/// Mirror of the encoder: linear to a coarse map, then stride-2 transposed
/// convolutions back to the input side.
class ConvDecoderImpl : public torch::nn::Module {
 public:
  ConvDecoderImpl(const EncoderConfig& config, int feature_width, int downsample, int latent_dim);
  torch::Tensor forward(torch::Tensor z);

 private:
  int channels_ = 0;
  int coarse_ = 0;
  torch::nn::Linear fc{nullptr};
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ConvDecoder);

class AutoencoderImpl : public torch::nn::Module {
 public:
  explicit AutoencoderImpl(EncoderConfig config);
  torch::Tensor forward(torch::Tensor x);

  ResidualEncoder encoder{nullptr};
  ConvDecoder decoder{nullptr};
};
TORCH_MODULE(Autoencoder);

// Inference-mode encoding in chunks; images must already be at input side.
torch::Tensor encode(ResidualEncoder& encoder, const std::vector<Image>& images, std::size_t chunk = 256);
// Encodes t(x) for every image in `source`.
torch::Tensor encode_source(ResidualEncoder& encoder, const ImageSource& source, const Augmenter& augmenter,
                            std::size_t chunk = 256);

struct OptimOptions {
  int epochs = 100;
  double lr = 1e-4;
  int batch = 64;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  EpochCallback on_epoch;
};

// Copies parameters and buffers between two modules of identical structure.
void copy_state(const torch::nn::Module& from, torch::nn::Module& to);

/// Reconstruction pretraining on weakly augmented normals.
///
/// A seeded `holdout_fraction` of the data is kept aside; every epoch logs the
/// mean training MSE ("train") and the held-out MSE on t(x) ("holdout"), and
/// epoch 0 records the held-out loss before any update.
TrainingLog train_autoencoder(Autoencoder& model, const ImageSource& normals, const Augmenter& augmenter,
                              const OptimOptions& options, double holdout_fraction = 0.05);

}  // namespace rarecell
