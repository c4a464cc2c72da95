#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rarecell/augment.hpp"
#include "rarecell/encoder.hpp"
#include "rarecell/ocsvm.hpp"

namespace rarecell {

struct DrocConfig {
  // latent_dim 0: the detector sees pooled backbone features.
  EncoderConfig encoder{"resnet18", 0, 224, false};
  int projection_dim = 256;
  double temperature = 2.0;
  double alpha = 1.0;
  int epochs = 100;
  double lr = 1e-3;
  int batch = 64;
  double nu = 0.1;
  std::optional<double> gamma;  // empty = auto
};

void to_json(nlohmann::json& j, const DrocConfig& c);
void from_json(const nlohmann::json& j, DrocConfig& c);

/// Two-layer projection head g.
class ProjectionHeadImpl : public torch::nn::Module {
 public:
  ProjectionHeadImpl(int in, int out);
  torch::Tensor forward(torch::Tensor h);

 private:
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ProjectionHead);

struct DrocModel {
  ResidualEncoder encoder{nullptr};
  ProjectionHead head{nullptr};
  double temperature = 2.0;
  double alpha = 1.0;
};

DrocModel make_droc_model(const DrocConfig& config);

// g(f(x)) / ‖g(f(x))‖ for preprocessed images, inference mode. Throws
// NumericError when a pre-normalization vector is exactly zero.
torch::Tensor project(DrocModel& model, const std::vector<Image>& images);

// Contrastive loss over aligned unit-norm views: anchor i's positive is row i
// of the other view, negatives are the other rows of that view. Averaged over
// both anchoring directions. Throws ArgumentError on mismatched shapes.
torch::Tensor clr_loss(const torch::Tensor& a, const torch::Tensor& a_prime, double tau);
// clr_loss with every pseudo-abnormal row added to each anchor's denominator.
torch::Tensor da_loss(const torch::Tensor& a, const torch::Tensor& a_prime, const torch::Tensor& pseudo, double tau);
double droc_loss(double l_clr, double l_da, double alpha);

/// Distribution-augmented contrastive training on normals.
///
/// Each step draws two weak views per image and one pseudo-abnormal view
/// (weak then a sampled strong transform). Logs "clr", "da" and "total".
TrainingLog train_droc(DrocModel& model, const ImageSource& normals, const Augmenter& augmenter,
                       const OptimOptions& options);

struct DetectorOptions {
  double nu = 0.1;
  std::optional<double> gamma;
};

// One-class SVM over encoder features f(t(x)) (projection head unused).
// Throws ArgumentError for fewer than two normals.
OneClassSvm fit_detector(DrocModel& model, const ImageSource& normals, const Augmenter& augmenter,
                         const DetectorOptions& options);

// Negated SVM decision value of f(t(x)); higher = more anomalous. Throws
// StateError for an unfitted detector.
std::vector<double> score_droc(const OneClassSvm& detector, DrocModel& model, const ImageSource& source,
                               const Augmenter& augmenter);

void save_droc(const std::filesystem::path& dir, const DrocModel& model, const OneClassSvm& detector,
               const DrocConfig& config, const nlohmann::json& meta);
DrocModel load_droc(const std::filesystem::path& dir, OneClassSvm& detector, nlohmann::json* meta = nullptr);

}  // namespace rarecell
