#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rarecell/augment.hpp"
#include "rarecell/encoder.hpp"

namespace rarecell {

struct DsvddConfig {
  EncoderConfig encoder{"resnet18", 32, 224, true};
  double epsilon = 0.1;
  double weight_decay = 1e-6;  // λ on Σ‖W‖²_F
  double blend = 0.35;
  int n_views = 4;
  int seeds = 5;
  int ae_epochs = 100;
  double ae_lr = 1e-4;
  int epochs = 200;
  double lr = 1e-4;
  int batch = 64;
};

void to_json(nlohmann::json& j, const DsvddConfig& c);
void from_json(const nlohmann::json& j, DsvddConfig& c);

// Mean of φ(t(x)) over `normals` (inference mode). Throws ArgumentError when
// empty and NumericError if the mean is not finite.
torch::Tensor estimate_center(ResidualEncoder& encoder, const ImageSource& normals, const Augmenter& augmenter);

// c_j <- sign(c_j) max(|c_j|, eps) with sign(0) = +1. Throws ArgumentError
// for eps <= 0.
torch::Tensor clamp_center(const torch::Tensor& c, double epsilon);

// mean_i ‖z_i − c‖² over the rows of z.
torch::Tensor dsvdd_objective(const torch::Tensor& z, const torch::Tensor& center);

// Σ over weight matrices / kernels (dim > 1) of the squared Frobenius norm.
torch::Tensor weight_norm_sq(const torch::nn::Module& module);

struct DsvddModel {
  ResidualEncoder encoder{nullptr};
  torch::Tensor center;  // [d]
  double epsilon = 0.1;
  double weight_decay = 1e-6;
  double blend = 0.35;
  int n_views = 4;
};

/// Minimizes mean ‖φ(a(x)) − c‖² + λ Σ‖W‖² with c held fixed.
///
/// Logs "data", "reg" and "total" per epoch. Throws PreconditionError when
/// the center is missing or violates the clamp, DivergenceError on a
/// non-finite loss.
TrainingLog train_dsvdd(DsvddModel& model, const ImageSource& normals, const Augmenter& augmenter,
                        const OptimOptions& options);

// ‖φ(v_k(x)) − c‖² for the first n_views test-time views, original first.
std::vector<double> view_distances(DsvddModel& model, const Image& x, const Augmenter& augmenter);
// Row per image of `source`.
std::vector<std::vector<double>> view_distances(DsvddModel& model, const ImageSource& source,
                                                const Augmenter& augmenter);

// d0 + λ (max_k d_k − d0). Throws ArgumentError on an empty list or λ ∉ [0, 1].
double blend_score(const std::vector<double>& distances, double lambda);

struct DsvddEnsemble {
  std::vector<DsvddModel> members;
};

double ensemble_score(DsvddEnsemble& ensemble, const Image& x, const Augmenter& augmenter);
std::vector<double> ensemble_scores(DsvddEnsemble& ensemble, const ImageSource& source, const Augmenter& augmenter);

/// Full per-seed pipeline: autoencoder pretraining, encoder transfer, center
/// estimation and clamp, then DSVDD training. Each member re-initializes and
/// reshuffles from its own seed.
DsvddEnsemble fit_dsvdd(const ImageSource& normals, const Augmenter& augmenter, const DsvddConfig& config,
                        std::uint64_t seed, std::vector<TrainingLog>* logs = nullptr, const EpochCallback& on_epoch = {});

void save_dsvdd(const std::filesystem::path& dir, const DsvddEnsemble& ensemble, const DsvddConfig& config,
                const nlohmann::json& meta);
// Returns the ensemble and fills `meta` with the stored metadata.
DsvddEnsemble load_dsvdd(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

}  // namespace rarecell
