#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rarecell/augment.hpp"
#include "rarecell/dataset.hpp"
#include "rarecell/encoder.hpp"

namespace rarecell {

enum class Supervision { instance_labels, inherited_labels };

struct SilConfig {
  EncoderConfig encoder{"resnet18", 0, 224, false};
  int epochs = 100;
  double lr = 1e-3;
  double momentum = 0.9;
  int batch = 64;
  bool class_weighting = true;
  // Inverse-frequency weights switch on above this majority:minority ratio.
  double imbalance_threshold = 10.0;
  // Extra snapshots written during training (e.g. {30, 60}).
  std::vector<int> snapshot_epochs;
};

void to_json(nlohmann::json& j, const SilConfig& c);
void from_json(const nlohmann::json& j, SilConfig& c);

struct SilModel {
  ResidualEncoder encoder{nullptr};
  torch::nn::Linear head{nullptr};
  Supervision supervision = Supervision::instance_labels;
};

SilModel make_sil_model(const SilConfig& config, Supervision supervision);

// {w_normal, w_abnormal}: N / (2 n_c) when max/min count exceeds `threshold`,
// else {1, 1}. Throws ArgumentError when a class is empty.
std::array<double, 2> class_weights(std::size_t n_normal, std::size_t n_abnormal, double threshold);

using SnapshotCallback = std::function<void(int epoch, SilModel& model)>;

/// Instance-label classifier; instances with unknown labels are skipped.
///
/// Logs "loss" and "accuracy" per epoch. Throws ArgumentError unless both
/// classes are present.
SilModel train_fs_sil(const ImageSource& images, const std::vector<Label>& labels, const Augmenter& augmenter,
                      const SilConfig& config, std::uint64_t seed, TrainingLog* log = nullptr,
                      const EpochCallback& on_epoch = {}, const SnapshotCallback& on_snapshot = {});

/// Label-inheritance classifier: every member of a positive bag is class 1,
/// every member of a negative bag class 0. `images` must contain all members.
SilModel train_ws_sil(const std::vector<Bag>& bags, const ImageSource& images, const Augmenter& augmenter,
                      const SilConfig& config, std::uint64_t seed, TrainingLog* log = nullptr,
                      const EpochCallback& on_epoch = {}, const SnapshotCallback& on_snapshot = {});

// Softmax probability of the abnormal logit.
double abnormal_probability(double logit_normal, double logit_abnormal);

std::vector<double> score_sil(SilModel& model, const ImageSource& source, const Augmenter& augmenter);

void save_sil(const std::filesystem::path& dir, const SilModel& model, const SilConfig& config,
              const nlohmann::json& meta, const std::string& name = "sil.pt");
SilModel load_sil(const std::filesystem::path& dir, nlohmann::json* meta = nullptr, const std::string& name = "sil.pt");

}  // namespace rarecell
