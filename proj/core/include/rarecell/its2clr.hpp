#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "rarecell/augment.hpp"
#include "rarecell/dataset.hpp"
#include "rarecell/encoder.hpp"

namespace rarecell {

struct Its2clrConfig {
  EncoderConfig encoder{"resnet18", 256, 224, false};
  int epochs = 100;
  int batch = 512;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double supcon_temperature = 0.07;
  int warmup_epochs = 10;
  // Percent per round (warm-up first). Empty: linear from r_start to r_end
  // over the rounds implied by epochs / mil_refit_period.
  std::vector<double> r_schedule;
  double r_start = 5.0;
  double r_end = 30.0;
  int mil_refit_period = 10;
  int mil_train_budget = 200;
  double mil_lr = 2e-4;
  double mil_weight_decay = 1e-4;
  int mil_hidden = 128;

  // Throws ArgumentError for out-of-range or non-monotone schedules.
  void validate() const;
  // Resolved schedule; entry 0 drives the warm-up selection.
  std::vector<double> schedule() const;
};

void to_json(nlohmann::json& j, const Its2clrConfig& c);
// Validates after parsing.
void from_json(const nlohmann::json& j, Its2clrConfig& c);

struct ScoredInstance {
  std::string instance_id;
  double confidence = 0.0;
};

struct PseudoLabels {
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
  // Set when 2 ceil(r n) > n forced both sets down to floor(n / 2).
  bool shrunk = false;
};

/// Top / bottom ceil(r% n) of one positive bag ordered by (confidence desc,
/// instance_id asc). Throws ArgumentError for an empty bag or r ∉ (0, 50].
PseudoLabels select_pseudolabels(std::vector<ScoredInstance> bag, double r_percent);

// Supervised contrastive loss over unit-norm rows; anchors without a
// same-class partner are skipped. Throws ArgumentError for fewer than two
// rows or a single class.
torch::Tensor supcon_loss(const torch::Tensor& embeddings, const std::vector<int>& labels, double tau);

/// Gated-attention MIL pooling with a linear bag classifier.
class MilAggregatorImpl : public torch::nn::Module {
 public:
  MilAggregatorImpl(int in, int hidden);

  // Softmax attention over the rows of one bag, [n].
  torch::Tensor attention(const torch::Tensor& h);
  // Bag logit, [1].
  torch::Tensor forward(const torch::Tensor& h);
  // Per-instance confidence: the bag probability of the singleton {h_i}.
  torch::Tensor instance_confidence(const torch::Tensor& h);

 private:
  torch::nn::Linear attn_v{nullptr}, attn_u{nullptr}, attn_w{nullptr}, classifier{nullptr};
};
TORCH_MODULE(MilAggregator);

struct MilFitResult {
  int epochs_run = 0;
  double final_loss = 0.0;
};

/// Trains the aggregator on frozen per-bag embeddings with bag labels (one
/// bag per step, Adam) for up to `budget` epochs, stopping early once the
/// mean bag loss drops below 1e-3. Throws ArgumentError for empty bags or
/// when either label is missing.
MilFitResult refit_mil(MilAggregator& aggregator, const std::vector<torch::Tensor>& bag_embeddings,
                       const std::vector<int>& bag_labels, int budget, double lr, double weight_decay,
                       std::uint64_t seed);

struct Its2clrModel {
  ResidualEncoder encoder{nullptr};
  MilAggregator aggregator{nullptr};
};

struct Its2clrRound {
  int round = 0;  // 0 = warm-up
  int first_epoch = 0;
  int last_epoch = 0;
  double r_percent = 0.0;
  int mil_epochs = 0;
  double mil_loss = 0.0;
  double supcon_loss = 0.0;
  std::size_t shrunk_bags = 0;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
};

nlohmann::json to_json(const std::vector<Its2clrRound>& rounds);

/// Warm-up on negative-bag instances vs. top-r bootstrap candidates, then
/// rounds of MIL refit, per-bag pseudo-labeling and SupCon refinement.
/// `images` must contain every bag member.
Its2clrModel train_its2clr(const std::vector<Bag>& bags, const ImageSource& images, const Augmenter& augmenter,
                           const Its2clrConfig& config, std::uint64_t seed, std::vector<Its2clrRound>* rounds = nullptr,
                           const EpochCallback& on_epoch = {});

// L2-normalized encoder embeddings of t(x).
torch::Tensor its2clr_embeddings(Its2clrModel& model, const ImageSource& source, const Augmenter& augmenter);
std::vector<double> score_its2clr(Its2clrModel& model, const ImageSource& source, const Augmenter& augmenter);

void save_its2clr(const std::filesystem::path& dir, const Its2clrModel& model, const Its2clrConfig& config,
                  const nlohmann::json& meta);
Its2clrModel load_its2clr(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

}  // namespace rarecell
