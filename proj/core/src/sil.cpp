#include "rarecell/sil.hpp"

#include <cmath>
#include <unordered_map>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

void to_json(nlohmann::json& j, const SilConfig& c) {
  j = {{"encoder", c.encoder},
       {"epochs", c.epochs},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"batch", c.batch},
       {"class_weighting", c.class_weighting},
       {"imbalance_threshold", c.imbalance_threshold},
       {"snapshot_epochs", c.snapshot_epochs}};
}

void from_json(const nlohmann::json& j, SilConfig& c) {
  if (j.contains("encoder")) {
    c.encoder = j.at("encoder").get<EncoderConfig>();
    if (!j.at("encoder").contains("latent_dim")) c.encoder.latent_dim = 0;
  }
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.batch = j.value("batch", c.batch);
  c.class_weighting = j.value("class_weighting", c.class_weighting);
  c.imbalance_threshold = j.value("imbalance_threshold", c.imbalance_threshold);
  c.snapshot_epochs = j.value("snapshot_epochs", c.snapshot_epochs);
}

SilModel make_sil_model(const SilConfig& config, Supervision supervision) {
  SilModel m;
  m.encoder = ResidualEncoder(config.encoder);
  m.head = torch::nn::Linear(m.encoder->output_dim(), 2);
  m.supervision = supervision;
  return m;
}

std::array<double, 2> class_weights(std::size_t n_normal, std::size_t n_abnormal, double threshold) {
  if (n_normal == 0 || n_abnormal == 0) throw ArgumentError("both classes are required");
  const double hi = static_cast<double>(std::max(n_normal, n_abnormal));
  const double lo = static_cast<double>(std::min(n_normal, n_abnormal));
  if (hi / lo <= threshold) return {1.0, 1.0};
  const double n = static_cast<double>(n_normal + n_abnormal);
  return {n / (2.0 * n_normal), n / (2.0 * n_abnormal)};
}

double abnormal_probability(double logit_normal, double logit_abnormal) {
  return 1.0 / (1.0 + std::exp(logit_normal - logit_abnormal));
}

namespace {

void train_classifier(SilModel& model, const ImageSource& images, const std::vector<std::size_t>& index,
                      const std::vector<int>& targets, const Augmenter& augmenter, const SilConfig& config,
                      std::uint64_t seed, const std::string& stage, TrainingLog* log, const EpochCallback& on_epoch,
                      const SnapshotCallback& on_snapshot) {
  std::size_t n1 = 0;
  for (int t : targets) n1 += static_cast<std::size_t>(t);
  const std::size_t n0 = targets.size() - n1;
  if (n0 == 0 || n1 == 0) throw ArgumentError(stage + " needs both classes in the training data");
  std::array<double, 2> w{1.0, 1.0};
  if (config.class_weighting) w = class_weights(n0, n1, config.imbalance_threshold);
  auto weight = torch::tensor({w[0], w[1]}, torch::kFloat32);

  seed_torch(seed);
  auto params = model.encoder->parameters();
  for (auto& p : model.head->parameters()) params.push_back(p);
  torch::optim::SGD optim(params, torch::optim::SGDOptions(config.lr).momentum(config.momentum));
  const int side = model.encoder->config().input_side;
  TrainingLog local{stage, {}};
  model.encoder->train();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (const auto& batch : epoch_batches(index.size(), config.batch, derive_seed(seed, {8, epoch}))) {
      std::vector<Image> views;
      std::vector<std::int64_t> y;
      for (auto b : batch) {
        views.push_back(augmenter.apply_weak(images.at(index[b]), derive_seed(seed, {9, epoch, b})));
        y.push_back(targets[b]);
      }
      auto target = torch::tensor(y, torch::kLong);
      optim.zero_grad();
      auto logits = model.head(model.encoder(to_batch(views, side)));
      auto loss = torch::nn::functional::cross_entropy(
          logits, target, torch::nn::functional::CrossEntropyFuncOptions().weight(weight));
      const double l = loss.item<double>();
      check_finite(l, stage, epoch);
      loss.backward();
      optim.step();
      loss_sum += l * batch.size();
      correct += static_cast<std::size_t>(logits.argmax(1).eq(target).sum().item<std::int64_t>());
      seen += batch.size();
    }
    EpochRecord rec{epoch, {{"loss", loss_sum / seen}, {"accuracy", static_cast<double>(correct) / seen}}};
    local.epochs.push_back(rec);
    if (on_epoch) on_epoch(stage, rec);
    if (on_snapshot && std::find(config.snapshot_epochs.begin(), config.snapshot_epochs.end(), epoch) !=
                           config.snapshot_epochs.end()) {
      model.encoder->eval();
      on_snapshot(epoch, model);
      model.encoder->train();
    }
  }
  model.encoder->eval();
  if (log) *log = std::move(local);
}

}  // namespace

SilModel train_fs_sil(const ImageSource& images, const std::vector<Label>& labels, const Augmenter& augmenter,
                      const SilConfig& config, std::uint64_t seed, TrainingLog* log, const EpochCallback& on_epoch,
                      const SnapshotCallback& on_snapshot) {
  if (labels.size() != images.size()) throw ArgumentError("one label per image is required");
  std::vector<std::size_t> index;
  std::vector<int> targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == Label::unknown) continue;
    index.push_back(i);
    targets.push_back(labels[i] == Label::abnormal ? 1 : 0);
  }
  seed_torch(seed);
  auto model = make_sil_model(config, Supervision::instance_labels);
  train_classifier(model, images, index, targets, augmenter, config, seed, "fs-sil", log, on_epoch, on_snapshot);
  return model;
}

SilModel train_ws_sil(const std::vector<Bag>& bags, const ImageSource& images, const Augmenter& augmenter,
                      const SilConfig& config, std::uint64_t seed, TrainingLog* log, const EpochCallback& on_epoch,
                      const SnapshotCallback& on_snapshot) {
  bool any_pos = false, any_neg = false;
  for (const auto& b : bags) (b.bag_label == BagLabel::positive ? any_pos : any_neg) = true;
  if (!any_pos || !any_neg) throw ArgumentError("ws-sil needs at least one positive and one negative bag");
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < images.size(); ++i) where.emplace(images.id(i), i);
  std::vector<std::size_t> index;
  std::vector<int> targets;
  for (const auto& b : bags) {
    for (const auto& id : b.members) {
      auto it = where.find(id);
      if (it == where.end()) throw IntegrityError("bag member '" + id + "' has no image");
      index.push_back(it->second);
      targets.push_back(b.bag_label == BagLabel::positive ? 1 : 0);
    }
  }
  seed_torch(seed);
  auto model = make_sil_model(config, Supervision::inherited_labels);
  train_classifier(model, images, index, targets, augmenter, config, seed, "ws-sil", log, on_epoch, on_snapshot);
  return model;
}

std::vector<double> score_sil(SilModel& model, const ImageSource& source, const Augmenter& augmenter) {
  if (!model.encoder || !model.head) throw StateError("sil model is not trained");
  torch::NoGradGuard no_grad;
  auto z = encode_source(model.encoder, source, augmenter);
  auto p = torch::softmax(model.head(z), 1).select(1, 1).to(torch::kFloat64).contiguous();
  return {p.data_ptr<double>(), p.data_ptr<double>() + p.numel()};
}

void save_sil(const std::filesystem::path& dir, const SilModel& model, const SilConfig& config,
              const nlohmann::json& meta, const std::string& name) {
  torch::nn::Module bundle;
  bundle.register_module("encoder", model.encoder.ptr());
  bundle.register_module("head", model.head.ptr());
  nlohmann::json m = meta;
  m["supervision"] = model.supervision == Supervision::instance_labels ? "instance_labels" : "inherited_labels";
  save_checkpoint(dir / name, bundle, m);
  m["config"] = config;
  write_json_atomic(dir / "model.json", m);
}

SilModel load_sil(const std::filesystem::path& dir, nlohmann::json* meta, const std::string& name) {
  if (!std::filesystem::exists(dir / "model.json")) throw FormatError("no sil model in " + dir.string());
  auto index = read_json(dir / "model.json");
  const auto supervision = index.value("supervision", "instance_labels") == "instance_labels"
                               ? Supervision::instance_labels
                               : Supervision::inherited_labels;
  auto model = make_sil_model(index.at("config").get<SilConfig>(), supervision);
  torch::nn::Module bundle;
  bundle.register_module("encoder", model.encoder.ptr());
  bundle.register_module("head", model.head.ptr());
  load_checkpoint(dir / name, bundle);
  model.encoder->eval();
  if (meta) *meta = index;
  return model;
}

}  // namespace rarecell
