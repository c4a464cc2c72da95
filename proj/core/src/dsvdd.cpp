#include "rarecell/dsvdd.hpp"

#include <algorithm>
#include <cmath>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

void to_json(nlohmann::json& j, const DsvddConfig& c) {
  j = {{"encoder", c.encoder}, {"epsilon", c.epsilon},     {"weight_decay", c.weight_decay},
       {"blend", c.blend},     {"n_views", c.n_views},     {"seeds", c.seeds},
       {"ae_epochs", c.ae_epochs}, {"ae_lr", c.ae_lr},     {"epochs", c.epochs},
       {"lr", c.lr},           {"batch", c.batch}};
}

void from_json(const nlohmann::json& j, DsvddConfig& c) {
  if (j.contains("encoder")) {
    c.encoder = j.at("encoder").get<EncoderConfig>();
    if (!j.at("encoder").contains("bias_free")) c.encoder.bias_free = true;
  }
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.blend = j.value("blend", c.blend);
  c.n_views = j.value("n_views", c.n_views);
  c.seeds = j.value("seeds", c.seeds);
  c.ae_epochs = j.value("ae_epochs", c.ae_epochs);
  c.ae_lr = j.value("ae_lr", c.ae_lr);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  if (c.epsilon <= 0) throw ArgumentError("dsvdd.epsilon must be > 0");
  if (c.blend < 0 || c.blend > 1) throw ArgumentError("dsvdd.blend must lie in [0, 1]");
  if (c.n_views < 1 || c.n_views > 4) throw ArgumentError("dsvdd.n_views must lie in [1, 4]");
  if (c.seeds < 1) throw ArgumentError("dsvdd.seeds must be >= 1");
  if (c.weight_decay < 0) throw ArgumentError("dsvdd.weight_decay must be >= 0");
}

torch::Tensor estimate_center(ResidualEncoder& encoder, const ImageSource& normals, const Augmenter& augmenter) {
  if (normals.size() == 0) throw ArgumentError("center estimation needs at least one normal");
  auto z = encode_source(encoder, normals, augmenter).to(torch::kFloat64);
  auto c = z.mean(0).to(torch::kFloat32);
  if (!torch::isfinite(c).all().item<bool>()) throw NumericError("center has non-finite entries");
  return c;
}

torch::Tensor clamp_center(const torch::Tensor& c, double epsilon) {
  if (!(epsilon > 0)) throw ArgumentError("clamp epsilon must be > 0");
  auto sign = torch::where(c < 0, torch::full_like(c, -1.0), torch::full_like(c, 1.0));
  return sign * torch::clamp_min(c.abs(), epsilon);
}

torch::Tensor dsvdd_objective(const torch::Tensor& z, const torch::Tensor& center) {
  return (z - center).pow(2).sum(1).mean();
}

torch::Tensor weight_norm_sq(const torch::nn::Module& module) {
  auto total = torch::zeros({}, torch::kFloat32);
  for (const auto& p : module.parameters(true)) {
    if (p.dim() > 1) total = total + p.pow(2).sum();
  }
  return total;
}

TrainingLog train_dsvdd(DsvddModel& model, const ImageSource& normals, const Augmenter& augmenter,
                        const OptimOptions& options) {
  if (!model.encoder) throw PreconditionError("dsvdd model has no encoder");
  if (!model.center.defined()) throw PreconditionError("center must be estimated before training");
  if (model.center.dim() != 1 || model.center.size(0) != model.encoder->output_dim()) {
    throw PreconditionError("center length does not match the encoder output");
  }
  if (model.center.abs().min().item<double>() < model.epsilon * (1 - 1e-6)) {
    throw PreconditionError("center is not clamped");
  }
  if (normals.size() == 0) throw ArgumentError("dsvdd training needs at least one normal");
  const auto center = model.center.detach();
  const int side = model.encoder->config().input_side;
  TrainingLog log{"dsvdd", {}};
  torch::optim::Adam optim(model.encoder->parameters(), torch::optim::AdamOptions(options.lr));
  model.encoder->train();
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    double data_sum = 0.0, reg_last = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : epoch_batches(normals.size(), options.batch, derive_seed(options.seed, {3, epoch}))) {
      std::vector<Image> views;
      views.reserve(batch.size());
      for (auto idx : batch) views.push_back(augmenter.apply_weak(normals.at(idx), derive_seed(options.seed, {4, epoch, idx})));
      optim.zero_grad();
      auto z = model.encoder(to_batch(views, side));
      auto data = dsvdd_objective(z, center);
      auto reg = model.weight_decay * weight_norm_sq(*model.encoder);
      auto total = data + reg;
      const double d = data.item<double>();
      reg_last = reg.item<double>();
      check_finite(d + reg_last, log.stage, epoch);
      total.backward();
      optim.step();
      data_sum += d * batch.size();
      seen += batch.size();
    }
    const double data_mean = seen ? data_sum / seen : 0.0;
    EpochRecord rec{epoch, {{"data", data_mean}, {"reg", reg_last}, {"total", data_mean + reg_last}}};
    log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(log.stage, rec);
  }
  model.encoder->eval();
  return log;
}

namespace {

std::vector<Image> views_for(const Image& x, const Augmenter& augmenter, int n_views) {
  auto views = augmenter.tta_views(x);
  if (static_cast<int>(views.size()) < n_views) {
    throw ArgumentError("augmentation policy yields " + std::to_string(views.size()) + " views, model needs " +
                        std::to_string(n_views));
  }
  views.resize(static_cast<std::size_t>(n_views));
  return views;
}

// Distances for images whose views are laid out contiguously, n_views each.
std::vector<std::vector<double>> distances_from_views(DsvddModel& model, const std::vector<Image>& views) {
  auto z = encode(model.encoder, views);
  auto d = (z - model.center).pow(2).sum(1).to(torch::kFloat64).contiguous();
  const auto* p = d.data_ptr<double>();
  const std::size_t v = static_cast<std::size_t>(model.n_views);
  std::vector<std::vector<double>> out(views.size() / v);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].assign(p + i * v, p + (i + 1) * v);
  return out;
}

void check_member(const DsvddModel& m) {
  if (!m.encoder || !m.center.defined()) throw StateError("dsvdd model is not trained");
}

}  // namespace

std::vector<double> view_distances(DsvddModel& model, const Image& x, const Augmenter& augmenter) {
  check_member(model);
  return distances_from_views(model, views_for(x, augmenter, model.n_views)).at(0);
}

std::vector<std::vector<double>> view_distances(DsvddModel& model, const ImageSource& source,
                                                const Augmenter& augmenter) {
  check_member(model);
  std::vector<std::vector<double>> out;
  out.reserve(source.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < source.size(); start += chunk) {
    std::vector<Image> views;
    for (std::size_t i = start; i < std::min(source.size(), start + chunk); ++i) {
      auto v = views_for(source.at(i), augmenter, model.n_views);
      views.insert(views.end(), v.begin(), v.end());
    }
    for (auto& row : distances_from_views(model, views)) out.push_back(std::move(row));
  }
  return out;
}

double blend_score(const std::vector<double>& distances, double lambda) {
  if (distances.empty()) throw ArgumentError("blend_score needs at least one distance");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("blend weight must lie in [0, 1]");
  const double d0 = distances.front();
  const double mx = *std::max_element(distances.begin(), distances.end());
  return d0 + lambda * (mx - d0);
}

double ensemble_score(DsvddEnsemble& ensemble, const Image& x, const Augmenter& augmenter) {
  if (ensemble.members.empty()) throw ArgumentError("empty dsvdd ensemble");
  double sum = 0.0;
  for (auto& m : ensemble.members) sum += blend_score(view_distances(m, x, augmenter), m.blend);
  return sum / static_cast<double>(ensemble.members.size());
}

std::vector<double> ensemble_scores(DsvddEnsemble& ensemble, const ImageSource& source, const Augmenter& augmenter) {
  if (ensemble.members.empty()) throw ArgumentError("empty dsvdd ensemble");
  std::vector<double> out(source.size(), 0.0);
  for (auto& m : ensemble.members) {
    auto rows = view_distances(m, source, augmenter);
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] += blend_score(rows[i], m.blend);
  }
  for (auto& v : out) v /= static_cast<double>(ensemble.members.size());
  return out;
}

DsvddEnsemble fit_dsvdd(const ImageSource& normals, const Augmenter& augmenter, const DsvddConfig& config,
                        std::uint64_t seed, std::vector<TrainingLog>* logs, const EpochCallback& on_epoch) {
  if (normals.size() == 0) throw ArgumentError("dsvdd needs normal training images");
  DsvddEnsemble ensemble;
  for (int s = 0; s < config.seeds; ++s) {
    const std::uint64_t member_seed = derive_seed(seed, {0x64737664, static_cast<std::uint64_t>(s)});
    seed_torch(member_seed);
    Autoencoder ae(config.encoder);
    OptimOptions ae_opt{config.ae_epochs, config.ae_lr, config.batch, 0.0, member_seed, on_epoch};
    auto ae_log = train_autoencoder(ae, normals, augmenter, ae_opt);

    DsvddModel m;
    m.encoder = ResidualEncoder(config.encoder);
    copy_state(*ae->encoder, *m.encoder);
    m.epsilon = config.epsilon;
    m.weight_decay = config.weight_decay;
    m.blend = config.blend;
    m.n_views = config.n_views;
    m.center = clamp_center(estimate_center(m.encoder, normals, augmenter), config.epsilon);

    OptimOptions opt{config.epochs, config.lr, config.batch, 0.0, derive_seed(member_seed, {1}), on_epoch};
    auto log = train_dsvdd(m, normals, augmenter, opt);
    if (logs) {
      logs->push_back(std::move(ae_log));
      logs->push_back(std::move(log));
    }
    ensemble.members.push_back(std::move(m));
  }
  return ensemble;
}

void save_dsvdd(const std::filesystem::path& dir, const DsvddEnsemble& ensemble, const DsvddConfig& config,
                const nlohmann::json& meta) {
  for (std::size_t s = 0; s < ensemble.members.size(); ++s) {
    const auto& m = ensemble.members[s];
    auto c = m.center.contiguous();
    std::vector<float> center(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
    nlohmann::json member_meta = meta;
    member_meta["center"] = center;
    member_meta["member"] = s;
    save_checkpoint(dir / ("member_" + std::to_string(s) + ".pt"), *m.encoder, member_meta);
  }
  nlohmann::json index = meta;
  index["method"] = "dsvdd";
  index["config"] = config;
  index["members"] = ensemble.members.size();
  write_json_atomic(dir / "model.json", index);
}

DsvddEnsemble load_dsvdd(const std::filesystem::path& dir, nlohmann::json* meta) {
  if (!std::filesystem::exists(dir / "model.json")) throw FormatError("no dsvdd model in " + dir.string());
  auto index = read_json(dir / "model.json");
  const auto config = index.at("config").get<DsvddConfig>();
  DsvddEnsemble ensemble;
  for (std::size_t s = 0; s < index.at("members").get<std::size_t>(); ++s) {
    DsvddModel m;
    m.encoder = ResidualEncoder(config.encoder);
    auto member_meta = load_checkpoint(dir / ("member_" + std::to_string(s) + ".pt"), *m.encoder);
    auto center = member_meta.at("center").get<std::vector<float>>();
    m.center = torch::tensor(center, torch::kFloat32);
    m.epsilon = config.epsilon;
    m.weight_decay = config.weight_decay;
    m.blend = config.blend;
    m.n_views = config.n_views;
    m.encoder->eval();
    ensemble.members.push_back(std::move(m));
  }
  if (meta) *meta = index;
  return ensemble;
}

}  // namespace rarecell
