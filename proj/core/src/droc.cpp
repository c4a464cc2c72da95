#include "rarecell/droc.hpp"

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

void to_json(nlohmann::json& j, const DrocConfig& c) {
  j = {{"encoder", c.encoder}, {"projection_dim", c.projection_dim}, {"temperature", c.temperature},
       {"alpha", c.alpha},     {"epochs", c.epochs},                 {"lr", c.lr},
       {"batch", c.batch},     {"nu", c.nu}};
  j["gamma"] = c.gamma ? nlohmann::json(*c.gamma) : nlohmann::json("auto");
}

void from_json(const nlohmann::json& j, DrocConfig& c) {
  if (j.contains("encoder")) {
    c.encoder = j.at("encoder").get<EncoderConfig>();
    if (!j.at("encoder").contains("latent_dim")) c.encoder.latent_dim = 0;
  }
  c.projection_dim = j.value("projection_dim", c.projection_dim);
  c.temperature = j.value("temperature", c.temperature);
  c.alpha = j.value("alpha", c.alpha);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.nu = j.value("nu", c.nu);
  if (j.contains("gamma")) {
    if (j.at("gamma").is_string()) {
      if (j.at("gamma").get<std::string>() != "auto") throw ArgumentError("droc.gamma must be a number or \"auto\"");
      c.gamma.reset();
    } else {
      c.gamma = j.at("gamma").get<double>();
    }
  }
  if (!(c.temperature > 0)) throw ArgumentError("droc.temperature must be > 0");
  if (c.alpha < 0) throw ArgumentError("droc.alpha must be >= 0");
  if (!(c.nu > 0 && c.nu <= 1)) throw ArgumentError("droc.nu must lie in (0, 1]");
}

ProjectionHeadImpl::ProjectionHeadImpl(int in, int out) {
  fc1 = register_module("fc1", torch::nn::Linear(in, in));
  fc2 = register_module("fc2", torch::nn::Linear(in, out));
}

torch::Tensor ProjectionHeadImpl::forward(torch::Tensor h) { return fc2(torch::relu(fc1(h))); }

DrocModel make_droc_model(const DrocConfig& config) {
  DrocModel m;
  m.encoder = ResidualEncoder(config.encoder);
  m.head = ProjectionHead(m.encoder->output_dim(), config.projection_dim);
  m.temperature = config.temperature;
  m.alpha = config.alpha;
  return m;
}

torch::Tensor project(DrocModel& model, const std::vector<Image>& images) {
  torch::NoGradGuard no_grad;
  model.head->eval();
  auto g = model.head(encode(model.encoder, images));
  if ((g.norm(2, 1) == 0).any().item<bool>()) throw NumericError("projection produced a zero vector");
  return normalize_rows(g);
}

namespace {

void check_views(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.dim() != 2 || b.dim() != 2 || a.sizes() != b.sizes() || a.size(0) < 1) {
    throw ArgumentError(std::string(what) + ": views must be equally shaped non-empty [n, d] batches");
  }
}

// −log softmax of the diagonal of [anchor·positiveᵀ | anchor·extraᵀ] / τ.
torch::Tensor directional(const torch::Tensor& anchor, const torch::Tensor& positive, const torch::Tensor& extra,
                          double tau) {
  auto logits = anchor.matmul(positive.t()) / tau;
  if (extra.defined()) logits = torch::cat({logits, anchor.matmul(extra.t()) / tau}, 1);
  auto pos = torch::arange(anchor.size(0));
  auto target = logits.index({pos, pos});
  return (torch::logsumexp(logits, 1) - target).mean();
}

}  // namespace

torch::Tensor clr_loss(const torch::Tensor& a, const torch::Tensor& a_prime, double tau) {
  check_views(a, a_prime, "clr_loss");
  return 0.5 * (directional(a, a_prime, {}, tau) + directional(a_prime, a, {}, tau));
}

torch::Tensor da_loss(const torch::Tensor& a, const torch::Tensor& a_prime, const torch::Tensor& pseudo,
                      double tau) {
  check_views(a, a_prime, "da_loss");
  if (pseudo.dim() != 2 || pseudo.size(0) < 1 || pseudo.size(1) != a.size(1)) {
    throw ArgumentError("da_loss: pseudo-abnormal batch must be non-empty [m, d]");
  }
  return 0.5 * (directional(a, a_prime, pseudo, tau) + directional(a_prime, a, pseudo, tau));
}

double droc_loss(double l_clr, double l_da, double alpha) {
  if (alpha < 0) throw ArgumentError("alpha must be >= 0");
  return l_clr + alpha * l_da;
}

TrainingLog train_droc(DrocModel& model, const ImageSource& normals, const Augmenter& augmenter,
                       const OptimOptions& options) {
  if (normals.size() == 0) throw ArgumentError("droc training needs at least one normal");
  TrainingLog log{"droc", {}};
  const int side = model.encoder->config().input_side;
  auto params = model.encoder->parameters();
  for (auto& p : model.head->parameters()) params.push_back(p);
  torch::optim::Adam optim(params, torch::optim::AdamOptions(options.lr).weight_decay(options.weight_decay));
  model.encoder->train();
  model.head->train();
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    double clr_sum = 0.0, da_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : epoch_batches(normals.size(), options.batch, derive_seed(options.seed, {5, epoch}))) {
      std::vector<Image> views;
      views.reserve(3 * batch.size());
      for (int v = 0; v < 2; ++v) {
        for (auto idx : batch) {
          views.push_back(augmenter.apply_weak(normals.at(idx), derive_seed(options.seed, {6, epoch, idx, v})));
        }
      }
      for (auto idx : batch) {
        const auto s = derive_seed(options.seed, {7, epoch, idx});
        views.push_back(augmenter.apply_pseudo_abnormal(normals.at(idx), augmenter.sample_strong(s), s));
      }
      optim.zero_grad();
      auto p = normalize_rows(model.head(model.encoder(to_batch(views, side))));
      const auto n = static_cast<std::int64_t>(batch.size());
      auto a = p.slice(0, 0, n), ap = p.slice(0, n, 2 * n), d = p.slice(0, 2 * n, 3 * n);
      auto clr = clr_loss(a, ap, model.temperature);
      auto da = da_loss(a, ap, d, model.temperature);
      auto total = clr + model.alpha * da;
      const double c = clr.item<double>(), dv = da.item<double>();
      check_finite(droc_loss(c, dv, model.alpha), log.stage, epoch);
      total.backward();
      optim.step();
      clr_sum += c * batch.size();
      da_sum += dv * batch.size();
      seen += batch.size();
    }
    const double c = seen ? clr_sum / seen : 0.0, dv = seen ? da_sum / seen : 0.0;
    EpochRecord rec{epoch, {{"clr", c}, {"da", dv}, {"total", droc_loss(c, dv, model.alpha)}}};
    log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(log.stage, rec);
  }
  model.encoder->eval();
  model.head->eval();
  return log;
}

namespace {

std::vector<std::vector<float>> features(DrocModel& model, const ImageSource& source, const Augmenter& augmenter) {
  auto z = encode_source(model.encoder, source, augmenter).contiguous();
  std::vector<std::vector<float>> rows(static_cast<std::size_t>(z.size(0)));
  for (std::int64_t i = 0; i < z.size(0); ++i) rows[static_cast<std::size_t>(i)] = row_vector(z, i);
  return rows;
}

}  // namespace

OneClassSvm fit_detector(DrocModel& model, const ImageSource& normals, const Augmenter& augmenter,
                         const DetectorOptions& options) {
  if (normals.size() < 2) throw ArgumentError("one-class detector needs at least two normals");
  return OneClassSvm::fit(features(model, normals, augmenter), {options.nu, options.gamma});
}

std::vector<double> score_droc(const OneClassSvm& detector, DrocModel& model, const ImageSource& source,
                               const Augmenter& augmenter) {
  if (!detector.fitted()) throw StateError("one-class detector is not fitted");
  std::vector<double> out;
  out.reserve(source.size());
  for (const auto& z : features(model, source, augmenter)) out.push_back(detector.anomaly_score(z));
  return out;
}

void save_droc(const std::filesystem::path& dir, const DrocModel& model, const OneClassSvm& detector,
               const DrocConfig& config, const nlohmann::json& meta) {
  torch::nn::Module bundle;
  bundle.register_module("encoder", model.encoder.ptr());
  bundle.register_module("head", model.head.ptr());
  save_checkpoint(dir / "droc.pt", bundle, meta);
  write_json_atomic(dir / "detector.json", detector.to_json());
  nlohmann::json index = meta;
  index["method"] = "droc";
  index["config"] = config;
  write_json_atomic(dir / "model.json", index);
}

DrocModel load_droc(const std::filesystem::path& dir, OneClassSvm& detector, nlohmann::json* meta) {
  if (!std::filesystem::exists(dir / "model.json")) throw FormatError("no droc model in " + dir.string());
  auto index = read_json(dir / "model.json");
  auto model = make_droc_model(index.at("config").get<DrocConfig>());
  torch::nn::Module bundle;
  bundle.register_module("encoder", model.encoder.ptr());
  bundle.register_module("head", model.head.ptr());
  load_checkpoint(dir / "droc.pt", bundle);
  model.encoder->eval();
  model.head->eval();
  detector = OneClassSvm::from_json(read_json(dir / "detector.json"));
  if (meta) *meta = index;
  return model;
}

}  // namespace rarecell
