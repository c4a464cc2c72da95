#include "rarecell/encoder.hpp"

#include <bit>

#include "rarecell/errors.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

namespace nn = torch::nn;

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"backbone", c.backbone}, {"latent_dim", c.latent_dim}, {"input_side", c.input_side}, {"bias_free", c.bias_free}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.backbone = j.value("backbone", c.backbone);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.input_side = j.value("input_side", c.input_side);
  c.bias_free = j.value("bias_free", c.bias_free);
}

BackboneSpec backbone_spec(const std::string& tag) {
  if (tag == "resnet18") return {{64, 128, 256, 512}, {2, 2, 2, 2}, 7, 2, true};
  if (tag == "resnet18-mini") return {{16, 32, 64, 128}, {1, 1, 1, 1}, 3, 1, false};
  throw ArgumentError("unknown backbone '" + tag + "'");
}

namespace {

nn::Conv2d conv(int in, int out, int k, int stride, int pad) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(false));
}

nn::BatchNorm2d norm(int c, bool affine) { return nn::BatchNorm2d(nn::BatchNorm2dOptions(c).affine(affine)); }

}  // namespace

BasicBlockImpl::BasicBlockImpl(int in, int out, int stride, bool affine) {
  conv1 = register_module("conv1", conv(in, out, 3, stride, 1));
  bn1 = register_module("bn1", norm(out, affine));
  conv2 = register_module("conv2", conv(out, out, 3, 1, 1));
  bn2 = register_module("bn2", norm(out, affine));
  shortcut = nn::Sequential();
  if (stride != 1 || in != out) {
    shortcut->push_back(conv(in, out, 1, stride, 0));
    shortcut->push_back(norm(out, affine));
  }
  shortcut = register_module("shortcut", shortcut);
}

torch::Tensor BasicBlockImpl::forward(torch::Tensor x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = bn2(conv2(y));
  auto s = shortcut->is_empty() ? x : shortcut->forward(x);
  return torch::relu(y + s);
}

ResidualEncoderImpl::ResidualEncoderImpl(EncoderConfig config) : config_(std::move(config)) {
  spec_ = backbone_spec(config_.backbone);
  if (config_.latent_dim < 0) throw ArgumentError("latent_dim must be >= 0");
  if (config_.input_side < 8) throw ArgumentError("input_side must be >= 8");
  const bool affine = !config_.bias_free;

  stem = nn::Sequential(conv(3, spec_.widths[0], spec_.stem_kernel, spec_.stem_stride, spec_.stem_kernel / 2),
                        norm(spec_.widths[0], affine), nn::ReLU());
  downsample_ = spec_.stem_stride;
  if (spec_.stem_pool) {
    stem->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
    downsample_ *= 2;
  }
  register_module("stem", stem);

  stages = nn::Sequential();
  int in = spec_.widths[0];
  for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
    for (int b = 0; b < spec_.blocks[s]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      stages->push_back(BasicBlock(in, spec_.widths[s], stride, affine));
      in = spec_.widths[s];
    }
    if (s > 0) downsample_ *= 2;
  }
  register_module("stages", stages);

  if (config_.latent_dim > 0) {
    fc = register_module("fc", nn::Linear(nn::LinearOptions(in, config_.latent_dim).bias(!config_.bias_free)));
    output_dim_ = config_.latent_dim;
  } else {
    output_dim_ = in;
  }
}

torch::Tensor ResidualEncoderImpl::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != config_.input_side || x.size(3) != config_.input_side) {
    throw FormatError("encoder expects [B, 3, " + std::to_string(config_.input_side) + ", " +
                      std::to_string(config_.input_side) + "] input");
  }
  auto h = stages->forward(stem->forward(x));
  h = torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
  return fc ? fc(h) : h;
}

ConvDecoderImpl::ConvDecoderImpl(const EncoderConfig& config, int feature_width, int downsample, int latent_dim) {
  if (config.input_side % downsample != 0) {
    throw ArgumentError("input_side " + std::to_string(config.input_side) + " is not a multiple of " +
                        std::to_string(downsample));
  }
  channels_ = feature_width;
  coarse_ = config.input_side / downsample;
  fc = register_module("fc", nn::Linear(latent_dim, channels_ * coarse_ * coarse_));
  body = nn::Sequential();
  int c = channels_;
  for (int ups = std::countr_zero(static_cast<unsigned>(downsample)); ups > 0; --ups) {
    const int next = std::max(c / 2, 8);
    body->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(c, next, 4).stride(2).padding(1).bias(false)));
    body->push_back(nn::BatchNorm2d(next));
    body->push_back(nn::ReLU());
    c = next;
  }
  body->push_back(nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1)));
  register_module("body", body);
}

torch::Tensor ConvDecoderImpl::forward(torch::Tensor z) {
  auto h = torch::relu(fc(z)).view({z.size(0), channels_, coarse_, coarse_});
  return body->forward(h);
}

AutoencoderImpl::AutoencoderImpl(EncoderConfig config) {
  encoder = register_module("encoder", ResidualEncoder(config));
  decoder = register_module("decoder", ConvDecoder(config, encoder->feature_width(), encoder->downsample(),
                                                   encoder->output_dim()));
}

torch::Tensor AutoencoderImpl::forward(torch::Tensor x) { return decoder(encoder(x)); }

torch::Tensor encode(ResidualEncoder& encoder, const std::vector<Image>& images, std::size_t chunk) {
  torch::NoGradGuard no_grad;
  const bool was_training = encoder->is_training();
  encoder->eval();
  std::vector<torch::Tensor> parts;
  const int side = encoder->config().input_side;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<Image> slice(images.begin() + static_cast<std::ptrdiff_t>(start),
                             images.begin() + static_cast<std::ptrdiff_t>(end));
    parts.push_back(encoder(to_batch(slice, side)));
  }
  encoder->train(was_training);
  if (parts.empty()) return torch::empty({0, encoder->output_dim()});
  return torch::cat(parts);
}

torch::Tensor encode_source(ResidualEncoder& encoder, const ImageSource& source, const Augmenter& augmenter,
                            std::size_t chunk) {
  std::vector<torch::Tensor> parts;
  for (std::size_t start = 0; start < source.size(); start += chunk) {
    const std::size_t end = std::min(source.size(), start + chunk);
    std::vector<Image> views;
    views.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) views.push_back(augmenter.apply_deterministic(source.at(i)));
    parts.push_back(encode(encoder, views, chunk));
  }
  if (parts.empty()) return torch::empty({0, encoder->output_dim()});
  return torch::cat(parts);
}

void copy_state(const torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard no_grad;
  auto src_p = from.named_parameters(true);
  for (auto& p : to.named_parameters(true)) p.value().copy_(src_p[p.key()]);
  auto src_b = from.named_buffers(true);
  for (auto& b : to.named_buffers(true)) b.value().copy_(src_b[b.key()]);
}

TrainingLog train_autoencoder(Autoencoder& model, const ImageSource& normals, const Augmenter& augmenter,
                              const OptimOptions& options, double holdout_fraction) {
  if (normals.size() == 0) throw ArgumentError("autoencoder training needs at least one image");
  if (options.epochs < 0) throw ArgumentError("epochs must be >= 0");
  TrainingLog log{"autoencoder", {}};
  const int side = model->encoder->config().input_side;

  std::vector<std::size_t> order(normals.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(options.seed, {0x686f6c64}));
  split_rng.shuffle(order);
  std::size_t n_hold = 0;
  if (holdout_fraction > 0.0 && normals.size() >= 2) {
    n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(holdout_fraction * normals.size())));
    n_hold = std::min(n_hold, normals.size() - 1);
  }
  std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  std::vector<Image> held_views;
  for (auto i : held) held_views.push_back(augmenter.apply_deterministic(normals.at(i)));
  auto holdout_loss = [&]() {
    if (held_views.empty()) return 0.0;
    torch::NoGradGuard no_grad;
    model->eval();
    auto x = to_batch(held_views, side);
    const double l = torch::mse_loss(model(x), x).item<double>();
    model->train();
    return l;
  };

  EpochRecord initial{0, {{"holdout", holdout_loss()}}};
  log.epochs.push_back(initial);
  if (options.on_epoch) options.on_epoch(log.stage, initial);

  torch::optim::Adam optim(model->parameters(),
                           torch::optim::AdamOptions(options.lr).weight_decay(options.weight_decay));
  model->train();
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    double total = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : epoch_batches(train.size(), options.batch, derive_seed(options.seed, {1, epoch}))) {
      std::vector<Image> views;
      views.reserve(batch.size());
      for (auto b : batch) {
        const auto idx = train[b];
        views.push_back(augmenter.apply_weak(normals.at(idx), derive_seed(options.seed, {2, epoch, idx})));
      }
      auto x = to_batch(views, side);
      optim.zero_grad();
      auto loss = torch::mse_loss(model(x), x);
      const double l = loss.item<double>();
      check_finite(l, log.stage, epoch);
      loss.backward();
      optim.step();
      total += l * batch.size();
      seen += batch.size();
    }
    EpochRecord rec{epoch, {{"train", seen ? total / seen : 0.0}, {"holdout", holdout_loss()}}};
    check_finite(rec.values["holdout"], log.stage, epoch);
    log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(log.stage, rec);
  }
  return log;
}

}  // namespace rarecell
