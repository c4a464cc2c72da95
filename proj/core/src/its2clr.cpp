#include "rarecell/its2clr.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "rarecell/errors.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

void Its2clrConfig::validate() const {
  if (epochs < 0 || warmup_epochs < 0) throw ArgumentError("its2clr epochs must be >= 0");
  if (mil_refit_period < 1) throw ArgumentError("its2clr.mil_refit_period must be >= 1");
  if (mil_train_budget < 1) throw ArgumentError("its2clr.mil_train_budget must be >= 1");
  if (batch < 4) throw ArgumentError("its2clr.batch must be >= 4");
  if (!(supcon_temperature > 0)) throw ArgumentError("its2clr.supcon_temperature must be > 0");
  const auto s = schedule();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(s[i] > 0 && s[i] <= 50)) throw ArgumentError("its2clr r values must lie in (0, 50]");
    if (i > 0 && s[i] < s[i - 1]) throw ArgumentError("its2clr r_schedule must be nondecreasing");
  }
}

std::vector<double> Its2clrConfig::schedule() const {
  if (!r_schedule.empty()) return r_schedule;
  const int after = std::max(0, epochs - warmup_epochs);
  const int rounds = std::max(1, (after + mil_refit_period - 1) / mil_refit_period);
  std::vector<double> s(static_cast<std::size_t>(rounds) + 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = r_start + (r_end - r_start) * static_cast<double>(i) / static_cast<double>(s.size() - 1);
  }
  return s;
}

void to_json(nlohmann::json& j, const Its2clrConfig& c) {
  j = {{"encoder", c.encoder},
       {"epochs", c.epochs},
       {"batch", c.batch},
       {"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"supcon_temperature", c.supcon_temperature},
       {"warmup_epochs", c.warmup_epochs},
       {"r_schedule", c.r_schedule},
       {"r_start", c.r_start},
       {"r_end", c.r_end},
       {"mil_refit_period", c.mil_refit_period},
       {"mil_train_budget", c.mil_train_budget},
       {"mil_lr", c.mil_lr},
       {"mil_weight_decay", c.mil_weight_decay},
       {"mil_hidden", c.mil_hidden}};
}

void from_json(const nlohmann::json& j, Its2clrConfig& c) {
  if (j.contains("encoder")) {
    c.encoder = j.at("encoder").get<EncoderConfig>();
    if (!j.at("encoder").contains("latent_dim")) c.encoder.latent_dim = 256;
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.supcon_temperature = j.value("supcon_temperature", c.supcon_temperature);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.r_schedule = j.value("r_schedule", c.r_schedule);
  c.r_start = j.value("r_start", c.r_start);
  c.r_end = j.value("r_end", c.r_end);
  c.mil_refit_period = j.value("mil_refit_period", c.mil_refit_period);
  c.mil_train_budget = j.value("mil_train_budget", c.mil_train_budget);
  c.mil_lr = j.value("mil_lr", c.mil_lr);
  c.mil_weight_decay = j.value("mil_weight_decay", c.mil_weight_decay);
  c.mil_hidden = j.value("mil_hidden", c.mil_hidden);
  c.validate();
}

PseudoLabels select_pseudolabels(std::vector<ScoredInstance> bag, double r_percent) {
  if (bag.empty()) throw ArgumentError("pseudo-labeling needs a non-empty bag");
  if (!(r_percent > 0 && r_percent <= 50)) throw ArgumentError("r must lie in (0, 50]");
  std::sort(bag.begin(), bag.end(), [](const ScoredInstance& a, const ScoredInstance& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.instance_id < b.instance_id;
  });
  const std::size_t n = bag.size();
  auto m = static_cast<std::size_t>(std::ceil(r_percent / 100.0 * static_cast<double>(n) - 1e-9));
  PseudoLabels out;
  if (2 * m > n) {
    m = n / 2;
    out.shrunk = true;
  }
  for (std::size_t i = 0; i < m; ++i) out.positives.push_back(bag[i].instance_id);
  for (std::size_t i = n - m; i < n; ++i) out.negatives.push_back(bag[i].instance_id);
  return out;
}

torch::Tensor supcon_loss(const torch::Tensor& embeddings, const std::vector<int>& labels, double tau) {
  const auto n = embeddings.size(0);
  if (embeddings.dim() != 2 || n < 2) throw ArgumentError("supcon_loss needs at least two embeddings");
  if (static_cast<std::int64_t>(labels.size()) != n) throw ArgumentError("one label per embedding is required");
  if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); })) {
    throw ArgumentError("supcon_loss needs two classes");
  }
  auto y = torch::tensor(std::vector<std::int64_t>(labels.begin(), labels.end()), torch::kLong);
  auto eye = torch::eye(n, torch::kBool);
  auto logits = embeddings.matmul(embeddings.t()) / tau;
  logits = logits.masked_fill(eye, -std::numeric_limits<double>::infinity());
  auto log_prob = (logits - torch::logsumexp(logits, 1, true)).masked_fill(eye, 0.0);
  auto pos = y.unsqueeze(0).eq(y.unsqueeze(1)).logical_and(eye.logical_not()).to(embeddings.scalar_type());
  auto count = pos.sum(1);
  auto has = count > 0;
  auto per_anchor = -(pos * log_prob).sum(1) / count.clamp_min(1);
  return per_anchor.masked_select(has).mean();
}

MilAggregatorImpl::MilAggregatorImpl(int in, int hidden) {
  attn_v = register_module("attn_v", torch::nn::Linear(in, hidden));
  attn_u = register_module("attn_u", torch::nn::Linear(in, hidden));
  attn_w = register_module("attn_w", torch::nn::Linear(hidden, 1));
  classifier = register_module("classifier", torch::nn::Linear(in, 1));
}

torch::Tensor MilAggregatorImpl::attention(const torch::Tensor& h) {
  auto gated = torch::tanh(attn_v(h)) * torch::sigmoid(attn_u(h));
  return torch::softmax(attn_w(gated).squeeze(1), 0);
}

torch::Tensor MilAggregatorImpl::forward(const torch::Tensor& h) {
  auto a = attention(h);
  return classifier(a.unsqueeze(0).matmul(h)).squeeze(1);
}

torch::Tensor MilAggregatorImpl::instance_confidence(const torch::Tensor& h) {
  return torch::sigmoid(classifier(h).squeeze(1));
}

MilFitResult refit_mil(MilAggregator& aggregator, const std::vector<torch::Tensor>& bag_embeddings,
                       const std::vector<int>& bag_labels, int budget, double lr, double weight_decay,
                       std::uint64_t seed) {
  if (bag_embeddings.size() != bag_labels.size() || bag_embeddings.empty()) {
    throw ArgumentError("refit_mil needs one label per bag");
  }
  bool pos = false, neg = false;
  for (std::size_t b = 0; b < bag_embeddings.size(); ++b) {
    if (bag_embeddings[b].dim() != 2 || bag_embeddings[b].size(0) == 0) throw ArgumentError("refit_mil: empty bag");
    (bag_labels[b] ? pos : neg) = true;
  }
  if (!pos || !neg) throw ArgumentError("refit_mil needs positive and negative bags");
  torch::optim::Adam optim(aggregator->parameters(), torch::optim::AdamOptions(lr).weight_decay(weight_decay));
  aggregator->train();
  MilFitResult result;
  for (int epoch = 1; epoch <= budget; ++epoch) {
    std::vector<std::size_t> order(bag_embeddings.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, {10, epoch}));
    rng.shuffle(order);
    double sum = 0.0;
    for (auto b : order) {
      optim.zero_grad();
      auto target = torch::full({1}, static_cast<float>(bag_labels[b]));
      auto loss = torch::binary_cross_entropy_with_logits(aggregator(bag_embeddings[b].detach()), target);
      const double l = loss.item<double>();
      check_finite(l, "mil", epoch);
      loss.backward();
      optim.step();
      sum += l;
    }
    result.epochs_run = epoch;
    result.final_loss = sum / static_cast<double>(order.size());
    if (result.final_loss < 1e-3) break;
  }
  aggregator->eval();
  return result;
}

nlohmann::json to_json(const std::vector<Its2clrRound>& rounds) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rounds) {
    out.push_back({{"round", r.round},
                   {"first_epoch", r.first_epoch},
                   {"last_epoch", r.last_epoch},
                   {"r_percent", r.r_percent},
                   {"mil_epochs", r.mil_epochs},
                   {"mil_loss", r.mil_loss},
                   {"supcon_loss", r.supcon_loss},
                   {"shrunk_bags", r.shrunk_bags},
                   {"positives", r.positives},
                   {"negatives", r.negatives}});
  }
  return out;
}

torch::Tensor its2clr_embeddings(Its2clrModel& model, const ImageSource& source, const Augmenter& augmenter) {
  return normalize_rows(encode_source(model.encoder, source, augmenter));
}

namespace {

// Cycles through a shuffled index list, reshuffling on wrap-around.
class Cycler {
 public:
  Cycler(std::vector<std::size_t> items, std::uint64_t seed) : items_(std::move(items)), rng_(seed) {
    rng_.shuffle(items_);
  }
  std::size_t next() {
    if (pos_ == items_.size()) {
      rng_.shuffle(items_);
      pos_ = 0;
    }
    return items_[pos_++];
  }

 private:
  std::vector<std::size_t> items_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace

Its2clrModel train_its2clr(const std::vector<Bag>& bags, const ImageSource& images, const Augmenter& augmenter,
                           const Its2clrConfig& config, std::uint64_t seed, std::vector<Its2clrRound>* rounds,
                           const EpochCallback& on_epoch) {
  config.validate();
  bool any_pos = false, any_neg = false;
  for (const auto& b : bags) (b.bag_label == BagLabel::positive ? any_pos : any_neg) = true;
  if (!any_pos || !any_neg) throw ArgumentError("its2clr needs at least one positive and one negative bag");

  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < images.size(); ++i) where.emplace(images.id(i), i);
  std::vector<std::vector<std::size_t>> members(bags.size());
  std::vector<std::size_t> all;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    if (bags[b].members.empty()) throw ArgumentError("bag '" + bags[b].bag_id + "' is empty");
    for (const auto& id : bags[b].members) {
      auto it = where.find(id);
      if (it == where.end()) throw IntegrityError("bag member '" + id + "' has no image");
      members[b].push_back(all.size());
      all.push_back(it->second);
    }
  }
  const auto pool = gather(images, all);
  std::vector<int> bag_labels;
  for (const auto& b : bags) bag_labels.push_back(b.bag_label == BagLabel::positive ? 1 : 0);

  seed_torch(seed);
  Its2clrModel model;
  model.encoder = ResidualEncoder(config.encoder);
  model.aggregator = MilAggregator(model.encoder->output_dim(), config.mil_hidden);

  const auto schedule = config.schedule();
  const int total_epochs = config.warmup_epochs + static_cast<int>(schedule.size() - 1) * config.mil_refit_period;
  torch::optim::SGD optim(model.encoder->parameters(), torch::optim::SGDOptions(config.lr)
                                                            .momentum(config.momentum)
                                                            .weight_decay(config.weight_decay));
  const int side = config.encoder.input_side;
  int epoch = 0;

  auto refit = [&](std::uint64_t round_seed, Its2clrRound& log) {
    auto emb = its2clr_embeddings(model, pool, augmenter);
    std::vector<torch::Tensor> per_bag;
    for (const auto& m : members) {
      per_bag.push_back(emb.index({torch::tensor(std::vector<std::int64_t>(m.begin(), m.end()), torch::kLong)}));
    }
    auto fit = refit_mil(model.aggregator, per_bag, bag_labels, config.mil_train_budget, config.mil_lr,
                         config.mil_weight_decay, round_seed);
    log.mil_epochs = fit.epochs_run;
    log.mil_loss = fit.final_loss;
    return per_bag;
  };

  for (std::size_t round = 0; round < schedule.size(); ++round) {
    Its2clrRound log;
    log.round = static_cast<int>(round);
    log.r_percent = schedule[round];
    const std::uint64_t round_seed = derive_seed(seed, {11, round});
    auto per_bag = refit(round_seed, log);

    std::vector<std::size_t> pos_idx, neg_idx;
    {
      torch::NoGradGuard no_grad;
      for (std::size_t b = 0; b < bags.size(); ++b) {
        if (bag_labels[b] == 0) {
          neg_idx.insert(neg_idx.end(), members[b].begin(), members[b].end());
          continue;
        }
        auto conf = model.aggregator->instance_confidence(per_bag[b]).to(torch::kFloat64).contiguous();
        std::vector<ScoredInstance> scored;
        std::unordered_map<std::string, std::size_t> local;
        for (std::size_t i = 0; i < members[b].size(); ++i) {
          scored.push_back({bags[b].members[i], conf.data_ptr<double>()[i]});
          local.emplace(bags[b].members[i], members[b][i]);
        }
        auto sel = select_pseudolabels(std::move(scored), schedule[round]);
        log.shrunk_bags += sel.shrunk ? 1 : 0;
        for (const auto& id : sel.positives) pos_idx.push_back(local.at(id));
        log.positives.insert(log.positives.end(), sel.positives.begin(), sel.positives.end());
        if (round > 0) {
          for (const auto& id : sel.negatives) neg_idx.push_back(local.at(id));
          log.negatives.insert(log.negatives.end(), sel.negatives.begin(), sel.negatives.end());
        }
      }
    }

    const int round_epochs = round == 0 ? config.warmup_epochs : config.mil_refit_period;
    log.first_epoch = epoch + 1;
    Cycler pos_cycle(pos_idx, derive_seed(round_seed, {1}));
    Cycler neg_cycle(neg_idx, derive_seed(round_seed, {2}));
    const std::size_t half = static_cast<std::size_t>(config.batch) / 2;
    const std::size_t steps = std::max<std::size_t>(1, (pos_idx.size() + neg_idx.size() + config.batch - 1) /
                                                           static_cast<std::size_t>(config.batch));
    double round_loss = 0.0;
    int trained_epochs = 0;
    model.encoder->train();
    for (int e = 0; e < round_epochs && !pos_idx.empty() && !neg_idx.empty(); ++e) {
      ++epoch;
      const double lr = 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * (epoch - 1) / std::max(1, total_epochs)));
      for (auto& group : optim.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
      double sum = 0.0;
      for (std::size_t step = 0; step < steps; ++step) {
        std::vector<std::size_t> picks;
        std::vector<int> labels;
        for (std::size_t i = 0; i < half; ++i) {
          picks.push_back(pos_cycle.next());
          labels.push_back(1);
        }
        for (std::size_t i = 0; i < half; ++i) {
          picks.push_back(neg_cycle.next());
          labels.push_back(0);
        }
        std::vector<Image> views;
        std::vector<int> view_labels;
        for (int v = 0; v < 2; ++v) {
          for (std::size_t i = 0; i < picks.size(); ++i) {
            views.push_back(augmenter.apply_weak(pool.at(picks[i]),
                                                 derive_seed(seed, {12, epoch, step, i, static_cast<std::uint64_t>(v)})));
            view_labels.push_back(labels[i]);
          }
        }
        optim.zero_grad();
        auto z = normalize_rows(model.encoder(to_batch(views, side)));
        auto loss = supcon_loss(z, view_labels, config.supcon_temperature);
        const double l = loss.item<double>();
        check_finite(l, "its2clr round " + std::to_string(round), epoch);
        loss.backward();
        optim.step();
        sum += l;
      }
      EpochRecord rec{epoch, {{"supcon", sum / steps}, {"round", static_cast<double>(round)}, {"lr", lr}}};
      if (on_epoch) on_epoch("its2clr", rec);
      round_loss += sum / steps;
      ++trained_epochs;
    }
    model.encoder->eval();
    log.last_epoch = epoch;
    log.supcon_loss = trained_epochs ? round_loss / trained_epochs : 0.0;
    if (rounds) rounds->push_back(std::move(log));
  }

  Its2clrRound final_fit;
  final_fit.round = static_cast<int>(schedule.size());
  final_fit.first_epoch = final_fit.last_epoch = epoch;
  refit(derive_seed(seed, {13}), final_fit);
  if (rounds) rounds->push_back(std::move(final_fit));
  return model;
}

std::vector<double> score_its2clr(Its2clrModel& model, const ImageSource& source, const Augmenter& augmenter) {
  if (!model.encoder || !model.aggregator) throw StateError("its2clr model is not trained");
  torch::NoGradGuard no_grad;
  model.aggregator->eval();
  auto c = model.aggregator->instance_confidence(its2clr_embeddings(model, source, augmenter))
               .to(torch::kFloat64)
               .contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

void save_its2clr(const std::filesystem::path& dir, const Its2clrModel& model, const Its2clrConfig& config,
                  const nlohmann::json& meta) {
  torch::nn::Module bundle;
  bundle.register_module("encoder", model.encoder.ptr());
  bundle.register_module("aggregator", model.aggregator.ptr());
  save_checkpoint(dir / "its2clr.pt", bundle, meta);
  nlohmann::json index = meta;
  index["method"] = "its2clr";
  index["config"] = config;
  write_json_atomic(dir / "model.json", index);
}

Its2clrModel load_its2clr(const std::filesystem::path& dir, nlohmann::json* meta) {
  if (!std::filesystem::exists(dir / "model.json")) throw FormatError("no its2clr model in " + dir.string());
  auto index = read_json(dir / "model.json");
  const auto config = index.at("config").get<Its2clrConfig>();
  Its2clrModel model;
  model.encoder = ResidualEncoder(config.encoder);
  model.aggregator = MilAggregator(model.encoder->output_dim(), config.mil_hidden);
  torch::nn::Module bundle;
  bundle.register_module("encoder", model.encoder.ptr());
  bundle.register_module("aggregator", model.aggregator.ptr());
  load_checkpoint(dir / "its2clr.pt", bundle);
  model.encoder->eval();
  model.aggregator->eval();
  if (meta) *meta = index;
  return model;
}

}  // namespace rarecell
