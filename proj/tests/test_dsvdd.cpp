#include <gtest/gtest.h>

#include <torch/torch.h>

#include "model_support.hpp"
#include "rarecell/dsvdd.hpp"
#include "rarecell/errors.hpp"
#include "rarecell/tensor.hpp"

using namespace rarecell;

namespace {

constexpr int kTiny = 16;

DsvddModel fresh_model(const ImageSource& normals, const Augmenter& aug, std::uint64_t seed, int views = 4) {
  seed_torch(seed);
  DsvddModel m;
  m.encoder = ResidualEncoder(support::mini_encoder(8, true, kTiny));
  m.center = clamp_center(estimate_center(m.encoder, normals, aug), 0.1);
  m.n_views = views;
  return m;
}

}  // namespace

TEST(Center, ClampExamples) {
  const auto c = clamp_center(torch::tensor({-0.03, 0.5, 0.0, 0.1, -0.7, 1e-9}, torch::kFloat64), 0.1);
  const std::vector<double> expected{-0.1, 0.5, 0.1, 0.1, -0.7, 0.1};
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(c[i].item<double>(), expected[i]);
  EXPECT_THROW(clamp_center(c, 0.0), ArgumentError);
}

TEST(Center, MeanOfDeterministicEmbeddings) {
  Augmenter aug(support::small_policy(kTiny));
  const auto normals = support::cells("n", 10, false, 3, kTiny);
  seed_torch(1);
  ResidualEncoder enc(support::mini_encoder(8, true, kTiny));
  const auto c = estimate_center(enc, normals, aug);
  const auto z = encode_source(enc, normals, aug);
  EXPECT_TRUE(torch::allclose(c.to(torch::kFloat64), z.to(torch::kFloat64).mean(0), 1e-6, 1e-7));
  EXPECT_THROW(estimate_center(enc, InMemoryImages{}, aug), ArgumentError);
}

TEST(Objective, HandExamples) {
  const auto c = torch::zeros({3});
  EXPECT_FLOAT_EQ(dsvdd_objective(torch::tensor({{3.0f, 0.0f, 0.0f}}), c).item<float>(), 9.0f);
  EXPECT_FLOAT_EQ(dsvdd_objective(torch::tensor({{1.0f, 0.0f, 0.0f}, {0.0f, 2.0f, 2.0f}}), c).item<float>(), 4.5f);
  EXPECT_FLOAT_EQ(dsvdd_objective(c.unsqueeze(0).repeat({4, 1}), c).item<float>(), 0.0f);
}

TEST(Objective, WeightNormCountsOnlyMatricesAndKernels) {
  ResidualEncoder enc(support::mini_encoder(8, false, kTiny));
  double expected = 0.0;
  for (const auto& p : enc->parameters()) {
    if (p.dim() > 1) expected += p.pow(2).sum().item<double>();
  }
  EXPECT_NEAR(weight_norm_sq(*enc).item<double>(), expected, 1e-6 * expected);
}

TEST(Blend, Examples) {
  EXPECT_DOUBLE_EQ(blend_score({1.0, 3.0, 2.0}, 0.35), 1.7);
  EXPECT_DOUBLE_EQ(blend_score({1.0, 3.0, 2.0}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(blend_score({1.0, 3.0, 2.0}, 1.0), 3.0);
  EXPECT_DOUBLE_EQ(blend_score({4.0, 3.0}, 0.5), 4.0);
  EXPECT_THROW(blend_score({}, 0.3), ArgumentError);
  EXPECT_THROW(blend_score({1.0}, 1.5), ArgumentError);
}

TEST(Views, DistanceOfKnownOffset) {
  Augmenter aug(support::small_policy(kTiny));
  const auto normals = support::cells("n", 8, false, 4, kTiny);
  auto m = fresh_model(normals, aug, 2, 1);
  const auto x = normals.at(0);
  const auto z = encode(m.encoder, {aug.apply_deterministic(x)})[0];
  auto offset = torch::zeros_like(z);
  offset[0] = 3.0f;
  offset[1] = 4.0f;
  m.center = z - offset;
  const auto d = view_distances(m, x, aug);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR(d[0], 25.0, 1e-4);

  m.n_views = 4;
  const auto all = view_distances(m, x, aug);
  ASSERT_EQ(all.size(), 4u);
  EXPECT_DOUBLE_EQ(all[0], d[0]);
  const auto batched = view_distances(m, normals, aug);
  ASSERT_EQ(batched.size(), normals.size());
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(batched[0][k], all[k], 1e-5 * (1 + all[k]));
}

TEST(Views, PolicyMustSupplyEnoughViews) {
  auto p = support::small_policy(kTiny);
  p.tta.n_views = 2;
  Augmenter aug(p);
  const auto normals = support::cells("n", 4, false, 4, kTiny);
  auto m = fresh_model(normals, aug, 2, 4);
  EXPECT_THROW(view_distances(m, normals.at(0), aug), ArgumentError);
}

TEST(Training, PreconditionsOnCenter) {
  Augmenter aug(support::small_policy(kTiny));
  const auto normals = support::cells("n", 8, false, 5, kTiny);
  auto m = fresh_model(normals, aug, 3);
  OptimOptions o;
  o.epochs = 1;
  auto no_center = m;
  no_center.center = torch::Tensor();
  EXPECT_THROW(train_dsvdd(no_center, normals, aug, o), PreconditionError);
  auto short_center = m;
  short_center.center = torch::full({3}, 0.5);
  EXPECT_THROW(train_dsvdd(short_center, normals, aug, o), PreconditionError);
  auto unclamped = m;
  unclamped.center = m.center.clone();
  unclamped.center[0] = 0.01;
  EXPECT_THROW(train_dsvdd(unclamped, normals, aug, o), PreconditionError);
}

TEST(Training, LogsTermsKeepsCenterAndReducesLoss) {
  Augmenter aug(support::small_policy(kTiny));
  const auto normals = support::cells("n", 48, false, 6, kTiny);
  auto m = fresh_model(normals, aug, 4);
  const auto c0 = m.center.clone();
  OptimOptions o;
  o.epochs = 6;
  o.lr = 1e-3;
  o.batch = 16;
  int callbacks = 0;
  o.on_epoch = [&](const std::string&, const EpochRecord&) { ++callbacks; };
  const auto log = train_dsvdd(m, normals, aug, o);
  EXPECT_EQ(callbacks, 6);
  ASSERT_EQ(log.epochs.size(), 6u);
  for (const auto& e : log.epochs) {
    // "reg" is logged with the decay factor already applied.
    EXPECT_NEAR(e.values.at("total"), e.values.at("data") + e.values.at("reg"), 1e-12);
    EXPECT_GT(e.values.at("reg"), 0.0);
  }
  EXPECT_LT(log.epochs.back().values.at("data"), log.epochs.front().values.at("data"));
  EXPECT_TRUE(torch::equal(c0, m.center));
}

TEST(Ensemble, AveragesMemberScores) {
  Augmenter aug(support::small_policy(kTiny));
  const auto normals = support::cells("n", 8, false, 7, kTiny);
  DsvddEnsemble e{{fresh_model(normals, aug, 11), fresh_model(normals, aug, 12)}};
  const auto x = support::cells("a", 1, true, 8, kTiny).at(0);
  const double s0 = blend_score(view_distances(e.members[0], x, aug), e.members[0].blend);
  const double s1 = blend_score(view_distances(e.members[1], x, aug), e.members[1].blend);
  EXPECT_NEAR(ensemble_score(e, x, aug), (s0 + s1) / 2.0, 1e-12);
  DsvddEnsemble empty;
  EXPECT_THROW(ensemble_score(empty, x, aug), ArgumentError);
}

TEST(Pipeline, FitSaveLoadScoresIdentically) {
  support::TempDir tmp("dsvdd");
  Augmenter aug(support::small_policy(kTiny));
  const auto normals = support::cells("n", 24, false, 9, kTiny);
  DsvddConfig cfg;
  cfg.encoder = support::mini_encoder(8, true, kTiny);
  cfg.seeds = 2;
  cfg.ae_epochs = 1;
  cfg.epochs = 1;
  cfg.batch = 8;
  std::vector<TrainingLog> logs;
  auto e = fit_dsvdd(normals, aug, cfg, 5, &logs);
  ASSERT_EQ(e.members.size(), 2u);
  EXPECT_EQ(logs.size(), 4u);  // autoencoder + dsvdd per member
  EXPECT_FALSE(torch::equal(e.members[0].center, e.members[1].center));
  for (const auto& m : e.members) EXPECT_GE(m.center.abs().min().item<double>(), 0.1);

  save_dsvdd(tmp.path(), e, cfg, {{"config_hash", "abc"}});
  nlohmann::json meta;
  auto back = load_dsvdd(tmp.path(), &meta);
  EXPECT_EQ(meta.at("config_hash"), "abc");
  const auto probe = support::cells("p", 5, true, 10, kTiny);
  EXPECT_EQ(ensemble_scores(e, probe, aug), ensemble_scores(back, probe, aug));
}

TEST(Config, JsonRoundTripAndValidation) {
  DsvddConfig c;
  c.blend = 0.5;
  c.seeds = 3;
  const auto back = nlohmann::json(c).get<DsvddConfig>();
  EXPECT_DOUBLE_EQ(back.blend, 0.5);
  EXPECT_EQ(back.seeds, 3);
  EXPECT_TRUE(back.encoder.bias_free);
  EXPECT_THROW(nlohmann::json({{"blend", 1.5}}).get<DsvddConfig>(), ArgumentError);
  EXPECT_THROW(nlohmann::json({{"seeds", 0}}).get<DsvddConfig>(), ArgumentError);
  EXPECT_THROW(nlohmann::json({{"epsilon", 0.0}}).get<DsvddConfig>(), ArgumentError);
}
