#include <gtest/gtest.h>

#include <cmath>

#include <torch/torch.h>

#include "model_support.hpp"
#include "rarecell/errors.hpp"
#include "rarecell/metrics.hpp"
#include "rarecell/sil.hpp"
#include "rarecell/tensor.hpp"

using namespace rarecell;

namespace {

constexpr int kTiny = 16;

SilConfig tiny_config(int epochs) {
  SilConfig c;
  c.encoder = support::mini_encoder(0, false, kTiny);
  c.epochs = epochs;
  c.batch = 16;
  c.lr = 1e-2;
  return c;
}

struct Split2 {
  InMemoryImages images;
  std::vector<Label> labels;
  std::vector<std::string> normal_ids, abnormal_ids;
};

Split2 two_class(int normals, int abnormals, std::uint64_t seed) {
  Split2 s;
  const auto n = support::cells("n" + std::to_string(seed), normals, false, seed, kTiny);
  const auto a = support::cells("z" + std::to_string(seed), abnormals, true, seed + 1, kTiny);
  support::append(s.images, n);
  support::append(s.images, a);
  s.labels.assign(static_cast<std::size_t>(normals), Label::normal);
  s.labels.resize(static_cast<std::size_t>(normals + abnormals), Label::abnormal);
  for (std::size_t i = 0; i < n.size(); ++i) s.normal_ids.push_back(n.id(i));
  for (std::size_t i = 0; i < a.size(); ++i) s.abnormal_ids.push_back(a.id(i));
  return s;
}

std::vector<std::size_t> order_of(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

TEST(ClassWeights, InverseFrequencyAboveThreshold) {
  const auto w = class_weights(1100, 100, 10.0);
  EXPECT_DOUBLE_EQ(w[0], 1200.0 / (2.0 * 1100.0));
  EXPECT_DOUBLE_EQ(w[1], 1200.0 / (2.0 * 100.0));
  const auto even = class_weights(1000, 100, 10.0);
  EXPECT_EQ(even[0], 1.0);
  EXPECT_EQ(even[1], 1.0);
  EXPECT_THROW(class_weights(0, 10, 10.0), ArgumentError);
}

TEST(Probability, SoftmaxOfAbnormalLogit) {
  EXPECT_DOUBLE_EQ(abnormal_probability(0.0, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(abnormal_probability(0.0, 1000.0), 1.0);
  EXPECT_DOUBLE_EQ(abnormal_probability(1000.0, 0.0), 0.0);
  EXPECT_NEAR(abnormal_probability(1.0, 2.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(FsSil, RequiresBothClasses) {
  Augmenter aug(support::small_policy(kTiny));
  const auto s = two_class(6, 0, 1);
  EXPECT_THROW(train_fs_sil(s.images, s.labels, aug, tiny_config(1), 1), ArgumentError);
  const auto t = two_class(4, 4, 2);
  std::vector<Label> wrong(t.labels.begin(), t.labels.end() - 1);
  EXPECT_THROW(train_fs_sil(t.images, wrong, aug, tiny_config(1), 1), ArgumentError);
}

TEST(FsSil, SeparatesSyntheticClasses) {
  Augmenter aug(support::small_policy(kTiny));
  const auto s = two_class(48, 16, 3);
  TrainingLog log;
  std::vector<int> snapshots;
  auto cfg = tiny_config(8);
  cfg.snapshot_epochs = {4, 8};
  auto model = train_fs_sil(s.images, s.labels, aug, cfg, 7, &log, {},
                            [&](int epoch, SilModel&) { snapshots.push_back(epoch); });
  EXPECT_EQ(snapshots, (std::vector<int>{4, 8}));
  ASSERT_EQ(log.epochs.size(), 8u);
  EXPECT_GT(log.epochs.back().values.at("accuracy"), 0.95);

  const auto test = two_class(40, 10, 11);
  const auto scores = score_sil(model, test.images, aug);
  std::vector<RankedEntry> e;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    EXPECT_GE(scores[i], 0.0);
    EXPECT_LE(scores[i], 1.0);
    e.push_back({test.images.id(i), scores[i], test.labels[i] == Label::abnormal ? 1 : 0});
  }
  EXPECT_DOUBLE_EQ(recall_at_k(RankedList(e), 10, 10), 1.0);
  EXPECT_EQ(scores, score_sil(model, test.images, aug));
}

TEST(WsSil, PureBagsMatchInstanceLabels) {
  Augmenter aug(support::small_policy(kTiny));
  const auto s = two_class(24, 24, 5);
  std::vector<Bag> bags(2);
  bags[0] = {"neg", BagLabel::negative, s.normal_ids, 0.0, {}};
  bags[1] = {"pos", BagLabel::positive, s.abnormal_ids, 1.0, s.abnormal_ids};
  // Identical seeds and equivalent labels: the two learners see the same data
  // in the same order.
  auto ws = train_ws_sil(bags, s.images, aug, tiny_config(3), 9);
  auto fs = train_fs_sil(s.images, s.labels, aug, tiny_config(3), 9);
  const auto test = two_class(10, 10, 21);
  const auto a = score_sil(ws, test.images, aug), b = score_sil(fs, test.images, aug);
  EXPECT_EQ(order_of(a), order_of(b));
  EXPECT_EQ(ws.supervision, Supervision::inherited_labels);
}

TEST(WsSil, Errors) {
  Augmenter aug(support::small_policy(kTiny));
  const auto s = two_class(4, 4, 6);
  std::vector<Bag> only_neg{{"neg", BagLabel::negative, s.normal_ids, 0.0, {}}};
  EXPECT_THROW(train_ws_sil(only_neg, s.images, aug, tiny_config(1), 1), ArgumentError);
  std::vector<Bag> missing{{"neg", BagLabel::negative, {"ghost"}, 0.0, {}},
                           {"pos", BagLabel::positive, s.abnormal_ids, 1.0, {}}};
  EXPECT_THROW(train_ws_sil(missing, s.images, aug, tiny_config(1), 1), IntegrityError);
}

TEST(SilPersistence, SaveLoadRoundTrip) {
  support::TempDir tmp("sil");
  Augmenter aug(support::small_policy(kTiny));
  const auto s = two_class(8, 8, 7);
  auto m = train_fs_sil(s.images, s.labels, aug, tiny_config(1), 3);
  save_sil(tmp.path(), m, tiny_config(1), {{"x", 2}});
  nlohmann::json meta;
  auto back = load_sil(tmp.path(), &meta);
  EXPECT_EQ(meta.at("x"), 2);
  EXPECT_EQ(back.supervision, Supervision::instance_labels);
  EXPECT_EQ(score_sil(m, s.images, aug), score_sil(back, s.images, aug));
}
